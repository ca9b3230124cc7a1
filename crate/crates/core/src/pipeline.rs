//! The full generator: component crops → local embeddings → placement on
//! zero canvases at the target centroids → concatenation with mask features
//! → foreground decoding → background fusion.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::image::{encode_onehot, Image, LabelMask, OneHotMask};
use crate::nn::{
    BackgroundEncoder, ForegroundDecoder, FuseDecoder, LocalAutoencoder, MaskEncoder, NetSpec, VarStore,
};
use crate::preprocess::{component_centers, extract_background, extract_component_at, ComponentCenter, ComponentCrop};
use crate::schema::{ComponentId, LabelSchema};

/// Center coordinate at feature resolution: `round(px / factor)`, halves up.
pub fn feature_coord(px: usize, factor: usize) -> usize {
    (px + factor / 2) / factor
}

/// Source and destination index ranges of a clipped paste.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasteWindow {
    pub src_rows: Range<usize>,
    pub src_cols: Range<usize>,
    pub dst_rows: Range<usize>,
    pub dst_cols: Range<usize>,
}

fn clip_axis(len: usize, anchor: usize, center: usize, canvas: usize) -> Option<(Range<usize>, Range<usize>)> {
    let start = center as isize - anchor as isize;
    let lo = start.max(0);
    let hi = (start + len as isize).min(canvas as isize);
    if lo >= hi {
        return None;
    }
    let dst = lo as usize..hi as usize;
    let src = (lo - start) as usize..(hi - start) as usize;
    Some((src, dst))
}

/// Window placing a `size` feature map so that its `anchor` element lands on
/// `center` of a `canvas`-sized map; out-of-bounds rows and columns are
/// dropped. `None` when nothing overlaps.
pub fn paste_window(
    size: (usize, usize),
    anchor: (usize, usize),
    center: (usize, usize),
    canvas: (usize, usize),
) -> Option<PasteWindow> {
    let (src_rows, dst_rows) = clip_axis(size.0, anchor.0, center.0, canvas.0)?;
    let (src_cols, dst_cols) = clip_axis(size.1, anchor.1, center.1, canvas.1)?;
    Some(PasteWindow {
        src_rows,
        src_cols,
        dst_rows,
        dst_cols,
    })
}

/// Pastes `(C, h, w)` features into a zero `(C, H, W)` canvas, with the
/// feature's `anchor` element on `center` (feature-resolution coordinates).
pub fn place_anchored(
    features: &Tensor,
    anchor: (usize, usize),
    center: Option<(usize, usize)>,
    canvas: (usize, usize),
) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    if h > canvas.0 || w > canvas.1 {
        return Err(Error::Shape(format!(
            "feature {h}x{w} larger than canvas {}x{}",
            canvas.0, canvas.1
        )));
    }
    let zeros = || Tensor::zeros((c, canvas.0, canvas.1), features.dtype(), features.device());
    let Some(center) = center else {
        return Ok(zeros()?);
    };
    let Some(win) = paste_window((h, w), anchor, center, canvas) else {
        return Ok(zeros()?);
    };
    let patch = features
        .narrow(1, win.src_rows.start, win.src_rows.len())?
        .narrow(2, win.src_cols.start, win.src_cols.len())?;
    let patch = patch
        .pad_with_zeros(1, win.dst_rows.start, canvas.0 - win.dst_rows.end)?
        .pad_with_zeros(2, win.dst_cols.start, canvas.1 - win.dst_cols.end)?;
    Ok(patch)
}

/// Pastes features centered on a component center given in working-resolution
/// pixels. An absent component yields an all-zero canvas.
pub fn place(
    features: &Tensor,
    center: &ComponentCenter,
    canvas: (usize, usize),
    downsample_factor: usize,
) -> Result<Tensor> {
    let (_, h, w) = features.dims3()?;
    let at = center.present.then(|| {
        (
            feature_coord(center.center.0, downsample_factor),
            feature_coord(center.center.1, downsample_factor),
        )
    });
    place_anchored(features, (h / 2, w / 2), at, canvas)
}

/// Channel concatenation in [`ComponentId`] order, then the mask features.
pub fn assemble(canvases: &[Tensor], mask_features: &Tensor) -> Result<Tensor> {
    if canvases.len() != 5 {
        return Err(Error::Shape(format!("expected 5 canvases, got {}", canvases.len())));
    }
    let spatial = |t: &Tensor| -> Result<(usize, usize)> {
        let d = t.dims();
        if d.len() < 2 {
            return Err(Error::Shape(format!("tensor rank {} too small", d.len())));
        }
        Ok((d[d.len() - 2], d[d.len() - 1]))
    };
    let want = spatial(mask_features)?;
    for c in canvases {
        if spatial(c)? != want || c.rank() != mask_features.rank() {
            return Err(Error::Shape(format!(
                "canvas {:?} vs mask features {:?}",
                c.dims(),
                mask_features.dims()
            )));
        }
    }
    let dim = mask_features.rank() - 3;
    let mut parts: Vec<&Tensor> = canvases.iter().collect();
    parts.push(mask_features);
    Ok(Tensor::cat(&parts, dim)?)
}

/// The five crops feeding the local auto-encoders, possibly from different
/// source faces.
#[derive(Debug, Clone)]
pub struct SourceCrops(pub [ComponentCrop; 5]);

/// Everything the generator needs from the target side.
#[derive(Debug, Clone)]
pub struct TargetLayout {
    pub centers: [ComponentCenter; 5],
    pub onehot: OneHotMask,
    pub background: Image,
}

pub fn source_crops(image: &Image, mask: &LabelMask, schema: &LabelSchema, spec: &NetSpec) -> Result<SourceCrops> {
    let centers = component_centers(mask, schema);
    let crops = ComponentId::ALL.map(|c| extract_component_at(image, mask, &centers[c.index()], schema, spec.crop_size(c)));
    let [a, b, c, d, e] = crops;
    Ok(SourceCrops([a?, b?, c?, d?, e?]))
}

pub fn target_layout(image: &Image, mask: &LabelMask, schema: &LabelSchema) -> Result<TargetLayout> {
    Ok(TargetLayout {
        centers: component_centers(mask, schema),
        onehot: encode_onehot(mask, schema)?,
        background: extract_background(image, mask, schema)?,
    })
}

#[derive(Debug)]
pub struct GeneratorOutput {
    /// Final images `(B, 3, R, R)`.
    pub image: Tensor,
    pub foreground: Tensor,
    /// Per-component crops `(B, 3, h, w)`, validity `(B, 1, h, w)` and local
    /// reconstructions (only when requested).
    pub crops: Vec<Tensor>,
    pub valid: Vec<Tensor>,
    pub recon: Vec<Tensor>,
    /// One-hot target masks `(B, L, R, R)`.
    pub target_onehot: Tensor,
}

/// All generator-side sub-networks.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: NetSpec,
    locals: Vec<LocalAutoencoder>,
    mask_encoder: MaskEncoder,
    foreground: ForegroundDecoder,
    background: BackgroundEncoder,
    fuse: FuseDecoder,
}

impl Generator {
    pub fn new(store: &mut VarStore, spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut root = store.root();
        let locals = ComponentId::ALL
            .iter()
            .map(|&c| LocalAutoencoder::new(&mut root.pp("local").pp(c.name()), spec, c))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            locals,
            mask_encoder: MaskEncoder::new(&mut root.pp("mask_encoder"), spec)?,
            foreground: ForegroundDecoder::new(&mut root.pp("foreground"), spec)?,
            background: BackgroundEncoder::new(&mut root.pp("background_encoder"), spec)?,
            fuse: FuseDecoder::new(&mut root.pp("fuse"), spec)?,
        })
    }

    /// Restores the generator half of a GAN checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Gan {
            return Err(Error::Checkpoint("not a GAN checkpoint".into()));
        }
        let mut store = VarStore::new(0, DType::F32, &Device::Cpu).freeze();
        let g = Self::new(&mut store, &ckpt.meta.spec)?;
        store.load(&ckpt.group("g"), "")?;
        Ok(g)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn local(&self, c: ComponentId) -> &LocalAutoencoder {
        &self.locals[c.index()]
    }

    pub fn mask_encoder(&self) -> &MaskEncoder {
        &self.mask_encoder
    }

    pub fn background_encoder(&self) -> &BackgroundEncoder {
        &self.background
    }

    pub fn fuse_decoder(&self) -> &FuseDecoder {
        &self.fuse
    }

    pub fn foreground_decoder(&self) -> &ForegroundDecoder {
        &self.foreground
    }

    /// Batched forward pass. `sources[b]` supplies appearance, `targets[b]`
    /// shape, mask and background.
    pub fn forward(
        &self,
        sources: &[SourceCrops],
        targets: &[TargetLayout],
        dtype: DType,
        device: &Device,
        with_recon: bool,
    ) -> Result<GeneratorOutput> {
        if sources.len() != targets.len() || sources.is_empty() {
            return Err(Error::Shape(format!(
                "{} sources vs {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let sources: Vec<&SourceCrops> = sources.iter().collect();
        let mut embeddings = Vec::with_capacity(5);
        let mut crops = Vec::with_capacity(5);
        let mut valid = Vec::with_capacity(5);
        let mut recon = Vec::new();
        for comp in ComponentId::ALL {
            let ae = &self.locals[comp.index()];
            let (crop_t, valid_t) = self.crop_tensors(comp, &sources, dtype, device)?;
            let emb = ae.encode(&crop_t)?;
            if with_recon {
                recon.push(ae.decode(&emb)?);
            }
            embeddings.push(emb);
            crops.push(crop_t);
            valid.push(valid_t);
        }
        let (image, foreground, target_onehot) = self.compose(&sources, &embeddings, targets, dtype, device)?;
        Ok(GeneratorOutput {
            image,
            foreground,
            crops,
            valid,
            recon,
            target_onehot,
        })
    }

    fn crop_tensors(
        &self,
        comp: ComponentId,
        sources: &[&SourceCrops],
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.locals[comp.index()].crop_size();
        let b = sources.len();
        let mut pix = Vec::with_capacity(b * 3 * h * w);
        let mut val = Vec::with_capacity(b * h * w);
        for s in sources {
            let crop = &s.0[comp.index()];
            if crop.component != comp || crop.size() != (h, w) {
                return Err(Error::Shape(format!(
                    "crop for {comp} is {} {:?}, expected {:?}",
                    crop.component,
                    crop.size(),
                    (h, w)
                )));
            }
            pix.extend_from_slice(crop.image.data());
            val.extend(crop.valid.data.iter().map(|&v| v as u8 as f32));
        }
        let crop_t = Tensor::from_vec(pix, (b, 3, h, w), device)?.to_dtype(dtype)?;
        let valid_t = Tensor::from_vec(val, (b, 1, h, w), device)?.to_dtype(dtype)?;
        Ok((crop_t, valid_t))
    }

    /// Placement, mask fusion, decoding and background fusion given the
    /// per-component embeddings `(B, C, h', w')`. Returns image, foreground
    /// and one-hot target masks.
    fn compose(
        &self,
        sources: &[&SourceCrops],
        embeddings: &[Tensor],
        targets: &[TargetLayout],
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let spec = &self.spec;
        let (b, r, f) = (sources.len(), spec.resolution, spec.downsample_factor);
        if targets.len() != b || embeddings.len() != 5 {
            return Err(Error::Shape(format!("{b} sources vs {} targets", targets.len())));
        }
        let fs = spec.feature_size();
        let mut canvases = Vec::with_capacity(5);
        for comp in ComponentId::ALL {
            let emb = &embeddings[comp.index()];
            let mut placed = Vec::with_capacity(b);
            for (i, (s, t)) in sources.iter().zip(targets).enumerate() {
                let crop = &s.0[comp.index()];
                let (ar, ac) = crop.anchor();
                let anchor = (feature_coord(ar, f), feature_coord(ac, f));
                let target = &t.centers[comp.index()];
                let at = (crop.center.present && target.present)
                    .then(|| (feature_coord(target.center.0, f), feature_coord(target.center.1, f)));
                placed.push(place_anchored(&emb.get(i)?, anchor, at, (fs, fs))?);
            }
            canvases.push(Tensor::stack(&placed, 0)?);
        }
        let labels = spec.label_count;
        let mut onehot = Vec::with_capacity(b * labels * r * r);
        let mut bg = Vec::with_capacity(b * 3 * r * r);
        for t in targets {
            if t.onehot.labels != labels || t.onehot.height != r || t.background.height() != r {
                return Err(Error::Shape(format!(
                    "target layout must be {labels} labels at {r}x{r}"
                )));
            }
            onehot.extend_from_slice(&t.onehot.data);
            bg.extend_from_slice(t.background.data());
        }
        let onehot = Tensor::from_vec(onehot, (b, labels, r, r), device)?.to_dtype(dtype)?;
        let bg = Tensor::from_vec(bg, (b, 3, r, r), device)?.to_dtype(dtype)?;
        let fused = assemble(&canvases, &self.mask_encoder.forward(&onehot)?)?;
        let foreground = self.foreground.forward(&fused)?;
        let image = self.fuse.forward(&foreground, &self.background.forward(&bg)?)?;
        Ok((image, foreground, onehot))
    }

    /// Local embeddings of one source face, computed in `f32` on the CPU.
    pub fn embed(&self, crops: SourceCrops) -> Result<SourceEmbedding> {
        let mut embeddings = Vec::with_capacity(5);
        for comp in ComponentId::ALL {
            let (crop_t, _) = self.crop_tensors(comp, &[&crops], DType::F32, &Device::Cpu)?;
            embeddings.push(self.locals[comp.index()].encode(&crop_t)?);
        }
        let [a, b, c, d, e]: [Tensor; 5] = embeddings.try_into().expect("five components");
        Ok(SourceEmbedding {
            crops,
            embeddings: [a, b, c, d, e],
        })
    }

    /// Decodes one (possibly mixed) source embedding onto a target layout.
    pub fn decode(&self, source: &SourceEmbedding, layout: &TargetLayout) -> Result<Image> {
        let (image, _, _) = self.compose(
            &[&source.crops],
            &source.embeddings,
            std::slice::from_ref(layout),
            DType::F32,
            &Device::Cpu,
        )?;
        Image::from_tensor(&image)
    }

    /// `G(x_s, m_s, x_t, m_t)` for a single sample.
    pub fn generate(
        &self,
        schema: &LabelSchema,
        source: (&Image, &LabelMask),
        target: (&Image, &LabelMask),
    ) -> Result<Image> {
        let crops = source_crops(source.0, source.1, schema, &self.spec)?;
        let layout = target_layout(target.0, target.1, schema)?;
        self.decode(&self.embed(crops)?, &layout)
    }

    /// Per-component sources, target mask and background resolved from `store`.
    pub fn generate_mixed(&self, schema: &LabelSchema, req: &EditRequest, store: &dyn SampleStore) -> Result<Image> {
        Ok(self.generate_cached(schema, req, store, &mut EmbeddingCache::default())?.0)
    }

    /// [`Generator::generate_mixed`] reusing source embeddings from `cache`,
    /// with per-stage wall-clock timings.
    pub fn generate_cached(
        &self,
        schema: &LabelSchema,
        req: &EditRequest,
        store: &dyn SampleStore,
        cache: &mut EmbeddingCache,
    ) -> Result<(Image, EditTiming)> {
        let clock = Instant::now();
        let target_mask = store.mask(&req.target_mask)?;
        target_mask.validate(schema)?;
        let bg = store.sample(&req.background)?;
        let r = self.spec.resolution;
        if target_mask.height() != r || target_mask.width() != r || bg.image.height() != r || bg.image.width() != r {
            return Err(Error::Shape(format!("edit inputs must be {r}x{r}")));
        }
        let mut samples: BTreeMap<&str, Sample> = BTreeMap::new();
        for id in req.components.ids() {
            if !samples.contains_key(id) {
                samples.insert(id, store.sample(id)?);
            }
        }
        let resolve = clock.elapsed();

        let clock = Instant::now();
        let mut embedded: BTreeMap<&str, SourceEmbedding> = BTreeMap::new();
        for (&id, s) in &samples {
            let e = cache.get_or_try_insert(id, s, || self.embed(source_crops(&s.image, &s.mask, schema, &self.spec)?))?;
            embedded.insert(id, e);
        }
        let layout = target_layout(&bg.image, &target_mask, schema)?;
        let embed = clock.elapsed();

        let clock = Instant::now();
        let mixed = SourceEmbedding::mix(ComponentId::ALL.map(|c| &embedded[req.components.get(c)]));
        let image = self.decode(&mixed, &layout)?;
        let decode = clock.elapsed();
        Ok((image, EditTiming { resolve, embed, decode }))
    }
}

/// Crops and local embeddings `(1, C, h', w')` of one source face.
#[derive(Debug, Clone)]
pub struct SourceEmbedding {
    pub crops: SourceCrops,
    pub embeddings: [Tensor; 5],
}

impl SourceEmbedding {
    /// Component `c` taken from `parts[c]`.
    pub fn mix(parts: [&SourceEmbedding; 5]) -> Self {
        Self {
            crops: SourceCrops(ComponentId::ALL.map(|c| parts[c.index()].crops.0[c.index()].clone())),
            embeddings: ComponentId::ALL.map(|c| parts[c.index()].embeddings[c.index()].clone()),
        }
    }
}

/// Wall-clock time spent per editing stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EditTiming {
    /// Loading the referenced samples and masks.
    pub resolve: Duration,
    /// Cropping and encoding the sources, building the target layout.
    pub embed: Duration,
    /// Placement, decoding and background fusion.
    pub decode: Duration,
}

/// Source embeddings keyed by sample reference. An entry is recomputed when
/// the content behind its reference changes.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, (u64, SourceEmbedding)>,
    hits: u64,
    misses: u64,
}

impl EmbeddingCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn get_or_try_insert(
        &mut self,
        id: &str,
        sample: &Sample,
        embed: impl FnOnce() -> Result<SourceEmbedding>,
    ) -> Result<SourceEmbedding> {
        let key = sample.fingerprint();
        if let Some((k, e)) = self.entries.get(id) {
            if *k == key {
                self.hits += 1;
                return Ok(e.clone());
            }
        }
        self.misses += 1;
        let e = embed()?;
        self.entries.insert(id.to_string(), (key, e.clone()));
        Ok(e)
    }
}

/// An aligned face with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: LabelMask,
}

impl Sample {
    /// Content hash of image and mask.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.image.height(), self.image.width()).hash(&mut h);
        for v in self.image.data() {
            v.to_bits().hash(&mut h);
        }
        (self.mask.height(), self.mask.width()).hash(&mut h);
        self.mask.data().hash(&mut h);
        h.finish()
    }
}

/// Resolves sample and mask references for editing requests.
pub trait SampleStore {
    fn sample(&self, id: &str) -> Result<Sample>;

    /// A target mask reference. Defaults to the mask of sample `id`.
    fn mask(&self, id: &str) -> Result<LabelMask> {
        Ok(self.sample(id)?.mask)
    }
}

impl SampleStore for BTreeMap<String, Sample> {
    fn sample(&self, id: &str) -> Result<Sample> {
        self.get(id).cloned().ok_or_else(|| Error::Lookup(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSources {
    pub left_eye: String,
    pub right_eye: String,
    pub mouth: String,
    pub skin_nose: String,
    pub hair: String,
}

impl ComponentSources {
    pub fn uniform(id: &str) -> Self {
        Self {
            left_eye: id.into(),
            right_eye: id.into(),
            mouth: id.into(),
            skin_nose: id.into(),
            hair: id.into(),
        }
    }

    pub fn get(&self, c: ComponentId) -> &str {
        match c {
            ComponentId::LeftEye => &self.left_eye,
            ComponentId::RightEye => &self.right_eye,
            ComponentId::Mouth => &self.mouth,
            ComponentId::SkinNose => &self.skin_nose,
            ComponentId::Hair => &self.hair,
        }
    }

    pub fn set(&mut self, c: ComponentId, id: impl Into<String>) {
        let slot = match c {
            ComponentId::LeftEye => &mut self.left_eye,
            ComponentId::RightEye => &mut self.right_eye,
            ComponentId::Mouth => &mut self.mouth,
            ComponentId::SkinNose => &mut self.skin_nose,
            ComponentId::Hair => &mut self.hair,
        };
        *slot = id.into();
    }

    pub fn ids(&self) -> [&str; 5] {
        ComponentId::ALL.map(|c| self.get(c))
    }
}

/// Declarative editing request: target mask, per-component appearance
/// sources, background source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub target_mask: String,
    pub background: String,
    pub components: ComponentSources,
}

impl EditRequest {
    /// Plain reconstruction of one sample.
    pub fn identity(id: &str) -> Self {
        Self {
            target_mask: id.into(),
            background: id.into(),
            components: ComponentSources::uniform(id),
        }
    }

    /// Face swap+: every component (hair included) from `source`, mask and
    /// background from `target`.
    pub fn swap(source: &str, target: &str) -> Self {
        Self {
            target_mask: target.into(),
            background: target.into(),
            components: ComponentSources::uniform(source),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("edit request: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("request serializes")
    }
}
