//! Architectural contracts for every learnable function.
//!
//! Encoders are strided convolution stacks; decoders are residual blocks
//! followed by nearest-neighbor upsampling convolutions; discriminators are
//! patch classifiers with four downsampling stages; the parser is a small
//! U-Net. All depths and widths come from [`NetSpec`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{upsample2, Activation, Conv2d, ConvBlock, NormKind, ResBlock};
use super::params::ParamBuilder;
use crate::error::{Error, Result};
use crate::schema::ComponentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Square working resolution in pixels.
    pub resolution: usize,
    /// Spatial reduction of every encoder; a power of two.
    pub downsample_factor: usize,
    pub base_channels: usize,
    pub embed_channels: usize,
    pub mask_feature_channels: usize,
    pub background_channels: usize,
    pub decoder_channels: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub parser_channels: usize,
    pub label_count: usize,
    pub norm: NormKind,
    pub activation: Activation,
}

impl NetSpec {
    /// Full-size defaults at 256x256.
    pub fn standard(label_count: usize) -> Self {
        Self {
            resolution: 256,
            downsample_factor: 4,
            base_channels: 32,
            embed_channels: 64,
            mask_feature_channels: 128,
            background_channels: 32,
            decoder_channels: 256,
            res_blocks: 4,
            disc_channels: 64,
            parser_channels: 32,
            label_count,
            norm: NormKind::Instance,
            activation: Activation::Relu,
        }
    }

    /// Small widths suitable for the 64x64 toy corpus on a CPU.
    pub fn toy(label_count: usize) -> Self {
        Self {
            resolution: 64,
            downsample_factor: 4,
            base_channels: 8,
            embed_channels: 8,
            mask_feature_channels: 16,
            background_channels: 8,
            decoder_channels: 32,
            res_blocks: 1,
            disc_channels: 8,
            parser_channels: 8,
            label_count,
            norm: NormKind::None,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {f} must be a power of two >= 2")));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "downsample_factor {f} must divide resolution {}",
                self.resolution
            )));
        }
        if !self.resolution.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of 16 (discriminator and parser depth)",
                self.resolution
            )));
        }
        let channels = [
            self.base_channels,
            self.embed_channels,
            self.mask_feature_channels,
            self.background_channels,
            self.decoder_channels,
            self.disc_channels,
            self.parser_channels,
            self.label_count,
        ];
        if channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn feature_size(&self) -> usize {
        self.resolution / self.downsample_factor
    }

    pub fn crop_size(&self, c: ComponentId) -> (usize, usize) {
        c.crop_size(self.resolution, self.downsample_factor)
    }

    pub fn fused_channels(&self) -> usize {
        5 * self.embed_channels + self.mask_feature_channels
    }
}

fn expect_dims(x: &Tensor, channels: usize, h: usize, w: usize, what: &str) -> Result<()> {
    let (_, c, xh, xw) = x.dims4()?;
    if (c, xh, xw) != (channels, h, w) {
        return Err(Error::Shape(format!(
            "{what}: expected (_, {channels}, {h}, {w}), got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Stem convolution, `stages` stride-2 reductions, linear head.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    head: Conv2d,
    in_ch: usize,
}

impl ConvEncoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec, in_ch: usize, out_ch: usize) -> Result<Self> {
        let (norm, act) = (spec.norm, spec.activation);
        let mut ch = spec.base_channels;
        let stem = ConvBlock::new(&mut p.pp("stem"), in_ch, ch, 3, 1, 1, norm, act)?;
        let mut down = Vec::new();
        for i in 0..spec.stages() {
            let next = (ch * 2).min(spec.base_channels * 8);
            down.push(ConvBlock::new(&mut p.pp(format!("down{i}")), ch, next, 4, 2, 1, norm, act)?);
            ch = next;
        }
        let head = Conv2d::new(&mut p.pp("head"), ch, out_ch, 3, 1, 1, true, 1.0)?;
        Ok(Self { stem, down, head, in_ch })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem.forward(x)?;
        for d in &self.down {
            y = d.forward(&y)?;
        }
        self.head.forward(&y)
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }
}

/// Stem convolution, residual blocks, `stages` upsampling convolutions,
/// tanh image head.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    stem: ConvBlock,
    res: Vec<ResBlock>,
    up: Vec<ConvBlock>,
    head: Conv2d,
}

impl ConvDecoder {
    pub fn new(
        p: &mut ParamBuilder<'_>,
        spec: &NetSpec,
        in_ch: usize,
        top_ch: usize,
        res_blocks: usize,
    ) -> Result<Self> {
        let (norm, act) = (spec.norm, spec.activation);
        let mut ch = top_ch;
        let stem = ConvBlock::new(&mut p.pp("stem"), in_ch, ch, 3, 1, 1, norm, act)?;
        let res = (0..res_blocks)
            .map(|i| ResBlock::new(&mut p.pp(format!("res{i}")), ch, norm, act))
            .collect::<Result<_>>()?;
        let mut up = Vec::new();
        for i in 0..spec.stages() {
            let next = (ch / 2).max(spec.base_channels);
            up.push(ConvBlock::new(&mut p.pp(format!("up{i}")), ch, next, 3, 1, 1, norm, act)?);
            ch = next;
        }
        let head = Conv2d::new(&mut p.pp("head"), ch, 3, 3, 1, 1, true, 1.0)?;
        Ok(Self { stem, res, up, head })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem.forward(x)?;
        for r in &self.res {
            y = r.forward(&y)?;
        }
        for u in &self.up {
            y = u.forward(&upsample2(&y)?)?;
        }
        Ok(self.head.forward(&y)?.tanh()?)
    }
}

/// Auto-encoder for one facial component.
#[derive(Debug, Clone)]
pub struct LocalAutoencoder {
    pub component: ComponentId,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    crop: (usize, usize),
    embed: usize,
    factor: usize,
}

impl LocalAutoencoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec, component: ComponentId) -> Result<Self> {
        let top = (spec.base_channels * 4).max(spec.embed_channels);
        Ok(Self {
            component,
            encoder: ConvEncoder::new(&mut p.pp("enc"), spec, 3, spec.embed_channels)?,
            decoder: ConvDecoder::new(&mut p.pp("dec"), spec, spec.embed_channels, top, 0)?,
            crop: spec.crop_size(component),
            embed: spec.embed_channels,
            factor: spec.downsample_factor,
        })
    }

    /// `(B, 3, h, w)` crop at the component's fixed size to
    /// `(B, embed, h/f, w/f)`.
    pub fn encode(&self, crop: &Tensor) -> Result<Tensor> {
        expect_dims(crop, 3, self.crop.0, self.crop.1, self.component.name())?;
        self.encoder.forward(crop)
    }

    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let (h, w) = (self.crop.0 / self.factor, self.crop.1 / self.factor);
        expect_dims(features, self.embed, h, w, self.component.name())?;
        self.decoder.forward(features)
    }

    pub fn crop_size(&self) -> (usize, usize) {
        self.crop
    }
}

/// Encodes a one-hot mask to the feature resolution.
#[derive(Debug, Clone)]
pub struct MaskEncoder {
    encoder: ConvEncoder,
    labels: usize,
    resolution: usize,
}

impl MaskEncoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        Ok(Self {
            encoder: ConvEncoder::new(p, spec, spec.label_count, spec.mask_feature_channels)?,
            labels: spec.label_count,
            resolution: spec.resolution,
        })
    }

    pub fn forward(&self, onehot: &Tensor) -> Result<Tensor> {
        expect_dims(onehot, self.labels, self.resolution, self.resolution, "mask encoder")?;
        self.encoder.forward(onehot)
    }
}

/// Decodes the fused feature tensor into the foreground face.
#[derive(Debug, Clone)]
pub struct ForegroundDecoder {
    decoder: ConvDecoder,
    in_ch: usize,
    size: usize,
}

impl ForegroundDecoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        Ok(Self {
            decoder: ConvDecoder::new(p, spec, spec.fused_channels(), spec.decoder_channels, spec.res_blocks)?,
            in_ch: spec.fused_channels(),
            size: spec.feature_size(),
        })
    }

    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        expect_dims(fused, self.in_ch, self.size, self.size, "foreground decoder")?;
        self.decoder.forward(fused)
    }
}

/// Full-resolution background features.
#[derive(Debug, Clone)]
pub struct BackgroundEncoder {
    stem: ConvBlock,
    down: ConvBlock,
    res: ResBlock,
    up: ConvBlock,
    resolution: usize,
}

impl BackgroundEncoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        let (norm, act, c) = (spec.norm, spec.activation, spec.background_channels);
        Ok(Self {
            stem: ConvBlock::new(&mut p.pp("stem"), 3, c, 3, 1, 1, norm, act)?,
            down: ConvBlock::new(&mut p.pp("down"), c, 2 * c, 4, 2, 1, norm, act)?,
            res: ResBlock::new(&mut p.pp("res"), 2 * c, norm, act)?,
            up: ConvBlock::new(&mut p.pp("up"), 2 * c, c, 3, 1, 1, norm, act)?,
            resolution: spec.resolution,
        })
    }

    pub fn forward(&self, background: &Tensor) -> Result<Tensor> {
        expect_dims(background, 3, self.resolution, self.resolution, "background encoder")?;
        let y = self.down.forward(&self.stem.forward(background)?)?;
        self.up.forward(&upsample2(&self.res.forward(&y)?)?)
    }
}

/// Fuses the foreground face with background features into the final image.
#[derive(Debug, Clone)]
pub struct FuseDecoder {
    stem: ConvBlock,
    down: ConvBlock,
    res: ResBlock,
    up: ConvBlock,
    head: Conv2d,
    bg_channels: usize,
    resolution: usize,
}

impl FuseDecoder {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        let (norm, act) = (spec.norm, spec.activation);
        let c = spec.background_channels.max(spec.base_channels);
        Ok(Self {
            stem: ConvBlock::new(&mut p.pp("stem"), 3 + spec.background_channels, c, 3, 1, 1, norm, act)?,
            down: ConvBlock::new(&mut p.pp("down"), c, 2 * c, 4, 2, 1, norm, act)?,
            res: ResBlock::new(&mut p.pp("res"), 2 * c, norm, act)?,
            up: ConvBlock::new(&mut p.pp("up"), 2 * c, c, 3, 1, 1, norm, act)?,
            head: Conv2d::new(&mut p.pp("head"), 2 * c, 3, 3, 1, 1, true, 1.0)?,
            bg_channels: spec.background_channels,
            resolution: spec.resolution,
        })
    }

    pub fn forward(&self, foreground: &Tensor, background: &Tensor) -> Result<Tensor> {
        let r = self.resolution;
        expect_dims(foreground, 3, r, r, "fuse decoder foreground")?;
        expect_dims(background, self.bg_channels, r, r, "fuse decoder background")?;
        let x = Tensor::cat(&[foreground, background], 1)?;
        let skip = self.stem.forward(&x)?;
        let deep = self.up.forward(&upsample2(&self.res.forward(&self.down.forward(&skip)?)?)?)?;
        Ok(self.head.forward(&Tensor::cat(&[&skip, &deep], 1)?)?.tanh()?)
    }
}

/// Output of one discriminator scale.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// Patch logits `(B, 1, h, w)`.
    pub logits: Tensor,
    /// Activations feeding the final scoring layer.
    pub features: Tensor,
}

/// Conditional patch discriminator with four stride-2 stages.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    stages: Vec<ConvBlock>,
    head: Conv2d,
    in_ch: usize,
}

impl PatchDiscriminator {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        let in_ch = 3 + spec.label_count;
        let d = spec.disc_channels;
        let widths = [d, 2 * d, 4 * d, 4 * d];
        let mut stages = Vec::new();
        let mut ch = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            let norm = if i == 0 { NormKind::None } else { spec.norm };
            stages.push(ConvBlock::new(&mut p.pp(format!("s{i}")), ch, w, 4, 2, 1, norm, Activation::LeakyRelu)?);
            ch = w;
        }
        let head = Conv2d::new(&mut p.pp("head"), ch, 1, 3, 1, 1, true, 1.0)?;
        Ok(Self { stages, head, in_ch })
    }

    pub fn forward(&self, image: &Tensor, onehot: &Tensor) -> Result<DiscOutput> {
        let x = Tensor::cat(&[image, onehot], 1)?;
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let mut y = x;
        for s in &self.stages {
            y = s.forward(&y)?;
        }
        Ok(DiscOutput {
            logits: self.head.forward(&y)?,
            features: y,
        })
    }
}

/// Two identical discriminators; the second sees 2x average-pooled inputs.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    scales: [PatchDiscriminator; 2],
}

impl MultiScaleDiscriminator {
    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        Ok(Self {
            scales: [
                PatchDiscriminator::new(&mut p.pp("d1"), spec)?,
                PatchDiscriminator::new(&mut p.pp("d2"), spec)?,
            ],
        })
    }

    /// `scale` is 1 or 2.
    pub fn discriminate(&self, scale: usize, image: &Tensor, onehot: &Tensor) -> Result<DiscOutput> {
        match scale {
            1 => self.scales[0].forward(image, onehot),
            2 => self.scales[1].forward(&image.avg_pool2d(2)?, &onehot.avg_pool2d(2)?),
            s => Err(Error::Config(format!("discriminator scale {s} not in {{1, 2}}"))),
        }
    }

    pub fn forward(&self, image: &Tensor, onehot: &Tensor) -> Result<Vec<DiscOutput>> {
        Ok(vec![
            self.discriminate(1, image, onehot)?,
            self.discriminate(2, image, onehot)?,
        ])
    }
}

/// U-Net face parser producing per-pixel label logits.
#[derive(Debug, Clone)]
pub struct ParserNet {
    enc: Vec<ConvBlock>,
    down: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    head: Conv2d,
    labels: usize,
    resolution: usize,
    bottleneck: usize,
}

impl ParserNet {
    const DEPTH: usize = 3;

    pub fn new(p: &mut ParamBuilder<'_>, spec: &NetSpec) -> Result<Self> {
        let act = Activation::Relu;
        let norm = NormKind::None;
        let c = spec.parser_channels;
        let widths: Vec<usize> = (0..=Self::DEPTH).map(|i| c << i.min(2)).collect();
        let mut enc = Vec::new();
        let mut down = Vec::new();
        enc.push(ConvBlock::new(&mut p.pp("enc0"), 3, widths[0], 3, 1, 1, norm, act)?);
        for i in 1..=Self::DEPTH {
            down.push(ConvBlock::new(&mut p.pp(format!("down{i}")), widths[i - 1], widths[i], 4, 2, 1, norm, act)?);
            enc.push(ConvBlock::new(&mut p.pp(format!("enc{i}")), widths[i], widths[i], 3, 1, 1, norm, act)?);
        }
        let mut up = Vec::new();
        let mut ch = widths[Self::DEPTH];
        for i in (0..Self::DEPTH).rev() {
            up.push(ConvBlock::new(&mut p.pp(format!("up{i}")), ch + widths[i], widths[i], 3, 1, 1, norm, act)?);
            ch = widths[i];
        }
        let head = Conv2d::new(&mut p.pp("head"), ch, spec.label_count, 1, 1, 0, true, 1.0)?;
        Ok(Self {
            enc,
            down,
            up,
            head,
            labels: spec.label_count,
            resolution: spec.resolution,
            bottleneck: widths[Self::DEPTH],
        })
    }

    /// `(B, 3, R, R)` to `(B, labels, R, R)` logits.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward_with_bottleneck(image)?;
        Ok(logits)
    }

    /// Logits plus the deepest encoder activation.
    pub fn forward_with_bottleneck(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        expect_dims(image, 3, self.resolution, self.resolution, "parser")?;
        let mut skips = vec![self.enc[0].forward(image)?];
        for i in 1..=Self::DEPTH {
            let d = self.down[i - 1].forward(skips.last().expect("nonempty"))?;
            skips.push(self.enc[i].forward(&d)?);
        }
        let bottleneck = skips.pop().expect("depth >= 1");
        let mut y = bottleneck.clone();
        for u in &self.up {
            let skip = skips.pop().expect("matching skip");
            y = u.forward(&Tensor::cat(&[&upsample2(&y)?, &skip], 1)?)?;
        }
        Ok((self.head.forward(&y)?, bottleneck))
    }

    pub fn label_count(&self) -> usize {
        self.labels
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck
    }
}
