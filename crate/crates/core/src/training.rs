//! Parser pre-training and the alternating paired/unpaired GAN loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{argmax_labels, encode_onehot, Image, LabelMask};
use crate::losses::{
    loss_d, loss_fm, loss_g_sigmoid, loss_global, loss_gp, loss_local, loss_parse_ce, total_g, GeneratorTerms,
    LossReport, LossTerm, LossWeights,
};
use crate::nn::{MultiScaleDiscriminator, NetSpec, ParserNet, VarStore};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{source_crops, target_layout, Generator, Sample, SourceCrops, TargetLayout};
use crate::schema::LabelSchema;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Paired,
    Unpaired,
}

impl StepMode {
    /// Strict alternation starting with a paired step.
    pub fn for_step(step: u64) -> Self {
        if step.is_multiple_of(2) {
            StepMode::Paired
        } else {
            StepMode::Unpaired
        }
    }

    pub fn letter(self) -> char {
        match self {
            StepMode::Paired => 'P',
            StepMode::Unpaired => 'U',
        }
    }
}

// Independent random streams derived from the run seed.
const STREAM_G_INIT: u64 = 1;
const STREAM_D_INIT: u64 = 2;
const STREAM_PARSER_INIT: u64 = 3;
const STREAM_GAN_BATCH: u64 = 4;
const STREAM_PARSER_BATCH: u64 = 5;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one named stream at one step; depends on nothing else, so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ step)
}

fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub augment: Option<AugmentConfig>,
}

/// Full experiment definition. The working resolution is `net.resolution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    /// `toy`, `helen`, or a path to a schema file.
    pub schema: String,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub parser_checkpoint: Option<PathBuf>,
    pub batch_size: usize,
    /// Micro-batches accumulated per update.
    pub grad_accum: usize,
    pub gan_steps: u64,
    /// Over the last `decay_steps` of `gan_steps` both learning rates fall
    /// linearly to zero.
    #[serde(default)]
    pub decay_steps: u64,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Restrict unpaired pairs to samples sharing a manifest group.
    pub unpaired_same_group: bool,
    pub net: NetSpec,
    pub weights: LossWeights,
    pub optim_g: AdamConfig,
    pub optim_d: AdamConfig,
    pub parser: ParserTrainConfig,
}

impl TrainConfig {
    pub fn standard() -> Self {
        Self {
            version: CONFIG_FORMAT_VERSION,
            seed: 0,
            schema: "helen".into(),
            train_manifest: None,
            val_manifest: None,
            parser_checkpoint: None,
            batch_size: 4,
            grad_accum: 1,
            gan_steps: 200_000,
            decay_steps: 100_000,
            checkpoint_every: 5_000,
            unpaired_same_group: false,
            net: NetSpec::standard(11),
            weights: LossWeights::default(),
            optim_g: AdamConfig::default(),
            optim_d: AdamConfig::default(),
            parser: ParserTrainConfig {
                steps: 20_000,
                batch_size: 8,
                optim: AdamConfig {
                    lr: 1e-3,
                    beta1: 0.9,
                    ..AdamConfig::default()
                },
                augment: Some(AugmentConfig::default()),
            },
        }
    }

    /// Small settings for the procedural corpus at 64x64.
    pub fn toy() -> Self {
        Self {
            schema: "toy".into(),
            batch_size: 2,
            gan_steps: 1_000,
            decay_steps: 800,
            checkpoint_every: 500,
            net: NetSpec::toy(6),
            optim_g: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            optim_d: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            parser: ParserTrainConfig {
                steps: 300,
                batch_size: 8,
                optim: AdamConfig {
                    lr: 3e-3,
                    beta1: 0.9,
                    ..AdamConfig::default()
                },
                augment: None,
            },
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.net.validate()?;
        self.weights.validate()?;
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("grad_accum", self.grad_accum as u64),
            ("parser.batch_size", self.parser.batch_size as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decay_steps > self.gan_steps {
            return Err(Error::Config("decay_steps exceeds gan_steps".into()));
        }
        for (name, o) in [("optim_g", &self.optim_g), ("optim_d", &self.optim_d), ("parser.optim", &self.parser.optim)] {
            let ok = o.lr > 0.0
                && o.lr.is_finite()
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2)
                && o.eps > 0.0;
            if !ok {
                return Err(Error::Config(format!("{name}: invalid optimizer settings")));
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier at `step`: 1 until the decay phase, then
    /// linear down to 0 at `gan_steps`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        let start = self.gan_steps.saturating_sub(self.decay_steps);
        if self.decay_steps == 0 || step < start {
            return 1.0;
        }
        (self.gan_steps.saturating_sub(step) as f64 / (self.decay_steps + 1) as f64).clamp(0.0, 1.0)
    }

    pub fn load_schema(&self) -> Result<LabelSchema> {
        let schema = match self.schema.as_str() {
            "toy" | "helen" => LabelSchema::by_name(&self.schema)?,
            path => LabelSchema::load(Path::new(path))?,
        };
        if schema.len() != self.net.label_count {
            return Err(Error::Config(format!(
                "schema has {} labels, net expects {}",
                schema.len(),
                self.net.label_count
            )));
        }
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// `(B, 3, H, W)` from same-sized images.
pub fn batch_images(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.height() != h || im.width() != w {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// `(B, L, H, W)` one-hot targets.
pub fn batch_onehot(masks: &[&LabelMask], schema: &LabelSchema, dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Shape("empty mask batch".into()))?;
    let (h, w, l) = (first.height(), first.width(), schema.len());
    let mut data = Vec::with_capacity(masks.len() * l * h * w);
    for m in masks {
        let oh = encode_onehot(m, schema)?;
        if oh.height != h || oh.width != w {
            return Err(Error::Shape("masks in a batch differ in size".into()));
        }
        data.extend_from_slice(&oh.data);
    }
    Ok(Tensor::from_vec(data, (masks.len(), l, h, w), device)?.to_dtype(dtype)?)
}

/// A face parser with its parameters.
#[derive(Debug)]
pub struct ParserModel {
    spec: NetSpec,
    store: VarStore,
    net: ParserNet,
}

impl ParserModel {
    const EVAL_BATCH: usize = 16;

    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = VarStore::new(seed, DType::F32, &Device::Cpu);
        let net = ParserNet::new(&mut store.root(), spec)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
        })
    }

    fn with_values(spec: &NetSpec, values: &BTreeMap<String, Tensor>, frozen: bool) -> Result<Self> {
        let mut store = VarStore::new(0, DType::F32, &Device::Cpu);
        if frozen {
            store = store.freeze();
        }
        let net = ParserNet::new(&mut store.root(), spec)?;
        store.load(values, "")?;
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
        })
    }

    pub fn net(&self) -> &ParserNet {
        &self.net
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// A copy whose parameters take no part in autograd.
    pub fn frozen(&self) -> Result<Self> {
        Self::with_values(&self.spec, &self.store.snapshot(), true)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<LabelMask>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(Self::EVAL_BATCH) {
            let x = batch_images(chunk, DType::F32, &Device::Cpu)?;
            let logits = self.net.forward(&x)?.detach();
            for i in 0..chunk.len() {
                out.push(argmax_labels(&logits.get(i)?)?);
            }
        }
        Ok(out)
    }

    /// Mean per-pixel agreement of predictions with the sample masks.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("accuracy on an empty set".into()));
        }
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let preds = self.predict(&images)?;
        let total: f64 = preds.iter().zip(samples).map(|(p, s)| p.accuracy_against(&s.mask)).sum();
        Ok(total / samples.len() as f64)
    }

    pub fn to_checkpoint(&self, schema: &LabelSchema, step: u64) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::Parser, &self.spec, schema, step);
        c.insert_group("parser", self.store.snapshot());
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, frozen: bool) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Parser {
            return Err(Error::Checkpoint("not a parser checkpoint".into()));
        }
        Self::with_values(&ckpt.meta.spec, &ckpt.group("parser"), frozen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserReport {
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub losses: Vec<f64>,
}

/// Trains a parser on labeled pairs by per-pixel cross entropy.
pub fn pretrain_parser(
    spec: &NetSpec,
    schema: &LabelSchema,
    train: &[Sample],
    val: &[Sample],
    cfg: &ParserTrainConfig,
    seed: u64,
) -> Result<(ParserModel, ParserReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("parser training set is empty".into()));
    }
    if spec.label_count != schema.len() {
        return Err(Error::Config("net spec label count differs from schema".into()));
    }
    let model = ParserModel::new(spec, derive_seed(seed, STREAM_PARSER_INIT, 0))?;
    let mut opt = Adam::new(model.store.trainable(), cfg.optim)?;
    let initial_accuracy = if val.is_empty() { None } else { Some(model.accuracy(val)?) };
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, STREAM_PARSER_BATCH, step);
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &train[rng.random_range(0..train.len())];
            match &cfg.augment {
                Some(a) => {
                    let (im, m) = augment_pair(&s.image, &s.mask, schema, a, &mut rng);
                    images.push(im);
                    masks.push(m);
                }
                None => {
                    images.push(s.image.clone());
                    masks.push(s.mask.clone());
                }
            }
        }
        let x = batch_images(&images.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
        let y = batch_onehot(&masks.iter().collect::<Vec<_>>(), schema, DType::F32, &Device::Cpu)?;
        let loss = loss_parse_ce(&model.net.forward(&x)?, &y)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("parser loss {value} at step {step}")));
        }
        losses.push(value);
        opt.step(&loss.backward()?)?;
        if (step + 1) % 100 == 0 {
            tracing::info!(step = step + 1, loss = value, "parser");
        }
    }
    let final_accuracy = if val.is_empty() { None } else { Some(model.accuracy(val)?) };
    Ok((
        model,
        ParserReport {
            initial_accuracy,
            final_accuracy,
            losses,
        },
    ))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mode: StepMode,
    pub generator: LossReport,
    pub discriminator: LossReport,
}

/// Append-only line-delimited JSON log, one record per step.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Opens `path`, keeping only records of steps before `from_step`.
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        let kept: Vec<String> = if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut lines = Vec::new();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                let rec: StepRecord =
                    serde_json::from_str(&line).map_err(|e| Error::format(path, format!("metrics record: {e}")))?;
                if rec.step < from_step {
                    lines.push(line);
                }
            }
            lines
        } else {
            Vec::new()
        };
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, format!("metrics record: {e}"))))
            .collect()
    }
}

struct Prepared {
    crops: SourceCrops,
    layout: TargetLayout,
    image: Image,
}

fn accumulate(grads: &GradStore, vars: &[(String, Var)], scale: f64, acc: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            let g = if scale == 1.0 { g.clone() } else { (g * scale)? };
            let next = match acc.remove(name) {
                Some(prev) => (prev + g)?,
                None => g,
            };
            acc.insert(name.clone(), next);
        }
    }
    Ok(())
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = reports[0].clone();
    for (i, term) in out.terms.iter_mut().enumerate() {
        term.value = reports.iter().map(|r| r.terms[i].value).sum::<f64>() / n;
    }
    out.total = reports.iter().map(|r| r.total).sum::<f64>() / n;
    out
}

/// Generator, discriminators, optimizers and the frozen parser.
pub struct GanTrainer {
    config: TrainConfig,
    schema: LabelSchema,
    g_store: VarStore,
    generator: Generator,
    d_store: VarStore,
    disc: MultiScaleDiscriminator,
    parser: Option<ParserModel>,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    data: Vec<Prepared>,
    groups: Vec<Option<String>>,
}

impl GanTrainer {
    /// `parser` is frozen on entry; it is required when the parsing loss
    /// weight is positive.
    pub fn new(config: TrainConfig, train: &Dataset, parser: Option<&ParserModel>) -> Result<Self> {
        config.validate()?;
        let schema = train.schema.clone();
        if schema.len() != config.net.label_count {
            return Err(Error::Config("dataset schema does not match net spec".into()));
        }
        if train.len() < 2 {
            return Err(Error::EmptyDataset("GAN training needs at least two samples".into()));
        }
        let parser = match parser {
            Some(p) if config.weights.gp > 0.0 => {
                if p.spec().label_count != schema.len() || p.spec().resolution != config.net.resolution {
                    return Err(Error::Config("parser does not match the net spec".into()));
                }
                Some(p.frozen()?)
            }
            Some(_) => None,
            None if config.weights.gp > 0.0 => {
                return Err(Error::Config("parsing loss weight is positive but no parser was given".into()))
            }
            None => None,
        };
        let spec = &config.net;
        let mut data = Vec::with_capacity(train.len());
        for s in &train.samples {
            if s.image.height() != spec.resolution || s.image.width() != spec.resolution {
                return Err(Error::Shape(format!("sample {} is not {}x{}", s.id, spec.resolution, spec.resolution)));
            }
            data.push(Prepared {
                crops: source_crops(&s.image, &s.mask, &schema, spec)?,
                layout: target_layout(&s.image, &s.mask, &schema)?,
                image: s.image.clone(),
            });
        }
        let dev = Device::Cpu;
        let mut g_store = VarStore::new(derive_seed(config.seed, STREAM_G_INIT, 0), DType::F32, &dev);
        let generator = Generator::new(&mut g_store, spec)?;
        let mut d_store = VarStore::new(derive_seed(config.seed, STREAM_D_INIT, 0), DType::F32, &dev);
        let disc = MultiScaleDiscriminator::new(&mut d_store.root(), spec)?;
        let opt_g = Adam::new(g_store.trainable(), config.optim_g)?;
        let opt_d = Adam::new(d_store.trainable(), config.optim_d)?;
        Ok(Self {
            groups: train.groups.clone(),
            config,
            schema,
            g_store,
            generator,
            d_store,
            disc,
            parser,
            opt_g,
            opt_d,
            step: 0,
            data,
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(config: TrainConfig, train: &Dataset, parser: Option<&ParserModel>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Gan {
            return Err(Error::Checkpoint("not a GAN checkpoint".into()));
        }
        if ckpt.meta.spec != config.net {
            return Err(Error::Checkpoint("checkpoint net spec differs from config".into()));
        }
        let mut t = Self::new(config, train, parser)?;
        t.g_store.load(&ckpt.group("g"), "")?;
        t.d_store.load(&ckpt.group("d"), "")?;
        t.opt_g.load_state(&ckpt.group("opt_g"), ckpt.meta.step)?;
        t.opt_d.load_state(&ckpt.group("opt_d"), ckpt.meta.step)?;
        t.step = ckpt.meta.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_store(&self) -> &VarStore {
        &self.g_store
    }

    pub fn discriminator(&self) -> &MultiScaleDiscriminator {
        &self.disc
    }

    pub fn discriminator_store(&self) -> &VarStore {
        &self.d_store
    }

    pub fn parser(&self) -> Option<&ParserModel> {
        self.parser.as_ref()
    }

    /// `(source, target)` sample indices for `step`.
    pub fn pairs_for(&self, step: u64) -> Vec<(usize, usize)> {
        let mut rng = step_rng(self.config.seed, STREAM_GAN_BATCH, step);
        let n = self.data.len();
        let count = self.config.batch_size * self.config.grad_accum;
        (0..count)
            .map(|_| {
                let s = rng.random_range(0..n);
                match StepMode::for_step(step) {
                    StepMode::Paired => (s, s),
                    StepMode::Unpaired => (s, self.draw_partner(s, &mut rng)),
                }
            })
            .collect()
    }

    fn draw_partner(&self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = self.data.len();
        let distinct = |rng: &mut ChaCha8Rng| {
            let t = rng.random_range(0..n - 1);
            if t >= s {
                t + 1
            } else {
                t
            }
        };
        if self.config.unpaired_same_group && self.groups[s].is_some() {
            for _ in 0..64 {
                let t = distinct(rng);
                if self.groups[t] == self.groups[s] {
                    return t;
                }
            }
        }
        distinct(rng)
    }

    /// Runs the next step of the P,U,P,U schedule.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let factor = self.config.lr_factor(self.step);
        self.opt_g.set_lr(self.config.optim_g.lr * factor);
        self.opt_d.set_lr(self.config.optim_d.lr * factor);
        let mode = StepMode::for_step(self.step);
        let pairs = self.pairs_for(self.step);
        let rec = self.step_on(mode, &pairs)?;
        self.step += 1;
        Ok(rec)
    }

    /// One discriminator update followed by one generator update on explicit
    /// `(source, target)` pairs. Does not advance the step counter.
    pub fn step_on(&mut self, mode: StepMode, pairs: &[(usize, usize)]) -> Result<StepRecord> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        for &(s, t) in pairs {
            if s >= self.data.len() || t >= self.data.len() {
                return Err(Error::Lookup(format!("pair ({s}, {t}) out of range")));
            }
            if (mode == StepMode::Paired) != (s == t) {
                return Err(Error::Config(format!("{mode:?} step with pair ({s}, {t})")));
            }
        }
        let dev = Device::Cpu;
        let chunks: Vec<&[(usize, usize)]> = pairs.chunks(self.config.batch_size).collect();
        let scale = 1.0 / chunks.len() as f64;
        let mut forwards = Vec::with_capacity(chunks.len());

        let d_vars = self.d_store.trainable();
        let mut d_grads = BTreeMap::new();
        let mut d_reports = Vec::new();
        for chunk in &chunks {
            let sources: Vec<SourceCrops> = chunk.iter().map(|&(s, _)| self.data[s].crops.clone()).collect();
            let targets: Vec<TargetLayout> = chunk.iter().map(|&(_, t)| self.data[t].layout.clone()).collect();
            let out = self.generator.forward(&sources, &targets, DType::F32, &dev, true)?;
            let real = batch_images(&chunk.iter().map(|&(_, t)| &self.data[t].image).collect::<Vec<_>>(), DType::F32, &dev)?;
            let fake = out.image.detach();
            let real_out = self.disc.forward(&real, &out.target_onehot)?;
            let fake_out = self.disc.forward(&fake, &out.target_onehot)?;
            let ld = loss_d(
                &real_out.iter().map(|o| o.logits.clone()).collect::<Vec<_>>(),
                &fake_out.iter().map(|o| o.logits.clone()).collect::<Vec<_>>(),
            )?;
            let value = ld.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            d_reports.push(LossReport {
                terms: vec![LossTerm {
                    name: "adversarial".into(),
                    value,
                    weight: 1.0,
                }],
                total: value,
            });
            accumulate(&ld.backward()?, &d_vars, scale, &mut d_grads)?;
            forwards.push((out, real));
        }
        self.opt_d.step_named(&d_grads)?;

        let g_vars = self.g_store.trainable();
        let mut g_grads = BTreeMap::new();
        let mut g_reports = Vec::new();
        let paired = mode == StepMode::Paired;
        let w = self.config.weights;
        for (out, real) in &forwards {
            let fake_out = self.disc.forward(&out.image, &out.target_onehot)?;
            let fake_logits: Vec<Tensor> = fake_out.iter().map(|o| o.logits.clone()).collect();
            let mut local = None::<Tensor>;
            for c in 0..5 {
                let l = loss_local(&out.crops[c], &out.valid[c], &out.recon[c])?;
                local = Some(match local {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            let fm = if paired && w.fm * w.gd > 0.0 {
                let real_out = self.disc.forward(real, &out.target_onehot)?;
                let rf: Vec<Tensor> = real_out.iter().map(|o| o.features.detach()).collect();
                let ff: Vec<Tensor> = fake_out.iter().map(|o| o.features.clone()).collect();
                Some(loss_fm(&ff, &rf)?)
            } else {
                None
            };
            let global = if paired && w.global > 0.0 {
                Some(loss_global(&out.image, real)?)
            } else {
                None
            };
            let parse = match &self.parser {
                Some(p) if w.gp > 0.0 => Some(loss_gp(&out.image, &out.target_onehot, p.net())?),
                _ => None,
            };
            let terms = GeneratorTerms {
                local: local.expect("five components"),
                global,
                sigmoid: loss_g_sigmoid(&fake_logits)?,
                fm,
                parse,
            };
            let (total, report) = total_g(&terms, &w, mode)?;
            g_reports.push(report);
            accumulate(&total.backward()?, &g_vars, scale, &mut g_grads)?;
        }
        self.opt_g.step_named(&g_grads)?;

        Ok(StepRecord {
            step: self.step,
            mode,
            generator: mean_reports(&g_reports),
            discriminator: mean_reports(&d_reports),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::Gan, &self.config.net, &self.schema, self.step);
        c.meta.config = Some(self.config.to_toml());
        c.insert_group("g", self.g_store.snapshot());
        c.insert_group("d", self.d_store.snapshot());
        c.insert_group("opt_g", self.opt_g.state().0);
        c.insert_group("opt_d", self.opt_d.state().0);
        c
    }

    /// Trains until `until` steps have run. With an output directory, writes
    /// `metrics.jsonl`, periodic `step-NNNNNN.safetensors` checkpoints and
    /// `final.safetensors`; a numeric failure leaves `diagnostic.safetensors`
    /// holding the state before the failing step.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(MetricsLog::open(&dir.join("metrics.jsonl"), self.step)?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until {
            let before = out_dir.map(|_| self.to_checkpoint());
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    if let (Some(dir), Some(snap)) = (out_dir, before) {
                        snap.save(&dir.join("diagnostic.safetensors"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(log) = log.as_mut() {
                log.append(&rec)?;
            }
            if rec.step % 50 == 0 {
                tracing::info!(step = rec.step, g = rec.generator.total, d = rec.discriminator.total, "gan");
            }
            records.push(rec);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.to_checkpoint().save(&dir.join(format!("step-{:06}.safetensors", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.to_checkpoint().save(&dir.join("final.safetensors"))?;
        }
        Ok(records)
    }
}

/// Mean of `value` over the first and the last `fraction` of `values`.
pub fn window_means(values: &[f64], fraction: f64) -> Option<(f64, f64)> {
    let k = ((values.len() as f64 * fraction).ceil() as usize).max(1);
    if values.len() < k {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}

/// Values of generator term `name` over paired steps, in order.
pub fn paired_term(records: &[StepRecord], name: &str) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.mode == StepMode::Paired)
        .filter_map(|r| r.generator.get(name))
        .collect()
}
