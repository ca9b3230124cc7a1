//! Command implementations and exit-code classification.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use maskface_core::augment::AugmentConfig;
use maskface_core::evaluation::{
    AugmentExperimentConfig, FeatureExtractor, MetricRecord, ParserFeatures, RandomProjection, augmentation_experiment,
    fid, mean_mask_accuracy,
};
use maskface_core::io::{encode_image_png, load_image, load_mask};
use maskface_core::preprocess::resize_pair;
use maskface_core::toy::toy_dataset;
use maskface_core::training::{GanTrainer, ParserModel, TrainConfig, pretrain_parser};
use maskface_core::{
    Checkpoint, CheckpointKind, Dataset, EditRequest, Generator, Image, LabelMask, LabelSchema, Manifest, Sample,
    SampleStore,
};
use maskface_service::ServiceConfig;

use crate::{Cli, Command, ConfigArgs, PairMode, Preset};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Flag combinations clap cannot check on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Usage errors map to 1, data and validation errors to 2, everything else
/// to 3.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<maskface_core::Error>() {
            return if e.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Prep(a) => {
            let schema = schema_by_arg(&a.schema)?;
            let ds = maskface_core::dataset::prepare(&a.raw, &schema, a.resolution, &a.out)?;
            println!("prepared {} samples into {}", ds.len(), a.out.display());
        }
        Command::PretrainParser(a) => {
            let mut cfg = load_config(&a.config, seed)?;
            if let Some(steps) = a.steps {
                cfg.parser.steps = steps;
            }
            let schema = cfg.load_schema()?;
            let train_path = a.train.or(cfg.train_manifest.clone()).ok_or_else(|| usage("no training manifest"))?;
            let train = Dataset::load(&train_path, &schema, cfg.net.resolution)?;
            let val = match a.val.or(cfg.val_manifest.clone()) {
                Some(p) => Dataset::load(&p, &schema, cfg.net.resolution)?.samples,
                None => Vec::new(),
            };
            let (model, report) = pretrain_parser(&cfg.net, &schema, &train.samples, &val, &cfg.parser, cfg.seed)?;
            model.to_checkpoint(&schema, cfg.parser.steps).save(&a.out)?;
            if let Some(acc) = report.final_accuracy {
                let rec = MetricRecord {
                    metric: "parse-accuracy".into(),
                    extractor: "none".into(),
                    counts: vec![("train".into(), train.len()), ("val".into(), val.len())],
                    value: acc,
                };
                println!("{rec}");
            }
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.config, seed)?;
            if let Some(steps) = a.steps {
                cfg.gan_steps = steps;
                cfg.decay_steps = cfg.decay_steps.min(steps);
            }
            if let Some(p) = a.parser {
                cfg.parser_checkpoint = Some(p);
            }
            if let Some(p) = a.train {
                cfg.train_manifest = Some(p);
            }
            cfg.validate()?;
            let schema = cfg.load_schema()?;
            let train_path = cfg.train_manifest.clone().ok_or_else(|| usage("no training manifest"))?;
            let train = Dataset::load(&train_path, &schema, cfg.net.resolution)?;
            let parser = match &cfg.parser_checkpoint {
                Some(p) => Some(load_parser(p, &schema)?),
                None => None,
            };
            let until = cfg.gan_steps;
            let mut trainer = match a.resume {
                Some(p) => GanTrainer::resume(cfg, &train, parser.as_ref(), &Checkpoint::load(&p)?)?,
                None => GanTrainer::new(cfg, &train, parser.as_ref())?,
            };
            trainer.run(until, Some(&a.out))?;
            println!("trained to step {} in {}", trainer.step(), a.out.display());
        }
        Command::Generate(a) => {
            let (ckpt, generator) = load_generator(&a.checkpoint)?;
            let schema = &ckpt.meta.schema;
            let res = ckpt.meta.spec.resolution;
            let source = load_pair(&a.source_image, &a.source_mask, schema, res)?;
            let target = load_pair(&a.target_image, &a.target_mask, schema, res)?;
            let out = generator.generate(schema, (&source.0, &source.1), (&target.0, &target.1))?;
            write_png(&out, &a.out)?;
        }
        Command::Edit(a) => {
            let text = fs::read_to_string(&a.request).with_context(|| format!("reading {}", a.request.display()))?;
            let req = EditRequest::from_toml(&text)?;
            let (ckpt, generator) = load_generator(&a.checkpoint)?;
            let ds = Dataset::load(&a.dataset, &ckpt.meta.schema, ckpt.meta.spec.resolution)?;
            let out = generator.generate_mixed(&ckpt.meta.schema, &req, &ds)?;
            write_png(&out, &a.out)?;
        }
        Command::Swap(a) => {
            let (ckpt, generator) = load_generator(&a.checkpoint)?;
            let ds = Dataset::load(&a.dataset, &ckpt.meta.schema, ckpt.meta.spec.resolution)?;
            let out = generator.generate_mixed(&ckpt.meta.schema, &EditRequest::swap(&a.source, &a.target), &ds)?;
            write_png(&out, &a.out)?;
        }
        Command::EvalFid(a) => {
            let real = load_images(&a.real)?;
            let generated = load_images(&a.generated)?;
            let resolution = real[0].height();
            let parser;
            let extractor: Box<dyn FeatureExtractor> = match &a.parser {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    parser = ParserModel::from_checkpoint(&ckpt, true)?;
                    Box::new(ParserFeatures::new(&parser, ckpt.id()))
                }
                None => Box::new(RandomProjection::new(seed.unwrap_or(0), resolution, 4, a.projection_dim)?),
            };
            let value = fid(&extractor.stats(&refs(&real))?, &extractor.stats(&refs(&generated))?)?;
            let rec = MetricRecord {
                metric: "fid".into(),
                extractor: extractor.id(),
                counts: vec![("real".into(), real.len()), ("generated".into(), generated.len())],
                value,
            };
            println!("{rec}");
        }
        Command::EvalMaskAcc(a) => {
            let (ckpt, generator) = load_generator(&a.checkpoint)?;
            let schema = &ckpt.meta.schema;
            let judge = load_parser(&a.parser, schema)?;
            let ds = Dataset::load(&a.dataset, schema, ckpt.meta.spec.resolution)?;
            if ds.is_empty() {
                bail!(maskface_core::Error::EmptyDataset(a.dataset.display().to_string()));
            }
            let mut pairs = Vec::with_capacity(ds.len());
            for (i, s) in ds.samples.iter().enumerate() {
                let target = match a.pairs {
                    PairMode::Swap => &ds.samples[(i + 1) % ds.len()],
                    PairMode::Identity => s,
                };
                let req = EditRequest::swap(&s.id, &target.id);
                pairs.push((generator.generate_mixed(schema, &req, &ds)?, target.mask.clone()));
            }
            let rec = MetricRecord {
                metric: "mask-accuracy".into(),
                extractor: format!("parser:{}", Checkpoint::load(&a.parser)?.id()),
                counts: vec![("pairs".into(), pairs.len())],
                value: mean_mask_accuracy(&pairs, &judge)?,
            };
            println!("{rec}");
        }
        Command::EvalAugment(a) => {
            let mut cfg = load_config(&a.config, seed)?;
            if let Some(steps) = a.steps {
                cfg.parser.steps = steps;
            }
            let schema = cfg.load_schema()?;
            let res = cfg.net.resolution;
            let real = Dataset::load(&a.real, &schema, res)?;
            let test = Dataset::load(&a.test, &schema, res)?;
            let synth = match (&a.synth, &a.checkpoint) {
                (Some(p), _) => Dataset::load(p, &schema, res)?.samples,
                (None, Some(p)) => synthesize(p, &real, &schema)?,
                (None, None) => return Err(usage("either --synth or --checkpoint is required")),
            };
            let exp = AugmentExperimentConfig {
                net: cfg.net.clone(),
                augment: cfg.parser.augment.unwrap_or_else(AugmentConfig::default),
                parser: cfg.parser.clone(),
                seed: cfg.seed,
            };
            let table = augmentation_experiment(&schema, &real.samples, &synth, &test.samples, &exp)?;
            for rec in table.records() {
                println!("{rec}");
            }
        }
        Command::MakeToyData(a) => {
            let ds = toy_dataset(seed.unwrap_or(0), a.count, a.resolution)?;
            let manifest = ds.save(&a.out)?;
            println!("wrote {} faces to {}", ds.len(), manifest.display());
        }
        Command::Serve(a) => {
            let config = ServiceConfig {
                addr: SocketAddr::new(a.host, a.port),
                assets_dir: a.assets,
                schema: schema_by_arg(&a.schema)?,
                resolution: a.resolution,
                dataset: a.dataset,
                checkpoint: a.checkpoint,
                parser: a.parser,
                max_upload_bytes: a.max_upload_bytes,
            };
            maskface_service::serve(&config, |addr| println!("listening on http://{addr}"))?;
        }
    }
    Ok(())
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => match args.preset {
            Preset::Toy => TrainConfig::toy(),
            Preset::Standard => TrainConfig::standard(),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn schema_by_arg(arg: &str) -> Result<LabelSchema> {
    Ok(match arg {
        "toy" | "helen" => LabelSchema::by_name(arg)?,
        path => LabelSchema::load(Path::new(path))?,
    })
}

fn load_generator(path: &Path) -> Result<(Checkpoint, Generator)> {
    let ckpt = Checkpoint::load(path)?;
    let generator = Generator::from_checkpoint(&ckpt)?;
    Ok((ckpt, generator))
}

fn load_parser(path: &Path, schema: &LabelSchema) -> Result<ParserModel> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.kind != CheckpointKind::Parser {
        bail!(maskface_core::Error::Checkpoint(format!("{}: not a parser checkpoint", path.display())));
    }
    if &ckpt.meta.schema != schema {
        bail!(maskface_core::Error::Checkpoint(format!(
            "{}: trained on a different label schema",
            path.display()
        )));
    }
    Ok(ParserModel::from_checkpoint(&ckpt, true)?)
}

/// Loads an image and its mask, resizing both to `res` when needed.
fn load_pair(image: &Path, mask: &Path, schema: &LabelSchema, res: usize) -> Result<(Image, LabelMask)> {
    let im = load_image(image)?;
    let m = load_mask(mask, schema)?;
    if (im.height(), im.width()) != (m.height(), m.width()) {
        bail!(maskface_core::Error::Shape(format!(
            "{} and {} differ in size",
            image.display(),
            mask.display()
        )));
    }
    if im.height() == res && im.width() == res {
        Ok((im, m))
    } else {
        Ok(resize_pair(&im, &m, res, res))
    }
}

/// Images listed by a manifest, or every `.png` in a directory in name order.
fn load_images(path: &Path) -> Result<Vec<Image>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v = Vec::new();
        for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "png") {
                v.push(p);
            }
        }
        v.sort();
        v
    } else {
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::load(path)?.entries.into_iter().map(|e| base.join(e.image)).collect()
    };
    if files.is_empty() {
        bail!(maskface_core::Error::EmptyDataset(format!("no images under {}", path.display())));
    }
    files.iter().map(|f| Ok(load_image(f)?)).collect()
}

/// One face swap per real sample: sample i onto the mask and background of
/// sample i+1, labeled with the target mask.
fn synthesize(checkpoint: &Path, real: &Dataset, schema: &LabelSchema) -> Result<Vec<Sample>> {
    let (ckpt, generator) = load_generator(checkpoint)?;
    if &ckpt.meta.schema != schema {
        bail!(maskface_core::Error::Checkpoint(format!(
            "{}: trained on a different label schema",
            checkpoint.display()
        )));
    }
    let n = real.len();
    (0..n)
        .map(|i| {
            let (src, dst) = (&real.samples[i], &real.samples[(i + 1) % n]);
            let image = generator.generate_mixed(schema, &EditRequest::swap(&src.id, &dst.id), real)?;
            Ok(Sample {
                id: format!("synth-{}", src.id),
                image,
                mask: real.mask(&dst.id)?,
            })
        })
        .collect()
}

/// Encodes first, then writes through a temporary sibling so a failure never
/// leaves a partial file at `path`.
fn write_png(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_image_png(image)?;
    let tmp = path.with_extension("png.tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn refs(images: &[Image]) -> Vec<&Image> {
    images.iter().collect()
}
