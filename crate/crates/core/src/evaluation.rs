//! Quality metrics: Fréchet distance between feature statistics, per-pixel
//! mask accuracy under an independent parser, and the parsing-with-synthetic
//! data augmentation experiment.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::nn::NetSpec;
use crate::pipeline::Sample;
use crate::schema::LabelSchema;
use crate::training::{batch_images, pretrain_parser, ParserModel, ParserTrainConfig};

/// Eigenvalues above `-PSD_TOLERANCE * max(1, largest)` count as zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Gaussian summary of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FidStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl FidStats {
    /// Checks shape, symmetry and positive semidefiniteness.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if count < 2 {
            return Err(Error::EmptyDataset(format!("feature statistics need at least 2 samples, got {count}")));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape(format!("mean has dim {d}, covariance is {}x{}", cov.nrows(), cov.ncols())));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature statistics contain non-finite values".into()));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        let stats = Self { mean, cov, count };
        psd_sqrt_eigenvalues(&stats.cov)?;
        Ok(stats)
    }

    /// Sample mean and unbiased covariance of row feature vectors.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::EmptyDataset(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-decomposition of a symmetric matrix with small negative eigenvalues
/// clipped to zero; larger negative ones are an error.
fn psd_sqrt_eigenvalues(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = PSD_TOLERANCE * largest.max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -tol {
            return Err(Error::Numeric(format!("matrix is not positive semidefinite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_sqrt_eigenvalues(m)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `tr((A B)^1/2) = tr((A^1/2 B A^1/2)^1/2)`, where the
/// inner matrix is symmetric, so both roots come from symmetric eigensolves.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let root_a = psd_sqrt(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = psd_sqrt_eigenvalues(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Maps images to fixed-length feature vectors for FID.
pub trait FeatureExtractor {
    /// Identity recorded alongside every metric computed with this extractor.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;

    fn stats(&self, images: &[&Image]) -> Result<FidStats> {
        FidStats::from_features(&self.features(images)?)
    }
}

/// Spatially pooled mean and standard deviation of a parser's bottleneck.
pub struct ParserFeatures<'a> {
    parser: &'a ParserModel,
    label: String,
}

impl<'a> ParserFeatures<'a> {
    /// `label` names the parser weights, usually a checkpoint id.
    pub fn new(parser: &'a ParserModel, label: impl Into<String>) -> Self {
        Self {
            parser,
            label: label.into(),
        }
    }
}

impl FeatureExtractor for ParserFeatures<'_> {
    fn id(&self) -> String {
        format!("parser-bottleneck:{}", self.label)
    }

    fn dim(&self) -> usize {
        2 * self.parser.net().bottleneck_channels()
    }

    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = batch_images(chunk, DType::F32, &Device::Cpu)?;
            let (_, deep) = self.parser.net().forward_with_bottleneck(&x)?;
            let (b, c, h, w) = deep.dims4()?;
            let flat = deep.detach().to_dtype(DType::F64)?.reshape((b, c, h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let std = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?.sqrt()?;
            let both = candle_core::Tensor::cat(&[&mean.squeeze(D::Minus1)?, &std], 1)?;
            out.extend(both.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Fixed Gaussian random projection of block-averaged pixels. Needs no
/// training, so it suits smoke tests and relative comparisons.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    seed: u64,
    block: usize,
    resolution: usize,
    weights: DMatrix<f64>,
}

impl RandomProjection {
    pub fn new(seed: u64, resolution: usize, block: usize, dim: usize) -> Result<Self> {
        if block == 0 || !resolution.is_multiple_of(block) || dim == 0 {
            return Err(Error::Config(format!(
                "projection block {block} must divide resolution {resolution}, dim {dim} must be positive"
            )));
        }
        let side = resolution / block;
        let inputs = 3 * side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = (inputs as f64).sqrt();
        let weights = DMatrix::from_fn(dim, inputs, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / norm
        });
        Ok(Self {
            seed,
            block,
            resolution,
            weights,
        })
    }

    fn pooled(&self, image: &Image) -> DVector<f64> {
        let side = self.resolution / self.block;
        let area = (self.block * self.block) as f64;
        let mut v = DVector::zeros(3 * side * side);
        for r in 0..self.resolution {
            for c in 0..self.resolution {
                let px = image.get(r, c);
                let cell = (r / self.block) * side + c / self.block;
                for (ch, x) in px.iter().enumerate() {
                    v[ch * side * side + cell] += *x as f64 / area;
                }
            }
        }
        v
    }
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> String {
        format!(
            "random-projection:seed={},block={},dim={}",
            self.seed,
            self.block,
            self.weights.nrows()
        )
    }

    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|im| {
                if im.height() != self.resolution || im.width() != self.resolution {
                    return Err(Error::Shape(format!(
                        "extractor expects {0}x{0} images, got {1}x{2}",
                        self.resolution,
                        im.height(),
                        im.width()
                    )));
                }
                Ok((&self.weights * self.pooled(im)).iter().copied().collect())
            })
            .collect()
    }
}

/// Fraction of pixels where `predicted` equals `target`.
pub fn pixel_accuracy(predicted: &LabelMask, target: &LabelMask) -> Result<f64> {
    if (predicted.height(), predicted.width()) != (target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            predicted.height(),
            predicted.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(predicted.accuracy_against(target))
}

/// Agreement between the parse of a generated face and the mask it was
/// generated from. `parser` must not be the one used as a training loss.
pub fn mask_accuracy(generated: &Image, target: &LabelMask, parser: &ParserModel) -> Result<f64> {
    let parsed = parser.predict(&[generated])?.pop().expect("one prediction");
    pixel_accuracy(&parsed, target)
}

/// Mean [`mask_accuracy`] over pairs.
pub fn mean_mask_accuracy(pairs: &[(Image, LabelMask)], parser: &ParserModel) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no generated images to score".into()));
    }
    let images: Vec<&Image> = pairs.iter().map(|(i, _)| i).collect();
    let parsed = parser.predict(&images)?;
    let mut total = 0.0;
    for (p, (_, t)) in parsed.iter().zip(pairs) {
        total += pixel_accuracy(p, t)?;
    }
    Ok(total / pairs.len() as f64)
}

/// One metric value with enough context to keep results comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub extractor: String,
    /// Named sample counts, such as `("real", 200)`.
    pub counts: Vec<(String, usize)>,
    pub value: f64,
}

impl fmt::Display for MetricRecord {
    /// `metric=<m> extractor=<e> n.<name>=<k>... value=<v>`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "metric={} extractor={}", self.metric, self.extractor)?;
        for (name, n) in &self.counts {
            write!(f, " n.{name}={n}")?;
        }
        write!(f, " value={}", self.value)
    }
}

impl FromStr for MetricRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("metric record `{line}`: {m}"));
        let (mut metric, mut extractor, mut value) = (None, None, None);
        let mut counts = Vec::new();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("field without `=`"))?;
            match k {
                "metric" => metric = Some(v.to_string()),
                "extractor" => extractor = Some(v.to_string()),
                "value" => value = Some(v.parse::<f64>().map_err(|_| bad("value is not a number"))?),
                _ => {
                    let name = k.strip_prefix("n.").ok_or_else(|| bad("unknown field"))?;
                    counts.push((name.to_string(), v.parse().map_err(|_| bad("count is not an integer"))?));
                }
            }
        }
        Ok(Self {
            metric: metric.ok_or_else(|| bad("missing metric"))?,
            extractor: extractor.ok_or_else(|| bad("missing extractor"))?,
            counts,
            value: value.ok_or_else(|| bad("missing value"))?,
        })
    }
}

/// Settings shared by the three parsers of the augmentation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentExperimentConfig {
    pub net: NetSpec,
    pub parser: ParserTrainConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    pub name: String,
    pub train_count: usize,
    pub accuracy: f64,
}

/// Test accuracies of parsers trained on real data without augmentation,
/// with standard augmentation, and with standard augmentation plus
/// synthetic pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentTable {
    pub rows: [AugmentRow; 3],
}

impl AugmentTable {
    pub fn records(&self) -> Vec<MetricRecord> {
        self.rows
            .iter()
            .map(|r| MetricRecord {
                metric: format!("parse-accuracy.{}", r.name),
                extractor: "none".into(),
                counts: vec![("train".into(), r.train_count)],
                value: r.accuracy,
            })
            .collect()
    }
}

/// Trains the three parsers with identical seeds and step budgets and scores
/// each on `test`. Synthetic samples carry their target masks as labels.
pub fn augmentation_experiment(
    schema: &LabelSchema,
    real_train: &[Sample],
    synth: &[Sample],
    test: &[Sample],
    cfg: &AugmentExperimentConfig,
) -> Result<AugmentTable> {
    if real_train.is_empty() || synth.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset(
            "augmentation experiment needs real, synthetic and test samples".into(),
        ));
    }
    let mut combined = real_train.to_vec();
    combined.extend_from_slice(synth);
    let runs: [(&str, &[Sample], Option<AugmentConfig>); 3] = [
        ("real", real_train, None),
        ("real+aug", real_train, Some(cfg.augment)),
        ("real+synth+aug", &combined, Some(cfg.augment)),
    ];
    let rows = runs.map(|(name, train, augment)| -> Result<AugmentRow> {
        let pc = ParserTrainConfig {
            augment,
            ..cfg.parser.clone()
        };
        let (model, _) = pretrain_parser(&cfg.net, schema, train, &[], &pc, cfg.seed)?;
        tracing::info!(row = name, "augmentation experiment parser trained");
        Ok(AugmentRow {
            name: name.to_string(),
            train_count: train.len(),
            accuracy: model.accuracy(test)?,
        })
    });
    let [a, b, c] = rows;
    Ok(AugmentTable { rows: [a?, b?, c?] })
}
