//! Training objectives.
//!
//! Every function takes tensors and returns a scalar tensor so gradients flow
//! through candle's autograd. Discriminator outputs are logits; the sigmoid is
//! folded into a numerically stable softplus. All expectations are batch
//! means and patch score maps are averaged.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, DType, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParserNet;
use crate::training::StepMode;

/// `log(1 + exp(x))` with gradient `sigmoid(x)`.
struct Softplus;

impl candle_core::CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softplus expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect()),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "softplus"))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let s = candle_nn::ops::sigmoid(&arg.detach())?;
        Ok(Some(grad_res.mul(&s)?))
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} = {v}")))
    }
}

/// Local reconstruction: `½ · mean` squared error over in-component pixels.
///
/// `crop` and `recon` are `(B, 3, h, w)`, `valid` is `(B, 1, h, w)` with 1 on
/// component pixels. An empty component contributes 0.
pub fn loss_local(crop: &Tensor, valid: &Tensor, recon: &Tensor) -> Result<Tensor> {
    check_same_shape(crop, recon, "local reconstruction")?;
    let (b, c, h, w) = crop.dims4()?;
    if valid.dims() != [b, 1, h, w] {
        return Err(Error::Shape(format!(
            "valid mask {:?} does not match crop {:?}",
            valid.dims(),
            crop.dims()
        )));
    }
    let diff = (recon - crop)?.broadcast_mul(valid)?;
    let count = (valid.sum_all()? * c as f64)?.maximum(1.0)?;
    Ok((diff.sqr()?.sum_all()?.div(&count)? * 0.5)?)
}

/// Global reconstruction: `½ · mean` squared error over all pixels.
pub fn loss_global(generated: &Tensor, source: &Tensor) -> Result<Tensor> {
    check_same_shape(generated, source, "global reconstruction")?;
    Ok(((generated - source)?.sqr()?.mean_all()? * 0.5)?)
}

/// Discriminator loss summed over scales:
/// `−E[log σ(real)] − E[log(1 − σ(fake))]`.
pub fn loss_d(real_logits: &[Tensor], fake_logits: &[Tensor]) -> Result<Tensor> {
    if real_logits.len() != fake_logits.len() || real_logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} real vs {} fake discriminator scales",
            real_logits.len(),
            fake_logits.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        let term = (softplus(&r.neg()?)?.mean_all()? + softplus(f)?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.expect("nonempty");
    check_finite(&total, "discriminator loss")?;
    Ok(total)
}

/// Generator adversarial loss summed over scales: `−E[log σ(fake)]`.
pub fn loss_g_sigmoid(fake_logits: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in fake_logits {
        let term = softplus(&f.neg()?)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("no discriminator scales".into()))?;
    check_finite(&total, "generator adversarial loss")?;
    Ok(total)
}

/// Feature matching: `½ · Σ_scales mean (f_fake − f_real)²`, real detached.
pub fn loss_fm(fake_features: &[Tensor], real_features: &[Tensor]) -> Result<Tensor> {
    if fake_features.len() != real_features.len() || fake_features.is_empty() {
        return Err(Error::Shape("feature matching scale count mismatch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (f, r) in fake_features.iter().zip(real_features) {
        check_same_shape(f, r, "feature matching")?;
        let term = (f - r.detach())?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("nonempty") * 0.5)?)
}

/// Pixel-wise cross entropy: mean over pixels of `−log softmax(logits)[target]`.
///
/// `target` is the one-hot encoding, same shape as `logits` `(B, L, H, W)`.
pub fn loss_parse_ce(logits: &Tensor, target_onehot: &Tensor) -> Result<Tensor> {
    check_same_shape(logits, target_onehot, "parsing cross entropy")?;
    let (b, _, h, w) = logits.dims4()?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = (logp * target_onehot)?.sum_all()?;
    Ok((picked.neg()? / (b * h * w) as f64)?)
}

/// Face parsing loss: cross entropy of the (frozen) parser's prediction on
/// the generated image against the target mask.
pub fn loss_gp(generated: &Tensor, target_onehot: &Tensor, parser: &ParserNet) -> Result<Tensor> {
    loss_parse_ce(&parser.forward(generated)?, target_onehot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub local: f64,
    pub global: f64,
    pub gd: f64,
    pub gp: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            local: 10.0,
            global: 1.0,
            gd: 1.0,
            gp: 1.0,
            fm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("local", self.local),
            ("global", self.global),
            ("gd", self.gd),
            ("gp", self.gp),
            ("fm", self.fm),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    /// Effective multiplier of this term in the total.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|t| t.value.is_finite())
    }
}

/// Generator-side loss terms of one step. Absent terms are not computed.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub local: Tensor,
    pub global: Option<Tensor>,
    pub sigmoid: Tensor,
    pub fm: Option<Tensor>,
    pub parse: Option<Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted generator objective. Unpaired steps force the global and
/// feature-matching weights to zero; zero-weight terms are left out of the
/// graph entirely, so they contribute exactly zero gradient.
pub fn total_g(terms: &GeneratorTerms, weights: &LossWeights, mode: StepMode) -> Result<(Tensor, LossReport)> {
    let paired = mode == StepMode::Paired;
    let w_global = if paired { weights.global } else { 0.0 };
    let w_fm = if paired { weights.gd * weights.fm } else { 0.0 };
    let entries: [(&str, Option<&Tensor>, f64); 5] = [
        ("local", Some(&terms.local), weights.local),
        ("global", terms.global.as_ref(), w_global),
        ("sigmoid", Some(&terms.sigmoid), weights.gd),
        ("fm", terms.fm.as_ref(), w_fm),
        ("parse", terms.parse.as_ref(), weights.gp),
    ];
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::default();
    for (name, term, weight) in entries {
        let Some(term) = term else { continue };
        let value = scalar(term)?;
        report.terms.push(LossTerm {
            name: name.to_string(),
            value,
            weight,
        });
        report.total += weight * value;
        if weight == 0.0 {
            continue;
        }
        let weighted = (term * weight)?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => terms.local.zeros_like()?,
    };
    if !report.is_finite() {
        return Err(Error::Numeric(format!("generator loss terms {:?}", report.terms)));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn local_identity_and_unit_offset() {
        let crop = t(&[0.0; 12], &[1, 3, 2, 2]);
        let valid = t(&[1.0; 4], &[1, 1, 2, 2]);
        assert_eq!(s(&loss_local(&crop, &valid, &crop).unwrap()), 0.0);
        let ones = t(&[1.0; 12], &[1, 3, 2, 2]);
        assert_eq!(s(&loss_local(&crop, &valid, &ones).unwrap()), 0.5);
        let none = t(&[0.0; 4], &[1, 1, 2, 2]);
        assert_eq!(s(&loss_local(&crop, &none, &ones).unwrap()), 0.0);
    }

    #[test]
    fn global_constant_offset() {
        let a = t(&[0.3; 12], &[1, 3, 2, 2]);
        let b = t(&[0.5; 12], &[1, 3, 2, 2]);
        assert!((s(&loss_global(&a, &b).unwrap()) - 0.02).abs() < 1e-12);
        assert!(matches!(
            loss_global(&a, &t(&[0.0; 3], &[1, 3, 1, 1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn adversarial_anchors() {
        let zeros = vec![t(&[0.0; 4], &[1, 1, 2, 2]), t(&[0.0; 1], &[1, 1, 1, 1])];
        let d = s(&loss_d(&zeros, &zeros).unwrap());
        assert!((d - 4.0 * 2f64.ln()).abs() < 1e-12);
        let g = s(&loss_g_sigmoid(&zeros).unwrap());
        assert!((g - 2.0 * 2f64.ln()).abs() < 1e-12);
        let real = vec![t(&[20.0; 4], &[1, 1, 2, 2])];
        let fake = vec![t(&[-20.0; 4], &[1, 1, 2, 2])];
        assert!(s(&loss_d(&real, &fake).unwrap()) < 1e-8);
        assert!(s(&loss_g_sigmoid(&real).unwrap()) < 1e-8);
    }

    #[test]
    fn discriminator_loss_rejects_non_finite() {
        let bad = vec![t(&[f64::NAN], &[1, 1, 1, 1])];
        assert!(matches!(loss_d(&bad, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn fm_unit_offset() {
        let a = vec![t(&[1.0; 8], &[1, 2, 2, 2])];
        let b = vec![t(&[0.0; 8], &[1, 2, 2, 2])];
        assert_eq!(s(&loss_fm(&a, &b).unwrap()), 0.5);
        assert_eq!(s(&loss_fm(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn ce_uniform_is_log_c() {
        let logits = t(&[0.0; 11 * 4], &[1, 11, 2, 2]);
        let mut onehot = vec![0.0; 44];
        for i in 0..4 {
            onehot[(i * 3 % 11) * 4 + i] = 1.0;
        }
        let ce = s(&loss_parse_ce(&logits, &t(&onehot, &[1, 11, 2, 2])).unwrap());
        assert!((ce - 11f64.ln()).abs() < 1e-12);
        assert!((ce - 2.3979).abs() < 1e-4);
    }

    #[test]
    fn total_g_hand_sums() {
        let one = t(&[1.0], &[]);
        let terms = GeneratorTerms {
            local: one.clone(),
            global: Some(one.clone()),
            sigmoid: one.clone(),
            fm: Some(one.clone()),
            parse: Some(one.clone()),
        };
        let w = LossWeights::default();
        let (tot, rep) = total_g(&terms, &w, StepMode::Paired).unwrap();
        assert_eq!(s(&tot), 14.0);
        assert_eq!(rep.total, 14.0);
        let (tot, rep) = total_g(&terms, &w, StepMode::Unpaired).unwrap();
        assert_eq!(s(&tot), 12.0);
        assert_eq!(rep.total, 12.0);
        let zero = LossWeights {
            local: 0.0,
            global: 0.0,
            gd: 0.0,
            gp: 0.0,
            fm: 0.0,
        };
        let (tot, rep) = total_g(&terms, &zero, StepMode::Paired).unwrap();
        assert_eq!(s(&tot), 0.0);
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn softplus_matches_closed_form_and_is_stable() {
        let x = t(&[-800.0, -1.0, 0.0, 1.0, 800.0], &[5]);
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((y[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[4], 800.0);
        let v = candle_core::Var::new(&[0.0f64, 2.0], &Device::Cpu).unwrap();
        let g = softplus(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
    }
}
