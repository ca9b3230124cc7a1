//! Checks shared by the focused test targets and the acceptance report.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use maskface_core::losses::{
    loss_d, loss_fm, loss_g_sigmoid, loss_global, loss_gp, loss_local, loss_parse_ce, total_g, GeneratorTerms,
    LossWeights,
};
use maskface_core::nn::{ParserNet, VarStore};
use maskface_core::pipeline::place_anchored;
use maskface_core::training::{ParserModel, TrainConfig};
use maskface_core::{LabelSchema, NetSpec, StepMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(randn_vec(rng, n, scale), shape)
}

/// Random one-hot labels over axis 1 of `(B, L, H, W)`.
pub fn random_onehot(rng: &mut ChaCha8Rng, b: usize, l: usize, h: usize, w: usize) -> Tensor {
    let mut v = vec![0.0; b * l * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let k = rng.random_range(0..l);
            v[(bi * l + k) * h * w + p] = 1.0;
        }
    }
    tensor(v, &[b, l, h, w])
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Norm-wise relative error between the autograd gradient of `f` with
/// respect to `inputs[..wrt]` and central finite differences.
pub fn fd_relative_error(inputs: &[Tensor], wrt: usize, f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs[..wrt].iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let mut live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    live.extend(inputs[wrt..].iter().cloned());
    let grads = f(&live).backward().unwrap();
    let h = 1e-6;
    let (mut num, mut den_a, mut den_n) = (0.0f64, 0.0f64, 0.0f64);
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        let base: Vec<f64> = inputs[i].flatten_all().unwrap().to_vec1().unwrap();
        for (j, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut d = base.clone();
                d[j] += delta;
                let mut args = inputs.to_vec();
                args[i] = tensor(d, inputs[i].dims());
                scalar(&f(&args))
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            num += (a - numeric).powi(2);
            den_a += a * a;
            den_n += numeric * numeric;
        }
    }
    num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12)
}

/// Small f64 parser for gradient checks through the parsing loss.
pub fn tiny_parser(seed: u64, labels: usize) -> (VarStore, ParserNet) {
    let spec = NetSpec {
        resolution: 8,
        parser_channels: 2,
        ..NetSpec::toy(labels)
    };
    let mut store = VarStore::new(seed, DType::F64, &Device::Cpu).freeze();
    let net = ParserNet::new(&mut store.root(), &spec).unwrap();
    (store, net)
}

/// Relative gradient error of every objective, checked on ≤ 8x8 inputs.
pub fn gradient_report(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let crop = randn(&mut r, &[2, 3, 6, 8], 1.0);
    let valid = tensor((0..96).map(|_| r.random_range(0..2) as f64).collect(), &[2, 1, 6, 8]);
    let recon = randn(&mut r, &[2, 3, 6, 8], 1.0);
    out.push((
        "local reconstruction",
        fd_relative_error(&[recon, crop, valid], 1, &|t| loss_local(&t[1], &t[2], &t[0]).unwrap()),
    ));

    let gen = randn(&mut r, &[2, 3, 8, 8], 1.0);
    let src = randn(&mut r, &[2, 3, 8, 8], 1.0);
    out.push(("global reconstruction", fd_relative_error(&[gen, src], 1, &|t| loss_global(&t[0], &t[1]).unwrap())));

    let real = [randn(&mut r, &[2, 1, 4, 4], 2.0), randn(&mut r, &[2, 1, 2, 2], 2.0)];
    let fake = [randn(&mut r, &[2, 1, 4, 4], 2.0), randn(&mut r, &[2, 1, 2, 2], 2.0)];
    let all = [real[0].clone(), real[1].clone(), fake[0].clone(), fake[1].clone()];
    out.push((
        "discriminator adversarial",
        fd_relative_error(&all, 4, &|t| loss_d(&t[..2], &t[2..]).unwrap()),
    ));
    out.push(("generator adversarial", fd_relative_error(&fake, 2, &|t| loss_g_sigmoid(t).unwrap())));

    let ff = [randn(&mut r, &[2, 4, 4, 4], 1.0), randn(&mut r, &[2, 4, 2, 2], 1.0)];
    let rf = [randn(&mut r, &[2, 4, 4, 4], 1.0), randn(&mut r, &[2, 4, 2, 2], 1.0)];
    let all = [ff[0].clone(), ff[1].clone(), rf[0].clone(), rf[1].clone()];
    out.push(("feature matching", fd_relative_error(&all, 2, &|t| loss_fm(&t[..2], &t[2..]).unwrap())));

    let logits = randn(&mut r, &[2, 4, 6, 6], 2.0);
    let onehot = random_onehot(&mut r, 2, 4, 6, 6);
    out.push((
        "parsing cross entropy",
        fd_relative_error(&[logits, onehot], 1, &|t| loss_parse_ce(&t[0], &t[1]).unwrap()),
    ));

    let (_store, parser) = tiny_parser(seed, 3);
    let image = randn(&mut r, &[1, 3, 8, 8], 0.5);
    let target = random_onehot(&mut r, 1, 3, 8, 8);
    out.push((
        "parsing loss through frozen parser",
        fd_relative_error(&[image, target], 1, &|t| loss_gp(&t[0], &t[1], &parser).unwrap()),
    ));
    out
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn neg_log_sigmoid(x: f64) -> f64 {
    -(1.0 / (1.0 + (-x).exp())).ln()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

/// Largest absolute deviation between each loss and a direct summation
/// over `cases` random inputs.
pub fn loss_oracle_report(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 7];
    let names = [
        "local reconstruction",
        "global reconstruction",
        "discriminator adversarial",
        "generator adversarial",
        "feature matching",
        "parsing cross entropy",
        "weighted generator total",
    ];
    for _ in 0..cases {
        let (b, h, w) = (r.random_range(1..4), r.random_range(1..7), r.random_range(1..7));

        let crop = randn(&mut r, &[b, 3, h, w], 1.0);
        let rec = randn(&mut r, &[b, 3, h, w], 1.0);
        let valid: Vec<f64> = (0..b * h * w).map(|_| r.random_range(0..2) as f64).collect();
        let (cv, rv) = (flat(&crop), flat(&rec));
        let mut sum = 0.0;
        for bi in 0..b {
            for c in 0..3 {
                for p in 0..h * w {
                    let k = (bi * 3 + c) * h * w + p;
                    sum += valid[bi * h * w + p] * (rv[k] - cv[k]).powi(2);
                }
            }
        }
        let count: f64 = valid.iter().sum::<f64>() * 3.0;
        let oracle = 0.5 * sum / count.max(1.0);
        let got = scalar(&loss_local(&crop, &tensor(valid, &[b, 1, h, w]), &rec).unwrap());
        worst[0] = worst[0].max((got - oracle).abs());

        let oracle = 0.5 * cv.iter().zip(&rv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cv.len() as f64;
        worst[1] = worst[1].max((scalar(&loss_global(&rec, &crop).unwrap()) - oracle).abs());

        let scales = r.random_range(1..4);
        let real: Vec<Tensor> = (0..scales).map(|s| randn(&mut r, &[b, 1, h + s, w + s], 3.0)).collect();
        let fake: Vec<Tensor> = (0..scales).map(|s| randn(&mut r, &[b, 1, h + s, w + s], 3.0)).collect();
        let mut oracle = 0.0;
        for (rt, ft) in real.iter().zip(&fake) {
            let (rv, fv) = (flat(rt), flat(ft));
            oracle += rv.iter().map(|&x| neg_log_sigmoid(x)).sum::<f64>() / rv.len() as f64;
            oracle += fv.iter().map(|&x| softplus(x)).sum::<f64>() / fv.len() as f64;
        }
        worst[2] = worst[2].max((scalar(&loss_d(&real, &fake).unwrap()) - oracle).abs());
        let oracle: f64 = fake
            .iter()
            .map(|t| {
                let v = flat(t);
                v.iter().map(|&x| neg_log_sigmoid(x)).sum::<f64>() / v.len() as f64
            })
            .sum();
        worst[3] = worst[3].max((scalar(&loss_g_sigmoid(&fake).unwrap()) - oracle).abs());

        let mut oracle = 0.0;
        for (a, bt) in real.iter().zip(&fake) {
            let (av, bv) = (flat(a), flat(bt));
            oracle += av.iter().zip(&bv).map(|(x, y)| (y - x).powi(2)).sum::<f64>() / av.len() as f64;
        }
        oracle *= 0.5;
        worst[4] = worst[4].max((scalar(&loss_fm(&fake, &real).unwrap()) - oracle).abs());

        let l = r.random_range(2..6);
        let logits = randn(&mut r, &[b, l, h, w], 3.0);
        let onehot = random_onehot(&mut r, b, l, h, w);
        let (lv, ov) = (flat(&logits), flat(&onehot));
        let mut sum = 0.0;
        for bi in 0..b {
            for p in 0..h * w {
                let at = |k: usize| (bi * l + k) * h * w + p;
                let z: f64 = (0..l).map(|k| lv[at(k)].exp()).sum();
                let t = (0..l).find(|&k| ov[at(k)] == 1.0).unwrap();
                sum += z.ln() - lv[at(t)];
            }
        }
        let oracle = sum / (b * h * w) as f64;
        worst[5] = worst[5].max((scalar(&loss_parse_ce(&logits, &onehot).unwrap()) - oracle).abs());

        let v: Vec<f64> = (0..5).map(|_| r.random_range(0.0..3.0)).collect();
        let wts = LossWeights {
            local: r.random_range(0.0..20.0),
            global: r.random_range(0.0..2.0),
            gd: r.random_range(0.0..2.0),
            gp: r.random_range(0.0..2.0),
            fm: r.random_range(0.0..2.0),
        };
        let sc = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let terms = GeneratorTerms {
            local: sc(v[0]),
            global: Some(sc(v[1])),
            sigmoid: sc(v[2]),
            fm: Some(sc(v[3])),
            parse: Some(sc(v[4])),
        };
        for mode in [StepMode::Paired, StepMode::Unpaired] {
            let paired = if mode == StepMode::Paired { 1.0 } else { 0.0 };
            let oracle = wts.local * v[0]
                + paired * wts.global * v[1]
                + wts.gd * (v[2] + paired * wts.fm * v[3])
                + wts.gp * v[4];
            let (t, rep) = total_g(&terms, &wts, mode).unwrap();
            worst[6] = worst[6].max((scalar(&t) - oracle).abs()).max((rep.total - oracle).abs());
        }
    }
    names.into_iter().zip(worst).collect()
}

/// Closed-form anchors: `(name, got, expected)`.
pub fn loss_anchors() -> Vec<(&'static str, f64, f64)> {
    let dev = Device::Cpu;
    let zeros = |s: &[usize]| Tensor::zeros(s, DType::F64, &dev).unwrap();
    let mut out = Vec::new();
    for l in [2usize, 5, 11] {
        let mut r = rng(l as u64);
        let onehot = random_onehot(&mut r, 2, l, 3, 3);
        out.push((
            "uniform-logit cross entropy equals log C",
            scalar(&loss_parse_ce(&zeros(&[2, l, 3, 3]), &onehot).unwrap()),
            (l as f64).ln(),
        ));
    }
    let scales = [zeros(&[2, 1, 4, 4]), zeros(&[2, 1, 2, 2])];
    out.push((
        "discriminator loss at sigma one half is 2 log 2 per scale",
        scalar(&loss_d(&scales, &scales).unwrap()),
        2.0 * 2.0 * 2f64.ln(),
    ));
    out.push((
        "generator adversarial loss at sigma one half is log 2 per scale",
        scalar(&loss_g_sigmoid(&scales).unwrap()),
        2.0 * 2f64.ln(),
    ));
    let one = Tensor::new(1.0f64, &dev).unwrap();
    let terms = GeneratorTerms {
        local: one.clone(),
        global: Some(one.clone()),
        sigmoid: one.clone(),
        fm: Some(one.clone()),
        parse: Some(one),
    };
    let w = LossWeights::default();
    out.push(("paired total with unit terms", total_g(&terms, &w, StepMode::Paired).unwrap().1.total, 14.0));
    out.push(("unpaired total with unit terms", total_g(&terms, &w, StepMode::Unpaired).unwrap().1.total, 12.0));
    out
}

/// Brute-force paste oracle: element `(c, y, x)` of the canvas reads the
/// source at `(y - center.0 + anchor.0, x - center.1 + anchor.1)`.
pub fn placement_oracle(
    src: &[f64],
    (c, h, w): (usize, usize, usize),
    anchor: (usize, usize),
    center: (usize, usize),
    (ch, cw): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; c * ch * cw];
    for k in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                let sy = y as isize - center.0 as isize + anchor.0 as isize;
                let sx = x as isize - center.1 as isize + anchor.1 as isize;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[(k * ch + y) * cw + x] = src[(k * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Runs `trials` random pastes; returns the first disagreement.
pub fn placement_property(trials: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for trial in 0..trials {
        let c = r.random_range(1..4);
        let canvas = (r.random_range(1..17), r.random_range(1..17));
        let (h, w) = (r.random_range(1..=canvas.0), r.random_range(1..=canvas.1));
        let anchor = (r.random_range(0..h), r.random_range(0..w));
        let center = (r.random_range(0..canvas.0 + 4), r.random_range(0..canvas.1 + 4));
        let src: Vec<f64> = (0..c * h * w).map(|i| 1.0 + i as f64).collect();
        let got = place_anchored(&tensor(src.clone(), &[c, h, w]), anchor, Some(center), canvas)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        let want = placement_oracle(&src, (c, h, w), anchor, center, canvas);
        if flat(&got) != want {
            return Err(format!(
                "trial {trial}: size {h}x{w} anchor {anchor:?} center {center:?} canvas {canvas:?}"
            ));
        }
    }
    Ok(())
}

/// The first `count` faces of the procedural corpus as a training set.
pub fn toy_dataset(seed: u64, count: usize) -> maskface_core::Dataset {
    let faces = maskface_core::toy::toy_corpus(seed, count, 64);
    maskface_core::Dataset::new(
        LabelSchema::toy(),
        faces.iter().map(|f| f.sample.clone()).collect(),
        faces.iter().map(|f| Some(format!("hair{}", f.hair_style))).collect(),
        faces.iter().map(|f| f.landmarks).collect(),
    )
    .unwrap()
}

/// Toy configuration with the narrowest widths, for fast mechanical checks.
pub fn micro_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.seed = seed;
    cfg.batch_size = 1;
    cfg.net = NetSpec {
        base_channels: 4,
        embed_channels: 4,
        mask_feature_channels: 8,
        background_channels: 4,
        decoder_channels: 8,
        disc_channels: 4,
        parser_channels: 4,
        ..cfg.net
    };
    cfg
}

/// Untrained parser matching `cfg`.
pub fn untrained_parser(cfg: &TrainConfig) -> ParserModel {
    ParserModel::new(&cfg.net, 99).unwrap()
}

/// Largest absolute difference between two flattened parameter sets.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
