//! Acceptance report: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use maskface_core::evaluation::{
    augmentation_experiment, fid, mean_mask_accuracy, AugmentExperimentConfig, FidStats,
};
use maskface_core::training::{paired_term, pretrain_parser, window_means, GanTrainer, StepMode, TrainConfig};
use maskface_core::{Checkpoint, Dataset, Image, LabelMask, LabelSchema, Sample};
use nalgebra::{DMatrix, DVector};

/// Corpus size and split of the end-to-end run.
const CORPUS: usize = 200;
const TRAIN: usize = 160;
/// GAN steps per end-to-end run.
const GAN_STEPS: u64 = 1000;
/// Parser pretraining steps.
const PARSER_STEPS: u64 = 300;

struct Report {
    passed: usize,
    failed: Vec<String>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail}");
        std::io::stdout().flush().ok();
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(name.to_string());
        }
    }
}

fn gradient_correctness(report: &mut Report) {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for seed in [1, 2] {
        for (name, err) in common::gradient_report(seed) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let elapsed = start.elapsed();
    report.record(
        "gradient correctness",
        worst.1 < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "7 objectives x 2 draws, worst relative error {:.2e} ({}), {:.1}s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    );
}

fn loss_oracles(report: &mut Report) {
    let oracle = common::loss_oracle_report(50, 7);
    let worst = oracle.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let anchors = common::loss_anchors();
    let anchor_err = anchors.iter().map(|(_, g, w)| (g - w).abs()).fold(0.0, f64::max);
    report.record(
        "loss oracle equivalence",
        worst.1 < 1e-9 && anchor_err < 1e-12,
        format!(
            "50 cases x {} losses, worst deviation {:.2e} ({}); {} closed-form anchors within {:.1e}",
            oracle.len(),
            worst.1,
            worst.0,
            anchors.len(),
            anchor_err
        ),
    );
}

fn placement(report: &mut Report) {
    let result = common::placement_property(1000, 3);
    report.record(
        "placement invariant",
        result.is_ok(),
        match result {
            Ok(()) => "1000 random pastes equal the index oracle, zero outside the window".into(),
            Err(e) => e,
        },
    );
}

fn mode_weighting(report: &mut Report) {
    let ds = common::toy_dataset(0, 6);
    let mut with = common::micro_config(3);
    with.weights.gp = 0.0;
    let mut without = with.clone();
    without.weights.global = 0.0;
    without.weights.fm = 0.0;
    let mut a = GanTrainer::new(with, &ds, None).unwrap();
    let mut b = GanTrainer::new(without, &ds, None).unwrap();
    let pairs = [(0, 1), (3, 4)];
    let ra = a.step_on(StepMode::Unpaired, &pairs).unwrap();
    b.step_on(StepMode::Unpaired, &pairs).unwrap();
    let identical = a.generator_store().flat_values().unwrap() == b.generator_store().flat_values().unwrap();
    let terms_absent = ra.generator.get("global").is_none() && ra.generator.get("fm").is_none();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::micro_config(4);
    cfg.weights.gp = 0.0;
    let mut t = GanTrainer::new(cfg, &ds, None).unwrap();
    t.run(8, Some(dir.path())).unwrap();
    let log = maskface_core::training::MetricsLog::read(&dir.path().join("metrics.jsonl")).unwrap();
    let modes: String = log.iter().map(|r| r.mode.letter()).collect();
    report.record(
        "mode weighting",
        identical && terms_absent && modes == "PUPUPUPU",
        format!(
            "unpaired update identical with and without global/FM weights: {identical}; \
             terms absent from unpaired report: {terms_absent}; log {modes}"
        ),
    );
}

fn frozen_parser(report: &mut Report) {
    let ds = common::toy_dataset(1, 8);
    let cfg = common::micro_config(5);
    let parser = common::untrained_parser(&cfg);
    let before = parser.store().flat_values().unwrap();
    let mut t = GanTrainer::new(cfg, &ds, Some(&parser)).unwrap();
    let inner_before = t.parser().unwrap().store().flat_values().unwrap();
    t.run(200, None).unwrap();
    let inner_after = t.parser().unwrap().store().flat_values().unwrap();
    let same = inner_before == inner_after && parser.store().flat_values().unwrap() == before;
    report.record(
        "frozen parser",
        same && inner_before == before,
        format!("{} parser parameters bit-identical across 200 GAN steps: {same}", before.len()),
    );
}

/// Each held-out face rendered into the next face's mask.
fn swaps(t: &GanTrainer, schema: &LabelSchema, held_out: &[Sample]) -> Vec<(Image, LabelMask)> {
    let n = held_out.len();
    (0..n)
        .map(|i| {
            let (s, tg) = (&held_out[i], &held_out[(i + 1) % n]);
            let img = t
                .generator()
                .generate(schema, (&s.image, &s.mask), (&tg.image, &tg.mask))
                .unwrap();
            (img, tg.mask.clone())
        })
        .collect()
}

fn toy_end_to_end(report: &mut Report) {
    let start = Instant::now();
    let schema = LabelSchema::toy();
    let faces = maskface_core::toy::toy_corpus(0, CORPUS, 64);
    let samples: Vec<Sample> = faces.iter().map(|f| f.sample.clone()).collect();
    let (train, held_out) = samples.split_at(TRAIN);
    let mut cfg = TrainConfig::toy();
    cfg.parser.steps = PARSER_STEPS;

    let (loss_parser, rep) = pretrain_parser(&cfg.net, &schema, train, held_out, &cfg.parser, 0).unwrap();
    let acc = rep.final_accuracy.unwrap();
    report.record(
        "toy end-to-end (a) parser pretraining",
        acc >= 0.95,
        format!(
            "validation pixel accuracy {acc:.4} (from {:.4}) after {PARSER_STEPS} steps, need >= 0.95",
            rep.initial_accuracy.unwrap()
        ),
    );
    let (judge, judge_rep) = pretrain_parser(&cfg.net, &schema, train, held_out, &cfg.parser, 1).unwrap();

    let ds = Dataset::new(
        schema.clone(),
        train.to_vec(),
        faces[..TRAIN].iter().map(|f| Some(format!("hair{}", f.hair_style))).collect(),
        faces[..TRAIN].iter().map(|f| f.landmarks).collect(),
    )
    .unwrap();
    let mut with_gp = GanTrainer::new(cfg.clone(), &ds, Some(&loss_parser)).unwrap();
    let records = with_gp.run(GAN_STEPS, None).unwrap();
    let global = paired_term(&records, "global");
    let (first, last) = window_means(&global, 0.1).unwrap();
    report.record(
        "toy end-to-end (b) paired reconstruction",
        last < 0.5 * first,
        format!(
            "paired reconstruction MSE window mean {:.4} -> {:.4} (ratio {:.3}, need < 0.5) over {GAN_STEPS} steps",
            2.0 * first,
            2.0 * last,
            last / first
        ),
    );

    let mut no_gp_cfg = cfg.clone();
    no_gp_cfg.weights.gp = 0.0;
    let mut without_gp = GanTrainer::new(no_gp_cfg, &ds, None).unwrap();
    without_gp.run(GAN_STEPS, None).unwrap();
    let acc_with = mean_mask_accuracy(&swaps(&with_gp, &schema, held_out), &judge).unwrap();
    let acc_without = mean_mask_accuracy(&swaps(&without_gp, &schema, held_out), &judge).unwrap();
    let elapsed = start.elapsed();
    report.record(
        "toy end-to-end (c) mask accuracy",
        acc_with >= 0.90 && acc_with - acc_without >= 0.01 && elapsed <= Duration::from_secs(3600),
        format!(
            "independent parser (val {:.4}) on {} held-out swaps: with parsing loss {acc_with:.4}, \
             without {acc_without:.4}, gap {:+.4} (need >= 0.90 and >= +0.01); e2e runtime {:.0}s",
            judge_rep.final_accuracy.unwrap(),
            held_out.len(),
            acc_with - acc_without,
            elapsed.as_secs_f64()
        ),
    );
}

fn fid_anchors(report: &mut Report) {
    let eye = DMatrix::<f64>::identity(4, 4);
    let a = FidStats::new(DVector::zeros(4), eye.clone(), 100).unwrap();
    let mut shifted = DVector::zeros(4);
    shifted[0] = 1.0;
    let b = FidStats::new(shifted, eye, 100).unwrap();
    let self_dist = fid(&a, &a).unwrap();
    let unit = fid(&a, &b).unwrap();

    let mut r = common::rng(21);
    let rows = |r: &mut _, shift: f64| -> Vec<Vec<f64>> {
        (0..64).map(|_| common::randn_vec(r, 6, 1.0).into_iter().map(|v| v + shift).collect()).collect()
    };
    let p = FidStats::from_features(&rows(&mut r, 0.0)).unwrap();
    let q = FidStats::from_features(&rows(&mut r, 0.3)).unwrap();
    let asym = (fid(&p, &q).unwrap() - fid(&q, &p).unwrap()).abs();
    report.record(
        "FID anchors",
        self_dist.abs() < 1e-6 && (unit - 1.0).abs() < 1e-6 && asym < 1e-6,
        format!("fid(a,a) = {self_dist:.2e}; unit mean shift = {unit:.9}; |fid(p,q) - fid(q,p)| = {asym:.2e}"),
    );
}

fn augmentation_control(report: &mut Report) {
    let schema = LabelSchema::toy();
    let samples: Vec<Sample> = maskface_core::toy::toy_corpus(3, 140, 64).into_iter().map(|f| f.sample).collect();
    let (train, test) = samples.split_at(100);
    let base = TrainConfig::toy();
    let cfg = AugmentExperimentConfig {
        net: base.net.clone(),
        parser: maskface_core::training::ParserTrainConfig {
            steps: PARSER_STEPS,
            ..base.parser.clone()
        },
        augment: maskface_core::augment::AugmentConfig::default(),
        seed: 11,
    };
    let table = augmentation_experiment(&schema, train, train, test, &cfg).unwrap();
    let [r1, r2, r3] = &table.rows;
    let gap = (r2.accuracy - r3.accuracy).abs();
    report.record(
        "augmentation harness control",
        gap <= 0.01,
        format!(
            "{} {:.4} | {} {:.4} | {} (synthetic = copy of real) {:.4}; rows 2-3 gap {gap:.4}, need <= 0.01",
            r1.name, r1.accuracy, r2.name, r2.accuracy, r3.name, r3.accuracy
        ),
    );
}

fn reproducibility(report: &mut Report) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let ds = common::toy_dataset(17, 12);
        ds.save(d.path()).unwrap();
    }
    let mut identical = true;
    let mut files = 0;
    for entry in walk(dirs[0].path()) {
        let rel = entry.strip_prefix(dirs[0].path()).unwrap();
        let other = dirs[1].path().join(rel);
        identical &= std::fs::read(&entry).ok() == std::fs::read(&other).ok();
        files += 1;
    }

    let ds = common::toy_dataset(0, 6);
    let mut cfg = common::micro_config(12);
    cfg.weights.gp = 0.0;
    let mut straight = GanTrainer::new(cfg.clone(), &ds, None).unwrap();
    straight.run(100, None).unwrap();
    let mut half = GanTrainer::new(cfg.clone(), &ds, None).unwrap();
    half.run(50, None).unwrap();
    let path = dirs[0].path().join("half.safetensors");
    half.to_checkpoint().save(&path).unwrap();
    drop(half);
    let mut resumed = GanTrainer::resume(cfg, &ds, None, &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(100, None).unwrap();
    let drift = common::max_abs_diff(
        &straight.generator_store().flat_values().unwrap(),
        &resumed.generator_store().flat_values().unwrap(),
    )
    .max(common::max_abs_diff(
        &straight.discriminator_store().flat_values().unwrap(),
        &resumed.discriminator_store().flat_values().unwrap(),
    ));
    report.record(
        "reproducibility",
        identical && files > 0 && drift < 1e-6,
        format!("{files} corpus files bit-identical across two writes: {identical}; 100 vs 50+50 step resume max drift {drift:.2e}"),
    );
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn main() {
    let started = Instant::now();
    let mut report = Report {
        passed: 0,
        failed: Vec::new(),
    };
    gradient_correctness(&mut report);
    loss_oracles(&mut report);
    placement(&mut report);
    mode_weighting(&mut report);
    frozen_parser(&mut report);
    fid_anchors(&mut report);
    reproducibility(&mut report);
    augmentation_control(&mut report);
    toy_end_to_end(&mut report);
    let total = report.passed + report.failed.len();
    println!(
        "acceptance: {}/{total} criteria passed in {:.0}s",
        report.passed,
        started.elapsed().as_secs_f64()
    );
    if !report.failed.is_empty() {
        println!("failed: {}", report.failed.join(", "));
        std::process::exit(1);
    }
}
