//! End-to-end behaviour of the `maskface` binary on a tiny toy model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use maskface_core::io::load_image;
use maskface_core::training::TrainConfig;
use maskface_core::{ComponentId, EditRequest, LabelSchema, Manifest, NetSpec};

const SUBCOMMANDS: [&str; 11] = [
    "prep",
    "pretrain-parser",
    "train",
    "generate",
    "edit",
    "swap",
    "eval-fid",
    "eval-mask-acc",
    "eval-augment",
    "make-toy-data",
    "serve",
];

fn maskface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskface")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = maskface(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    root: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
    parser: PathBuf,
}

/// Toy data, a two-step GAN and a two-step parser, all produced by the
/// binary itself and shared by every test in this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let data = root.join("data");
        ok(&["--seed", "7", "make-toy-data", "-n", "6", "--out", s(&data)]);

        let mut cfg = TrainConfig::toy();
        cfg.batch_size = 1;
        cfg.weights.gp = 0.0;
        cfg.checkpoint_every = 0;
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
        cfg.parser.batch_size = 2;
        let config = root.join("micro.toml");
        std::fs::write(&config, cfg.to_toml()).unwrap();

        let manifest = data.join("manifest.txt");
        let run = root.join("run");
        ok(&["train", "--config", s(&config), "--train", s(&manifest), "--steps", "2", "--out", s(&run)]);
        let parser = root.join("parser.safetensors");
        ok(&[
            "pretrain-parser",
            "--config",
            s(&config),
            "--train",
            s(&manifest),
            "--val",
            s(&manifest),
            "--steps",
            "2",
            "--out",
            s(&parser),
        ]);
        Fixture {
            checkpoint: run.join("final.safetensors"),
            manifest,
            parser,
            root,
        }
    })
}

fn generate(f: &Fixture, source: &str, target: &str, out: &Path) -> Output {
    let data = f.root.join("data");
    let image = |id: &str| data.join(format!("images/{id}.png"));
    let mask = |id: &str| data.join(format!("masks/{id}.png"));
    maskface(&[
        "generate",
        "--checkpoint",
        s(&f.checkpoint),
        "--source-image",
        s(&image(source)),
        "--source-mask",
        s(&mask(source)),
        "--target-image",
        s(&image(target)),
        "--target-mask",
        s(&mask(target)),
        "--out",
        s(out),
    ])
}

fn ids(f: &Fixture) -> Vec<String> {
    Manifest::load(&f.manifest).unwrap().entries.into_iter().map(|e| e.id).collect()
}

#[test]
fn every_command_has_help() {
    for cmd in SUBCOMMANDS {
        let out = maskface(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
    assert_eq!(code(&maskface(&["--help"])), 0);
    assert_eq!(code(&maskface(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&maskface(&["make-toy-data", "-n", "1", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&maskface(&["no-such-command"])), 1);
    assert_eq!(code(&maskface(&[])), 1);
    assert_eq!(code(&maskface(&["generate", "--checkpoint", "a"])), 1);
}

#[test]
fn toy_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["--seed", "3", "make-toy-data", "-n", "4", "--out", s(&a)]);
    ok(&["--seed", "3", "make-toy-data", "-n", "4", "--out", s(&b)]);
    ok(&["--seed", "4", "make-toy-data", "-n", "4", "--out", s(&c)]);
    let manifest = Manifest::load(&a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.entries.len(), 4);
    let schema = LabelSchema::load(&a.join("schema.toml")).unwrap();
    assert_eq!(schema, LabelSchema::toy());
    let mut differs = false;
    for e in &manifest.entries {
        for rel in [&e.image, &e.mask] {
            let x = std::fs::read(a.join(rel)).unwrap();
            assert_eq!(x, std::fs::read(b.join(rel)).unwrap());
            differs |= x != std::fs::read(c.join(rel)).unwrap();
        }
        maskface_core::io::load_mask(&a.join(&e.mask), &schema)
            .unwrap()
            .validate(&schema)
            .unwrap();
    }
    assert!(differs);
    assert_eq!(
        std::fs::read(a.join("manifest.txt")).unwrap(),
        std::fs::read(b.join("manifest.txt")).unwrap()
    );
}

#[test]
fn empty_toy_corpus_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["make-toy-data", "-n", "0", "--out", s(dir.path())]);
    let manifest = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.entries.is_empty());
}

#[test]
fn generate_writes_image_at_working_resolution() {
    let f = fixture();
    let ids = ids(f);
    let out = f.root.join("gen-basic.png");
    let res = generate(f, &ids[0], &ids[1], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let image = load_image(&out).unwrap();
    assert_eq!((image.height(), image.width()), (64, 64));
}

#[test]
fn missing_checkpoint_fails_without_output() {
    let f = fixture();
    let ids = ids(f);
    let out = f.root.join("gen-missing.png");
    let bad = Fixture {
        root: f.root.clone(),
        manifest: f.manifest.clone(),
        checkpoint: f.root.join("absent.safetensors"),
        parser: f.parser.clone(),
    };
    let res = generate(&bad, &ids[0], &ids[1], &out);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());

    // A parser checkpoint is not a generator.
    let wrong = Fixture {
        checkpoint: f.parser.clone(),
        ..bad
    };
    assert_eq!(code(&generate(&wrong, &ids[0], &ids[1], &out)), 2);
    assert!(!out.exists());
}

#[test]
fn identity_edit_matches_generate_bit_exactly() {
    let f = fixture();
    let ids = ids(f);
    let generated = f.root.join("gen-identity.png");
    assert!(generate(f, &ids[2], &ids[2], &generated).status.success());
    let request = f.root.join("identity.toml");
    std::fs::write(&request, EditRequest::identity(&ids[2]).to_toml()).unwrap();
    let edited = f.root.join("edit-identity.png");
    ok(&[
        "edit",
        "--checkpoint",
        s(&f.checkpoint),
        "--request",
        s(&request),
        "--dataset",
        s(&f.manifest),
        "--out",
        s(&edited),
    ]);
    assert_eq!(load_image(&generated).unwrap(), load_image(&edited).unwrap());
}

#[test]
fn swap_matches_generate_and_hair_edit_writes_output() {
    let f = fixture();
    let ids = ids(f);
    let generated = f.root.join("gen-swap.png");
    assert!(generate(f, &ids[0], &ids[3], &generated).status.success());
    let swapped = f.root.join("swap.png");
    ok(&[
        "swap",
        "--checkpoint",
        s(&f.checkpoint),
        "--dataset",
        s(&f.manifest),
        "--source",
        &ids[0],
        "--target",
        &ids[3],
        "--out",
        s(&swapped),
    ]);
    assert_eq!(load_image(&generated).unwrap(), load_image(&swapped).unwrap());

    let mut req = EditRequest::identity(&ids[1]);
    req.components.set(ComponentId::Hair, ids[4].as_str());
    let request = f.root.join("hair.toml");
    std::fs::write(&request, req.to_toml()).unwrap();
    let out = f.root.join("edit-hair.png");
    ok(&[
        "edit",
        "--checkpoint",
        s(&f.checkpoint),
        "--request",
        s(&request),
        "--dataset",
        s(&f.manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(load_image(&out).unwrap().height(), 64);
}

#[test]
fn malformed_or_dangling_requests_fail() {
    let f = fixture();
    let out = f.root.join("edit-bad.png");
    let request = f.root.join("bad.toml");
    let edit = |request: &Path| {
        maskface(&[
            "edit",
            "--checkpoint",
            s(&f.checkpoint),
            "--request",
            s(request),
            "--dataset",
            s(&f.manifest),
            "--out",
            s(&out),
        ])
    };
    std::fs::write(&request, "target_mask = [1, 2").unwrap();
    assert_eq!(code(&edit(&request)), 2);
    std::fs::write(&request, EditRequest::identity("nobody").to_toml()).unwrap();
    assert_eq!(code(&edit(&request)), 2);
    assert!(!out.exists());
}

#[test]
fn different_target_masks_give_different_outputs() {
    let f = fixture();
    let ids = ids(f);
    let a = f.root.join("gen-target-a.png");
    let b = f.root.join("gen-target-b.png");
    assert!(generate(f, &ids[0], &ids[1], &a).status.success());
    assert!(generate(f, &ids[0], &ids[2], &b).status.success());
    assert_ne!(load_image(&a).unwrap(), load_image(&b).unwrap());
}

#[test]
fn evaluation_commands_print_metric_records() {
    let f = fixture();
    let images = f.root.join("data/images");
    let line = ok(&["eval-fid", "--real", s(&f.manifest), "--generated", s(&images)]);
    let rec: maskface_core::evaluation::MetricRecord = line.trim().parse().unwrap();
    assert_eq!(rec.metric, "fid");
    assert!(rec.value.abs() < 1e-6, "same images: {}", rec.value);

    let line = ok(&[
        "eval-mask-acc",
        "--checkpoint",
        s(&f.checkpoint),
        "--parser",
        s(&f.parser),
        "--dataset",
        s(&f.manifest),
    ]);
    let rec: maskface_core::evaluation::MetricRecord = line.trim().parse().unwrap();
    assert_eq!(rec.metric, "mask-accuracy");
    assert!((0.0..=1.0).contains(&rec.value));

    let config = f.root.join("micro.toml");
    let out = ok(&[
        "eval-augment",
        "--config",
        s(&config),
        "--real",
        s(&f.manifest),
        "--test",
        s(&f.manifest),
        "--checkpoint",
        s(&f.checkpoint),
        "--steps",
        "1",
    ]);
    assert_eq!(out.lines().count(), 3);
    assert!(out.contains("parse-accuracy.real+synth+aug"));
}

#[test]
fn train_resumes_and_rejects_bad_config() {
    let f = fixture();
    let config = f.root.join("micro.toml");
    let run = f.root.join("run-resume");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&f.manifest),
        "--resume",
        s(&f.checkpoint),
        "--steps",
        "3",
        "--out",
        s(&run),
    ]);
    assert!(run.join("final.safetensors").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);

    let bad = f.root.join("bad-config.toml");
    std::fs::write(&bad, "version = 1\nunknown = true\n").unwrap();
    let res = maskface(&["train", "--config", s(&bad), "--out", s(&f.root.join("run-bad"))]);
    assert_eq!(code(&res), 2);
}

#[test]
fn prep_aligns_raw_records_to_requested_resolution() {
    let f = fixture();
    let out = f.root.join("prep32");
    ok(&["prep", "--raw", s(&f.manifest), "--schema", "toy", "--resolution", "32", "--out", s(&out)]);
    let manifest = Manifest::load(&out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.entries.len(), ids(f).len());
    let image = load_image(&out.join(&manifest.entries[0].image)).unwrap();
    assert_eq!((image.height(), image.width()), (32, 32));

    let res = maskface(&["prep", "--raw", s(&f.root.join("absent.txt")), "--schema", "toy", "--out", s(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn serve_binds_and_answers_health() {
    use std::io::{BufRead, BufReader, Read, Write};

    let f = fixture();
    let mut child = Command::new(env!("CARGO_BIN_EXE_maskface"))
        .args([
            "serve",
            "--port",
            "0",
            "--assets",
            s(&f.root.join("serve-assets")),
            "--dataset",
            s(&f.manifest),
            "--checkpoint",
            s(&f.checkpoint),
        ])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /v1/health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"status\":\"ok\""));
}
