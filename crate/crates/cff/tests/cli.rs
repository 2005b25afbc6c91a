mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cff(args: &[&str], data: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cff"))
        .args(args)
        .env("CFF_DATA_DIR", data)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        common::write_mnist(&dir.path().join("data"), 300, 60);
        Workspace { dir }
    }

    fn path(&self, p: &str) -> String {
        self.dir.path().join(p).display().to_string()
    }

    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }

    fn config(&self, name: &str, body: &str) -> String {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn train(&self, cfg: &str, out: &str) -> Output {
        cff(&["train", "--config", cfg, "--out", &self.path(out), "--no-wall-time"], &self.data())
    }
}

#[test]
fn train_is_reproducible_and_eval_counts_passes() {
    let ws = Workspace::new();
    let cfg = ws.config("cffm.toml", &common::tiny_config("cff_m", ""));
    let a = ws.train(&cfg, "a");
    assert!(a.status.success(), "{}", text(&a));
    assert!(text(&a).contains("test top-1 (head, 1 pass/sample)"), "{}", text(&a));
    let b = ws.train(&cfg, "b");
    assert!(b.status.success());
    let log_a = fs::read(ws.path("a/train_log.csv")).unwrap();
    assert_eq!(log_a, fs::read(ws.path("b/train_log.csv")).unwrap());
    let header = String::from_utf8(log_a).unwrap();
    assert!(header.starts_with("epoch,layer,split,loss,rk_pct,fisher,accuracy,seconds\n"));

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["dataset"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["dataset"][0]["sha256"].as_str().unwrap().len(), 64);

    let from_manifest = ws.train(&ws.path("a/manifest.json"), "c");
    assert!(from_manifest.status.success(), "{}", text(&from_manifest));
    assert_eq!(
        fs::read(ws.path("a/train_log.csv")).unwrap(),
        fs::read(ws.path("c/train_log.csv")).unwrap()
    );

    let ckpt = ws.path("a/checkpoint.bin");
    let head = cff(&["eval", "--checkpoint", &ckpt, "--mode", "head"], &ws.data());
    assert!(head.status.success(), "{}", text(&head));
    assert!(text(&head).contains("encoder passes per sample: 1\n"), "{}", text(&head));
    let goodness = cff(&["eval", "--checkpoint", &ckpt, "--mode", "goodness"], &ws.data());
    assert_eq!(goodness.status.code(), Some(2));
    assert!(text(&goodness).contains("label patches"), "{}", text(&goodness));
}

#[test]
fn ff_checkpoint_goodness_takes_one_pass_per_class() {
    let ws = Workspace::new();
    let cfg = ws.config("ff.toml", &common::tiny_config("ff", ""));
    let run = ws.train(&cfg, "ff");
    assert!(run.status.success(), "{}", text(&run));
    let ckpt = ws.path("ff/checkpoint.bin");
    let g = cff(&["eval", "--checkpoint", &ckpt, "--mode", "goodness", "--k", "3"], &ws.data());
    assert!(g.status.success(), "{}", text(&g));
    assert!(text(&g).contains("test top-3 (goodness)"));
    assert!(text(&g).contains("encoder passes per sample: 10\n"), "{}", text(&g));
    let h = cff(&["eval", "--checkpoint", &ckpt, "--mode", "head"], &ws.data());
    assert!(text(&h).contains("encoder passes per sample: 1\n"), "{}", text(&h));
}

#[test]
fn configuration_errors_exit_with_two() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &common::tiny_config("cff", ""));
    let missing = cff(&["train", "--config", &cfg, "--out", &ws.path("o")], Path::new("/nonexistent/data"));
    assert_eq!(missing.status.code(), Some(2));
    assert!(text(&missing).contains("/nonexistent/data/mnist/train-images-idx3-ubyte"), "{}", text(&missing));

    let typo = ws.config("t.toml", &common::tiny_config("cff", "label_nosie = 0.1"));
    let out = ws.train(&typo, "t");
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("label_nosie"), "{}", text(&out));

    let range = ws.config("r.toml", &common::tiny_config("cff", "keep_fraction = 0"));
    let out = ws.train(&range, "r");
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("keep_fraction"), "{}", text(&out));

    let unknown = cff(&["train", "--config", &ws.path("none.toml")], &ws.data());
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_each_case() {
    let out = cff(&["gradcheck", "--trials", "12", "--seed", "4"], Path::new("."));
    assert!(out.status.success(), "{}", text(&out));
    let t = text(&out);
    for case in ["anchor", "clamped positive", "free positive", "negative", "zero-margin consistency"] {
        assert!(t.contains(case), "{t}");
    }
    assert!(t.contains("worst:") && t.contains("(B="), "{t}");
}

#[test]
fn pipeline_matches_sequential() {
    let ws = Workspace::new();
    let cfg = ws.config("p.toml", &common::tiny_config("cff_m", "forward_mode = \"one\""));
    for workers in ["2", "1"] {
        let out = cff(
            &["pipeline", "--config", &cfg, "--batches", "6", "--workers", workers, "--out", &ws.path("p")],
            &ws.data(),
        );
        assert!(out.status.success(), "{}", text(&out));
        assert!(text(&out).contains("T=7 steps"), "{}", text(&out));
        assert!(text(&out).contains("parameters identical"));
    }
    let csv = fs::read_to_string(ws.path("p/pipeline_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("layers,batches,workers,steps,sequential_steps,stage,busy,idle,wall_seconds\n2,6,1,7,12,1,6,1,"));

    let two = ws.config("two.toml", &common::tiny_config("cff_m", ""));
    let out = cff(&["pipeline", "--config", &two], &ws.data());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("forward_mode"), "{}", text(&out));
}

#[test]
fn plots_logs_and_rejects_bad_input() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &common::tiny_config("cff_m", ""));
    assert!(ws.train(&cfg, "run").status.success());
    let log = ws.path("run/train_log.csv");
    for kind in ["loss", "rk", "convergence"] {
        let svg = ws.path(&format!("{kind}.svg"));
        let out = cff(&["plot", "--csv", &log, "--kind", kind, "--out", &svg], &ws.data());
        assert!(out.status.success(), "{}", text(&out));
        assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    }
    let out = cff(&["plot", "--csv", &log, "--column", "gradient"], &ws.data());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("available columns: epoch, layer, split, loss"), "{}", text(&out));

    let empty = ws.path("empty.csv");
    fs::write(&empty, "epoch,layer,split,loss,rk_pct,fisher,accuracy,seconds\n").unwrap();
    let svg = ws.path("empty.svg");
    let out = cff(&["plot", "--csv", &empty, "--out", &svg], &ws.data());
    assert_eq!(out.status.code(), Some(2));
    assert!(!Path::new(&svg).exists());
}

#[test]
fn embeddings_export_round_trips() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &common::tiny_config("cff", ""));
    let out = cff(
        &["train", "--config", &cfg, "--out", &ws.path("e"), "--no-wall-time", "--export-embeddings"],
        &ws.data(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let path = ws.dir.path().join("e/embeddings_test.csv");
    let (f, labels) = cff::report::read_embeddings(&path).unwrap();
    assert_eq!(labels.len(), 60);
    assert_eq!(f.shape(), &[60, 24]);
    let mut buf = Vec::new();
    cff::report::write_embeddings(&f, &labels, &mut buf).unwrap();
    assert_eq!(buf, fs::read(&path).unwrap());
}
