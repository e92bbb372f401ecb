use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m3l_core::config::RunConfig;
use m3l_core::data::SceneSpec;
use m3l_core::fusion::{FusionConfig, ModelKind, SegModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_m3l-lab"));
    c.env("M3L_LAB_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small flat config: 16x16 scenes, an 8x8 model, 10 iterations.
fn write_config(dir: &Path) -> PathBuf {
    let tiny = SegModel::tiny(ModelKind::Lf, FusionConfig::default()).unwrap();
    let mut c = RunConfig {
        scene: SceneSpec {
            height: 16,
            width: 16,
            num_classes: 3,
            ..SceneSpec::default()
        },
        encoder: tiny.encoder,
        decoder: tiny.decoder,
        out_dir: dir.join("runs").display().to_string(),
        ..RunConfig::default()
    };
    c.data.train_size = 24;
    c.data.val_size = 8;
    c.data.test_size = 8;
    c.data.labeled_fraction = 0.25;
    c.trainer.batch_labeled = 4;
    c.trainer.batch_unlabeled = 4;
    c.trainer.total_iters = 10;
    c.trainer.eval_every = 5;
    let path = dir.join("small.json");
    c.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    let msg = ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(msg.contains("40 scenes (6 labeled, 18 unlabeled, 8 val, 8 test)"), "{msg}");
    let first = files_under(&data);
    assert!(!run(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--force"]);
    assert_eq!(files_under(&data), first);

    let all = tmp.path().join("all");
    let msg = ok(&["gen-data", "--config", s(&cfg), "--out", s(&all), "--labeled-fraction", "1.0"]);
    assert!(msg.contains("24 labeled, 0 unlabeled"), "{msg}");
}

#[test]
fn train_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);

    let a = tmp.path().join("a");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", "sup_only", "--iters", "10", "--out", s(&a)]);
    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 11);
    assert!(history.starts_with("iteration,mode,L_s,L_u,L_total,val_mIoU"));

    // The written config reproduces the run.
    let b = tmp.path().join("b");
    ok(&["train", "--config", s(&a.join("config.json")), "--out", s(&b)]);
    for f in ["history.csv", "best.ntc", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let ck = a.join("best.ntc");
    let out = ok(&["eval", s(&ck)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("lf,")).count(), 6);
    assert!(out.contains("mm_robust fill=learned_token: mIoU"));
    let csv = std::fs::read(a.join("eval.csv")).unwrap();
    ok(&["eval", s(&ck)]);
    assert_eq!(std::fs::read(a.join("eval.csv")).unwrap(), csv);

    let part = tmp.path().join("part");
    let out = ok(&["eval", s(&ck), "--scenario", "rgbd", "--fill", "zeros", "--out", s(&part)]);
    assert!(out.contains("mm_robust fill=zeros: absent"), "{out}");
    assert_eq!(std::fs::read_to_string(part.join("eval.csv")).unwrap().lines().count(), 2);

    let c = tmp.path().join("c");
    ok(&["train", "--config", s(&a.join("config.json")), "--mode", "m3l", "--iters", "2", "--init", s(&ck), "--out", s(&c)]);
    assert!(c.join("best.ntc").is_file());
    let urn = run(&["train", "--config", s(&cfg), "--set", "model=\"urn\"", "--iters", "1", "--init", s(&ck)]);
    assert!(!urn.status.success());
}

#[test]
fn bad_arguments_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let bad_mode = run(&["train", "--config", s(&cfg), "--mode", "fancy"]);
    assert_eq!(bad_mode.status.code(), Some(2));
    let typo = run(&["train", "--config", s(&cfg), "--set", "trainer.lr_encodr=0.1"]);
    assert!(!typo.status.success());
    assert!(String::from_utf8_lossy(&typo.stderr).contains("lr_encodr"));
    let threads = bin()
        .args(["bench", "--config", s(&cfg)])
        .env("M3L_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!threads.status.success());
}

#[test]
fn bench_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("bench");
    let args = [
        "bench", "--config", s(&cfg), "--iters", "2", "--seeds", "0,1", "--out", s(&root),
    ];
    let table = ok(&args);
    for mode in ["sup_only", "sup_md", "mt", "mt_md", "m3l"] {
        assert!(table.contains(&format!("| {mode} ")), "{table}");
    }
    let again = bin().args(args).output().unwrap();
    assert!(String::from_utf8_lossy(&again.stderr).contains("10 cell(s) reused"));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), table);

    let sweep = tmp.path().join("sweep");
    let out = ok(&["sweep-alpha", "--config", s(&cfg), "--iters", "2", "--values", "0.7", "--out", s(&sweep)]);
    assert!(out.contains("best alpha: 0.7"), "{out}");
    assert_eq!(std::fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 2);
}

#[test]
fn grad_check_passes_and_catches_corruption() {
    let out = ok(&["grad-check", "--seeds", "0", "--max-elements", "2"]);
    assert!(out.contains("| model_lf |") && out.contains("all passed"), "{out}");
    let bad = run(&["grad-check", "--seeds", "0", "--max-elements", "2", "--corrupt", "1.01"]);
    assert!(!bad.status.success());
}
