use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brainseg::dataio::{read_dataset, read_params, Sample};
use brainseg::segnet::NetSpec;
use brainseg_cli::render::render_ppm;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_brainseg");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A tiny configuration (20 samples of 32×32, one epoch) with `extra`
/// lines overriding or adding keys.
fn setup(extra: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    let overridden = |key: &str| extra.lines().any(|l| l.split('=').next() == Some(key));
    let mut text: String = ["n_samples=20", "image_size=32", "epochs=1", "batch_size=4", "data_path=data.segv", "out_dir=out"]
        .iter()
        .filter(|l| !overridden(l.split('=').next().unwrap()))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn bad_configuration_exits_with_1() {
    let (dir, cfg) = setup("colour=blue\n");
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    assert!(!dir.path().join("data.segv").exists());

    for bad in ["lr=-1\n", "folds=1\n", "stage=2\n", "epsilon=2\n", "seed\n", "defense=maybe\n"] {
        let (dir, cfg) = setup(bad);
        let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
        assert_eq!(out.status.code(), Some(1), "{bad:?}");
    }
    let (dir, _) = setup("");
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--workers", "x", "train"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_with_2() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    let out = run(dir.path(), &["--config", c, "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn gen_data_is_deterministic_and_seeded() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    let a = fs::read(dir.path().join("data.segv")).unwrap();
    let manifest = fs::read_to_string(dir.path().join("data.segv.manifest")).unwrap();
    assert!(manifest.contains("n_samples=20"));
    ok(dir.path(), &["--config", c, "gen-data"]);
    assert_eq!(a, fs::read(dir.path().join("data.segv")).unwrap());
    ok(dir.path(), &["--config", c, "--seed", "7", "gen-data"]);
    assert_ne!(a, fs::read(dir.path().join("data.segv")).unwrap());
    assert_eq!(read_dataset(dir.path().join("data.segv")).unwrap().len(), 20);
}

#[test]
fn empty_dataset_is_allowed() {
    let (dir, cfg) = setup("n_samples=0\n");
    ok(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert!(read_dataset(dir.path().join("data.segv")).unwrap().is_empty());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let (dir, cfg) = setup("epochs=0\ntrain_folds=1\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "train"]);
    let saved = read_params(dir.path().join("out/fold0/model.segp")).unwrap();
    assert_eq!(saved, NetSpec::default().init_params(42));
}

#[test]
fn every_fold_gets_a_metrics_row() {
    let (dir, cfg) = setup("n_samples=10\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "train"]);
    ok(dir.path(), &["--config", c, "eval"]);
    let rows = csv_rows(&dir.path().join("out/metrics.csv"));
    assert_eq!(rows.len(), 5);
    for (f, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("Base,{f},42,val,")), "{r}");
    }
    let log = fs::read_to_string(dir.path().join("out/train.log")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(dir.path().join("out/config.resolved").exists());
}

#[test]
fn oracle_eval_scores_one() {
    let (dir, cfg) = setup("train_folds=2\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "eval", "--oracle"]);
    for r in csv_rows(&dir.path().join("out/metrics.csv")) {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells[0], "Oracle");
        for d in &cells[4..12] {
            assert!(*d == "NA" || d.parse::<f64>().unwrap() == 1.0, "{r}");
        }
    }
}

#[test]
fn oracle_infer_renders_the_ground_truth() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    let stdout = ok(dir.path(), &["--config", c, "infer", "--index", "3", "--oracle"]);
    assert!(stdout.contains("present:"));
    let truth: Sample = read_dataset(dir.path().join("data.segv")).unwrap().remove(3);
    let ppm = fs::read(dir.path().join("out/infer.ppm")).unwrap();
    assert_eq!(ppm, render_ppm(truth.labels()));
    let labels = read_dataset(dir.path().join("out/infer.segv")).unwrap().remove(0);
    assert_eq!(labels.labels(), truth.labels());
}

#[test]
fn cascade_and_single_models_give_the_same_output_shape() {
    for extra in ["cascade=off\n", "cascade=on\nclass_head=on\n"] {
        let (dir, cfg) = setup(&format!("train_folds=1\n{extra}"));
        let c = cfg.to_str().unwrap();
        ok(dir.path(), &["--config", c, "gen-data"]);
        ok(dir.path(), &["--config", c, "train"]);
        ok(dir.path(), &["--config", c, "infer", "--index", "0"]);
        let pred = read_dataset(dir.path().join("out/infer.segv")).unwrap().remove(0);
        assert_eq!(pred.dims(), (32, 32), "{extra}");
        assert!(pred.labels().data().iter().all(|&l| l < 9));
    }
}

#[test]
fn single_stage_training_writes_only_that_stage() {
    let (dir, cfg) = setup("train_folds=1\ncascade=on\nstage=2\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "train"]);
    let fold = dir.path().join("out/fold0");
    assert!(fold.join("stage2.segp").exists());
    assert!(!fold.join("stage1.segp").exists() && !fold.join("stage3.segp").exists());
}

#[test]
fn attack_eval_pairs_clean_and_attacked_rows() {
    let (dir, cfg) = setup("train_folds=1\nclass_head=on\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "train"]);
    ok(dir.path(), &["--config", c, "attack-eval", "--epsilon", "0,0.1"]);
    let rows = csv_rows(&dir.path().join("out/metrics.csv"));
    assert_eq!(rows.len(), 3);
    let split = |r: &str| r.split(',').nth(3).unwrap().to_string();
    assert_eq!(split(&rows[0]), "val");
    assert_eq!(split(&rows[1]), "val_fgsm(eps=0)");
    assert_eq!(split(&rows[2]), "val_fgsm(eps=0.1)");
    let tail = |r: &str| r.splitn(5, ',').nth(4).unwrap().to_string();
    assert_eq!(tail(&rows[0]), tail(&rows[1]));
}

#[test]
fn ablate_emits_four_configs_and_three_epsilons() {
    let (dir, cfg) = setup("n_samples=10\nimage_size=16\ntrain_folds=1\n");
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data"]);
    ok(dir.path(), &["--config", c, "ablate"]);
    let rows = csv_rows(&dir.path().join("out/ablation.csv"));
    let key: Vec<(String, String)> = rows
        .iter()
        .map(|r| {
            let c: Vec<&str> = r.split(',').collect();
            (c[0].to_string(), c[1].to_string())
        })
        .collect();
    let want = [
        ("config", "Base"),
        ("config", "Base+Class"),
        ("config", "Base+Class+Defense(eps=0.1)"),
        ("config", "Base+Class+Defense(eps=0.1)+Coarse2Fine"),
        ("eps_sweep", "Base+Class+Defense(eps=0.05)"),
        ("eps_sweep", "Base+Class+Defense(eps=0.1)"),
        ("eps_sweep", "Base+Class+Defense(eps=0.2)"),
    ];
    assert_eq!(key, want.map(|(a, b)| (a.to_string(), b.to_string())));
    let hashes: Vec<&str> = rows.iter().map(|r| r.split(',').nth(3).unwrap()).collect();
    assert!(hashes.iter().all(|h| *h == hashes[0]));
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("42")));
}

#[test]
fn dump_plans_lists_three_stages() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["--dump-plans"]);
    for s in ["stage 1", "stage 2", "stage 3"] {
        assert!(out.to_lowercase().contains(s), "{out}");
    }
}
