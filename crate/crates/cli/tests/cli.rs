use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpt_core::data::{synth_generate, write_dir, SynthSpec};
use fpt_core::FptConfig;

fn fpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpt"))
        .args(args)
        .env_remove("FPT_CACHE_DIR")
        .output()
        .expect("fpt runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> FptConfig {
    let mut cfg = FptConfig::desk();
    cfg.backbone.image_size_high = 32;
    cfg.backbone.layers = 2;
    cfg.side.image_size_low = 16;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 1;
    cfg.data.synth = SynthSpec {
        canvas: 32,
        samples: 40,
        ..SynthSpec::default()
    };
    cfg
}

fn write_config(dir: &Path, cfg: &FptConfig) -> PathBuf {
    let p = dir.join("fpt.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn report_reproduces_published_efficiency() {
    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/efficiency_rows.toml");
    let o = fpt(&["report", "--fixtures", fixtures, "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let gap = r["published_gap"].as_f64().unwrap();
        assert!(gap <= 0.02, "{} off by {gap}", r["method"]);
    }
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\n[backbone]\nimage_size_high = \"big\"\n").unwrap();
    let cache = tmp.path().join("cache");
    let o = fpt(&["cache", "--config", s(&cfg), "--cache-dir", s(&cache)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!cache.exists());

    std::fs::write(&cfg, tiny_config().to_toml() + "\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&fpt(&["cache", "--config", s(&cfg), "--cache-dir", s(&cache)])), 2);
    assert_eq!(code(&fpt(&["train", "--ratio", "1.5", "--out", s(&tmp.path().join("run"))])), 2);
}

#[test]
fn cache_lists_all_ids_and_is_immutable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let path = write_config(tmp.path(), &cfg);
    let cache = tmp.path().join("cache");
    let o = fpt(&["cache", "--config", s(&path), "--cache-dir", s(&cache)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("cached 40 samples"));

    let data = synth_generate(&cfg.data.synth).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cache.join("train.manifest.json")).unwrap()).unwrap();
    let ids: Vec<&str> = manifest["samples"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids, data.train.iter().map(|s| s.id.as_str()).collect::<Vec<_>>());

    let again = fpt(&["cache", "--config", s(&path), "--cache-dir", s(&cache)]);
    assert_eq!(code(&again), 4, "{}", stderr(&again));
    assert_eq!(code(&fpt(&["cache", "--config", s(&path), "--cache-dir", s(&cache), "--force"])), 0);

    // Training against a cache built for another selection ratio is refused.
    let stale = fpt(&["train", "--config", s(&path), "--cache-dir", s(&cache), "--ratio", "0.5", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&stale), 4);
    assert!(stderr(&stale).contains("stale cache"), "{}", stderr(&stale));

    // The environment variable stands in for the flag.
    let o = Command::new(env!("CARGO_BIN_EXE_fpt"))
        .args(["train", "--config", s(&path), "--out", s(&tmp.path().join("env-run"))])
        .env("FPT_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn zero_lr_training_matches_untrained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &tiny_config());
    let cache = tmp.path().join("cache");
    assert_eq!(code(&fpt(&["cache", "--config", s(&path), "--cache-dir", s(&cache)])), 0);
    let trained = tmp.path().join("lr0");
    let untrained = tmp.path().join("init");
    let common = ["--config", s(&path), "--cache-dir", s(&cache)];
    let o = fpt(&[&["train"][..], &common, &["--lr", "0", "--epochs", "2", "--out", s(&trained)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&fpt(&[&["train"][..], &common, &["--epochs", "0", "--out", s(&untrained)]].concat())), 0);

    let eval = |dir: &Path| {
        let ckpt = dir.join("model.fptk");
        let o = fpt(&["eval", "--checkpoint", s(&ckpt), "--cache-dir", s(&cache)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o).split_whitespace().nth(2).unwrap().to_string()
    };
    assert_eq!(eval(&trained), eval(&untrained));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(trained.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(report["config_digest"].as_str().unwrap().len() == 16);
}

#[test]
fn single_class_split_is_undefined() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.mode = fpt_core::TrainMode::SideOnly;
    cfg.train.epochs = 0;
    let path = write_config(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    assert_eq!(code(&fpt(&["train", "--config", s(&path), "--out", s(&run)])), 0);

    let mut data = synth_generate(&cfg.data.synth).unwrap();
    data.test.retain(|s| s.label == 0);
    let root = tmp.path().join("one-class");
    write_dir(&data, &root).unwrap();
    let o = fpt(&["eval", "--checkpoint", s(&run.join("model.fptk")), "--data-root", s(&root)]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("AUC is undefined"), "{}", stderr(&o));
}

#[test]
fn diverging_loss_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &tiny_config());
    let o = fpt(&["train", "--config", s(&path), "--mode", "side_only", "--lr", "1e30", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn sweep_runs_every_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("sweep");
    let o = fpt(&[
        "sweep", "--config", s(&path), "--mode", "side_only", "--grid", "seed=0,1", "--grid", "lr=0.001", "--jobs", "2",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r["exit_code"] == 0 && r["test_auc"].is_number()));
}

#[test]
fn config_round_trip_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    for preset in ["desk", "vit-b"] {
        let p = tmp.path().join(format!("{preset}.toml"));
        assert_eq!(code(&fpt(&["config", "--preset", preset, "--out", s(&p)])), 0);
        let text = std::fs::read_to_string(&p).unwrap();
        let cfg = FptConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.to_toml(), text);
    }
}

#[test]
fn selftest_passes() {
    let o = fpt(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 6);
}
