use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mddm_core::config::RunConfig;
use mddm_core::data::write_token_records;
use mddm_core::eval::held_out_pairs;
use serde_json::Value;

fn mddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mddm"))
        .args(args)
        .env_remove("MDDM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small, fast run configuration written to `dir/config.json`.
fn tiny_config(dir: &Path, steps: u64) -> (PathBuf, RunConfig) {
    let mut run = RunConfig::default();
    run.train.total_steps = steps;
    run.train.batch_size = 8;
    run.train.warmup_steps = 5;
    run.train.cycle_length = steps.max(10);
    run.train.checkpoint_every = 50;
    run.eval.n_samples = 200;
    run.eval.n_eval_set = 40;
    run.eval.nelbo_t_samples = 1;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    (path, run)
}

fn train(dir: &Path, steps: u64) -> PathBuf {
    let (cfg, run) = tiny_config(dir, steps);
    let out = dir.join("runs");
    let o = mddm(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join(run.hash());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), s(&run_dir));
    run_dir
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mddm(&["train", "--config", "/nonexistent/c.json", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read config"));
}

#[test]
fn bad_config_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    assert_eq!(code(&mddm(&["train", "--config", s(&cfg), "--out", s(dir.path())])), 2);
    assert_eq!(code(&mddm(&["train", "--bogus"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_mddm"))
        .args(["train", "--config", s(&cfg), "--out", s(dir.path())])
        .env("MDDM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn smoke_train_then_collide_force_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train(dir.path(), 100);
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,wallclock");
    assert_eq!(lines.len(), 101);
    assert!(lines[100].starts_with("100,"));
    assert!(run_dir.join("final.ckpt").exists());
    assert!(run_dir.join("checkpoints/step_00000050.ckpt").exists());
    assert!(run_dir.join("checkpoints/step_00000100.ckpt").exists());
    let stored = fs::read_to_string(run_dir.join("config.json")).unwrap();
    assert_eq!(RunConfig::from_json(&stored).unwrap().hash(), run_dir.file_name().unwrap().to_str().unwrap());

    // identical config collides unless forced
    let cfg = dir.path().join("config.json");
    let out = dir.path().join("runs");
    assert_eq!(code(&mddm(&["train", "--config", s(&cfg), "--out", s(&out)])), 2);
    let final_bytes = fs::read(run_dir.join("final.ckpt")).unwrap();
    assert_eq!(code(&mddm(&["train", "--config", s(&cfg), "--out", s(&out), "--force"])), 0);
    assert_eq!(fs::read(run_dir.join("final.ckpt")).unwrap(), final_bytes);

    // resuming from step 50 reproduces the uninterrupted run
    let mid = dir.path().join("mid.ckpt");
    fs::copy(run_dir.join("checkpoints/step_00000050.ckpt"), &mid).unwrap();
    let o = mddm(&["train", "--config", s(&cfg), "--out", s(&out), "--resume", s(&mid)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(run_dir.join("final.ckpt")).unwrap(), final_bytes);
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);

    // a checkpoint from another config is refused
    let other = dir.path().join("other.json");
    fs::write(&other, r#"{"train": {"total_steps": 7}}"#).unwrap();
    assert_eq!(code(&mddm(&["train", "--config", s(&other), "--out", s(&out), "--resume", s(&mid)])), 2);
}

#[test]
fn sample_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train(dir.path(), 20);
    let ckpt = run_dir.join("final.ckpt");
    let out = |name: &str| dir.path().join(name);

    assert_eq!(code(&mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "t2i", "--out", s(&out("x"))])), 2);
    let o = mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "joint", "--num", "3", "--seed", "5", "--out", s(&out("a"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(out("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["manifest.json", "pair_0000.pgm", "pair_0000.txt", "pair_0001.pgm", "pair_0001.txt", "pair_0002.pgm", "pair_0002.txt"]
    );
    let pgm = fs::read(out("a").join("pair_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
    let manifest: Value = serde_json::from_slice(&fs::read(out("a").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["mode"], "joint");
    assert_eq!(manifest["config_hash"], run_dir.file_name().unwrap().to_str().unwrap());
    let txt = fs::read_to_string(out("a").join("pair_0001.txt")).unwrap();
    assert_eq!(txt.lines().count(), 2);
    assert!(txt.lines().nth(1).unwrap().starts_with("<color "));

    mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "joint", "--num", "3", "--seed", "5", "--out", s(&out("b"))]);
    for name in &names {
        assert_eq!(fs::read(out("a").join(name)).unwrap(), fs::read(out("b").join(name)).unwrap(), "{name}");
    }

    let cond = dir.path().join("cond.txt");
    fs::write(&cond, "2 1 0 0\n").unwrap();
    let o = mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "t2i", "--num", "2", "--condition", s(&cond), "--out", s(&out("c"))]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(out("c").join("pair_0001.txt")).unwrap().starts_with("2 1 0 0\n"));
    let o = mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "prompted", "--condition", s(&cond), "--out", s(&out("d"))]);
    assert_eq!(code(&o), 0);
    fs::write(&cond, "2 1 0 7\n").unwrap();
    let o = mddm(&["sample", "--ckpt", s(&ckpt), "--mode", "i2t", "--condition", s(&cond), "--out", s(&out("e"))]);
    assert_eq!(code(&o), 2);

    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, b"MDDM\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&mddm(&["sample", "--ckpt", s(&broken), "--mode", "joint", "--out", s(&out("f"))])), 4);
}

#[test]
fn eval_suites() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train(dir.path(), 1);
    let ckpt = run_dir.join("final.ckpt");
    let out = dir.path().join("eval");

    assert_eq!(code(&mddm(&["eval", "--ckpt", s(&ckpt), "--suite", "fid", "--out", s(&out)])), 2);

    let o = mddm(&["eval", "--ckpt", s(&ckpt), "--suite", "all", "--out", s(&out), "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let metrics = summary["metrics"].as_object().unwrap();
    for key in [
        "tv_distance/joint",
        "consistency/joint",
        "consistency/t2i",
        "consistency/i2t",
        "consistency/prompted",
        "prompt_preserved/prompted",
        "masked_recovery/joint",
        "bleu_1/i2t",
        "bleu_2/i2t",
        "bleu_3/i2t",
        "rouge_l/i2t",
        "nelbo_per_token/joint",
    ] {
        assert!(metrics.contains_key(key), "missing {key}");
    }
    assert_eq!(summary["conventions"]["rouge_beta"], 1.2);
    // an untrained model is far from the skewed joint
    assert!(metrics["tv_distance/joint"].as_f64().unwrap() > 0.5);
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "metric,mode,seed,value");
    assert_eq!(csv.lines().count(), 1 + metrics.len());

    // ground-truth pairs supplied on disk are perfectly consistent
    let run = RunConfig::from_json(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    let source = run.data_source().unwrap();
    let records: Vec<Vec<u32>> = held_out_pairs(&source, 100, 1)
        .unwrap()
        .into_iter()
        .map(|(_, seq)| seq.into_ids())
        .collect();
    let pairs = dir.path().join("pairs.bin");
    write_token_records(fs::File::create(&pairs).unwrap(), &records).unwrap();
    let out2 = dir.path().join("eval2");
    let o = mddm(&["eval", "--ckpt", s(&ckpt), "--suite", "consistency", "--pairs", s(&pairs), "--out", s(&out2)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&fs::read(out2.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metrics"]["consistency/pairs"], 1.0);
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny_config(dir.path(), 5);
    let out = dir.path().join("ablate");
    let o = mddm(&["ablate", "--config", s(&cfg), "--grid", "causal", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "variant");
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
    assert_eq!(rows[1][0], "full");
    assert_eq!(rows[2][0], "causal");
    assert_eq!(rows[2][1], "true");
    assert!(out.join("causal/final.ckpt").exists());
}
