use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chunkfft::format::{load_tensor, save_tensor, save_weights};
use chunkfft::{DecoderConfig, DecoderWeights, PastSize, Tensor};
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkfft")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_model() -> DecoderConfig {
    DecoderConfig {
        d_model: 8,
        d_ff: 16,
        mel_bins: 6,
        chunk_size: 4,
        past_size: PastSize::Frames(4),
        ..DecoderConfig::default()
    }
}

/// Writes a small model and a feature file, returning their paths.
fn fixtures(dir: &TempDir, frames: usize) -> (PathBuf, PathBuf) {
    let cfg = small_model();
    let w = DecoderWeights::<f64>::init(&cfg, 3).unwrap();
    let model = dir.path().join("m.cfpw");
    save_weights(&model, &cfg, &w).unwrap();
    let x = Tensor::from_fn(frames, cfg.d_model, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin());
    let feats = dir.path().join("x.ctn");
    save_tensor(&feats, &x).unwrap();
    (model, feats)
}

/// Dumped defaults with `patch` merged into the top-level sections.
fn config_file(dir: &TempDir, patch: Value) -> PathBuf {
    let o = run(&["--dump-config"]);
    assert_eq!(code(&o), 0);
    let mut cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for (section, fields) in patch.as_object().unwrap() {
        match fields {
            Value::Object(map) => {
                for (k, v) in map {
                    cfg[section][k] = v.clone();
                }
            }
            v => cfg[section] = v.clone(),
        }
    }
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn tensor(path: &Path) -> Tensor<f64> {
    load_tensor(path).unwrap().to_f64()
}

#[test]
fn rf_prints_formula_and_oracle() {
    let o = run(&["rf", "--layers", "6", "--chunk", "30", "--past", "15"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "210");

    let o = run(&["rf", "--layers", "2", "--chunk", "4", "--past", "2", "--oracle"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "formula 12\noracle 12\ndelta 0\n");
}

#[test]
fn msd_of_identical_files_is_zero() {
    let dir = TempDir::new().unwrap();
    let (_, feats) = fixtures(&dir, 10);
    let o = run(&["msd", p(&feats), p(&feats)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "0.0");
}

#[test]
fn exit_codes_follow_error_class() {
    assert_eq!(code(&run(&["rf", "--layers", "2"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["msd", "/nonexistent/a.ctn", "/nonexistent/b.ctn"])), 3);

    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.ctn");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(code(&run(&["msd", p(&junk), p(&junk)])), 3);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema": 1, "modle": {}}"#).unwrap();
    assert_eq!(code(&run(&["--config", p(&bad), "--dump-config"])), 2);
}

#[test]
fn dump_config_round_trips_with_seed_override() {
    let o = run(&["--seed", "11", "--dump-config"]);
    assert_eq!(code(&o), 0);
    let cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["schema"], 1);
    assert_eq!(cfg["seed"], 11);
    assert_eq!(cfg["train"]["seed"], 11);

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, stdout(&o)).unwrap();
    let again = run(&["--config", p(&path), "--dump-config"]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn mask_renders_ascii() {
    let o = run(&["mask", "--frames", "4", "--chunk", "2", "--past", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "##..\n##..\n.###\n.###\n");
    let o = run(&["mask", "--frames", "4", "--chunk", "2", "--past", "all"]);
    assert_eq!(stdout(&o), "##..\n##..\n####\n####\n");
}

#[test]
fn synth_incremental_matches_parallel_and_resumes() {
    let dir = TempDir::new().unwrap();
    let (model, feats) = fixtures(&dir, 22);
    let inc = dir.path().join("inc.ctn");
    let par = dir.path().join("par.ctn");
    let o = run(&["synth", "--model", p(&model), "--features", p(&feats), "--mode", "incremental", "--out", p(&inc)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["synth", "--model", p(&model), "--features", p(&feats), "--mode", "parallel", "--out", p(&par)]);
    assert_eq!(code(&o), 0);
    let (a, b) = (tensor(&inc), tensor(&par));
    assert_eq!(a.shape(), [22, 6]);
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);

    // first 3 chunks, save state, then decode the remaining frames from it
    let head = dir.path().join("head.ctn");
    let state = dir.path().join("s.cfps");
    let o = run(&[
        "synth", "--model", p(&model), "--features", p(&feats), "--max-chunks", "3", "--state-out", p(&state), "--out",
        p(&head),
    ]);
    assert_eq!(code(&o), 0);
    let x = tensor(&feats);
    let rest = Tensor::from_fn(10, x.shape()[1], |r, c| x.at(r + 12, c));
    let rest_path = dir.path().join("rest.ctn");
    save_tensor(&rest_path, &rest).unwrap();
    let tail = dir.path().join("tail.ctn");
    let o = run(&[
        "synth", "--model", p(&model), "--features", p(&rest_path), "--state-in", p(&state), "--out", p(&tail),
    ]);
    assert_eq!(code(&o), 0);
    let (head, tail) = (tensor(&head), tensor(&tail));
    for r in 0..22 {
        for c in 0..6 {
            let got = if r < 12 { head.at(r, c) } else { tail.at(r - 12, c) };
            assert_eq!(got.to_bits(), a.at(r, c).to_bits(), "frame {r} bin {c}");
        }
    }

    let o = run(&[
        "synth", "--model", p(&model), "--features", p(&feats), "--mode", "parallel", "--max-chunks", "1", "--out",
        p(&par),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn equiv_default_grid_passes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["equiv", "--seeds", "1", "--dtype", "f64", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-9);
    assert!(r["grid_results"].as_array().unwrap().len() >= 300);
}

#[test]
fn failed_check_exits_one() {
    let dir = TempDir::new().unwrap();
    // no ablation can move the output by this much
    let cfg = config_file(&dir, json!({"ablation": {"seeds": 3, "threshold": 1e9}}));
    let o = run(&["--config", p(&cfg), "ablate", "--mode", "drop_conv"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["equiv", "--tolerance=-1"])), 2);
}

#[test]
fn train_writes_weights_and_log() {
    let dir = TempDir::new().unwrap();
    let cfg = config_file(
        &dir,
        json!({"model": {"d_model": 8, "d_ff": 16, "mel_bins": 4}, "task": {"seq_len": 16}, "train": {"batch_size": 2, "eval_batch": 2}}),
    );
    let w = dir.path().join("w.cfpw");
    let log = dir.path().join("log.json");
    let args = ["--config", p(&cfg), "train", "--mask", "dynamic", "--steps", "3", "--out", p(&w), "--log", p(&log)];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let l: Value = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(l["steps"].as_array().unwrap().len(), 3);
    assert_eq!(l["train"]["regime"]["kind"], "dynamic");
    let first = std::fs::read(&w).unwrap();

    // same seed, same bytes
    run(&args);
    assert_eq!(std::fs::read(&w).unwrap(), first);
}

#[test]
fn bench_emits_json() {
    let dir = TempDir::new().unwrap();
    let (model, _) = fixtures(&dir, 4);
    let o = run(&["bench", "--model", p(&model), "--frames", "40", "--repeats", "2", "--json"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["bench"]["chunks"], 10);
    assert!(r["bench"]["rtf"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_default_config_passes() {
    let o = run(&["ablate", "--mode", "drop_kv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["mode"], "drop_kv");
    assert_eq!(r["per_seed"].as_array().unwrap().len(), 20);
}

#[test]
fn study_writes_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = config_file(
        &dir,
        json!({
            "model": {"d_model": 8, "d_ff": 16, "mel_bins": 4},
            "task": {"seq_len": 40},
            "train": {"batch_size": 2, "eval_batch": 2},
            "study": {"seeds": [0], "steps": 2, "eval_samples": 1}
        }),
    );
    let out = dir.path().join("t.csv");
    let o = run(&["--config", p(&cfg), "study", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,train_regime,infer_chunk,infer_past,msd"));
    assert_eq!(lines.count(), 4 * 5);
}
