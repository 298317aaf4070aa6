use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hsid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsid"))
        .args(args)
        .current_dir(dir)
        .env_remove("HSID_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_config(epochs: usize) -> Value {
    json!({
        "schema_version": 1,
        "output_dir": "out",
        "toy": {
            "train_scenes": 4, "test_scenes": 3, "calibration_scenes": 4,
            "bands": 4, "height": 16, "width": 16
        },
        "train": {
            "config": {
                "learning_rate": 1e-3,
                "patch_size": 8,
                "validation_fraction": 0.0,
                "epochs": { "stage1": epochs, "stage2": epochs, "stage3": epochs },
                "backbone": { "base_channels": 4, "depth": 2 }
            }
        }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn pipeline(dir: &Path, cfg: &Value) {
    write_config(dir, cfg);
    for args in [vec!["gen-toy"], vec!["calibrate"], vec!["train", "--stage", "all"], vec!["eval"]] {
        let mut a = args.clone();
        a.extend(["--config", "run.json"]);
        ok(&hsid(dir, &a));
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_toy_is_loadable_deterministic_and_ratio_scaled() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg["toy"]["train_scenes"] = json!(6);
    for d in [a.path(), b.path()] {
        write_config(d, &cfg);
        ok(&hsid(d, &["gen-toy", "--config", "run.json", "--seed", "7"]));
    }
    let data = a.path().join("out/data");
    let train: Vec<hsid::cube_io::PairedSample<f32>> = hsid::cube_io::load_pairs(&data.join("train.json")).unwrap();
    assert_eq!(train.len(), 6);
    assert_eq!(hsid::cube_io::load_pairs::<f32>(&data.join("test.json")).unwrap().len(), 3);
    for entry in fs::read_dir(data.join("cubes")).unwrap() {
        let p = entry.unwrap().path();
        let q = b.path().join("out/data/cubes").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
    }
    let residual_var = |ratio: f64| {
        let v: Vec<f64> = train
            .iter()
            .filter(|p| p.exposure_ratio == ratio)
            .flat_map(|p| p.noisy.data().data().iter().zip(p.clean.data().data()).map(|(n, c)| (n - c) as f64).collect::<Vec<_>>())
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    assert!(residual_var(100.0) > residual_var(20.0));
}

#[test]
fn full_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &small_config(1));
    let out = dir.path().join("out");
    assert!(out.join("noise_params.json").is_file());
    for s in 1..=3 {
        assert!(out.join(format!("checkpoints/stage{s}.hsck")).is_file());
        let log = fs::read_to_string(out.join(format!("logs/stage{s}.jsonl"))).unwrap();
        assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    }
    let report = read_json(&out.join("eval/metrics.json"));
    let scenes = report["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 3);
    for key in ["psnr_db", "ssim", "sam_deg"] {
        let mean = scenes.iter().map(|s| s[key].as_f64().unwrap()).sum::<f64>() / 3.0;
        assert!((mean - report["average"][key].as_f64().unwrap()).abs() < 1e-9, "{key}");
    }
    let r = report["plot"]["correlation"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&r));
    let csv = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("average,"));
    let png = out.join("eval").join(report["plot"]["error_map"].as_str().unwrap());
    assert_eq!(&fs::read(png).unwrap()[1..4], b"PNG");
    let svg = fs::read_to_string(out.join("eval").join(report["plot"]["spectral_curve"].as_str().unwrap())).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));

    ok(&hsid(dir.path(), &["denoise", "--config", "run.json"]));
    let denoised = hsid::cube_io::load_cube::<f32>(&out.join("denoised/scene_004.hsic")).unwrap();
    assert!(denoised.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn repeated_runs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &small_config(1));
    pipeline(b.path(), &small_config(1));
    let m = |d: &Path| read_json(&d.join("out/eval/metrics.json"))["average"].clone();
    assert_eq!(m(a.path()), m(b.path()));
}

#[test]
fn untrained_checkpoint_matches_noisy_baseline() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &small_config(0));
    let report = read_json(&dir.path().join("out/eval/metrics.json"));
    for key in ["psnr_db", "ssim", "sam_deg"] {
        let got = report["average"][key].as_f64().unwrap();
        let want = report["noisy_average"][key].as_f64().unwrap();
        assert!((got - want).abs() < 1e-9, "{key}: {got} vs {want}");
    }
}

#[test]
fn later_stage_without_predecessor_is_a_state_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &small_config(1));
    ok(&hsid(dir.path(), &["gen-toy", "--config", "run.json"]));
    ok(&hsid(dir.path(), &["calibrate", "--config", "run.json"]));
    let out = hsid(dir.path(), &["train", "--stage", "2", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1"));
    let out = hsid(dir.path(), &["eval", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_fails_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg["train"]["config"]["learning_rte"] = json!(0.1);
    write_config(dir.path(), &cfg);
    let out = hsid(dir.path(), &["gen-toy", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let mut cfg = small_config(1);
    cfg["train"]["config"]["learning_rate"] = json!(-1.0);
    write_config(dir.path(), &cfg);
    assert_eq!(hsid(dir.path(), &["train", "--stage", "1", "--config", "run.json"]).status.code(), Some(2));
    let mut cfg = small_config(1);
    cfg["schema_version"] = json!(9);
    write_config(dir.path(), &cfg);
    assert_eq!(hsid(dir.path(), &["gen-toy", "--config", "run.json"]).status.code(), Some(2));
}

#[test]
fn output_dir_can_be_overridden_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &small_config(1));
    let status = Command::new(env!("CARGO_BIN_EXE_hsid"))
        .args(["gen-toy", "--config", "run.json"])
        .current_dir(dir.path())
        .env("HSID_OUT", "elsewhere")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("elsewhere/data/train.json").is_file());
    assert!(!dir.path().join("out").exists());
}
