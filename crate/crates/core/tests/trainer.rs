use hsid::checkpoint::Checkpoint;
use hsid::cube_io::SpectralCube;
use hsid::nets::BackboneSpec;
use hsid::toy::{generate_toy, ToyConfig, ToyDataset};
use hsid::trainer::*;
use hsid::HsidError;

fn data() -> ToyDataset<f64> {
    let cfg = ToyConfig { train_scenes: 4, test_scenes: 2, bands: 3, height: 16, width: 16, ..ToyConfig::default() };
    generate_toy(&cfg).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: StageEpochs { stage1: 2, stage2: 2, stage3: 2 },
        patch_size: 8,
        backbone: BackboneSpec { base_channels: 4, depth: 2, ..BackboneSpec::default() },
        validation_fraction: 0.0,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn clean(d: &ToyDataset<f64>) -> Vec<CleanScene<f64>> {
    d.train.iter().map(CleanScene::from_pair).collect()
}

#[test]
fn stage_two_leaves_emnet_bitwise_untouched() {
    let d = data();
    let cfg = config();
    let c1 = train_stage1(&clean(&d), &d.noise, &cfg, &mut NullLog).unwrap();
    let init = initial_checkpoint::<f64>(&cfg).unwrap();
    assert_ne!(c1.model.emnet.params, init.model.emnet.params);
    assert_eq!(c1.model.imnet.params, init.model.imnet.params);
    let c2 = train_stage2(&d.train, &c1, &d.noise, &cfg, &mut NullLog).unwrap();
    assert_eq!(c2.model.emnet.params, c1.model.emnet.params);
    assert_ne!(c2.model.imnet.params, c1.model.imnet.params);
    let c3 = train_stage3(&d.train, &c2, &d.noise, &cfg, &mut NullLog).unwrap();
    assert_ne!(c3.model.emnet.params, c2.model.emnet.params);
    assert_eq!(c3.stage, 3);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let d = data();
    let a = train_all(&d.train, &d.noise, &config(), &mut NullLog).unwrap();
    let b = train_all(&d.train, &d.noise, &config(), &mut NullLog).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
    }
    let other = train_all(&d.train, &d.noise, &TrainConfig { seed: 12, ..config() }, &mut NullLog).unwrap();
    assert_ne!(other[2].model, a[2].model);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let d = data();
    let full_cfg = TrainConfig { epochs: StageEpochs { stage1: 1, stage2: 1, stage3: 4 }, ..config() };
    let c1 = train_stage1(&clean(&d), &d.noise, &full_cfg, &mut NullLog).unwrap();
    let c2 = train_stage2(&d.train, &c1, &d.noise, &full_cfg, &mut NullLog).unwrap();

    let mut full_log = MemoryLog::default();
    let full = train_stage3(&d.train, &c2, &d.noise, &full_cfg, &mut full_log).unwrap();

    let half_cfg = TrainConfig { epochs: StageEpochs { stage3: 2, ..full_cfg.epochs.clone() }, ..full_cfg.clone() };
    let half = train_stage3(&d.train, &c2, &d.noise, &half_cfg, &mut NullLog).unwrap();
    assert_eq!(half.epochs_done, 2);
    let restored = Checkpoint::<f64>::from_bytes(&half.to_bytes().unwrap()).unwrap();
    let mut rest_log = MemoryLog::default();
    let mut runner = StageRunner::resume(&restored, TrainData::Paired(&d.train), &d.noise, &full_cfg).unwrap();
    runner.run(&mut rest_log).unwrap();
    let resumed = runner.into_checkpoint();

    let tail: Vec<(u64, f64)> = full_log.steps.iter().filter(|s| s.epoch >= 2).map(|s| (s.step, s.loss)).collect();
    let got: Vec<(u64, f64)> = rest_log.steps.iter().map(|s| (s.step, s.loss)).collect();
    assert_eq!(got, tail);
    assert_eq!(resumed, full);
}

#[test]
fn zero_weights_reduce_to_charbonnier() {
    let d = data();
    let mut cfg = config();
    let [_, c2, _] = train_all(&d.train, &d.noise, &cfg, &mut NullLog).unwrap();
    cfg.loss.lambda_k = 0.0;
    cfg.loss.lambda_s = 0.0;
    let mut log = MemoryLog::default();
    train_stage3(&d.train, &c2, &d.noise, &cfg, &mut log).unwrap();
    assert!(!log.steps.is_empty());
    for s in &log.steps {
        assert_eq!(s.loss, s.charbonnier);
        assert!(s.kl.unwrap() > 0.0 && s.spectral.unwrap() > 0.0);
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let d = data();
    let cfg = TrainConfig { epochs: StageEpochs { stage1: 0, stage2: 0, stage3: 0 }, ..config() };
    let c1 = train_stage1(&clean(&d), &d.noise, &cfg, &mut NullLog).unwrap();
    let init = initial_checkpoint::<f64>(&cfg).unwrap().model;
    assert_eq!(c1.model.emnet.params, init.emnet.params);
    assert_eq!(c1.model.imnet.params, init.imnet.params);
    assert_eq!(c1.step, 0);
}

#[test]
fn online_and_offline_noise_differ() {
    let d = data();
    let run = |mode| {
        let mut log = MemoryLog::default();
        train_stage1(&clean(&d), &d.noise, &TrainConfig { noise_mode: mode, ..config() }, &mut log).unwrap();
        log.steps.iter().map(|s| s.loss).collect::<Vec<_>>()
    };
    let online = run(NoiseMode::Online);
    assert_eq!(online, run(NoiseMode::Online));
    assert_ne!(online, run(NoiseMode::Offline));
}

#[test]
fn stages_require_their_predecessor() {
    let d = data();
    let cfg = config();
    let init = initial_checkpoint::<f64>(&cfg).unwrap();
    assert!(matches!(train_stage2(&d.train, &init, &d.noise, &cfg, &mut NullLog), Err(HsidError::State(_))));
    assert!(matches!(train_stage3(&d.train, &init, &d.noise, &cfg, &mut NullLog), Err(HsidError::State(_))));
    assert!(matches!(denoise(&d.test[0].noisy, &init), Err(HsidError::State(_))));
    let c1 = StageRunner::start(Stage::Two, &init, TrainData::Clean(&clean(&d)), &d.noise, &cfg);
    assert!(c1.is_err());
}

#[test]
fn untrained_pipeline_is_the_clamped_identity() {
    let d = data();
    let init = initial_checkpoint::<f64>(&config()).unwrap();
    for p in &d.test {
        let out = denoise_with(&p.noisy, &init.model, Pipeline::Full).unwrap();
        let want = SpectralCube::from_tensor_clamped(p.noisy.data().clone(), p.noisy.wavelengths().to_vec()).unwrap();
        assert_eq!(out, want);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let d = data();
    let cfg = config();
    let mut c1 = train_stage1(&clean(&d), &d.noise, &cfg, &mut NullLog).unwrap();
    c1.model.emnet.params.get_mut("head.bias").unwrap().data_mut()[0] = f64::NAN;
    let longer = TrainConfig { epochs: StageEpochs { stage1: 3, ..cfg.epochs.clone() }, ..cfg };
    let mut runner = StageRunner::resume(&c1, TrainData::Clean(&clean(&d)), &d.noise, &longer).unwrap();
    match runner.run(&mut NullLog) {
        Err(HsidError::Numeric { step, lr, .. }) => {
            assert_eq!(step, c1.step as usize);
            assert_eq!(lr, 1e-3);
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn json_lines_log_carries_every_term() {
    let d = data();
    let mut buf = Vec::new();
    let cfg = TrainConfig { validation_fraction: 0.25, ..config() };
    train_all(&d.train, &d.noise, &cfg, &mut JsonLinesLog::new(&mut buf)).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let steps: Vec<_> = lines.iter().filter(|v| v["kind"] == "step").collect();
    let epochs: Vec<_> = lines.iter().filter(|v| v["kind"] == "epoch").collect();
    assert_eq!(epochs.len(), 6);
    assert!(epochs.iter().all(|e| e["val_psnr"].as_f64().unwrap().is_finite()));
    for key in ["step", "stage", "loss", "charbonnier", "grad_norm", "wall_time_s"] {
        assert!(steps.iter().all(|s| !s[key].is_null()), "missing {key}");
    }
    assert!(steps.iter().filter(|s| s["stage"] == 3).all(|s| s["kl"].is_f64() && s["spectral"].is_f64()));
    assert!(steps.iter().filter(|s| s["stage"] == 1).all(|s| s["kl"].is_null()));
}

#[test]
fn ablation_reports_equal_budgets() {
    let d = data();
    let cfg = TrainConfig { epochs: StageEpochs::split(4), ..config() };
    let r = run_ablation(&AblationMode::ALL, &d.train, &d.test, &d.noise, &cfg, &[1, 2], &mut NullLog).unwrap();
    assert_eq!(r.rows.len(), 6);
    let budget = r.rows[0].steps;
    assert_eq!(budget, 4 * 4);
    assert!(r.rows.iter().all(|row| row.steps == budget));
    assert_eq!(r.summary.len(), 3);
    assert!(r.summary.iter().all(|s| s.mean_psnr_db.is_finite()));
}
