mod common;

use common::calibration_pairs;
use hsid::cube_io::SpectralCube;
use hsid::noise_synth::{
    calibrate, explicit_noise, inject_implicit, synthesize_explicit, ImplicitNoiseSpec, NoiseEnable, NoiseParams,
};
use hsid::Tensor;

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

fn shot_only(bands: usize, k: f64) -> NoiseParams {
    let mut p = NoiseParams::uniform(bands, k, 0.0, 0.0, 0.0);
    p.enable = NoiseEnable { shot: true, read: false, stripe: false };
    p
}

#[test]
fn shot_variance_tracks_signal_over_gain() {
    // 1 x 250 x 400 = 1e5 samples per level
    for (level, k) in [(0.1, 1000.0), (0.5, 1000.0), (0.9, 1000.0), (0.5, 100.0)] {
        let clean = SpectralCube::from_tensor(Tensor::full(&[1, 250, 400], level)).unwrap();
        let noisy = synthesize_explicit(&clean, &shot_only(1, k), 17).unwrap();
        let resid: Vec<f64> = noisy.data().data().iter().map(|v| v - level).collect();
        let want = level / k;
        let got = variance(&resid);
        assert!(((got - want) / want).abs() < 0.05, "X={level} k={k}: {got} vs {want}");
    }
}

#[test]
fn readout_mean_within_three_standard_errors() {
    let mut p = NoiseParams::uniform(4, 1.0, 0.0, 0.0, 0.0);
    p.m = vec![0.01, -0.02, 0.0, 0.03];
    p.v_read = vec![1e-4, 4e-4, 1e-3, 2e-4];
    p.enable = NoiseEnable { shot: false, read: true, stripe: false };
    let clean = Tensor::<f64>::full(&[4, 64, 64], 0.5);
    let n = explicit_noise(&clean, &p, 4).unwrap();
    let per_band = 64 * 64;
    for b in 0..4 {
        let band = &n.data()[b * per_band..(b + 1) * per_band];
        let mean = band.iter().sum::<f64>() / per_band as f64;
        let se = (p.v_read[b] / per_band as f64).sqrt();
        assert!((mean - p.m[b]).abs() < 3.0 * se, "band {b}: {mean}");
    }
}

#[test]
fn calibration_recovers_known_parameters() {
    let truth = NoiseParams::uniform(8, 100.0, 0.005, 1e-4, 4e-5);
    let est = calibrate(&calibration_pairs(&truth, 16)).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(est.k, 100.0) < 0.10, "k = {}", est.k);
    assert!(rel(mean(&est.v_read), 1e-4) < 0.10, "v_read = {:?}", est.v_read);
    assert!(rel(mean(&est.v_stripe), 4e-5) < 0.10, "v_stripe = {:?}", est.v_stripe);
    assert!((mean(&est.m) - 0.005).abs() < 1e-3);
}

fn lag1_autocorr(field: &[f64], h: usize, w: usize) -> f64 {
    let m = field.iter().sum::<f64>() / field.len() as f64;
    let var: f64 = field.iter().map(|v| (v - m) * (v - m)).sum();
    let mut cov = 0.0;
    for r in 0..h {
        for c in 0..w - 1 {
            cov += (field[r * w + c] - m) * (field[r * w + c + 1] - m);
        }
    }
    cov / var * (h * w) as f64 / (h * (w - 1)) as f64
}

#[test]
fn correlated_implicit_noise_is_spatially_correlated() {
    let clean = SpectralCube::from_tensor(Tensor::full(&[1, 100, 100], 0.5f64)).unwrap();
    let corr = ImplicitNoiseSpec { corr_sigma: 3.0, corr_amp: 0.05, impulse_prob: 0.0, seed: 8 };
    let white = ImplicitNoiseSpec { corr_sigma: 0.0, ..corr.clone() };
    let added = |spec: &ImplicitNoiseSpec| -> Vec<f64> {
        inject_implicit(&clean, spec).unwrap().data().data().iter().map(|v| v - 0.5).collect()
    };
    let a_corr = lag1_autocorr(&added(&corr), 100, 100);
    let a_white = lag1_autocorr(&added(&white), 100, 100);
    assert!(a_corr > a_white + 0.5, "corr {a_corr} vs white {a_white}");
    // amplitude is the per-pixel standard deviation
    assert!((variance(&added(&white)).sqrt() - 0.05).abs() < 0.005);
}

#[test]
fn toy_calibration_set_recovers_toy_noise() {
    let d: hsid::toy::ToyDataset<f64> = hsid::toy::generate_toy(&hsid::toy::ToyConfig::default()).unwrap();
    let truth = d.noise.for_ratio(50.0);
    let est = calibrate(&d.calibration).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(est.k, truth.k) < 0.10, "k = {}", est.k);
    assert!(rel(mean(&est.v_read), mean(&truth.v_read)) < 0.10, "v_read = {:?}", est.v_read);
    assert!(rel(mean(&est.v_stripe), mean(&truth.v_stripe)) < 0.10, "v_stripe = {:?}", est.v_stripe);
}
