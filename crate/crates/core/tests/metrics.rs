mod common;

use common::oracles::{oracle_psnr, oracle_sam, oracle_ssim, random_cube};
use hsid::cube_io::SpectralCube;
use hsid::metrics::{psnr, sam, ssim, ssim_with, MetricsReport, SsimWindow};
use hsid::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn psnr_and_sam_match_brute_force_on_small_cubes() {
    for seed in 0..5 {
        let a = random_cube(seed, 4, 8, 8);
        let b = random_cube(seed + 100, 4, 8, 8);
        assert!((psnr(&a, &b).unwrap() - oracle_psnr(&a, &b)).abs() < 1e-10);
        assert!((sam(&a, &b).unwrap() - oracle_sam(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn ssim_matches_brute_force_on_small_cubes() {
    // an 11x11 window does not fit 8x8 planes, so the small cubes use a 7x7 window
    let small = SsimWindow { size: 7, sigma: 1.5 };
    for seed in 0..5 {
        let a = random_cube(seed, 4, 8, 8);
        let b = random_cube(seed + 50, 4, 8, 8);
        assert!((ssim_with(&a, &b, small).unwrap() - oracle_ssim(&a, &b, 7, 1.5)).abs() < 1e-10);
        let a = random_cube(seed, 4, 16, 16);
        let b = a.data().zip_map(random_cube(seed + 9, 4, 16, 16).data(), |x, n| 0.8 * x + 0.2 * n);
        let b = SpectralCube::from_tensor(b).unwrap();
        assert!((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b, 11, 1.5)).abs() < 1e-10);
    }
}

#[test]
fn ssim_of_constant_planes_matches_oracle() {
    let a = SpectralCube::from_tensor(Tensor::full(&[1, 11, 11], 0.5)).unwrap();
    let b = SpectralCube::from_tensor(Tensor::full(&[1, 11, 11], 0.6)).unwrap();
    assert!((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b, 11, 1.5)).abs() < 1e-12);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let clean = SpectralCube::from_tensor(random_cube(3, 4, 16, 16).data().map(|v| 0.15 + 0.7 * v)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let unit: Vec<f64> = (0..clean.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scores: Vec<f64> = [0.01, 0.05, 0.1]
        .iter()
        .map(|amp| {
            let noisy: Vec<f64> = clean.data().data().iter().zip(&unit).map(|(x, n)| x + amp * n).collect();
            let noisy = SpectralCube::from_tensor(Tensor::from_vec(&[4, 16, 16], noisy).unwrap()).unwrap();
            psnr(&clean, &noisy).unwrap()
        })
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

#[test]
fn report_serializes_all_fields() {
    let a = random_cube(1, 3, 12, 12);
    let b = random_cube(2, 3, 12, 12);
    let r = MetricsReport::compute(&a, &b).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["psnr_db", "ssim", "sam_deg", "per_band_psnr"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(r.per_band_psnr.len(), 3);
    assert!(r.ssim <= 1.0 && r.sam_deg >= 0.0 && r.psnr_db.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric(seed in 0u64..10_000) {
        let a = random_cube(seed, 2, 12, 12);
        let b = random_cube(seed ^ 0x5a5a, 2, 12, 12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn sam_ignores_per_pixel_positive_scaling(seed in 0u64..10_000, lo in 0.05f64..1.0) {
        let a = random_cube(seed, 5, 4, 4);
        let b = random_cube(seed + 1, 5, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let scales: Vec<f64> = (0..16).map(|_| lo + (1.0 - lo) * rng.gen::<f64>()).collect();
        let scaled: Vec<f64> = b.data().data().iter().enumerate().map(|(i, v)| v * scales[i % 16]).collect();
        let scaled = SpectralCube::from_tensor(Tensor::from_vec(&[5, 4, 4], scaled).unwrap()).unwrap();
        prop_assert!((sam(&a, &b).unwrap() - sam(&a, &scaled).unwrap()).abs() < 1e-9);
        prop_assert!((sam(&scaled, &a).unwrap() - sam(&b, &a).unwrap()).abs() < 1e-9);
    }
}
