//! Brute-force metric references.

use hsid::cube_io::SpectralCube;
use hsid::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_cube(seed: u64, d: usize, h: usize, w: usize) -> SpectralCube<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..d * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    SpectralCube::from_tensor(Tensor::from_vec(&[d, h, w], v).unwrap()).unwrap()
}

fn at(c: &SpectralCube<f64>, b: usize, r: usize, col: usize) -> f64 {
    c.data().data()[(b * c.height() + r) * c.width() + col]
}

pub fn oracle_psnr(a: &SpectralCube<f64>, b: &SpectralCube<f64>) -> f64 {
    let mut total = 0.0;
    for band in 0..a.bands() {
        let mut se = 0.0;
        for r in 0..a.height() {
            for c in 0..a.width() {
                se += (at(a, band, r, c) - at(b, band, r, c)).powi(2);
            }
        }
        let mse = se / (a.height() * a.width()) as f64;
        total += if mse == 0.0 { 100.0 } else { -10.0 * mse.log10() };
    }
    total / a.bands() as f64
}

/// Direct 2-D windowed SSIM: every window position, explicit weighted moments.
pub fn oracle_ssim(a: &SpectralCube<f64>, b: &SpectralCube<f64>, size: usize, sigma: f64) -> f64 {
    let half = (size as f64 - 1.0) / 2.0;
    let mut g = vec![vec![0.0; size]; size];
    let mut norm = 0.0;
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            g[i][j] = (-d2 / (2.0 * sigma * sigma)).exp();
            norm += g[i][j];
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut per_band = 0.0;
    for band in 0..a.bands() {
        let mut acc = 0.0;
        let mut count = 0;
        for r0 in 0..=a.height() - size {
            for c0 in 0..=a.width() - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wgt = g[i][j] / norm;
                        mx += wgt * at(a, band, r0 + i, c0 + j);
                        my += wgt * at(b, band, r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wgt = g[i][j] / norm;
                        let dx = at(a, band, r0 + i, c0 + j) - mx;
                        let dy = at(b, band, r0 + i, c0 + j) - my;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cov += wgt * dx * dy;
                    }
                }
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_band += acc / count as f64;
    }
    per_band / a.bands() as f64
}

pub fn oracle_sam(a: &SpectralCube<f64>, b: &SpectralCube<f64>) -> f64 {
    let mut total = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            let x: Vec<f64> = (0..a.bands()).map(|band| at(a, band, r, c)).collect();
            let y: Vec<f64> = (0..a.bands()).map(|band| at(b, band, r, c)).collect();
            let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
            total += (dot / (nx * ny).max(1e-8)).max(-1.0).min(1.0).acos() * 180.0 / std::f64::consts::PI;
        }
    }
    total / (a.height() * a.width()) as f64
}
