//! Full-reference quality metrics for cubes in `[0, 1]`: PSNR, SSIM and SAM.
//!
//! Everything is accumulated in `f64` whatever the cube's element type.

use serde::{Deserialize, Serialize};

use crate::cube_io::SpectralCube;
use crate::error::{arg, Result};
use crate::scalar::Scalar;

/// PSNR reported for a band (or cube) reconstructed without error.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Floor on the norm product in SAM.
pub const SAM_EPS: f64 = 1e-8;

/// How per-band quantities are reduced to one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metric per band, then averaged over bands.
    #[default]
    BandMean,
    /// One error statistic pooled over the whole cube.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    pub per_band_psnr: Vec<f64>,
}

impl MetricsReport {
    pub fn compute<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<Self> {
        Self::compute_with(reference, test, Aggregation::BandMean)
    }

    pub fn compute_with<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>, aggregation: Aggregation) -> Result<Self> {
        let per_band_psnr = psnr_per_band(reference, test)?;
        let psnr_db = match aggregation {
            Aggregation::BandMean => mean(&per_band_psnr),
            Aggregation::Global => psnr_global(reference, test)?,
        };
        Ok(Self { psnr_db, ssim: ssim(reference, test)?, sam_deg: sam(reference, test)?, per_band_psnr })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_shapes<T: Scalar>(a: &SpectralCube<T>, b: &SpectralCube<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn band_mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

pub fn psnr_per_band<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<Vec<f64>> {
    check_shapes(reference, test)?;
    Ok((0..reference.bands()).map(|b| psnr_from_mse(band_mse(reference.band(b), test.band(b)))).collect())
}

/// Band-mean PSNR in dB; zero-error bands count as [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<f64> {
    Ok(mean(&psnr_per_band(reference, test)?))
}

/// PSNR of the MSE pooled over the whole cube.
pub fn psnr_global<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<f64> {
    check_shapes(reference, test)?;
    Ok(psnr_from_mse(band_mse(reference.data().data(), test.data().data())))
}

/// Gaussian SSIM window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// 'valid' separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

fn band_ssim(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let mu_x = filter_valid(x, h, w, taps);
    let mu_y = filter_valid(y, h, w, taps);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let e_xx = filter_valid(&prod(x, x), h, w, taps);
    let e_yy = filter_valid(&prod(y, y), h, w, taps);
    let e_xy = filter_valid(&prod(x, y), h, w, taps);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    total / n as f64
}

pub fn ssim_per_band<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>, window: SsimWindow) -> Result<Vec<f64>> {
    check_shapes(reference, test)?;
    let [d, h, w] = reference.shape();
    if window.size == 0 || !(window.sigma > 0.0) {
        return Err(arg("SSIM window needs a positive size and sigma"));
    }
    if h < window.size || w < window.size {
        return Err(arg(format!("SSIM window {} exceeds spatial size {h}x{w}", window.size)));
    }
    let taps = window.taps();
    let to_f64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    Ok((0..d).map(|b| band_ssim(&to_f64(reference.band(b)), &to_f64(test.band(b)), h, w, &taps)).collect())
}

/// Band-mean single-scale SSIM with an arbitrary Gaussian window.
pub fn ssim_with<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>, window: SsimWindow) -> Result<f64> {
    Ok(mean(&ssim_per_band(reference, test, window)?))
}

/// Band-mean SSIM with the standard 11x11, sigma 1.5 window.
pub fn ssim<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<f64> {
    ssim_with(reference, test, SsimWindow::default())
}

/// Mean spectral angle in degrees.
pub fn sam<T: Scalar>(reference: &SpectralCube<T>, test: &SpectralCube<T>) -> Result<f64> {
    check_shapes(reference, test)?;
    let [d, h, w] = reference.shape();
    if d < 2 {
        return Err(arg("SAM needs at least two bands"));
    }
    let (a, b) = (reference.data().data(), test.data().data());
    let plane = h * w;
    let total: f64 = (0..plane)
        .map(|p| {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for band in 0..d {
                let x = a[band * plane + p].to_f64_lossy();
                let y = b[band * plane + p].to_f64_lossy();
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            (dot / (na.sqrt() * nb.sqrt()).max(SAM_EPS)).clamp(-1.0, 1.0).acos().to_degrees()
        })
        .sum();
    Ok(total / plane as f64)
}
