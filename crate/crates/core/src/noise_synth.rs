//! Physical (explicit) noise synthesis, its calibration from paired data, and the toy
//! implicit-noise injector.
//!
//! Per band `b` the explicit model adds
//! * shot noise `Poisson(k X) / k - X` (variance `X / k`),
//! * readout noise `N(m_b, v_read_b)` per pixel,
//! * stripe noise `N(0, v_stripe_b)` drawn once per column (or row) and broadcast along it,
//!
//! then clamps to `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cube_io::{PairedSample, SpectralCube};
use crate::error::{arg, HsidError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEnable {
    pub shot: bool,
    pub read: bool,
    pub stripe: bool,
}

impl Default for NoiseEnable {
    fn default() -> Self {
        Self { shot: true, read: true, stripe: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripeAxis {
    /// One offset per column, constant down the column.
    #[default]
    Column,
    Row,
}

impl StripeAxis {
    fn is_column(&self) -> bool {
        *self == StripeAxis::Column
    }
}

/// Parameters of the explicit noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// System gain in electrons per normalized unit.
    pub k: f64,
    pub m: Vec<f64>,
    pub v_read: Vec<f64>,
    pub v_stripe: Vec<f64>,
    pub enable: NoiseEnable,
    #[serde(default, skip_serializing_if = "StripeAxis::is_column")]
    pub stripe_axis: StripeAxis,
}

impl NoiseParams {
    /// Same parameters for every band.
    pub fn uniform(bands: usize, k: f64, m: f64, v_read: f64, v_stripe: f64) -> Self {
        Self {
            k,
            m: vec![m; bands],
            v_read: vec![v_read; bands],
            v_stripe: vec![v_stripe; bands],
            enable: NoiseEnable::default(),
            stripe_axis: StripeAxis::Column,
        }
    }

    pub fn bands(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(arg(format!("system gain k must be positive, got {}", self.k)));
        }
        let d = self.m.len();
        if self.v_read.len() != d || self.v_stripe.len() != d {
            return Err(arg("noise parameter lists differ in length"));
        }
        if self.m.iter().any(|v| !v.is_finite()) {
            return Err(arg("readout means must be finite"));
        }
        if self.v_read.iter().chain(&self.v_stripe).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(arg("noise variances must be finite and non-negative"));
        }
        Ok(())
    }

    /// Parameters for a capture at `ratio` when `self` describes `reference_ratio`: variances
    /// scale by `ratio / reference_ratio` and the gain by its inverse.
    pub fn at_exposure_ratio(&self, ratio: f64, reference_ratio: f64) -> Self {
        let s = ratio / reference_ratio;
        Self {
            k: self.k / s,
            m: self.m.clone(),
            v_read: self.v_read.iter().map(|v| v * s).collect(),
            v_stripe: self.v_stripe.iter().map(|v| v * s).collect(),
            enable: self.enable,
            stripe_axis: self.stripe_axis,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HsidError::io(path, e))?;
        let p: Self = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| HsidError::io(path, e))
    }
}

/// Noise parameters measured at one exposure ratio, rescalable to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub params: NoiseParams,
    pub reference_ratio: f64,
}

impl NoiseModel {
    pub fn new(params: NoiseParams, reference_ratio: f64) -> Result<Self> {
        let m = Self { params, reference_ratio };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reference_ratio > 0.0) || !self.reference_ratio.is_finite() {
            return Err(arg(format!("reference exposure ratio must be positive, got {}", self.reference_ratio)));
        }
        self.params.validate()
    }

    pub fn for_ratio(&self, ratio: f64) -> NoiseParams {
        self.params.at_exposure_ratio(ratio, self.reference_ratio)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HsidError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| HsidError::io(path, e))
    }
}

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.sqrt()).expect("validated variance")
}

/// Additive explicit noise realization (unclamped) for a clean `D x H x W` tensor.
pub fn explicit_noise<T: Scalar>(clean: &Tensor<T>, params: &NoiseParams, seed: u64) -> Result<Tensor<T>> {
    params.validate()?;
    let (d, h, w) = match clean.shape() {
        [d, h, w] => (*d, *h, *w),
        other => return Err(arg(format!("expected D x H x W, got {other:?}"))),
    };
    if params.bands() != d {
        return Err(arg(format!("noise params have {} bands, cube has {}", params.bands(), d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![T::zero(); clean.len()];
    let en = params.enable;
    let k = params.k;
    for b in 0..d {
        let stripes: Vec<f64> = if en.stripe {
            let n = if params.stripe_axis.is_column() { w } else { h };
            let dist = normal(0.0, params.v_stripe[b]);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else {
            Vec::new()
        };
        let read = normal(params.m[b], params.v_read[b]);
        for r in 0..h {
            for c in 0..w {
                let i = (b * h + r) * w + c;
                let x = clean.data()[i].to_f64_lossy();
                let mut n = 0.0;
                if en.shot {
                    let rate = k * x;
                    if rate > 0.0 {
                        let count: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                        n += count / k - x;
                    }
                }
                if en.read {
                    n += read.sample(&mut rng);
                }
                if en.stripe {
                    n += stripes[if params.stripe_axis.is_column() { c } else { r }];
                }
                out[i] = T::c(n);
            }
        }
    }
    Tensor::from_vec(clean.shape(), out)
}

/// `clamp(clean + explicit_noise, 0, 1)`.
pub fn synthesize_explicit<T: Scalar>(clean: &SpectralCube<T>, params: &NoiseParams, seed: u64) -> Result<SpectralCube<T>> {
    let noise = explicit_noise(clean.data(), params, seed)?;
    let noisy = clean.data().zip_map(&noise, |x, n| (x + n).max(T::zero()).min(T::one()));
    SpectralCube::new(noisy, clean.wavelengths().to_vec())
}

/// Settings of the intensity-binned variance regression used by [`calibrate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationSettings {
    pub bins: usize,
    pub min_bin_count: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { bins: 16, min_bin_count: 100 }
    }
}

/// Estimates explicit-noise parameters from clean/noisy pairs.
pub fn calibrate<T: Scalar>(pairs: &[PairedSample<T>]) -> Result<NoiseParams> {
    calibrate_with(pairs, CalibrationSettings::default())
}

/// Mean-variance (photon transfer) calibration.
///
/// Per band: `m` is the mean residual. Stripe offsets are estimated per column with the
/// one-way random-effects estimator `var(column means) - within-column variance / H`, which
/// removes the pixel-noise contribution to the column means. After subtracting each column's
/// mean, the residual variance in each clean-intensity bin is regressed on intensity with
/// inverse-variance weights. The gain is global, so the slope (`1/k`) is fitted jointly over
/// all bands while each band keeps its own intercept (`v_read`).
pub fn calibrate_with<T: Scalar>(pairs: &[PairedSample<T>], settings: CalibrationSettings) -> Result<NoiseParams> {
    let first = pairs.first().ok_or_else(|| arg("calibration needs at least one pair"))?;
    let [d, _, _] = first.clean.shape();
    if pairs.iter().any(|p| p.clean.shape()[0] != d || p.clean.shape() != p.noisy.shape()) {
        return Err(arg("calibration pairs must share the band count and be shape-consistent"));
    }
    let bands = (0..d).map(|b| band_statistics(pairs, b, settings)).collect::<Result<Vec<_>>>()?;

    // per-band slopes only serve to name an offending band
    for (b, band) in bands.iter().enumerate() {
        let (sxx, sxy) = band.centered_moments(&band.count_weights());
        if !(sxx > 0.0) {
            return Err(HsidError::Calibration { band: b, reason: "degenerate intensity spread".into() });
        }
        if !(sxy / sxx > 0.0) {
            return Err(HsidError::Calibration {
                band: b,
                reason: format!("non-positive variance-vs-intensity slope {:.3e}; gain unidentifiable", sxy / sxx),
            });
        }
    }
    // unweighted pass, then reweight by the fitted variance so weights stay independent of
    // the bin noise
    let weights: Vec<Vec<f64>> = bands.iter().map(BandStatistics::count_weights).collect();
    let (slope, intercepts) = joint_fit(&bands, &weights);
    let weights: Vec<Vec<f64>> = bands.iter().zip(&intercepts).map(|(b, &a)| b.model_weights(a, slope)).collect();
    let (slope, intercepts) = joint_fit(&bands, &weights);
    if !(slope > 0.0) {
        return Err(HsidError::Calibration { band: 0, reason: format!("non-positive pooled slope {slope:.3e}") });
    }
    let params = NoiseParams {
        k: 1.0 / slope,
        m: bands.iter().map(|b| b.mean).collect(),
        v_read: intercepts.iter().map(|a| a.max(0.0)).collect(),
        v_stripe: bands.iter().map(|b| b.stripe.max(0.0)).collect(),
        enable: NoiseEnable::default(),
        stripe_axis: StripeAxis::Column,
    };
    params.validate()?;
    Ok(params)
}

/// Weighted least squares with a shared slope and per-band intercepts.
fn joint_fit(bands: &[BandStatistics], weights: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let (sxx, sxy) = bands.iter().zip(weights).map(|(b, w)| b.centered_moments(w)).fold((0.0, 0.0), |a, m| (a.0 + m.0, a.1 + m.1));
    let slope = sxy / sxx;
    let intercepts = bands
        .iter()
        .zip(weights)
        .map(|(b, w)| {
            let (mx, my) = b.weighted_means(w);
            my - slope * mx
        })
        .collect();
    (slope, intercepts)
}

struct BandStatistics {
    mean: f64,
    stripe: f64,
    /// `(mean intensity, residual variance, sample count)` per populated bin.
    points: Vec<(f64, f64, usize)>,
}

impl BandStatistics {
    fn count_weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.2 as f64).collect()
    }

    /// Inverse sampling variance of each bin's variance estimate, `(n - 1) / (2 v^2)`.
    fn model_weights(&self, intercept: f64, slope: f64) -> Vec<f64> {
        let floor = self.points.iter().map(|p| p.1).fold(0.0, f64::max) * 1e-3 + 1e-300;
        self.points.iter().map(|&(x, _, n)| (n as f64 - 1.0) / (2.0 * (intercept + slope * x).max(floor).powi(2))).collect()
    }

    fn weighted_means(&self, w: &[f64]) -> (f64, f64) {
        let total: f64 = w.iter().sum();
        let mx = self.points.iter().zip(w).map(|(p, w)| w * p.0).sum::<f64>() / total;
        let my = self.points.iter().zip(w).map(|(p, w)| w * p.1).sum::<f64>() / total;
        (mx, my)
    }

    fn centered_moments(&self, w: &[f64]) -> (f64, f64) {
        let (mx, my) = self.weighted_means(w);
        self.points
            .iter()
            .zip(w)
            .fold((0.0, 0.0), |(sxx, sxy), (&(x, y, _), w)| (sxx + w * (x - mx) * (x - mx), sxy + w * (x - mx) * (y - my)))
    }
}

fn band_statistics<T: Scalar>(pairs: &[PairedSample<T>], b: usize, settings: CalibrationSettings) -> Result<BandStatistics> {
    // (clean intensity, squared column-centered residual, per-column correction)
    let mut samples: Vec<(f64, f64, f64)> = Vec::new();
    let mut residual_sum = 0.0;
    let mut residual_count = 0usize;
    let mut col_means: Vec<f64> = Vec::new();
    let mut within_ss = 0.0;
    let mut within_dof = 0usize;
    let mut rows_per_col = 0usize;
    for p in pairs {
        let [_, h, w] = p.clean.shape();
        if h < 3 {
            return Err(arg("calibration needs at least three rows per cube"));
        }
        rows_per_col = h;
        let hf = h as f64;
        let clean = p.clean.band(b);
        let noisy = p.noisy.band(b);
        for c in 0..w {
            let col: Vec<f64> = (0..h).map(|r| noisy[r * w + c].to_f64_lossy() - clean[r * w + c].to_f64_lossy()).collect();
            let mean = col.iter().sum::<f64>() / hf;
            let ss = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            residual_sum += col.iter().sum::<f64>();
            residual_count += h;
            col_means.push(mean);
            within_ss += ss;
            within_dof += h - 1;
            // E[(e_i - mean)^2] = s_i (1 - 2/H) + S/H^2 with S the column's summed pixel
            // variance, and E[ss] = S (1 - 1/H)
            let offset = ss / (hf - 1.0) / hf;
            for (r, v) in col.iter().enumerate() {
                samples.push((clean[r * w + c].to_f64_lossy(), (v - mean) * (v - mean), offset));
            }
        }
    }
    let mean = residual_sum / residual_count as f64;
    let within_var = within_ss / within_dof.max(1) as f64;
    let ncols = col_means.len();
    let cm_mean = col_means.iter().sum::<f64>() / ncols as f64;
    let between = col_means.iter().map(|v| (v - cm_mean) * (v - cm_mean)).sum::<f64>() / (ncols.max(2) - 1) as f64;
    let stripe = between - within_var / rows_per_col as f64;

    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.0), hi.max(s.0)));
    if !(hi > lo) {
        return Err(HsidError::Calibration { band: b, reason: "clean intensity is constant; no slope identifiable".into() });
    }
    let nb = settings.bins;
    let width = (hi - lo) / nb as f64;
    let gain = 1.0 - 2.0 / rows_per_col as f64;
    // (count, sum x, sum corrected moment)
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); nb];
    for &(x, r2, offset) in &samples {
        let i = (((x - lo) / width) as usize).min(nb - 1);
        let v = (r2 - offset) / gain;
        let a = &mut acc[i];
        a.0 += 1;
        a.1 += x;
        a.2 += v;
    }
    let points: Vec<(f64, f64, usize)> = acc
        .iter()
        .filter(|a| a.0 >= settings.min_bin_count.max(2))
        .map(|&(n, sx, sv)| (sx / n as f64, sv / n as f64, n))
        .collect();
    if points.len() < 2 {
        return Err(HsidError::Calibration { band: b, reason: "fewer than two populated intensity bins".into() });
    }
    Ok(BandStatistics { mean, stripe, points })
}

/// Toy stand-in for the implicitly modeled noise component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitNoiseSpec {
    /// Gaussian blur sigma (pixels) applied to white noise; 0 keeps it white.
    pub corr_sigma: f64,
    /// Standard deviation of the correlated component.
    pub corr_amp: f64,
    /// Probability that a pixel is replaced by 0 or 1 (half each).
    pub impulse_prob: f64,
    pub seed: u64,
}

impl ImplicitNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.corr_sigma >= 0.0 && self.corr_amp >= 0.0) {
            return Err(arg("corr_sigma and corr_amp must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.impulse_prob) {
            return Err(arg("impulse_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    (if j >= n as isize { period - j } else { j }) as usize
}

/// Separable blur of one `h x w` plane with reflect boundaries.
fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel.iter().enumerate().map(|(t, kv)| kv * plane[y * w + reflect(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel.iter().enumerate().map(|(t, kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Adds spatially correlated Gaussian noise and salt-and-pepper impulses, then clamps.
pub fn inject_implicit<T: Scalar>(cube: &SpectralCube<T>, spec: &ImplicitNoiseSpec) -> Result<SpectralCube<T>> {
    spec.validate()?;
    let [d, h, w] = cube.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out: Vec<f64> = cube.data().data().iter().map(|v| v.to_f64_lossy()).collect();
    if spec.corr_amp > 0.0 {
        let kernel = (spec.corr_sigma > 0.0).then(|| {
            let k1 = gaussian_kernel(spec.corr_sigma);
            // unit output variance for unit white input (interior pixels)
            let gain = k1.iter().map(|v| v * v).sum::<f64>();
            (k1, 1.0 / gain)
        });
        let std = Normal::new(0.0, 1.0).unwrap();
        for b in 0..d {
            let white: Vec<f64> = (0..h * w).map(|_| std.sample(&mut rng)).collect();
            let field = match &kernel {
                Some((k, inv_gain)) => blur_plane(&white, h, w, k).into_iter().map(|v| v * inv_gain).collect(),
                None => white,
            };
            for (o, f) in out[b * h * w..(b + 1) * h * w].iter_mut().zip(field) {
                *o += spec.corr_amp * f;
            }
        }
    }
    if spec.impulse_prob > 0.0 {
        for o in out.iter_mut() {
            let u: f64 = rng.gen();
            if u < spec.impulse_prob {
                *o = if u < spec.impulse_prob / 2.0 { 0.0 } else { 1.0 };
            }
        }
    }
    let data = out.into_iter().map(|v| T::c(v.clamp(0.0, 1.0))).collect();
    SpectralCube::new(Tensor::from_vec(&[d, h, w], data)?, cube.wavelengths().to_vec())
}
