//! Training losses: Charbonnier reconstruction, histogram KL divergence and spectral
//! consistency, plus their weighted combination.
//!
//! Every loss comes with a hand-derived vector-Jacobian product so the autograd tape can
//! route gradients through it.

use serde::{Deserialize, Serialize};

use crate::error::{arg, HsidError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to `q` before taking its logarithm.
pub const KL_Q_FLOOR: f64 = 1e-8;
/// Lower bound on spectral norm products.
pub const SPECTRAL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralVariant {
    /// One minus the mean cosine similarity.
    #[default]
    Cosine,
    /// Divides by the product of squared norms instead of the norms.
    SquaredNorms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda_k: f64,
    pub lambda_s: f64,
    pub histogram_bins: usize,
    /// Gaussian kernel width as a fraction of the bin width.
    pub histogram_bandwidth: f64,
    pub histogram_range: (f64, f64),
    pub spectral_variant: SpectralVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda_k: 0.01,
            lambda_s: 10.0,
            histogram_bins: 64,
            histogram_bandwidth: 0.5,
            histogram_range: (0.0, 1.0),
            spectral_variant: SpectralVariant::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(arg("epsilon must be positive"));
        }
        if !(self.lambda_k >= 0.0 && self.lambda_s >= 0.0) {
            return Err(arg("loss weights must be non-negative"));
        }
        if self.histogram_bins < 2 {
            return Err(arg("histogram needs at least 2 bins"));
        }
        if !(self.histogram_bandwidth > 0.0) {
            return Err(arg("histogram bandwidth must be positive"));
        }
        let (lo, hi) = self.histogram_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(arg("histogram range must be finite with min < max"));
        }
        Ok(())
    }

    pub fn histogram(&self) -> HistogramSpec {
        HistogramSpec {
            bins: self.histogram_bins,
            range: self.histogram_range,
            bandwidth: self.histogram_bandwidth,
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean of `sqrt((x - xhat)^2 + eps^2)` over all elements.
pub fn charbonnier<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, epsilon: f64) -> Result<T> {
    same_shape(x, xhat)?;
    let e2 = T::c(epsilon * epsilon);
    let total: T = x.data().iter().zip(xhat.data()).map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt()).sum();
    Ok(total / T::from_usize(x.len()).unwrap())
}

/// Gradient of [`charbonnier`] with respect to `xhat` (the gradient for `x` is its negation).
pub fn charbonnier_grad<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, epsilon: f64) -> Vec<T> {
    let e2 = T::c(epsilon * epsilon);
    let n = T::from_usize(x.len()).unwrap();
    x.data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| {
            let d = b - a;
            d / (d * d + e2).sqrt() / n
        })
        .collect()
}

/// Normalized probability mass over contiguous bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution<T> {
    pub probs: Vec<T>,
    pub bin_edges: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    pub range: (f64, f64),
    pub bandwidth: f64,
}

impl HistogramSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if self.bins < 2 || !(lo.is_finite() && hi.is_finite() && lo < hi) || !(self.bandwidth > 0.0) {
            return Err(arg(format!("invalid histogram spec {self:?}")));
        }
        Ok(())
    }

    fn width(&self) -> f64 {
        (self.range.1 - self.range.0) / self.bins as f64
    }

    fn center(&self, b: usize) -> f64 {
        self.range.0 + (b as f64 + 0.5) * self.width()
    }

    fn sigma(&self) -> f64 {
        self.bandwidth * self.width()
    }

    fn edges<T: Scalar>(&self) -> Vec<T> {
        (0..=self.bins).map(|i| T::c(self.range.0 + i as f64 * self.width())).collect()
    }
}

// exp(-40) is far below the resolution of any bin mass that matters.
const KERNEL_CUTOFF: f64 = 80.0;

#[inline]
fn kernel<T: Scalar>(x: T, center: T, inv_two_sigma2: T) -> T {
    let z2 = (x - center) * (x - center) * inv_two_sigma2;
    if z2 > T::c(KERNEL_CUTOFF) {
        T::zero()
    } else {
        (-z2).exp()
    }
}

/// Differentiable histogram: every value spreads Gaussian mass over the bin centers.
///
/// Returns the distribution and the unnormalized total mass (needed by the backward pass).
pub fn soft_histogram<T: Scalar>(values: &[T], spec: &HistogramSpec) -> Result<(Distribution<T>, T)> {
    spec.validate()?;
    let (lo, hi) = (T::c(spec.range.0), T::c(spec.range.1));
    if !values.iter().any(|&v| v >= lo && v <= hi) {
        return Err(HsidError::DegenerateDistribution("all values fall outside the histogram range".into()));
    }
    let inv = T::c(1.0 / (2.0 * spec.sigma() * spec.sigma()));
    let centers: Vec<T> = (0..spec.bins).map(|b| T::c(spec.center(b))).collect();
    let mut mass = vec![T::zero(); spec.bins];
    for &v in values {
        for (m, &c) in mass.iter_mut().zip(&centers) {
            *m += kernel(v, c, inv);
        }
    }
    let total: T = mass.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(HsidError::DegenerateDistribution("histogram has no mass".into()));
    }
    let probs = mass.into_iter().map(|m| m / total).collect();
    Ok((Distribution { probs, bin_edges: spec.edges() }, total))
}

/// Pulls a gradient on bin probabilities back onto the input values.
pub fn soft_histogram_vjp<T: Scalar>(
    values: &[T],
    spec: &HistogramSpec,
    dist: &Distribution<T>,
    total: T,
    grad_probs: &[T],
) -> Vec<T> {
    let sigma = spec.sigma();
    let inv = T::c(1.0 / (2.0 * sigma * sigma));
    let inv_s2 = T::c(1.0 / (sigma * sigma));
    let dot: T = grad_probs.iter().zip(&dist.probs).map(|(&g, &p)| g * p).sum();
    // d p_b / d m_c = (delta_bc - p_b) / M
    let grad_mass: Vec<T> = grad_probs.iter().map(|&g| (g - dot) / total).collect();
    let centers: Vec<T> = (0..spec.bins).map(|b| T::c(spec.center(b))).collect();
    values
        .iter()
        .map(|&v| {
            let mut acc = T::zero();
            for (&gm, &c) in grad_mass.iter().zip(&centers) {
                let k = kernel(v, c, inv);
                if k != T::zero() {
                    acc += gm * k * (c - v) * inv_s2;
                }
            }
            acc
        })
        .collect()
}

fn check_edges<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<()> {
    if p.probs.len() != q.probs.len() || p.bin_edges != q.bin_edges {
        return Err(arg("distributions have mismatched bin edges"));
    }
    Ok(())
}

/// `sum p log(max(p, floor) / max(q, floor))` in nats, with `0 log 0 = 0`.
///
/// Flooring both sides keeps `KL(p, p)` exactly zero when some bins hold less than the floor.
pub fn kl_divergence<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<T> {
    check_edges(p, q)?;
    let floor = T::c(KL_Q_FLOOR);
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.max(floor) / qi.max(floor)).ln())
        .sum())
}

/// Partial derivatives of [`kl_divergence`] with respect to `p` and `q`.
pub fn kl_grads<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> (Vec<T>, Vec<T>) {
    let floor = T::c(KL_Q_FLOOR);
    let mut gp = Vec::with_capacity(p.probs.len());
    let mut gq = Vec::with_capacity(p.probs.len());
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        let qf = qi.max(floor);
        if pi > T::zero() {
            gp.push((pi.max(floor) / qf).ln() + if pi > floor { T::one() } else { T::zero() });
            gq.push(if qi > floor { -pi / qi } else { T::zero() });
        } else {
            gp.push(T::zero());
            gq.push(T::zero());
        }
    }
    (gp, gq)
}

/// Index helper for per-pixel spectra: tensors are `[C, D, H, W]`, a spectrum runs along `D`
/// for a fixed `(c, h, w)`.
fn spectra<T: Scalar>(t: &Tensor<T>) -> ([usize; 4], usize) {
    let dims = t.dims4();
    (dims, dims[2] * dims[3])
}

/// `1 - mean_i <x_i, xhat_i> / max(|x_i| |xhat_i|, eps)` over all pixels.
pub fn spectral_consistency<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, variant: SpectralVariant) -> Result<T> {
    same_shape(x, xhat)?;
    let ([c, d, _, _], hw) = spectra(x);
    let eps = T::c(SPECTRAL_EPS);
    let mut acc = T::zero();
    for ci in 0..c {
        for p in 0..hw {
            let (mut s, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for di in 0..d {
                let idx = (ci * d + di) * hw + p;
                let (a, b) = (x.data()[idx], xhat.data()[idx]);
                s += a * b;
                na += a * a;
                nb += b * b;
            }
            let den = match variant {
                SpectralVariant::Cosine => (na.sqrt() * nb.sqrt()).max(eps),
                SpectralVariant::SquaredNorms => na * nb + eps,
            };
            acc += s / den;
        }
    }
    Ok(T::one() - acc / T::from_usize(c * hw).unwrap())
}

/// Gradients of [`spectral_consistency`] with respect to `x` and `xhat`.
pub fn spectral_grads<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, variant: SpectralVariant) -> (Vec<T>, Vec<T>) {
    let ([c, d, _, _], hw) = spectra(x);
    let eps = T::c(SPECTRAL_EPS);
    let scale = -T::one() / T::from_usize(c * hw).unwrap();
    let mut gx = vec![T::zero(); x.len()];
    let mut gy = vec![T::zero(); x.len()];
    let two = T::c(2.0);
    for ci in 0..c {
        for p in 0..hw {
            let idx = |di: usize| (ci * d + di) * hw + p;
            let (mut s, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
            for di in 0..d {
                let (a, b) = (x.data()[idx(di)], xhat.data()[idx(di)]);
                s += a * b;
                na2 += a * a;
                nb2 += b * b;
            }
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            for di in 0..d {
                let i = idx(di);
                let (a, b) = (x.data()[i], xhat.data()[i]);
                // d(s/den) = ds/den - s/den^2 dden
                let (da, db) = match variant {
                    SpectralVariant::Cosine => {
                        let prod = na * nb;
                        let den = prod.max(eps);
                        let active = prod > eps;
                        let dden_a = if active { nb * a / na } else { T::zero() };
                        let dden_b = if active { na * b / nb } else { T::zero() };
                        (b / den - s / (den * den) * dden_a, a / den - s / (den * den) * dden_b)
                    }
                    SpectralVariant::SquaredNorms => {
                        let den = na2 * nb2 + eps;
                        (b / den - s / (den * den) * two * a * nb2, a / den - s / (den * den) * two * b * na2)
                    }
                };
                gx[i] = scale * da;
                gy[i] = scale * db;
            }
        }
    }
    (gx, gy)
}

/// Per-term values of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub charbonnier: f64,
    pub kl: f64,
    pub spectral: f64,
    pub lambda_k: f64,
    pub lambda_s: f64,
}

impl LossBreakdown {
    pub fn recombined(&self) -> f64 {
        self.charbonnier + self.lambda_k * self.kl + self.lambda_s * self.spectral
    }
}

/// `L_c(x, xhat) + lambda_k KL(hist(y_e) || hist(yhat)) + lambda_s L_s(x, xhat)`.
pub fn total_loss<T: Scalar>(
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    yhat: &Tensor<T>,
    y_e: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    same_shape(x, xhat)?;
    same_shape(yhat, y_e)?;
    let c = charbonnier(x, xhat, cfg.epsilon)?.to_f64_lossy();
    let spec = cfg.histogram();
    let (p, _) = soft_histogram(y_e.data(), &spec)?;
    let (q, _) = soft_histogram(yhat.data(), &spec)?;
    let k = kl_divergence(&p, &q)?.to_f64_lossy();
    let s = spectral_consistency(x, xhat, cfg.spectral_variant)?.to_f64_lossy();
    let mut out = LossBreakdown { total: 0.0, charbonnier: c, kl: k, spectral: s, lambda_k: cfg.lambda_k, lambda_s: cfg.lambda_s };
    out.total = out.recombined();
    Ok(out)
}
