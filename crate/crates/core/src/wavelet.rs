//! Band-wise 2-D discrete wavelet transforms, high-frequency guidance extraction and the
//! wavelet-domain 3-D convolution used to build multi-scale guidance for the implicit-noise
//! network.
//!
//! Transforms are single-level, separable and periodized. With an orthonormal filter pair the
//! forward transform is an orthogonal matrix, so its adjoint is its inverse; the autograd
//! engine relies on that for gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::Padding;
use crate::error::{arg, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Orthonormal wavelet families.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    #[default]
    Haar,
    Db2,
}

impl Wavelet {
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "db2" => Ok(Wavelet::Db2),
            other => Err(arg(format!("unknown wavelet '{other}' (expected haar or db2)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Wavelet::Haar => "haar",
            Wavelet::Db2 => "db2",
        }
    }

    /// Analysis low-pass filter.
    pub fn lowpass<T: Scalar>(&self) -> Vec<T> {
        match self {
            Wavelet::Haar => vec![T::FRAC_1_SQRT_2(), T::FRAC_1_SQRT_2()],
            Wavelet::Db2 => {
                let s3 = 3f64.sqrt();
                let norm = 4.0 * 2f64.sqrt();
                [1.0 + s3, 3.0 + s3, 3.0 - s3, 1.0 - s3].iter().map(|v| T::c(v / norm)).collect()
            }
        }
    }

    /// Quadrature-mirror high-pass filter, `g[n] = (-1)^n h[L-1-n]`.
    pub fn highpass<T: Scalar>(&self) -> Vec<T> {
        let h = self.lowpass::<T>();
        let l = h.len();
        (0..l).map(|n| if n % 2 == 0 { h[l - 1 - n] } else { -h[l - 1 - n] }).collect()
    }
}

struct FilterPair<T> {
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Scalar> FilterPair<T> {
    fn new(w: Wavelet) -> Self {
        Self { lo: w.lowpass(), hi: w.highpass() }
    }

    /// 1-D analysis of `n` samples read with `stride`, writing `n/2` approximation then `n/2`
    /// detail coefficients to `out`.
    fn analyze(&self, src: &[T], stride: usize, n: usize, out: &mut [T]) {
        let half = n / 2;
        for k in 0..half {
            let mut a = T::zero();
            let mut d = T::zero();
            for (t, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = src[((2 * k + t) % n) * stride];
                a += h * v;
                d += g * v;
            }
            out[k] = a;
            out[half + k] = d;
        }
    }

    /// Transpose (= inverse) of [`Self::analyze`], writing `n` samples with `stride`.
    fn synthesize(&self, coeffs: &[T], n: usize, dst: &mut [T], stride: usize) {
        let half = n / 2;
        for i in 0..n {
            dst[i * stride] = T::zero();
        }
        for k in 0..half {
            let a = coeffs[k];
            let d = coeffs[half + k];
            for (t, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                dst[((2 * k + t) % n) * stride] += h * a + g * d;
            }
        }
    }
}

/// Forward transform of `planes` independent `h x w` planes (both even).
///
/// Output has the layout `[4, planes, h/2, w/2]` with subbands ordered LL, LH, HL, HH, where
/// LH is low-pass along rows and high-pass along columns (horizontal detail).
pub fn dwt_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, wavelet: Wavelet) -> Vec<T> {
    assert!(h % 2 == 0 && w % 2 == 0, "dwt_planes needs even dims");
    let fp = FilterPair::new(wavelet);
    let (h2, w2) = (h / 2, w / 2);
    let sub = planes * h2 * w2;
    let mut out = vec![T::zero(); 4 * sub];
    let mut tmp = vec![T::zero(); h * w];
    let mut line = vec![T::zero(); h.max(w)];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            fp.analyze(&src[r * w..], 1, w, &mut tmp[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            fp.analyze(&tmp[c..], w, h, &mut line[..h]);
            for r in 0..h {
                tmp[r * w + c] = line[r];
            }
        }
        // tmp quadrants: [rows lo|hi] x [cols lo|hi]
        for r in 0..h2 {
            for c in 0..w2 {
                let o = (p * h2 + r) * w2 + c;
                out[o] = tmp[r * w + c];
                out[sub + o] = tmp[r * w + w2 + c];
                out[2 * sub + o] = tmp[(h2 + r) * w + c];
                out[3 * sub + o] = tmp[(h2 + r) * w + w2 + c];
            }
        }
    }
    out
}

/// Inverse of [`dwt_planes`]; `h`, `w` are the reconstructed plane dims.
pub fn idwt_planes<T: Scalar>(coeffs: &[T], planes: usize, h: usize, w: usize, wavelet: Wavelet) -> Vec<T> {
    assert!(h % 2 == 0 && w % 2 == 0, "idwt_planes needs even dims");
    let fp = FilterPair::new(wavelet);
    let (h2, w2) = (h / 2, w / 2);
    let sub = planes * h2 * w2;
    let mut out = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * w];
    let mut line = vec![T::zero(); h.max(w)];
    let mut col = vec![T::zero(); h];
    for p in 0..planes {
        for r in 0..h2 {
            for c in 0..w2 {
                let o = (p * h2 + r) * w2 + c;
                tmp[r * w + c] = coeffs[o];
                tmp[r * w + w2 + c] = coeffs[sub + o];
                tmp[(h2 + r) * w + c] = coeffs[2 * sub + o];
                tmp[(h2 + r) * w + w2 + c] = coeffs[3 * sub + o];
            }
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = tmp[r * w + c];
            }
            fp.synthesize(&col, h, &mut tmp[c..], w);
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            line[..w].copy_from_slice(&tmp[r * w..(r + 1) * w]);
            fp.synthesize(&line[..w], w, &mut dst[r * w..], 1);
        }
    }
    out
}

/// Single-level decomposition of a `D x H x W` cube, one 2-D transform per band.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T> {
    /// LL subband, `D x H'/2 x W'/2` where `H'`, `W'` are the padded dims.
    pub low: Tensor<T>,
    /// LH, HL, HH subbands.
    pub highs: [Tensor<T>; 3],
    pub wavelet: Wavelet,
    /// Whether a row / column was appended to make the source dims even.
    pub padded: (bool, bool),
}

impl<T: Scalar> WaveletPyramid<T> {
    pub fn wavelet_name(&self) -> &'static str {
        self.wavelet.name()
    }

    pub fn subbands(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.low).chain(self.highs.iter())
    }
}

/// Appends one symmetric (edge-duplicating) row and/or column to odd-sized planes.
fn pad_even<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (h + h % 2, w + w % 2);
    if hp == h && wp == w {
        return (x.to_vec(), h, w);
    }
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for r in 0..hp {
            let sr = r.min(h - 1);
            for c in 0..wp {
                out[(p * hp + r) * wp + c] = x[(p * h + sr) * w + c.min(w - 1)];
            }
        }
    }
    (out, hp, wp)
}

fn check_cube<T: Scalar>(cube: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match cube.shape() {
        [d, h, w] if *h >= 1 && *w >= 1 && *d >= 1 => Ok((*d, *h, *w)),
        other => Err(arg(format!("expected a non-empty D x H x W tensor, got {other:?}"))),
    }
}

/// Forward band-wise transform of a `D x H x W` tensor.
pub fn dwt2_bandwise<T: Scalar>(cube: &Tensor<T>, wavelet: Wavelet) -> Result<WaveletPyramid<T>> {
    let (d, h, w) = check_cube(cube)?;
    let (padded, hp, wp) = pad_even(cube.data(), d, h, w);
    let coeffs = dwt_planes(&padded, d, hp, wp, wavelet);
    let shape = [d, hp / 2, wp / 2];
    let sub = d * (hp / 2) * (wp / 2);
    let band = |i: usize| Tensor::from_vec(&shape, coeffs[i * sub..(i + 1) * sub].to_vec());
    Ok(WaveletPyramid {
        low: band(0)?,
        highs: [band(1)?, band(2)?, band(3)?],
        wavelet,
        padded: (hp != h, wp != w),
    })
}

/// Inverse of [`dwt2_bandwise`], stripping any recorded padding.
pub fn idwt2_bandwise<T: Scalar>(pyr: &WaveletPyramid<T>) -> Result<Tensor<T>> {
    let shape = pyr.low.shape().to_vec();
    if shape.len() != 3 || pyr.highs.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(arg("wavelet subbands have inconsistent shapes"));
    }
    let (d, h2, w2) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = (2 * h2, 2 * w2);
    let mut coeffs = Vec::with_capacity(4 * pyr.low.len());
    for b in pyr.subbands() {
        coeffs.extend_from_slice(b.data());
    }
    let full = idwt_planes(&coeffs, d, hp, wp, pyr.wavelet);
    let (h, w) = (hp - pyr.padded.0 as usize, wp - pyr.padded.1 as usize);
    if h == hp && w == wp {
        return Tensor::from_vec(&[d, h, w], full);
    }
    let mut out = Vec::with_capacity(d * h * w);
    for p in 0..d {
        for r in 0..h {
            out.extend_from_slice(&full[(p * hp + r) * wp..(p * hp + r) * wp + w]);
        }
    }
    Tensor::from_vec(&[d, h, w], out)
}

/// High-frequency magnitude guide: decompose, zero the LL subband, invert, take `abs`.
pub fn highfreq_guidance<T: Scalar>(noisy: &Tensor<T>, wavelet: Wavelet) -> Result<Tensor<T>> {
    let mut pyr = dwt2_bandwise(noisy, wavelet)?;
    pyr.low = Tensor::zeros(pyr.low.shape());
    Ok(idwt2_bandwise(&pyr)?.map(|v| v.abs()))
}

/// Number of wavelet subbands stacked along the channel axis inside [`wtconv3d`].
pub const SUBBANDS: usize = 4;

/// Parameters of one wavelet-domain convolution acting on `channels`-channel tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct WtConvParams<T> {
    /// `[4C, 4C, 3, 3, 3]` kernel over the stacked subbands.
    pub kernel: Tensor<T>,
    /// Per-subband scaling, `[4]`.
    pub scale: Tensor<T>,
}

impl<T: Scalar> WtConvParams<T> {
    /// Pass-through initialization: identity kernel (unit centre tap) and unit scaling.
    pub fn identity(channels: usize) -> Self {
        let c = SUBBANDS * channels;
        let mut kernel = Tensor::zeros(&[c, c, 3, 3, 3]);
        for i in 0..c {
            kernel.data_mut()[(i * c + i) * 27 + 13] = T::one();
        }
        Self { kernel, scale: Tensor::full(&[SUBBANDS], T::one()) }
    }
}

/// Wavelet-domain 3-D convolution on the tape.
///
/// `g` is `[C, D, H, W]`. Odd spatial dims are edge-padded before the transform and cropped
/// after the inverse, so the output always has the input shape.
pub fn wtconv3d_var<T: Scalar>(tape: &mut Tape<T>, g: Var, kernel: Var, scale: Var, wavelet: Wavelet) -> Var {
    let [_, _, h, w] = tape.value(g).dims4();
    let (hp, wp) = (h + h % 2, w + w % 2);
    let padded = if (hp, wp) != (h, w) {
        let hmap: Vec<usize> = (0..hp).map(|i| i.min(h - 1)).collect();
        let wmap: Vec<usize> = (0..wp).map(|i| i.min(w - 1)).collect();
        tape.gather_spatial(g, hmap, wmap)
    } else {
        g
    };
    let sub = tape.dwt(padded, wavelet);
    let mixed = tape.conv3d(sub, kernel, None, Padding::Reflect);
    let scaled = tape.scale_groups(mixed, scale);
    let back = tape.idwt(scaled, wavelet);
    if (hp, wp) != (h, w) {
        tape.gather_spatial(back, (0..h).collect(), (0..w).collect())
    } else {
        back
    }
}

/// Convenience evaluation of [`wtconv3d_var`] outside of training. `g` is `D x H x W` or
/// `C x D x H x W`; the output has the same shape.
pub fn wtconv3d<T: Scalar>(g: &Tensor<T>, params: &WtConvParams<T>, wavelet: Wavelet) -> Result<Tensor<T>> {
    if !g.all_finite() {
        return Err(arg("wtconv3d input must be finite"));
    }
    let shape = g.shape().to_vec();
    let [c, d, h, w] = g.dims4();
    let expect = SUBBANDS * c;
    if params.kernel.shape() != [expect, expect, 3, 3, 3] || params.scale.shape() != [SUBBANDS] {
        return Err(arg(format!("wtconv3d parameters do not match {c} input channels")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(g.clone().reshape(&[c, d, h, w])?);
    let k = tape.constant(params.kernel.clone());
    let s = tape.constant(params.scale.clone());
    let y = wtconv3d_var(&mut tape, x, k, s, wavelet);
    tape.value(y).clone().reshape(&shape)
}

/// Multi-scale guidance: `G1` at full resolution, then each following scale is the 2x2
/// average-pooled previous guide passed through its own wavelet convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSet<T> {
    pub ghat: Tensor<T>,
    /// `[C, D, H_i, W_i]` tensors, finest first.
    pub scales: Vec<Tensor<T>>,
}

/// Tape version of the guidance chain; returns one var per scale, finest first.
pub fn multiscale_guidance_vars<T: Scalar>(
    tape: &mut Tape<T>,
    ghat: Var,
    params: &[(Var, Var)],
    wavelet: Wavelet,
) -> Result<Vec<Var>> {
    let [_, _, h, w] = tape.value(ghat).dims4();
    let levels = params.len();
    if levels == 0 {
        return Err(arg("guidance needs at least one scale"));
    }
    let factor = 1usize << (levels - 1);
    if h % factor != 0 || w % factor != 0 || h / factor < 2 || w / factor < 2 {
        return Err(arg(format!(
            "spatial dims {h}x{w} too small or not divisible for {levels} guidance scales"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = ghat;
    for (i, &(k, s)) in params.iter().enumerate() {
        if i > 0 {
            current = tape.avg_pool2(current);
        }
        current = wtconv3d_var(tape, current, k, s, wavelet);
        out.push(current);
    }
    Ok(out)
}

/// Evaluates the guidance chain for a `D x H x W` guide with fixed parameters.
pub fn multiscale_guidance<T: Scalar>(
    ghat: &Tensor<T>,
    params: &[WtConvParams<T>],
    wavelet: Wavelet,
) -> Result<GuidanceSet<T>> {
    let (d, h, w) = check_cube(ghat)?;
    let mut tape = Tape::new();
    let g = tape.constant(ghat.clone().reshape(&[1, d, h, w])?);
    let vars: Vec<(Var, Var)> = params
        .iter()
        .map(|p| (tape.constant(p.kernel.clone()), tape.constant(p.scale.clone())))
        .collect();
    let scales = multiscale_guidance_vars(&mut tape, g, &vars, wavelet)?;
    Ok(GuidanceSet { ghat: ghat.clone(), scales: scales.iter().map(|&v| tape.value(v).clone()).collect() })
}
