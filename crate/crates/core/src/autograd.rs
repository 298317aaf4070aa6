//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of its inputs.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients only into nodes
//! that require them, so constants (inputs, frozen parameters) still pass gradients through
//! to upstream parameters without having their own gradients computed.

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeom, Padding};
use crate::losses::{self, Distribution, HistogramSpec, SpectralVariant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{dwt_planes, idwt_planes, Wavelet};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Dwt { x: Var, wavelet: Wavelet },
    Idwt { x: Var, wavelet: Wavelet },
    ScaleGroups { x: Var, s: Var },
    GatherSpatial { x: Var, hmap: Vec<usize>, wmap: Vec<usize> },
    Charbonnier { x: Var, y: Var, eps: f64 },
    Spectral { x: Var, y: Var, variant: SpectralVariant },
    HistKl { p_src: Var, q_src: Var, spec: HistogramSpec, p: Distribution<T>, p_mass: T, q: Distribution<T>, q_mass: T },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same-size 3-D convolution; `w` is `[cout, cin, kd, kh, kw]` with odd kernel sizes.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Var {
        let [cin, d, h, wd] = self.value(x).dims4();
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 5, "conv weight must be 5-D");
        assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {}", ws[1], cin);
        let geom = ConvGeom { cin, cout: ws[0], dims: [d, h, wd], kernel: [ws[2], ws[3], ws[4]], padding };
        let out = conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.cout, d, h, wd], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv3d { x, w, b, geom }, &parents)
    }

    /// Per-channel normalization over all voxels followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        let s = d * h * w;
        let n = T::from_usize(s).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(c);
        let mut inv_stds = Vec::with_capacity(c);
        for ci in 0..c {
            let chunk = &xv[ci * s..(ci + 1) * s];
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv_std = T::one() / (var + T::c(NORM_EPS)).sqrt();
            for (o, &v) in out[ci * s..(ci + 1) * s].iter_mut().zip(chunk) {
                *o = g[ci] * (v - mean) * inv_std + b[ci];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let value = Tensor::from_vec(&[c, d, h, w], out).unwrap();
        self.push(value, Op::InstanceNorm { x, gamma, beta, mean: means, inv_std: inv_stds }, &[x, gamma, beta])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::c(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// 2x2 spatial average pooling with stride 2 (even spatial dims required).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (h2, w2) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::c(0.25);
        let mut out = Vec::with_capacity(c * d * h2 * w2);
        for p in 0..c * d {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for r in 0..h2 {
                for q in 0..w2 {
                    let i = 2 * r * w + 2 * q;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::from_vec(&[c, d, h2, w2], out).unwrap();
        self.push(value, Op::AvgPool2 { x }, &[x])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * d * h2 * w2];
        for p in 0..c * d {
            for r in 0..h2 {
                for q in 0..w2 {
                    out[(p * h2 + r) * w2 + q] = xv[(p * h + r / 2) * w + q / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[c, d, h2, w2], out).unwrap();
        self.push(value, Op::Upsample2 { x }, &[x])
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let [ca, d, h, w] = self.value(a).dims4();
        let [cb, d2, h2, w2] = self.value(b).dims4();
        assert_eq!((d, h, w), (d2, h2, w2), "concat spatial mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, d, h, w], data).unwrap();
        self.push(value, Op::Concat { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    /// Band-wise spatial DWT: `[C, D, H, W]` to `[4C, D, H/2, W/2]` (subband-major).
    pub fn dwt(&mut self, x: Var, wavelet: Wavelet) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        let out = dwt_planes(self.value(x).data(), c * d, h, w, wavelet);
        let value = Tensor::from_vec(&[4 * c, d, h / 2, w / 2], out).unwrap();
        self.push(value, Op::Dwt { x, wavelet }, &[x])
    }

    /// Inverse of [`Tape::dwt`].
    pub fn idwt(&mut self, x: Var, wavelet: Wavelet) -> Var {
        let [c4, d, h2, w2] = self.value(x).dims4();
        assert_eq!(c4 % 4, 0, "idwt needs a multiple of 4 channels");
        let out = idwt_planes(self.value(x).data(), c4 / 4 * d, 2 * h2, 2 * w2, wavelet);
        let value = Tensor::from_vec(&[c4 / 4, d, 2 * h2, 2 * w2], out).unwrap();
        self.push(value, Op::Idwt { x, wavelet }, &[x])
    }

    /// Splits channels into `len(s)` equal groups and multiplies group `g` by `s[g]`.
    pub fn scale_groups(&mut self, x: Var, s: Var) -> Var {
        let groups = self.value(s).len();
        let [c, ..] = self.value(x).dims4();
        assert_eq!(c % groups, 0, "channels not divisible into scale groups");
        let chunk = self.value(x).len() / groups;
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (g, part) in value.data_mut().chunks_mut(chunk).enumerate() {
            part.iter_mut().for_each(|v| *v *= sv[g]);
        }
        self.push(value, Op::ScaleGroups { x, s }, &[x, s])
    }

    /// Builds `out[.., r, q] = x[.., hmap[r], wmap[q]]`; covers crop, edge pad and flips.
    pub fn gather_spatial(&mut self, x: Var, hmap: Vec<usize>, wmap: Vec<usize>) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        assert!(hmap.iter().all(|&i| i < h) && wmap.iter().all(|&i| i < w));
        let xv = self.value(x).data();
        let (ho, wo) = (hmap.len(), wmap.len());
        let mut out = Vec::with_capacity(c * d * ho * wo);
        for p in 0..c * d {
            for &r in &hmap {
                let row = &xv[(p * h + r) * w..(p * h + r + 1) * w];
                out.extend(wmap.iter().map(|&q| row[q]));
            }
        }
        let value = Tensor::from_vec(&[c, d, ho, wo], out).unwrap();
        self.push(value, Op::GatherSpatial { x, hmap, wmap }, &[x])
    }

    pub fn charbonnier(&mut self, x: Var, y: Var, eps: f64) -> Var {
        let v = losses::charbonnier(self.value(x), self.value(y), eps).expect("charbonnier shapes");
        self.push(Tensor::scalar(v), Op::Charbonnier { x, y, eps }, &[x, y])
    }

    pub fn spectral(&mut self, x: Var, y: Var, variant: SpectralVariant) -> Var {
        let v = losses::spectral_consistency(self.value(x), self.value(y), variant).expect("spectral shapes");
        self.push(Tensor::scalar(v), Op::Spectral { x, y, variant }, &[x, y])
    }

    /// `KL(hist(p_src) || hist(q_src))` with soft histograms.
    pub fn hist_kl(&mut self, p_src: Var, q_src: Var, spec: HistogramSpec) -> crate::Result<Var> {
        let (p, p_mass) = losses::soft_histogram(self.value(p_src).data(), &spec)?;
        let (q, q_mass) = losses::soft_histogram(self.value(q_src).data(), &spec)?;
        let v = losses::kl_divergence(&p, &q)?;
        Ok(self.push(Tensor::scalar(v), Op::HistKl { p_src, q_src, spec, p, p_mass, q, q_mass }, &[p_src, q_src]))
    }

    /// `sum_i w_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::c(w))).collect();
        let total = terms.iter().map(|&(v, w)| w * self.value(v).data()[0]).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum { terms }, &parents)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape();
        let t = Tensor::from_vec(shape, data).unwrap();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let r = conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    b.map_or(false, |b| self.needs(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dweight {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.dbias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                let [c, d, h, w] = self.value(*x).dims4();
                let s = d * h * w;
                let n = T::from_usize(s).unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let xs = &xv[ci * s..(ci + 1) * s];
                    let gs = &gd[ci * s..(ci + 1) * s];
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&xi, &gi) in xs.iter().zip(gs) {
                        sum_g += gi;
                        sum_gx += gi * (xi - mu) * is;
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let k = gam[ci] * is / n;
                    for ((o, &xi), &gi) in dx[ci * s..(ci + 1) * s].iter_mut().zip(xs).zip(gs) {
                        let xh = (xi - mu) * is;
                        *o = k * (n * gi - sum_g - xh * sum_gx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x } => {
                let [c, d, h, w] = self.value(*x).dims4();
                let (h2, w2) = (h / 2, w / 2);
                let quarter = T::c(0.25);
                let mut dx = vec![T::zero(); c * d * h * w];
                for p in 0..c * d {
                    for r in 0..h2 {
                        for q in 0..w2 {
                            let gv = gd[(p * h2 + r) * w2 + q] * quarter;
                            let i = p * h * w + 2 * r * w + 2 * q;
                            dx[i] = gv;
                            dx[i + 1] = gv;
                            dx[i + w] = gv;
                            dx[i + w + 1] = gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let [c, d, h, w] = self.value(*x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * d * h * w];
                for p in 0..c * d {
                    for r in 0..h2 {
                        for q in 0..w2 {
                            dx[(p * h + r / 2) * w + q / 2] += gd[(p * h2 + r) * w2 + q];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, gd[..na].to_vec());
                self.accumulate(grads, *b, gd[na..].to_vec());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Dwt { x, wavelet } => {
                // orthonormal: adjoint == inverse
                let [c, d, h, w] = self.value(*x).dims4();
                self.accumulate(grads, *x, idwt_planes(gd, c * d, h, w, *wavelet));
            }
            Op::Idwt { x, wavelet } => {
                let [c4, d, h2, w2] = self.value(*x).dims4();
                self.accumulate(grads, *x, dwt_planes(gd, c4 / 4 * d, 2 * h2, 2 * w2, *wavelet));
            }
            Op::ScaleGroups { x, s } => {
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let chunk = xv.len() / sv.len();
                if self.needs(*x) {
                    let dx = gd.chunks(chunk).enumerate().flat_map(|(gi, part)| part.iter().map(move |&v| v * sv[gi])).collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let ds = gd.chunks(chunk).zip(xv.chunks(chunk)).map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum()).collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::GatherSpatial { x, hmap, wmap } => {
                let [c, d, h, w] = self.value(*x).dims4();
                let (ho, wo) = (hmap.len(), wmap.len());
                let mut dx = vec![T::zero(); c * d * h * w];
                for p in 0..c * d {
                    for (ri, &r) in hmap.iter().enumerate() {
                        let grow = &gd[(p * ho + ri) * wo..(p * ho + ri + 1) * wo];
                        let base = (p * h + r) * w;
                        for (&gv, &q) in grow.iter().zip(wmap) {
                            dx[base + q] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Charbonnier { x, y, eps } => {
                let g0 = gd[0];
                let dy: Vec<T> = losses::charbonnier_grad(self.value(*x), self.value(*y), *eps).into_iter().map(|v| v * g0).collect();
                if self.needs(*x) {
                    self.accumulate(grads, *x, dy.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *y, dy);
            }
            Op::Spectral { x, y, variant } => {
                let g0 = gd[0];
                let (gx, gy) = losses::spectral_grads(self.value(*x), self.value(*y), *variant);
                self.accumulate(grads, *x, gx.into_iter().map(|v| v * g0).collect());
                self.accumulate(grads, *y, gy.into_iter().map(|v| v * g0).collect());
            }
            Op::HistKl { p_src, q_src, spec, p, p_mass, q, q_mass } => {
                let g0 = gd[0];
                let (gp, gq) = losses::kl_grads(p, q);
                if self.needs(*p_src) {
                    let gp: Vec<T> = gp.into_iter().map(|v| v * g0).collect();
                    let dv = losses::soft_histogram_vjp(self.value(*p_src).data(), spec, p, *p_mass, &gp);
                    self.accumulate(grads, *p_src, dv);
                }
                if self.needs(*q_src) {
                    let gq: Vec<T> = gq.into_iter().map(|v| v * g0).collect();
                    let dv = losses::soft_histogram_vjp(self.value(*q_src).data(), spec, q, *q_mass, &gq);
                    self.accumulate(grads, *q_src, dv);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, vec![gd[0] * w]);
                }
            }
        }
    }
}
