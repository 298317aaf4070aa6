//! The two residual denoisers.
//!
//! Both networks share a small 3-D U-Net backbone acting on the cube as a one-channel volume
//! `[1, D, H, W]`. Downsampling is spatial only, so the band count is unconstrained. EMNet is
//! the plain backbone. IMNet additionally fuses a wavelet guidance tensor into every decoder
//! scale (bottleneck included) by concatenation and a 1x1x1 convolution.
//!
//! Networks predict a residual with a zero-initialized head and return `input - residual`, so
//! both are exact identities before training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::conv::Padding;
use crate::error::{arg, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{highfreq_guidance, multiscale_guidance_vars, GuidanceSet, Wavelet, WtConvParams};

/// Slope of the leaky rectifier used inside conv blocks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Shape of a U-Net backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub name: String,
    pub base_channels: usize,
    /// Number of resolution scales, bottleneck included.
    pub depth: usize,
    pub kernel: [usize; 3],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { name: "unet3d".into(), base_channels: 16, depth: 3, kernel: [3, 3, 3] }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(arg(format!("backbone depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(arg(format!("backbone base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(arg(format!("kernel sizes must be odd, got {:?}", self.kernel)));
        }
        if self.name != "unet3d" {
            return Err(arg(format!("unknown backbone '{}' (available: unet3d)", self.name)));
        }
        Ok(())
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Wavelet guidance attached to IMNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub wavelet: Wavelet,
    /// Channels of each guidance tensor.
    pub channels: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { wavelet: Wavelet::Haar, channels: 1 }
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|e| e.0 == name) {
            Some(e) => e.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|e| e.0 == name).map(|e| &mut e.1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.1.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

/// One network: its shape, optional guidance branch, parameters and freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: BackboneSpec,
    pub guidance: Option<GuidanceConfig>,
    pub params: ParamSet<T>,
    pub frozen: bool,
}

/// Parameters of the whole pipeline; the two collections are disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub emnet: Network<T>,
    pub imnet: Network<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(spec: &BackboneSpec, guidance: Option<GuidanceConfig>, seed: u64) -> Result<Self> {
        Ok(Self {
            emnet: build_reference_backbone(spec, seed)?,
            imnet: build_imnet(spec, guidance, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_vec(shape, (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect()).unwrap()
    }

    /// He initialization for a leaky-rectified conv.
    fn conv<T: Scalar>(&mut self, cout: usize, cin: usize, k: [usize; 3]) -> Tensor<T> {
        let fan_in = (cin * k.iter().product::<usize>()) as f64;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        self.normal(&[cout, cin, k[0], k[1], k[2]], gain / fan_in.sqrt())
    }
}

fn add_block<T: Scalar>(p: &mut ParamSet<T>, init: &mut Init, prefix: &str, cin: usize, cout: usize, k: [usize; 3]) {
    p.insert(format!("{prefix}.conv_a.weight"), init.conv(cout, cin, k));
    p.insert(format!("{prefix}.norm_a.gamma"), Tensor::full(&[cout], T::one()));
    p.insert(format!("{prefix}.norm_a.beta"), Tensor::zeros(&[cout]));
    p.insert(format!("{prefix}.conv_b.weight"), init.conv(cout, cout, k));
    p.insert(format!("{prefix}.norm_b.gamma"), Tensor::full(&[cout], T::one()));
    p.insert(format!("{prefix}.norm_b.beta"), Tensor::zeros(&[cout]));
}

fn backbone_params<T: Scalar>(spec: &BackboneSpec, guidance: Option<GuidanceConfig>, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut p = ParamSet::new();
    let k = spec.kernel;
    for s in 0..spec.depth {
        let cin = if s == 0 { 1 } else { spec.channels(s - 1) };
        add_block(&mut p, &mut init, &format!("enc{s}"), cin, spec.channels(s), k);
    }
    for s in (0..spec.depth - 1).rev() {
        add_block(&mut p, &mut init, &format!("dec{s}"), spec.channels(s) + spec.channels(s + 1), spec.channels(s), k);
    }
    if let Some(g) = guidance {
        if g.channels == 0 {
            return Err(arg("guidance needs at least one channel"));
        }
        for s in 0..spec.depth {
            let c = spec.channels(s);
            let wt = WtConvParams::<T>::identity(g.channels);
            p.insert(format!("guide{s}.kernel"), wt.kernel);
            p.insert(format!("guide{s}.scale"), wt.scale);
            // identity on the features, random on the guidance channels
            let mut fuse = Tensor::zeros(&[c, c + g.channels, 1, 1, 1]);
            let extra: Tensor<T> = init.normal(&[c, g.channels], 1.0 / ((c + g.channels) as f64).sqrt());
            for o in 0..c {
                fuse.data_mut()[o * (c + g.channels) + o] = T::one();
                for j in 0..g.channels {
                    fuse.data_mut()[o * (c + g.channels) + c + j] = extra.data()[o * g.channels + j];
                }
            }
            p.insert(format!("fuse{s}.weight"), fuse);
            p.insert(format!("fuse{s}.bias"), Tensor::zeros(&[c]));
        }
    }
    p.insert("head.weight", Tensor::zeros(&[1, spec.channels(0), 1, 1, 1]));
    p.insert("head.bias", Tensor::zeros(&[1]));
    Ok(p)
}

/// Plain U-Net (EMNet role), deterministic per seed.
pub fn build_reference_backbone<T: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<Network<T>> {
    Ok(Network { spec: spec.clone(), guidance: None, params: backbone_params(spec, None, seed)?, frozen: false })
}

/// U-Net with guidance fusion (IMNet role); `None` builds the unguided ablation variant.
pub fn build_imnet<T: Scalar>(spec: &BackboneSpec, guidance: Option<GuidanceConfig>, seed: u64) -> Result<Network<T>> {
    Ok(Network { spec: spec.clone(), guidance, params: backbone_params(spec, guidance, seed)?, frozen: false })
}

/// A network's parameters registered on a tape.
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Pairs parameter names with vars already on a tape.
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Self {
        Self { names, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; `None` for parameters that did not receive one.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl<T: Scalar> Network<T> {
    /// Registers the parameters as trainable leaves, or as constants when frozen.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let mut names = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (n, t) in self.params.iter() {
            names.push(n.to_string());
            vars.push(if self.frozen { tape.constant(t.clone()) } else { tape.param(t.clone()) });
        }
        Bound { names, vars }
    }

    /// Registers every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let names = self.params.names().map(str::to_string).collect();
        let vars = self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        Bound { names, vars }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { spec: self.spec.clone(), guidance: self.guidance, params: self.params.cast(), frozen: self.frozen }
    }
}

fn block<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Var {
    let mut h = x;
    for part in ["a", "b"] {
        h = tape.conv3d(h, b.var(&format!("{prefix}.conv_{part}.weight")), None, Padding::Zero);
        h = tape.instance_norm(h, b.var(&format!("{prefix}.norm_{part}.gamma")), b.var(&format!("{prefix}.norm_{part}.beta")));
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    h
}

fn fuse<T: Scalar>(tape: &mut Tape<T>, b: &Bound, s: usize, h: Var, guidance: Option<&[Var]>) -> Var {
    match guidance {
        Some(g) => {
            let cat = tape.concat(h, g[s]);
            tape.conv3d(cat, b.var(&format!("fuse{s}.weight")), Some(b.var(&format!("fuse{s}.bias"))), Padding::Zero)
        }
        None => h,
    }
}

/// Core U-Net on `[1, D, H, W]` with spatial dims divisible by the spec's multiple; returns
/// `x - residual`.
fn unet<T: Scalar>(tape: &mut Tape<T>, net: &Network<T>, b: &Bound, x: Var, guidance: Option<&[Var]>) -> Var {
    let depth = net.spec.depth;
    let mut skips = Vec::with_capacity(depth);
    let mut h = x;
    for s in 0..depth {
        if s > 0 {
            h = tape.avg_pool2(h);
        }
        h = block(tape, b, &format!("enc{s}"), h);
        skips.push(h);
    }
    h = fuse(tape, b, depth - 1, h, guidance);
    for s in (0..depth - 1).rev() {
        let up = tape.upsample2(h);
        let cat = tape.concat(skips[s], up);
        h = block(tape, b, &format!("dec{s}"), cat);
        h = fuse(tape, b, s, h, guidance);
    }
    let residual = tape.conv3d(h, b.var("head.weight"), Some(b.var("head.bias")), Padding::Zero);
    tape.sub(x, residual)
}

fn reflect_map(n: usize, target: usize) -> Vec<usize> {
    let period = 2 * (n.max(2) - 1);
    (0..target)
        .map(|i| {
            if n == 1 {
                return 0;
            }
            let j = i % period;
            if j >= n {
                period - j
            } else {
                j
            }
        })
        .collect()
}

/// Reflect-pads `[C, D, H, W]` spatially up to a multiple; returns the padded var and the
/// original size.
fn pad_to_multiple<T: Scalar>(tape: &mut Tape<T>, x: Var, multiple: usize) -> (Var, (usize, usize)) {
    let [_, _, h, w] = tape.value(x).dims4();
    let (hp, wp) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (hp, wp) == (h, w) {
        return (x, (h, w));
    }
    (tape.gather_spatial(x, reflect_map(h, hp), reflect_map(w, wp)), (h, w))
}

fn crop<T: Scalar>(tape: &mut Tape<T>, x: Var, size: (usize, usize)) -> Var {
    let [_, _, h, w] = tape.value(x).dims4();
    if (h, w) == size {
        return x;
    }
    tape.gather_spatial(x, (0..size.0).collect(), (0..size.1).collect())
}

fn check_input<T: Scalar>(tape: &Tape<T>, net: &Network<T>, x: Var) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(arg(format!("network input must be [1, D, H, W], got {shape:?}")));
    }
    let m = net.spec.spatial_multiple();
    if shape[2] < m || shape[3] < m {
        return Err(arg(format!(
            "spatial size {}x{} too small for depth {} (need at least {m})",
            shape[2], shape[3], net.spec.depth
        )));
    }
    Ok(())
}

/// EMNet on the tape. `x` is `[1, D, H, W]`; sizes that are not a multiple of
/// `2^(depth-1)` are reflect-padded and the output cropped back.
pub fn emnet_forward_var<T: Scalar>(tape: &mut Tape<T>, net: &Network<T>, b: &Bound, x: Var) -> Result<Var> {
    check_input(tape, net, x)?;
    let (padded, size) = pad_to_multiple(tape, x, net.spec.spatial_multiple());
    let out = unet(tape, net, b, padded, None);
    Ok(crop(tape, out, size))
}

/// IMNet on the tape with guidance tensors supplied by the caller (finest first, one per
/// scale). Spatial dims must already be a multiple of `2^(depth-1)`.
pub fn imnet_forward_guided_var<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    b: &Bound,
    y: Var,
    guidance: &[Var],
) -> Result<Var> {
    check_input(tape, net, y)?;
    let cfg = net.guidance.ok_or_else(|| arg("network has no guidance branch"))?;
    if guidance.len() != net.spec.depth {
        return Err(arg(format!("{} guidance scales for {} decoder scales", guidance.len(), net.spec.depth)));
    }
    let [_, d, h, w] = tape.value(y).dims4();
    if h % net.spec.spatial_multiple() != 0 || w % net.spec.spatial_multiple() != 0 {
        return Err(arg("guided forward needs spatial dims divisible by 2^(depth-1)"));
    }
    for (s, &g) in guidance.iter().enumerate() {
        let want = [cfg.channels, d, h >> s, w >> s];
        if tape.value(g).dims4() != want {
            return Err(arg(format!("guidance scale {s} has shape {:?}, decoder expects {want:?}", tape.value(g).shape())));
        }
    }
    Ok(unet(tape, net, b, y, Some(guidance)))
}

/// IMNet on the tape, deriving the guidance from `y` itself. Without a guidance branch this
/// is the plain backbone.
pub fn imnet_forward_var<T: Scalar>(tape: &mut Tape<T>, net: &Network<T>, b: &Bound, y: Var) -> Result<Var> {
    check_input(tape, net, y)?;
    let Some(cfg) = net.guidance else {
        return emnet_forward_var(tape, net, b, y);
    };
    let (padded, size) = pad_to_multiple(tape, y, net.spec.spatial_multiple());
    let [_, d, h, w] = tape.value(padded).dims4();
    let ghat = highfreq_guidance(&tape.value(padded).clone().reshape(&[d, h, w])?, cfg.wavelet)?;
    let ghat = expand_channels(&ghat, cfg.channels);
    let g = tape.constant(ghat);
    let params: Vec<(Var, Var)> =
        (0..net.spec.depth).map(|s| (b.var(&format!("guide{s}.kernel")), b.var(&format!("guide{s}.scale")))).collect();
    let scales = multiscale_guidance_vars(tape, g, &params, cfg.wavelet)?;
    let out = unet(tape, net, b, padded, Some(&scales));
    Ok(crop(tape, out, size))
}

/// Repeats a `D x H x W` guide into `[C, D, H, W]`.
fn expand_channels<T: Scalar>(ghat: &Tensor<T>, channels: usize) -> Tensor<T> {
    let [d, h, w] = [ghat.shape()[0], ghat.shape()[1], ghat.shape()[2]];
    let data = ghat.data().repeat(channels);
    Tensor::from_vec(&[channels, d, h, w], data).unwrap()
}

fn as_volume<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape() {
        [d, h, w] => x.clone().reshape(&[1, *d, *h, *w]),
        other => Err(arg(format!("expected a D x H x W tensor, got {other:?}"))),
    }
}

/// Evaluates EMNet on a `D x H x W` tensor.
pub fn emnet_forward<T: Scalar>(input: &Tensor<T>, net: &Network<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = net.bind_frozen(&mut tape);
    let x = tape.constant(as_volume(input)?);
    let y = emnet_forward_var(&mut tape, net, &b, x)?;
    tape.value(y).clone().reshape(input.shape())
}

/// Evaluates IMNet on a `D x H x W` tensor with guidance derived from the input.
pub fn imnet_forward<T: Scalar>(noisy: &Tensor<T>, net: &Network<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = net.bind_frozen(&mut tape);
    let x = tape.constant(as_volume(noisy)?);
    let y = imnet_forward_var(&mut tape, net, &b, x)?;
    tape.value(y).clone().reshape(noisy.shape())
}

/// Evaluates IMNet with a precomputed [`GuidanceSet`].
pub fn imnet_forward_with<T: Scalar>(noisy: &Tensor<T>, guidance: &GuidanceSet<T>, net: &Network<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = net.bind_frozen(&mut tape);
    let x = tape.constant(as_volume(noisy)?);
    let g: Vec<Var> = guidance.scales.iter().map(|t| tape.constant(t.clone())).collect();
    let y = imnet_forward_guided_var(&mut tape, net, &b, x, &g)?;
    tape.value(y).clone().reshape(noisy.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(base: usize, depth: usize) -> BackboneSpec {
        BackboneSpec { base_channels: base, depth, ..BackboneSpec::default() }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(16, 1).validate().is_err());
        assert!(spec(2, 3).validate().is_err());
        assert!(BackboneSpec { kernel: [3, 2, 3], ..BackboneSpec::default() }.validate().is_err());
        assert!(build_reference_backbone::<f64>(&spec(16, 1), 0).is_err());
        assert!(BackboneSpec::default().validate().is_ok());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_reference_backbone::<f32>(&spec(4, 2), 3).unwrap();
        let b = build_reference_backbone::<f32>(&spec(4, 2), 3).unwrap();
        let c = build_reference_backbone::<f32>(&spec(4, 2), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn identity_at_initialization() {
        let x = Tensor::from_vec(&[2, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect()).unwrap();
        let em = build_reference_backbone::<f64>(&spec(4, 3), 1).unwrap();
        let im = build_imnet::<f64>(&spec(4, 3), Some(GuidanceConfig::default()), 2).unwrap();
        assert_eq!(emnet_forward(&x, &em).unwrap(), x);
        assert_eq!(imnet_forward(&x, &im).unwrap(), x);
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let x = Tensor::from_vec(&[2, 7, 10], (0..140).map(|i| (i as f64 * 0.11).cos() * 0.4 + 0.5).collect()).unwrap();
        let mut im = build_imnet::<f64>(&spec(4, 3), Some(GuidanceConfig::default()), 2).unwrap();
        im.params.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
        let y = imnet_forward(&x, &im).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        let tiny = Tensor::full(&[2, 3, 8], 0.5);
        assert!(emnet_forward(&tiny, &im).is_err());
    }

    #[test]
    fn reflect_map_mirrors_without_repeating_edge() {
        assert_eq!(reflect_map(5, 8), vec![0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_map(3, 8), vec![0, 1, 2, 1, 0, 1, 2, 1]);
    }
}
