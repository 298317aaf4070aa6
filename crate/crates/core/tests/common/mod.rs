#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use hsid::autograd::{Tape, Var};
use hsid::cube_io::{PairedSample, SpectralCube};
use hsid::nets::{Bound, Network};
use hsid::noise_synth::{synthesize_explicit, NoiseParams};
use hsid::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(r.gen_range(lo..hi))).collect()).unwrap()
}

/// Worst relative error between tape gradients and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub probes: usize,
}

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

/// `f` maps vars (one per input, in order) to a scalar. Every input with `check[i]` gets up
/// to `probes` random coordinates compared.
pub fn grad_check<F>(inputs: &[Tensor<f64>], check: &[bool], f: F, probes: usize, seed: u64) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vars);
        t.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(check).map(|(x, &c)| tape.leaf(x.clone(), c)).collect();
    let loss = f(&mut tape, &vars);
    let mut grads = tape.backward(loss);
    let mut r = rng(seed);
    let mut report = GradReport { max_rel: 0.0, probes: 0 };
    for (i, x) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = grads.take(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let picks: Vec<usize> = if x.len() <= probes { (0..x.len()).collect() } else { (0..probes).map(|_| r.gen_range(0..x.len())).collect() };
        for j in picks {
            let mut xs = inputs.to_vec();
            let h = STEP * x.data()[j].abs().max(1.0);
            xs[i].data_mut()[j] = x.data()[j] + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x.data()[j] - h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.max_rel = report.max_rel.max(rel);
            report.probes += 1;
        }
    }
    report
}

/// Network parameters (plus optionally the input) as grad-check inputs; `run` receives the
/// rebuilt [`Bound`] and the input var.
pub fn network_inputs(net: &Network<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    net.params.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

pub fn bound(names: &[String], vars: &[Var]) -> Bound {
    Bound::new(names.to_vec(), vars.to_vec())
}

/// Randomizes zero-initialized output layers so every parameter receives gradient.
pub fn enliven(net: &mut Network<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in net.params.iter_mut() {
        if name.starts_with("head.") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        } else if name.ends_with(".scale") || name.ends_with(".gamma") || name.ends_with(".kernel") || name.starts_with("fuse") {
            for v in t.data_mut() {
                *v += r.gen_range(-0.2..0.2);
            }
        }
    }
}

fn random_clean(seed: u64) -> SpectralCube<f64> {
    let mut rng = rng(seed);
    // two intensity clusters pin the regression line at both ends
    let data = (0..8 * 128 * 128)
        .map(|_| if rng.gen::<bool>() { rng.gen_range(0.1..0.2) } else { rng.gen_range(0.5..0.6) })
        .collect();
    SpectralCube::from_tensor(Tensor::from_vec(&[8, 128, 128], data).unwrap()).unwrap()
}

pub fn calibration_pairs(params: &NoiseParams, count: u64) -> Vec<PairedSample<f64>> {
    (0..count)
        .map(|i| {
            let clean = random_clean(100 + i);
            let noisy = synthesize_explicit(&clean, params, 200 + i).unwrap();
            PairedSample::new(clean, noisy, 1.0, format!("p{i}")).unwrap()
        })
        .collect()
}
