//! Finite-difference gradient cases shared by the test suites.

use super::{bound, enliven, grad_check, network_inputs, uniform, GradReport};
use hsid::autograd::Var;
use hsid::losses::{LossConfig, SpectralVariant};
use hsid::nets::{build_imnet, build_reference_backbone, emnet_forward_var, imnet_forward_var, BackboneSpec, GuidanceConfig};
use hsid::wavelet::{wtconv3d_var, Wavelet, WtConvParams};

fn small_spec() -> BackboneSpec {
    BackboneSpec { base_channels: 4, depth: 3, ..BackboneSpec::default() }
}

pub fn charbonnier_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let x = uniform(&[1, 2, 8, 8], 0.0, 1.0, 1);
    let y = uniform(&[1, 2, 8, 8], 0.0, 1.0, 2);
    let r = grad_check(&[x, y], &[true, true], |t, v| t.charbonnier(v[0], v[1], 1e-3), 128, 3);
    out.push((String::new(), r));
    out
}

pub fn spectral_gradient_both_variants() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let x = uniform(&[1, 2, 8, 8], 0.1, 1.0, 4);
    let y = uniform(&[1, 2, 8, 8], 0.1, 1.0, 5);
    for variant in [SpectralVariant::Cosine, SpectralVariant::SquaredNorms] {
        let r = grad_check(&[x.clone(), y.clone()], &[true, true], |t, v| t.spectral(v[0], v[1], variant), 128, 6);
        out.push((format!("{variant:?}"), r));
    }
    out
}

pub fn histogram_kl_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let p = uniform(&[1, 2, 8, 8], 0.1, 0.9, 7);
    let q = uniform(&[1, 2, 8, 8], 0.2, 0.8, 8);
    let spec = LossConfig::default().histogram();
    let r = grad_check(&[p, q], &[true, true], |t, v| t.hist_kl(v[0], v[1], spec).unwrap(), 128, 9);
    out.push((String::new(), r));
    out
}

pub fn wtconv_gradient_in_input_kernel_and_scale() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    for wavelet in [Wavelet::Haar, Wavelet::Db2] {
        let g = uniform(&[1, 2, 8, 8], 0.0, 1.0, 10);
        let mut p = WtConvParams::<f64>::identity(1);
        let noise = uniform::<f64>(p.kernel.shape(), -0.1, 0.1, 11);
        for (k, n) in p.kernel.data_mut().iter_mut().zip(noise.data()) {
            *k += n;
        }
        let scale = uniform(&[4], 0.5, 1.5, 12);
        let target = uniform(&[1, 2, 8, 8], 0.0, 1.0, 13);
        let r = grad_check(
            &[g, p.kernel, scale, target],
            &[true, true, true, false],
            |t, v| {
                let y = wtconv3d_var(t, v[0], v[1], v[2], wavelet);
                t.charbonnier(v[3], y, 1e-3)
            },
            64,
            14,
        );
        out.push((format!("{wavelet:?}"), r));
    }
    out
}

pub fn emnet_gradient_in_parameters_and_input() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut net = build_reference_backbone::<f64>(&small_spec(), 3).unwrap();
    enliven(&mut net, 15);
    let (names, mut inputs) = network_inputs(&net);
    let n = inputs.len();
    inputs.push(uniform(&[1, 2, 8, 8], 0.0, 1.0, 16));
    inputs.push(uniform(&[1, 2, 8, 8], 0.0, 1.0, 17));
    let mut check = vec![true; n + 1];
    check.push(false);
    let r = grad_check(
        &inputs,
        &check,
        |t, v: &[Var]| {
            let b = bound(&names, &v[..n]);
            let y = emnet_forward_var(t, &net, &b, v[n]).unwrap();
            t.charbonnier(v[n + 1], y, 1e-3)
        },
        6,
        18,
    );
    out.push((String::new(), r));
    out
}

pub fn imnet_gradient_in_parameters() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    for wavelet in [Wavelet::Haar, Wavelet::Db2] {
        let mut net = build_imnet::<f64>(&small_spec(), Some(GuidanceConfig { wavelet, channels: 1 }), 4).unwrap();
        enliven(&mut net, 19);
        let (names, mut inputs) = network_inputs(&net);
        let n = inputs.len();
        // the guide is a constant function of the input, so only parameters are probed
        inputs.push(uniform(&[1, 2, 8, 8], 0.0, 1.0, 20));
        inputs.push(uniform(&[1, 2, 8, 8], 0.0, 1.0, 21));
        let mut check = vec![true; n];
        check.extend([false, false]);
        let r = grad_check(
            &inputs,
            &check,
            |t, v: &[Var]| {
                let b = bound(&names, &v[..n]);
                let y = imnet_forward_var(t, &net, &b, v[n]).unwrap();
                t.charbonnier(v[n + 1], y, 1e-3)
            },
            6,
            22,
        );
        out.push((format!("{wavelet:?}"), r));
    }
    out
}
