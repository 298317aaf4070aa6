mod common;

use common::{enliven, uniform};
use hsid::nets::{
    build_imnet, build_reference_backbone, emnet_forward, imnet_forward, imnet_forward_with, BackboneSpec, GuidanceConfig, ModelParams,
};
use hsid::wavelet::{highfreq_guidance, multiscale_guidance, Wavelet, WtConvParams};
use hsid::Tensor;

fn conv_block(cin: usize, c: usize) -> usize {
    cin * c * 27 + c * c * 27 + 4 * c
}

fn closed_form(base: usize, depth: usize, guidance: bool) -> usize {
    let ch = |s: usize| base << s;
    let mut n = 0;
    for s in 0..depth {
        n += conv_block(if s == 0 { 1 } else { ch(s - 1) }, ch(s));
    }
    for s in 0..depth - 1 {
        n += conv_block(ch(s) + ch(s + 1), ch(s));
    }
    n += ch(0) + 1;
    if guidance {
        for s in 0..depth {
            n += 16 * 27 + 4 + ch(s) * (ch(s) + 1) + ch(s);
        }
    }
    n
}

#[test]
fn parameter_counts_match_closed_form() {
    for (base, depth) in [(16, 3), (8, 2), (4, 4)] {
        let spec = BackboneSpec { base_channels: base, depth, ..BackboneSpec::default() };
        let em = build_reference_backbone::<f32>(&spec, 0).unwrap();
        let im = build_imnet::<f32>(&spec, Some(GuidanceConfig::default()), 0).unwrap();
        let plain = build_imnet::<f32>(&spec, None, 0).unwrap();
        assert_eq!(em.param_count(), closed_form(base, depth, false));
        assert_eq!(im.param_count(), closed_form(base, depth, true));
        assert_eq!(plain.param_count(), em.param_count());
    }
}

#[test]
fn emnet_and_imnet_parameters_are_disjoint_and_differ() {
    let m = ModelParams::<f32>::new(&BackboneSpec::default(), Some(GuidanceConfig::default()), 5).unwrap();
    let w = |n: &hsid::nets::Network<f32>| n.params.get("enc0.conv_a.weight").unwrap().clone();
    assert_ne!(w(&m.emnet), w(&m.imnet));
}

#[test]
fn reference_shapes_preserved() {
    let spec = BackboneSpec::default();
    let mut em = build_reference_backbone::<f32>(&spec, 1).unwrap();
    let mut im = build_imnet::<f32>(&spec, Some(GuidanceConfig::default()), 2).unwrap();
    em.params.get_mut("head.weight").unwrap().data_mut().fill(0.05);
    im.params.get_mut("head.weight").unwrap().data_mut().fill(0.05);
    for side in [64, 128] {
        let x: Tensor<f32> = uniform(&[8, side, side], 0.0, 1.0, side as u64);
        let y = emnet_forward(&x, &em).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        let z = imnet_forward(&x, &im).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert!(z.all_finite());
    }
}

#[test]
fn guidance_reaches_the_output() {
    let spec = BackboneSpec { base_channels: 4, depth: 3, ..BackboneSpec::default() };
    let mut im = build_imnet::<f64>(&spec, Some(GuidanceConfig::default()), 3).unwrap();
    enliven(&mut im, 4);
    let x: Tensor<f64> = uniform(&[2, 16, 16], 0.0, 1.0, 5);
    let ghat = highfreq_guidance(&x, Wavelet::Haar).unwrap();
    let params: Vec<WtConvParams<f64>> = (0..3).map(|_| WtConvParams::identity(1)).collect();
    let g = multiscale_guidance(&ghat, &params, Wavelet::Haar).unwrap();
    let mut doubled = g.clone();
    for s in &mut doubled.scales {
        s.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let a = imnet_forward_with(&x, &g, &im).unwrap();
    let b = imnet_forward_with(&x, &doubled, &im).unwrap();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
    assert!(diff > 1e-6, "guidance had no effect: {diff}");
}

#[test]
fn inference_is_deterministic() {
    let spec = BackboneSpec { base_channels: 4, depth: 3, ..BackboneSpec::default() };
    let mut im = build_imnet::<f32>(&spec, Some(GuidanceConfig::default()), 3).unwrap();
    im.params.get_mut("head.weight").unwrap().data_mut().fill(0.1);
    let x: Tensor<f32> = uniform(&[4, 16, 16], 0.0, 1.0, 6);
    assert_eq!(imnet_forward(&x, &im).unwrap(), imnet_forward(&x, &im).unwrap());
}
