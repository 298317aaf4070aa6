//! Procedural toy scenes standing in for captured hyperspectral data.
//!
//! A clean scene is a smooth background (a spectrum modulated by a spatial ramp and a slow
//! sinusoid) with a handful of rectangles and ellipses, each carrying its own spectrum. The
//! paired noisy cube gets explicit noise at the scene's exposure ratio followed by implicit
//! noise whose amplitude scales with the same ratio.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube_io::{save_cube_with_meta, uniform_wavelengths, write_manifest, CubeMeta, ManifestEntry, PairedSample, SpectralCube};
use crate::error::{arg, HsidError, Result};
use crate::noise_synth::{inject_implicit, synthesize_explicit, ImplicitNoiseSpec, NoiseModel, NoiseParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Implicit-noise levels at the reference exposure ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitLevels {
    pub corr_sigma: f64,
    pub corr_amp: f64,
    pub impulse_prob: f64,
}

impl Default for ImplicitLevels {
    fn default() -> Self {
        Self { corr_sigma: 1.5, corr_amp: 0.03, impulse_prob: 0.002 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Explicit-only pairs at the reference ratio, for calibration.
    pub calibration_scenes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Exposure ratios assigned round-robin to scenes.
    pub exposure_ratios: Vec<f64>,
    pub reference_ratio: f64,
    /// Explicit noise at the reference ratio; `None` uses [`ToyConfig::default_noise`].
    pub noise: Option<NoiseParams>,
    pub implicit: ImplicitLevels,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train_scenes: 16,
            test_scenes: 4,
            calibration_scenes: 8,
            bands: 8,
            height: 64,
            width: 64,
            exposure_ratios: vec![20.0, 50.0, 100.0],
            reference_ratio: 50.0,
            noise: None,
            implicit: ImplicitLevels::default(),
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn default_noise(bands: usize) -> NoiseParams {
        NoiseParams::uniform(bands, 400.0, 0.0, 4e-4, 1e-4)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let params = self.noise.clone().unwrap_or_else(|| Self::default_noise(self.bands));
        if params.bands() != self.bands {
            return Err(arg(format!("noise params cover {} bands, toy cubes have {}", params.bands(), self.bands)));
        }
        NoiseModel::new(params, self.reference_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 {
            return Err(arg("toy dataset needs at least one training scene"));
        }
        if self.bands < 2 || self.height < 8 || self.width < 8 {
            return Err(arg("toy cubes need at least 2 bands and 8x8 pixels"));
        }
        if self.exposure_ratios.is_empty() || self.exposure_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(arg("exposure ratios must be a non-empty list of positive values"));
        }
        self.noise_model().map(|_| ())
    }
}

/// Clean/noisy pairs plus the noise model that produced the explicit part.
#[derive(Clone, Debug)]
pub struct ToyDataset<T> {
    pub train: Vec<PairedSample<T>>,
    pub test: Vec<PairedSample<T>>,
    pub calibration: Vec<PairedSample<T>>,
    pub noise: NoiseModel,
}

struct Spectrum {
    base: f64,
    peak: f64,
    centre: f64,
    width: f64,
    slope: f64,
}

impl Spectrum {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: rng.gen_range(0.15..0.45),
            peak: rng.gen_range(-0.1..0.4),
            centre: rng.gen_range(0.0..1.0),
            width: rng.gen_range(0.15..0.4),
            slope: rng.gen_range(-0.15..0.15),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.base + self.peak * (-(t - self.centre).powi(2) / (2.0 * self.width * self.width)).exp() + self.slope * (t - 0.5)
    }
}

enum Shape {
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        if rng.gen::<bool>() {
            let (h, w) = (rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5));
            let (top, left) = (rng.gen_range(0.0..1.0 - h), rng.gen_range(0.0..1.0 - w));
            Shape::Rect { top, left, bottom: top + h, right: left + w }
        } else {
            Shape::Ellipse {
                cy: rng.gen_range(0.2..0.8),
                cx: rng.gen_range(0.2..0.8),
                ry: rng.gen_range(0.08..0.3),
                rx: rng.gen_range(0.08..0.3),
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

/// One clean scene with values in `[0.05, 0.95]`.
pub fn toy_clean_cube<T: Scalar>(bands: usize, height: usize, width: usize, seed: u64) -> Result<SpectralCube<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Spectrum::random(&mut rng);
    let (gy, gx) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let (fy, fx, phase) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.3));
    let objects: Vec<(Shape, Spectrum)> =
        (0..rng.gen_range(3..7)).map(|_| (Shape::random(&mut rng), Spectrum::random(&mut rng))).collect();
    let mut data = Vec::with_capacity(bands * height * width);
    for b in 0..bands {
        let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                let x = (c as f64 + 0.5) / width as f64;
                // later objects paint over earlier ones
                let v = match objects.iter().rev().find(|(s, _)| s.contains(y, x)) {
                    Some((_, spec)) => spec.at(t) * (1.0 + 0.2 * (gy * (y - 0.5) + gx * (x - 0.5))),
                    None => {
                        let wave = 0.08 * (std::f64::consts::TAU * (fy * y + fx * x) + phase).sin();
                        background.at(t) * (1.0 + gy * (y - 0.5) + gx * (x - 0.5)) + wave
                    }
                };
                data.push(T::c(v.clamp(0.05, 0.95)));
            }
        }
    }
    SpectralCube::new(Tensor::from_vec(&[bands, height, width], data)?, uniform_wavelengths(bands))
}

fn mix(seed: u64, index: u64, tag: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene `index` of a toy dataset: clean cube, noisy cube and exposure ratio.
pub fn toy_scene<T: Scalar>(cfg: &ToyConfig, noise: &NoiseModel, index: usize) -> Result<PairedSample<T>> {
    let i = index as u64;
    let ratio = cfg.exposure_ratios[index % cfg.exposure_ratios.len()];
    let clean = toy_clean_cube(cfg.bands, cfg.height, cfg.width, mix(cfg.seed, i, 1))?;
    let explicit = synthesize_explicit(&clean, &noise.for_ratio(ratio), mix(cfg.seed, i, 2))?;
    let scale = ratio / cfg.reference_ratio;
    let implicit = ImplicitNoiseSpec {
        corr_sigma: cfg.implicit.corr_sigma,
        corr_amp: cfg.implicit.corr_amp * scale.sqrt(),
        impulse_prob: cfg.implicit.impulse_prob,
        seed: mix(cfg.seed, i, 3),
    };
    let noisy = inject_implicit(&explicit, &implicit)?;
    PairedSample::new(clean, noisy, ratio, format!("scene_{index:03}"))
}

/// Clean cube plus explicit noise only, at the reference ratio.
pub fn calibration_scene<T: Scalar>(cfg: &ToyConfig, noise: &NoiseModel, index: usize) -> Result<PairedSample<T>> {
    let i = index as u64;
    let clean = toy_clean_cube(cfg.bands, cfg.height, cfg.width, mix(cfg.seed, i, 4))?;
    let noisy = synthesize_explicit(&clean, &noise.for_ratio(cfg.reference_ratio), mix(cfg.seed, i, 5))?;
    PairedSample::new(clean, noisy, cfg.reference_ratio, format!("calib_{index:03}"))
}

pub fn generate_toy<T: Scalar>(cfg: &ToyConfig) -> Result<ToyDataset<T>> {
    cfg.validate()?;
    let noise = cfg.noise_model()?;
    let total = cfg.train_scenes + cfg.test_scenes;
    let mut scenes = (0..total).map(|i| toy_scene(cfg, &noise, i)).collect::<Result<Vec<_>>>()?;
    let test = scenes.split_off(cfg.train_scenes);
    let calibration = (0..cfg.calibration_scenes)
        .map(|i| calibration_scene(cfg, &noise, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset { train: scenes, test, calibration, noise })
}

/// Paths written by [`write_toy`].
#[derive(Clone, Debug)]
pub struct ToyLayout {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub calibration_manifest: PathBuf,
    pub noise_model: PathBuf,
}

impl ToyLayout {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_manifest: dir.join("train.json"),
            test_manifest: dir.join("test.json"),
            calibration_manifest: dir.join("calibration.json"),
            noise_model: dir.join("noise_model.json"),
        }
    }
}

/// Writes cubes under `dir/cubes`, one manifest per split and the explicit noise model.
pub fn write_toy<T: Scalar>(data: &ToyDataset<T>, dir: &Path) -> Result<ToyLayout> {
    let cubes = dir.join("cubes");
    fs::create_dir_all(&cubes).map_err(|e| HsidError::io(&cubes, e))?;
    let layout = ToyLayout::in_dir(dir);
    let splits = [
        (&data.train, &layout.train_manifest),
        (&data.test, &layout.test_manifest),
        (&data.calibration, &layout.calibration_manifest),
    ];
    for (split, manifest) in splits {
        let mut entries = Vec::with_capacity(split.len());
        for pair in split {
            let id = &pair.scene_id;
            let meta = |ratio: Option<f64>| CubeMeta {
                wavelengths_nm: pair.clean.wavelengths().to_vec(),
                scene_id: Some(id.clone()),
                exposure_ratio: ratio,
            };
            let clean = format!("cubes/{id}_clean.hsic");
            let noisy = format!("cubes/{id}_noisy.hsic");
            save_cube_with_meta(&pair.clean, &meta(None), &dir.join(&clean))?;
            save_cube_with_meta(&pair.noisy, &meta(Some(pair.exposure_ratio)), &dir.join(&noisy))?;
            entries.push(ManifestEntry { clean: clean.into(), noisy: noisy.into(), scene_id: id.clone() });
        }
        write_manifest(manifest, &entries)?;
    }
    data.noise.save(&layout.noise_model)?;
    Ok(layout)
}
