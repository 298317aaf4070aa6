//! Three-stage training, inference composition and the learning-strategy ablation.
//!
//! * Stage 1 trains EMNet on clean patches with freshly synthesized explicit noise.
//! * Stage 2 trains IMNet on real pairs through the frozen EMNet with Charbonnier + KL.
//! * Stage 3 fine-tunes both with Charbonnier + KL + spectral consistency.
//!
//! All randomness (data order, crops, augmentation, noise draws) is derived from the config
//! seed and the `(stage, epoch, step)` position, so runs and resumed runs are reproducible.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::cube_io::{split_dataset, Dihedral, PairedSample, SpectralCube};
use crate::error::{arg, HsidError, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricsReport;
use crate::nets::{build_imnet, emnet_forward_var, imnet_forward_var, BackboneSpec, GuidanceConfig, ModelParams};
use crate::noise_synth::{synthesize_explicit, NoiseModel};
use crate::optim::{grad_norm, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::Wavelet;

/// Training phase. `EndToEnd` is the single-phase baseline of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
    EndToEnd,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
            Stage::EndToEnd => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            4 => Ok(Stage::EndToEnd),
            other => Err(HsidError::State(format!("checkpoint stage {other} is not a training stage"))),
        }
    }

    fn uses_imnet(self) -> bool {
        self != Stage::One
    }

    fn uses_kl(self) -> bool {
        matches!(self, Stage::Two | Stage::Three)
    }

    fn uses_spectral(self) -> bool {
        matches!(self, Stage::Three | Stage::EndToEnd)
    }

    fn emnet_frozen(self) -> bool {
        self == Stage::Two
    }

    fn imnet_frozen(self) -> bool {
        self == Stage::One
    }
}

/// Whether explicit noise is redrawn every step or drawn once per scene before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageEpochs {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self { stage1: 100, stage2: 50, stage3: 50 }
    }
}

impl StageEpochs {
    pub fn total(&self) -> usize {
        self.stage1 + self.stage2 + self.stage3
    }

    /// Splits a total budget 50% / 25% / 25%.
    pub fn split(total: usize) -> Self {
        let stage1 = total / 2;
        let stage2 = (total - stage1) / 2;
        Self { stage1, stage2, stage3: total - stage1 - stage2 }
    }

    pub fn for_stage(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1,
            Stage::Two => self.stage2,
            Stage::Three => self.stage3,
            Stage::EndToEnd => self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: StageEpochs,
    pub patch_size: usize,
    /// Random crops drawn from every training scene per epoch.
    pub patches_per_scene: usize,
    /// Random flips and quarter turns of each patch.
    pub augment: bool,
    pub noise_mode: NoiseMode,
    pub loss: LossConfig,
    pub backbone: BackboneSpec,
    /// Wavelet guidance in IMNet.
    pub guidance: bool,
    pub wavelet: Wavelet,
    /// Share of training scenes held out for per-epoch validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 1,
            epochs: StageEpochs::default(),
            patch_size: 64,
            patches_per_scene: 1,
            augment: true,
            noise_mode: NoiseMode::Online,
            loss: LossConfig::default(),
            backbone: BackboneSpec::default(),
            guidance: true,
            wavelet: Wavelet::Haar,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn guidance_config(&self) -> Option<GuidanceConfig> {
        self.guidance.then_some(GuidanceConfig { wavelet: self.wavelet, channels: 1 })
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.loss.validate()?;
        self.backbone.validate()?;
        if self.batch_size == 0 || self.patches_per_scene == 0 {
            return Err(arg("batch_size and patches_per_scene must be positive"));
        }
        if self.patch_size < self.backbone.spatial_multiple() {
            return Err(arg(format!(
                "patch_size {} is smaller than the backbone's minimum {}",
                self.patch_size,
                self.backbone.spatial_multiple()
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(arg("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Fresh pipeline parameters for this config.
    pub fn init_model<T: Scalar>(&self) -> Result<ModelParams<T>> {
        ModelParams::new(&self.backbone, self.guidance_config(), self.seed)
    }
}

/// Per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub charbonnier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral: Option<f64>,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Per-epoch summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

pub trait TrainLog {
    fn step(&mut self, record: &StepRecord);
    fn epoch(&mut self, record: &EpochRecord);
}

/// Discards everything.
pub struct NullLog;

impl TrainLog for NullLog {
    fn step(&mut self, _: &StepRecord) {}
    fn epoch(&mut self, _: &EpochRecord) {}
}

/// Keeps records in memory.
#[derive(Default, Debug, Clone)]
pub struct MemoryLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog for MemoryLog {
    fn step(&mut self, record: &StepRecord) {
        self.steps.push(record.clone());
    }

    fn epoch(&mut self, record: &EpochRecord) {
        self.epochs.push(record.clone());
    }
}

/// One JSON object per line, tagged with `"kind": "step" | "epoch"`.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    fn write(&mut self, kind: &str, value: serde_json::Value) {
        let mut value = value;
        value.as_object_mut().expect("record is an object").insert("kind".into(), kind.into());
        if let Err(e) = writeln!(self.out, "{value}") {
            log::warn!("training log write failed: {e}");
        }
    }
}

impl<W: Write> TrainLog for JsonLinesLog<W> {
    fn step(&mut self, r: &StepRecord) {
        self.write("step", serde_json::to_value(r).expect("serializable"));
    }

    fn epoch(&mut self, r: &EpochRecord) {
        self.write("epoch", serde_json::to_value(r).expect("serializable"));
    }
}

/// A clean training cube and the exposure ratio its synthetic noise should mimic.
#[derive(Clone, Debug)]
pub struct CleanScene<T> {
    pub cube: SpectralCube<T>,
    pub exposure_ratio: f64,
    pub scene_id: String,
}

impl<T: Scalar> CleanScene<T> {
    pub fn from_pair(p: &PairedSample<T>) -> Self {
        Self { cube: p.clean.clone(), exposure_ratio: p.exposure_ratio, scene_id: p.scene_id.clone() }
    }
}

/// Training inputs: clean cubes suffice for stage 1, later stages need pairs.
#[derive(Clone, Copy)]
pub enum TrainData<'a, T> {
    Clean(&'a [CleanScene<T>]),
    Paired(&'a [PairedSample<T>]),
}

struct Scene<T> {
    id: String,
    clean: SpectralCube<T>,
    noisy: Option<SpectralCube<T>>,
    ratio: f64,
    offline: Option<SpectralCube<T>>,
}

/// splitmix64 over a few words.
fn mix(words: &[u64]) -> u64 {
    let mut z = 0x243f_6a88_85a3_08d3u64;
    for &w in words {
        z ^= w;
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const TAG_ORDER: u64 = 1;
const TAG_OFFLINE: u64 = 2;

struct Item {
    scene: usize,
    top: usize,
    left: usize,
    dihedral: Dihedral,
    noise_seed: u64,
}

struct Patch<T> {
    clean: Tensor<T>,
    noisy: Option<Tensor<T>>,
    synthetic: Tensor<T>,
}

fn volume<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let s = t.shape().to_vec();
    t.reshape(&[1, s[0], s[1], s[2]]).expect("3-D patch")
}

/// Mean per-term losses of one step.
#[derive(Clone, Copy, Debug, Default)]
struct Terms {
    total: f64,
    charbonnier: f64,
    kl: f64,
    spectral: f64,
}

/// Drives one stage epoch by epoch.
pub struct StageRunner<'a, T> {
    stage: Stage,
    cfg: &'a TrainConfig,
    noise: &'a NoiseModel,
    scenes: Vec<Scene<T>>,
    train: Vec<usize>,
    val: Vec<usize>,
    state: Checkpoint<T>,
    started: Instant,
}

impl<'a, T: Scalar> StageRunner<'a, T> {
    /// Starts `stage` from `prev` (the previous stage's result, or an initialization).
    pub fn start(stage: Stage, prev: &Checkpoint<T>, data: TrainData<'_, T>, noise: &'a NoiseModel, cfg: &'a TrainConfig) -> Result<Self> {
        let mut model = prev.model.clone();
        model.emnet.frozen = stage.emnet_frozen();
        model.imnet.frozen = stage.imnet_frozen();
        let emnet_opt = (!model.emnet.frozen).then(|| AdamState::new(&model.emnet.params));
        let imnet_opt = (!model.imnet.frozen).then(|| AdamState::new(&model.imnet.params));
        let state = Checkpoint { stage: stage.id(), epochs_done: 0, step: 0, seed: cfg.seed, model, emnet_opt, imnet_opt };
        Self::from_state(stage, state, data, noise, cfg)
    }

    /// Continues the stage recorded in `ckpt`.
    pub fn resume(ckpt: &Checkpoint<T>, data: TrainData<'_, T>, noise: &'a NoiseModel, cfg: &'a TrainConfig) -> Result<Self> {
        let stage = Stage::from_id(ckpt.stage)?;
        if ckpt.seed != cfg.seed {
            return Err(HsidError::State(format!("checkpoint seed {} differs from config seed {}", ckpt.seed, cfg.seed)));
        }
        let expect = |frozen: bool, opt: bool| frozen != opt;
        if !expect(ckpt.model.emnet.frozen, ckpt.emnet_opt.is_some()) || !expect(ckpt.model.imnet.frozen, ckpt.imnet_opt.is_some()) {
            return Err(HsidError::State("checkpoint optimizer state inconsistent with freeze flags".into()));
        }
        Self::from_state(stage, ckpt.clone(), data, noise, cfg)
    }

    fn from_state(stage: Stage, state: Checkpoint<T>, data: TrainData<'_, T>, noise: &'a NoiseModel, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        noise.validate()?;
        let scenes: Vec<Scene<T>> = match data {
            TrainData::Clean(_) if stage.uses_imnet() => {
                return Err(arg(format!("stage {} needs clean/noisy pairs", stage.id())));
            }
            TrainData::Clean(c) => c
                .iter()
                .map(|s| Scene { id: s.scene_id.clone(), clean: s.cube.clone(), noisy: None, ratio: s.exposure_ratio, offline: None })
                .collect(),
            TrainData::Paired(p) => p
                .iter()
                .map(|s| Scene { id: s.scene_id.clone(), clean: s.clean.clone(), noisy: Some(s.noisy.clone()), ratio: s.exposure_ratio, offline: None })
                .collect(),
        };
        if scenes.is_empty() {
            return Err(arg("training needs at least one scene"));
        }
        let bands = scenes[0].clean.bands();
        for s in &scenes {
            if s.clean.bands() != bands {
                return Err(arg("training scenes differ in band count"));
            }
            if s.clean.height() < cfg.patch_size || s.clean.width() < cfg.patch_size {
                return Err(arg(format!("scene {} is smaller than patch_size {}", s.id, cfg.patch_size)));
            }
        }
        if noise.params.bands() != bands {
            return Err(arg(format!("noise model covers {} bands, data has {}", noise.params.bands(), bands)));
        }
        let (train, val) = holdout(&scenes, cfg)?;
        let mut runner = Self { stage, cfg, noise, scenes, train, val, state, started: Instant::now() };
        if cfg.noise_mode == NoiseMode::Offline {
            for (i, s) in runner.scenes.iter_mut().enumerate() {
                let seed = mix(&[cfg.seed, TAG_OFFLINE, i as u64]);
                s.offline = Some(synthesize_explicit(&s.clean, &noise.for_ratio(s.ratio), seed)?);
            }
        }
        Ok(runner)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.state
    }

    pub fn target_epochs(&self) -> usize {
        self.cfg.epochs.for_stage(self.stage)
    }

    pub fn validation_ids(&self) -> Vec<&str> {
        self.val.iter().map(|&i| self.scenes[i].id.as_str()).collect()
    }

    /// Optimizer steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        (self.train.len() * self.cfg.patches_per_scene).div_ceil(self.cfg.batch_size)
    }

    fn plan_epoch(&self, epoch: usize) -> Vec<Item> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.cfg.seed, TAG_ORDER, self.stage.id() as u64, epoch as u64]));
        let mut order = self.train.clone();
        order.shuffle(&mut rng);
        let p = self.cfg.patch_size;
        let mut items = Vec::with_capacity(order.len() * self.cfg.patches_per_scene);
        for &scene in &order {
            let [_, h, w] = self.scenes[scene].clean.shape();
            for _ in 0..self.cfg.patches_per_scene {
                let top = rng.gen_range(0..=h - p);
                let left = rng.gen_range(0..=w - p);
                let dihedral = if self.cfg.augment { Dihedral::draw(rng.gen()) } else { Dihedral::IDENTITY };
                items.push(Item { scene, top, left, dihedral, noise_seed: rng.gen() });
            }
        }
        items
    }

    fn patch(&self, item: &Item) -> Result<Patch<T>> {
        let s = &self.scenes[item.scene];
        let p = self.cfg.patch_size;
        let crop = |c: &SpectralCube<T>| c.window(item.top, item.left, p, p);
        let clean = crop(&s.clean)?;
        let synthetic = match &s.offline {
            Some(off) => crop(off)?,
            None => synthesize_explicit(&clean, &self.noise.for_ratio(s.ratio), item.noise_seed)?,
        };
        let noisy = s.noisy.as_ref().map(crop).transpose()?;
        let d = &item.dihedral;
        Ok(Patch {
            clean: volume(d.apply(clean.data())?),
            noisy: noisy.map(|n| d.apply(n.data())).transpose()?.map(volume),
            synthetic: volume(d.apply(synthetic.data())?),
        })
    }

    fn item_loss(&self, tape: &mut Tape<T>, em: &crate::nets::Bound, im: Option<&crate::nets::Bound>, patch: Patch<T>) -> Result<(Var, [Option<Var>; 3])> {
        let model = &self.state.model;
        let x = tape.constant(patch.clean);
        let lc = &self.cfg.loss;
        if self.stage == Stage::One {
            let ye = tape.constant(patch.synthetic);
            let xhat = emnet_forward_var(tape, &model.emnet, em, ye)?;
            let c = tape.charbonnier(x, xhat, lc.epsilon);
            return Ok((c, [Some(c), None, None]));
        }
        let y = tape.constant(patch.noisy.expect("paired data for stages 2+"));
        let yhat = imnet_forward_var(tape, &model.imnet, im.expect("imnet bound"), y)?;
        let xhat = emnet_forward_var(tape, &model.emnet, em, yhat)?;
        let c = tape.charbonnier(x, xhat, lc.epsilon);
        let mut terms = vec![(c, 1.0)];
        let kl = if self.stage.uses_kl() {
            let ye = tape.constant(patch.synthetic);
            let k = tape.hist_kl(ye, yhat, lc.histogram())?;
            terms.push((k, lc.lambda_k));
            Some(k)
        } else {
            None
        };
        let spectral = if self.stage.uses_spectral() {
            let s = tape.spectral(x, xhat, lc.spectral_variant);
            terms.push((s, lc.lambda_s));
            Some(s)
        } else {
            None
        };
        Ok((tape.weighted_sum(&terms), [Some(c), kl, spectral]))
    }

    fn train_step(&mut self, batch: &[Item]) -> Result<(Terms, f64)> {
        let mut tape = Tape::new();
        let em = self.state.model.emnet.bind(&mut tape);
        let im = self.stage.uses_imnet().then(|| self.state.model.imnet.bind(&mut tape));
        let mut losses = Vec::with_capacity(batch.len());
        let mut terms = Terms::default();
        let share = 1.0 / batch.len() as f64;
        for item in batch {
            let patch = self.patch(item)?;
            let (loss, parts) = self.item_loss(&mut tape, &em, im.as_ref(), patch)?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].to_f64_lossy());
            terms.total += share * value(Some(loss));
            terms.charbonnier += share * value(parts[0]);
            terms.kl += share * value(parts[1]);
            terms.spectral += share * value(parts[2]);
            losses.push((loss, share));
        }
        let total = if losses.len() == 1 { losses[0].0 } else { tape.weighted_sum(&losses) };
        let mut grads = tape.backward(total);
        let em_grads = em.gradients(&mut grads);
        let im_grads = im.as_ref().map(|b| b.gradients(&mut grads));
        let norm = (grad_norm(&em_grads).powi(2) + im_grads.as_deref().map_or(0.0, |g| grad_norm(g).powi(2))).sqrt();
        if !terms.total.is_finite() || !norm.is_finite() {
            return Err(HsidError::Numeric {
                step: self.state.step as usize,
                lr: self.cfg.learning_rate,
                grad_norm: norm,
                reason: format!("non-finite loss {} in stage {}", terms.total, self.stage.id()),
            });
        }
        let adam = self.cfg.adam();
        if let Some(opt) = self.state.emnet_opt.as_mut() {
            opt.update(&mut self.state.model.emnet.params, &em_grads, &adam)?;
        }
        if let (Some(opt), Some(g)) = (self.state.imnet_opt.as_mut(), im_grads.as_ref()) {
            opt.update(&mut self.state.model.imnet.params, g, &adam)?;
        }
        self.state.step += 1;
        Ok((terms, norm))
    }

    /// Runs one epoch and returns its summary.
    pub fn run_epoch(&mut self, log: &mut dyn TrainLog) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done;
        let items = self.plan_epoch(epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in items.chunks(self.cfg.batch_size) {
            let (terms, norm) = self.train_step(batch)?;
            sum += terms.total;
            steps += 1;
            log.step(&StepRecord {
                stage: self.stage.id(),
                epoch,
                step: self.state.step,
                loss: terms.total,
                charbonnier: terms.charbonnier,
                kl: self.stage.uses_kl().then_some(terms.kl),
                spectral: self.stage.uses_spectral().then_some(terms.spectral),
                grad_norm: norm,
                wall_time_s: self.started.elapsed().as_secs_f64(),
            });
        }
        self.state.epochs_done += 1;
        let val_psnr = if self.val.is_empty() { None } else { Some(self.validate()?) };
        let record = EpochRecord { stage: self.stage.id(), epoch, mean_loss: sum / steps.max(1) as f64, val_psnr };
        log.epoch(&record);
        Ok(record)
    }

    /// Runs until the configured number of epochs for this stage is reached.
    pub fn run(&mut self, log: &mut dyn TrainLog) -> Result<()> {
        while self.state.epochs_done < self.target_epochs() {
            self.run_epoch(log)?;
        }
        Ok(())
    }

    /// Mean PSNR on the held-out scenes (real noisy input where available).
    fn validate(&self) -> Result<f64> {
        let pipeline = if self.stage.uses_imnet() { Pipeline::Full } else { Pipeline::EmnetOnly };
        let mut total = 0.0;
        for &i in &self.val {
            let s = &self.scenes[i];
            let input = s.noisy.as_ref().or(s.offline.as_ref());
            let input = match input {
                Some(c) => c.clone(),
                None => synthesize_explicit(&s.clean, &self.noise.for_ratio(s.ratio), mix(&[self.cfg.seed, TAG_OFFLINE, i as u64]))?,
            };
            let out = denoise_with(&input, &self.state.model, pipeline)?;
            total += crate::metrics::psnr(&s.clean, &out)?;
        }
        Ok(total / self.val.len() as f64)
    }
}

fn holdout<T>(scenes: &[Scene<T>], cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scenes.len();
    let count = (n as f64 * cfg.validation_fraction).round() as usize;
    if count == 0 || count >= n {
        return Ok(((0..n).collect(), Vec::new()));
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, count, cfg.seed)?;
    let index = |set: &[String]| -> Vec<usize> {
        let mut v: Vec<usize> = set.iter().map(|id| ids.iter().position(|x| x == id).unwrap()).collect();
        v.sort_unstable();
        v
    };
    Ok((index(&split.train_ids), index(&split.test_ids)))
}

/// Stage-0 checkpoint holding freshly initialized networks.
pub fn initial_checkpoint<T: Scalar>(cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    Ok(Checkpoint { stage: 0, epochs_done: 0, step: 0, seed: cfg.seed, model: cfg.init_model()?, emnet_opt: None, imnet_opt: None })
}

fn require_stage<T>(ckpt: &Checkpoint<T>, want: u8) -> Result<()> {
    if ckpt.stage != want {
        return Err(HsidError::State(format!("expected a stage-{want} checkpoint, got stage {}", ckpt.stage)));
    }
    Ok(())
}

/// Stage 1: EMNet on synthetic explicit noise.
pub fn train_stage1<T: Scalar>(scenes: &[CleanScene<T>], noise: &NoiseModel, cfg: &TrainConfig, log: &mut dyn TrainLog) -> Result<Checkpoint<T>> {
    let init = initial_checkpoint(cfg)?;
    let mut r = StageRunner::start(Stage::One, &init, TrainData::Clean(scenes), noise, cfg)?;
    r.run(log)?;
    Ok(r.into_checkpoint())
}

/// Stage 2: IMNet through the frozen stage-1 EMNet.
pub fn train_stage2<T: Scalar>(
    pairs: &[PairedSample<T>],
    stage1: &Checkpoint<T>,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    log: &mut dyn TrainLog,
) -> Result<Checkpoint<T>> {
    require_stage(stage1, 1)?;
    let mut r = StageRunner::start(Stage::Two, stage1, TrainData::Paired(pairs), noise, cfg)?;
    r.run(log)?;
    Ok(r.into_checkpoint())
}

/// Stage 3: joint fine-tuning.
pub fn train_stage3<T: Scalar>(
    pairs: &[PairedSample<T>],
    stage2: &Checkpoint<T>,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    log: &mut dyn TrainLog,
) -> Result<Checkpoint<T>> {
    require_stage(stage2, 2)?;
    let mut r = StageRunner::start(Stage::Three, stage2, TrainData::Paired(pairs), noise, cfg)?;
    r.run(log)?;
    Ok(r.into_checkpoint())
}

/// Both networks from scratch in one phase with Charbonnier + spectral loss.
pub fn train_end_to_end<T: Scalar>(pairs: &[PairedSample<T>], noise: &NoiseModel, cfg: &TrainConfig, log: &mut dyn TrainLog) -> Result<Checkpoint<T>> {
    let init = initial_checkpoint(cfg)?;
    let mut r = StageRunner::start(Stage::EndToEnd, &init, TrainData::Paired(pairs), noise, cfg)?;
    r.run(log)?;
    Ok(r.into_checkpoint())
}

/// Stage 1 to 3 in sequence; returns all three checkpoints.
pub fn train_all<T: Scalar>(
    pairs: &[PairedSample<T>],
    noise: &NoiseModel,
    cfg: &TrainConfig,
    log: &mut dyn TrainLog,
) -> Result<[Checkpoint<T>; 3]> {
    let clean: Vec<CleanScene<T>> = pairs.iter().map(CleanScene::from_pair).collect();
    let c1 = train_stage1(&clean, noise, cfg, log)?;
    let c2 = train_stage2(pairs, &c1, noise, cfg, log)?;
    let c3 = train_stage3(pairs, &c2, noise, cfg, log)?;
    Ok([c1, c2, c3])
}

/// Which networks run at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// `EMNet(IMNet(y))`.
    Full,
    EmnetOnly,
}

/// Runs the chosen networks on a cube and clamps the result to `[0, 1]`.
pub fn denoise_with<T: Scalar>(noisy: &SpectralCube<T>, model: &ModelParams<T>, pipeline: Pipeline) -> Result<SpectralCube<T>> {
    let [d, h, w] = noisy.shape();
    let m = model.emnet.spec.spatial_multiple().max(model.imnet.spec.spatial_multiple());
    if h % m != 0 || w % m != 0 {
        log::info!("input {h}x{w} is not a multiple of {m}; reflect-padding for inference");
    }
    let mut tape = Tape::new();
    let x = tape.constant(noisy.data().clone().reshape(&[1, d, h, w])?);
    let em = model.emnet.bind_frozen(&mut tape);
    let y = match pipeline {
        Pipeline::Full => {
            let im = model.imnet.bind_frozen(&mut tape);
            imnet_forward_var(&mut tape, &model.imnet, &im, x)?
        }
        Pipeline::EmnetOnly => x,
    };
    let out = emnet_forward_var(&mut tape, &model.emnet, &em, y)?;
    let data = tape.value(out).clone().reshape(&[d, h, w])?;
    SpectralCube::from_tensor_clamped(data, noisy.wavelengths().to_vec())
}

/// Final-model inference; the checkpoint must come from stage 3 (or the end-to-end baseline).
pub fn denoise<T: Scalar>(noisy: &SpectralCube<T>, ckpt: &Checkpoint<T>) -> Result<SpectralCube<T>> {
    if ckpt.stage != 3 && ckpt.stage != 4 {
        return Err(HsidError::State(format!(
            "denoising needs a final (stage-3) checkpoint, got stage {}; use denoise_with to override",
            ckpt.stage
        )));
    }
    denoise_with(noisy, &ckpt.model, Pipeline::Full)
}

/// Metrics of one test scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub exposure_ratio: f64,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Denoises every pair and scores it against its clean cube.
pub fn evaluate<T: Scalar>(model: &ModelParams<T>, pipeline: Pipeline, pairs: &[PairedSample<T>]) -> Result<Vec<SceneMetrics>> {
    pairs
        .iter()
        .map(|p| {
            let out = denoise_with(&p.noisy, model, pipeline)?;
            Ok(SceneMetrics { scene_id: p.scene_id.clone(), exposure_ratio: p.exposure_ratio, report: MetricsReport::compute(&p.clean, &out)? })
        })
        .collect()
}

/// Scores the noisy inputs clamped to `[0, 1]`, the range every denoised output is held to.
pub fn evaluate_noisy<T: Scalar>(pairs: &[PairedSample<T>]) -> Result<Vec<SceneMetrics>> {
    pairs
        .iter()
        .map(|p| {
            let input = SpectralCube::from_tensor_clamped(p.noisy.data().clone(), p.noisy.wavelengths().to_vec())?;
            Ok(SceneMetrics { scene_id: p.scene_id.clone(), exposure_ratio: p.exposure_ratio, report: MetricsReport::compute(&p.clean, &input)? })
        })
        .collect()
}

/// Element-wise mean of reports (per-band PSNR averaged band by band).
pub fn mean_report(rows: &[SceneMetrics]) -> Result<MetricsReport> {
    let first = rows.first().ok_or_else(|| arg("no rows to average"))?;
    let n = rows.len() as f64;
    let bands = first.report.per_band_psnr.len();
    if rows.iter().any(|r| r.report.per_band_psnr.len() != bands) {
        return Err(arg("rows differ in band count"));
    }
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    Ok(MetricsReport {
        psnr_db: avg(&|r| r.psnr_db),
        ssim: avg(&|r| r.ssim),
        sam_deg: avg(&|r| r.sam_deg),
        per_band_psnr: (0..bands).map(|b| avg(&|r| r.per_band_psnr[b])).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    EndToEnd,
    MultistageNoHfwg,
    MultistageFull,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::EndToEnd, AblationMode::MultistageNoHfwg, AblationMode::MultistageFull];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::EndToEnd => "end_to_end",
            AblationMode::MultistageNoHfwg => "multistage_no_hfwg",
            AblationMode::MultistageFull => "multistage_full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    /// Optimizer steps taken over all stages.
    pub steps: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    /// Training time of this mode, including any shared stage 1.
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub mode: AblationMode,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_sam_deg: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    pub noisy_psnr_db: f64,
}

impl AblationReport {
    pub fn mean_psnr(&self, mode: AblationMode) -> Option<f64> {
        self.summary.iter().find(|s| s.mode == mode).map(|s| s.mean_psnr_db)
    }
}

fn stage_steps<T>(c: &Checkpoint<T>) -> u64 {
    c.step
}

/// Trains every mode for every seed under the same step budget and scores the test pairs.
///
/// The multistage variants share their stage-1 EMNet for a given seed; they differ only in
/// whether IMNet receives wavelet guidance.
pub fn run_ablation<T: Scalar>(
    modes: &[AblationMode],
    train: &[PairedSample<T>],
    test: &[PairedSample<T>],
    noise: &NoiseModel,
    cfg: &TrainConfig,
    seeds: &[u64],
    log: &mut dyn TrainLog,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let clean: Vec<CleanScene<T>> = train.iter().map(CleanScene::from_pair).collect();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let needs_stage1 = modes.iter().any(|m| *m != AblationMode::EndToEnd);
        let t0 = Instant::now();
        let stage1 = if needs_stage1 { Some(train_stage1(&clean, noise, &cfg, log)?) } else { None };
        let stage1_time = t0.elapsed().as_secs_f64();
        for &mode in modes {
            let t = Instant::now();
            let shared = if mode == AblationMode::EndToEnd { 0.0 } else { stage1_time };
            let (model, steps) = match mode {
                AblationMode::EndToEnd => {
                    let c = train_end_to_end(train, noise, &cfg, log)?;
                    let steps = stage_steps(&c);
                    (c.model, steps)
                }
                AblationMode::MultistageFull | AblationMode::MultistageNoHfwg => {
                    let mut c1 = stage1.clone().expect("stage 1 trained");
                    let guided = mode == AblationMode::MultistageFull;
                    let mode_cfg = TrainConfig { guidance: guided, ..cfg.clone() };
                    c1.model.imnet = build_imnet(&cfg.backbone, mode_cfg.guidance_config(), c1.seed ^ 0x9e37_79b9_7f4a_7c15)?;
                    c1.model.imnet.frozen = true;
                    let c2 = train_stage2(train, &c1, noise, &mode_cfg, log)?;
                    let c3 = train_stage3(train, &c2, noise, &mode_cfg, log)?;
                    let steps = stage_steps(&c1) + stage_steps(&c2) + stage_steps(&c3);
                    (c3.model, steps)
                }
            };
            let wall_time_s = shared + t.elapsed().as_secs_f64();
            let m = mean_report(&evaluate(&model, Pipeline::Full, test)?)?;
            log::info!("ablation {} seed {seed}: {:.3} dB", mode.name(), m.psnr_db);
            rows.push(AblationRow { mode, seed, steps, psnr_db: m.psnr_db, ssim: m.ssim, sam_deg: m.sam_deg, wall_time_s });
        }
    }
    let summary = modes
        .iter()
        .map(|&mode| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let n = sel.len() as f64;
            AblationSummary {
                mode,
                mean_psnr_db: sel.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                mean_sam_deg: sel.iter().map(|r| r.sam_deg).sum::<f64>() / n,
                steps: sel.first().map_or(0, |r| r.steps),
            }
        })
        .collect();
    let noisy_psnr_db = mean_report(&evaluate_noisy(test)?)?.psnr_db;
    Ok(AblationReport { rows, summary, noisy_psnr_db })
}
