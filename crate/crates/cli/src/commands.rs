//! Subcommand implementations.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use hsid::checkpoint::Checkpoint;
use hsid::cube_io::{load_pairs, save_cube_with_meta, CubeMeta, PairedSample};
use hsid::noise_synth::{calibrate as fit_noise, NoiseModel};
use hsid::toy::{generate_toy, write_toy};
use hsid::trainer::{
    denoise as run_final, denoise_with, evaluate, evaluate_noisy, mean_report, train_stage1, train_stage2, train_stage3,
    CleanScene, JsonLinesLog, Pipeline,
};
use hsid::Scalar;
use log::info;

use crate::config::{Paths, Precision, RunConfig};
use crate::report::{self, EvalReport, PlotInfo};
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub paths: Paths,
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::other(format!("cannot create {}: {e}", dir.display())))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::state(format!("{what} not found at {}", path.display())))
    }
}

pub fn gen_toy(ctx: &Context) -> Result<(), CliError> {
    let data = generate_toy::<f32>(&ctx.cfg.toy)?;
    mkdir(&ctx.paths.data)?;
    let layout = write_toy(&data, &ctx.paths.data)?;
    info!(
        "wrote {} train, {} test and {} calibration pairs to {}",
        data.train.len(),
        data.test.len(),
        data.calibration.len(),
        ctx.paths.data.display()
    );
    info!("train manifest {}", layout.train_manifest.display());
    Ok(())
}

pub fn calibrate(ctx: &Context) -> Result<(), CliError> {
    let manifest = &ctx.paths.calibration_manifest;
    require(manifest, "calibration manifest")?;
    let pairs = load_pairs::<f64>(manifest)?;
    let ratio = ctx.cfg.calibrate.reference_ratio.or_else(|| pairs.first().map(|p| p.exposure_ratio)).unwrap_or(1.0);
    let params = fit_noise(&pairs)?;
    let model = NoiseModel::new(params, ratio)?;
    mkdir(&ctx.paths.out)?;
    model.save(&ctx.paths.noise_model)?;
    info!("k = {:.4}, noise model written to {}", model.params.k, ctx.paths.noise_model.display());
    Ok(())
}

pub fn train(ctx: &Context, stages: &[u8]) -> Result<(), CliError> {
    match ctx.cfg.train.precision {
        Precision::F32 => train_typed::<f32>(ctx, stages),
        Precision::F64 => train_typed::<f64>(ctx, stages),
    }
}

fn train_typed<T: Scalar>(ctx: &Context, stages: &[u8]) -> Result<(), CliError> {
    let p = &ctx.paths;
    // prerequisites are checked before any work
    if let Some(&first) = stages.first() {
        if first > 1 {
            require(&p.checkpoint(first - 1), &format!("stage-{} checkpoint required by stage {first}", first - 1))?;
        }
    }
    require(&p.train_manifest, "training manifest")?;
    require(&p.noise_model, "noise model (run `hsid calibrate` first)")?;
    let cfg = &ctx.cfg.train.config;
    let pairs = load_pairs::<T>(&p.train_manifest)?;
    let noise = NoiseModel::load(&p.noise_model)?;
    mkdir(&p.checkpoints)?;
    mkdir(&p.logs)?;
    for &stage in stages {
        let log_path = p.logs.join(format!("stage{stage}.jsonl"));
        let file = File::create(&log_path).map_err(|e| CliError::other(format!("cannot create {}: {e}", log_path.display())))?;
        let mut log = JsonLinesLog::new(BufWriter::new(file));
        info!("training stage {stage}");
        let ckpt = match stage {
            1 => {
                let clean: Vec<CleanScene<T>> = pairs.iter().map(CleanScene::from_pair).collect();
                train_stage1(&clean, &noise, cfg, &mut log)?
            }
            2 => train_stage2(&pairs, &Checkpoint::load(&p.checkpoint(1))?, &noise, cfg, &mut log)?,
            _ => train_stage3(&pairs, &Checkpoint::load(&p.checkpoint(2))?, &noise, cfg, &mut log)?,
        };
        ckpt.save(&p.checkpoint(stage))?;
        info!("stage {stage} done after {} steps, checkpoint {}", ckpt.step, p.checkpoint(stage).display());
    }
    Ok(())
}

fn load_checkpoint(path: &Path, allow_any_stage: bool) -> Result<Checkpoint<f32>, CliError> {
    require(path, "checkpoint")?;
    let ckpt = Checkpoint::<f32>::load(path)?;
    if !allow_any_stage && ckpt.stage != 3 && ckpt.stage != 4 {
        return Err(CliError::state(format!(
            "{} holds a stage-{} checkpoint; set allow_any_stage to use it",
            path.display(),
            ckpt.stage
        )));
    }
    Ok(ckpt)
}

fn infer(noisy: &PairedSample<f32>, ckpt: &Checkpoint<f32>, allow_any_stage: bool) -> Result<hsid::cube_io::SpectralCube<f32>, CliError> {
    Ok(if allow_any_stage { denoise_with(&noisy.noisy, &ckpt.model, Pipeline::Full)? } else { run_final(&noisy.noisy, ckpt)? })
}

pub fn denoise(ctx: &Context) -> Result<(), CliError> {
    let p = &ctx.paths;
    let sec = &ctx.cfg.denoise;
    require(&p.denoise_manifest, "manifest")?;
    let ckpt = load_checkpoint(&p.denoise_checkpoint, sec.allow_any_stage)?;
    let pairs = load_pairs::<f32>(&p.denoise_manifest)?;
    mkdir(&p.denoised)?;
    for pair in &pairs {
        let out = infer(pair, &ckpt, sec.allow_any_stage)?;
        let meta = CubeMeta {
            wavelengths_nm: out.wavelengths().to_vec(),
            scene_id: Some(pair.scene_id.clone()),
            exposure_ratio: Some(pair.exposure_ratio),
        };
        save_cube_with_meta(&out, &meta, &p.denoised.join(format!("{}.hsic", pair.scene_id)))?;
    }
    info!("denoised {} cubes into {}", pairs.len(), p.denoised.display());
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let p = &ctx.paths;
    let sec = &ctx.cfg.eval;
    require(&p.eval_manifest, "test manifest")?;
    let ckpt = load_checkpoint(&p.eval_checkpoint, sec.allow_any_stage)?;
    let mut pairs = load_pairs::<f32>(&p.eval_manifest)?;
    if pairs.is_empty() {
        return Err(CliError::config("test manifest is empty"));
    }
    pairs.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let plot_index = match &sec.plot_scene {
        Some(id) => pairs.iter().position(|x| &x.scene_id == id).ok_or_else(|| CliError::config(format!("plot_scene '{id}' is not in the manifest")))?,
        None => 0,
    };
    let rows = evaluate(&ckpt.model, Pipeline::Full, &pairs)?;
    let average = mean_report(&rows)?;
    let noisy_average = mean_report(&evaluate_noisy(&pairs)?)?;

    mkdir(&p.eval_dir)?;
    let scene = &pairs[plot_index];
    let out = infer(scene, &ckpt, true)?;
    let error_map = format!("error_map_{}.png", scene.scene_id);
    report::save_png(&p.eval_dir.join(&error_map), &report::error_map(&scene.clean, &out))?;
    let clean_spec = report::mean_spectrum(&scene.clean);
    let denoised_spec = report::mean_spectrum(&out);
    let correlation = report::pearson(&clean_spec, &denoised_spec);
    let spectral_curve = format!("spectra_{}.svg", scene.scene_id);
    let svg = report::spectral_svg(
        scene.clean.wavelengths(),
        &[
            ("clean", "black", clean_spec),
            ("noisy", "#c0392b", report::mean_spectrum(&scene.noisy)),
            ("denoised", "#2471a3", denoised_spec),
        ],
        &format!("{}: mean spectra (r = {correlation:.4})", scene.scene_id),
    );
    report::save_text(&p.eval_dir.join(&spectral_curve), &svg)?;

    report::write_csv(&p.eval_dir.join("metrics.csv"), &rows, &average)?;
    let full = EvalReport {
        checkpoint_stage: ckpt.stage,
        scenes: rows,
        average,
        noisy_average,
        plot: PlotInfo { scene_id: scene.scene_id.clone(), error_map, spectral_curve, correlation },
    };
    report::write_json(&p.eval_dir.join("metrics.json"), &full)?;
    info!(
        "average PSNR {:.3} dB (noisy {:.3} dB), SSIM {:.4}, SAM {:.3} deg",
        full.average.psnr_db, full.noisy_average.psnr_db, full.average.ssim, full.average.sam_deg
    );
    Ok(())
}
