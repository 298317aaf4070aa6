//! Evaluation tables and plot files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hsid::cube_io::SpectralCube;
use hsid::metrics::MetricsReport;
use hsid::trainer::SceneMetrics;
use hsid::Scalar;
use image::{GrayImage, Luma};
use serde::Serialize;

use crate::CliError;

#[derive(Serialize)]
pub struct PlotInfo {
    pub scene_id: String,
    pub error_map: String,
    pub spectral_curve: String,
    /// Pearson correlation between the clean and denoised mean spectra.
    pub correlation: f64,
}

#[derive(Serialize)]
pub struct EvalReport {
    pub checkpoint_stage: u8,
    pub scenes: Vec<SceneMetrics>,
    pub average: MetricsReport,
    pub noisy_average: MetricsReport,
    pub plot: PlotInfo,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::other(format!("cannot write {}: {e}", path.display())))
}

/// One row per scene, then an `average` row.
pub fn write_csv(path: &Path, rows: &[SceneMetrics], average: &MetricsReport) -> Result<(), CliError> {
    let mut s = String::from("scene_id,exposure_ratio,psnr_db,ssim,sam_deg\n");
    for r in rows {
        let m = &r.report;
        writeln!(s, "{},{},{},{},{}", r.scene_id, r.exposure_ratio, m.psnr_db, m.ssim, m.sam_deg).unwrap();
    }
    writeln!(s, "average,,{},{},{}", average.psnr_db, average.ssim, average.sam_deg).unwrap();
    write(path, s)
}

pub fn write_json(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::other(e.to_string()))?;
    write(path, text)
}

/// Band-averaged absolute error, scaled so the largest error is white.
pub fn error_map<T: Scalar>(clean: &SpectralCube<T>, denoised: &SpectralCube<T>) -> GrayImage {
    let [d, h, w] = clean.shape();
    let mut err = vec![0.0f64; h * w];
    for b in 0..d {
        for (e, (x, y)) in err.iter_mut().zip(clean.band(b).iter().zip(denoised.band(b))) {
            *e += (x.to_f64_lossy() - y.to_f64_lossy()).abs() / d as f64;
        }
    }
    let peak = err.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([(err[y as usize * w + x as usize] * scale).round() as u8]))
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::other(format!("cannot write {}: {e}", path.display())))
}

pub fn mean_spectrum<T: Scalar>(cube: &SpectralCube<T>) -> Vec<f64> {
    (0..cube.bands())
        .map(|b| {
            let band = cube.band(b);
            band.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / band.len() as f64
        })
        .collect()
}

/// Pearson correlation; 0 when either input has no spread.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean spectra of several cubes against wavelength, as an SVG line chart.
pub fn spectral_svg(wavelengths: &[f64], curves: &[(&str, &str, Vec<f64>)], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let (x0, x1) = (wavelengths[0], *wavelengths.last().unwrap());
    let all = curves.iter().flat_map(|c| c.2.iter().cloned());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let px = |x: f64| pad + (x - x0) / (x1 - x0).max(f64::EPSILON) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">wavelength (nm)</text>"#, w / 2.0, h - 12.0).unwrap();
    for (x, label) in [(x0, x0), (x1, x1)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label:.0}</text>"#, px(x), h - pad + 16.0).unwrap();
    }
    for y in [lo, hi] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.3}</text>"#, pad - 4.0, py(y) + 4.0).unwrap();
    }
    for (i, (name, colour, values)) in curves.iter().enumerate() {
        let pts: Vec<String> = wavelengths.iter().zip(values).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = pad + 16.0 * i as f64;
        writeln!(s, r#"<text x="{}" y="{ly}" fill="{colour}">{name}</text>"#, w - pad - 80.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn save_text(path: &Path, text: &str) -> Result<(), CliError> {
    write(path, text)
}
