//! Spectral cube data model, the `HSIC` binary format, patch extraction, dihedral
//! augmentation and dataset splitting.
//!
//! File layout (little-endian): magic `HSIC`, `u16` version (1), `u32` D, H, W, then
//! `D*H*W` `f32` values, band-major and row-major within each band. Wavelengths and scene
//! metadata live in a `<stem>.meta.json` sidecar next to the cube.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, HsidError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSIC";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;
/// Values this far outside `[0, 1]` are clamped silently; anything further is a data error.
pub const CLAMP_TOLERANCE: f64 = 1e-6;
/// Wavelength grid assumed when a cube has no sidecar.
pub const DEFAULT_RANGE_NM: (f64, f64) = (400.0, 700.0);

/// `D x H x W` reflectance cube in `[0, 1]` with per-band wavelengths (nm).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube<T> {
    data: Tensor<T>,
    wavelengths: Vec<f64>,
}

pub fn uniform_wavelengths(bands: usize) -> Vec<f64> {
    let (lo, hi) = DEFAULT_RANGE_NM;
    if bands == 1 {
        return vec![lo];
    }
    (0..bands).map(|i| lo + (hi - lo) * i as f64 / (bands - 1) as f64).collect()
}

impl<T: Scalar> SpectralCube<T> {
    pub fn new(data: Tensor<T>, wavelengths: Vec<f64>) -> Result<Self> {
        let [d, h, w] = match data.shape() {
            [d, h, w] => [*d, *h, *w],
            other => return Err(arg(format!("cube must be D x H x W, got {other:?}"))),
        };
        if d < 1 || h < 2 || w < 2 {
            return Err(arg(format!("cube dims {d}x{h}x{w} too small (need D>=1, H>=2, W>=2)")));
        }
        if wavelengths.len() != d {
            return Err(arg(format!("{} wavelengths for {} bands", wavelengths.len(), d)));
        }
        if wavelengths.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(arg("wavelengths must be strictly increasing"));
        }
        if !data.data().iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()) {
            return Err(HsidError::Data("cube values must be finite and within [0, 1]".into()));
        }
        Ok(Self { data, wavelengths })
    }

    /// Builds a cube on the default wavelength grid.
    pub fn from_tensor(data: Tensor<T>) -> Result<Self> {
        let d = data.shape().first().copied().unwrap_or(0);
        Self::new(data, uniform_wavelengths(d))
    }

    /// Clamps into `[0, 1]` first; for network outputs.
    pub fn from_tensor_clamped(data: Tensor<T>, wavelengths: Vec<f64>) -> Result<Self> {
        let clamped = data.map(|v| v.max(T::zero()).min(T::one()));
        Self::new(clamped, wavelengths)
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.bands(), self.height(), self.width()]
    }

    pub fn band(&self, b: usize) -> &[T] {
        let n = self.height() * self.width();
        &self.data.data()[b * n..(b + 1) * n]
    }

    /// Spatial window `[top, top+size) x [left, left+size)` across all bands.
    pub fn window(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        let [d, h, w] = self.shape();
        if top + size_h > h || left + size_w > w {
            return Err(arg("window exceeds cube bounds"));
        }
        let mut out = Vec::with_capacity(d * size_h * size_w);
        for b in 0..d {
            for r in top..top + size_h {
                let row = (b * h + r) * w;
                out.extend_from_slice(&self.data.data()[row + left..row + left + size_w]);
            }
        }
        Ok(Self { data: Tensor::from_vec(&[d, size_h, size_w], out)?, wavelengths: self.wavelengths.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> SpectralCube<U> {
        SpectralCube { data: self.data.cast(), wavelengths: self.wavelengths.clone() }
    }
}

/// Clean/noisy pair of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    pub clean: SpectralCube<T>,
    pub noisy: SpectralCube<T>,
    pub exposure_ratio: f64,
    pub scene_id: String,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(clean: SpectralCube<T>, noisy: SpectralCube<T>, exposure_ratio: f64, scene_id: impl Into<String>) -> Result<Self> {
        if clean.shape() != noisy.shape() || clean.wavelengths() != noisy.wavelengths() {
            return Err(arg("clean and noisy cubes differ in shape or wavelengths"));
        }
        if !(exposure_ratio > 0.0) {
            return Err(arg("exposure ratio must be positive"));
        }
        Ok(Self { clean, noisy, exposure_ratio, scene_id: scene_id.into() })
    }
}

/// Sidecar metadata written next to each cube file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    pub wavelengths_nm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_ratio: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Decodes an `HSIC` byte buffer (no sidecar handling).
pub fn decode_cube<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(HsidError::Format("missing HSIC magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(HsidError::Format(format!("unsupported format version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (d, h, w) = (dim(0), dim(1), dim(2));
    if d == 0 || h < 2 || w < 2 {
        return Err(HsidError::Format(format!("invalid dims {d}x{h}x{w}")));
    }
    let count = d.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| HsidError::Format("dims overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(HsidError::Format(format!(
            "header declares {d}x{h}x{w} ({} bytes) but payload has {} bytes",
            count * 4,
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(HsidError::Data(format!("non-finite value at index {i}")));
        }
        if v < -CLAMP_TOLERANCE || v > 1.0 + CLAMP_TOLERANCE {
            return Err(HsidError::Data(format!("value {v} at index {i} outside [0, 1]")));
        }
        values.push(T::c(v.clamp(0.0, 1.0)));
    }
    Tensor::from_vec(&[d, h, w], values)
}

pub fn encode_cube<T: Scalar>(data: &Tensor<T>) -> Vec<u8> {
    let s = data.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

pub fn read_meta(path: &Path) -> Result<Option<CubeMeta>> {
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| HsidError::io(&meta_path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn load_cube<T: Scalar>(path: &Path) -> Result<SpectralCube<T>> {
    let bytes = fs::read(path).map_err(|e| HsidError::io(path, e))?;
    let data = decode_cube(&bytes)?;
    let d = data.shape()[0];
    let wavelengths = match read_meta(path)? {
        Some(meta) => meta.wavelengths_nm,
        None => uniform_wavelengths(d),
    };
    SpectralCube::new(data, wavelengths)
}

pub fn save_cube<T: Scalar>(cube: &SpectralCube<T>, path: &Path) -> Result<()> {
    let meta = CubeMeta { wavelengths_nm: cube.wavelengths().to_vec(), ..Default::default() };
    save_cube_with_meta(cube, &meta, path)
}

pub fn save_cube_with_meta<T: Scalar>(cube: &SpectralCube<T>, meta: &CubeMeta, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| HsidError::io(path, e))?;
    file.write_all(&encode_cube(cube.data())).map_err(|e| HsidError::io(path, e))?;
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| HsidError::io(&meta_path, e))
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub scene_id: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| HsidError::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.clean.is_relative() {
            e.clean = base.join(&e.clean);
        }
        if e.noisy.is_relative() {
            e.noisy = base.join(&e.noisy);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(entries)?).map_err(|e| HsidError::io(path, e))
}

/// Loads every pair of a manifest; the exposure ratio comes from the noisy cube's sidecar.
pub fn load_pairs<T: Scalar>(manifest: &Path) -> Result<Vec<PairedSample<T>>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let clean = load_cube(&e.clean)?;
            let noisy = load_cube(&e.noisy)?;
            let ratio = read_meta(&e.noisy)?.and_then(|m| m.exposure_ratio).unwrap_or(1.0);
            PairedSample::new(clean, noisy, ratio, e.scene_id)
        })
        .collect()
}

/// Window origins along one axis; the final window is clamped to `n - size`.
pub fn axis_origins(n: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + size >= n {
            let last = n - size;
            if out.last() != Some(&last) {
                out.push(last);
            }
            return out;
        }
        out.push(o);
        o += stride;
    }
}

/// Row-major list of `(top, left)` patch origins.
pub fn patch_origins(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > h || size > w {
        return Err(arg(format!("patch size {size} does not fit a {h}x{w} cube")));
    }
    if stride == 0 {
        return Err(arg("stride must be at least 1"));
    }
    let rows = axis_origins(h, size, stride);
    let cols = axis_origins(w, size, stride);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

pub fn crop_patches<T: Scalar>(cube: &SpectralCube<T>, size: usize, stride: usize) -> Result<Vec<SpectralCube<T>>> {
    patch_origins(cube.height(), cube.width(), size, stride)?
        .into_iter()
        .map(|(r, c)| cube.window(r, c, size, size))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Flip followed by a counter-clockwise rotation of `quarter_turns * 90` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dihedral {
    pub flip: Flip,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: Flip::None, quarter_turns: 0 };

    /// Uniform draw from `{identity, h-flip, v-flip} x {0, 90, 180, 270}`.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.gen_range(0..3)];
        Dihedral { flip, quarter_turns: rng.gen_range(0..4) }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinate in the input for output coordinate `(r, c)`.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        // undo the rotation first: output dims are (oh, ow)
        let (mut r, mut c) = (r, c);
        let (mut ch, mut cw) = self.out_dims(h, w);
        for _ in 0..self.quarter_turns % 4 {
            // one CCW turn maps (r, c) of a (ch x cw) image from (c, cw' - 1 - r) of the pre-turn (cw x ch) image
            let (pr, pc) = (c, ch - 1 - r);
            r = pr;
            c = pc;
            std::mem::swap(&mut ch, &mut cw);
        }
        match self.flip {
            Flip::None => (r, c),
            Flip::Horizontal => (r, w - 1 - c),
            Flip::Vertical => (h - 1 - r, c),
        }
    }

    /// Applies the transform to every band of a `D x H x W` tensor.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, h, w) = match t.shape() {
            [d, h, w] => (*d, *h, *w),
            other => return Err(arg(format!("expected D x H x W, got {other:?}"))),
        };
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(arg(format!("rotation by 90 degrees needs a square patch, got {h}x{w}")));
        }
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Vec::with_capacity(t.len());
        for b in 0..d {
            let plane = &t.data()[b * h * w..(b + 1) * h * w];
            for r in 0..oh {
                for c in 0..ow {
                    let (sr, sc) = self.source(r, c, h, w);
                    out.push(plane[sr * w + sc]);
                }
            }
        }
        Tensor::from_vec(&[d, oh, ow], out)
    }

    pub fn inverse(&self) -> Self {
        match self.flip {
            // a flip followed by rotation R: inverse is R^-1 then flip, which equals flip then R
            // for reflections (F R F = R^-1).
            Flip::None => Dihedral { flip: Flip::None, quarter_turns: (4 - self.quarter_turns % 4) % 4 },
            _ => *self,
        }
    }
}

/// Random dihedral augmentation of a patch; returns the patch and the drawn transform.
pub fn augment<T: Scalar>(patch: &SpectralCube<T>, seed: u64) -> Result<(SpectralCube<T>, Dihedral)> {
    let t = Dihedral::draw(seed);
    let data = t.apply(patch.data())?;
    Ok((SpectralCube { data, wavelengths: patch.wavelengths.clone() }, t))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

pub fn split_dataset(ids: &[String], test_count: usize, seed: u64) -> Result<DatasetSplit> {
    if test_count == 0 || test_count >= ids.len() {
        return Err(arg(format!("test_count {test_count} must be in 1..{}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = shuffled.split_off(ids.len() - test_count);
    Ok(DatasetSplit { train_ids: shuffled, test_ids, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_cube(d: usize, h: usize, w: usize) -> SpectralCube<f32> {
        let n = d * h * w;
        let data = (0..n).map(|i| (i as f32) / n as f32).collect();
        SpectralCube::from_tensor(Tensor::from_vec(&[d, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.hsic");
        let cube = ramp_cube(8, 32, 32);
        save_cube(&cube, &p).unwrap();
        let back: SpectralCube<f32> = load_cube(&p).unwrap();
        assert_eq!(back, cube);
        // overwrite with new content
        let half = SpectralCube::from_tensor(Tensor::full(&[8, 32, 32], 0.5f32)).unwrap();
        save_cube(&half, &p).unwrap();
        let back: SpectralCube<f32> = load_cube(&p).unwrap();
        assert!(back.data().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = encode_cube(&Tensor::<f32>::full(&[8, 64, 64], 0.1));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_cube::<f32>(&bytes), Err(HsidError::Format(_))));
        assert!(matches!(decode_cube::<f32>(b"NOPE\x01\x00"), Err(HsidError::Format(_))));
    }

    #[test]
    fn non_finite_and_far_out_of_range_are_data_errors() {
        let mut t = Tensor::<f32>::full(&[1, 2, 2], 0.1);
        t.data_mut()[2] = f32::NAN;
        assert!(matches!(decode_cube::<f32>(&encode_cube(&t)), Err(HsidError::Data(_))));
        t.data_mut()[2] = 1.5;
        assert!(matches!(decode_cube::<f32>(&encode_cube(&t)), Err(HsidError::Data(_))));
        t.data_mut()[2] = 1.0 + 5e-7;
        assert_eq!(decode_cube::<f32>(&encode_cube(&t)).unwrap().data()[2], 1.0);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let cube = ramp_cube(1, 2, 2);
        let err = save_cube(&cube, Path::new("/nonexistent-dir-hsid/x.hsic")).unwrap_err();
        assert!(matches!(err, HsidError::Io { .. }));
    }

    #[test]
    fn missing_sidecar_defaults_to_visible_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.hsic");
        fs::write(&p, encode_cube(&Tensor::<f32>::full(&[4, 2, 2], 0.2))).unwrap();
        let c: SpectralCube<f32> = load_cube(&p).unwrap();
        assert_eq!(c.wavelengths(), &[400.0, 500.0, 600.0, 700.0]);
    }

    #[test]
    fn patch_tiling_cases() {
        let o = patch_origins(256, 256, 128, 128).unwrap();
        assert_eq!(o, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        assert_eq!(patch_origins(128, 128, 128, 128).unwrap().len(), 1);
        assert_eq!(axis_origins(200, 128, 64), vec![0, 64, 72]);
        assert_eq!(patch_origins(200, 200, 128, 64).unwrap().len(), 9);
        assert!(patch_origins(100, 200, 128, 64).is_err());
        assert!(patch_origins(200, 200, 128, 0).is_err());
    }

    #[test]
    fn patches_keep_all_bands() {
        let cube = ramp_cube(3, 10, 12);
        let patches = crop_patches(&cube, 6, 4).unwrap();
        assert!(patches.iter().all(|p| p.shape() == [3, 6, 6]));
        assert_eq!(patches[0].band(1)[0], cube.band(1)[0]);
    }

    #[test]
    fn every_dihedral_inverse_restores_input() {
        let cube = ramp_cube(2, 5, 5);
        for flip in [Flip::None, Flip::Horizontal, Flip::Vertical] {
            for q in 0..4 {
                let t = Dihedral { flip, quarter_turns: q };
                let y = t.apply(cube.data()).unwrap();
                let back = t.inverse().apply(&y).unwrap();
                assert_eq!(&back, cube.data(), "{t:?}");
            }
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let r = Dihedral { flip: Flip::None, quarter_turns: 1 }.apply(&t).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn augment_is_deterministic_and_rejects_non_square_rotation() {
        let cube = ramp_cube(2, 6, 6);
        assert_eq!(augment(&cube, 7).unwrap(), augment(&cube, 7).unwrap());
        let rect = ramp_cube(1, 4, 6);
        let rot = Dihedral { flip: Flip::None, quarter_turns: 1 };
        assert!(rot.apply(rect.data()).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let ids: Vec<String> = (0..59).map(|i| format!("s{i:02}")).collect();
        let s = split_dataset(&ids, 15, 3).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (44, 15));
        assert!(s.train_ids.iter().all(|id| !s.test_ids.contains(id)));
        assert_eq!(s, split_dataset(&ids, 15, 3).unwrap());
        assert!(split_dataset(&ids, 0, 3).is_err());
        assert!(split_dataset(&ids, 59, 3).is_err());
    }
}
