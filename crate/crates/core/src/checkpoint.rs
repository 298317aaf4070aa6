//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | `0..4`           | magic `HSCK`                              |
//! | `4..6`           | `u16` format version                      |
//! | `6..14`          | `u64` length `N` of the JSON index        |
//! | `14..14+N`       | UTF-8 JSON index                          |
//! | `14+N..`         | tensor blobs, back to back                |
//!
//! The index records the stage, counters, seed, both networks' specs and flags, and one
//! entry `{name, shape, offset}` per tensor, where `offset` counts elements from the start of
//! the blob area. Blobs are `f32` or `f64` as named by the index `dtype`. Tensor names are
//! `emnet/<param>`, `imnet/<param>` and `opt/<net>/{m,v}/<param>` for optimizer moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HsidError, Result};
use crate::nets::{BackboneSpec, GuidanceConfig, ModelParams, Network, ParamSet};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const FORMAT_VERSION: u16 = 1;

/// Trained (or initial) state of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// 0 for a fresh initialization, otherwise the stage that produced it.
    pub stage: u8,
    /// Completed epochs within `stage`.
    pub epochs_done: usize,
    /// Optimizer steps taken within `stage`.
    pub step: u64,
    pub seed: u64,
    pub model: ModelParams<T>,
    pub emnet_opt: Option<AdamState<T>>,
    pub imnet_opt: Option<AdamState<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetIndex {
    spec: BackboneSpec,
    guidance: Option<GuidanceConfig>,
    frozen: bool,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    dtype: String,
    stage: u8,
    epochs_done: usize,
    step: u64,
    seed: u64,
    emnet: NetIndex,
    imnet: NetIndex,
    tensors: Vec<TensorEntry>,
}

struct Writer<'a, T> {
    entries: Vec<TensorEntry>,
    blobs: Vec<&'a Tensor<T>>,
    offset: usize,
}

impl<'a, T: Scalar> Writer<'a, T> {
    fn push(&mut self, name: String, t: &'a Tensor<T>) {
        self.entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: self.offset });
        self.offset += t.len();
        self.blobs.push(t);
    }

    fn net(&mut self, prefix: &str, net: &'a Network<T>, opt: Option<&'a AdamState<T>>) {
        for (n, t) in net.params.iter() {
            self.push(format!("{prefix}/{n}"), t);
        }
        if let Some(opt) = opt {
            for ((n, _), (m, v)) in net.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                self.push(format!("opt/{prefix}/m/{n}"), m);
                self.push(format!("opt/{prefix}/v/{n}"), v);
            }
        }
    }
}

fn net_index<T>(net: &Network<T>, opt: Option<&AdamState<T>>) -> NetIndex {
    NetIndex { spec: net.spec.clone(), guidance: net.guidance, frozen: net.frozen, optimizer_step: opt.map(|o| o.step) }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer { entries: Vec::new(), blobs: Vec::new(), offset: 0 };
        w.net("emnet", &self.model.emnet, self.emnet_opt.as_ref());
        w.net("imnet", &self.model.imnet, self.imnet_opt.as_ref());
        let index = Index {
            dtype: T::DTYPE.to_string(),
            stage: self.stage,
            epochs_done: self.epochs_done,
            step: self.step,
            seed: self.seed,
            emnet: net_index(&self.model.emnet, self.emnet_opt.as_ref()),
            imnet: net_index(&self.model.imnet, self.imnet_opt.as_ref()),
            tensors: w.entries,
        };
        let json = serde_json::to_vec(&index)?;
        let width = std::mem::size_of::<T>();
        let mut out = Vec::with_capacity(14 + json.len() + w.offset * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in w.blobs {
            for v in t.data() {
                if width == 4 {
                    out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| HsidError::Format(m);
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(fmt("missing HSCK magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let json = bytes.get(14..14usize.saturating_add(n)).ok_or_else(|| fmt("truncated checkpoint index".into()))?;
        let index: Index = serde_json::from_slice(json)?;
        let width = match index.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt(format!("unknown checkpoint dtype '{other}'"))),
        };
        let blobs = &bytes[14 + n..];
        let read = |e: &TensorEntry| -> Result<Tensor<T>> {
            let count: usize = e.shape.iter().product();
            let (start, end) = (e.offset * width, (e.offset + count) * width);
            let raw = blobs.get(start..end).ok_or_else(|| fmt(format!("tensor {} exceeds the blob area", e.name)))?;
            let values = raw
                .chunks_exact(width)
                .map(|c| if width == 4 { f32::from_le_bytes(c.try_into().unwrap()) as f64 } else { f64::from_le_bytes(c.try_into().unwrap()) })
                .map(T::from_f64_lossy)
                .collect();
            Tensor::from_vec(&e.shape, values)
        };
        let mut sets: [ParamSet<T>; 2] = [ParamSet::new(), ParamSet::new()];
        let mut moments: [(Vec<Tensor<T>>, Vec<Tensor<T>>); 2] = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
        for e in &index.tensors {
            let t = read(e)?;
            let (slot, rest) = if let Some(r) = e.name.strip_prefix("emnet/") {
                (0, r)
            } else if let Some(r) = e.name.strip_prefix("imnet/") {
                (1, r)
            } else if let Some(r) = e.name.strip_prefix("opt/emnet/") {
                push_moment(&mut moments[0], r, t, &e.name)?;
                continue;
            } else if let Some(r) = e.name.strip_prefix("opt/imnet/") {
                push_moment(&mut moments[1], r, t, &e.name)?;
                continue;
            } else {
                return Err(fmt(format!("unexpected tensor name {}", e.name)));
            };
            sets[slot].insert(rest, t);
        }
        let [em_set, im_set] = sets;
        let [em_mom, im_mom] = moments;
        let build = |idx: &NetIndex, params: ParamSet<T>, (m, v): (Vec<Tensor<T>>, Vec<Tensor<T>>)| -> Result<(Network<T>, Option<AdamState<T>>)> {
            let net = Network { spec: idx.spec.clone(), guidance: idx.guidance, params, frozen: idx.frozen };
            let opt = idx.optimizer_step.map(|step| AdamState { step, m, v });
            if let Some(o) = &opt {
                if !o.matches(&net.params) {
                    return Err(HsidError::Format("optimizer moments do not match parameters".into()));
                }
            }
            Ok((net, opt))
        };
        let (emnet, emnet_opt) = build(&index.emnet, em_set, em_mom)?;
        let (imnet, imnet_opt) = build(&index.imnet, im_set, im_mom)?;
        Ok(Self {
            stage: index.stage,
            epochs_done: index.epochs_done,
            step: index.step,
            seed: index.seed,
            model: ModelParams { emnet, imnet },
            emnet_opt,
            imnet_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| HsidError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HsidError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_moment<T>(slot: &mut (Vec<Tensor<T>>, Vec<Tensor<T>>), rest: &str, t: Tensor<T>, name: &str) -> Result<()> {
    if rest.starts_with("m/") {
        slot.0.push(t);
    } else if rest.starts_with("v/") {
        slot.1.push(t);
    } else {
        return Err(HsidError::Format(format!("unexpected optimizer tensor {name}")));
    }
    Ok(())
}
