//! Checkpoint files.
//!
//! Layout: magic `SRFCKPT1`, u32 LE version, u32 LE header length, JSON
//! [`CheckpointHeader`], every parameter as f32 LE in declared order, every
//! batchnorm running mean then running variance, then a u8 Adam flag. When
//! the flag is 1 it is followed by the step (u64 LE), lr, beta1, beta2, eps
//! (f64 LE) and the first and second moments (f32 LE, parameter order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NormMode, NormalizationStats};
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::model::Model;
use crate::nn::spec::ModelSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRFCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Normalization applied to network inputs and targets during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub intensity: NormalizationStats,
    pub relief: NormalizationStats,
    #[serde(default)]
    pub mode: NormMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub init_seed: u64,
    pub stats: Option<TrainingStats>,
    pub param_shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub stats: Option<TrainingStats>,
}

pub fn encode_checkpoint(
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    stats: Option<&TrainingStats>,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        init_seed: model.init_seed(),
        stats: stats.copied(),
        param_shapes: model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let put = |out: &mut Vec<u8>, v: &[f32]| {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for p in model.params() {
        put(&mut out, &p.data);
    }
    for (m, v) in model.buffers() {
        put(&mut out, m);
        put(&mut out, v);
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for c in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for m in &a.m {
                put(&mut out, m);
            }
            for v in &a.v {
                put(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.origin, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, dst: &mut [f32]) -> Result<()> {
        let src = self.take(4 * dst.len())?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

/// Decodes a checkpoint. With `expected_spec`, a checkpoint for any other
/// model name is rejected.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path, expected_spec: Option<&str>) -> Result<Checkpoint> {
    let bad = |reason: String| Error::format(origin, reason);
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected SRFCKPT1".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(want) = expected_spec {
        if header.spec.name != want {
            return Err(bad(format!("checkpoint holds `{}`, expected `{want}`", header.spec.name)));
        }
    }
    let mut model = Model::<f32>::from_spec(header.spec.clone(), header.init_seed)
        .map_err(|e| bad(format!("header spec: {e}")))?;
    let shapes: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if shapes != header.param_shapes {
        return Err(bad("parameter shapes disagree with the layer list".into()));
    }
    for p in model.params_mut() {
        r.f32s(&mut p.data)?;
    }
    for (m, v) in model.buffers_mut() {
        r.f32s(m)?;
        r.f32s(v)?;
    }
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut state = AdamState::new(&model, config).map_err(|e| bad(format!("adam: {e}")))?;
            state.step = step;
            for m in &mut state.m {
                r.f32s(m)?;
            }
            for v in &mut state.v {
                r.f32s(v)?;
            }
            Some(state)
        }
        f => return Err(bad(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let finite = model.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
        && model.buffers().iter().all(|(m, v)| m.iter().chain(v).all(|x| x.is_finite()));
    if !finite {
        return Err(bad("non-finite parameter values".into()));
    }
    Ok(Checkpoint {
        model,
        adam,
        stats: header.stats,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    stats: Option<&TrainingStats>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, stats)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_spec: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, expected_spec)
}
