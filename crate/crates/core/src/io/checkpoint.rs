//! Versioned binary checkpoints with a JSON architecture sidecar.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON header, `u64`
//! element count, then every parameter as little-endian `f64` in key order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::gates::{AttentionGating, GateConfig};
use crate::model::{count_params, Architecture, ModelConfig, ModelParams};
use crate::pruning::{ModelState, SnConfig};
use crate::spectral::SpectralState;

pub const MAGIC: &[u8; 8] = b"SNIPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model plus the gate and normalisation settings it runs under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub gate: Option<GateConfig>,
    pub granularity: AttentionGating,
    pub sn: SnConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    arch: Architecture,
    tensors: Vec<(String, Vec<usize>)>,
    spectral: BTreeMap<String, SpectralState>,
    gate: Option<GateConfig>,
    granularity: AttentionGating,
    sn: SnConfig,
    /// All randomness is derived from `(seed, step, epochs)`.
    seed: u64,
    step: u64,
    epochs: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    layout: String,
    live_heads: usize,
    live_ffns: usize,
    params: u64,
    arch: &'a Architecture,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let st = &ckpt.state;
    let keys = st.params.keys();
    let leaves = st.params.leaves();
    let header = Header {
        config: st.config.clone(),
        arch: st.arch.clone(),
        tensors: keys.iter().zip(&leaves).map(|(k, t)| (k.name.clone(), t.shape().to_vec())).collect(),
        spectral: st.spectral.clone(),
        gate: ckpt.gate,
        granularity: ckpt.granularity,
        sn: ckpt.sn.clone(),
        seed: st.seed,
        step: st.step,
        epochs: st.epochs,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total: usize = leaves.iter().map(|t| t.numel()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + total * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(total as u64).to_le_bytes());
    for t in &leaves {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        layout: st.arch.describe(),
        live_heads: st.arch.live_heads(),
        live_ffns: st.arch.live_ffns(),
        params: count_params(&st.config, &st.arch),
        arch: &st.arch,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u64("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let total = r.u64("element count")? as usize;
    let data = r.take(total.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad element count".into()))?, "data")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    header.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    header.arch.check(&header.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let template = ModelParams::init(&header.config, &header.arch, 0)?;
    let keys = template.keys();
    if keys.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture implies {}",
            header.tensors.len(),
            keys.len()
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = Vec::with_capacity(keys.len());
    for ((key, want), (name, shape)) in keys.iter().zip(template.leaves()).zip(&header.tensors) {
        if key.name != *name || want.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                key.name,
                want.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = values.by_ref().take(n).collect();
        if vals.len() != n {
            return Err(Error::Checkpoint("data shorter than manifest".into()));
        }
        tensors.push(Tensor::new(shape.clone(), vals)?);
    }
    if values.next().is_some() {
        return Err(Error::Checkpoint("data longer than manifest".into()));
    }
    let params = template.rebuild_with(&mut tensors.into_iter());
    Ok(Checkpoint {
        state: ModelState {
            config: header.config,
            arch: header.arch,
            params,
            spectral: header.spectral,
            step: header.step,
            epochs: header.epochs,
            seed: header.seed,
        },
        gate: header.gate,
        granularity: header.granularity,
        sn: header.sn,
    })
}
