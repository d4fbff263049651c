//! Training checkpoints: `"DSDC"`, version `u32`, a length-prefixed JSON
//! header, then tensors as `u32 rows, u32 cols` followed by little-endian
//! `f64` values. Tensor order: decoder parameters, their Adam first and
//! second moments, then per-shape `mu`, `log_sigma` and their moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamMoments;
use super::train::{TrainConfig, TrainState};
use super::LatentState;
use crate::error::{Error, Result};
use crate::nn::{DecoderParams, Tensor};

const MAGIC: &[u8; 4] = b"DSDC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    shape_ids: Vec<String>,
    epoch: usize,
    /// Learning rates the next epoch will use.
    effective_lr_params: f64,
    effective_lr_latent: f64,
    param_steps: Vec<u64>,
    latent_steps: Vec<(u64, u64)>,
}

fn put_tensor(buf: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) {
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(rows, cols, data)
    }

    fn vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let t = self.tensor()?;
        if t.len() != len {
            return Err(Error::Format(format!("expected {len} values, found {}", t.len())));
        }
        Ok(t.into_data())
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let hp = &state.config.hp;
    let factor = hp.lr_factor(state.epoch);
    let header = Header {
        config: state.config.clone(),
        shape_ids: state.shape_ids.clone(),
        epoch: state.epoch,
        effective_lr_params: hp.lr_params * factor,
        effective_lr_latent: hp.lr_latent * factor,
        param_steps: state.param_moments.iter().map(|m| m.t).collect(),
        latent_steps: state.latent_moments.iter().map(|(a, b)| (a.t, b.t)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = state.params.tensors();
    for t in &tensors {
        put_tensor(&mut buf, t.rows(), t.cols(), t.data());
    }
    for m in &state.param_moments {
        put_tensor(&mut buf, 1, m.m.len(), &m.m);
    }
    for m in &state.param_moments {
        put_tensor(&mut buf, 1, m.v.len(), &m.v);
    }
    for (lat, (mm, ms)) in state.latents.iter().zip(&state.latent_moments) {
        for v in [&lat.mu, &lat.log_sigma, &mm.m, &mm.v, &ms.m, &ms.v] {
            put_tensor(&mut buf, 1, v.len(), v);
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing DSDC header".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    header.config.validate()?;
    let net = &header.config.net;
    let n_tensors = crate::nn::N_LAYERS * 2 * 3;
    let tensors = (0..n_tensors).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let params = DecoderParams::from_tensors(net, tensors)?;
    if header.param_steps.len() != n_tensors {
        return Err(Error::Format("parameter step counts do not match".into()));
    }
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let ms = lens.iter().map(|&n| r.vec(n)).collect::<Result<Vec<_>>>()?;
    let vs = lens.iter().map(|&n| r.vec(n)).collect::<Result<Vec<_>>>()?;
    let param_moments = ms
        .into_iter()
        .zip(vs)
        .zip(&header.param_steps)
        .map(|((m, v), &t)| AdamMoments { m, v, t })
        .collect();
    let l = net.latent_dim;
    if header.latent_steps.len() != header.shape_ids.len() {
        return Err(Error::Format("latent step counts do not match the shape list".into()));
    }
    let mut latents = Vec::new();
    let mut latent_moments = Vec::new();
    for &(tm, ts) in &header.latent_steps {
        let mu = r.vec(l)?;
        let log_sigma = r.vec(l)?;
        let mm = AdamMoments {
            m: r.vec(l)?,
            v: r.vec(l)?,
            t: tm,
        };
        let msig = AdamMoments {
            m: r.vec(l)?,
            v: r.vec(l)?,
            t: ts,
        };
        latents.push(LatentState { mu, log_sigma });
        latent_moments.push((mm, msig));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the checkpoint".into()));
    }
    Ok(TrainState {
        config: header.config,
        shape_ids: header.shape_ids,
        params,
        param_moments,
        latents,
        latent_moments,
        epoch: header.epoch,
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("dsdc.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
