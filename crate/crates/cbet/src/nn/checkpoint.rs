//! Self-contained model checkpoints.
//!
//! Little-endian layout, magic `CBCK`, version 1:
//! header, a caller-supplied JSON config blob, a named-parameter manifest
//! with raw float32 payloads, and an optional optimizer section (Adam
//! hyperparameters, step counter, both moment sets). Round trips are
//! value-exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::{Adam, AdamConfig};
use super::params::ParamStore;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dimension-count ceiling; real tensors here are rank 1 or 2.
const MAX_DIMS: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"CBCK\")")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated file: needed {needed} more bytes for {while_reading}")]
    Truncated {
        needed: u64,
        while_reading: &'static str,
    },
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("parameter {name} has {got} dims (limit {MAX_DIMS})")]
    TooManyDims { name: String, got: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("parameter set mismatch: {context}")]
    ParamMismatch { context: String },
    #[error("config blob is not valid UTF-8")]
    BadConfig,
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Saved Adam state.
#[derive(Debug, Clone)]
pub struct OptimSnapshot {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Everything needed to resume or evaluate: config JSON, named parameter
/// tensors in model order, optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimSnapshot>,
}

impl Checkpoint {
    /// Captures the current parameters (and optimizer, if given).
    pub fn snapshot(
        store: &ParamStore<f32>,
        adam: Option<&Adam<f32>>,
        config_json: String,
    ) -> Self {
        let params = store
            .iter()
            .map(|(name, value)| (name.to_string(), value.clone()))
            .collect();
        let optim = adam.map(|a| {
            let (m, v) = a.moments();
            OptimSnapshot {
                cfg: *a.config(),
                step: a.step_count(),
                m: m.to_vec(),
                v: v.to_vec(),
            }
        });
        Checkpoint {
            config_json,
            params,
            optim,
        }
    }

    /// Copies saved values into a freshly built store. The name sets and
    /// shapes must match exactly in both directions.
    pub fn apply_params(&self, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        if store.len() != self.params.len() {
            return Err(CheckpointError::ParamMismatch {
                context: format!(
                    "model has {} parameters, checkpoint has {}",
                    store.len(),
                    self.params.len()
                ),
            });
        }
        let mut by_name = std::collections::HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            by_name.insert(name.as_str(), i);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let Some(&i) = by_name.get(name.as_str()) else {
                return Err(CheckpointError::ParamMismatch {
                    context: format!("model parameter {name} missing from checkpoint"),
                });
            };
            let saved = &self.params[i].1;
            if saved.shape() != store.value(id).shape() {
                return Err(CheckpointError::ParamMismatch {
                    context: format!(
                        "{name}: checkpoint shape {:?} vs model shape {:?}",
                        saved.shape(),
                        store.value(id).shape()
                    ),
                });
            }
            store.value_mut(id).data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }

    /// Rebuilds the optimizer against `store` from the saved section.
    pub fn restore_adam(&self, store: &ParamStore<f32>) -> Result<Option<Adam<f32>>, CheckpointError> {
        let Some(snap) = &self.optim else {
            return Ok(None);
        };
        Adam::restore(snap.cfg, store, snap.m.clone(), snap.v.clone(), snap.step)
            .map(Some)
            .map_err(|e| CheckpointError::ParamMismatch {
                context: e.to_string(),
            })
    }
}

pub fn save_checkpoint<P: AsRef<Path>>(ckpt: &Checkpoint, path: P) -> Result<(), CheckpointError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = ckpt.config_json.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.params {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_tensor(&mut out, tensor);
    }
    match &ckpt.optim {
        None => out.push(0),
        Some(snap) => {
            out.push(1);
            for v in [
                snap.cfg.lr,
                snap.cfg.beta1,
                snap.cfg.beta2,
                snap.cfg.eps,
                snap.cfg.weight_decay,
                snap.cfg.clip_norm,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&snap.step.to_le_bytes());
            for (m, v) in snap.m.iter().zip(&snap.v) {
                put_tensor(&mut out, m);
                put_tensor(&mut out, v);
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if remaining < n {
            return Err(CheckpointError::Truncated {
                needed: n - remaining,
                while_reading: what,
            });
        }
        let n = n as usize;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32_payload(&mut self, numel: u128, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        // Size math in u128: a hostile header can declare dim products that
        // overflow u64, and the guard must fire before any allocation.
        let need = numel.saturating_mul(4);
        let remaining = (self.bytes.len() - self.pos) as u128;
        if remaining < need {
            return Err(CheckpointError::Truncated {
                needed: (need - remaining).min(u64::MAX as u128) as u64,
                while_reading: what,
            });
        }
        let b = self.take(need as u64, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn read_payload_tensor(
    cur: &mut Cursor,
    shape: &[usize],
    what: &'static str,
    name_for_err: &str,
) -> Result<Tensor<f32>, CheckpointError> {
    let numel: u128 = shape.iter().map(|&d| d as u128).product();
    let data = cur.f32_payload(numel, what)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite {
            what: format!("{what} of {name_for_err}"),
        });
    }
    Tensor::new(shape.to_vec(), data).map_err(|_| CheckpointError::ParamMismatch {
        context: format!("{name_for_err}: payload does not fill shape {shape:?}"),
    })
}

/// Decodes checkpoint bytes; never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let cfg_len = cur.u32("config length")? as u64;
    let cfg_bytes = cur.take(cfg_len, "config blob")?;
    let config_json = std::str::from_utf8(cfg_bytes)
        .map_err(|_| CheckpointError::BadConfig)?
        .to_string();

    let n_params = cur.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params.min(1 << 16));
    for _ in 0..n_params {
        let name_len = cur.u16("name length")? as u64;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndim = cur.u8("dim count")? as usize;
        if ndim > MAX_DIMS {
            return Err(CheckpointError::TooManyDims { name, got: ndim });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dim extent")? as usize);
        }
        let tensor = read_payload_tensor(&mut cur, &shape, "parameter payload", &name)?;
        params.push((name, tensor));
    }

    let optim = match cur.u8("optimizer flag")? {
        0 => None,
        _ => {
            let cfg = AdamConfig {
                lr: cur.f64("lr")?,
                beta1: cur.f64("beta1")?,
                beta2: cur.f64("beta2")?,
                eps: cur.f64("eps")?,
                weight_decay: cur.f64("weight decay")?,
                clip_norm: cur.f64("clip norm")?,
            };
            if [cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.clip_norm]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(CheckpointError::NonFinite {
                    what: "optimizer hyperparameters".to_string(),
                });
            }
            let step = cur.u64("step counter")?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (name, tensor) in &params {
                m.push(read_payload_tensor(&mut cur, tensor.shape(), "first moment", name)?);
                v.push(read_payload_tensor(&mut cur, tensor.shape(), "second moment", name)?);
            }
            Some(OptimSnapshot { cfg, step, m, v })
        }
    };

    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(Checkpoint {
        config_json,
        params,
        optim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint(with_optim: bool) -> (Checkpoint, ParamStore<f32>) {
        let mut store: ParamStore<f32> = ParamStore::new();
        store
            .add("w1", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.5))
            .unwrap();
        store
            .add("b1", Tensor::from_fn(&[3], |i| -(i as f32) * 0.125))
            .unwrap();
        let adam = with_optim.then(|| {
            let mut a = Adam::new(AdamConfig::default(), &store);
            // Advance one step so the moments are nonzero.
            store.zero_grads();
            store.accumulate_grad(0, &Tensor::full(&[2, 3], 0.5));
            store.accumulate_grad(1, &Tensor::full(&[3], -0.25));
            a.step(&mut store).unwrap();
            a
        });
        let ckpt = Checkpoint::snapshot(&store, adam.as_ref(), "{\"k\":3}".to_string());
        (ckpt, store)
    }

    #[test]
    fn round_trip_without_optim_is_value_exact() {
        let (ckpt, _) = toy_checkpoint(false);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config_json, ckpt.config_json);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, t1), (n2, t2)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert!(back.optim.is_none());
    }

    #[test]
    fn round_trip_with_optim_is_value_exact() {
        let (ckpt, store) = toy_checkpoint(true);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        let snap = back.optim.as_ref().unwrap();
        let orig = ckpt.optim.as_ref().unwrap();
        assert_eq!(snap.cfg, orig.cfg);
        assert_eq!(snap.step, orig.step);
        assert_eq!(snap.m, orig.m);
        assert_eq!(snap.v, orig.v);
        // Restoring against a matching store succeeds.
        let adam = back.restore_adam(&store).unwrap().unwrap();
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn apply_params_round_trips_values() {
        let (ckpt, store) = toy_checkpoint(false);
        let mut fresh = store.clone();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.value_mut(id).data_mut().fill(0.0);
        }
        ckpt.apply_params(&mut fresh).unwrap();
        for (id_a, id_b) in store.ids().zip(fresh.ids()) {
            assert_eq!(store.value(id_a), fresh.value(id_b));
        }
    }

    #[test]
    fn apply_params_rejects_shape_mismatch() {
        let (ckpt, _) = toy_checkpoint(false);
        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("w1", Tensor::zeros(&[3, 2])).unwrap();
        other.add("b1", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            ckpt.apply_params(&mut other),
            Err(CheckpointError::ParamMismatch { .. })
        ));
    }

    #[test]
    fn apply_params_rejects_missing_name() {
        let (ckpt, _) = toy_checkpoint(false);
        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("w1", Tensor::zeros(&[2, 3])).unwrap();
        other.add("renamed", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            ckpt.apply_params(&mut other),
            Err(CheckpointError::ParamMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let (ckpt, _) = toy_checkpoint(false);
        let mut bytes = encode_checkpoint(&ckpt);
        bytes[0] = b'Z';
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic)));
        let mut bytes = encode_checkpoint(&ckpt);
        bytes[4] = 7;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::VersionMismatch { found: 7 })
        ));
    }

    #[test]
    fn truncations_never_panic() {
        let (ckpt, _) = toy_checkpoint(true);
        let bytes = encode_checkpoint(&ckpt);
        for cut in 0..bytes.len() {
            let r = decode_checkpoint(&bytes[..cut]);
            assert!(r.is_err(), "cut {cut} decoded successfully");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (ckpt, _) = toy_checkpoint(false);
        let mut bytes = encode_checkpoint(&ckpt);
        bytes.push(9);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::TrailingBytes)
        ));
    }

    #[test]
    fn huge_declared_payload_is_truncation_not_alloc() {
        // A parameter that claims 2^32 elements but provides none must fail
        // cleanly before allocating.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes()); // empty config
        bytes.extend_from_slice(&1u32.to_le_bytes()); // one param
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.push(2); // rank 2
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
