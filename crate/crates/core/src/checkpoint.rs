//! Binary checkpoint container.
//!
//! ```text
//! "APEC" | version: u32 = 1
//! config_len: u32 | model config JSON | SHA-256(config JSON): 32 bytes
//! step: u64 | running_mean: 3 x f64 | running_var: 3 x f64
//! n_params: u64 | params: n_params x f32
//! has_optimizer: u8 | [t: u64 | m: n_params x f32 | v: n_params x f32]
//! extra_len: u32 | extra JSON (training setup, informational)
//! ```
//!
//! Little-endian throughout. Files are written to a temporary sibling and renamed.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ApeModel, ModelConfig};

const MAGIC: &[u8; 4] = b"APEC";
const VERSION: u32 = 1;

/// Optimizer moments saved alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ApeModel<f32>,
    pub optimizer: Option<OptimizerState>,
    pub extra: serde_json::Value,
}

fn config_json(cfg: &ModelConfig) -> Vec<u8> {
    serde_json::to_vec(cfg).expect("model config serializes")
}

pub fn config_hash(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(config_json(cfg)).into()
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let model = &ckpt.model;
    let cfg = config_json(model.config());
    let mut buf = Vec::with_capacity(64 + cfg.len() + 12 * model.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&Sha256::digest(&cfg));
    buf.extend_from_slice(&model.step.to_le_bytes());
    for x in model.running_mean.iter().chain(&model.running_var) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    put_f32s(&mut buf, &model.params);
    match &ckpt.optimizer {
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.t.to_le_bytes());
            put_f32s(&mut buf, &opt.m);
            put_f32s(&mut buf, &opt.v);
        }
        None => buf.push(0),
    }
    let extra = serde_json::to_vec(&ckpt.extra).expect("json value serializes");
    buf.extend_from_slice(&(extra.len() as u32).to_le_bytes());
    buf.extend_from_slice(&extra);

    let tmp = path.with_extension("apec.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let stored_hash = r.take(32)?;
    if Sha256::digest(cfg_bytes).as_slice() != stored_hash {
        return Err(Error::Checkpoint("config hash mismatch (corrupt checkpoint)".into()));
    }
    let config: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let step = r.u64()?;
    let mut stats = [0.0; 6];
    for s in &mut stats {
        *s = r.f64()?;
    }
    let n = r.u64()? as usize;
    let params = r.f32s(n)?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            Some(OptimizerState { t, m, v })
        }
        b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
    };
    let extra_len = r.u32()? as usize;
    let extra = serde_json::from_slice(r.take(extra_len)?).map_err(|e| Error::Checkpoint(format!("extra: {e}")))?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = ApeModel::from_parts(
        config,
        params,
        [stats[0], stats[1], stats[2]],
        [stats[3], stats[4], stats[5]],
        step,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        model,
        optimizer,
        extra,
    })
}

/// Loads a checkpoint and verifies it was produced for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if config_hash(ckpt.model.config()) != config_hash(expected) {
        return Err(Error::Checkpoint("checkpoint was trained with a different model config".into()));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            encoder_channels: vec![4, 8],
            decoder_channels: vec![4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ApeModel::<f32>::new(tiny(), 1).unwrap();
        model.step = 42;
        model.running_mean = [0.1, -0.2, 0.3];
        model.running_var = [1.5, 2.5, 0.5];
        let n = model.num_params();
        let ckpt = Checkpoint {
            model,
            optimizer: Some(OptimizerState {
                t: 42,
                m: vec![0.25; n],
                v: vec![0.5; n],
            }),
            extra: serde_json::json!({"variant": "equiv"}),
        };
        let path = dir.path().join("m.apec");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(!dir.path().join("m.apec.tmp").exists());
    }

    #[test]
    fn mismatch_and_corruption_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            model: ApeModel::<f32>::new(tiny(), 1).unwrap(),
            optimizer: None,
            extra: serde_json::Value::Null,
        };
        let path = dir.path().join("m.apec");
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(load_checkpoint_for(&path, &tiny()).is_ok());
        assert!(matches!(
            load_checkpoint_for(&path, &ModelConfig::default()),
            Err(Error::Checkpoint(_))
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 0x01; // inside the config JSON
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        fs::write(&path, &bytes[..30]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
