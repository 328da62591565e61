//! Versioned binary checkpoints.
//!
//! Layout: magic `MACEMB1\0`, u32 format version, the layer spec, run
//! metadata (epoch, best validation metric, config hash), optimizer
//! hyperparameters, the RNG algorithm name, then a row-major
//! little-endian f64 payload of all parameters followed by all velocity
//! tensors, and a trailing 64-bit FNV-1a checksum of the payload bytes.
//! Save -> load -> save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams, ModelSpec};
use crate::numerics::{RngState, RNG_ALGORITHM};
use crate::optim::{OptimizerConfig, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACEMB1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// A training snapshot: parameters, optimizer state, and the selection
/// metadata needed to resume or compare runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epoch: u64,
    pub best_metric: f64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let spec = self.params.spec();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
        for w in &spec.layer_widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        match spec.classes {
            Some(k) => {
                out.push(1);
                out.extend_from_slice(&(k as u32).to_le_bytes());
            }
            None => out.push(0),
        }

        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());

        let oc = &self.optimizer.config;
        out.extend_from_slice(&oc.initial_lr.to_le_bytes());
        out.extend_from_slice(&oc.momentum.to_le_bytes());
        out.extend_from_slice(&oc.weight_decay.to_le_bytes());
        out.extend_from_slice(&oc.decay_factor.to_le_bytes());
        out.extend_from_slice(&oc.decay_period.to_le_bytes());
        out.extend_from_slice(&self.optimizer.lr.to_le_bytes());

        out.push(RNG_ALGORITHM.len() as u8);
        out.extend_from_slice(RNG_ALGORITHM.as_bytes());

        let mut payload = Vec::with_capacity(16 * self.params.param_count());
        for slice in self.params.tensor_slices() {
            for v in slice {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for slice in self.optimizer.velocity.tensor_slices() {
            for v in slice {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |context: String| Error::Parse { path: path.to_string(), kind: "checkpoint", line: 0, context };
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(err(format!("truncated at byte {off}")));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let take_u32 = |off: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
        };
        let take_u64 = |off: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
        };
        let take_f64 = |off: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
        };

        if take(&mut off, 8)? != CHECKPOINT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = take_u32(&mut off)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }

        let input_dim = take_u32(&mut off)? as usize;
        let n_layers = take_u32(&mut off)? as usize;
        let mut layer_widths = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_widths.push(take_u32(&mut off)? as usize);
        }
        let classes = match take(&mut off, 1)?[0] {
            0 => None,
            1 => Some(take_u32(&mut off)? as usize),
            other => return Err(err(format!("bad head flag {other}"))),
        };
        let spec = ModelSpec { input_dim, layer_widths, classes };

        let epoch = take_u64(&mut off)?;
        let best_metric = take_f64(&mut off)?;
        let config_hash = take_u64(&mut off)?;

        let config = OptimizerConfig {
            initial_lr: take_f64(&mut off)?,
            momentum: take_f64(&mut off)?,
            weight_decay: take_f64(&mut off)?,
            decay_factor: take_f64(&mut off)?,
            decay_period: take_u64(&mut off)?,
        };
        let lr = take_f64(&mut off)?;

        let alg_len = take(&mut off, 1)?[0] as usize;
        let alg = std::str::from_utf8(take(&mut off, alg_len)?)
            .map_err(|_| err("rng algorithm name is not utf-8".into()))?;
        if alg != RNG_ALGORITHM {
            return Err(err(format!("unknown rng algorithm {alg:?}")));
        }

        // shapes come from the spec; init is only used as a shape template
        let mut template = init_params(&spec, &mut RngState::new(0))?;
        let count = template.param_count();
        let payload_len = take_u64(&mut off)? as usize;
        if payload_len != 16 * count {
            return Err(err(format!("payload of {payload_len} bytes, spec needs {}", 16 * count)));
        }
        let payload = take(&mut off, payload_len)?.to_vec();
        let checksum = take_u64(&mut off)?;
        if off != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - off)));
        }
        if fnv1a64(&payload) != checksum {
            return Err(err("payload checksum mismatch".into()));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut fill = |target: &mut ModelParams| {
            for slice in target.tensor_slices_mut() {
                for v in slice.iter_mut() {
                    *v = values.next().expect("length checked above");
                }
            }
        };
        fill(&mut template);
        let params = template;
        let mut velocity = params.zeros_like();
        fill(&mut velocity);

        Ok(Checkpoint {
            optimizer: OptimizerState { config, lr, velocity },
            params,
            epoch,
            best_metric,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint(classes: Option<usize>) -> Checkpoint {
        let spec = ModelSpec { input_dim: 3, layer_widths: vec![4, 5], classes };
        let mut rng = RngState::new(12);
        let params = init_params(&spec, &mut rng).unwrap();
        let mut optimizer = OptimizerState::new(OptimizerConfig::default(), &params).unwrap();
        // non-trivial velocity so the payload second half is exercised
        for slice in optimizer.velocity.tensor_slices_mut() {
            for v in slice {
                *v = rng.normal();
            }
        }
        optimizer.lr = 0.00025;
        Checkpoint { params, optimizer, epoch: 17, best_metric: 0.8125, config_hash: 0xfeed_beef }
    }

    #[test]
    fn roundtrip_bit_exact() {
        for classes in [None, Some(7)] {
            let ck = sample_checkpoint(classes);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_checkpoint(Some(4));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn corruption_detected() {
        let ck = sample_checkpoint(None);
        let mut bytes = ck.to_bytes().unwrap();
        // flip one payload byte
        let idx = bytes.len() - 16;
        bytes[idx] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
        // truncation
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        // bad magic
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'x';
        assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn fnv_reference_values() {
        // standard FNV-1a test vectors
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }
}
