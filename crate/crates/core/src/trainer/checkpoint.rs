//! Binary checkpoints: mapping parameters, optimizer moments and loop progress.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DI2K" | version u16 | d u32 | hidden u32 | token_dim u32 | activation u8
//! config hash [32] | iteration u64 | step u64 | consecutive skips u64 | adam t u64
//! params f64 × n | first moment f64 × n | second moment f64 × n
//! ```
//!
//! `n` is implied by the three dimensions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pcm::{Activation, MappingParams};
use crate::store::Cursor;

use super::adamw::OptimizerState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DI2K";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Where the training loop stands. `iteration` counts consumed batches
/// (including skipped ones), `step` counts applied updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub iteration: u64,
    pub step: u64,
    pub consecutive_skips: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MappingParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
    /// Hash of the settings that determine the trajectory; resuming under a
    /// different configuration is refused.
    pub config_hash: [u8; 32],
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let n = p.num_params();
        if self.optimizer.m.len() != n || self.optimizer.v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.optimizer.m.len(),
                context: "checkpoint optimizer state",
            });
        }
        let mut out = Vec::with_capacity(80 + 24 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, p.input_dim())?;
        put_u32(&mut out, p.hidden_dim())?;
        put_u32(&mut out, p.output_dim())?;
        out.push(p.activation().code());
        out.extend_from_slice(&self.config_hash);
        for v in [
            self.progress.iteration,
            self.progress.step,
            self.progress.consecutive_skips,
            self.optimizer.t,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in p.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.optimizer.m.iter().chain(&self.optimizer.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = cur.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let d = cur.u32("d")? as usize;
        let hidden = cur.u32("hidden")? as usize;
        let token_dim = cur.u32("token_dim")? as usize;
        let activation = Activation::from_code(cur.u8("activation")?)?;
        let config_hash: [u8; 32] = cur.take(32, "config hash")?.try_into().unwrap();
        let progress = Progress {
            iteration: cur.u64("iteration")?,
            step: cur.u64("step")?,
            consecutive_skips: cur.u64("consecutive skips")?,
        };
        let t = cur.u64("optimizer step")?;
        let mut params = MappingParams::zeros(d, hidden, token_dim, activation);
        let n = params.num_params();
        if cur.remaining() != 24 * n {
            return Err(Error::Truncated(format!(
                "checkpoint payload has {} bytes, expected {}",
                cur.remaining(),
                24 * n
            )));
        }
        let mut read = |what: &str| -> Result<Vec<f64>> { (0..n).map(|_| cur.f64(what)).collect() };
        let flat = read("parameters")?;
        let m = read("first moment")?;
        let v = read("second moment")?;
        params.set_flat(&flat)?;
        Ok(Self {
            params,
            optimizer: OptimizerState { m, v, t },
            progress,
            config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint {
        let params = MappingParams::init(5, 4, 3, Activation::Gelu, &mut stream_rng(1, Stream::Init, 0)).unwrap();
        let n = params.num_params();
        Checkpoint {
            optimizer: OptimizerState {
                m: (0..n).map(|i| i as f64 * 0.5).collect(),
                v: (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect(),
                t: 7,
            },
            params,
            progress: Progress {
                iteration: 9,
                step: 7,
                consecutive_skips: 1,
            },
            config_hash: [3; 32],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::decode(&bad).unwrap_err().kind(), "bad_magic");
        assert_eq!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err().kind(),
            "truncated"
        );
        let mut nan = bytes.clone();
        let off = bytes.len() - 8;
        nan[off..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(Checkpoint::decode(&nan).unwrap_err().kind(), "non_finite");
    }
}
