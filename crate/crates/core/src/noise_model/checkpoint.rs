//! Binary checkpoint container.
//!
//! ```text
//! magic "DVCKPT\0\0" | version u32 | header_len u64 | header JSON
//! | parameter tensors (f64 LE, spec order)
//! | [optimizer: t u64 | first moments | second moments]
//! | sha256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NetworkConfig, NoisePredictor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DVCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments, aligned with the predictor's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros(predictor: &NoisePredictor) -> Self {
        let z: Vec<Vec<f64>> = predictor.tensors().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// A saved predictor plus the state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: NoisePredictor,
    pub optimizer: Option<OptimizerState>,
    pub dataset_digest: Option<String>,
    /// Digest of the run configuration that produced the checkpoint.
    pub run_digest: Option<String>,
}

impl Checkpoint {
    pub fn new(predictor: NoisePredictor) -> Self {
        Self {
            predictor,
            optimizer: None,
            dataset_digest: None,
            run_digest: None,
        }
    }

    /// Errors unless the stored network config equals `expected`.
    pub fn expect_config(&self, expected: &NetworkConfig) -> Result<()> {
        let found = self.predictor.config();
        if found != expected {
            return Err(Error::ConfigMismatch {
                expected: expected.digest(),
                found: found.digest(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    config_digest: String,
    step_count: u64,
    tensors: Vec<TensorHeader>,
    has_optimizer: bool,
    dataset_digest: Option<String>,
    run_digest: Option<String>,
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[Vec<f64>]) {
    for v in tensors.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.predictor;
    let header = Header {
        network: p.config().clone(),
        config_digest: p.config().digest(),
        step_count: p.step_count,
        tensors: p
            .config()
            .param_specs()
            .into_iter()
            .map(|s| TensorHeader {
                name: s.name,
                rows: s.rows,
                cols: s.cols,
            })
            .collect(),
        has_optimizer: ckpt.optimizer.is_some(),
        dataset_digest: ckpt.dataset_digest.clone(),
        run_digest: ckpt.run_digest.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(64 + json.len() + 8 * 3 * p.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_tensors(&mut buf, p.tensors());
    if let Some(opt) = &ckpt.optimizer {
        buf.extend_from_slice(&opt.t.to_le_bytes());
        put_tensors(&mut buf, &opt.m);
        put_tensors(&mut buf, &opt.v);
    }
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointCorrupt("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self, shapes: &[TensorHeader]) -> Result<Vec<Vec<f64>>> {
        shapes
            .iter()
            .map(|s| {
                let raw = self.take(8 * s.rows * s.cols)?;
                Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            })
            .collect()
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::CheckpointCorrupt(format!("bad header: {e}")))?;
    if header.network.digest() != header.config_digest {
        return Err(Error::CheckpointCorrupt("config digest does not match stored config".into()));
    }
    let specs = header.network.param_specs();
    if specs.len() != header.tensors.len()
        || specs
            .iter()
            .zip(&header.tensors)
            .any(|(s, t)| s.name != t.name || s.rows != t.rows || s.cols != t.cols)
    {
        return Err(Error::CheckpointCorrupt("tensor table does not match config".into()));
    }
    let params = r.tensors(&header.tensors)?;
    let optimizer = if header.has_optimizer {
        let t = r.u64()?;
        let m = r.tensors(&header.tensors)?;
        let v = r.tensors(&header.tensors)?;
        Some(OptimizerState { t, m, v })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        predictor: NoisePredictor::from_params(header.network, params, header.step_count)?,
        optimizer,
        dataset_digest: header.dataset_digest,
        run_digest: header.run_digest,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_data::MelConditioner;

    fn sample() -> Checkpoint {
        let mut p = NoisePredictor::init(NetworkConfig::desk(), 3).unwrap();
        p.step_count = 42;
        let mut opt = OptimizerState::zeros(&p);
        opt.t = 42;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 1e-300;
        Checkpoint {
            predictor: p,
            optimizer: Some(opt),
            dataset_digest: Some("abc".into()),
            run_digest: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let mel = MelConditioner {
            frames: (0..32 * 16).map(|i| (i as f64 * 0.01).sin()).collect(),
            n_frames: 32,
            n_mels: 16,
            config_digest: String::new(),
        };
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.3).cos()).collect();
        let a = c.predictor.predict_noise(&x, &mel, 0.5).unwrap();
        let b = back.predictor.predict_noise(&x, &mel, 0.5).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn flipped_byte_is_corruption() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(Error::CheckpointCorrupt(_))));
        assert!(matches!(decode(&bytes[..40]), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn desk_checkpoint_does_not_fit_full_config() {
        let c = decode(&encode(&sample()).unwrap()).unwrap();
        assert!(matches!(
            c.expect_config(&NetworkConfig::full()),
            Err(Error::ConfigMismatch { .. })
        ));
        c.expect_config(&NetworkConfig::desk()).unwrap();
    }
}
