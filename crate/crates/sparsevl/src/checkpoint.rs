//! Binary checkpoint container holding a model and its predictors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "SPVLCKPT"
//! format_version   u32
//! model config     7 × u64  (layers, hidden, heads, ffn, vocab, max_seq, image_dim)
//! predictor config 5 × u64  (input_dim, width, heads, blocks, block_ffn_ratio)
//! tensor count     u64
//! per tensor       rows u64, cols u64, rows·cols × f64 bit patterns
//! checksum         u64      FNV-1a over every preceding byte
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns, so a save/load round trip
//! is bit-exact (NaN payloads and signed zeros included).

use std::fs;
use std::path::Path;

use sparsevl_core::model::{ModelConfig, ModelWeights};
use sparsevl_core::predictor::{PredictorConfig, PredictorWeights};
use sparsevl_core::Matrix;

pub const MAGIC: &[u8; 8] = b"SPVLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint has {trailing} trailing bytes")]
    Trailing { trailing: usize },
    #[error("checkpoint tensor {index}: expected {expected:?}, found {found:?}")]
    TensorShape {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint holds {found} tensors, configuration implies {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("checkpoint (format v{version}) incompatible with configuration: {field} is {found} in checkpoint, {expected} in config")]
    Incompatible {
        version: u32,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint config invalid: {0}")]
    Config(#[from] sparsevl_core::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelWeights,
    pub predictor: PredictorWeights,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn model_fields(c: &ModelConfig) -> [(&'static str, usize); 7] {
    [
        ("model.num_layers", c.num_layers),
        ("model.hidden_dim", c.hidden_dim),
        ("model.num_heads", c.num_heads),
        ("model.ffn_dim", c.ffn_dim),
        ("model.vocab_size", c.vocab_size),
        ("model.max_seq_len", c.max_seq_len),
        ("model.image_feature_dim", c.image_feature_dim),
    ]
}

fn predictor_fields(c: &PredictorConfig) -> [(&'static str, usize); 5] {
    [
        ("predictor.input_dim", c.input_dim),
        ("predictor.width", c.width),
        ("predictor.num_heads", c.num_heads),
        ("predictor.num_blocks", c.num_blocks),
        ("predictor.block_ffn_ratio", c.block_ffn_ratio),
    ]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (_, v) in model_fields(&self.model.config) {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for (_, v) in predictor_fields(&self.predictor.config) {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let tensors: Vec<&Matrix> = self.model.tensors().into_iter().chain(self.predictor.tensors()).collect();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, at: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < r.at + 8 {
            return Err(CheckpointError::Truncated);
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            at: r.at,
        };
        let model_cfg = ModelConfig {
            num_layers: r.usize()?,
            hidden_dim: r.usize()?,
            num_heads: r.usize()?,
            ffn_dim: r.usize()?,
            vocab_size: r.usize()?,
            max_seq_len: r.usize()?,
            image_feature_dim: r.usize()?,
        };
        let pred_cfg = PredictorConfig {
            input_dim: r.usize()?,
            width: r.usize()?,
            num_heads: r.usize()?,
            num_blocks: r.usize()?,
            block_ffn_ratio: r.usize()?,
        };
        let mut model = ModelWeights::random(model_cfg, 0)?;
        let mut predictor = PredictorWeights::random(pred_cfg, 0)?;
        let count = r.usize()?;
        let expected = model.tensors().len() + predictor.tensors().len();
        if count != expected {
            return Err(CheckpointError::TensorCount { expected, found: count });
        }
        let slots = model.tensors_mut().into_iter().chain(predictor.tensors_mut());
        for (index, slot) in slots.enumerate() {
            let found = (r.usize()?, r.usize()?);
            if found != slot.shape() {
                return Err(CheckpointError::TensorShape {
                    index,
                    expected: slot.shape(),
                    found,
                });
            }
            for v in slot.data_mut() {
                *v = f64::from_bits(r.u64()?);
            }
        }
        if r.at != r.bytes.len() {
            return Err(CheckpointError::Trailing {
                trailing: r.bytes.len() - r.at,
            });
        }
        Ok(Self { model, predictor })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails with the first configuration field that differs.
    pub fn check_compatible(&self, model: &ModelConfig, predictor: &PredictorConfig) -> Result<(), CheckpointError> {
        let pairs = model_fields(model)
            .into_iter()
            .zip(model_fields(&self.model.config))
            .chain(predictor_fields(predictor).into_iter().zip(predictor_fields(&self.predictor.config)));
        for ((field, expected), (_, found)) in pairs {
            if expected != found {
                return Err(CheckpointError::Incompatible {
                    version: FORMAT_VERSION,
                    field,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self.at.checked_add(N).ok_or(CheckpointError::Truncated)?;
        let chunk = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mc = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 32,
            image_feature_dim: 5,
        };
        let pc = PredictorConfig {
            width: 4,
            num_heads: 1,
            ..PredictorConfig::for_model(&mc)
        };
        Checkpoint {
            model: ModelWeights::random(mc, 3).unwrap(),
            predictor: PredictorWeights::random(pc, 4).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = small();
        c.model.token_embedding.set(0, 0, -0.0);
        c.model.token_embedding.set(0, 1, f64::MIN_POSITIVE / 3.0);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.model.tensors().into_iter().chain(c.predictor.tensors()).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&c), bits(&back));
        assert_eq!(back.model.config, c.model.config);
        assert_eq!(back.predictor.config, c.predictor.config);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = small().to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4]), Err(CheckpointError::BadMagic)));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn compatibility_names_the_field() {
        let c = small();
        assert!(c.check_compatible(&c.model.config, &c.predictor.config).is_ok());
        let other = ModelConfig {
            vocab_size: 13,
            ..c.model.config
        };
        let err = c.check_compatible(&other, &c.predictor.config).unwrap_err();
        assert!(matches!(err, CheckpointError::Incompatible { field: "model.vocab_size", expected: 13, found: 12, .. }));
        assert!(err.to_string().contains("v1"));
    }
}
