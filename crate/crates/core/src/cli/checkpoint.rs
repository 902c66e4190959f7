//! Checkpoint files.
//!
//! Layout: the line `SVFM1`, a line holding the header length in bytes, the
//! JSON header, then the payload of raw little-endian f64 values. The header
//! lists every tensor's name, shape and byte offset into the payload; model
//! parameters come first, then the Adam first and second moments.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::nn::FlowModel;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &str = "SVFM1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal, since it exceeds 64 bits.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Whether the model carries a posterior encoder.
    pub variational: bool,
    pub step: u64,
    pub rng: RngState,
    pub adam: AdamState,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or sample.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            state: state.clone(),
        }
    }

    pub fn model(&self) -> &FlowModel {
        &self.state.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: (payload.len() * 8) as u64,
            });
            payload.extend_from_slice(data);
        };
        for store in s.model.stores() {
            for (name, e) in store.iter() {
                push(format!("{PARAM}{name}"), e.value.shape().to_vec(), e.value.data());
            }
        }
        for (prefix, moments) in [(ADAM_M, &s.adam.m), (ADAM_V, &s.adam.v)] {
            for (name, m) in moments {
                push(format!("{prefix}{name}"), vec![m.len()], m);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            variational: s.model.encoder.is_some(),
            step: s.step,
            rng: RngState {
                seed: s.rng.seed(),
                stream: s.rng.stream(),
                word_pos: s.rng.word_pos().to_string(),
            },
            adam: AdamState {
                beta1: s.adam.beta1,
                beta2: s.adam.beta2,
                eps: s.adam.eps,
                t: s.adam.t,
            },
            tensors,
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\n{}\n{json}\n", json.len() + 1).into_bytes();
        out.reserve(payload.len() * 8);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(format!("{MAGIC}\n").as_bytes())
            .ok_or_else(|| corrupt("bad magic"))?;
        let nl = rest
            .iter()
            .take(32)
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("unreadable header length"))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len {
            return Err(corrupt("truncated header"));
        }
        let (head, payload) = rest.split_at(len);
        let header: Header = serde_json::from_slice(head).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", header.format_version)));
        }
        header
            .config
            .validate()
            .map_err(|e| corrupt(format!("config snapshot: {e}")))?;

        // Offsets must tile the payload exactly, in order.
        let mut expected = 0u64;
        let mut tensors: IndexMap<&str, Tensor> = IndexMap::new();
        for t in &header.tensors {
            if t.offset != expected {
                return Err(corrupt(format!("{}: offset {} (expected {expected})", t.name, t.offset)));
            }
            let numel: usize = t.shape.iter().product();
            let end = expected as usize + numel * 8;
            if end > payload.len() {
                return Err(corrupt(format!("{}: payload truncated", t.name)));
            }
            let data: Vec<f64> = payload[expected as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("{}: non-finite value", t.name)));
            }
            let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| corrupt(format!("{}: {e}", t.name)))?;
            if tensors.insert(t.name.as_str(), tensor).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", t.name)));
            }
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(corrupt(format!(
                "payload is {} bytes, header accounts for {expected}",
                payload.len()
            )));
        }

        let config = header.config;
        let mut model = FlowModel::new(config.dataset.dim(), &config.net, header.variational, &mut Rng::new(0, 0))
            .map_err(|e| corrupt(format!("model: {e}")))?;
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut used = 0;
        for store in model.stores_mut() {
            for (name, e) in store.iter_mut() {
                let key = format!("{PARAM}{name}");
                let value = tensors.get(key.as_str()).ok_or_else(|| corrupt(format!("missing {key}")))?;
                if value.shape() != e.value.shape() {
                    return Err(corrupt(format!("{key}: shape {:?}, model expects {:?}", value.shape(), e.value.shape())));
                }
                e.value = value.clone();
                for (prefix, dst) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                    let key = format!("{prefix}{name}");
                    let t = tensors.get(key.as_str()).ok_or_else(|| corrupt(format!("missing {key}")))?;
                    if t.numel() != e.value.numel() {
                        return Err(corrupt(format!("{key}: wrong length")));
                    }
                    dst.insert(name.to_string(), t.data().to_vec());
                }
                used += 3;
            }
        }
        if used != tensors.len() {
            return Err(corrupt("checkpoint holds tensors the model does not use"));
        }

        let mut rng = Rng::new(header.rng.seed, header.rng.stream);
        rng.set_word_pos(
            header
                .rng
                .word_pos
                .parse()
                .map_err(|_| corrupt("unreadable rng position"))?,
        );
        let adam = Adam {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            t: header.adam.t,
            m,
            v,
        };
        let state = TrainState::from_parts(&config, model, header.step, rng, Some(adam));
        Ok(Self { config, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Unreadable files count as corrupt.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use crate::trainer::{next_batch, train_step, BatchSource, Mode};

    fn cfg(mode: Mode) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.train.mode = mode;
        c.train.batch_size = 8;
        c.train.steps = 3;
        c.net = NetConfig {
            hidden: vec![8, 8],
            posterior_hidden: vec![8],
            latent_dim: 2,
            latent_embed: 4,
            time_embed_dim: 4,
            time_max_scale: 10.0,
            ..NetConfig::default()
        };
        c.net.zero_init_output = false;
        c
    }

    fn trained(c: &TrainConfig, steps: usize) -> TrainState {
        let mut s = TrainState::new(c).unwrap();
        let src = BatchSource::Independent(c.dataset.clone());
        for _ in 0..steps {
            let (b, e) = next_batch(&mut s, c, &src).unwrap();
            train_step(&mut s, c, &b, e.as_ref()).unwrap();
        }
        s
    }

    fn params(m: &FlowModel) -> Vec<(String, Vec<u64>)> {
        m.stores()
            .flat_map(|s| s.iter().map(|(n, e)| (n.to_string(), e.value.data().iter().map(|v| v.to_bits()).collect())).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [Mode::Fm, Mode::Svfm] {
            let c = cfg(mode);
            let s = trained(&c, 2);
            let bytes = Checkpoint::new(&c, &s).to_bytes();
            assert!(bytes.starts_with(b"SVFM1\n"));
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.config, c);
            assert_eq!(params(&back.state.model), params(&s.model));
            assert_eq!(back.state.adam, s.adam);
            assert_eq!(back.state.step, 2);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn resumed_step_matches_uninterrupted() {
        let c = cfg(Mode::Svfm);
        let full = trained(&c, 3);
        let half = trained(&c, 2);
        let mut back = Checkpoint::from_bytes(&Checkpoint::new(&c, &half).to_bytes()).unwrap().state;
        let src = BatchSource::Independent(c.dataset.clone());
        let (b, e) = next_batch(&mut back, &c, &src).unwrap();
        train_step(&mut back, &c, &b, e.as_ref()).unwrap();
        assert_eq!(params(&back.model), params(&full.model));
        assert_eq!(back.rng.word_pos(), full.rng.word_pos());
    }

    #[test]
    fn damage_is_detected() {
        let c = cfg(Mode::Fm);
        let bytes = Checkpoint::new(&c, &trained(&c, 1)).to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        for (what, b) in [
            ("magic", bad_magic),
            ("truncated", bytes[..bytes.len() - 3].to_vec()),
            ("short header", bytes[..40].to_vec()),
            ("extra payload", extra),
            ("nan", nan),
            ("empty", Vec::new()),
        ] {
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::CorruptCheckpoint(_))), "{what}");
        }
    }

    #[test]
    fn offsets_tile_the_payload() {
        let c = cfg(Mode::Svfm);
        let bytes = Checkpoint::new(&c, &trained(&c, 1)).to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let start = text.find('{').unwrap();
        let len: usize = text[6..start - 1].parse().unwrap();
        let header: Header = serde_json::from_slice(&bytes[start..start + len]).unwrap();
        let mut at = 0;
        for t in &header.tensors {
            assert_eq!(t.offset, at);
            at += 8 * t.shape.iter().product::<usize>() as u64;
        }
        assert_eq!(at as usize, bytes.len() - start - len);
    }
}
