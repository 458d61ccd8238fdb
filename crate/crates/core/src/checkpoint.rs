//! Versioned binary container for parameters, optimizer state and the
//! training cursor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ParNet;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENT_PREFIX: &str = "adam.m/";
const VARIANCE_PREFIX: &str = "adam.v/";

/// Adam moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    /// Position of the shuffling stream, see [`crate::training::Trainer`].
    pub rng_word_pos: u128,
    pub best_score: Option<f64>,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    rng_seed: u64,
    /// Decimal string; JSON numbers cannot hold 128 bits.
    rng_word_pos: String,
    best_score: Option<f64>,
    real_bits: u32,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        let params = |s: &ParamStore| {
            s.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect::<Vec<_>>()
        };
        self.config == other.config
            && self.epoch == other.epoch
            && self.step == other.step
            && self.rng_word_pos == other.rng_word_pos
            && self.best_score.map(f64::to_bits) == other.best_score.map(f64::to_bits)
            && params(&self.params) == params(&other.params)
            && self.adam == other.adam
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, precision: Precision) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.bytes.len() as u64,
                reason: format!("truncated {what} starting at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let precision = self.config.precision;
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_seed: self.config.seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            best_score: self.best_score,
            real_bits: match precision {
                Precision::F32 => 32,
                Precision::F64 => 64,
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, name, &p.value, precision);
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("{MOMENT_PREFIX}{name}"), m, precision);
        }
        for ((name, _), v) in self.params.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("{VARIANCE_PREFIX}{name}"), v, precision);
        }
        // optimizer step count rides along as a rank-0 tensor
        put_tensor(&mut out, "adam.step", &Tensor::new(vec![], vec![self.adam.step as f64])?, Precision::F64);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut c = Cursor { bytes, pos: 4 };
        let version = c.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = c.u32("header")? as usize;
        let header: Header = serde_json::from_slice(c.take(len, "header JSON")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let rng_word_pos = header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("checkpoint header: bad rng_word_pos".into()))?;
        let width = match header.real_bits {
            32 => 4,
            64 => 8,
            b => return Err(Error::Format(format!("checkpoint header: {b}-bit reals"))),
        };

        let (_, mut params) = ParNet::init(&header.config, header.config.vocab_size)?;
        let mut adam = AdamState::new(&params);
        let mut seen = vec![[false; 3]; params.len()];
        let mut adam_step = None;
        while !c.done() {
            let start = c.pos as u64;
            let name_len = c.u32("tensor name")? as usize;
            let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt { offset: start, reason: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank = c.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u64("tensor extent")? as usize);
            }
            let count: usize = shape.iter().product();
            let w = if name == "adam.step" { 8 } else { width };
            let raw = c.take(count * w, "tensor data")?;
            let data: Vec<f64> = if w == 4 {
                raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
            } else {
                raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
            };
            let tensor = Tensor::new(shape, data)?;
            if name == "adam.step" {
                adam_step = Some(tensor.data()[0] as u64);
                continue;
            }
            let (slot, base) = if let Some(n) = name.strip_prefix(MOMENT_PREFIX) {
                (1, n)
            } else if let Some(n) = name.strip_prefix(VARIANCE_PREFIX) {
                (2, n)
            } else {
                (0, name.as_str())
            };
            let id = params
                .id(base)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not in model")))?;
            let target = match slot {
                0 => params.value_mut(id),
                1 => &mut adam.m[id.0],
                _ => &mut adam.v[id.0],
            };
            if target.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    target.shape()
                )));
            }
            *target = tensor;
            seen[id.0][slot] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s.iter().all(|&x| x)) {
            let name = params.iter().nth(i).unwrap().0.to_string();
            return Err(Error::Format(format!("checkpoint is missing state for {name}")));
        }
        adam.step = adam_step.ok_or_else(|| Error::Format("checkpoint is missing adam.step".into()))?;
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            rng_word_pos,
            best_score: header.best_score,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Model structure with this checkpoint's parameter values.
    pub fn model(&self) -> Result<(ParNet, ParamStore)> {
        let (model, _) = ParNet::init(&self.config, self.config.vocab_size)?;
        Ok((model, self.params.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(precision: Precision) -> TrainConfig {
        TrainConfig {
            heads: 2,
            d_model: 8,
            d_p: 4,
            d_v: 5,
            d_e: 4,
            d_t: 6,
            precision,
            ..TrainConfig::default()
        }
    }

    fn sample(precision: Precision) -> Checkpoint {
        let (model, params) = ParNet::init(&config(precision), 9).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.125;
        adam.v[1].data_mut()[0] = 0.5;
        Checkpoint {
            config: model.config,
            epoch: 2,
            step: 7,
            rng_word_pos: u128::MAX - 5,
            best_score: Some(87.5),
            params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for precision in [Precision::F32, Precision::F64] {
            let ck = sample(precision);
            let bytes = ck.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"PNCK");
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        let bytes = sample(Precision::F32).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Corrupt { .. }) | Err(Error::Format(_))));
    }
}
