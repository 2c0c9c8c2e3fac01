//! Binary checkpoint format.
//!
//! ```text
//! "MFEN"  u32 version  u32 len + canonical config text  u32 tensor count
//! per tensor: u16 name len, name, u8 ndim, ndim × u64 dims, f32 data
//! ```
//!
//! All integers and floats are little-endian. Model parameters come first in
//! name order, followed by reserved entries: Adam moments under `__adam.m.` and
//! `__adam.v.`, then `__train.iteration`, `__rng.seed` and `__rng.cursor`.
//! 64-bit counters are stored as four 16-bit limbs (low first), each held
//! exactly by an f32.

use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::network::{self, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"MFEN";
pub const VERSION: u32 = 1;
pub const RESERVED_PREFIX: &str = "__";
const ADAM_M: &str = "__adam.m.";
const ADAM_V: &str = "__adam.v.";
const ITERATION: &str = "__train.iteration";
const RNG_SEED: &str = "__rng.seed";
const RNG_CURSOR: &str = "__rng.cursor";

/// Adam first and second moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    /// Zero moments for every trainable parameter.
    pub fn zeros_like(params: &ModelParams<f32>) -> Self {
        let mut m = ModelParams::new();
        for (name, t) in params.trainable() {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        AdamState { v: m.clone(), m }
    }
}

/// State of the batch sampler: its seed and how many samples it has drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub seed: u64,
    pub cursor: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState,
    pub iteration: u64,
    pub sampler: SamplerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    /// Absent for inference-only checkpoints.
    pub training: Option<TrainingState>,
}

fn u64_tensor(v: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|k| ((v >> (16 * k)) & 0xFFFF) as f32).collect();
    Tensor::from_vec(Shape::new(1, 1, 1, 4), limbs).unwrap_or_else(|_| unreachable!())
}

fn tensor_u64(name: &str, t: &Tensor<f32>) -> Result<u64> {
    let bad = || Error::Parse { offset: 0, message: format!("{name} is not a 64-bit counter") };
    if t.numel() != 4 {
        return Err(bad());
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (k, &x)| {
        if x.fract() != 0.0 || !(0.0..65536.0).contains(&x) {
            return Err(bad());
        }
        Ok(acc | ((x as u64) << (16 * k)))
    })
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
    out.extend(len.to_le_bytes());
    out.extend(name.as_bytes());
    let dims = t.shape().dims();
    out.push(dims.len() as u8);
    for d in dims {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    /// The ordered `(name, tensor)` list written to disk.
    fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut v: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
        if let Some(tr) = &self.training {
            v.extend(tr.adam.m.iter().map(|(k, t)| (format!("{ADAM_M}{k}"), t.clone())));
            v.extend(tr.adam.v.iter().map(|(k, t)| (format!("{ADAM_V}{k}"), t.clone())));
            v.push((ITERATION.into(), u64_tensor(tr.iteration)));
            v.push((RNG_SEED.into(), u64_tensor(tr.sampler.seed)));
            v.push((RNG_CURSOR.into(), u64_tensor(tr.sampler.cursor)));
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        let cfg = self.config.to_canonical();
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg.as_bytes());
        let entries = self.entries();
        out.extend((entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            put_tensor(&mut out, name, t)?;
        }
        Ok(out)
    }

    /// Parses and validates against the embedded configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = RawCheckpoint::parse(bytes)?;
        let config = raw.config.clone();
        raw.into_checkpoint(&config)
    }

    /// Parses and validates the parameter set against `expected` instead of
    /// the embedded configuration.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        RawCheckpoint::parse(bytes)?.into_checkpoint(expected)
    }
}

struct RawCheckpoint {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap_or_else(|_| unreachable!()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::Parse { offset: at, message: "invalid UTF-8".into() })
    }
}

impl RawCheckpoint {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.array::<4>()?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion { found: version, expected: VERSION });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos;
        let config: ModelConfig = r
            .utf8(cfg_len)?
            .parse()
            .map_err(|e: Error| Error::Parse { offset: cfg_at, message: e.to_string() })?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = r.utf8(name_len)?;
            let ndim_at = r.pos;
            let ndim = r.array::<1>()?[0] as usize;
            if ndim > 4 {
                return Err(Error::Parse { offset: ndim_at, message: format!("{name}: {ndim} dimensions, at most 4 supported") });
            }
            let mut dims = [1usize; 4];
            for k in 0..ndim {
                let at = r.pos;
                let d = u64::from_le_bytes(r.array()?);
                dims[4 - ndim + k] = usize::try_from(d)
                    .map_err(|_| Error::Parse { offset: at, message: format!("{name}: dimension {d} too large") })?;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let n_bytes = shape
                .numel()
                .checked_mul(4)
                .ok_or_else(|| Error::Parse { offset: ndim_at, message: format!("{name}: size overflows") })?;
            let raw = r.take(n_bytes)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, message: "trailing bytes after last tensor".into() });
        }
        Ok(RawCheckpoint { config, tensors })
    }

    fn into_checkpoint(self, expected: &ModelConfig) -> Result<Checkpoint> {
        let mut params = ModelParams::new();
        let mut m = ModelParams::new();
        let mut v = ModelParams::new();
        let (mut iteration, mut seed, mut cursor) = (None, None, None);
        for (name, t) in self.tensors {
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.insert(rest.to_string(), t);
            } else if name == ITERATION {
                iteration = Some(tensor_u64(&name, &t)?);
            } else if name == RNG_SEED {
                seed = Some(tensor_u64(&name, &t)?);
            } else if name == RNG_CURSOR {
                cursor = Some(tensor_u64(&name, &t)?);
            } else if name.starts_with(RESERVED_PREFIX) {
                return Err(Error::UnknownParameter(name));
            } else {
                params.insert(name, t);
            }
        }
        params.check_layout(&network::layout(expected))?;
        let training = match (iteration, seed, cursor) {
            (None, None, None) if m.is_empty() && v.is_empty() => None,
            (Some(iteration), Some(seed), Some(cursor)) => {
                for moments in [&m, &v] {
                    check_moments(&params, moments)?;
                }
                Some(TrainingState { adam: AdamState { m, v }, iteration, sampler: SamplerState { seed, cursor } })
            }
            _ => {
                let missing = [(ITERATION, iteration), (RNG_SEED, seed), (RNG_CURSOR, cursor)]
                    .iter()
                    .find(|(_, x)| x.is_none())
                    .map(|(n, _)| n.to_string())
                    .unwrap_or_else(|| format!("{ADAM_M}*"));
                return Err(Error::MissingParameter { missing });
            }
        };
        Ok(Checkpoint { config: expected.clone(), params, training })
    }
}

fn check_moments(params: &ModelParams<f32>, moments: &ModelParams<f32>) -> Result<()> {
    for (name, t) in moments.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() && crate::params::is_trainable(name) => {}
            Some(_) => return Err(Error::Contract(format!("optimizer moment {name} does not match its parameter"))),
            None => return Err(Error::UnknownParameter(format!("{ADAM_M}{name}"))),
        }
    }
    if let Some((name, _)) = params.trainable().find(|(n, _)| !moments.contains(n)) {
        return Err(Error::MissingParameter { missing: format!("{ADAM_M}{name}") });
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { c_base: 4, ..ModelConfig::tiny() }
    }

    fn inference_ckpt() -> Checkpoint {
        let config = small();
        Checkpoint { params: network::build(&config, 5).unwrap(), config, training: None }
    }

    #[test]
    fn counters_roundtrip_through_limbs() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 0x0123_4567_89AB_CDEF] {
            assert_eq!(tensor_u64("x", &u64_tensor(v)).unwrap(), v);
        }
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let mut c = inference_ckpt();
        let a = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&a).unwrap(), c);
        c.training = Some(TrainingState {
            adam: AdamState::zeros_like(&c.params),
            iteration: 77,
            sampler: SamplerState { seed: 3, cursor: 308 },
        });
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = inference_ckpt().to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadVersion { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 3]), Err(Error::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&good[..2]), Err(Error::Truncated { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_and_missing_names() {
        let mut c = inference_ckpt();
        c.params.insert("bogus.weight".into(), Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnknownParameter(n)) if n == "bogus.weight"));

        let on = inference_ckpt().to_bytes().unwrap();
        let off = ModelConfig { use_febp: false, ..small() };
        assert!(matches!(Checkpoint::from_bytes_for(&on, &off), Err(Error::UnknownParameter(n)) if n.starts_with("febp")));
        let off_ckpt = Checkpoint { params: network::build(&off, 5).unwrap(), config: off, training: None };
        match Checkpoint::from_bytes_for(&off_ckpt.to_bytes().unwrap(), &small()) {
            Err(Error::MissingParameter { missing }) => assert!(missing.starts_with("febp1."), "{missing}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = inference_ckpt();
        save_checkpoint(&c, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(load_checkpoint(&dir.path().join("none")).unwrap_err().is_io());
    }
}
