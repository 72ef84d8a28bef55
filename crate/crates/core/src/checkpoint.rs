//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "MENETCKP"  u32 version  u32 count  tensor × count      parameters + "config.model"
//!                          u32 count  tensor × count      "adam.m.*" / "adam.v.*"
//! u64 step  u64 seed
//!
//! tensor := u16 name_len  name  u8 dtype(0 = f32)  u8 rank  u64 dims[rank]  f32 values
//! ```
//!
//! The model configuration travels as the `f32` tensor `config.model` holding
//! `[base_channels, trunk_channels, num_residual_blocks, use_channel_attention, ca_reduction]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ModelConfig, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MENETCKP";
pub const VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[VERSION];
pub const CONFIG_TENSOR: &str = "config.model";
pub const ADAM_M_PREFIX: &str = "adam.m.";
pub const ADAM_V_PREFIX: &str = "adam.v.";

const DTYPE_F32: u8 = 0;

/// First and second Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub moments: AdamMoments,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Errors unless `expected` describes the same architecture.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        let strip = |c: &ModelConfig| ModelConfig {
            seed: 0,
            ..c.clone()
        };
        if strip(&self.model) != strip(expected) {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {:?}, expected {:?}",
                strip(&self.model),
                strip(expected)
            )));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let moments_eq = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        };
        self.model == other.model
            && self.step == other.step
            && self.seed == other.seed
            && self.params.bit_eq(&other.params)
            && moments_eq(&self.moments.m, &other.moments.m)
            && moments_eq(&self.moments.v, &other.moments.v)
    }
}

fn config_tensor(cfg: &ModelConfig) -> Tensor {
    let values = [
        cfg.base_channels as f32,
        cfg.trunk_channels as f32,
        cfg.num_residual_blocks as f32,
        if cfg.use_channel_attention { 1.0 } else { 0.0 },
        cfg.ca_reduction as f32,
    ];
    Tensor::from_vec(&[values.len()], values.to_vec()).expect("static shape")
}

fn config_from_tensor(t: &Tensor, seed: u64) -> Result<ModelConfig> {
    let v = t.data();
    let as_count = |x: f32| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
            Ok(x as usize)
        } else {
            Err(Error::Checkpoint(format!(
                "invalid model configuration entry {x}"
            )))
        }
    };
    if t.shape() != [5] {
        return Err(Error::Checkpoint(format!(
            "`{CONFIG_TENSOR}` has shape {:?}, expected [5]",
            t.shape()
        )));
    }
    let ca = match v[3] {
        0.0 => false,
        1.0 => true,
        other => {
            return Err(Error::Checkpoint(format!(
                "invalid channel-attention flag {other}"
            )))
        }
    };
    let cfg = ModelConfig {
        base_channels: as_count(v[0])?,
        trunk_channels: as_count(v[1])?,
        num_residual_blocks: as_count(v[2])?,
        use_channel_attention: ca,
        ca_reduction: as_count(v[4])?,
        seed,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))?;
    Ok(cfg)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * ckpt.params.num_elements() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32 + 1).to_le_bytes());
    put_tensor(&mut out, CONFIG_TENSOR, &config_tensor(&ckpt.model))?;
    for (name, t) in ckpt.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    let count = ckpt.moments.m.len() + ckpt.moments.v.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in &ckpt.moments.m {
        put_tensor(&mut out, &format!("{ADAM_M_PREFIX}{name}"), t)?;
    }
    for (name, t) in &ckpt.moments.v {
        put_tensor(&mut out, &format!("{ADAM_V_PREFIX}{name}"), t)?;
    }
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: {what} needs {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "`{name}`: unsupported dtype {dtype}"
            )));
        }
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u64("dimension")?;
            shape
                .push(usize::try_from(d).map_err(|_| {
                    Error::Checkpoint(format!("`{name}`: dimension {d} too large"))
                })?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape {shape:?} overflows")))?;
        let raw = self.take(numel, &format!("values of `{name}`"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, values)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}; supported versions: {SUPPORTED_VERSIONS:?}"
        )));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32("tensor count")? {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    let mut moments = AdamMoments::default();
    for _ in 0..r.u32("optimizer tensor count")? {
        let (name, t) = r.tensor()?;
        let slot = if let Some(p) = name.strip_prefix(ADAM_M_PREFIX) {
            moments.m.insert(p.to_string(), t)
        } else if let Some(p) = name.strip_prefix(ADAM_V_PREFIX) {
            moments.v.insert(p.to_string(), t)
        } else {
            return Err(Error::Checkpoint(format!(
                "unexpected optimizer tensor `{name}`"
            )));
        };
        if slot.is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    let step = r.u64("step counter")?;
    let seed = r.u64("seed")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let config = tensors
        .remove(CONFIG_TENSOR)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{CONFIG_TENSOR}`")))?;
    let model = config_from_tensor(&config, seed)?;
    let expected = model.parameter_shapes();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameter tensors, the embedded configuration needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut params = ParameterStore::default();
    for (name, shape) in expected {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, the embedded configuration needs {shape:?}",
                t.shape()
            )));
        }
        params.insert(name, t)?;
    }
    for (kind, map) in [("first", &moments.m), ("second", &moments.v)] {
        for (name, t) in map {
            let p = params.get(name).map_err(|_| {
                Error::Checkpoint(format!("{kind} moment for unknown parameter `{name}`"))
            })?;
            if p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{kind} moment of `{name}` has the wrong shape"
                )));
            }
        }
    }
    Ok(Checkpoint {
        model,
        params,
        moments,
        step,
        seed,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_model;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            trunk_channels: 4,
            num_residual_blocks: 2,
            use_channel_attention: true,
            ca_reduction: 2,
            seed: 11,
        }
    }

    fn sample() -> Checkpoint {
        let cfg = small();
        let params = build_model(&cfg).unwrap();
        let mut moments = AdamMoments::default();
        for (name, t) in params.iter() {
            moments.m.insert(name.to_string(), t.map(|v| v * 0.5));
            moments.v.insert(name.to_string(), t.map(|v| v * v));
        }
        Checkpoint {
            model: cfg,
            params,
            moments,
            step: 42,
            seed: 11,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.bit_eq(&ckpt));
        assert_eq!(back, ckpt);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"MENETCKP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let n = sample().params.len() as u32 + 1;
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), n);
        let name_len = u16::from_le_bytes(bytes[16..18].try_into().unwrap()) as usize;
        assert_eq!(&bytes[18..18 + name_len], CONFIG_TENSOR.as_bytes());
        let tail = &bytes[bytes.len() - 16..];
        assert_eq!(u64::from_le_bytes(tail[..8].try_into().unwrap()), 42);
        assert_eq!(u64::from_le_bytes(tail[8..].try_into().unwrap()), 11);
    }

    #[test]
    fn truncation_is_reported_at_every_cut() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 11, 17, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 2;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2") && err.contains("[1]"), "{err}");
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let ckpt = sample();
        assert!(ckpt.ensure_matches(&small()).is_ok());
        assert!(ckpt
            .ensure_matches(&ModelConfig {
                seed: 999,
                ..small()
            })
            .is_ok());
        assert!(ckpt
            .ensure_matches(&ModelConfig {
                use_channel_attention: false,
                ..small()
            })
            .is_err());

        let mut other = sample();
        other.model.num_residual_blocks = 3;
        let err = decode(&encode(&other).unwrap()).unwrap_err().to_string();
        assert!(err.contains("parameter"), "{err}");

        let mut wrong_shape = sample();
        *wrong_shape.params.get_mut("head.bias").unwrap() = Tensor::zeros(&[3]);
        assert!(decode(&encode(&wrong_shape).unwrap()).is_err());
    }

    #[test]
    fn parameters_without_optimizer_state_load() {
        let mut ckpt = sample();
        ckpt.moments = AdamMoments::default();
        ckpt.step = 0;
        assert!(decode(&encode(&ckpt).unwrap()).unwrap().bit_eq(&ckpt));
    }
}
