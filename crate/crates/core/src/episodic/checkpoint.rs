//! Binary checkpoint format.
//!
//! Layout, all integers little-endian: `"MSDD"`, version `u32`, entry count
//! `u32`, parameter entries; velocity count `u32`, velocity entries (names
//! suffixed `.vel`); RNG state `4 × u64`; phase `u8`; episode `u64`;
//! `"CFGH"` and the 32-byte model-config fingerprint. A deployed model
//! continues with `"BANK"`, a `u32` count of reweighting entries named
//! `reweight.<class>`, then a `u32` prototype count with, per prototype, an
//! `i32` label (`-1` for background), a `u32` support count and an entry
//! named `prototype.<label>`.
//!
//! Entry: name length `u16`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64), rank
//! `u8`, dims as `u32`, raw little-endian payload.

use std::fs;
use std::path::Path;

use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, OptimState, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::metric::Label;
use crate::model::{Model, ModelConfig};

use super::deploy::{DeployedModel, StoredPrototype};
use super::{Phase, Trainer};

pub const MAGIC: &[u8; 4] = b"MSDD";
pub const VERSION: u32 = 1;
const CONFIG_TAG: &[u8; 4] = b"CFGH";
const BANK_TAG: &[u8; 4] = b"BANK";

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub(crate) fn write_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| ckpt_err(format!("entry name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    let rank = u8::try_from(t.rank()).map_err(|_| ckpt_err(format!("rank of {name} exceeds 255")))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| ckpt_err(format!("dimension of {name} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(())
}

/// Bounds-checked cursor over checkpoint bytes.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        if self.take(4)? != tag {
            return Err(ckpt_err(format!("expected section {}", String::from_utf8_lossy(tag))));
        }
        Ok(())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn entry<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| ckpt_err("entry name is not UTF-8"))?;
        let dtype = DType::from_code(self.u8()?).ok_or_else(|| ckpt_err(format!("unknown dtype in {name}")))?;
        if dtype != T::DTYPE {
            return Err(ckpt_err(format!("{name} has dtype {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = dtype.size();
        let payload = self.take(n.checked_mul(width).ok_or_else(|| ckpt_err("entry too large"))?)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    s: [u64; 4],
}

fn rng_words(rng: &Xoshiro256PlusPlus) -> Result<[u64; 4]> {
    let state: RngState = serde_json::from_value(serde_json::to_value(rng)?)?;
    Ok(state.s)
}

fn rng_from_words(s: [u64; 4]) -> Result<Xoshiro256PlusPlus> {
    Ok(serde_json::from_value(serde_json::to_value(RngState { s })?)?)
}

/// Training state as checkpoint bytes.
pub fn encode_trainer(trainer: &Trainer) -> Result<Vec<u8>> {
    let store = &trainer.model.store;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        write_entry(&mut out, &p.name, &p.tensor)?;
    }
    let vels = &trainer.optim.velocities;
    if vels.len() != store.len() {
        return Err(ckpt_err("optimizer state does not match the parameter store"));
    }
    out.extend_from_slice(&(vels.len() as u32).to_le_bytes());
    for ((_, p), v) in store.iter().zip(vels) {
        write_entry(&mut out, &format!("{}.vel", p.name), v)?;
    }
    for w in rng_words(&trainer.rng)? {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.push(trainer.phase.code());
    out.extend_from_slice(&trainer.episode.to_le_bytes());
    out.extend_from_slice(CONFIG_TAG);
    out.extend_from_slice(&trainer.model.config.fingerprint());
    Ok(out)
}

/// Rebuild a trainer from checkpoint bytes. The parameter layout and config
/// fingerprint must match `config`; the optimizer takes `lr` and `momentum`.
fn decode_trainer_from(
    r: &mut Reader<'_>,
    config: &ModelConfig,
    lr: f64,
    momentum: f64,
) -> Result<Trainer> {
    if r.take(4)? != MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let mut model = Model::<f32>::new(config.clone(), 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(ckpt_err(format!("{count} entries, model has {}", model.store.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (_, p) in model.store.iter() {
        let (name, t) = r.entry::<f32>()?;
        if name != p.name || t.shape() != p.tensor.shape() {
            return Err(ckpt_err(format!(
                "entry {name} {:?} does not match parameter {} {:?}",
                t.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        tensors.push(t);
    }
    let n_vel = r.u32()? as usize;
    if n_vel != count {
        return Err(ckpt_err(format!("{n_vel} velocities for {count} parameters")));
    }
    let mut velocities = Vec::with_capacity(count);
    for (_, p) in model.store.iter() {
        let (name, v) = r.entry::<f32>()?;
        if name != format!("{}.vel", p.name) || v.shape() != p.tensor.shape() {
            return Err(ckpt_err(format!("velocity entry {name} does not match {}", p.name)));
        }
        velocities.push(v);
    }
    let mut words = [0u64; 4];
    for w in &mut words {
        *w = r.u64()?;
    }
    let rng = rng_from_words(words)?;
    let phase = Phase::from_code(r.u8()?)?;
    let episode = r.u64()?;
    r.tag(CONFIG_TAG)?;
    if r.take(32)? != config.fingerprint() {
        return Err(ckpt_err("checkpoint was written for a different model config"));
    }

    for (p, t) in model.store.iter_mut().zip(tensors) {
        p.tensor = t;
    }
    model.set_extractor_frozen(phase == Phase::Finetune);
    let mut optim = OptimState::new(&model.store, lr, momentum)?;
    optim.velocities = velocities;
    Ok(Trainer {
        model,
        optim,
        rng,
        phase,
        episode,
    })
}

pub fn decode_trainer(bytes: &[u8], config: &ModelConfig, lr: f64, momentum: f64) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    let t = decode_trainer_from(&mut r, config, lr, momentum)?;
    if !r.at_end() {
        return Err(ckpt_err("trailing bytes after training state"));
    }
    Ok(t)
}

pub fn encode_deployed(d: &DeployedModel) -> Result<Vec<u8>> {
    let mut out = encode_trainer(&d.trainer)?;
    out.extend_from_slice(BANK_TAG);
    out.extend_from_slice(&(d.reweighting.len() as u32).to_le_bytes());
    for (c, w) in &d.reweighting {
        write_entry(&mut out, &format!("reweight.{c}"), w)?;
    }
    out.extend_from_slice(&(d.prototypes.len() as u32).to_le_bytes());
    for p in &d.prototypes {
        out.extend_from_slice(&p.label.code().to_le_bytes());
        out.extend_from_slice(&(p.support_count as u32).to_le_bytes());
        write_entry(&mut out, &format!("prototype.{}", p.label.code()), &p.c)?;
    }
    Ok(out)
}

pub fn decode_deployed(bytes: &[u8], config: &ModelConfig) -> Result<DeployedModel> {
    let mut r = Reader::new(bytes);
    // optimizer settings are irrelevant for a deployed model
    let trainer = decode_trainer_from(&mut r, config, 1.0, 0.0)?;
    r.tag(BANK_TAG)?;
    let n = r.u32()? as usize;
    let mut reweighting = std::collections::BTreeMap::new();
    for _ in 0..n {
        let (name, w) = r.entry::<f32>()?;
        let c: u32 = name
            .strip_prefix("reweight.")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ckpt_err(format!("bad reweighting entry {name}")))?;
        reweighting.insert(c, w);
    }
    let n = r.u32()? as usize;
    let mut prototypes = Vec::with_capacity(n);
    for _ in 0..n {
        let label = Label::from_code(r.i32()?)?;
        let support_count = r.u32()? as usize;
        let (name, c) = r.entry::<f32>()?;
        if name != format!("prototype.{}", label.code()) {
            return Err(ckpt_err(format!("prototype entry {name} does not match label {label}")));
        }
        prototypes.push(StoredPrototype {
            label,
            support_count,
            c,
        });
    }
    if !r.at_end() {
        return Err(ckpt_err("trailing bytes after prototype bank"));
    }
    DeployedModel::from_parts(trainer, reweighting, prototypes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    // write to a sibling then rename so a crash never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    write_file(path, &encode_trainer(trainer)?)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig, lr: f64, momentum: f64) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trainer(&bytes, config, lr, momentum)
}

pub fn save_deployed(path: &Path, d: &DeployedModel) -> Result<()> {
    write_file(path, &encode_deployed(d)?)
}

pub fn load_deployed(path: &Path, config: &ModelConfig) -> Result<DeployedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_deployed(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::PhaseConfig;
    use rand::{Rng, SeedableRng};

    fn trainer() -> Trainer {
        let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        let mut t = Trainer::new(model, Phase::Base, &PhaseConfig::base()).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        for v in &mut t.optim.velocities {
            for x in v.data_mut() {
                *x = rng.random::<f32>() - 0.5;
            }
        }
        t.rng.random::<u64>();
        t.episode = 17;
        t
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = trainer();
        let bytes = encode_trainer(&t).unwrap();
        let back = decode_trainer(&bytes, &ModelConfig::default(), 1e-4, 0.9).unwrap();
        assert_eq!(encode_trainer(&back).unwrap(), bytes);
        assert_eq!(back.episode, 17);
        assert_eq!(back.phase, Phase::Base);
        let mut a = t.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_trainer(&trainer()).unwrap();
        assert_eq!(&bytes[..4], b"MSDD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"backbone.stem.weight");
        assert_eq!(bytes[14 + name_len], 0);
        assert_eq!(bytes[15 + name_len], 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_trainer(&trainer()).unwrap();
        let cfg = ModelConfig::default();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_trainer(&bad, &cfg, 1e-4, 0.9), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_trainer(&bad, &cfg, 1e-4, 0.9).is_err());
        assert!(decode_trainer(&bytes[..bytes.len() - 1], &cfg, 1e-4, 0.9).is_err());
        assert!(decode_trainer(&bytes[..100], &cfg, 1e-4, 0.9).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_trainer(&long, &cfg, 1e-4, 0.9).is_err());
        let other = ModelConfig {
            anchor_sides: vec![16.0, 32.0, 48.0],
            ..ModelConfig::default()
        };
        assert!(decode_trainer(&bytes, &other, 1e-4, 0.9).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.msdd");
        let t = trainer();
        save_checkpoint(&path, &t).unwrap();
        let back = load_checkpoint(&path, &ModelConfig::default(), 1e-4, 0.9).unwrap();
        save_checkpoint(&dir.path().join("again.msdd"), &back).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("again.msdd")).unwrap()
        );
        assert!(load_checkpoint(&dir.path().join("missing"), &ModelConfig::default(), 1e-4, 0.9).is_err());
    }
}
