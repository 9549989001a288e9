//! `IDTC` checkpoints: magic, `u32` header length, JSON header, then one
//! blob per parameter (`u64` count followed by little-endian `f32`s) in
//! header order. Optimizer moments follow as two more blobs per parameter
//! when the header carries a training state.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::train::{TrainConfig, Trainer};
use super::{FlatConfig, FlatModel, IdtConfig, IdtModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::optim::AdamState;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Idt,
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub adam_t: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelKind,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
    #[serde(default)]
    train_state: Option<TrainState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub config: serde_json::Value,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub train_state: Option<TrainState>,
    pub moments: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
    /// Free-form provenance stored alongside the model.
    pub meta: Option<serde_json::Value>,
}

/// Models that can be rebuilt from their config and a parameter store.
pub trait Checkpointable<T: Scalar>: Sized {
    const KIND: ModelKind;
    type Config: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug;

    fn config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn build(config: Self::Config) -> Result<Self>;
}

impl<T: Scalar> Checkpointable<T> for IdtModel<T> {
    const KIND: ModelKind = ModelKind::Idt;
    type Config = IdtConfig;

    fn config(&self) -> &IdtConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn build(config: IdtConfig) -> Result<Self> {
        IdtModel::new(config, 0)
    }
}

impl<T: Scalar> Checkpointable<T> for FlatModel<T> {
    const KIND: ModelKind = ModelKind::Flat;
    type Config = FlatConfig;

    fn config(&self) -> &FlatConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn build(config: FlatConfig) -> Result<Self> {
        FlatModel::new(config, 0)
    }
}

fn write_blob<T: Scalar>(w: &mut impl Write, values: &[T]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend((v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar, M: Checkpointable<T>>(path: impl AsRef<Path>, model: &M, trainer: Option<&Trainer<T>>) -> Result<()> {
    save_checkpoint_with_meta(path, model, trainer, None)
}

pub fn save_checkpoint_with_meta<T: Scalar, M: Checkpointable<T>>(
    path: impl AsRef<Path>,
    model: &M,
    trainer: Option<&Trainer<T>>,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let store = model.store();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model: M::KIND,
        config: serde_json::to_value(model.config())?,
        params: store.iter().map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
        train_state: trainer.map(|t| TrainState { step: t.step, adam_t: t.adam.t, config: t.config.clone() }),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, t) in store.iter() {
        write_blob(&mut w, t.data())?;
    }
    if let Some(tr) = trainer {
        for m in &tr.adam.m {
            write_blob(&mut w, m)?;
        }
        for v in &tr.adam.v {
            write_blob(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedRecord)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn blob(&mut self, name: &str, expected: usize) -> Result<Vec<f32>> {
        let count = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        if count != expected {
            return Err(Error::ShapeMismatch(format!("blob {name} holds {count} values, shape needs {expected}")));
        }
        let raw = self.take(count.checked_mul(4).ok_or(Error::TruncatedRecord)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "IDTC" });
    }
    let mut r = Reader { bytes: &bytes, pos: 4 };
    let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let value: serde_json::Value = serde_json::from_slice(r.take(len)?)?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::UnsupportedVersion(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    let header: Header = serde_json::from_value(value)?;
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let values = r.blob(&p.name, p.shape.iter().product())?;
        params.push((p.name.clone(), p.shape.clone(), values));
    }
    let moments = match &header.train_state {
        Some(_) => {
            let mut read_all = || -> Result<Vec<Vec<f32>>> {
                header.params.iter().map(|p| r.blob(&p.name, p.shape.iter().product())).collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some((m, v))
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::LengthMismatch(format!("{} trailing bytes after the last blob", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model: header.model, config: header.config, params, train_state: header.train_state, moments, meta: header.meta })
}

fn tensor<T: Scalar>(shape: &[usize], values: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape, values.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect())
}

/// Rebuilds a model (and its trainer, when saved) from a checkpoint.
pub fn load_checkpoint<T: Scalar, M: Checkpointable<T>>(path: impl AsRef<Path>) -> Result<(M, Option<Trainer<T>>)> {
    let ck = read_checkpoint(path)?;
    if ck.model != M::KIND {
        return Err(Error::InvalidConfig(format!("checkpoint holds a {:?} model, expected {:?}", ck.model, M::KIND)));
    }
    let config: M::Config = serde_json::from_value(ck.config)?;
    let mut model = M::build(config)?;
    let store = model.store_mut();
    if store.len() != ck.params.len() {
        return Err(Error::ShapeMismatch(format!("checkpoint has {} parameters, model has {}", ck.params.len(), store.len())));
    }
    for (name, shape, values) in &ck.params {
        let id = store.id(name).ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        store.set(id, tensor(shape, values)?)?;
    }
    let trainer = match (ck.train_state, ck.moments) {
        (Some(state), Some((m, v))) => {
            let mut adam = AdamState::for_store(state.config.adam(), model.store());
            adam.t = state.adam_t;
            let widen = |xs: Vec<Vec<f32>>| -> Vec<Vec<T>> {
                xs.into_iter().map(|x| x.into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect()).collect()
            };
            adam.m = widen(m);
            adam.v = widen(v);
            Some(Trainer { config: state.config, adam, step: state.step })
        }
        _ => None,
    };
    Ok((model, trainer))
}

/// Like [`load_checkpoint`] but rejects a checkpoint whose model config
/// differs from `expected`.
pub fn load_checkpoint_matching<T: Scalar, M: Checkpointable<T>>(path: impl AsRef<Path>, expected: &M::Config) -> Result<(M, Option<Trainer<T>>)> {
    let (model, trainer) = load_checkpoint::<T, M>(path)?;
    if model.config() != expected {
        return Err(Error::InvalidConfig(format!(
            "checkpoint config {:?} differs from configured {:?}",
            model.config(),
            expected
        )));
    }
    Ok((model, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSpace, HighBatch, ObsSpace};
    use crate::tensor::Graph;
    use crate::transformer::TransformerConfig;

    fn tiny() -> IdtConfig {
        IdtConfig {
            transformer: TransformerConfig { n_layers: 1, n_heads: 2, embed_dim: 8, max_tokens: 64, dropout_p: 0.1, ..Default::default() },
            z_dim: 4,
            c: 2,
            n: 2,
            episode_len: 4,
            obs: ObsSpace::Grid { size: 3 },
            actions: ActionSpace::Discrete { n: 5 },
            return_scale: 4.0,
        }
    }

    fn forward(m: &IdtModel<f32>) -> Vec<f32> {
        let mut g = Graph::inference();
        let mut hb = HighBatch { seqs: 1, steps: 2, ..Default::default() };
        for i in 0..2 {
            hb.rtg.push(0.5);
            m.config.obs.push_grid(&mut hb.obs, (i, 2));
            hb.reward_sum.push(0.25);
            hb.done.push(i as f32);
        }
        let z = g.constant(Tensor::full(&[2, 4], 0.3));
        let (mu, ls) = m.make(&mut g, &hb, z).unwrap();
        [g.value(mu).data(), g.value(ls).data()].concat()
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let m = IdtModel::<f32>::new(tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, None).unwrap();
        let (back, tr): (IdtModel<f32>, _) = load_checkpoint(&p).unwrap();
        assert!(tr.is_none());
        assert_eq!(forward(&m), forward(&back));
        assert_eq!(m.store.fingerprint(), back.store.fingerprint());
    }

    #[test]
    fn trainer_state_survives() {
        let m = IdtModel::<f32>::new(tiny(), 7).unwrap();
        let mut tr = Trainer::new(TrainConfig::default(), &m.store).unwrap();
        tr.step = 12;
        tr.adam.t = 12;
        tr.adam.m[0][0] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, Some(&tr)).unwrap();
        let (_, back): (IdtModel<f32>, _) = load_checkpoint(&p).unwrap();
        let back = back.unwrap();
        assert_eq!((back.step, back.adam.t, back.adam.m[0][0]), (12, 12, 0.5));
    }

    #[test]
    fn corrupted_blob_length_is_shape_mismatch() {
        let m = IdtModel::<f32>::new(tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let at = 8 + header_len;
        let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        bytes[at..at + 8].copy_from_slice(&(count + 1).to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        let err = read_checkpoint(&p).unwrap_err();
        assert!(err.to_string().starts_with("shape mismatch"), "{err}");
    }

    #[test]
    fn different_z_dim_is_rejected() {
        let m = IdtModel::<f32>::new(tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, None).unwrap();
        let other = IdtConfig { z_dim: 6, ..tiny() };
        assert!(load_checkpoint_matching::<f32, IdtModel<f32>>(&p, &other).is_err());
        assert!(load_checkpoint_matching::<f32, IdtModel<f32>>(&p, &tiny()).is_ok());
    }

    #[test]
    fn unknown_version_and_magic() {
        let m = FlatModel::<f32>::new(FlatConfig { n: 1, ..FlatConfig::default() }, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        save_checkpoint(&p, &m, None).unwrap();
        let (back, _): (FlatModel<f32>, _) = load_checkpoint(&p).unwrap();
        assert_eq!(back.store.fingerprint(), m.store.fingerprint());
        let mut bytes = std::fs::read(&p).unwrap();
        let key = b"\"format_version\":";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len();
        bytes[at] = b'3';
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap_err().to_string(), "unsupported version 3");
        bytes[0] = b'Z';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::BadMagic { .. })));
    }
}
