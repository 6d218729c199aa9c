//! Named parameter registry with an explicit frozen/trainable split.
//!
//! Frozen parameters are plain tensors: operations on them record no
//! autodiff graph, so activations inside frozen blocks whose inputs carry no
//! gradient are never retained. Trainable parameters are `Var`s handed to
//! the optimizer. All initialization is drawn from a seeded ChaCha stream in
//! registration order, which makes model construction bit-reproducible.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::tensor_bytes;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    /// Gaussian scaled by `sqrt(1 / fan_in)`.
    Xavier { fan_in: usize },
    /// Identity matrix; requires a square 2-D shape.
    Identity,
}

enum Slot {
    Frozen(Tensor),
    Trainable(Var),
}

impl Slot {
    fn tensor(&self) -> Tensor {
        match self {
            Slot::Frozen(t) => t.clone(),
            Slot::Trainable(v) => v.as_tensor().clone(),
        }
    }
}

/// Preloaded values for checkpoint restoration: name -> (dtype, shape, raw bytes).
pub type Preset = HashMap<String, (DType, Vec<usize>, Vec<u8>)>;

pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    slots: IndexMap<String, Slot>,
    preset: Preset,
    strict: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            slots: IndexMap::new(),
            preset: Preset::new(),
            strict: false,
        }
    }

    /// A store that serves every registered parameter from checkpointed
    /// values. A parameter absent from the preset is an error (no silent
    /// partial loads); leftover entries are caught by
    /// [`ParamStore::finish_preset`].
    pub fn with_preset(dtype: DType, seed: u64, preset: Preset) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            slots: IndexMap::new(),
            preset,
            strict: true,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn draw(&mut self, shape: &[usize], init: Init) -> Vec<f64> {
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Identity => {
                assert_eq!(shape.len(), 2, "identity init needs a 2-D shape");
                assert_eq!(shape[0], shape[1], "identity init needs a square shape");
                let d = shape[0];
                let mut v = vec![0.0; n];
                for i in 0..d {
                    v[i * d + i] = 1.0;
                }
                v
            }
            Init::Normal(_) | Init::Kaiming { .. } | Init::Xavier { .. } => {
                let std = match init {
                    Init::Normal(s) => s,
                    Init::Kaiming { fan_in } => (2.0 / fan_in as f64).sqrt(),
                    Init::Xavier { fan_in } => (1.0 / fan_in as f64).sqrt(),
                    _ => unreachable!(),
                };
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        }
    }

    fn materialize(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.strict {
            let (dtype, pshape, bytes) = self.preset.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if pshape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` shape mismatch: checkpoint has {pshape:?}, model needs {shape:?}"
                )));
            }
            let t = tensor_from_bytes(dtype, &pshape, &bytes, &self.device)?;
            return Ok(t.to_dtype(self.dtype)?);
        }
        let fresh = self.draw(shape, init);
        let t = Tensor::from_vec(fresh, shape, &self.device)?;
        Ok(t.to_dtype(self.dtype)?)
    }

    pub fn trainable(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.materialize(name, shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.slots.insert(name.to_string(), Slot::Trainable(var)).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        Ok(out)
    }

    pub fn frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.materialize(name, shape, init)?;
        if self.slots.insert(name.to_string(), Slot::Frozen(t.clone())).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        Ok(t)
    }

    /// Errors if checkpointed arrays were not claimed by the model build.
    pub fn finish_preset(&self) -> Result<()> {
        if let Some(name) = self.preset.keys().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint contains parameter `{name}` that the model does not define"
            )));
        }
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.slots
            .values()
            .filter_map(|s| match s {
                Slot::Trainable(v) => Some(v.clone()),
                Slot::Frozen(_) => None,
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        matches!(self.slots.get(name), Some(Slot::Trainable(_)))
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.slots.get(name).map(|s| s.tensor())
    }

    /// Overwrite a trainable parameter in place (tests and ablations).
    pub fn set_trainable(&self, name: &str, value: &Tensor) -> Result<()> {
        match self.slots.get(name) {
            Some(Slot::Trainable(v)) => {
                v.set(&value.to_dtype(self.dtype)?)?;
                Ok(())
            }
            Some(Slot::Frozen(_)) => Err(Error::Config(format!("parameter `{name}` is frozen"))),
            None => Err(Error::Config(format!("no parameter named `{name}`"))),
        }
    }

    /// (trainable, total) scalar parameter counts.
    pub fn counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut total = 0;
        for slot in self.slots.values() {
            let n = slot.tensor().elem_count();
            total += n;
            if matches!(slot, Slot::Trainable(_)) {
                trainable += n;
            }
        }
        (trainable, total)
    }

    /// SHA-256 over name + raw bytes of every parameter matching the filter.
    pub fn fingerprint(&self, mut filter: impl FnMut(&str) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, slot) in &self.slots {
            if !filter(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update(tensor_bytes(&slot.tensor())?);
        }
        Ok(hex_string(&hasher.finalize()))
    }

    /// Per-parameter hashes, for pinpointing what changed.
    pub fn per_param_hashes(&self) -> Result<Vec<(String, String, bool)>> {
        let mut out = Vec::with_capacity(self.slots.len());
        for (name, slot) in &self.slots {
            let mut hasher = Sha256::new();
            hasher.update(tensor_bytes(&slot.tensor())?);
            out.push((
                name.clone(),
                hex_string(&hasher.finalize()),
                matches!(slot, Slot::Trainable(_)),
            ));
        }
        Ok(out)
    }

    /// Re-draw every trainable parameter from a fresh seeded stream. Used by
    /// gradient checks that need generic (non-zero) weights everywhere.
    pub fn randomize_trainable(&mut self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        for (_, slot) in self.slots.iter() {
            if let Slot::Trainable(v) = slot {
                let shape = v.dims().to_vec();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                let t = Tensor::from_vec(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
                v.set(&t)?;
            }
        }
        Ok(())
    }

    /// L2 norm per trainable parameter, for abort diagnostics.
    pub fn trainable_norms(&self) -> Result<Vec<(String, f64)>> {
        let mut out = vec![];
        for (name, slot) in &self.slots {
            if let Slot::Trainable(v) = slot {
                let n = v
                    .as_tensor()
                    .to_dtype(DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?
                    .sqrt();
                out.push((name.clone(), n));
            }
        }
        Ok(out)
    }

    /// Iterate (name, tensor, trainable) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Tensor, bool)> + '_ {
        self.slots.iter().map(|(name, slot)| {
            (
                name.as_str(),
                slot.tensor(),
                matches!(slot, Slot::Trainable(_)),
            )
        })
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn tensor_from_bytes(
    dtype: DType,
    shape: &[usize],
    bytes: &[u8],
    dev: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = match dtype {
        DType::F32 => {
            if bytes.len() != n * 4 {
                return Err(Error::Checkpoint(format!(
                    "byte length {} does not match f32 shape {shape:?}",
                    bytes.len()
                )));
            }
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(vals, shape, dev)?
        }
        DType::F64 => {
            if bytes.len() != n * 8 {
                return Err(Error::Checkpoint(format!(
                    "byte length {} does not match f64 shape {shape:?}",
                    bytes.len()
                )));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(vals, shape, dev)?
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype {other:?} in checkpoint"
            )))
        }
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_initialization() {
        let mut a = ParamStore::new(DType::F64, 42);
        let mut b = ParamStore::new(DType::F64, 42);
        let ta = a.trainable("w", &[3, 3], Init::Normal(0.5)).unwrap();
        let tb = b.trainable("w", &[3, 3], Init::Normal(0.5)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn counts_split_by_trainability() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.frozen("a", &[4, 4], Init::Normal(1.0)).unwrap();
        s.trainable("b", &[2, 3], Init::Zeros).unwrap();
        assert_eq!(s.counts(), (6, 22));
    }

    #[test]
    fn frozen_tensors_receive_no_gradients() {
        let mut s = ParamStore::new(DType::F64, 0);
        let f = s.frozen("w", &[2, 2], Init::Normal(1.0)).unwrap();
        let t = s.trainable("v", &[2, 2], Init::Normal(1.0)).unwrap();
        let x = Tensor::ones((1, 2), DType::F64, s.device()).unwrap();
        let loss = x.matmul(&f).unwrap().matmul(&t).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&t).is_some());
        assert!(grads.get(&f).is_none());
    }

    #[test]
    fn preset_shape_mismatch_is_named() {
        let mut preset = Preset::new();
        preset.insert(
            "w".to_string(),
            (DType::F32, vec![2, 2], vec![0u8; 16]),
        );
        let mut s = ParamStore::with_preset(DType::F32, 0, preset);
        let err = s.trainable("w", &[3, 3], Init::Zeros).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn unclaimed_preset_entries_error() {
        let mut preset = Preset::new();
        preset.insert("ghost".to_string(), (DType::F32, vec![1], vec![0u8; 4]));
        let s = ParamStore::with_preset(DType::F32, 0, preset);
        let err = s.finish_preset().unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }
}
