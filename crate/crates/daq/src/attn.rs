//! Single-head attention with learned projections, shared by the temporal
//! memory and the mask decoder.

use candle_core::Tensor;

use crate::error::Result;
use crate::ops::{attend, linear};
use crate::params::{Init, ParamStore};

pub(crate) struct AttnProj {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    dim: usize,
}

impl AttnProj {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            wq: store.trainable(&format!("{prefix}.q.weight"), &[c, c], Init::Xavier { fan_in: c })?,
            wk: store.trainable(&format!("{prefix}.k.weight"), &[c, c], Init::Xavier { fan_in: c })?,
            wv: store.trainable(&format!("{prefix}.v.weight"), &[c, c], Init::Xavier { fan_in: c })?,
            wo: store.trainable(&format!("{prefix}.proj.weight"), &[c, c], Init::Xavier { fan_in: c })?,
            bo: store.trainable(&format!("{prefix}.proj.bias"), &[c], Init::Zeros)?,
            dim: c,
        })
    }

    /// Attention with distinct key and value sources; returns output and
    /// attention rows.
    pub(crate) fn forward_kv(
        &self,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let q = q_in.matmul(&self.wq)?;
        let k = k_in.matmul(&self.wk)?;
        let v = v_in.matmul(&self.wv)?;
        let (out, probs) = attend(&q, &k, &v, scale)?;
        Ok((linear(&out, &self.wo, &self.bo)?, probs))
    }

    pub(crate) fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_kv(q_in, kv_in, kv_in)
    }
}
