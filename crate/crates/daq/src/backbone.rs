//! Frozen 4-stage hierarchical encoder stand-in.
//!
//! Topology mirrors a hierarchical ViT: a stride-2 patch embedding, then
//! four stages of pre-norm global-attention transformer blocks, with a 2x
//! spatial reduction and a channel increase at the entry of stages 2-4.
//! Cumulative strides are therefore 2/4/8/16. Weights are randomly
//! initialized from the store seed and are always registered frozen.

use candle_core::Tensor;

use crate::config::Config;
use crate::error::Result;
use crate::ops::{attend, layer_norm, linear, space_to_depth2, spatial_to_tokens, tokens_to_spatial};
use crate::params::{Init, ParamStore};

/// Low-rank additive deltas for one block's query and value projections.
pub struct BlockLora {
    pub a_q: Tensor, // (c, r)
    pub b_q: Tensor, // (r, c)
    pub a_v: Tensor,
    pub b_v: Tensor,
    pub scale: f64,
}

pub struct Block {
    norm1_w: Tensor,
    norm1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    norm2_w: Tensor,
    norm2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
    channels: usize,
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        let lin = |store: &mut ParamStore, name: String, fan_in: usize, shape: &[usize]| {
            store.frozen(&name, shape, Init::Xavier { fan_in })
        };
        Ok(Self {
            norm1_w: store.frozen(&format!("{prefix}.norm1.weight"), &[c], Init::Ones)?,
            norm1_b: store.frozen(&format!("{prefix}.norm1.bias"), &[c], Init::Zeros)?,
            wq: lin(store, format!("{prefix}.attn.q.weight"), c, &[c, c])?,
            bq: store.frozen(&format!("{prefix}.attn.q.bias"), &[c], Init::Zeros)?,
            wk: lin(store, format!("{prefix}.attn.k.weight"), c, &[c, c])?,
            bk: store.frozen(&format!("{prefix}.attn.k.bias"), &[c], Init::Zeros)?,
            wv: lin(store, format!("{prefix}.attn.v.weight"), c, &[c, c])?,
            bv: store.frozen(&format!("{prefix}.attn.v.bias"), &[c], Init::Zeros)?,
            wo: lin(store, format!("{prefix}.attn.proj.weight"), c, &[c, c])?,
            bo: store.frozen(&format!("{prefix}.attn.proj.bias"), &[c], Init::Zeros)?,
            norm2_w: store.frozen(&format!("{prefix}.norm2.weight"), &[c], Init::Ones)?,
            norm2_b: store.frozen(&format!("{prefix}.norm2.bias"), &[c], Init::Zeros)?,
            fc1_w: lin(store, format!("{prefix}.mlp.fc1.weight"), c, &[c, 4 * c])?,
            fc1_b: store.frozen(&format!("{prefix}.mlp.fc1.bias"), &[4 * c], Init::Zeros)?,
            fc2_w: lin(store, format!("{prefix}.mlp.fc2.weight"), 4 * c, &[4 * c, c])?,
            fc2_b: store.frozen(&format!("{prefix}.mlp.fc2.bias"), &[c], Init::Zeros)?,
            channels: c,
        })
    }

    /// Pre-norm block on `(n, c)` tokens. `lora` adds low-rank deltas to the
    /// query and value projections of this block.
    pub fn forward(&self, x: &Tensor, lora: Option<&BlockLora>) -> Result<Tensor> {
        let h = layer_norm(x, &self.norm1_w, &self.norm1_b)?;
        let mut q = linear(&h, &self.wq, &self.bq)?;
        let k = linear(&h, &self.wk, &self.bk)?;
        let mut v = linear(&h, &self.wv, &self.bv)?;
        if let Some(l) = lora {
            q = (q + (h.matmul(&l.a_q)?.matmul(&l.b_q)? * l.scale)?)?;
            v = (v + (h.matmul(&l.a_v)?.matmul(&l.b_v)? * l.scale)?)?;
        }
        let scale = 1.0 / (self.channels as f64).sqrt();
        let (attn, _) = attend(&q, &k, &v, scale)?;
        let attn = linear(&attn, &self.wo, &self.bo)?;
        let x = (x + attn)?;
        let h2 = layer_norm(&x, &self.norm2_w, &self.norm2_b)?;
        let m = linear(&h2, &self.fc1_w, &self.fc1_b)?.gelu()?;
        let m = linear(&m, &self.fc2_w, &self.fc2_b)?;
        Ok((x + m)?)
    }

    /// Query/value projections with the frozen weights merged with a LoRA
    /// delta. Used to validate the merged-equals-two-path identity.
    pub fn merged_qv(&self, lora: &BlockLora) -> Result<(Tensor, Tensor)> {
        let wq = (&self.wq + (lora.a_q.matmul(&lora.b_q)? * lora.scale)?)?;
        let wv = (&self.wv + (lora.a_v.matmul(&lora.b_v)? * lora.scale)?)?;
        Ok((wq, wv))
    }

    pub fn forward_merged(&self, x: &Tensor, lora: &BlockLora) -> Result<Tensor> {
        let (wq, wv) = self.merged_qv(lora)?;
        let h = layer_norm(x, &self.norm1_w, &self.norm1_b)?;
        let q = linear(&h, &wq, &self.bq)?;
        let k = linear(&h, &self.wk, &self.bk)?;
        let v = linear(&h, &wv, &self.bv)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let (attn, _) = attend(&q, &k, &v, scale)?;
        let attn = linear(&attn, &self.wo, &self.bo)?;
        let x = (x + attn)?;
        let h2 = layer_norm(&x, &self.norm2_w, &self.norm2_b)?;
        let m = linear(&h2, &self.fc1_w, &self.fc1_b)?.gelu()?;
        let m = linear(&m, &self.fc2_w, &self.fc2_b)?;
        Ok((x + m)?)
    }
}

/// Space-to-depth followed by a linear projection; stride-2 downsampling.
struct Merge {
    w: Tensor,
    b: Tensor,
}

impl Merge {
    fn new(store: &mut ParamStore, prefix: &str, c_in4: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.frozen(&format!("{prefix}.weight"), &[c_in4, c_out], Init::Xavier { fan_in: c_in4 })?,
            b: store.frozen(&format!("{prefix}.bias"), &[c_out], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = space_to_depth2(x)?;
        let (_, h, w) = d.dims3()?;
        let t = spatial_to_tokens(&d)?;
        tokens_to_spatial(&linear(&t, &self.w, &self.b)?, h, w)
    }
}

pub struct Stage {
    entry: Option<Merge>,
    blocks: Vec<Block>,
}

impl Stage {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, idx: usize) -> &Block {
        &self.blocks[idx]
    }
}

pub struct Backbone {
    patch: Merge,
    stages: Vec<Stage>,
    channels: [usize; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let ch = cfg.stage_channels;
        let patch = Merge::new(store, "backbone.patch_embed", 4 * 3, ch[0])?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let entry = if i == 0 {
                None
            } else {
                Some(Merge::new(
                    store,
                    &format!("backbone.stage{}.entry", i + 1),
                    4 * ch[i - 1],
                    ch[i],
                )?)
            };
            let mut blocks = Vec::with_capacity(cfg.stage_blocks[i]);
            for b in 0..cfg.stage_blocks[i] {
                blocks.push(Block::new(
                    store,
                    &format!("backbone.stage{}.block{}", i + 1, b),
                    ch[i],
                )?);
            }
            stages.push(Stage { entry, blocks });
        }
        Ok(Self { patch, stages, channels: ch })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn stage(&self, index1: usize) -> &Stage {
        &self.stages[index1 - 1]
    }

    /// Patch embedding: `(3, s, s)` image -> `(c1, s/2, s/2)` features.
    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        self.patch.forward(img)
    }

    /// Run stage `i` (1-based) on `(c, h, w)` features. Stages 2-4 halve the
    /// spatial size at entry. `lora` optionally provides per-block deltas.
    pub fn stage_forward(
        &self,
        index1: usize,
        x: &Tensor,
        lora: Option<&[BlockLora]>,
    ) -> Result<Tensor> {
        let stage = &self.stages[index1 - 1];
        let x = match &stage.entry {
            Some(entry) => entry.forward(x)?,
            None => x.clone(),
        };
        let (_, h, w) = x.dims3()?;
        let mut t = spatial_to_tokens(&x)?;
        for (bi, block) in stage.blocks.iter().enumerate() {
            let bl = lora.map(|l| &l[bi]);
            t = block.forward(&t, bl)?;
        }
        tokens_to_spatial(&t, h, w)
    }
}
