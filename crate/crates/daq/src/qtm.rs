//! Query-driven temporal memory.
//!
//! Two learnable query sets replace manual prompts and the memory bank:
//! static frame-level queries pool saliency content from the highest-level
//! image embedding, and video-level queries carry temporal context across
//! frames through a residual cross-attention/self-attention/FFN update fed
//! by an encoded memory of the previous prediction. The module also hosts
//! the ablation variants of the update rule, including a minimal FIFO
//! memory-bank baseline that bypasses the queries entirely.

use candle_core::Tensor;

use crate::config::{Config, UpdateStrategy};
use crate::error::{Error, Result};
use crate::ops::{attend, conv3x3, layer_norm, linear, resize_bilinear, softmax_rows, spatial_to_tokens};
use crate::params::{Init, ParamStore};

/// Memory features `F_m`: one row per spatial position of the encoded
/// image/prediction pair.
pub struct MemoryFeatures(pub Tensor);

/// Per-video recurrent state: the current video-level queries plus, for the
/// memory-bank baseline, the stored memory features.
#[derive(Clone)]
pub struct VideoQueryState {
    pub queries: Tensor, // (N_v, c)
    pub t: usize,
    pub bank: Vec<Tensor>, // (L, c) entries, FIFO
}

use crate::attn::AttnProj;

struct MemoryEncoder {
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    lin_w: Tensor,
    lin_b: Tensor,
}

impl MemoryEncoder {
    fn new(store: &mut ParamStore, width: usize, c: usize) -> Result<Self> {
        Ok(Self {
            conv1_w: store.trainable(
                "qtm.memenc.conv1.weight",
                &[9 * (width + 1), width],
                Init::Xavier { fan_in: 9 * (width + 1) },
            )?,
            conv1_b: store.trainable("qtm.memenc.conv1.bias", &[width], Init::Zeros)?,
            conv2_w: store.trainable(
                "qtm.memenc.conv2.weight",
                &[9 * width, width],
                Init::Xavier { fan_in: 9 * width },
            )?,
            conv2_b: store.trainable("qtm.memenc.conv2.bias", &[width], Init::Zeros)?,
            lin_w: store.trainable("qtm.memenc.linear.weight", &[width, c], Init::Xavier { fan_in: width })?,
            lin_b: store.trainable("qtm.memenc.linear.bias", &[c], Init::Zeros)?,
        })
    }

    fn forward(&self, e4: &Tensor, pred: &Tensor) -> Result<MemoryFeatures> {
        let (_, h, w) = e4.dims3()?;
        let p = resize_bilinear(pred, h, w)?;
        let x = Tensor::cat(&[e4, &p], 0)?;
        let x = conv3x3(&x, &self.conv1_w, &self.conv1_b)?.gelu()?;
        let x = conv3x3(&x, &self.conv2_w, &self.conv2_b)?.gelu()?;
        let t = spatial_to_tokens(&x)?;
        Ok(MemoryFeatures(linear(&t, &self.lin_w, &self.lin_b)?))
    }
}

struct UpdateBlock {
    ln1_w: Tensor,
    ln1_b: Tensor,
    ca: AttnProj,
    ln2_w: Tensor,
    ln2_b: Tensor,
    sa: AttnProj,
    ln3_w: Tensor,
    ln3_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

impl UpdateBlock {
    fn new(store: &mut ParamStore, c: usize, strategy: UpdateStrategy) -> Result<Self> {
        // The block starts neutral: zero weights in the last layer, with the
        // bias at the identity element of the combination rule.
        let fc2_bias_init = match strategy {
            UpdateStrategy::Multiply => Init::Ones,
            _ => Init::Zeros,
        };
        Ok(Self {
            ln1_w: store.trainable("qtm.update.norm1.weight", &[c], Init::Ones)?,
            ln1_b: store.trainable("qtm.update.norm1.bias", &[c], Init::Zeros)?,
            ca: AttnProj::new(store, "qtm.update.cross_attn", c)?,
            ln2_w: store.trainable("qtm.update.norm2.weight", &[c], Init::Ones)?,
            ln2_b: store.trainable("qtm.update.norm2.bias", &[c], Init::Zeros)?,
            sa: AttnProj::new(store, "qtm.update.self_attn", c)?,
            ln3_w: store.trainable("qtm.update.norm3.weight", &[c], Init::Ones)?,
            ln3_b: store.trainable("qtm.update.norm3.bias", &[c], Init::Zeros)?,
            fc1_w: store.trainable("qtm.update.ffn.fc1.weight", &[c, 4 * c], Init::Xavier { fan_in: c })?,
            fc1_b: store.trainable("qtm.update.ffn.fc1.bias", &[4 * c], Init::Zeros)?,
            fc2_w: store.trainable("qtm.update.ffn.fc2.weight", &[4 * c, c], Init::Zeros)?,
            fc2_b: store.trainable("qtm.update.ffn.fc2.bias", &[c], fc2_bias_init)?,
        })
    }

    /// `FFN(SA(CA(q, f_m)))` with pre-normalization before each sub-block;
    /// the residual combination happens in the caller.
    fn forward(&self, q: &Tensor, f_m: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let h = layer_norm(q, &self.ln1_w, &self.ln1_b)?;
        let (ca_out, ca_probs) = self.ca.forward(&h, f_m)?;
        let h = layer_norm(&ca_out, &self.ln2_w, &self.ln2_b)?;
        let (sa_out, sa_probs) = self.sa.forward(&h, &h)?;
        let h = layer_norm(&sa_out, &self.ln3_w, &self.ln3_b)?;
        let f = linear(&h, &self.fc1_w, &self.fc1_b)?.gelu()?;
        let f = linear(&f, &self.fc2_w, &self.fc2_b)?;
        Ok((f, ca_probs, sa_probs))
    }
}

struct BankAttention {
    wq: Tensor, // (width, c)
    wk: Tensor, // (c, c)
    wv: Tensor, // (c, c)
    wo: Tensor, // (c, width), zero-init so the baseline starts neutral
    bo: Tensor,
    c: usize,
}

impl BankAttention {
    fn new(store: &mut ParamStore, width: usize, c: usize) -> Result<Self> {
        Ok(Self {
            wq: store.trainable("qtm.bank.q.weight", &[width, c], Init::Xavier { fan_in: width })?,
            wk: store.trainable("qtm.bank.k.weight", &[c, c], Init::Xavier { fan_in: c })?,
            wv: store.trainable("qtm.bank.v.weight", &[c, c], Init::Xavier { fan_in: c })?,
            wo: store.trainable("qtm.bank.proj.weight", &[c, width], Init::Zeros)?,
            bo: store.trainable("qtm.bank.proj.bias", &[width], Init::Zeros)?,
            c,
        })
    }
}

pub struct Qtm {
    frame_queries: Tensor,
    video_queries: Tensor,
    query_embed_w: Tensor,
    query_embed_b: Tensor,
    input_proj_w: Tensor,
    input_proj_b: Tensor,
    pool_lin_w: Tensor,
    pool_lin_b: Tensor,
    enh_wq: Tensor,
    enh_wk: Tensor,
    enh_wv: Tensor,
    memenc: Option<MemoryEncoder>,
    update: Option<UpdateBlock>,
    bank_attn: Option<BankAttention>,
    strategy: UpdateStrategy,
    bank_cap: usize,
    pub num_video_queries: usize,
    pub hidden_dim: usize,
}

impl Qtm {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let c = cfg.query_hidden_dim;
        let w = cfg.fpn_width;
        let q_init = Init::Normal(1.0 / (c as f64).sqrt());
        let frame_queries = store.trainable("qtm.frame_queries", &[cfg.num_frame_queries, c], q_init)?;
        let video_queries = store.trainable("qtm.video_queries", &[cfg.num_video_queries, c], q_init)?;
        let query_embed_w = store.trainable("qtm.query_embed.weight", &[c, c], Init::Xavier { fan_in: c })?;
        let query_embed_b = store.trainable("qtm.query_embed.bias", &[c], Init::Zeros)?;
        let input_proj_w = store.trainable("qtm.input_proj.weight", &[w, c], Init::Xavier { fan_in: w })?;
        let input_proj_b = store.trainable("qtm.input_proj.bias", &[c], Init::Zeros)?;
        let pool_lin_w = store.trainable("qtm.frame_pool.weight", &[c, c], Init::Xavier { fan_in: c })?;
        let pool_lin_b = store.trainable("qtm.frame_pool.bias", &[c], Init::Zeros)?;
        let enh_wq = store.trainable("qtm.enhance.q.weight", &[c, c], Init::Xavier { fan_in: c })?;
        let enh_wk = store.trainable("qtm.enhance.k.weight", &[c, c], Init::Xavier { fan_in: c })?;
        let enh_wv = store.trainable("qtm.enhance.v.weight", &[c, c], Init::Xavier { fan_in: c })?;
        let needs_memenc = !matches!(cfg.update_strategy, UpdateStrategy::None);
        let memenc = if needs_memenc { Some(MemoryEncoder::new(store, w, c)?) } else { None };
        let update = match cfg.update_strategy {
            UpdateStrategy::Addition | UpdateStrategy::Multiply => {
                Some(UpdateBlock::new(store, c, cfg.update_strategy)?)
            }
            _ => None,
        };
        let bank_attn = match cfg.update_strategy {
            UpdateStrategy::Sam2Bank => Some(BankAttention::new(store, w, c)?),
            _ => None,
        };
        Ok(Self {
            frame_queries,
            video_queries,
            query_embed_w,
            query_embed_b,
            input_proj_w,
            input_proj_b,
            pool_lin_w,
            pool_lin_b,
            enh_wq,
            enh_wk,
            enh_wv,
            memenc,
            update,
            bank_attn,
            strategy: cfg.update_strategy,
            bank_cap: cfg.memory_bank_size,
            num_video_queries: cfg.num_video_queries,
            hidden_dim: c,
        })
    }

    pub fn strategy(&self) -> UpdateStrategy {
        self.strategy
    }

    /// `(Q'_f, Q'_v)`: both query sets through the shared embedding layer.
    pub fn projected_queries(&self) -> Result<(Tensor, Tensor)> {
        let qf = linear(&self.frame_queries, &self.query_embed_w, &self.query_embed_b)?;
        let qv = linear(&self.video_queries, &self.query_embed_w, &self.query_embed_b)?;
        Ok((qf, qv))
    }

    /// State at t=0: the projected initial video queries.
    pub fn initial_state(&self) -> Result<VideoQueryState> {
        let (_, qv) = self.projected_queries()?;
        Ok(VideoQueryState { queries: qv, t: 0, bank: vec![] })
    }

    /// Project `(width, h, w)` image embeddings to `(h*w, c)` tokens.
    pub fn project_image(&self, e4: &Tensor) -> Result<Tensor> {
        let t = spatial_to_tokens(e4)?;
        linear(&t, &self.input_proj_w, &self.input_proj_b)
    }

    /// Frame-query pooling with its attention rows exposed.
    pub fn pool_frame_queries_traced(&self, qf_proj: &Tensor, e4c: &Tensor) -> Result<(Tensor, Tensor)> {
        let scores = qf_proj.matmul(&e4c.t()?.contiguous()?)?; // (N_f, hw)
        let probs = softmax_rows(&scores)?;
        let agg = probs.matmul(e4c)?;
        Ok((linear(&agg, &self.pool_lin_w, &self.pool_lin_b)?, probs))
    }

    /// Spatial-attention pooling of the image tokens by the projected frame
    /// queries, followed by the output linear layer: `E_f`.
    pub fn pool_frame_queries(&self, qf_proj: &Tensor, e4c: &Tensor) -> Result<Tensor> {
        Ok(self.pool_frame_queries_traced(qf_proj, e4c)?.0)
    }

    /// Single-head cross-attention from the video queries onto the frame
    /// embeddings, plus the residual: `CA(Q_v, E_f) + Q_v`.
    pub fn enhance_video_queries_traced(&self, q_state: &Tensor, e_f: &Tensor) -> Result<(Tensor, Tensor)> {
        let scale = 1.0 / (self.hidden_dim as f64).sqrt();
        let q = q_state.matmul(&self.enh_wq)?;
        let k = e_f.matmul(&self.enh_wk)?;
        let v = e_f.matmul(&self.enh_wv)?;
        let (out, probs) = attend(&q, &k, &v, scale)?;
        Ok(((out + q_state)?, probs))
    }

    pub fn enhance_video_queries(&self, q_state: &Tensor, e_f: &Tensor) -> Result<Tensor> {
        Ok(self.enhance_video_queries_traced(q_state, e_f)?.0)
    }

    /// Element-wise interaction of the enhanced queries with the globally
    /// pooled image tokens: `E_L`, always `(N_v, c)`.
    pub fn form_learnable_embeddings(&self, q_enhanced: &Tensor, e4c: &Tensor) -> Result<Tensor> {
        let g = e4c.mean(0)?; // (c,)
        Ok(q_enhanced.broadcast_mul(&g)?)
    }

    /// `F_m = Linear(ME(E4, P))`.
    pub fn encode_memory(&self, e4: &Tensor, pred: &Tensor) -> Result<MemoryFeatures> {
        let me = self
            .memenc
            .as_ref()
            .ok_or_else(|| Error::Config("update strategy `none` builds no memory encoder".into()))?;
        me.forward(e4, pred)
    }

    /// The residual update `Q_{t+1} = Q_t + FFN(SA(CA(Q_t, F_m)))`.
    pub fn update_video_queries(&self, state: &VideoQueryState, f_m: &MemoryFeatures) -> Result<VideoQueryState> {
        let delta = self.update_block_output(state, f_m)?;
        Ok(VideoQueryState {
            queries: (&state.queries + delta)?,
            t: state.t + 1,
            bank: state.bank.clone(),
        })
    }

    /// `FFN(SA(CA(Q_t, F_m)))` alone, before any residual combination.
    fn update_block_output(&self, state: &VideoQueryState, f_m: &MemoryFeatures) -> Result<Tensor> {
        let block = self
            .update
            .as_ref()
            .ok_or_else(|| Error::Config(format!("strategy {:?} builds no update block", self.strategy)))?;
        let (delta, _, _) = block.forward(&state.queries, &f_m.0)?;
        Ok(delta)
    }

    /// Attention rows of one update step, for the structural invariants.
    pub fn update_attention_rows(&self, state: &VideoQueryState, f_m: &MemoryFeatures) -> Result<(Tensor, Tensor)> {
        let block = self
            .update
            .as_ref()
            .ok_or_else(|| Error::Config("no update block".into()))?;
        let (_, ca, sa) = block.forward(&state.queries, &f_m.0)?;
        Ok((ca, sa))
    }

    /// Strategy dispatch for the temporal update. `f_m` may be `None` only
    /// for the `none` strategy.
    pub fn update_variant(
        &self,
        strategy: UpdateStrategy,
        state: &VideoQueryState,
        f_m: Option<&MemoryFeatures>,
    ) -> Result<VideoQueryState> {
        match strategy {
            UpdateStrategy::None => Ok(VideoQueryState {
                queries: state.queries.clone(),
                t: state.t + 1,
                bank: state.bank.clone(),
            }),
            UpdateStrategy::Addition | UpdateStrategy::Multiply => {
                let f_m = f_m.ok_or_else(|| {
                    Error::Config("update strategy needs memory features".into())
                })?;
                let delta = self.update_block_output(state, f_m)?;
                let queries = match strategy {
                    UpdateStrategy::Multiply => state.queries.mul(&delta)?,
                    _ => (&state.queries + delta)?,
                };
                Ok(VideoQueryState { queries, t: state.t + 1, bank: state.bank.clone() })
            }
            UpdateStrategy::Sam2Bank => {
                let f_m = f_m.ok_or_else(|| {
                    Error::Config("memory bank update needs memory features".into())
                })?;
                let mut bank = state.bank.clone();
                bank.push(f_m.0.clone());
                while bank.len() > self.bank_cap {
                    bank.remove(0);
                }
                Ok(VideoQueryState { queries: state.queries.clone(), t: state.t + 1, bank })
            }
        }
    }

    /// For the memory-bank baseline: image tokens cross-attend to the
    /// concatenated stored memories before decoding. Identity when the bank
    /// is empty or the model was not built for the baseline.
    pub fn bank_enhance(&self, e4: &Tensor, bank: &[Tensor]) -> Result<Tensor> {
        let Some(attn) = self.bank_attn.as_ref() else {
            return Ok(e4.clone());
        };
        if bank.is_empty() {
            return Ok(e4.clone());
        }
        let (_, h, w) = e4.dims3()?;
        let x = spatial_to_tokens(e4)?; // (hw, width)
        let mem = Tensor::cat(&bank.iter().collect::<Vec<_>>(), 0)?; // (K*L, c)
        let scale = 1.0 / (attn.c as f64).sqrt();
        let q = x.matmul(&attn.wq)?;
        let k = mem.matmul(&attn.wk)?;
        let v = mem.matmul(&attn.wv)?;
        let (out, _) = attend(&q, &k, &v, scale)?;
        let out = linear(&out, &attn.wo, &attn.bo)?;
        let fused = (x + out)?;
        crate::ops::tokens_to_spatial(&fused, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(strategy: UpdateStrategy) -> Config {
        let mut cfg = Config::default();
        cfg.num_frame_queries = 2;
        cfg.num_video_queries = 2;
        cfg.query_hidden_dim = 4;
        cfg.fpn_width = 6;
        cfg.update_strategy = strategy;
        cfg
    }

    fn build(strategy: UpdateStrategy, seed: u64) -> (ParamStore, Qtm) {
        let mut store = ParamStore::new(DType::F64, seed);
        let qtm = Qtm::new(&mut store, &small_cfg(strategy)).unwrap();
        (store, qtm)
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, (rows, cols), &Device::Cpu).unwrap()
    }

    fn to2(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    fn gelu(v: f64) -> f64 {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
    }

    #[test]
    fn pooling_constant_map_ignores_queries() {
        let (_s, qtm) = build(UpdateStrategy::None, 1);
        // every spatial position holds the same feature vector v
        let v = [0.3f64, -0.7, 1.1, 0.2];
        let e4c = Tensor::from_vec(v.repeat(5), (5, 4), &Device::Cpu).unwrap();
        let qf = rand_mat(2, 4, 2);
        let out = to2(&qtm.pool_frame_queries(&qf, &e4c).unwrap());
        // expected: Linear(v) for every row
        let vt = Tensor::from_vec(v.to_vec(), (1, 4), &Device::Cpu).unwrap();
        let want = to2(&linear(&vt, &qtm.pool_lin_w, &qtm.pool_lin_b).unwrap());
        for row in &out {
            for (a, b) in row.iter().zip(want[0].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_saturates_on_dominant_position() {
        let (_s, qtm) = build(UpdateStrategy::None, 1);
        // qf = e1, so scores are the first feature column; position 2 wins by +50
        let qf = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 0.0], (1, 4), &Device::Cpu).unwrap();
        let mut feats = vec![0.0f64; 4 * 4];
        for (pos, f) in feats.chunks_mut(4).enumerate() {
            f[0] = if pos == 2 { 50.0 } else { 0.0 };
            f[1] = pos as f64;
            f[2] = -(pos as f64);
            f[3] = 0.5;
        }
        let e4c = Tensor::from_vec(feats.clone(), (4, 4), &Device::Cpu).unwrap();
        let (_, probs) = qtm.pool_frame_queries_traced(&qf, &e4c).unwrap();
        let agg = to2(&probs.matmul(&e4c).unwrap());
        for (k, want) in feats[8..12].iter().enumerate() {
            assert!((agg[0][k] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_matches_loop_oracle() {
        let (_s, qtm) = build(UpdateStrategy::None, 3);
        let qf = rand_mat(2, 4, 10);
        let e4c = rand_mat(3, 4, 11);
        let out = to2(&qtm.pool_frame_queries(&qf, &e4c).unwrap());
        let qfd = to2(&qf);
        let ed = to2(&e4c);
        let wd = to2(&qtm.pool_lin_w);
        let bd = qtm.pool_lin_b.to_vec1::<f64>().unwrap();
        for (i, qrow) in qfd.iter().enumerate() {
            let scores: Vec<f64> = ed
                .iter()
                .map(|erow| qrow.iter().zip(erow).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut agg = [0.0f64; 4];
            for (w, erow) in exps.iter().zip(ed.iter()) {
                for k in 0..4 {
                    agg[k] += w / z * erow[k];
                }
            }
            for co in 0..4 {
                let mut acc = bd[co];
                for ci in 0..4 {
                    acc += agg[ci] * wd[ci][co];
                }
                assert!((out[i][co] - acc).abs() < 1e-9, "row {i} col {co}");
            }
        }
    }

    #[test]
    fn enhancement_with_zero_values_is_identity() {
        let (store, qtm) = build(UpdateStrategy::None, 4);
        store
            .set_trainable("qtm.enhance.v.weight", &Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let q = rand_mat(2, 4, 20);
        let ef = rand_mat(3, 4, 21);
        let out = qtm.enhance_video_queries(&q, &ef).unwrap();
        assert_eq!(to2(&out), to2(&q));
    }

    #[test]
    fn enhancement_over_identical_rows_adds_that_row() {
        let (store, qtm) = build(UpdateStrategy::None, 4);
        let eye = Tensor::from_vec(
            vec![1.0f64, 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
            (4, 4),
            &Device::Cpu,
        )
        .unwrap();
        store.set_trainable("qtm.enhance.v.weight", &eye).unwrap();
        let u = [0.4f64, -0.2, 0.9, 0.1];
        let ef = Tensor::from_vec(u.repeat(3), (3, 4), &Device::Cpu).unwrap();
        let q = rand_mat(2, 4, 22);
        let out = to2(&qtm.enhance_video_queries(&q, &ef).unwrap());
        let qd = to2(&q);
        for (orow, qrow) in out.iter().zip(qd.iter()) {
            for k in 0..4 {
                assert!((orow[k] - (qrow[k] + u[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn enhancement_matches_attention_oracle() {
        let (_s, qtm) = build(UpdateStrategy::None, 5);
        let qs = rand_mat(2, 4, 30);
        let ef = rand_mat(3, 4, 31);
        let out = to2(&qtm.enhance_video_queries(&qs, &ef).unwrap());
        let q = to2(&qs.matmul(&qtm.enh_wq).unwrap());
        let k = to2(&ef.matmul(&qtm.enh_wk).unwrap());
        let v = to2(&ef.matmul(&qtm.enh_wv).unwrap());
        let qd = to2(&qs);
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        for i in 0..2 {
            let scores: Vec<f64> = k
                .iter()
                .map(|krow| q[i].iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..4 {
                let attn: f64 = exps.iter().zip(v.iter()).map(|(w, vrow)| w / z * vrow[c]).sum();
                let want = attn + qd[i][c];
                assert!((out[i][c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embeddings_with_unit_pool_equal_queries() {
        let (_s, qtm) = build(UpdateStrategy::None, 6);
        let q = rand_mat(2, 4, 40);
        let e4c = Tensor::ones((7, 4), DType::F64, &Device::Cpu).unwrap();
        let el = qtm.form_learnable_embeddings(&q, &e4c).unwrap();
        assert_eq!(to2(&el), to2(&q));
    }

    #[test]
    fn embeddings_of_zero_queries_are_zero() {
        let (_s, qtm) = build(UpdateStrategy::None, 6);
        let q = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let e4c = rand_mat(7, 4, 41);
        let el = qtm.form_learnable_embeddings(&q, &e4c).unwrap();
        let s = el.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn embeddings_match_rowwise_product_oracle() {
        let (_s, qtm) = build(UpdateStrategy::None, 6);
        let q = rand_mat(2, 4, 42);
        let e4c = rand_mat(4, 4, 43);
        let el = to2(&qtm.form_learnable_embeddings(&q, &e4c).unwrap());
        let ed = to2(&e4c);
        let qd = to2(&q);
        for c in 0..4 {
            let g: f64 = ed.iter().map(|r| r[c]).sum::<f64>() / 4.0;
            for i in 0..2 {
                assert!((el[i][c] - qd[i][c] * g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_encoding_is_pure_and_shaped() {
        let (_s, qtm) = build(UpdateStrategy::Addition, 7);
        let e4 = rand_mat(6 * 4, 1, 50).reshape((6, 2, 2)).unwrap();
        let pred = rand_mat(16, 1, 51).reshape((1, 4, 4)).unwrap().abs().unwrap();
        let a = qtm.encode_memory(&e4, &pred).unwrap();
        let b = qtm.encode_memory(&e4, &pred).unwrap();
        assert_eq!(to2(&a.0), to2(&b.0));
        assert_eq!(a.0.dims(), [4, 4]); // h*w rows, c columns
    }

    #[test]
    fn memory_encoding_sees_the_prediction() {
        let (_s, qtm) = build(UpdateStrategy::Addition, 7);
        let e4 = rand_mat(6 * 4, 1, 52).reshape((6, 2, 2)).unwrap();
        let p0 = Tensor::zeros((1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let p1 = Tensor::ones((1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let a = qtm.encode_memory(&e4, &p0).unwrap();
        let b = qtm.encode_memory(&e4, &p1).unwrap();
        let diff = (a.0 - b.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn zeroed_final_layer_freezes_queries() {
        // default init already zeroes the last FFN layer for addition
        let (_s, qtm) = build(UpdateStrategy::Addition, 8);
        let state = qtm.initial_state().unwrap();
        let f_m = MemoryFeatures(rand_mat(4, 4, 60));
        let next = qtm.update_video_queries(&state, &f_m).unwrap();
        assert_eq!(to2(&next.queries), to2(&state.queries));
        assert_eq!(next.t, 1);
    }

    #[test]
    fn update_is_deterministic() {
        let (mut store, qtm) = build(UpdateStrategy::Addition, 8);
        store.randomize_trainable(70, 0.4).unwrap();
        let state = qtm.initial_state().unwrap();
        let f_m = MemoryFeatures(rand_mat(4, 4, 61));
        let a = qtm.update_video_queries(&state, &f_m).unwrap();
        let b = qtm.update_video_queries(&state, &f_m).unwrap();
        assert_eq!(to2(&a.queries), to2(&b.queries));
    }

    #[test]
    fn update_matches_composed_oracle() {
        let (mut store, qtm) = build(UpdateStrategy::Addition, 9);
        store.randomize_trainable(71, 0.4).unwrap();
        let state = qtm.initial_state().unwrap();
        let f_m = MemoryFeatures(rand_mat(3, 4, 62));
        let got = to2(&qtm.update_video_queries(&state, &f_m).unwrap().queries);

        let get = |n: &str| store.get(n).unwrap();
        let ln = |x: &[Vec<f64>], w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let wv = w.to_vec1::<f64>().unwrap();
            let bv = b.to_vec1::<f64>().unwrap();
            x.iter()
                .map(|row| {
                    let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                    let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                    let denom = (var + 1e-6).sqrt();
                    row.iter()
                        .enumerate()
                        .map(|(i, v)| (v - mean) / denom * wv[i] + bv[i])
                        .collect()
                })
                .collect()
        };
        let matmul = |x: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
            let wd = to2(w);
            x.iter()
                .map(|row| {
                    (0..wd[0].len())
                        .map(|co| row.iter().enumerate().map(|(ci, v)| v * wd[ci][co]).sum())
                        .collect()
                })
                .collect()
        };
        let add_bias = |x: &mut Vec<Vec<f64>>, b: &Tensor| {
            let bv = b.to_vec1::<f64>().unwrap();
            for row in x.iter_mut() {
                for (v, bb) in row.iter_mut().zip(bv.iter()) {
                    *v += bb;
                }
            }
        };
        let attn = |qx: &[Vec<f64>], kv: &[Vec<f64>], pfx: &str| -> Vec<Vec<f64>> {
            let q = matmul(qx, &get(&format!("{pfx}.q.weight")));
            let k = matmul(kv, &get(&format!("{pfx}.k.weight")));
            let v = matmul(kv, &get(&format!("{pfx}.v.weight")));
            let scale = 0.5;
            let mut out = vec![];
            for qrow in &q {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|krow| qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut row = vec![0.0; 4];
                for (w, vrow) in exps.iter().zip(v.iter()) {
                    for c in 0..4 {
                        row[c] += w / z * vrow[c];
                    }
                }
                out.push(row);
            }
            let mut out = matmul(&out, &get(&format!("{pfx}.proj.weight")));
            add_bias(&mut out, &get(&format!("{pfx}.proj.bias")));
            out
        };

        let q0 = to2(&state.queries);
        let fm = to2(&f_m.0);
        let h = ln(&q0, &get("qtm.update.norm1.weight"), &get("qtm.update.norm1.bias"));
        let ca = attn(&h, &fm, "qtm.update.cross_attn");
        let h = ln(&ca, &get("qtm.update.norm2.weight"), &get("qtm.update.norm2.bias"));
        let sa = attn(&h, &h, "qtm.update.self_attn");
        let h = ln(&sa, &get("qtm.update.norm3.weight"), &get("qtm.update.norm3.bias"));
        let mut f = matmul(&h, &get("qtm.update.ffn.fc1.weight"));
        add_bias(&mut f, &get("qtm.update.ffn.fc1.bias"));
        for row in f.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut f = matmul(&f, &get("qtm.update.ffn.fc2.weight"));
        add_bias(&mut f, &get("qtm.update.ffn.fc2.bias"));
        for i in 0..2 {
            for c in 0..4 {
                let want = q0[i][c] + f[i][c];
                assert!((got[i][c] - want).abs() < 1e-9, "i={i} c={c}");
            }
        }
    }

    #[test]
    fn variant_none_never_changes_state() {
        let (_s, qtm) = build(UpdateStrategy::None, 10);
        let mut state = qtm.initial_state().unwrap();
        let q0 = to2(&state.queries);
        for t in 0..5 {
            state = qtm.update_variant(UpdateStrategy::None, &state, None).unwrap();
            assert_eq!(state.t, t + 1);
            assert_eq!(to2(&state.queries), q0);
        }
    }

    #[test]
    fn variant_multiply_with_unit_block_is_identity() {
        // multiply init: zero weights, ones bias -> block output is all ones
        let (_s, qtm) = build(UpdateStrategy::Multiply, 11);
        let state = qtm.initial_state().unwrap();
        let f_m = MemoryFeatures(rand_mat(5, 4, 80));
        let next = qtm
            .update_variant(UpdateStrategy::Multiply, &state, Some(&f_m))
            .unwrap();
        assert_eq!(to2(&next.queries), to2(&state.queries));
    }

    #[test]
    fn variant_addition_equals_named_update() {
        let (mut store, qtm) = build(UpdateStrategy::Addition, 12);
        store.randomize_trainable(90, 0.4).unwrap();
        let state = qtm.initial_state().unwrap();
        let f_m = MemoryFeatures(rand_mat(5, 4, 81));
        let a = qtm.update_video_queries(&state, &f_m).unwrap();
        let b = qtm.update_variant(UpdateStrategy::Addition, &state, Some(&f_m)).unwrap();
        assert_eq!(to2(&a.queries), to2(&b.queries));
    }

    #[test]
    fn bank_respects_capacity() {
        let mut cfg = small_cfg(UpdateStrategy::Sam2Bank);
        cfg.memory_bank_size = 2;
        let mut store = ParamStore::new(DType::F64, 13);
        let qtm = Qtm::new(&mut store, &cfg).unwrap();
        let mut state = qtm.initial_state().unwrap();
        for i in 0..4 {
            let f_m = MemoryFeatures(rand_mat(3, 4, 100 + i));
            state = qtm.update_variant(UpdateStrategy::Sam2Bank, &state, Some(&f_m)).unwrap();
        }
        assert_eq!(state.bank.len(), 2);
        assert_eq!(state.t, 4);
    }

    #[test]
    fn bank_attention_changes_image_features_once_nonempty() {
        let mut cfg = small_cfg(UpdateStrategy::Sam2Bank);
        cfg.fpn_width = 6;
        let mut store = ParamStore::new(DType::F64, 14);
        let qtm = Qtm::new(&mut store, &cfg).unwrap();
        store.randomize_trainable(101, 0.4).unwrap();
        let e4 = rand_mat(6 * 4, 1, 102).reshape((6, 2, 2)).unwrap();
        let same = qtm.bank_enhance(&e4, &[]).unwrap();
        assert_eq!(
            e4.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            same.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let bank = vec![rand_mat(4, 4, 103)];
        let enhanced = qtm.bank_enhance(&e4, &bank).unwrap();
        let diff = (e4 - enhanced)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn el_shape_is_queries_by_hidden_for_any_image_size() {
        let (_s, qtm) = build(UpdateStrategy::None, 15);
        let q = rand_mat(2, 4, 110);
        for hw in [4usize, 9, 25] {
            let e4c = rand_mat(hw, 4, 111 + hw as u64);
            let el = qtm.form_learnable_embeddings(&q, &e4c).unwrap();
            assert_eq!(el.dims(), [2, 4]);
        }
    }
}
