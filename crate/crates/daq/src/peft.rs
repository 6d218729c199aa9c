//! Parameter-efficient fine-tuning baselines and the training-memory bench.
//!
//! Three topologies over the same frozen single-stream backbone, capacity
//! matched at the bottleneck rank: parallel adapters in skip connections
//! (the method's topology), sequential adapters inside the main path, and
//! low-rank deltas on every attention layer's query/value projections. The
//! bench runs one full optimizer step on a 10-frame clip per variant and
//! reports the heap high-water mark, which exposes how far gradients must
//! travel: parallel skips the early high-resolution stages entirely, so its
//! retained activations stay small.

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};

use crate::backbone::{Backbone, BlockLora};
use crate::config::Config;
use crate::data::{render_video, SynthSceneSpec};
use crate::encoder::Adapter;
use crate::error::{Error, Result};
use crate::losses::bce;
use crate::memtrack::measure_peak_memory;
use crate::ops::{conv1x1, resize_bilinear, sigmoid};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeftVariant {
    Parallel,
    Sequential,
    Lora,
}

impl PeftVariant {
    pub fn all() -> [PeftVariant; 3] {
        [Self::Parallel, Self::Sequential, Self::Lora]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Parallel => "parallel",
            Self::Sequential => "sequential",
            Self::Lora => "lora",
        }
    }
}

pub struct PeftModel {
    pub variant: PeftVariant,
    pub store: ParamStore,
    backbone: Backbone,
    adapters: Vec<Adapter>,
    lora: Vec<Vec<BlockLora>>,
    head_w: Tensor,
    head_b: Tensor,
    input_size: usize,
}

impl PeftModel {
    pub fn new(cfg: &Config, variant: PeftVariant) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.numerics, cfg.seed);
        let backbone = Backbone::new(&mut store, cfg)?;
        let ch = cfg.stage_channels;
        let r = cfg.adapter_rank;
        let mut adapters = vec![];
        let mut lora = vec![];
        match variant {
            PeftVariant::Parallel => {
                for i in 2..=4usize {
                    adapters.push(Adapter::new(
                        &mut store,
                        &format!("peft.parallel{i}"),
                        ch[i - 2],
                        r,
                        ch[i - 1],
                    )?);
                }
            }
            PeftVariant::Sequential => {
                for i in 1..=4usize {
                    adapters.push(Adapter::new(
                        &mut store,
                        &format!("peft.sequential{i}"),
                        ch[i - 1],
                        r,
                        ch[i - 1],
                    )?);
                }
            }
            PeftVariant::Lora => {
                let scale = cfg.lora_alpha / cfg.lora_rank as f64;
                for (si, &c) in ch.iter().enumerate() {
                    let mut per_stage = vec![];
                    for b in 0..cfg.stage_blocks[si] {
                        let p = format!("peft.lora.stage{}.block{b}", si + 1);
                        per_stage.push(BlockLora {
                            a_q: store.trainable(&format!("{p}.a_q"), &[c, cfg.lora_rank], Init::Normal(0.02))?,
                            b_q: store.trainable(&format!("{p}.b_q"), &[cfg.lora_rank, c], Init::Zeros)?,
                            a_v: store.trainable(&format!("{p}.a_v"), &[c, cfg.lora_rank], Init::Normal(0.02))?,
                            b_v: store.trainable(&format!("{p}.b_v"), &[cfg.lora_rank, c], Init::Zeros)?,
                            scale,
                        });
                    }
                    lora.push(per_stage);
                }
            }
        }
        let head_w = store.trainable("peft.head.weight", &[ch[3], 1], Init::Xavier { fan_in: ch[3] })?;
        let head_b = store.trainable("peft.head.bias", &[1], Init::Zeros)?;
        Ok(Self {
            variant,
            store,
            backbone,
            adapters,
            lora,
            head_w,
            head_b,
            input_size: cfg.input_size,
        })
    }

    /// Stage outputs `F1..F4` under this variant's fine-tuning topology.
    pub fn stage_outputs(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.backbone.embed(rgb)?;
        let mut outs = vec![];
        for i in 1..=4usize {
            x = match self.variant {
                PeftVariant::Parallel => {
                    let trunk = self.backbone.stage_forward(i, &x, None)?;
                    if i == 1 {
                        trunk
                    } else {
                        let adapted = self.adapters[i - 2].forward(&x)?;
                        let (_, th, tw) = trunk.dims3()?;
                        (trunk + resize_bilinear(&adapted, th, tw)?)?
                    }
                }
                PeftVariant::Sequential => {
                    let trunk = self.backbone.stage_forward(i, &x, None)?;
                    // residual-form adapter in the main path
                    (&trunk + self.adapters[i - 1].forward(&trunk)?)?
                }
                PeftVariant::Lora => self.backbone.stage_forward(i, &x, Some(&self.lora[i - 1]))?,
            };
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Frozen-backbone stage outputs, the reference for identity-init checks.
    pub fn frozen_outputs(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.backbone.embed(rgb)?;
        let mut outs = vec![];
        for i in 1..=4usize {
            x = self.backbone.stage_forward(i, &x, None)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn forward(&self, rgb: &Tensor) -> Result<Tensor> {
        let outs = self.stage_outputs(rgb)?;
        let logits = conv1x1(&outs[3], &self.head_w, &self.head_b)?;
        let up = resize_bilinear(&logits, self.input_size, self.input_size)?;
        sigmoid(&up)
    }

    /// Mean BCE over a clip of frames.
    pub fn clip_loss(&self, frames: &[Tensor], gts: &[Tensor]) -> Result<Tensor> {
        let dtype = self.store.dtype();
        let dev = self.store.device().clone();
        let mut acc = Tensor::zeros((), dtype, &dev)?;
        for (rgb, gt) in frames.iter().zip(gts.iter()) {
            acc = (acc + bce(&self.forward(rgb)?, gt)?)?;
        }
        Ok((acc / frames.len() as f64)?)
    }

    pub fn count_params(&self) -> (usize, usize) {
        self.store.counts()
    }

    /// Trainable parameters belonging to the fine-tuning topology alone
    /// (everything except the shared prediction head).
    pub fn peft_param_count(&self) -> usize {
        let (trainable, _) = self.store.counts();
        let head: usize = self.head_w.elem_count() + self.head_b.elem_count();
        trainable - head
    }

    pub fn backbone_block(&self, stage1: usize, block: usize) -> &crate::backbone::Block {
        self.backbone.stage(stage1).block(block)
    }

    pub fn lora_for(&self, stage1: usize, block: usize) -> Option<&BlockLora> {
        self.lora.get(stage1 - 1).and_then(|s| s.get(block))
    }
}

/// Closed-form parameter count of the parallel-adapter topology
/// (stages 2-4, biases included).
pub fn parallel_adapter_param_count(ch: &[usize; 4], r: usize) -> usize {
    (2..=4).map(|i| ch[i - 2] * r + r + r * ch[i - 1] + ch[i - 1]).sum()
}

/// Closed-form count of the sequential topology (stages 1-4).
pub fn sequential_adapter_param_count(ch: &[usize; 4], r: usize) -> usize {
    (1..=4).map(|i| ch[i - 1] * r + r + r * ch[i - 1] + ch[i - 1]).sum()
}

/// Closed-form count of LoRA on query and value of every block.
pub fn lora_param_count(ch: &[usize; 4], blocks: &[usize; 4], r: usize) -> usize {
    (0..4).map(|i| blocks[i] * 2 * (ch[i] * r + r * ch[i])).sum()
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: String,
    pub trainable: usize,
    pub total: usize,
    pub peak_bytes: u64,
}

/// Deterministic in-memory clip for the bench: rendered frames of the
/// synthetic scene at the configured input size.
pub fn bench_clip(cfg: &Config, frames: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let spec = SynthSceneSpec {
        seed: cfg.seed,
        num_frames: frames,
        image_size: cfg.input_size,
        ..SynthSceneSpec::default()
    };
    let dev = candle_core::Device::Cpu;
    let s = cfg.input_size;
    let mut rgbs = vec![];
    let mut gts = vec![];
    for f in render_video(&spec) {
        rgbs.push(Tensor::from_vec(f.rgb, (3, s, s), &dev)?.to_dtype(cfg.numerics)?);
        let gt: Vec<f64> = f.gt.iter().map(|&b| b as u8 as f64).collect();
        gts.push(Tensor::from_vec(gt, (1, s, s), &dev)?.to_dtype(cfg.numerics)?);
    }
    Ok((rgbs, gts))
}

/// One full forward+backward+optimizer step for `variant`, measured with
/// the tracking allocator. Errors with `MeasurementUnsupported` when the
/// allocator is not installed in this process.
pub fn measure_variant_peak(cfg: &Config, variant: PeftVariant) -> Result<BenchRow> {
    let model = PeftModel::new(cfg, variant)?;
    let (frames, gts) = bench_clip(cfg, cfg.clip_length)?;
    let (trainable, total) = model.count_params();
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let peak = measure_peak_memory(|| {
        let loss = model.clip_loss(&frames, &gts)?;
        opt.backward_step(&loss).map_err(Error::from)?;
        Ok(())
    })?;
    Ok(BenchRow {
        variant: variant.as_str().to_string(),
        trainable,
        total,
        peak_bytes: peak,
    })
}

/// The three-variant comparison table.
pub fn bench_memory(cfg: &Config) -> Result<Vec<BenchRow>> {
    PeftVariant::all()
        .iter()
        .map(|v| measure_variant_peak(cfg, *v))
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,trainable,total,peak_bytes\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.trainable, r.total, r.peak_bytes));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        let mut cfg = Config::default();
        cfg.input_size = 16;
        cfg.stage_channels = [4, 8, 12, 16];
        cfg.stage_blocks = [1, 2, 1, 1];
        cfg.adapter_rank = 2;
        cfg.lora_rank = 2;
        cfg.numerics = DType::F64;
        cfg
    }

    fn rand_img(seed: u64, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, (3, s, s), &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn sequential_identity_init_equals_frozen_path() {
        let m = PeftModel::new(&cfg(), PeftVariant::Sequential).unwrap();
        let img = rand_img(1, 16);
        let tuned = m.stage_outputs(&img).unwrap();
        let frozen = m.frozen_outputs(&img).unwrap();
        for (a, b) in tuned.iter().zip(frozen.iter()) {
            assert_eq!(max_diff(a, b), 0.0);
        }
    }

    #[test]
    fn lora_zero_b_equals_frozen_path() {
        let m = PeftModel::new(&cfg(), PeftVariant::Lora).unwrap();
        let img = rand_img(2, 16);
        let tuned = m.stage_outputs(&img).unwrap();
        let frozen = m.frozen_outputs(&img).unwrap();
        for (a, b) in tuned.iter().zip(frozen.iter()) {
            assert_eq!(max_diff(a, b), 0.0);
        }
    }

    #[test]
    fn parallel_zero_init_equals_frozen_path() {
        let m = PeftModel::new(&cfg(), PeftVariant::Parallel).unwrap();
        let img = rand_img(3, 16);
        let tuned = m.stage_outputs(&img).unwrap();
        let frozen = m.frozen_outputs(&img).unwrap();
        for (a, b) in tuned.iter().zip(frozen.iter()) {
            assert_eq!(max_diff(a, b), 0.0);
        }
    }

    #[test]
    fn param_counts_match_closed_forms() {
        let c = cfg();
        let ch = c.stage_channels;
        for (variant, want) in [
            (PeftVariant::Parallel, parallel_adapter_param_count(&ch, c.adapter_rank)),
            (PeftVariant::Sequential, sequential_adapter_param_count(&ch, c.adapter_rank)),
            (PeftVariant::Lora, lora_param_count(&ch, &c.stage_blocks, c.lora_rank)),
        ] {
            let m = PeftModel::new(&c, variant).unwrap();
            assert_eq!(m.peft_param_count(), want, "{variant:?}");
        }
    }

    #[test]
    fn lora_rank_one_adds_eight_weights_per_matrix() {
        // a 4x4 projection with rank 1: A is 4x1 and B is 1x4
        assert_eq!(lora_param_count(&[4, 4, 5, 6], &[1, 0, 0, 0], 1) , 2 * 8);
    }

    #[test]
    fn fully_frozen_model_counts_zero_trainable() {
        let mut store = ParamStore::new(DType::F64, 0);
        Backbone::new(&mut store, &cfg()).unwrap();
        assert_eq!(store.counts().0, 0);
    }

    #[test]
    fn merged_lora_equals_two_path_form() {
        let c = cfg();
        let mut m = PeftModel::new(&c, PeftVariant::Lora).unwrap();
        m.store.randomize_trainable(5, 0.1).unwrap();
        let block = m.backbone_block(1, 0);
        let lora = m.lora_for(1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(x, (6, 4), &Device::Cpu).unwrap();
        let two_path = block.forward(&x, Some(lora)).unwrap();
        let merged = block.forward_merged(&x, lora).unwrap();
        assert!(max_diff(&two_path, &merged) < 1e-6);
    }

    #[test]
    fn training_steps_leave_frozen_weights_untouched() {
        let c = cfg();
        for variant in PeftVariant::all() {
            let m = PeftModel::new(&c, variant).unwrap();
            let before = m.store.fingerprint(|n| n.starts_with("backbone.")).unwrap();
            let (frames, gts) = bench_clip(&c, 3).unwrap();
            let mut opt = AdamW::new(
                m.store.vars(),
                ParamsAdamW { lr: 1e-2, weight_decay: 0.05, ..Default::default() },
            )
            .unwrap();
            for _ in 0..2 {
                let loss = m.clip_loss(&frames, &gts).unwrap();
                opt.backward_step(&loss).unwrap();
            }
            let after = m.store.fingerprint(|n| n.starts_with("backbone.")).unwrap();
            assert_eq!(before, after, "{variant:?} mutated the backbone");
            // and the adapters did move
            let (trainable, _) = m.count_params();
            assert!(trainable > 0);
        }
    }

    #[test]
    fn trainable_counts_are_capacity_comparable() {
        // same order of magnitude at equal rank
        let c = cfg();
        let counts: Vec<usize> = PeftVariant::all()
            .iter()
            .map(|v| PeftModel::new(&c, *v).unwrap().peft_param_count())
            .collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min < 10.0, "counts {counts:?} differ by an order of magnitude");
    }
}
