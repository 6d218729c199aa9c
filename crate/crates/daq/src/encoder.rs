//! Multi-modal image encoder: a frozen backbone with trainable depth-guided
//! parallel adapters in skip connections.
//!
//! The depth branch runs the shared frozen backbone on the (replicated)
//! depth map behind a trainable linear projector; every stage adds a
//! bottleneck adapter of the stage input, bilinearly downsampled to the
//! stage output size. The RGB branch does the same from stage 2 on, with
//! the adapter consuming the channel concatenation of the RGB and depth
//! features, which is what lets depth steer the fusion. A feature pyramid
//! over stages 2-4 produces the image embeddings, and per-level 1x1 heads
//! emit intermediate predictions for self-reasoning supervision.

use candle_core::Tensor;

use crate::backbone::Backbone;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::ops::{conv1x1, conv3x3, resize_bilinear, sigmoid};
use crate::params::{Init, ParamStore};

/// Bottleneck adapter: down-projection, GELU, zero-initialized up-projection.
/// The zero init makes a freshly built model compute exactly the frozen
/// backbone function.
pub struct Adapter {
    down_w: Tensor,
    down_b: Tensor,
    up_w: Tensor,
    up_b: Tensor,
    c_in: usize,
    c_out: usize,
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        rank: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            down_w: store.trainable(&format!("{prefix}.down.weight"), &[c_in, rank], Init::Xavier { fan_in: c_in })?,
            down_b: store.trainable(&format!("{prefix}.down.bias"), &[rank], Init::Zeros)?,
            up_w: store.trainable(&format!("{prefix}.up.weight"), &[rank, c_out], Init::Zeros)?,
            up_b: store.trainable(&format!("{prefix}.up.bias"), &[c_out], Init::Zeros)?,
            c_in,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    /// `up(gelu(down(x)))` applied per spatial position on `(c, h, w)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.dims3()?;
        if c != self.c_in {
            return Err(Error::Config(format!(
                "adapter expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let down = conv1x1(x, &self.down_w, &self.down_b)?;
        let act = down.gelu()?;
        conv1x1(&act, &self.up_w, &self.up_b)
    }
}

struct Fpn {
    lat_w: Vec<Tensor>,
    lat_b: Vec<Tensor>,
    out_w: Vec<Tensor>,
    out_b: Vec<Tensor>,
}

impl Fpn {
    fn new(store: &mut ParamStore, channels: &[usize; 4], width: usize) -> Result<Self> {
        let mut lat_w = vec![];
        let mut lat_b = vec![];
        let mut out_w = vec![];
        let mut out_b = vec![];
        for level in 2..=4 {
            let c_in = channels[level - 1];
            lat_w.push(store.trainable(
                &format!("fpn.lateral{level}.weight"),
                &[c_in, width],
                Init::Xavier { fan_in: c_in },
            )?);
            lat_b.push(store.trainable(&format!("fpn.lateral{level}.bias"), &[width], Init::Zeros)?);
            out_w.push(store.trainable(
                &format!("fpn.out{level}.weight"),
                &[9 * width, width],
                Init::Xavier { fan_in: 9 * width },
            )?);
            out_b.push(store.trainable(&format!("fpn.out{level}.bias"), &[width], Init::Zeros)?);
        }
        Ok(Self { lat_w, lat_b, out_w, out_b })
    }

    /// Lateral + top-down fusion of the stage 2-4 features, then a 3x3
    /// output conv per level. Returns `[e2, e3, e4]` at a shared width.
    fn forward(&self, f2: &Tensor, f3: &Tensor, f4: &Tensor) -> Result<[Tensor; 3]> {
        let p4 = conv1x1(f4, &self.lat_w[2], &self.lat_b[2])?;
        let (_, h3, w3) = f3.dims3()?;
        let p3 = (conv1x1(f3, &self.lat_w[1], &self.lat_b[1])? + resize_bilinear(&p4, h3, w3)?)?;
        let (_, h2, w2) = f2.dims3()?;
        let p2 = (conv1x1(f2, &self.lat_w[0], &self.lat_b[0])? + resize_bilinear(&p3, h2, w2)?)?;
        let e2 = conv3x3(&p2, &self.out_w[0], &self.out_b[0])?;
        let e3 = conv3x3(&p3, &self.out_w[1], &self.out_b[1])?;
        let e4 = conv3x3(&p4, &self.out_w[2], &self.out_b[2])?;
        Ok([e2, e3, e4])
    }
}

/// Three-level embedding pyramid plus intermediate self-reasoning maps.
pub struct EncoderOutput {
    /// `[E2, E3, E4]`, all at the pyramid width.
    pub pyramid: [Tensor; 3],
    /// RGB-branch stage outputs `[F2, F3, F4]` before the pyramid (exposed
    /// for the zero-adapter equivalence checks).
    pub stage_feats: [Tensor; 3],
    /// `(level, map)` with every map upsampled to input resolution, in [0,1].
    pub intermediate: Vec<(usize, Tensor)>,
}

pub struct PamieEncoder {
    pub backbone: Backbone,
    depth_proj_w: Tensor,
    depth_proj_b: Tensor,
    depth_adapters: Vec<Adapter>,
    dpa: Vec<Adapter>,
    fpn: Fpn,
    head_w: Vec<(usize, Tensor)>,
    head_b: Vec<(usize, Tensor)>,
    input_size: usize,
    supervised_levels: Vec<usize>,
}

impl PamieEncoder {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let backbone = Backbone::new(store, cfg)?;
        let ch = cfg.stage_channels;
        let c0 = ch[0];
        let depth_proj_w = store.trainable("encoder.depth_proj.weight", &[c0, c0], Init::Identity)?;
        let depth_proj_b = store.trainable("encoder.depth_proj.bias", &[c0], Init::Zeros)?;
        let mut depth_adapters = Vec::with_capacity(4);
        for i in 1..=4 {
            let c_in = if i == 1 { c0 } else { ch[i - 2] };
            depth_adapters.push(Adapter::new(
                store,
                &format!("encoder.depth_adapter{i}"),
                c_in,
                cfg.adapter_rank,
                ch[i - 1],
            )?);
        }
        let mut dpa = Vec::with_capacity(3);
        for i in 2..=4 {
            dpa.push(Adapter::new(
                store,
                &format!("encoder.dpa{i}"),
                2 * ch[i - 2],
                cfg.adapter_rank,
                ch[i - 1],
            )?);
        }
        let fpn = Fpn::new(store, &ch, cfg.fpn_width)?;
        let mut head_w = vec![];
        let mut head_b = vec![];
        for &level in &cfg.supervised_levels {
            head_w.push((
                level,
                store.trainable(&format!("head.level{level}.weight"), &[cfg.fpn_width, 1], Init::Zeros)?,
            ));
            head_b.push((
                level,
                store.trainable(&format!("head.level{level}.bias"), &[1], Init::Zeros)?,
            ));
        }
        Ok(Self {
            backbone,
            depth_proj_w,
            depth_proj_b,
            depth_adapters,
            dpa,
            fpn,
            head_w,
            head_b,
            input_size: cfg.input_size,
            supervised_levels: cfg.supervised_levels.clone(),
        })
    }

    /// Linear projector mapping patch-embedded depth features into the RGB
    /// feature space; 1x1, shape preserving.
    pub fn depth_project(&self, depth_embedding: &Tensor) -> Result<Tensor> {
        let (c, _, _) = depth_embedding.dims3()?;
        let want = self.depth_proj_w.dims2()?.0;
        if c != want {
            return Err(Error::Config(format!(
                "depth projector expects {want} channels, got {c}"
            )));
        }
        conv1x1(depth_embedding, &self.depth_proj_w, &self.depth_proj_b)
    }

    /// One depth-branch stage: frozen trunk plus the downsampled adapter of
    /// the stage input.
    pub fn encode_depth_stage(&self, index1: usize, f_prev: &Tensor) -> Result<Tensor> {
        let trunk = self.backbone.stage_forward(index1, f_prev, None)?;
        let adapted = self.depth_adapters[index1 - 1].forward(f_prev)?;
        let (_, th, tw) = trunk.dims3()?;
        Ok((trunk + resize_bilinear(&adapted, th, tw)?)?)
    }

    /// Channel concatenation fed to the depth-guided adapter: RGB first.
    pub fn dpa_input(f_rgb: &Tensor, f_depth: &Tensor) -> Result<Tensor> {
        let (_, hr, wr) = f_rgb.dims3()?;
        let (_, hd, wd) = f_depth.dims3()?;
        if (hr, wr) != (hd, wd) {
            return Err(Error::Shape(format!(
                "RGB features {hr}x{wr} and depth features {hd}x{wd} are not aligned"
            )));
        }
        Ok(Tensor::cat(&[f_rgb, f_depth], 0)?)
    }

    /// One RGB-branch stage with the depth-guided parallel adapter
    /// (stages 2-4; stage 1 is the plain frozen trunk).
    pub fn encode_rgb_stage(&self, index1: usize, f_prev: &Tensor, f_depth_prev: &Tensor) -> Result<Tensor> {
        let trunk = self.backbone.stage_forward(index1, f_prev, None)?;
        let fused = Self::dpa_input(f_prev, f_depth_prev)?;
        let adapted = self.dpa[index1 - 2].forward(&fused)?;
        let (_, th, tw) = trunk.dims3()?;
        Ok((trunk + resize_bilinear(&adapted, th, tw)?)?)
    }

    /// Depth-branch features `F_D^0..F_D^4`. With `ablate_depth` the branch
    /// is replaced by zero maps of the right shapes.
    pub fn depth_features(&self, depth: &Tensor, ablate_depth: bool) -> Result<Vec<Tensor>> {
        if ablate_depth {
            let ch = self.backbone.channels();
            let s2 = self.input_size / 2;
            let dev = depth.device();
            let dtype = depth.dtype();
            let mut feats = vec![Tensor::zeros((ch[0], s2, s2), dtype, dev)?];
            feats.push(Tensor::zeros((ch[0], s2, s2), dtype, dev)?);
            for (i, &c) in ch.iter().enumerate().skip(1) {
                let s = s2 >> i;
                feats.push(Tensor::zeros((c, s, s), dtype, dev)?);
            }
            return Ok(feats);
        }
        let d3 = Tensor::cat(&[depth, depth, depth], 0)?;
        let embedded = self.backbone.embed(&d3)?;
        let f0 = self.depth_project(&embedded)?;
        let mut feats = vec![f0];
        for i in 1..=4 {
            let next = self.encode_depth_stage(i, &feats[i - 1])?;
            feats.push(next);
        }
        Ok(feats)
    }

    /// Full two-branch encode of one RGB-D frame.
    pub fn encode_pair(&self, rgb: &Tensor, depth: &Tensor, ablate_depth: bool) -> Result<EncoderOutput> {
        let depth_feats = self.depth_features(depth, ablate_depth)?;
        let f0 = self.backbone.embed(rgb)?;
        let f1 = self.backbone.stage_forward(1, &f0, None)?;
        let f2 = self.encode_rgb_stage(2, &f1, &depth_feats[1])?;
        let f3 = self.encode_rgb_stage(3, &f2, &depth_feats[2])?;
        let f4 = self.encode_rgb_stage(4, &f3, &depth_feats[3])?;
        let pyramid = self.fpn.forward(&f2, &f3, &f4)?;
        let mut intermediate = vec![];
        for &level in &self.supervised_levels {
            let e = &pyramid[level - 2];
            intermediate.push((level, self.intermediate_predict(level, e)?));
        }
        Ok(EncoderOutput {
            pyramid,
            stage_feats: [f2, f3, f4],
            intermediate,
        })
    }

    /// 1x1 head + sigmoid, upsampled to input resolution.
    pub fn intermediate_predict(&self, level: usize, e: &Tensor) -> Result<Tensor> {
        let w = self
            .head_w
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("no intermediate head for level {level}")))?;
        let b = self.head_b.iter().find(|(l, _)| *l == level).map(|(_, t)| t).unwrap();
        let logits = conv1x1(e, w, b)?;
        let prob = sigmoid(&logits)?;
        resize_bilinear(&prob, self.input_size, self.input_size)
    }

    /// RGB pyramid of the frozen backbone alone (no adapters, no depth),
    /// the reference for the zero-adapter equivalence property.
    pub fn rgb_stages_frozen_only(&self, rgb: &Tensor) -> Result<[Tensor; 3]> {
        let f0 = self.backbone.embed(rgb)?;
        let f1 = self.backbone.stage_forward(1, &f0, None)?;
        let f2 = self.backbone.stage_forward(2, &f1, None)?;
        let f3 = self.backbone.stage_forward(3, &f2, None)?;
        let f4 = self.backbone.stage_forward(4, &f3, None)?;
        Ok([f2, f3, f4])
    }
}
