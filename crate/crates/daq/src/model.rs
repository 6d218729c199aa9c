//! Full model assembly: encoder, temporal memory and decoder, plus the
//! per-clip forward pass used by training and inference.

use candle_core::Tensor;

use crate::config::{Config, UpdateStrategy};
use crate::data::{RGBDFramePair, VideoClip};
use crate::decoder::MaskDecoder;
use crate::encoder::PamieEncoder;
use crate::error::Result;
use crate::losses::total_loss;
use crate::params::{ParamStore, Preset};
use crate::qtm::{Qtm, VideoQueryState};

pub struct FrameOutput {
    pub pred: Tensor, // (1, s, s) in [0, 1]
    pub intermediate: Vec<(usize, Tensor)>,
    pub state: VideoQueryState,
}

pub struct ClipOutput {
    pub preds: Vec<Tensor>,
    pub l_pred: Tensor,
    pub l_inter: Tensor,
    pub l_total: Tensor,
}

pub struct DaqModel {
    pub cfg: Config,
    pub store: ParamStore,
    pub encoder: PamieEncoder,
    pub qtm: Qtm,
    pub decoder: MaskDecoder,
}

impl DaqModel {
    pub fn new(cfg: &Config) -> Result<Self> {
        Self::with_preset(cfg, Preset::new())
    }

    /// Build the model, serving parameter values from `preset` where given
    /// (checkpoint restoration); every preset entry must be consumed.
    pub fn with_preset(cfg: &Config, preset: Preset) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::with_preset(cfg.numerics, cfg.seed, preset);
        let encoder = PamieEncoder::new(&mut store, cfg)?;
        let qtm = Qtm::new(&mut store, cfg)?;
        let decoder = MaskDecoder::new(&mut store, cfg)?;
        store.finish_preset()?;
        Ok(Self { cfg: cfg.clone(), store, encoder, qtm, decoder })
    }

    pub fn count_params(&self) -> (usize, usize) {
        self.store.counts()
    }

    /// Run one frame through the pipeline and advance the temporal state.
    pub fn forward_frame(
        &self,
        pair: &RGBDFramePair,
        state: &VideoQueryState,
        ablate_depth: bool,
    ) -> Result<FrameOutput> {
        let enc = self.encoder.encode_pair(&pair.rgb, &pair.depth, ablate_depth)?;
        let [e2, e3, e4] = &enc.pyramid;
        let strategy = self.qtm.strategy();

        let (e4_dec, e_l) = if strategy == UpdateStrategy::Sam2Bank {
            // query-free baseline: memories enhance the image features and
            // the sparse prompt slot stays empty
            let enhanced = self.qtm.bank_enhance(e4, &state.bank)?;
            let zeros = Tensor::zeros(
                (self.qtm.num_video_queries, self.qtm.hidden_dim),
                e4.dtype(),
                e4.device(),
            )?;
            (enhanced, zeros)
        } else {
            let (qf, _) = self.qtm.projected_queries()?;
            let e4c = self.qtm.project_image(e4)?;
            let e_f = self.qtm.pool_frame_queries(&qf, &e4c)?;
            let enhanced_q = self.qtm.enhance_video_queries(&state.queries, &e_f)?;
            let e_l = self.qtm.form_learnable_embeddings(&enhanced_q, &e4c)?;
            (e4.clone(), e_l)
        };

        let pred = self.decoder.decode(e2, e3, &e4_dec, &e_l)?;

        let new_state = match strategy {
            UpdateStrategy::None => self.qtm.update_variant(strategy, state, None)?,
            _ => {
                let f_m = self.qtm.encode_memory(e4, &pred)?;
                self.qtm.update_variant(strategy, state, Some(&f_m))?
            }
        };

        Ok(FrameOutput { pred, intermediate: enc.intermediate, state: new_state })
    }

    /// Roll the temporal recurrence over a clip, averaging the per-frame
    /// objective.
    pub fn forward_clip(&self, clip: &VideoClip, ablate_depth: bool) -> Result<ClipOutput> {
        let mut state = self.qtm.initial_state()?;
        let n = clip.frames.len();
        let dtype = self.store.dtype();
        let dev = self.store.device().clone();
        let mut l_pred_acc = Tensor::zeros((), dtype, &dev)?;
        let mut l_inter_acc = Tensor::zeros((), dtype, &dev)?;
        let mut preds = Vec::with_capacity(n);
        for (pair, gt) in clip.frames.iter().zip(clip.gts.iter()) {
            let out = self.forward_frame(pair, &state, ablate_depth)?;
            let (lp, li, _) = total_loss(&out.pred, &out.intermediate, gt, self.cfg.loss_alpha)?;
            l_pred_acc = (l_pred_acc + lp)?;
            l_inter_acc = (l_inter_acc + li)?;
            state = out.state;
            preds.push(out.pred);
        }
        let l_pred = (l_pred_acc / n as f64)?;
        let l_inter = (l_inter_acc / n as f64)?;
        let l_total = (&l_pred + (&l_inter * self.cfg.loss_alpha)?)?;
        Ok(ClipOutput { preds, l_pred, l_inter, l_total })
    }
}
