//! Prompt-free mask decoder.
//!
//! A small two-way transformer runs a token set (one mask token plus the
//! learnable embeddings standing in for sparse prompts) against the
//! highest-level image embedding with fixed sinusoidal positions. The
//! decoded image features are upsampled with skip additions from the two
//! finer pyramid levels, and the mask logit at each pixel is the dot
//! product of the output mask token with that pixel's embedding.

use candle_core::Tensor;

use crate::attn::AttnProj;
use crate::config::{Config, EmbeddingMode};
use crate::error::Result;
use crate::ops::{
    conv1x1, conv3x3, layer_norm, linear, resize_bilinear, sigmoid, sinusoidal_pe,
    spatial_to_tokens, tokens_to_spatial,
};
use crate::params::{Init, ParamStore};

struct TwoWayRound {
    ca_t2i: AttnProj,
    ln1_w: Tensor,
    ln1_b: Tensor,
    sa: AttnProj,
    ln2_w: Tensor,
    ln2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
    ln3_w: Tensor,
    ln3_b: Tensor,
    ca_i2t: AttnProj,
}

impl TwoWayRound {
    fn new(store: &mut ParamStore, prefix: &str, w: usize) -> Result<Self> {
        Ok(Self {
            ca_t2i: AttnProj::new(store, &format!("{prefix}.token_to_image"), w)?,
            ln1_w: store.trainable(&format!("{prefix}.norm1.weight"), &[w], Init::Ones)?,
            ln1_b: store.trainable(&format!("{prefix}.norm1.bias"), &[w], Init::Zeros)?,
            sa: AttnProj::new(store, &format!("{prefix}.token_self"), w)?,
            ln2_w: store.trainable(&format!("{prefix}.norm2.weight"), &[w], Init::Ones)?,
            ln2_b: store.trainable(&format!("{prefix}.norm2.bias"), &[w], Init::Zeros)?,
            fc1_w: store.trainable(&format!("{prefix}.ffn.fc1.weight"), &[w, 4 * w], Init::Xavier { fan_in: w })?,
            fc1_b: store.trainable(&format!("{prefix}.ffn.fc1.bias"), &[4 * w], Init::Zeros)?,
            fc2_w: store.trainable(&format!("{prefix}.ffn.fc2.weight"), &[4 * w, w], Init::Xavier { fan_in: 4 * w })?,
            fc2_b: store.trainable(&format!("{prefix}.ffn.fc2.bias"), &[w], Init::Zeros)?,
            ln3_w: store.trainable(&format!("{prefix}.norm3.weight"), &[w], Init::Ones)?,
            ln3_b: store.trainable(&format!("{prefix}.norm3.bias"), &[w], Init::Zeros)?,
            ca_i2t: AttnProj::new(store, &format!("{prefix}.image_to_token"), w)?,
        })
    }

    fn forward(&self, tokens: &Tensor, img: &Tensor, pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let img_pe = (img + pe)?;
        let (t2i, _) = self.ca_t2i.forward_kv(tokens, &img_pe, img)?;
        let t = layer_norm(&(tokens + t2i)?, &self.ln1_w, &self.ln1_b)?;
        let (sa, _) = self.sa.forward(&t, &t)?;
        let t = layer_norm(&(t + sa)?, &self.ln2_w, &self.ln2_b)?;
        let f = linear(&t, &self.fc1_w, &self.fc1_b)?.gelu()?;
        let f = linear(&f, &self.fc2_w, &self.fc2_b)?;
        let t = layer_norm(&(t + f)?, &self.ln3_w, &self.ln3_b)?;
        let (i2t, _) = self.ca_i2t.forward_kv(&img_pe, &t, &t)?;
        let img = (img + i2t)?;
        Ok((t, img))
    }
}

pub struct MaskDecoder {
    mask_token: Tensor,
    token_in_w: Tensor,
    token_in_b: Tensor,
    dense_w: Option<Tensor>,
    dense_b: Option<Tensor>,
    rounds: Vec<TwoWayRound>,
    out_fc1_w: Tensor,
    out_fc1_b: Tensor,
    out_fc2_w: Tensor,
    out_fc2_b: Tensor,
    lat3_w: Tensor,
    lat3_b: Tensor,
    ref3_w: Tensor,
    ref3_b: Tensor,
    lat2_w: Tensor,
    lat2_b: Tensor,
    ref2_w: Tensor,
    ref2_b: Tensor,
    pix_w: Tensor,
    pix_b: Tensor,
    mode: EmbeddingMode,
    input_size: usize,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let w = cfg.fpn_width;
        let c = cfg.query_hidden_dim;
        let mask_token = store.trainable("decoder.mask_token", &[1, w], Init::Normal(1.0 / (w as f64).sqrt()))?;
        let token_in_w = store.trainable("decoder.token_in.weight", &[c, w], Init::Xavier { fan_in: c })?;
        let token_in_b = store.trainable("decoder.token_in.bias", &[w], Init::Zeros)?;
        let (dense_w, dense_b) = match cfg.embedding_mode {
            EmbeddingMode::Dense | EmbeddingMode::Both => (
                Some(store.trainable("decoder.dense.weight", &[c, w], Init::Xavier { fan_in: c })?),
                Some(store.trainable("decoder.dense.bias", &[w], Init::Zeros)?),
            ),
            EmbeddingMode::Sparse => (None, None),
        };
        let mut rounds = vec![];
        for r in 0..cfg.decoder_rounds {
            rounds.push(TwoWayRound::new(store, &format!("decoder.round{r}"), w)?);
        }
        Ok(Self {
            mask_token,
            token_in_w,
            token_in_b,
            dense_w,
            dense_b,
            rounds,
            out_fc1_w: store.trainable("decoder.out_mlp.fc1.weight", &[w, w], Init::Xavier { fan_in: w })?,
            out_fc1_b: store.trainable("decoder.out_mlp.fc1.bias", &[w], Init::Zeros)?,
            out_fc2_w: store.trainable("decoder.out_mlp.fc2.weight", &[w, w], Init::Zeros)?,
            out_fc2_b: store.trainable("decoder.out_mlp.fc2.bias", &[w], Init::Zeros)?,
            lat3_w: store.trainable("decoder.skip3.weight", &[w, w], Init::Xavier { fan_in: w })?,
            lat3_b: store.trainable("decoder.skip3.bias", &[w], Init::Zeros)?,
            ref3_w: store.trainable("decoder.refine3.weight", &[9 * w, w], Init::Xavier { fan_in: 9 * w })?,
            ref3_b: store.trainable("decoder.refine3.bias", &[w], Init::Zeros)?,
            lat2_w: store.trainable("decoder.skip2.weight", &[w, w], Init::Xavier { fan_in: w })?,
            lat2_b: store.trainable("decoder.skip2.bias", &[w], Init::Zeros)?,
            ref2_w: store.trainable("decoder.refine2.weight", &[9 * w, w], Init::Xavier { fan_in: 9 * w })?,
            ref2_b: store.trainable("decoder.refine2.bias", &[w], Init::Zeros)?,
            pix_w: store.trainable("decoder.pixel.weight", &[w, w], Init::Xavier { fan_in: w })?,
            pix_b: store.trainable("decoder.pixel.bias", &[w], Init::Zeros)?,
            mode: cfg.embedding_mode,
            input_size: cfg.input_size,
        })
    }

    /// Decode one frame's pyramid plus learnable embeddings into a saliency
    /// probability map at input resolution.
    pub fn decode(&self, e2: &Tensor, e3: &Tensor, e4: &Tensor, e_l: &Tensor) -> Result<Tensor> {
        let (wd, h4, w4) = e4.dims3()?;
        let pe = sinusoidal_pe(wd, h4, w4, e4.dtype(), e4.device())?;
        let pe_t = spatial_to_tokens(&pe)?;
        let mut img = spatial_to_tokens(e4)?;
        if let (Some(dw), Some(db)) = (&self.dense_w, &self.dense_b) {
            // dense prompt path: pooled embeddings added to every position
            let g = e_l.mean(0)?.unsqueeze(0)?;
            let dense = linear(&g, dw, db)?;
            img = img.broadcast_add(&dense)?;
        }
        let mut tokens = match self.mode {
            EmbeddingMode::Dense => self.mask_token.clone(),
            _ => {
                let prompts = linear(e_l, &self.token_in_w, &self.token_in_b)?;
                Tensor::cat(&[&self.mask_token, &prompts], 0)?
            }
        };
        for round in &self.rounds {
            let (t, i) = round.forward(&tokens, &img, &pe_t)?;
            tokens = t;
            img = i;
        }
        let out_tok = tokens.narrow(0, 0, 1)?;
        let out_tok = linear(&out_tok, &self.out_fc1_w, &self.out_fc1_b)?.gelu()?;
        let out_tok = linear(&out_tok, &self.out_fc2_w, &self.out_fc2_b)?; // (1, w)

        let x4 = tokens_to_spatial(&img, h4, w4)?;
        let (_, h3, w3) = e3.dims3()?;
        let u3 = (resize_bilinear(&x4, h3, w3)? + conv1x1(e3, &self.lat3_w, &self.lat3_b)?)?;
        let u3 = conv3x3(&u3, &self.ref3_w, &self.ref3_b)?.gelu()?;
        let (_, h2, w2) = e2.dims3()?;
        let u2 = (resize_bilinear(&u3, h2, w2)? + conv1x1(e2, &self.lat2_w, &self.lat2_b)?)?;
        let u2 = conv3x3(&u2, &self.ref2_w, &self.ref2_b)?.gelu()?;
        let pix = conv1x1(&u2, &self.pix_w, &self.pix_b)?; // (w, h2, w2)

        let pix_t = spatial_to_tokens(&pix)?; // (hw, w)
        let logits = pix_t.matmul(&out_tok.t()?.contiguous()?)?; // (hw, 1)
        let logits = tokens_to_spatial(&logits, h2, w2)?; // (1, h2, w2)
        let prob = sigmoid(&logits)?;
        resize_bilinear(&prob, self.input_size, self.input_size)
    }
}
