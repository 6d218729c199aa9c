//! Small tensor building blocks shared by every module.
//!
//! Everything here is composed from candle primitives that have exact
//! backward rules on CPU for both f32 and f64, so gradient checks hold for
//! the whole model. Feature maps are `(c, h, w)`; token matrices are
//! `(n, c)`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `(c, h, w)` -> `(h*w, c)` row-major over spatial positions.
pub fn spatial_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    Ok(x.reshape((c, h * w))?.t()?.contiguous()?)
}

/// `(h*w, c)` -> `(c, h, w)`.
pub fn tokens_to_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    Ok(x.t()?.contiguous()?.reshape((c, h, w))?)
}

/// Token-wise affine map: `(n, c_in) @ (c_in, c_out) + bias`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(w)?.broadcast_add(b)?)
}

/// 1x1 convolution expressed on the token layout.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, h, w_) = x.dims3()?;
    let t = spatial_to_tokens(x)?;
    tokens_to_spatial(&linear(&t, w, b)?, h, w_)
}

/// 3x3 same-padding convolution via explicit im2col. The weight is stored
/// flattened as `(9*c_in, c_out)` with the input channel blocks ordered by
/// kernel offset `(dy, dx)`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, h, w_) = x.dims3()?;
    let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
    let mut slices = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            slices.push(padded.narrow(1, dy, h)?.narrow(2, dx, w_)?);
        }
    }
    let col = Tensor::cat(&slices, 0)?; // (9c, h, w)
    let t = spatial_to_tokens(&col)?; // (hw, 9c)
    tokens_to_spatial(&linear(&t, w, b)?, h, w_)
}

/// 2x2 space-to-depth: `(c, h, w)` -> `(4c, h/2, w/2)`, offset-major channel
/// order to match the conv weight layout.
pub fn space_to_depth2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let x = x.reshape((c, h / 2, 2, w / 2, 2))?;
    let x = x.permute((2, 4, 0, 1, 3))?.contiguous()?;
    Ok(x.reshape((4 * c, h / 2, w / 2))?)
}

/// Row-interpolation matrix for bilinear resampling with half-pixel centers
/// (align_corners disabled).
pub fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        let f = src.floor();
        let lam = src - f;
        let i0 = (f as isize).clamp(0, in_len as isize - 1) as usize;
        let i1 = (f as isize + 1).clamp(0, in_len as isize - 1) as usize;
        m[o * in_len + i0] += 1.0 - lam;
        m[o * in_len + i1] += lam;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of `(c, h, w)` to `(c, out_h, out_w)`, expressed as two
/// matrix products so it differentiates exactly.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ah = interp_matrix(h, out_h, x.dtype(), x.device())?; // (H, h)
    let aw = interp_matrix(w, out_w, x.dtype(), x.device())?; // (W, w)
    let x = x.broadcast_matmul(&aw.t()?.contiguous()?)?; // (c, h, W)
    let x = x.transpose(1, 2)?.contiguous()?; // (c, W, h)
    let x = x.broadcast_matmul(&ah.t()?.contiguous()?)?; // (c, W, H)
    Ok(x.transpose(1, 2)?.contiguous()?)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Numerically stable logistic function built on tanh so that both the
/// value and the gradient behave at extreme logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()?.affine(0.5, 0.5))?)
}

/// Scaled dot-product attention over token matrices. Returns the output and
/// the post-softmax attention rows for introspection.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
    let probs = softmax_rows(&scores)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let denom = (var + LAYER_NORM_EPS)?.sqrt()?;
    let normed = centered.broadcast_div(&denom)?;
    Ok(normed.broadcast_mul(w)?.broadcast_add(b)?)
}

/// Fixed 2D sinusoidal positional encoding, `(c, h, w)`.
pub fn sinusoidal_pe(c: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let half = c / 2;
    let mut data = vec![0f64; c * h * w];
    for ch in 0..c {
        let (axis_idx, within) = if ch < half { (0, ch) } else { (1, ch - half) };
        let pair = within / 2;
        let denom = (half / 2).max(1);
        let freq = 1.0 / 10000f64.powf(pair as f64 / denom as f64);
        for y in 0..h {
            for x in 0..w {
                let pos = if axis_idx == 0 { y as f64 } else { x as f64 };
                let v = if within % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
                data[ch * h * w + y * w + x] = v;
            }
        }
    }
    Ok(Tensor::from_vec(data, (c, h, w), dev)?.to_dtype(dtype)?)
}

/// Raw little-endian bytes of a tensor, used for hashing and checkpoints.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    let bytes = match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => {
            return Err(crate::error::Error::Shape(format!(
                "unsupported dtype {other:?} for raw serialization"
            )))
        }
    };
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn bilinear_average_of_four() {
        // 2x2 -> 1x1 with half-pixel centers reduces to the plain average.
        let x = Tensor::from_vec(vec![1f64, 2.0, 3.0, 4.0], (1, 2, 2), &dev()).unwrap();
        let y = resize_bilinear(&x, 1, 1).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_matches_pointwise_formula() {
        let mut vals = vec![];
        for i in 0..5 * 7 {
            vals.push((i as f64 * 0.37).sin());
        }
        let x = Tensor::from_vec(vals.clone(), (1, 5, 7), &dev()).unwrap();
        let y = resize_bilinear(&x, 3, 4).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sample = |yy: f64, xx: f64| -> f64 {
            let fy = yy.floor();
            let fx = xx.floor();
            let ly = yy - fy;
            let lx = xx - fx;
            let gy0 = (fy as isize).clamp(0, 4) as usize;
            let gy1 = (fy as isize + 1).clamp(0, 4) as usize;
            let gx0 = (fx as isize).clamp(0, 6) as usize;
            let gx1 = (fx as isize + 1).clamp(0, 6) as usize;
            let v00 = vals[gy0 * 7 + gx0];
            let v01 = vals[gy0 * 7 + gx1];
            let v10 = vals[gy1 * 7 + gx0];
            let v11 = vals[gy1 * 7 + gx1];
            v00 * (1.0 - ly) * (1.0 - lx) + v01 * (1.0 - ly) * lx + v10 * ly * (1.0 - lx) + v11 * ly * lx
        };
        for oy in 0..3 {
            for ox in 0..4 {
                let sy = (oy as f64 + 0.5) * 5.0 / 3.0 - 0.5;
                let sx = (ox as f64 + 0.5) * 7.0 / 4.0 - 0.5;
                let want = sample(sy, sx);
                assert!((got[oy * 4 + ox] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3x3_matches_loop_oracle() {
        let c_in = 2;
        let c_out = 3;
        let (h, w) = (4, 5);
        let x_data: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 31 % 17) as f64) / 7.0 - 1.0).collect();
        let w_data: Vec<f64> = (0..9 * c_in * c_out)
            .map(|i| ((i * 13 % 11) as f64) / 5.0 - 1.0)
            .collect();
        let b_data: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
        let x = Tensor::from_vec(x_data.clone(), (c_in, h, w), &dev()).unwrap();
        let wt = Tensor::from_vec(w_data.clone(), (9 * c_in, c_out), &dev()).unwrap();
        let bt = Tensor::from_vec(b_data.clone(), c_out, &dev()).unwrap();
        let y = conv3x3(&x, &wt, &bt).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();

        for co in 0..c_out {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b_data[co];
                    for dy in 0..3isize {
                        for dx in 0..3isize {
                            for ci in 0..c_in {
                                let sy = yy + dy - 1;
                                let sx = xx + dx - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xin = x_data[ci * h * w + sy as usize * w + sx as usize];
                                let wv = w_data[(((dy * 3 + dx) as usize * c_in) + ci) * c_out + co];
                                acc += xin * wv;
                            }
                        }
                    }
                    let gv = got[co * h * w + yy as usize * w + xx as usize];
                    assert!((gv - acc).abs() < 1e-10, "mismatch at {co},{yy},{xx}");
                }
            }
        }
    }

    #[test]
    fn sigmoid_saturates() {
        let x = Tensor::from_vec(vec![-50f64, 0.0, 50.0], 3, &dev()).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(s[0].abs() < 1e-9);
        assert!((s[1] - 0.5).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let q = Tensor::from_vec((0..6).map(|i| i as f64).collect::<Vec<_>>(), (2, 3), &dev()).unwrap();
        let k = Tensor::from_vec((0..12).map(|i| (i as f64).cos()).collect::<Vec<_>>(), (4, 3), &dev()).unwrap();
        let v = k.clone();
        let (_, probs) = attend(&q, &k, &v, 1.0 / (3f64).sqrt()).unwrap();
        let sums = probs.sum(D::Minus1).unwrap().to_vec1::<f64>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn space_to_depth_roundtrips_values() {
        let x = Tensor::from_vec((0..16).map(|i| i as f64).collect::<Vec<_>>(), (1, 4, 4), &dev()).unwrap();
        let y = space_to_depth2(&x).unwrap();
        assert_eq!(y.dims(), [4, 2, 2]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // block (0,0) of offset (dy=0,dx=0) is source pixel (0,0)
        assert_eq!(v[0], 0.0);
        // offset (dy=0,dx=1) holds source pixel (0,1)
        assert_eq!(v[4], 1.0);
        // offset (dy=1,dx=0) holds source pixel (1,0)
        assert_eq!(v[8], 4.0);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::from_vec(vec![1f64, 2.0, 3.0, 4.0], (1, 4), &dev()).unwrap();
        let w = Tensor::ones(4, DType::F64, &dev()).unwrap();
        let b = Tensor::zeros(4, DType::F64, &dev()).unwrap();
        let y = layer_norm(&x, &w, &b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
