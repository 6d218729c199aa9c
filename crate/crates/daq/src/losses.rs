//! Binary cross-entropy losses and the combined training objective.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between a probability map and a binary target.
/// Soft targets are binarized at 0.5 first; predictions are clamped away
/// from {0, 1} before the logs.
pub fn bce(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "bce shape mismatch: pred {:?} vs gt {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let g = gt.ge(0.5)?.to_dtype(pred.dtype())?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_g = g.affine(-1.0, 1.0)?;
    let term = ((&g * p.log()?)? + (one_minus_g * one_minus_p.log()?)?)?;
    Ok(term.mean_all()?.neg()?)
}

/// `L_total = L_pred + alpha * L_inter`, where `L_inter` is the mean BCE of
/// the configured intermediate maps (zero when there are none).
pub fn total_loss(
    pred: &Tensor,
    intermediates: &[(usize, Tensor)],
    gt: &Tensor,
    alpha: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l_pred = bce(pred, gt)?;
    let l_inter = if intermediates.is_empty() {
        Tensor::zeros((), pred.dtype(), pred.device())?
    } else {
        let mut acc = bce(&intermediates[0].1, gt)?;
        for (_, map) in &intermediates[1..] {
            acc = (acc + bce(map, gt)?)?;
        }
        (acc / intermediates.len() as f64)?
    };
    let total = (&l_pred + (&l_inter * alpha)?)?;
    Ok((l_pred, l_inter, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(vals: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(vals, shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn perfect_prediction_is_nearly_zero() {
        let gt = t(vec![1.0, 0.0, 1.0, 0.0], (2, 2));
        let loss = scalar(&bce(&gt, &gt).unwrap());
        assert!(loss <= 1.2e-7, "loss = {loss}");
    }

    #[test]
    fn uniform_half_prediction_is_ln2() {
        let gt = t(vec![1.0, 0.0, 1.0, 1.0], (2, 2));
        let p = t(vec![0.5; 4], (2, 2));
        let loss = scalar(&bce(&p, &gt).unwrap());
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_pixel_case() {
        let p = t(vec![0.9, 0.2], (1, 2));
        let gt = t(vec![1.0, 0.0], (1, 2));
        let loss = scalar(&bce(&p, &gt).unwrap());
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.16425).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = t(vec![0.5; 4], (2, 2));
        let gt = t(vec![1.0; 2], (1, 2));
        assert!(matches!(bce(&p, &gt).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn alpha_zero_reduces_to_pred_loss() {
        let p = t(vec![0.7, 0.3, 0.6, 0.2], (2, 2));
        let gt = t(vec![1.0, 0.0, 1.0, 0.0], (2, 2));
        let inter = vec![(4usize, t(vec![0.9, 0.9, 0.9, 0.9], (2, 2)))];
        let (l_pred, _, total) = total_loss(&p, &inter, &gt, 0.0).unwrap();
        assert_eq!(scalar(&l_pred), scalar(&total));
    }

    #[test]
    fn alpha_one_with_identical_maps_doubles() {
        let p = t(vec![0.7, 0.3, 0.6, 0.2], (2, 2));
        let gt = t(vec![1.0, 0.0, 1.0, 0.0], (2, 2));
        let inter = vec![(4usize, p.clone())];
        let (l_pred, _, total) = total_loss(&p, &inter, &gt, 1.0).unwrap();
        assert!((scalar(&total) - 2.0 * scalar(&l_pred)).abs() < 1e-12);
    }

    #[test]
    fn weighted_combination_of_known_components() {
        // components 0.4 and 0.2 with alpha 0.5 combine to 0.5
        let a = Tensor::from_vec(vec![0.4f64], (), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(vec![0.2f64], (), &Device::Cpu).unwrap();
        let total = (&a + (&b * 0.5).unwrap()).unwrap();
        assert!((scalar(&total) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_supervision_set_means_zero_inter() {
        let p = t(vec![0.7, 0.3, 0.6, 0.2], (2, 2));
        let gt = t(vec![1.0, 0.0, 1.0, 0.0], (2, 2));
        let (l_pred, l_inter, total) = total_loss(&p, &[], &gt, 0.5).unwrap();
        assert_eq!(scalar(&l_inter), 0.0);
        assert_eq!(scalar(&l_pred), scalar(&total));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_match() {
        let gt = t(vec![1.0, 0.0, 0.0, 1.0], (2, 2));
        for p in [
            t(vec![0.4, 0.4, 0.4, 0.4], (2, 2)),
            t(vec![0.99, 0.01, 0.01, 0.99], (2, 2)),
        ] {
            let loss = scalar(&bce(&p, &gt).unwrap());
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // d bce / d p on a 4x4 map, relative tolerance 1e-4 in 64-bit
        let n = 16usize;
        let base: Vec<f64> = (0..n).map(|i| 0.15 + 0.045 * i as f64).collect();
        let gt_v: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let gt = t(gt_v, (4, 4));
        let var = Var::from_tensor(&t(base.clone(), (4, 4))).unwrap();
        let loss = bce(var.as_tensor(), &gt).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let eps = 1e-6;
        for i in 0..n {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let lp = scalar(&bce(&t(plus, (4, 4)), &gt).unwrap());
            let lm = scalar(&bce(&t(minus, (4, 4)), &gt).unwrap());
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "pixel {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn dtype_f32_also_supported() {
        let p = Tensor::from_vec(vec![0.5f32; 4], (2, 2), &Device::Cpu).unwrap();
        let gt = Tensor::from_vec(vec![1.0f32, 0.0, 1.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        let loss = bce(&p, &gt).unwrap().to_scalar::<f32>().unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
