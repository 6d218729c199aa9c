//! Saliency evaluation metrics: MAE, adaptive F-measure, S-measure and
//! E-measure, plus directory-level evaluation.
//!
//! Conventions follow the metric authors' reference implementations:
//! sample (N-1) variance inside the S-measure similarities, region split at
//! the rounded ground-truth centroid, adaptive binarization at twice the
//! prediction mean (capped at 1), and the all-empty / all-full ground-truth
//! shortcuts. Scores are plain `f64` over small gray maps; image IO happens
//! only at the directory boundary.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FBETA_SQ: f64 = 0.3;
pub const ALIGN_EPS: f64 = 1e-8;

/// A single-channel map with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(w: usize, h: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), w * h);
        Self { w, h, data }
    }

    pub fn from_fn(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        Self { w, h, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn check_shapes(p: &GrayMap, g: &GrayMap) -> Result<()> {
    if (p.w, p.h) != (g.w, g.h) {
        return Err(Error::Shape(format!(
            "map shapes differ: {}x{} vs {}x{}",
            p.w, p.h, g.w, g.h
        )));
    }
    Ok(())
}

pub fn mae(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// Twice the mean, capped at 1.
pub fn adaptive_threshold(pred: &GrayMap) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

pub fn binarize(map: &GrayMap, threshold: f64) -> GrayMap {
    GrayMap {
        w: map.w,
        h: map.h,
        data: map.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
    }
}

/// Adaptive-threshold F-measure with beta^2 = 0.3.
pub fn f_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let bin = binarize(pred, adaptive_threshold(pred));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in bin.data.iter().zip(gt.data.iter()) {
        let pb = *p >= 0.5;
        let gb = *g >= 0.5;
        match (pb, gb) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fn_ == 0 {
        // empty ground truth: perfect only for an empty prediction
        return Ok(if tp + fp == 0 { 1.0 } else { 0.0 });
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok((1.0 + FBETA_SQ) * precision * recall / (FBETA_SQ * precision + recall))
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + 2.0 * std + f64::EPSILON)
}

fn s_object(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let mu = gt.mean();
    let fg: Vec<f64> = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .filter(|(_, g)| **g >= 0.5)
        .map(|(p, _)| *p)
        .collect();
    let bg: Vec<f64> = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .filter(|(_, g)| **g < 0.5)
        .map(|(p, _)| 1.0 - *p)
        .collect();
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

/// SSIM-style block similarity used inside the region score.
fn block_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 1.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (sx, sy, sxy) = if n > 1 {
        let d = (n - 1) as f64;
        let sx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / d;
        let sy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / d;
        let sxy = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / d;
        (sx, sy, sxy)
    } else {
        (0.0, 0.0, 0.0)
    };
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn gather_block(m: &GrayMap, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        for x in x0..x1 {
            out.push(m.at(x, y));
        }
    }
    out
}

fn s_region(pred: &GrayMap, gt: &GrayMap) -> f64 {
    // centroid of the foreground, as a 1-based split column/row
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut count = 0.0;
    for y in 0..gt.h {
        for x in 0..gt.w {
            if gt.at(x, y) >= 0.5 {
                sx += x as f64;
                sy += y as f64;
                count += 1.0;
            }
        }
    }
    let cut_x = ((sx / count).round() as usize + 1).min(gt.w);
    let cut_y = ((sy / count).round() as usize + 1).min(gt.h);
    let total = (gt.w * gt.h) as f64;
    let mut score = 0.0;
    for (x0, x1, y0, y1) in [
        (0, cut_x, 0, cut_y),
        (cut_x, gt.w, 0, cut_y),
        (0, cut_x, cut_y, gt.h),
        (cut_x, gt.w, cut_y, gt.h),
    ] {
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        if area == 0.0 {
            continue;
        }
        let pb = gather_block(pred, x0, x1, y0, y1);
        let gb = gather_block(gt, x0, x1, y0, y1);
        score += area / total * block_ssim(&pb, &gb);
    }
    score
}

/// Structure measure: object + region similarity, equally weighted, with
/// the reference shortcuts for all-empty and all-full ground truth.
pub fn s_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mu = gt.mean();
    if mu == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if mu == 1.0 {
        return Ok(pred.mean());
    }
    let s = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt);
    Ok(s.max(0.0))
}

/// Enhanced-alignment measure on the adaptively binarized prediction.
pub fn e_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let fm = binarize(pred, adaptive_threshold(pred));
    let n = (gt.w * gt.h) as f64;
    let gt_sum: f64 = gt.data.iter().filter(|v| **v >= 0.5).count() as f64;
    if gt_sum == 0.0 {
        return Ok(1.0 - fm.mean());
    }
    if gt_sum == n {
        return Ok(fm.mean());
    }
    let mu_f = fm.mean();
    let mu_g = gt_sum / n;
    let mut acc = 0.0;
    for (f, g) in fm.data.iter().zip(gt.data.iter()) {
        let pf = f - mu_f;
        let pg = (if *g >= 0.5 { 1.0 } else { 0.0 }) - mu_g;
        let align = 2.0 * pf * pg / (pf * pf + pg * pg + ALIGN_EPS);
        acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
    Ok(acc / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub e_measure: f64,
    pub s_measure: f64,
    pub f_measure: f64,
    pub mae: f64,
}

impl EvalResult {
    pub fn compute(pred: &GrayMap, gt: &GrayMap) -> Result<Self> {
        Ok(Self {
            e_measure: e_measure(pred, gt)?,
            s_measure: s_measure(pred, gt)?,
            f_measure: f_measure(pred, gt)?,
            mae: mae(pred, gt)?,
        })
    }
}

/// Read an 8-bit grayscale image into [0, 1].
pub fn read_gray_map(path: &Path) -> Result<GrayMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(GrayMap::new(w, h, data))
}

/// Ground-truth masks binarize at the 128 gray level.
pub fn read_gt_map(path: &Path) -> Result<GrayMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .as_raw()
        .iter()
        .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(GrayMap::new(w, h, data))
}

/// Per-frame metrics over two directories of same-named mask images, plus
/// the dataset mean.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<(String, EvalResult)>, EvalResult)> {
    let mut names: Vec<String> = vec![];
    let entries = std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(pred_dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            names.push(path.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .png predictions in {}", pred_dir.display())));
    }
    // every ground-truth frame must have a prediction too
    let gt_entries = std::fs::read_dir(gt_dir).map_err(|e| Error::io(gt_dir, e))?;
    for entry in gt_entries {
        let entry = entry.map_err(|e| Error::io(gt_dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if !names.contains(&name) {
                return Err(Error::Data(format!(
                    "ground-truth frame `{name}` has no prediction in {}",
                    pred_dir.display()
                )));
            }
        }
    }
    let mut rows = vec![];
    let mut sums = [0.0f64; 4];
    for name in &names {
        let gt_path: PathBuf = gt_dir.join(name);
        if !gt_path.exists() {
            return Err(Error::Data(format!(
                "prediction frame `{name}` has no ground truth in {}",
                gt_dir.display()
            )));
        }
        let pred = read_gray_map(&pred_dir.join(name))?;
        let gt = read_gt_map(&gt_path)?;
        let r = EvalResult::compute(&pred, &gt)?;
        sums[0] += r.e_measure;
        sums[1] += r.s_measure;
        sums[2] += r.f_measure;
        sums[3] += r.mae;
        rows.push((name.clone(), r));
    }
    let n = rows.len() as f64;
    let mean = EvalResult {
        e_measure: sums[0] / n,
        s_measure: sums[1] / n,
        f_measure: sums[2] / n,
        mae: sums[3] / n,
    };
    Ok((rows, mean))
}

pub fn results_csv(rows: &[(String, EvalResult)], mean: &EvalResult) -> String {
    let mut out = String::from("frame,e_measure,s_measure,f_measure,mae\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6}\n",
            r.e_measure, r.s_measure, r.f_measure, r.mae
        ));
    }
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6}\n",
        mean.e_measure, mean.s_measure, mean.f_measure, mean.mae
    ));
    out
}

pub fn results_markdown(label: &str, rows: &[(String, EvalResult)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {label} | E↑ | S↑ | F↑ | M↓ |\n"));
    out.push_str("|---|---|---|---|---|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            r.e_measure, r.s_measure, r.f_measure, r.mae
        ));
    }
    out
}
