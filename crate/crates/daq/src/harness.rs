//! Training loop, ablation runner and video prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, save_checkpoint};
use crate::config::Config;
use crate::data::{
    load_clip, load_pair, load_video_dataset, load_video_dir, sample_clip_indices, VideoHandle,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, GrayMap};
use crate::model::DaqModel;
use crate::peft::{bench_csv, bench_memory, BenchRow};

pub struct TrainReport {
    pub iterations_run: usize,
    pub final_l_pred: f64,
    pub final_l_total: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Train a fresh model under `cfg` and keep it in memory for evaluation.
pub fn train_returning_model(cfg: &Config) -> Result<(DaqModel, TrainReport)> {
    let model = DaqModel::new(cfg)?;
    let report = train_model(cfg, &model)?;
    Ok((model, report))
}

pub fn train(cfg: &Config) -> Result<TrainReport> {
    train_returning_model(cfg).map(|(_, r)| r)
}

fn train_model(cfg: &Config, model: &DaqModel) -> Result<TrainReport> {
    let videos = load_video_dataset(Path::new(&cfg.data_root))?;
    let trainable: Vec<&VideoHandle> = videos.iter().filter(|v| !v.labeled_indices().is_empty()).collect();
    if trainable.is_empty() {
        return Err(Error::Data(format!(
            "no labeled videos under {}",
            cfg.data_root
        )));
    }
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = String::from("iter,l_pred,l_inter,l_total,wall_ms\n");

    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a_5eed);
    let ckpt_path = out_dir.join("checkpoint_final.safetensors");
    let mut last_pred = f64::NAN;
    let mut last_total = f64::NAN;
    for iter in 0..cfg.iterations {
        let t0 = Instant::now();
        let video = trainable[rng.gen_range(0..trainable.len())];
        let labeled = video.labeled_indices();
        let indices = sample_clip_indices(&labeled, cfg.clip_length, &mut rng);
        let clip = load_clip(video, &indices, cfg.input_size, cfg.numerics)?;
        let out = model.forward_clip(&clip, false)?;
        let l_pred = scalar(&out.l_pred)?;
        let l_inter = scalar(&out.l_inter)?;
        let l_total = scalar(&out.l_total)?;
        if !l_total.is_finite() {
            let norms = model
                .store
                .trainable_norms()?
                .into_iter()
                .map(|(n, v)| format!("{n}={v:.3e}"))
                .collect::<Vec<_>>()
                .join("; ");
            std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
            return Err(Error::TrainingAborted {
                iteration: iter,
                reason: format!("non-finite loss {l_total}; parameter norms: {norms}"),
            });
        }
        opt.backward_step(&out.l_total)?;
        let ms = t0.elapsed().as_millis();
        log.push_str(&format!("{iter},{l_pred:.6},{l_inter:.6},{l_total:.6},{ms}\n"));
        last_pred = l_pred;
        last_total = l_total;
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &out_dir.join(format!("checkpoint_{:06}.safetensors", iter + 1)),
                &model.store,
                cfg,
                iter + 1,
            )?;
        }
    }
    save_checkpoint(&ckpt_path, &model.store, cfg, cfg.iterations)?;
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainReport {
        iterations_run: cfg.iterations,
        final_l_pred: last_pred,
        final_l_total: last_total,
        checkpoint_path: ckpt_path,
        log_path,
    })
}

fn map_from_tensor(t: &candle_core::Tensor) -> Result<GrayMap> {
    let (_, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(GrayMap::new(w, h, data))
}

/// Run the full recurrence over every video and average the metrics of the
/// labeled frames.
pub fn evaluate_model(model: &DaqModel, videos: &[VideoHandle], ablate_depth: bool) -> Result<EvalResult> {
    let mut sums = [0.0f64; 4];
    let mut count = 0usize;
    for video in videos {
        let mut state = model.qtm.initial_state()?;
        for files in &video.frames {
            let pair = load_pair(files, model.cfg.input_size, model.cfg.numerics)?;
            let out = model.forward_frame(&pair, &state, ablate_depth)?;
            state = out.state;
            if files.gt.is_some() {
                let frame = crate::data::load_frame(files, model.cfg.input_size)?;
                let gt_vec = frame.gt.expect("labeled frame");
                let gt = GrayMap::new(model.cfg.input_size, model.cfg.input_size, gt_vec);
                let pred = map_from_tensor(&out.pred)?;
                let r = EvalResult::compute(&pred, &gt)?;
                sums[0] += r.e_measure;
                sums[1] += r.s_measure;
                sums[2] += r.f_measure;
                sums[3] += r.mae;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no labeled frames to evaluate".into()));
    }
    let n = count as f64;
    Ok(EvalResult {
        e_measure: sums[0] / n,
        s_measure: sums[1] / n,
        f_measure: sums[2] / n,
        mae: sums[3] / n,
    })
}

/// Run the pipeline over one video directory and write 8-bit masks, one per
/// input frame, at the video's native resolution. No ground truth or
/// prompts are consumed.
pub fn predict_video(
    ckpt: &Path,
    video_dir: &Path,
    out_dir: &Path,
    ablate_depth: bool,
) -> Result<usize> {
    let (model, _) = load_model(ckpt)?;
    let id = video_dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "video".to_string());
    let video = load_video_dir(video_dir, &id)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = model.qtm.initial_state()?;
    let mut written = 0;
    for files in &video.frames {
        let pair = load_pair(files, model.cfg.input_size, model.cfg.numerics)?;
        let out = model.forward_frame(&pair, &state, ablate_depth)?;
        state = out.state;
        // write at the source resolution
        let native = image::image_dimensions(&files.rgb).map_err(|e| Error::image(&files.rgb, e))?;
        let s = model.cfg.input_size;
        let pred = out.pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (nw, nh) = (native.0 as usize, native.1 as usize);
        let up = resize_plane(&pred, s, s, nw, nh);
        let img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_fn(
            nw as u32,
            nh as u32,
            |x, y| image::Luma([(up[y as usize * nw + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8]),
        );
        let path = out_dir.join(format!("{}.png", files.stem));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
        written += 1;
    }
    Ok(written)
}

fn resize_plane(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    if (w, h) == (ow, oh) {
        return src.to_vec();
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let fy = sy.floor();
        let ly = sy - fy;
        let y0 = (fy as isize).clamp(0, h as isize - 1) as usize;
        let y1 = (fy as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let fx = sx.floor();
            let lx = sx - fx;
            let x0 = (fx as isize).clamp(0, w as isize - 1) as usize;
            let x1 = (fx as isize + 1).clamp(0, w as isize - 1) as usize;
            out[oy * ow + ox] = src[y0 * w + x0] * (1.0 - ly) * (1.0 - lx)
                + src[y0 * w + x1] * (1.0 - ly) * lx
                + src[y1 * w + x0] * ly * (1.0 - lx)
                + src[y1 * w + x1] * ly * lx;
        }
    }
    out
}

/// Output of one ablation axis.
pub enum AblationTable {
    Metrics { axis: String, rows: Vec<(String, EvalResult)> },
    Memory { rows: Vec<BenchRow> },
}

impl AblationTable {
    pub fn markdown(&self) -> String {
        match self {
            AblationTable::Metrics { axis, rows } => {
                let mut out = format!("| {axis} | E↑ | S↑ | F↑ | M↓ |\n|---|---|---|---|---|\n");
                for (name, r) in rows {
                    out.push_str(&format!(
                        "| {name} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                        r.e_measure, r.s_measure, r.f_measure, r.mae
                    ));
                }
                out
            }
            AblationTable::Memory { rows } => {
                let mut out = String::from("| variant | trainable | total | peak bytes |\n|---|---|---|---|\n");
                for r in rows {
                    out.push_str(&format!(
                        "| {} | {} | {} | {} |\n",
                        r.variant, r.trainable, r.total, r.peak_bytes
                    ));
                }
                out
            }
        }
    }

    pub fn row_labels(&self) -> Vec<String> {
        match self {
            AblationTable::Metrics { rows, .. } => rows.iter().map(|(n, _)| n.clone()).collect(),
            AblationTable::Memory { rows } => rows.iter().map(|r| r.variant.clone()).collect(),
        }
    }
}

pub const ABLATION_AXES: [&str; 6] = [
    "peft_topology",
    "embedding_mode",
    "query_counts",
    "hidden_dim",
    "update_strategy",
    "supervised_levels",
];

fn train_eval_variant(base: &Config, label: &str, edit: impl FnOnce(&mut Config)) -> Result<(String, EvalResult)> {
    let mut cfg = base.clone();
    edit(&mut cfg);
    cfg.out_dir = format!("{}/{}", base.out_dir, label.replace([' ', ','], "_"));
    cfg.validate()?;
    let (model, _) = train_returning_model(&cfg)?;
    let videos = load_video_dataset(Path::new(&cfg.data_root))?;
    let result = evaluate_model(&model, &videos, false)?;
    Ok((label.to_string(), result))
}

/// Train and evaluate every variant of one ablation axis under the same
/// seed and data, mirroring the corresponding comparison table.
pub fn run_ablation(axis: &str, base: &Config) -> Result<AblationTable> {
    match axis {
        "peft_topology" => Ok(AblationTable::Memory { rows: bench_memory(base)? }),
        "update_strategy" => {
            let mut rows = vec![];
            for strategy in ["none", "sam2_bank", "multiply", "addition"] {
                rows.push(train_eval_variant(base, strategy, |c| {
                    c.update_strategy = crate::config::UpdateStrategy::parse(strategy).unwrap();
                })?);
            }
            Ok(AblationTable::Metrics { axis: "update strategy".into(), rows })
        }
        "hidden_dim" => {
            let mut rows = vec![];
            for dim in [32usize, 64, 128, 256] {
                rows.push(train_eval_variant(base, &dim.to_string(), |c| {
                    c.query_hidden_dim = dim;
                })?);
            }
            Ok(AblationTable::Metrics { axis: "hidden dim".into(), rows })
        }
        "embedding_mode" => {
            let mut rows = vec![];
            for mode in ["sparse", "dense", "both"] {
                rows.push(train_eval_variant(base, mode, |c| {
                    c.embedding_mode = crate::config::EmbeddingMode::parse(mode).unwrap();
                })?);
            }
            Ok(AblationTable::Metrics { axis: "embedding mode".into(), rows })
        }
        "query_counts" => {
            let mut rows = vec![];
            for (nv, nf) in [(5usize, 30usize), (8, 30), (10, 30), (8, 10), (8, 50)] {
                rows.push(train_eval_variant(base, &format!("Nv={nv} Nf={nf}"), |c| {
                    c.num_video_queries = nv;
                    c.num_frame_queries = nf;
                })?);
            }
            Ok(AblationTable::Metrics { axis: "query counts".into(), rows })
        }
        "supervised_levels" => {
            let mut rows = vec![];
            for levels in [vec![2usize], vec![3], vec![4], vec![3, 4], vec![2, 3, 4]] {
                let label = levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
                rows.push(train_eval_variant(base, &label, |c| {
                    c.supervised_levels = levels.clone();
                })?);
            }
            Ok(AblationTable::Metrics { axis: "supervised levels".into(), rows })
        }
        other => Err(Error::Config(format!(
            "unknown ablation axis `{other}` (expected one of {ABLATION_AXES:?})"
        ))),
    }
}

/// Write the bench CSV next to the table (CLI convenience).
pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    bench_csv(rows)
}
