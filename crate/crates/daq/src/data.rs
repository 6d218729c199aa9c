//! Synthetic RGB-D video data and on-disk dataset loading.
//!
//! The generator renders a near-depth salient object moving over a textured
//! background, together with far-depth distractors that share the object's
//! color exactly, so color alone cannot separate them but depth can. Videos
//! live on disk as `root/<video_id>/{RGB,depth,GT}/<frame>.png` with
//! zero-padded 5-digit frame names, 8-bit RGB, 16-bit depth and binary
//! 8-bit ground truth.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    Disk,
    Rectangle,
}

/// Parameters of one synthetic video.
#[derive(Debug, Clone)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub image_size: usize,
    pub object_shape: ObjectShape,
    /// Depth plane of the salient object; must stay below the distractor
    /// plane at 0.9 so depth orders them strictly.
    pub object_depth: f64,
    pub distractor_count: usize,
    /// Object speed in pixels per frame.
    pub velocity: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 10,
            image_size: 64,
            object_shape: ObjectShape::Disk,
            object_depth: 0.2,
            distractor_count: 2,
            velocity: 2.0,
            noise_sigma: 0.02,
        }
    }
}

const DISTRACTOR_DEPTH: f64 = 0.9;

/// Reflect `x` into `[lo, hi]`.
fn fold(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    let mut m = (x - lo) % period;
    if m < 0.0 {
        m += period;
    }
    lo + m.min(period - m)
}

struct Mover {
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    half: f64,
}

impl Mover {
    fn at(&self, t: usize, size: f64) -> (f64, f64) {
        let lo = self.half + 1.0;
        let hi = size - 1.0 - self.half - 1.0;
        (
            fold(self.x0 + self.vx * t as f64, lo, hi),
            fold(self.y0 + self.vy * t as f64, lo, hi),
        )
    }
}

pub(crate) struct RenderedFrame {
    pub rgb: Vec<f64>,   // 3*s*s
    pub depth: Vec<f64>, // s*s
    pub gt: Vec<bool>,   // s*s, the object's exact support
    #[cfg_attr(not(test), allow(dead_code))]
    pub distractor: Vec<bool>,
}

struct Scene {
    spec: SynthSceneSpec,
    object: Mover,
    distractors: Vec<Mover>,
    color: [f64; 3],
    bg_base: [f64; 3],
    noise_seed: u64,
}

impl Scene {
    fn new(spec: &SynthSceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let s = spec.image_size as f64;
        let half = (s / 8.0).max(3.0);
        let mut mover = |half: f64, speed: f64| {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Mover {
                x0: rng.gen_range(half + 2.0..s - half - 2.0),
                y0: rng.gen_range(half + 2.0..s - half - 2.0),
                vx: speed * ang.cos(),
                vy: speed * ang.sin(),
                half,
            }
        };
        let object = mover(half, spec.velocity);
        let distractors = (0..spec.distractor_count)
            .map(|i| mover(half * (0.6 + 0.1 * i as f64), spec.velocity * 0.8))
            .collect();
        let color = [
            rng.gen_range(0.6..0.95),
            rng.gen_range(0.6..0.95),
            rng.gen_range(0.6..0.95),
        ];
        let bg_base = [
            rng.gen_range(0.15..0.3),
            rng.gen_range(0.15..0.3),
            rng.gen_range(0.15..0.3),
        ];
        Scene {
            spec: spec.clone(),
            object,
            distractors,
            color,
            bg_base,
            noise_seed: rng.gen(),
        }
    }

    fn support(&self, shape: ObjectShape, cx: f64, cy: f64, half: f64, x: usize, y: usize) -> bool {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        match shape {
            ObjectShape::Disk => dx * dx + dy * dy <= half * half,
            ObjectShape::Rectangle => dx.abs() <= half && dy.abs() <= half * 0.75,
        }
    }

    fn render(&self, t: usize) -> RenderedFrame {
        let s = self.spec.image_size;
        let sf = s as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ (t as u64).wrapping_mul(0x9e37_79b9));
        let noise = Normal::new(0.0, self.spec.noise_sigma).expect("sigma");
        let mut rgb = vec![0.0; 3 * s * s];
        let mut depth = vec![0.0; s * s];
        let mut gt = vec![false; s * s];
        let mut distr = vec![false; s * s];
        let (ox, oy) = self.object.at(t, sf);
        let dpos: Vec<(f64, f64)> = self.distractors.iter().map(|m| m.at(t, sf)).collect();
        for y in 0..s {
            for x in 0..s {
                let idx = y * s + x;
                // background
                let grad = 0.1 * y as f64 / sf;
                let mut px = [
                    self.bg_base[0] + grad,
                    self.bg_base[1] + grad,
                    self.bg_base[2] + grad,
                ];
                let mut d = 0.55 + 0.25 * y as f64 / sf + noise.sample(&mut rng) * 0.5;
                d = d.clamp(0.5, 0.82);
                // far distractors share the object color exactly
                for (m, (dx, dy)) in self.distractors.iter().zip(dpos.iter()) {
                    if self.support(self.spec.object_shape, *dx, *dy, m.half, x, y) {
                        px = self.color;
                        d = DISTRACTOR_DEPTH;
                        distr[idx] = true;
                    }
                }
                // near object drawn last: it occludes everything
                if self.support(self.spec.object_shape, ox, oy, self.object.half, x, y) {
                    px = self.color;
                    d = self.spec.object_depth;
                    gt[idx] = true;
                    distr[idx] = false;
                }
                for c in 0..3 {
                    let v = px[c] + noise.sample(&mut rng);
                    rgb[c * s * s + idx] = v.clamp(0.0, 1.0);
                }
                depth[idx] = d;
            }
        }
        RenderedFrame { rgb, depth, gt, distractor: distr }
    }
}

pub(crate) fn render_video(spec: &SynthSceneSpec) -> Vec<RenderedFrame> {
    let scene = Scene::new(spec);
    (0..spec.num_frames).map(|t| scene.render(t)).collect()
}

fn write_png_rgb(path: &Path, data: &[f64], s: usize) -> Result<()> {
    let img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_fn(s as u32, s as u32, |x, y| {
        let idx = y as usize * s + x as usize;
        image::Rgb([
            (data[idx] * 255.0).round() as u8,
            (data[s * s + idx] * 255.0).round() as u8,
            (data[2 * s * s + idx] * 255.0).round() as u8,
        ])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

fn write_png_depth16(path: &Path, data: &[f64], s: usize) -> Result<()> {
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(s as u32, s as u32, |x, y| {
        image::Luma([(data[y as usize * s + x as usize] * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

fn write_png_mask(path: &Path, data: &[bool], s: usize) -> Result<()> {
    let img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_fn(s as u32, s as u32, |x, y| {
        image::Luma([if data[y as usize * s + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Render one video to `<out_dir>/{RGB,depth,GT}/NNNNN.png`.
pub fn synth_generate(spec: &SynthSceneSpec, out_dir: &Path) -> Result<()> {
    for sub in ["RGB", "depth", "GT"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let frames = render_video(spec);
    let s = spec.image_size;
    for (t, frame) in frames.iter().enumerate() {
        let name = format!("{t:05}.png");
        write_png_rgb(&out_dir.join("RGB").join(&name), &frame.rgb, s)?;
        write_png_depth16(&out_dir.join("depth").join(&name), &frame.depth, s)?;
        write_png_mask(&out_dir.join("GT").join(&name), &frame.gt, s)?;
    }
    Ok(())
}

/// A deterministic multi-video set with alternating object shapes.
pub fn synth_generate_set(
    base_seed: u64,
    videos: usize,
    frames: usize,
    size: usize,
    out_root: &Path,
) -> Result<()> {
    for v in 0..videos {
        let spec = SynthSceneSpec {
            seed: base_seed.wrapping_add(1000 * v as u64),
            num_frames: frames,
            image_size: size,
            object_shape: if v % 2 == 0 { ObjectShape::Disk } else { ObjectShape::Rectangle },
            distractor_count: 2 + v % 2,
            ..SynthSceneSpec::default()
        };
        synth_generate(&spec, &out_root.join(format!("video_{v:03}")))?;
    }
    Ok(())
}

/// One frame's file paths inside a video directory.
#[derive(Debug, Clone)]
pub struct FrameFiles {
    pub stem: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Lazily enumerated video: paths only, pixels read on demand.
#[derive(Debug, Clone)]
pub struct VideoHandle {
    pub id: String,
    pub frames: Vec<FrameFiles>,
}

impl VideoHandle {
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.gt.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = vec![];
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            stems.push(path.file_stem().unwrap().to_string_lossy().to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Enumerate `root/<video_id>/{RGB,depth,GT}` into video handles. RGB and
/// depth must agree frame-for-frame; ground truth may cover a subset.
pub fn load_video_dataset(root: &Path) -> Result<Vec<VideoHandle>> {
    let mut ids: Vec<String> = vec![];
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no video directories under {}", root.display())));
    }
    let mut videos = vec![];
    for id in ids {
        videos.push(load_video_dir(&root.join(&id), &id)?);
    }
    Ok(videos)
}

/// Enumerate a single video directory.
pub fn load_video_dir(dir: &Path, id: &str) -> Result<VideoHandle> {
    for modality in ["RGB", "depth"] {
        if !dir.join(modality).is_dir() {
            return Err(Error::Data(format!(
                "video `{id}`: missing {modality}/ folder under {}",
                dir.display()
            )));
        }
    }
    let rgb_stems = png_stems(&dir.join("RGB"))?;
    let depth_stems = png_stems(&dir.join("depth"))?;
    if rgb_stems != depth_stems {
        let only_rgb: Vec<_> = rgb_stems.iter().filter(|s| !depth_stems.contains(s)).cloned().collect();
        let only_depth: Vec<_> = depth_stems.iter().filter(|s| !rgb_stems.contains(s)).cloned().collect();
        return Err(Error::Data(format!(
            "video `{id}`: RGB/depth frame mismatch (RGB-only: {only_rgb:?}, depth-only: {only_depth:?})"
        )));
    }
    if rgb_stems.is_empty() {
        return Err(Error::Data(format!("video `{id}`: no frames")));
    }
    let gt_dir = dir.join("GT");
    let frames = rgb_stems
        .into_iter()
        .map(|stem| {
            let gt_path = gt_dir.join(format!("{stem}.png"));
            FrameFiles {
                rgb: dir.join("RGB").join(format!("{stem}.png")),
                depth: dir.join("depth").join(format!("{stem}.png")),
                gt: gt_path.exists().then_some(gt_path),
                stem,
            }
        })
        .collect();
    Ok(VideoHandle { id: id.to_string(), frames })
}

/// Bilinear plane resize with half-pixel centers; plain `f64` path used by
/// the loader (the differentiable twin lives in `ops`).
fn resize_plane_bilinear(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
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

fn resize_plane_nearest(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    if (w, h) == (ow, oh) {
        return src.to_vec();
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
            out[oy * ow + ox] = src[sy * w + sx];
        }
    }
    out
}

/// One loaded frame: channel-major planes in [0, 1], resized to `s`.
pub struct LoadedFrame {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub gt: Option<Vec<f64>>,
    pub size: usize,
}

pub fn load_frame(files: &FrameFiles, s: usize) -> Result<LoadedFrame> {
    let rgb_img = image::open(&files.rgb)
        .map_err(|e| Error::image(&files.rgb, e))?
        .to_rgb8();
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    let mut rgb = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        let plane: Vec<f64> = rgb_img.pixels().map(|p| p.0[c] as f64 / 255.0).collect();
        rgb.extend(resize_plane_bilinear(&plane, w, h, s, s));
    }

    let depth_img = image::open(&files.depth).map_err(|e| Error::image(&files.depth, e))?;
    let (dw, dh, plane): (usize, usize, Vec<f64>) = match depth_img {
        image::DynamicImage::ImageLuma16(img) => (
            img.width() as usize,
            img.height() as usize,
            img.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        other => {
            let img = other.to_luma8();
            (
                img.width() as usize,
                img.height() as usize,
                img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
            )
        }
    };
    let depth = resize_plane_bilinear(&plane, dw, dh, s, s);

    let gt = match &files.gt {
        Some(path) => {
            let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
            let (gw, gh) = (img.width() as usize, img.height() as usize);
            let plane: Vec<f64> = img
                .as_raw()
                .iter()
                .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
                .collect();
            Some(resize_plane_nearest(&plane, gw, gh, s, s))
        }
        None => None,
    };
    Ok(LoadedFrame { rgb, depth, gt, size: s })
}

/// Spatially aligned RGB and depth tensors for one frame.
pub struct RGBDFramePair {
    pub rgb: Tensor,   // (3, s, s)
    pub depth: Tensor, // (1, s, s)
}

/// An ordered training clip with ground truth.
pub struct VideoClip {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub frames: Vec<RGBDFramePair>,
    pub gts: Vec<Tensor>, // (1, s, s) binary
}

/// Sample `length` labeled frame indices: without replacement where the
/// video allows it, with replacement otherwise, always sorted ascending so
/// the temporal order is preserved.
pub fn sample_clip_indices(labeled: &[usize], length: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = if labeled.len() >= length {
        let mut pool = labeled.to_vec();
        // partial Fisher-Yates
        for i in 0..length {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(length);
        pool
    } else {
        (0..length).map(|_| labeled[rng.gen_range(0..labeled.len())]).collect()
    };
    picked.sort_unstable();
    picked
}

/// Load a clip at the given frame indices as tensors of the given dtype.
pub fn load_clip(video: &VideoHandle, indices: &[usize], s: usize, dtype: DType) -> Result<VideoClip> {
    let dev = candle_core::Device::Cpu;
    let mut frames = vec![];
    let mut gts = vec![];
    for &idx in indices {
        let f = load_frame(&video.frames[idx], s)?;
        let rgb = Tensor::from_vec(f.rgb, (3, s, s), &dev)?.to_dtype(dtype)?;
        let depth = Tensor::from_vec(f.depth, (1, s, s), &dev)?.to_dtype(dtype)?;
        let gt = f.gt.ok_or_else(|| {
            Error::Data(format!(
                "frame `{}` of video `{}` has no ground truth",
                video.frames[idx].stem, video.id
            ))
        })?;
        gts.push(Tensor::from_vec(gt, (1, s, s), &dev)?.to_dtype(dtype)?);
        frames.push(RGBDFramePair { rgb, depth });
    }
    Ok(VideoClip {
        video_id: video.id.clone(),
        frame_indices: indices.to_vec(),
        frames,
        gts,
    })
}

/// Load a frame pair without ground truth (inference path).
pub fn load_pair(files: &FrameFiles, s: usize, dtype: DType) -> Result<RGBDFramePair> {
    if !files.depth.exists() {
        return Err(Error::Data(format!(
            "frame `{}` is missing its depth image {}",
            files.stem,
            files.depth.display()
        )));
    }
    let dev = candle_core::Device::Cpu;
    let f = load_frame(files, s)?;
    Ok(RGBDFramePair {
        rgb: Tensor::from_vec(f.rgb, (3, s, s), &dev)?.to_dtype(dtype)?,
        depth: Tensor::from_vec(f.depth, (1, s, s), &dev)?.to_dtype(dtype)?,
    })
}
