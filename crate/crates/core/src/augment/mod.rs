//! Pseudo-video synthesis from image-editing pairs.
//!
//! A shared affine trajectory warps the original and edited image with the
//! same per-frame transform, so the only difference between the two videos
//! is the edit itself. Pipeline per frame: resize shorter side, affine warp,
//! shared square crop.

pub mod imgio;

use thiserror::Error;

use crate::numkit::{Rng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid ranges: {0}")]
    InvalidRanges(String),
    #[error("singular transform (|det| = {det:.3e})")]
    SingularTransform { det: f64 },
    #[error("image dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("image too small: {h}x{w} for crop {crop}")]
    ImageTooSmall { h: usize, w: usize, crop: usize },
    #[error("pixel value {value} outside [0,1] at flat index {index}")]
    PixelOutOfRange { value: f32, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One frame's affine transform. Angles in degrees, translation as a
/// fraction of width/height, uniform scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub translate_frac: (f64, f64),
    pub scale: f64,
    pub shear_deg: (f64, f64),
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        translate_frac: (0.0, 0.0),
        scale: 1.0,
        shear_deg: (0.0, 0.0),
    };

    fn lerp(a: &AffineParams, b: &AffineParams, t: f64) -> AffineParams {
        let l = |x: f64, y: f64| x + (y - x) * t;
        AffineParams {
            rotation_deg: l(a.rotation_deg, b.rotation_deg),
            translate_frac: (
                l(a.translate_frac.0, b.translate_frac.0),
                l(a.translate_frac.1, b.translate_frac.1),
            ),
            scale: l(a.scale, b.scale),
            shear_deg: (l(a.shear_deg.0, b.shear_deg.0), l(a.shear_deg.1, b.shear_deg.1)),
        }
    }
}

/// Sampling bounds. Defaults are the published augmentation recipe:
/// rotation within 5 degrees, translation within 5% of the side, scale
/// 0.95..1.05, shear within 5 degrees, resize shorter side to 288 and crop
/// a 256 square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub translate_frac: f64,
    pub scale: (f64, f64),
    pub shear_deg: f64,
    pub resize_short: usize,
    pub crop: usize,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            max_rotation_deg: 5.0,
            translate_frac: 0.05,
            scale: (0.95, 1.05),
            shear_deg: 5.0,
            resize_short: 288,
            crop: 256,
        }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.max_rotation_deg < 0.0 || self.translate_frac < 0.0 || self.shear_deg < 0.0 {
            return Err(AugmentError::InvalidRanges("negative bound".into()));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(AugmentError::InvalidRanges(format!(
                "scale range ({}, {}) must be positive and ordered",
                self.scale.0, self.scale.1
            )));
        }
        if self.resize_short < 1 || self.crop < 1 || self.crop > self.resize_short {
            return Err(AugmentError::InvalidRanges(format!(
                "need 1 <= crop ({}) <= resize_short ({})",
                self.crop, self.resize_short
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    Iid,
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    Replicate,
    Reflect,
}

/// Shared random-resized-crop window, sampled once per trajectory. Offsets
/// are normalized so the pixel rectangle is resolved against the resized
/// frame dimensions at apply time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub resize_short: usize,
    pub size: usize,
    pub u: f64,
    pub v: f64,
}

/// Per-frame transforms plus the shared crop; applied identically to the
/// original and the edited image.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformTrajectory {
    pub frames: Vec<AffineParams>,
    pub crop: Option<CropSpec>,
    pub mode: TrajectoryMode,
}

impl TransformTrajectory {
    /// Linear interpolation between two endpoint transforms. T=1 keeps the
    /// start endpoint.
    pub fn interpolate(
        start: AffineParams,
        end: AffineParams,
        t_frames: usize,
        crop: Option<CropSpec>,
    ) -> Self {
        assert!(t_frames >= 1, "trajectory needs at least one frame");
        let frames = (0..t_frames)
            .map(|i| {
                let t = if t_frames == 1 { 0.0 } else { i as f64 / (t_frames - 1) as f64 };
                AffineParams::lerp(&start, &end, t)
            })
            .collect();
        TransformTrajectory { frames, crop, mode: TrajectoryMode::Interpolated }
    }

    pub fn identity(t_frames: usize) -> Self {
        assert!(t_frames >= 1, "trajectory needs at least one frame");
        TransformTrajectory {
            frames: vec![AffineParams::IDENTITY; t_frames],
            crop: None,
            mode: TrajectoryMode::Interpolated,
        }
    }
}

/// Origin of a training record, persisted as one byte in shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    ImageSynth,
    Openworld,
}

impl SourceTag {
    pub fn to_byte(self) -> u8 {
        match self {
            SourceTag::ImageSynth => 0,
            SourceTag::Openworld => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SourceTag::ImageSynth),
            1 => Some(SourceTag::Openworld),
            _ => None,
        }
    }
}

/// One training record: input video, instruction, edited video. Videos are
/// (T,C,H,W) with identical shapes and pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct EditTriplet {
    pub video_in: Tensor,
    pub instruction: String,
    pub video_out: Tensor,
    pub source_tag: SourceTag,
    pub seed: u64,
}

impl EditTriplet {
    pub fn new(
        video_in: Tensor,
        instruction: String,
        video_out: Tensor,
        source_tag: SourceTag,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        if video_in.shape() != video_out.shape() || video_in.shape().len() != 4 {
            return Err(AugmentError::DimensionMismatch {
                left: video_in.shape().to_vec(),
                right: video_out.shape().to_vec(),
            });
        }
        for (index, &value) in video_in.data().iter().chain(video_out.data()).enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(AugmentError::PixelOutOfRange { value, index });
            }
        }
        Ok(EditTriplet { video_in, instruction, video_out, source_tag, seed })
    }
}

fn sample_params_from(rng: &mut Rng, ranges: &AffineRanges) -> AffineParams {
    let r = ranges.max_rotation_deg;
    // Uniform draws land in [lo, hi). Rotation must stay strictly inside
    // (-r, r); the measure-zero left endpoint is remapped to 0.
    let mut rotation_deg = rng.uniform(-r, r);
    if r > 0.0 && rotation_deg <= -r {
        rotation_deg = 0.0;
    }
    let t = ranges.translate_frac;
    let translate_frac = (rng.uniform(-t, t), rng.uniform(-t, t));
    let scale = rng.uniform(ranges.scale.0, ranges.scale.1);
    let s = ranges.shear_deg;
    let shear_deg = (rng.uniform(-s, s), rng.uniform(-s, s));
    AffineParams { rotation_deg, translate_frac, scale, shear_deg }
}

/// Draw one transform uniformly within `ranges`; deterministic in `seed`.
pub fn sample_affine_params(seed: u64, ranges: &AffineRanges) -> Result<AffineParams, AugmentError> {
    ranges.validate()?;
    Ok(sample_params_from(&mut Rng::seed_from(seed), ranges))
}

/// Draw a full trajectory. Draw order is pinned: frame params first (two
/// endpoints in interpolated mode, T draws in iid mode), then the crop
/// offsets, so outputs are reproducible from the seed alone.
pub fn make_trajectory(
    seed: u64,
    t_frames: usize,
    ranges: &AffineRanges,
    mode: TrajectoryMode,
    with_crop: bool,
) -> Result<TransformTrajectory, AugmentError> {
    ranges.validate()?;
    assert!(t_frames >= 1, "trajectory needs at least one frame");
    let mut rng = Rng::seed_from(seed);
    let mut traj = match mode {
        TrajectoryMode::Iid => {
            let frames = (0..t_frames).map(|_| sample_params_from(&mut rng, ranges)).collect();
            TransformTrajectory { frames, crop: None, mode }
        }
        TrajectoryMode::Interpolated => {
            let start = sample_params_from(&mut rng, ranges);
            let end = sample_params_from(&mut rng, ranges);
            TransformTrajectory::interpolate(start, end, t_frames, None)
        }
    };
    if with_crop {
        traj.crop = Some(CropSpec {
            resize_short: ranges.resize_short,
            size: ranges.crop,
            u: rng.next_f64(),
            v: rng.next_f64(),
        });
    }
    Ok(traj)
}

/// 2x3 matrix sending output pixel coordinates to source coordinates,
/// composed about the image center as translate . rotate . shear . scale
/// (scale innermost). Identity params give the identity matrix.
pub fn affine_matrix(
    p: &AffineParams,
    width: usize,
    height: usize,
) -> Result<[[f64; 3]; 2], AugmentError> {
    assert!(width >= 1 && height >= 1, "degenerate image");
    let th = p.rotation_deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let (tx, ty) = (p.shear_deg.0.to_radians().tan(), p.shear_deg.1.to_radians().tan());
    let s = p.scale;
    // R . Sh . Sc with Sh = [[1, tx], [ty, 1]].
    let a = [
        [s * (cos - sin * ty), s * (cos * tx - sin)],
        [s * (sin + cos * ty), s * (sin * tx + cos)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 {
        return Err(AugmentError::SingularTransform { det });
    }
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let (dx, dy) = (p.translate_frac.0 * width as f64, p.translate_frac.1 * height as f64);
    // source = A (p - c) + c + d, folded into absolute-coordinate form.
    Ok([
        [a[0][0], a[0][1], cx + dx - a[0][0] * cx - a[0][1] * cy],
        [a[1][0], a[1][1], cy + dy - a[1][0] * cx - a[1][1] * cy],
    ])
}

fn border_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    debug_assert!(n >= 1);
    let mut i = i;
    // Reflect with edge duplication; loops only for far out-of-range coords.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Bilinear warp of a (C,H,W) image by an output-to-source matrix.
pub fn warp_bilinear(
    img: &Tensor,
    m: &[[f64; 3]; 2],
    border: BorderMode,
) -> Result<Tensor, AugmentError> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(AugmentError::Tensor(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "warp_bilinear expects rank-3 (C,H,W)",
        }));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AugmentError::SingularTransform { det: f64::NAN });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let pick = |i: i64, n: usize| match border {
        BorderMode::Replicate => clamp_index(i, n),
        BorderMode::Reflect => border_index(i, n),
    };
    let src = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = m[0][0] * xf + m[0][1] * yf + m[0][2];
            let sy = m[1][0] * xf + m[1][1] * yf + m[1][2];
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0i, y0i) = (x0 as i64, y0 as i64);
            let (xl, xr) = (pick(x0i, w), pick(x0i + 1, w));
            let (yt, yb) = (pick(y0i, h), pick(y0i + 1, h));
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let tl = plane[yt * w + xl];
                let tr = plane[yt * w + xr];
                let bl = plane[yb * w + xl];
                let br = plane[yb * w + xr];
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[ch * h * w + y * w + x] = top + (bot - top) * fy;
            }
        }
    }
    Ok(Tensor::from_op(vec![c, h, w], out))
}

/// Bilinear resize of a (C,H,W) image so its shorter side equals `target`,
/// aspect ratio preserved (longer side rounded).
pub fn resize_shorter_side(img: &Tensor, target: usize) -> Result<Tensor, AugmentError> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(AugmentError::Tensor(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "resize expects rank-3 (C,H,W)",
        }));
    }
    assert!(target >= 1, "resize target must be positive");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (nh, nw) = if h <= w {
        (target, ((w as f64 * target as f64 / h as f64).round() as usize).max(1))
    } else {
        (((h as f64 * target as f64 / w as f64).round() as usize).max(1), target)
    };
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0f32; c * nh * nw];
    let (rx, ry) = (w as f64 / nw as f64, h as f64 / nh as f64);
    for y in 0..nh {
        // Pixel-center alignment: dst center maps to src center.
        let sy = ((y as f64 + 0.5) * ry - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * rx - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let tl = plane[y0 * w + x0];
                let tr = plane[y0 * w + x1];
                let bl = plane[y1 * w + x0];
                let br = plane[y1 * w + x1];
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[ch * nh * nw + y * nw + x] = top + (bot - top) * fy;
            }
        }
    }
    Ok(Tensor::from_op(vec![c, nh, nw], out))
}

fn crop_square(img: &Tensor, spec: &CropSpec) -> Result<Tensor, AugmentError> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < spec.size || w < spec.size {
        return Err(AugmentError::ImageTooSmall { h, w, crop: spec.size });
    }
    let x0 = (spec.u * (w - spec.size) as f64).round() as usize;
    let y0 = (spec.v * (h - spec.size) as f64).round() as usize;
    let src = img.data();
    let mut out = vec![0.0f32; c * spec.size * spec.size];
    for ch in 0..c {
        for y in 0..spec.size {
            let row = &src[ch * h * w + (y0 + y) * w + x0..][..spec.size];
            out[ch * spec.size * spec.size + y * spec.size..][..spec.size].copy_from_slice(row);
        }
    }
    Ok(Tensor::from_op(vec![c, spec.size, spec.size], out))
}

fn apply_frame(
    img: &Tensor,
    params: &AffineParams,
    crop: Option<&CropSpec>,
) -> Result<Tensor, AugmentError> {
    let work = match crop {
        Some(spec) => resize_shorter_side(img, spec.resize_short)?,
        None => img.clone(),
    };
    let shape = work.shape();
    let m = affine_matrix(params, shape[2], shape[1])?;
    let warped = warp_bilinear(&work, &m, BorderMode::Replicate)?;
    let framed = match crop {
        Some(spec) => crop_square(&warped, spec)?,
        None => warped,
    };
    Ok(framed.clamp01())
}

/// Render a (C,H,W) image through every frame of the trajectory, producing
/// a (T,C,H',W') pseudo-video.
pub fn apply_trajectory(img: &Tensor, traj: &TransformTrajectory) -> Result<Tensor, AugmentError> {
    let mut frames = Vec::with_capacity(traj.frames.len());
    for params in &traj.frames {
        frames.push(apply_frame(img, params, traj.crop.as_ref())?);
    }
    let fs = frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in &frames {
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_op(vec![frames.len(), fs[0], fs[1], fs[2]], data))
}

/// Build an EditTriplet by pushing the original and edited image through
/// the same trajectory (same per-frame transforms, same crop window).
pub fn synth_triplet(
    original: &Tensor,
    edited: &Tensor,
    instruction: &str,
    traj: &TransformTrajectory,
    seed: u64,
) -> Result<EditTriplet, AugmentError> {
    if original.shape() != edited.shape() {
        return Err(AugmentError::DimensionMismatch {
            left: original.shape().to_vec(),
            right: edited.shape().to_vec(),
        });
    }
    let video_in = apply_trajectory(original, traj)?;
    let video_out = apply_trajectory(edited, traj)?;
    EditTriplet::new(video_in, instruction.to_string(), video_out, SourceTag::ImageSynth, seed)
}
