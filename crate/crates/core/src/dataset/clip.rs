//! Fixed-length clip extraction at multiple temporal strides.
//!
//! Source material arrives at one nominal rate; training clips are taken at
//! strides (default {1,2,3}) so the model sees several temporal scales, the
//! stand-in for sampling source videos at different frame rates.

use thiserror::Error;

use crate::augment::EditTriplet;
use crate::numkit::{Rng, Tensor};

pub const DEFAULT_CLIP_LEN: usize = 8;
pub const DEFAULT_STRIDES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("clip out of bounds: start {start} + (len {clip_len} - 1) * stride {stride} >= {n_frames} frames")]
    OutOfBounds { start: usize, clip_len: usize, stride: usize, n_frames: usize },
    #[error("no stride in {strides:?} fits {n_frames} frames at clip length {clip_len}")]
    NoFittingStride { strides: Vec<usize>, n_frames: usize, clip_len: usize },
    #[error("invalid clip spec: {0}")]
    Invalid(String),
}

/// A concrete clip selection plus the stride menu it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSpec {
    pub clip_len: usize,
    pub strides: Vec<usize>,
    pub start: usize,
    pub stride: usize,
}

impl ClipSpec {
    pub fn new(
        clip_len: usize,
        strides: Vec<usize>,
        start: usize,
        stride: usize,
    ) -> Result<Self, ClipError> {
        if clip_len < 1 || stride < 1 || strides.iter().any(|&s| s < 1) {
            return Err(ClipError::Invalid("lengths and strides must be >= 1".into()));
        }
        Ok(ClipSpec { clip_len, strides, start, stride })
    }

    fn last_frame(&self) -> usize {
        self.start + (self.clip_len - 1) * self.stride
    }

    pub fn check_fits(&self, n_frames: usize) -> Result<(), ClipError> {
        if self.last_frame() >= n_frames {
            return Err(ClipError::OutOfBounds {
                start: self.start,
                clip_len: self.clip_len,
                stride: self.stride,
                n_frames,
            });
        }
        Ok(())
    }
}

/// Draw (stride, start) uniformly among choices that fit. Draw order is
/// pinned: stride first, then start.
pub fn sample_clip_spec(
    rng: &mut Rng,
    n_frames: usize,
    clip_len: usize,
    strides: &[usize],
) -> Result<ClipSpec, ClipError> {
    let fitting: Vec<usize> = strides
        .iter()
        .copied()
        .filter(|&s| s >= 1 && (clip_len - 1) * s < n_frames)
        .collect();
    if clip_len < 1 || fitting.is_empty() {
        return Err(ClipError::NoFittingStride {
            strides: strides.to_vec(),
            n_frames,
            clip_len,
        });
    }
    let stride = fitting[rng.below(fitting.len() as u64) as usize];
    let max_start = n_frames - (clip_len - 1) * stride;
    let start = rng.below(max_start as u64) as usize;
    ClipSpec::new(clip_len, strides.to_vec(), start, stride)
}

/// Select frames start, start+stride, ... from an (N,C,H,W) video.
pub fn extract_clip(video: &Tensor, spec: &ClipSpec) -> Result<Tensor, ClipError> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(ClipError::Invalid(format!("expected rank-4 video, got {shape:?}")));
    }
    spec.check_fits(shape[0])?;
    let frame_len = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(spec.clip_len * frame_len);
    for i in 0..spec.clip_len {
        let f = spec.start + i * spec.stride;
        data.extend_from_slice(&video.data()[f * frame_len..(f + 1) * frame_len]);
    }
    Ok(Tensor::new(vec![spec.clip_len, shape[1], shape[2], shape[3]], data)
        .expect("clip slice of valid video"))
}

/// Clip both videos of a triplet with the same (start, stride), preserving
/// the pairing that makes the record a valid training example.
pub fn extract_triplet_clip(t: &EditTriplet, spec: &ClipSpec) -> Result<EditTriplet, ClipError> {
    Ok(EditTriplet {
        video_in: extract_clip(&t.video_in, spec)?,
        video_out: extract_clip(&t.video_out, spec)?,
        instruction: t.instruction.clone(),
        source_tag: t.source_tag,
        seed: t.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::SourceTag;

    fn counting_video(n: usize) -> Tensor {
        // Frame f is the constant f/n, so selections are readable.
        let data: Vec<f32> = (0..n).flat_map(|f| vec![f as f32 / n as f32; 4]).collect();
        Tensor::new(vec![n, 1, 2, 2], data).unwrap()
    }

    #[test]
    fn identity_selection() {
        let v = counting_video(8);
        let spec = ClipSpec::new(8, vec![1], 0, 1).unwrap();
        assert_eq!(extract_clip(&v, &spec).unwrap(), v);
    }

    #[test]
    fn stride_three_selection() {
        let v = counting_video(24);
        let spec = ClipSpec::new(8, vec![3], 0, 3).unwrap();
        let clip = extract_clip(&v, &spec).unwrap();
        for (i, f) in [0, 3, 6, 9, 12, 15, 18, 21].iter().enumerate() {
            assert_eq!(clip.data()[i * 4], *f as f32 / 24.0);
        }
    }

    #[test]
    fn too_short_source_errors() {
        let v = counting_video(7);
        let spec = ClipSpec::new(8, vec![1], 0, 1).unwrap();
        assert!(matches!(extract_clip(&v, &spec), Err(ClipError::OutOfBounds { .. })));
    }

    #[test]
    fn sampled_specs_always_fit() {
        let mut rng = Rng::seed_from(4);
        for n_frames in 8..40 {
            for _ in 0..50 {
                let spec =
                    sample_clip_spec(&mut rng, n_frames, DEFAULT_CLIP_LEN, &DEFAULT_STRIDES)
                        .unwrap();
                spec.check_fits(n_frames).unwrap();
                assert!(DEFAULT_STRIDES.contains(&spec.stride));
            }
        }
    }

    #[test]
    fn no_fitting_stride_errors() {
        let mut rng = Rng::seed_from(4);
        assert!(matches!(
            sample_clip_spec(&mut rng, 7, 8, &DEFAULT_STRIDES),
            Err(ClipError::NoFittingStride { .. })
        ));
    }

    #[test]
    fn triplet_clip_shares_selection() {
        let vin = counting_video(16);
        let vout = vin.map(|v| 1.0 - v);
        let t = EditTriplet::new(vin, "invert".into(), vout, SourceTag::ImageSynth, 1).unwrap();
        let spec = ClipSpec::new(4, vec![2], 3, 2).unwrap();
        let clipped = extract_triplet_clip(&t, &spec).unwrap();
        assert_eq!(clipped.video_in.shape(), &[4, 1, 2, 2]);
        for (a, b) in clipped.video_in.data().iter().zip(clipped.video_out.data()) {
            assert!((a + b - 1.0).abs() < 1e-6, "pairing broken: {a} vs {b}");
        }
    }
}
