//! Editing-quality measurement with pluggable frame embedders.
//!
//! The toy embedder stands in for a pretrained image encoder: frames are
//! average-pooled to an 8x8 grayscale grid, mean-centered, and normalized.
//! Frame consistency is the mean cosine similarity over frame pairs.

use serde::Serialize;
use thiserror::Error;

use crate::numkit::{Tensor, TensorError};

pub const EMBED_DIM: usize = 64;
const POOL: usize = 8;

/// Embeddings this far from unit norm indicate a broken embedder rather
/// than float rounding.
const NORM_SLACK: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("embedder {name} returned norm {norm}, expected 1")]
    NotUnitNorm { name: String, norm: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Frame to unit-norm vector of a fixed dimension; constant frames may use
/// a fixed convention vector instead.
pub trait FrameEmbedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, frame: &Tensor) -> Result<Tensor, MetricsError>;
}

/// Pool to an 8x8 grayscale grid, flatten, mean-center, L2-normalize.
/// Constant frames center to exactly zero (all arithmetic is f64), mapped
/// to the convention vector e1.
pub fn toy_embed(frame: &Tensor) -> Result<Tensor, MetricsError> {
    let shape = frame.shape();
    if shape.len() != 3 {
        return Err(MetricsError::BadInput(format!("expected (C,H,W) frame, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < POOL || w < POOL {
        return Err(MetricsError::BadInput(format!("frame {h}x{w} smaller than {POOL}x{POOL}")));
    }

    let gray = |y: usize, x: usize| -> f64 {
        let mut s = 0.0f64;
        for ch in 0..c {
            s += frame.data()[(ch * h + y) * w + x] as f64;
        }
        s / c as f64
    };

    // Adaptive average pooling: bin i covers [floor(i*n/8), ceil((i+1)*n/8)).
    let mut pooled = [0.0f64; EMBED_DIM];
    for by in 0..POOL {
        let (y0, y1) = (by * h / POOL, ((by + 1) * h).div_ceil(POOL));
        for bx in 0..POOL {
            let (x0, x1) = (bx * w / POOL, ((bx + 1) * w).div_ceil(POOL));
            let mut s = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += gray(y, x);
                }
            }
            pooled[by * POOL + bx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }

    let mean = pooled.iter().sum::<f64>() / EMBED_DIM as f64;
    for v in &mut pooled {
        *v -= mean;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = vec![0.0f32; EMBED_DIM];
    if norm < 1e-12 {
        out[0] = 1.0;
    } else {
        for (o, v) in out.iter_mut().zip(&pooled) {
            *o = (v / norm) as f32;
        }
    }
    Ok(Tensor::new(vec![EMBED_DIM], out)?)
}

pub struct ToyEmbedder;

impl FrameEmbedder for ToyEmbedder {
    fn name(&self) -> &str {
        "toy-8x8"
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, frame: &Tensor) -> Result<Tensor, MetricsError> {
        toy_embed(frame)
    }
}

/// Which frame pairs enter the consistency average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// All T*(T-1)/2 unordered pairs.
    AllPairs,
    /// Consecutive frames only.
    Adjacent,
}

/// Mean cosine similarity between frame embeddings over all unordered
/// pairs. Requires at least two frames.
pub fn frame_consistency(video: &Tensor, embedder: &dyn FrameEmbedder) -> Result<f64, MetricsError> {
    frame_consistency_with(video, embedder, PairMode::AllPairs)
}

pub fn frame_consistency_with(
    video: &Tensor,
    embedder: &dyn FrameEmbedder,
    mode: PairMode,
) -> Result<f64, MetricsError> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(MetricsError::BadInput(format!("expected (T,C,H,W) video, got {shape:?}")));
    }
    let t = shape[0];
    if t < 2 {
        return Err(MetricsError::BadInput(format!("need at least 2 frames, got {t}")));
    }
    let frame_shape = vec![shape[1], shape[2], shape[3]];
    let chw: usize = frame_shape.iter().product();

    let mut embs = Vec::with_capacity(t);
    for f in 0..t {
        let frame =
            Tensor::new(frame_shape.clone(), video.data()[f * chw..(f + 1) * chw].to_vec())?;
        let e = embedder.embed(&frame)?;
        let norm = e.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_SLACK {
            return Err(MetricsError::NotUnitNorm { name: embedder.name().to_string(), norm });
        }
        embs.push(e);
    }

    let cosine = |a: &Tensor, b: &Tensor| -> f64 {
        let dot: f64 =
            a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
        dot.clamp(-1.0, 1.0)
    };

    let (mut sum, mut pairs) = (0.0f64, 0usize);
    match mode {
        PairMode::AllPairs => {
            for i in 0..t {
                for j in i + 1..t {
                    sum += cosine(&embs[i], &embs[j]);
                    pairs += 1;
                }
            }
        }
        PairMode::Adjacent => {
            for i in 0..t - 1 {
                sum += cosine(&embs[i], &embs[i + 1]);
                pairs += 1;
            }
        }
    }
    Ok(sum / pairs as f64)
}

/// One JSON-lines metric report row.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub video_id: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(video_id: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        MetricRecord { video_id: video_id.into(), metric: metric.into(), value }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    /// Maps a frame to e1 or e2 depending on its first pixel; unit-norm by
    /// construction, convenient for arranging exact pairwise cosines.
    struct MarkerEmbedder;

    impl FrameEmbedder for MarkerEmbedder {
        fn name(&self) -> &str {
            "marker"
        }

        fn dim(&self) -> usize {
            4
        }

        fn embed(&self, frame: &Tensor) -> Result<Tensor, MetricsError> {
            let mut e = vec![0.0f32; 4];
            if frame.data()[0] < 0.5 {
                e[0] = 1.0;
            } else {
                e[1] = 1.0;
            }
            Ok(Tensor::new(vec![4], e)?)
        }
    }

    fn video_of_markers(markers: &[f32]) -> Tensor {
        let mut data = Vec::new();
        for &m in markers {
            data.extend(std::iter::repeat_n(m, 64));
        }
        Tensor::new(vec![markers.len(), 1, 8, 8], data).unwrap()
    }

    #[test]
    fn identical_frames_score_one() {
        let frame = Tensor::rand_uniform(vec![1, 8, 8], 3).unwrap();
        let mut data = frame.data().to_vec();
        data.extend_from_slice(frame.data());
        data.extend_from_slice(frame.data());
        let video = Tensor::new(vec![3, 1, 8, 8], data).unwrap();
        let v = frame_consistency(&video, &ToyEmbedder).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn three_frames_with_cosines_one_zero_zero_average_a_third() {
        let video = video_of_markers(&[0.0, 0.0, 1.0]);
        let v = frame_consistency(&video, &MarkerEmbedder).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
        // Adjacent mode sees pairs (0,1)=1 and (1,2)=0 instead.
        let adj = frame_consistency_with(&video, &MarkerEmbedder, PairMode::Adjacent).unwrap();
        assert!((adj - 0.5).abs() < 1e-12, "got {adj}");
    }

    #[test]
    fn orthogonal_pair_scores_zero() {
        let video = video_of_markers(&[0.0, 1.0]);
        let v = frame_consistency(&video, &MarkerEmbedder).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn negated_frame_is_antipodal() {
        let frame = Tensor::rand_uniform(vec![3, 16, 16], 9).unwrap();
        let neg = frame.map(|v| 1.0 - v);
        let a = toy_embed(&frame).unwrap();
        let b = toy_embed(&neg).unwrap();
        let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!((dot + 1.0).abs() < 1e-6, "got {dot}");

        let mut data = frame.data().to_vec();
        data.extend_from_slice(neg.data());
        let video = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        let v = frame_consistency(&video, &ToyEmbedder).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn constant_frame_uses_convention_vector() {
        let frame = Tensor::full(vec![1, 8, 8], 0.37).unwrap();
        let e = toy_embed(&frame).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert!(e.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let one_frame = Tensor::zeros(vec![1, 1, 8, 8]).unwrap();
        assert!(frame_consistency(&one_frame, &ToyEmbedder).is_err());
        let small = Tensor::zeros(vec![1, 4, 4]).unwrap();
        assert!(toy_embed(&small).is_err());
    }

    #[test]
    fn non_unit_embedder_is_reported() {
        struct Bad;
        impl FrameEmbedder for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn dim(&self) -> usize {
                2
            }
            fn embed(&self, _: &Tensor) -> Result<Tensor, MetricsError> {
                Ok(Tensor::new(vec![2], vec![2.0, 0.0])?)
            }
        }
        let video = Tensor::zeros(vec![2, 1, 8, 8]).unwrap();
        match frame_consistency(&video, &Bad) {
            Err(MetricsError::NotUnitNorm { name, norm }) => {
                assert_eq!(name, "bad");
                assert!((norm - 2.0).abs() < 1e-9);
            }
            other => panic!("expected norm error, got {other:?}"),
        }
    }

    #[test]
    fn metric_record_json_line() {
        let r = MetricRecord::new("v1", "frame_consistency", 0.5);
        assert_eq!(r.to_json_line(), r#"{"video_id":"v1","metric":"frame_consistency","value":0.5}"#);
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_bounded(seed in 0u64..500, t in 2usize..6) {
            let video = Tensor::rand_uniform(vec![t, 1, 8, 8], seed).unwrap();
            let base = frame_consistency(&video, &ToyEmbedder).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));

            // Fisher-Yates with the pinned RNG, then compare scores.
            let mut order: Vec<usize> = (0..t).collect();
            let mut rng = Rng::seed_from(seed ^ 0xA5A5);
            for i in (1..t).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                order.swap(i, j);
            }
            let mut data = Vec::with_capacity(video.numel());
            for &f in &order {
                data.extend_from_slice(&video.data()[f * 64..(f + 1) * 64]);
            }
            let shuffled = Tensor::new(vec![t, 1, 8, 8], data).unwrap();
            let permuted = frame_consistency(&shuffled, &ToyEmbedder).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9, "{base} vs {permuted}");
        }

        #[test]
        fn toy_embeddings_are_unit_norm(seed in 0u64..500) {
            let frame = Tensor::rand_uniform(vec![3, 9, 13], seed).unwrap();
            let e = toy_embed(&frame).unwrap();
            let norm: f64 = e.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }
}
