//! Dense row-major f32 tensors.
//!
//! Values are kept finite: constructors that accept raw data reject NaN/Inf
//! outright, while derived ops re-screen their output only in debug builds.

use thiserror::Error;

use super::rng::Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("no gradient present; run a backward pass first")]
    MissingGrad,
    #[error("non-finite gradient at flat index {index}")]
    NonFiniteGrad { index: usize },
}

/// Dense N-dimensional f32 array. Videos use shape (frames, channels, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

fn validate_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape { shape: shape.to_vec(), reason: "empty shape" });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-size dimension",
        });
    }
    Ok(shape.iter().product())
}

fn first_non_finite(data: &[f32]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl Tensor {
    /// Build from raw data. Rejects shape/data length mismatch and any
    /// non-finite value.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "data length does not match shape product",
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Internal constructor for op outputs; finiteness screened in debug only.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            first_non_finite(&data).is_none(),
            "op produced non-finite output"
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        Ok(Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None })
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { index: 0 });
        }
        Ok(Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None })
    }

    /// I.i.d. standard-normal samples. Identical (shape, seed) pairs yield
    /// bit-identical tensors; see [`super::rng`] for the pinned generator.
    pub fn randn(shape: Vec<usize>, seed: u64) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        let mut rng = Rng::seed_from(seed);
        let data = (0..numel).map(|_| rng.next_normal_f32()).collect();
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// I.i.d. uniform samples in [0, 1).
    pub fn rand_uniform(shape: Vec<usize>, seed: u64) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        let mut rng = Rng::seed_from(seed);
        let data = (0..numel).map(|_| rng.next_f64() as f32).collect();
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Add into the stored gradient. Repeated backward passes accumulate
    /// until [`Tensor::zero_grad`] is called.
    pub fn accumulate_grad(&mut self, grad: &[f32]) {
        assert_eq!(grad.len(), self.data.len(), "gradient shape mismatch");
        match &mut self.grad {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn scale_grad(&mut self, factor: f32) {
        if let Some(g) = &mut self.grad {
            for gi in g.iter_mut() {
                *gi *= factor;
            }
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel = validate_shape(&shape)?;
        if numel != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "reshape changes element count",
            });
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: false, grad: None })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor::from_op(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// a*x + b*y elementwise; the workhorse behind the diffusion arithmetic.
pub fn lin_comb(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor, TensorError> {
    x.zip(y, |xi, yi| a * xi + b * yi)
}

/// Mean squared difference of two same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch { left: a.shape.clone(), right: b.shape.clone() });
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok((sum / a.numel() as f64) as f32)
}

/// Stack `b`'s channels after `a`'s, per frame: (F,C1,H,W) + (F,C2,H,W) ->
/// (F,C1+C2,H,W).
pub fn channel_concat(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 {
        return Err(TensorError::InvalidShape {
            shape: if sa.len() != 4 { sa.to_vec() } else { sb.to_vec() },
            reason: "channel_concat expects rank-4 (F,C,H,W)",
        });
    }
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(TensorError::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
    }
    let (frames, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut data = Vec::with_capacity((c1 + c2) * hw * frames);
    for f in 0..frames {
        data.extend_from_slice(&a.data[f * c1 * hw..(f + 1) * c1 * hw]);
        data.extend_from_slice(&b.data[f * c2 * hw..(f + 1) * c2 * hw]);
    }
    Ok(Tensor::from_op(vec![frames, c1 + c2, sa[2], sa[3]], data))
}

/// Per-frame channel slice [lo, hi) of a (F,C,H,W) tensor.
pub fn slice_channels(t: &Tensor, lo: usize, hi: usize) -> Result<Tensor, TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            shape: s.to_vec(),
            reason: "slice_channels expects rank-4 (F,C,H,W)",
        });
    }
    if lo >= hi || hi > s[1] {
        return Err(TensorError::InvalidShape {
            shape: s.to_vec(),
            reason: "channel range out of bounds",
        });
    }
    let (frames, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(frames * (hi - lo) * hw);
    for f in 0..frames {
        data.extend_from_slice(&t.data[(f * c + lo) * hw..(f * c + hi) * hw]);
    }
    Ok(Tensor::from_op(vec![frames, hi - lo, s[2], s[3]], data))
}
