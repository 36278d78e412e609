//! Toy video denoiser.
//!
//! Stands in for the full 3D U-Net: a per-frame MLP trunk over flattened
//! frame latents plus sinusoidal time and bag-of-tokens text embeddings,
//! one temporal-mixing layer over the across-frame feature mean, and an
//! affine head back to the frame-latent shape. Small enough to
//! finite-difference, big enough to learn the toy editing tasks.

use crate::numkit::{Rng, Tape, Tensor, Var};

use super::DiffusionError;

/// Trunk/head sizes. `frame_latent` is C*H*W of one latent frame; the model
/// input carries 2C channels (condition latent concatenated with the noisy
/// latent), so the trunk sees 2*frame_latent values per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub frame_latent: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub text_dim: usize,
}

impl DenoiserConfig {
    /// Spec-default sizes: hidden 64, time embedding 16, text embedding 32.
    pub fn with_frame_latent(frame_latent: usize) -> Self {
        DenoiserConfig { frame_latent, hidden: 64, time_dim: 16, text_dim: 32 }
    }

    fn in_dim(&self) -> usize {
        2 * self.frame_latent + self.time_dim + self.text_dim
    }
}

/// Interface the sampler drives. `x` is the channel-concat (F,2C,H,W) of
/// the condition latent and the noisy latent; output must match the noisy
/// latent's (F,C,H,W).
pub trait Denoiser {
    fn predict(&self, x: &Tensor, t: usize, text: &Tensor) -> Result<Tensor, DiffusionError>;
}

pub const PARAM_NAMES: [&str; 10] =
    ["w1", "b1", "w2", "b2", "w3", "b3", "mix_w", "mix_b", "head_w", "head_b"];

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    params: Vec<Tensor>,
}

/// Sinusoidal position features for an integer timestep: (sin, cos) pairs
/// at geometrically spaced frequencies 10000^(-2i/dim).
pub fn time_embedding(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = (10000f64).powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    out
}

fn he_normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| (rng.next_normal() * std) as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

impl DenoiserModel {
    /// He-normal weights, zero biases, drawn from the pinned RNG in
    /// declaration order so a (config, seed) pair is reproducible.
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from(seed);
        let (h, fl) = (config.hidden, config.frame_latent);
        let zeros = |cols: usize| Tensor::zeros(vec![1, cols]).expect("static shape");
        let params = vec![
            he_normal(&mut rng, config.in_dim(), h),
            zeros(h),
            he_normal(&mut rng, h, h),
            zeros(h),
            he_normal(&mut rng, h, h),
            zeros(h),
            he_normal(&mut rng, h, h),
            zeros(h),
            he_normal(&mut rng, h, fl),
            zeros(fl),
        ];
        DenoiserModel { config, params }
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<Tensor>) -> Result<Self, DiffusionError> {
        let expect = Self::init(config, 0);
        if params.len() != expect.params.len() {
            return Err(DiffusionError::BadInput(format!(
                "expected {} parameter tensors, got {}",
                expect.params.len(),
                params.len()
            )));
        }
        for (i, (got, want)) in params.iter().zip(&expect.params).enumerate() {
            if got.shape() != want.shape() {
                return Err(DiffusionError::BadInput(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    PARAM_NAMES[i],
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(DenoiserModel { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    fn validate_input(&self, x: &Tensor, text: &Tensor) -> Result<(usize, usize), DiffusionError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] % 2 != 0 {
            return Err(DiffusionError::BadInput(format!(
                "denoiser input must be (F,2C,H,W), got {shape:?}"
            )));
        }
        let per_frame = shape[1] * shape[2] * shape[3];
        if per_frame != 2 * self.config.frame_latent {
            return Err(DiffusionError::BadInput(format!(
                "per-frame input size {per_frame} != 2 * frame_latent {}",
                self.config.frame_latent
            )));
        }
        if text.numel() != self.config.text_dim {
            return Err(DiffusionError::BadInput(format!(
                "text embedding size {} != {}",
                text.numel(),
                self.config.text_dim
            )));
        }
        Ok((shape[0], per_frame))
    }

    /// Record the forward pass on `tape`. Returns the flat (F, frame_latent)
    /// output var and the param vars in PARAM_NAMES order for gradient
    /// extraction.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        t: usize,
        text: &Tensor,
    ) -> Result<(Var, Vec<Var>), DiffusionError> {
        let (frames, per_frame) = self.validate_input(x, text)?;
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.shape()[0], p.shape()[1], p.data()))
            .collect();

        let xv = tape.input(frames, per_frame, x.data());
        let temb = time_embedding(t, self.config.time_dim);
        let trows: Vec<f32> = temb.iter().copied().cycle().take(frames * temb.len()).collect();
        let tv = tape.input(frames, self.config.time_dim, &trows);
        let crows: Vec<f32> =
            text.data().iter().copied().cycle().take(frames * text.numel()).collect();
        let cv = tape.input(frames, self.config.text_dim, &crows);

        let wide = tape.concat_cols(xv, tv);
        let wide = tape.concat_cols(wide, cv);
        let h = tape.affine(wide, pv[0], pv[1]);
        let h = tape.silu(h);
        let h = tape.affine(h, pv[2], pv[3]);
        let h = tape.silu(h);
        let h = tape.affine(h, pv[4], pv[5]);
        let h = tape.silu(h);
        // Temporal mixing: an affine map of the across-frame feature mean,
        // broadcast back onto every frame.
        let m = tape.mean_rows(h);
        let mx = tape.affine(m, pv[6], pv[7]);
        let h = tape.add_row(h, mx);
        let out = tape.affine(h, pv[8], pv[9]);
        Ok((out, pv))
    }
}

impl Denoiser for DenoiserModel {
    fn predict(&self, x: &Tensor, t: usize, text: &Tensor) -> Result<Tensor, DiffusionError> {
        let shape = x.shape().to_vec();
        let mut tape = Tape::new();
        let (out, _) = self.forward_on_tape(&mut tape, x, t, text)?;
        let data = tape.value(out).to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFiniteOutput);
        }
        let out_shape = vec![shape[0], shape[1] / 2, shape[2], shape[3]];
        Ok(Tensor::new(out_shape, data).expect("finite, sized output"))
    }
}
