//! Latent codec interface. The production system would wrap a pretrained
//! VAE; at desk scale diffusion runs in pixel space, either raw (identity)
//! or affinely centered.

use crate::numkit::Tensor;

pub trait LatentCodec: Send + Sync {
    fn encode(&self, video: &Tensor) -> Tensor;
    fn decode(&self, latent: &Tensor) -> Tensor;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, video: &Tensor) -> Tensor {
        video.clone()
    }

    fn decode(&self, latent: &Tensor) -> Tensor {
        latent.clone()
    }
}

/// Maps [0, 1] pixels to [-1, 1] latents. Zero-mean latents keep the
/// N(0, 1) sampling init on the training marginal at high noise, and halve
/// decoded pixel error relative to raw pixel space.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenteredCodec;

impl LatentCodec for CenteredCodec {
    fn encode(&self, video: &Tensor) -> Tensor {
        video.map(|v| 2.0 * v - 1.0)
    }

    fn decode(&self, latent: &Tensor) -> Tensor {
        latent.map(|v| (v + 1.0) / 2.0)
    }
}
