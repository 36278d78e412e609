//! Instruction-conditioned video editing on a desk-scale budget.
//!
//! The crate covers the full loop: synthesizing edit triplets from image
//! pairs and open-world videos, packing them into binary shards, training a
//! toy latent-diffusion denoiser with condition dropout, and sampling edited
//! videos with decoupled classifier-free guidance.

pub mod augment;
pub mod cappipe;
pub mod dataset;
pub mod diffusion;
pub mod metrics;
pub mod numkit;
pub mod schedule;
