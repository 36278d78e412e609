//! Condition dropout: randomly null the vision latent and/or the text
//! embedding during training so the guidance branches exist at sampling
//! time. Null vision is the zero latent, null text the zero embedding,
//! matching the sampling-side conventions exactly.

use thiserror::Error;

use crate::numkit::{Rng, Tensor};

#[derive(Debug, Error)]
pub enum DropoutError {
    #[error("invalid dropout policy: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPolicy {
    pub p_drop_text: f64,
    pub p_drop_vision: f64,
    pub p_drop_both: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy { p_drop_text: 0.10, p_drop_vision: 0.10, p_drop_both: 0.05 }
    }
}

impl DropoutPolicy {
    pub const NONE: DropoutPolicy =
        DropoutPolicy { p_drop_text: 0.0, p_drop_vision: 0.0, p_drop_both: 0.0 };

    pub fn validate(&self) -> Result<(), DropoutError> {
        let ps = [self.p_drop_text, self.p_drop_vision, self.p_drop_both];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DropoutError::Invalid("probabilities must be in [0,1]".into()));
        }
        if ps.iter().sum::<f64>() > 1.0 {
            return Err(DropoutError::Invalid("probabilities must sum to <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropLabel {
    KeepBoth,
    /// Text nulled; the model sees vision only.
    VisionOnly,
    /// Vision nulled; the model sees text only.
    TextOnly,
    DropBoth,
}

/// One mutually exclusive outcome from a single uniform draw: the intervals
/// [0, pt), [pt, pt+pv), [pt+pv, pt+pv+pb) select vision-only, text-only,
/// and drop-both respectively.
pub fn drop_conditions(
    seed: u64,
    x_vision: &Tensor,
    c_text: &Tensor,
    policy: &DropoutPolicy,
) -> Result<(Tensor, Tensor, DropLabel), DropoutError> {
    policy.validate()?;
    let u = Rng::seed_from(seed).next_f64();
    let label = if u < policy.p_drop_text {
        DropLabel::VisionOnly
    } else if u < policy.p_drop_text + policy.p_drop_vision {
        DropLabel::TextOnly
    } else if u < policy.p_drop_text + policy.p_drop_vision + policy.p_drop_both {
        DropLabel::DropBoth
    } else {
        DropLabel::KeepBoth
    };
    let null_v = || Tensor::zeros(x_vision.shape().to_vec()).expect("valid shape");
    let null_t = || Tensor::zeros(c_text.shape().to_vec()).expect("valid shape");
    let (x_out, c_out) = match label {
        DropLabel::KeepBoth => (x_vision.clone(), c_text.clone()),
        DropLabel::VisionOnly => (x_vision.clone(), null_t()),
        DropLabel::TextOnly => (null_v(), c_text.clone()),
        DropLabel::DropBoth => (null_v(), null_t()),
    };
    Ok((x_out, c_out, label))
}
