//! Stage interfaces for the open-world pipeline. Implementations must be
//! stateless and shareable so per-video pipelines can run concurrently.

use crate::numkit::Tensor;

use super::{FewShotExample, InstructionResult, PipelineError};

/// Captions a single (C,H,W) keyframe.
pub trait FrameCaptioner: Send + Sync {
    fn caption_frame(&self, frame: &Tensor) -> Result<String, PipelineError>;
}

/// Captions a whole (T,C,H,W) clip.
pub trait VideoCaptioner: Send + Sync {
    fn caption_video(&self, video: &Tensor) -> Result<String, PipelineError>;
}

/// Consolidates several captions into one summary.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, captions: &[String]) -> Result<String, PipelineError>;
}

/// Produces an edit instruction and the caption of the edited result.
pub trait InstructionBackend: Send + Sync {
    fn instruct(
        &self,
        caption: &str,
        few_shot: &[FewShotExample],
    ) -> Result<InstructionResult, PipelineError>;
}

/// Applies an instruction to a video; output shape must match the input.
pub trait EditorBackend: Send + Sync {
    fn edit(
        &self,
        video: &Tensor,
        instruction: &str,
        edited_caption: &str,
    ) -> Result<Tensor, PipelineError>;
}
