//! Deterministic in-process backends: captions derived from pixel
//! statistics, instructions chosen by caption hash, and a reference editor
//! applying global color transforms keyed on instruction words. Identical
//! inputs always produce identical outputs, so pipeline runs are
//! reproducible without any network.

use crate::diffusion::embed::fnv1a;
use crate::numkit::Tensor;

use super::backends::{
    EditorBackend, FrameCaptioner, InstructionBackend, Summarizer, VideoCaptioner,
};
use super::{FewShotExample, InstructionResult, PipelineError};

fn mean_of(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
}

pub struct MockFrameCaptioner;

impl FrameCaptioner for MockFrameCaptioner {
    fn caption_frame(&self, frame: &Tensor) -> Result<String, PipelineError> {
        Ok(format!("a frame with mean brightness {:.3}", mean_of(frame)))
    }
}

pub struct MockVideoCaptioner;

impl VideoCaptioner for MockVideoCaptioner {
    fn caption_video(&self, video: &Tensor) -> Result<String, PipelineError> {
        Ok(format!(
            "a clip of {} frames with mean brightness {:.3}",
            video.shape()[0],
            mean_of(video)
        ))
    }
}

pub struct MockSummarizer;

impl Summarizer for MockSummarizer {
    fn summarize(&self, captions: &[String]) -> Result<String, PipelineError> {
        Ok(format!("summary: {}", captions.join("; ")))
    }
}

/// Instruction and edited-caption templates; the caption hash picks one, so
/// different clips spread across all four edits.
const EDIT_TEMPLATES: [(&str, &str); 4] = [
    ("invert the colors", "with colors inverted"),
    ("brighten the scene", "brightened"),
    ("darken the scene", "darkened"),
    ("convert to grayscale", "in grayscale"),
];

pub struct MockInstructionBackend;

impl InstructionBackend for MockInstructionBackend {
    fn instruct(
        &self,
        caption: &str,
        _few_shot: &[FewShotExample],
    ) -> Result<InstructionResult, PipelineError> {
        let (instruction, suffix) =
            EDIT_TEMPLATES[(fnv1a(caption.as_bytes()) % EDIT_TEMPLATES.len() as u64) as usize];
        Ok(InstructionResult {
            instruction: instruction.to_string(),
            edited_caption: format!("{caption}, {suffix}"),
        })
    }
}

/// Reference editor: a global color transform selected by instruction
/// keyword. Unknown instructions pass the video through unchanged.
pub struct StubEditor {
    /// Additive brightness step for brighten/darken.
    pub strength: f32,
}

impl Default for StubEditor {
    fn default() -> Self {
        StubEditor { strength: 0.3 }
    }
}

impl EditorBackend for StubEditor {
    fn edit(
        &self,
        video: &Tensor,
        instruction: &str,
        _edited_caption: &str,
    ) -> Result<Tensor, PipelineError> {
        Ok(apply_keyword_edit(video, instruction, self.strength))
    }
}

/// The stub editor's transform table, usable directly when building
/// expected outputs in tests.
pub fn apply_keyword_edit(video: &Tensor, instruction: &str, strength: f32) -> Tensor {
    let inst = instruction.to_lowercase();
    if inst.contains("invert") {
        video.map(|v| 1.0 - v)
    } else if inst.contains("brighten") {
        video.map(|v| (v + strength).clamp(0.0, 1.0))
    } else if inst.contains("darken") {
        video.map(|v| (v - strength).clamp(0.0, 1.0))
    } else if inst.contains("grayscale") || inst.contains("black and white") {
        gray_out(video)
    } else {
        log::debug!("no editor keyword in {instruction:?}, passing video through");
        video.clone()
    }
}

fn gray_out(video: &Tensor) -> Tensor {
    let shape = video.shape();
    assert_eq!(shape.len(), 4, "expected rank-4 (T,C,H,W)");
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut data = video.data().to_vec();
    for f in 0..t {
        let base = f * c * plane;
        for p in 0..plane {
            let mut s = 0.0f32;
            for ch in 0..c {
                s += video.data()[base + ch * plane + p];
            }
            let g = s / c as f32;
            for ch in 0..c {
                data[base + ch * plane + p] = g;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("same shape")
}
