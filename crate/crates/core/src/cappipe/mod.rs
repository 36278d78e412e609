//! Open-world data workflow: caption keyframes and the whole clip,
//! consolidate into a summary, turn the summary into an edit instruction,
//! and apply an editor backend to produce an [`EditTriplet`].
//!
//! Every neural stage is an interface. HTTP-backed clients talk to
//! external services; deterministic mocks and a reference editor make the
//! whole path runnable offline.

pub mod backends;
pub mod http;
pub mod mock;
pub mod testserver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, EditTriplet, SourceTag};
use crate::numkit::{Tensor, TensorError};

use backends::{EditorBackend, FrameCaptioner, InstructionBackend, Summarizer, VideoCaptioner};

pub use http::{HttpEditor, ServiceClient};
pub use mock::{apply_keyword_edit, StubEditor};

pub const KEYFRAMES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FrameCaption,
    VideoCaption,
    Summary,
    Instruction,
    Editor,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::FrameCaption => "frame-captioner",
            Stage::VideoCaption => "video-captioner",
            Stage::Summary => "summarizer",
            Stage::Instruction => "instruction-generator",
            Stage::Editor => "editor",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: backend unavailable after {attempts} attempts: {detail}")]
    Unavailable { stage: Stage, attempts: u32, detail: String },
    #[error("{stage}: malformed response: {detail}")]
    Malformed { stage: Stage, detail: String },
    #[error("pipeline configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Triplet(#[from] AugmentError),
}

/// Connection policy for one backend. `max_retries` is the total attempt
/// budget; waits double from `backoff_start_ms` between attempts.
#[derive(Debug, Clone)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_start_ms: u64,
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        BackendEndpoint {
            base_url: base_url.into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_start_ms: 500,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.base_url.is_empty() {
            return Err(PipelineError::Config("endpoint URL is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(PipelineError::Config("endpoint timeout must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(PipelineError::Config("endpoint needs at least one attempt".into()));
        }
        Ok(())
    }
}

/// Four keyframe captions, the whole-clip caption, and their consolidated
/// summary; all non-empty after a successful run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionBundle {
    pub keyframe_captions: [String; KEYFRAMES],
    pub video_caption: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionResult {
    pub instruction: String,
    pub edited_caption: String,
}

/// One worked example for the instruction generator's prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub caption: String,
    pub instruction: String,
    pub edited_caption: String,
}

/// The bundled example set shipped with the repo.
pub fn default_few_shot() -> Vec<FewShotExample> {
    serde_json::from_str(include_str!("../../data/few_shot.json"))
        .expect("bundled few-shot examples parse")
}

/// Endpoint-inclusive even spacing: round(i*(n-1)/(k-1)). Needs n >= k so
/// the rounded indices stay distinct.
pub fn keyframe_indices(n_frames: usize, k: usize) -> Result<Vec<usize>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::BadInput("need at least one keyframe".into()));
    }
    if n_frames < k {
        return Err(PipelineError::BadInput(format!(
            "cannot pick {k} keyframes from {n_frames} frames"
        )));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    Ok((0..k)
        .map(|i| ((i * (n_frames - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

fn require_video(video: &Tensor) -> Result<(usize, usize), PipelineError> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(PipelineError::BadInput(format!("expected (T,C,H,W) video, got {shape:?}")));
    }
    Ok((shape[0], shape[1] * shape[2] * shape[3]))
}

pub(crate) fn frame_at(video: &Tensor, index: usize) -> Tensor {
    let shape = video.shape();
    let chw = shape[1] * shape[2] * shape[3];
    Tensor::new(
        vec![shape[1], shape[2], shape[3]],
        video.data()[index * chw..(index + 1) * chw].to_vec(),
    )
    .expect("frame slice")
}

fn non_empty(stage: Stage, what: &str, text: String) -> Result<String, PipelineError> {
    if text.trim().is_empty() {
        return Err(PipelineError::Malformed { stage, detail: format!("empty {what}") });
    }
    Ok(text)
}

/// Caption the four keyframes and the whole clip, then consolidate all
/// five captions into a summary.
pub fn compose_caption(
    frame_captioner: &dyn FrameCaptioner,
    video_captioner: &dyn VideoCaptioner,
    summarizer: &dyn Summarizer,
    video: &Tensor,
) -> Result<CaptionBundle, PipelineError> {
    let (n_frames, _) = require_video(video)?;
    let indices = keyframe_indices(n_frames, KEYFRAMES)?;

    let mut captions = Vec::with_capacity(KEYFRAMES + 1);
    for &i in &indices {
        let text = frame_captioner.caption_frame(&frame_at(video, i))?;
        captions.push(non_empty(Stage::FrameCaption, "keyframe caption", text)?);
    }
    let video_caption =
        non_empty(Stage::VideoCaption, "video caption", video_captioner.caption_video(video)?)?;
    captions.push(video_caption.clone());

    let summary = non_empty(Stage::Summary, "summary", summarizer.summarize(&captions)?)?;
    let keyframe_captions: [String; KEYFRAMES] =
        captions[..KEYFRAMES].to_vec().try_into().expect("exactly four keyframe captions");
    Ok(CaptionBundle { keyframe_captions, video_caption, summary })
}

/// Ask the instruction backend for an edit instruction plus the caption of
/// the edited result, guided by the few-shot examples.
pub fn gen_instruction(
    backend: &dyn InstructionBackend,
    caption: &str,
    few_shot: &[FewShotExample],
) -> Result<InstructionResult, PipelineError> {
    if few_shot.is_empty() {
        return Err(PipelineError::BadInput("few_shot examples must be non-empty".into()));
    }
    let r = backend.instruct(caption, few_shot)?;
    Ok(InstructionResult {
        instruction: non_empty(Stage::Instruction, "instruction", r.instruction)?,
        edited_caption: non_empty(Stage::Instruction, "edited caption", r.edited_caption)?,
    })
}

/// All caption-side stage handles plus the few-shot prompt material; the
/// editor backend stays separate so the same captions can drive different
/// editors.
pub struct PipelineClients {
    pub frame_captioner: Box<dyn FrameCaptioner>,
    pub video_captioner: Box<dyn VideoCaptioner>,
    pub summarizer: Box<dyn Summarizer>,
    pub instruction: Box<dyn InstructionBackend>,
    pub few_shot: Vec<FewShotExample>,
}

impl PipelineClients {
    /// Deterministic in-process backends; no network involved.
    pub fn mock() -> Self {
        PipelineClients {
            frame_captioner: Box::new(mock::MockFrameCaptioner),
            video_captioner: Box::new(mock::MockVideoCaptioner),
            summarizer: Box::new(mock::MockSummarizer),
            instruction: Box::new(mock::MockInstructionBackend),
            few_shot: default_few_shot(),
        }
    }

    /// HTTP backends from the EVD_*_URL environment variables.
    pub fn from_env() -> Result<Self, PipelineError> {
        Ok(PipelineClients {
            frame_captioner: Box::new(http::HttpFrameCaptioner::from_env()?),
            video_captioner: Box::new(http::HttpVideoCaptioner::from_env()?),
            summarizer: Box::new(http::HttpSummarizer::from_env()?),
            instruction: Box::new(http::HttpInstructionBackend::from_env()?),
            few_shot: default_few_shot(),
        })
    }
}

/// Full per-video pipeline: captions, summary, instruction, edit. The seed
/// is recorded on the triplet for provenance; the pipeline itself is
/// deterministic given its inputs.
pub fn build_openworld_triplet(
    clients: &PipelineClients,
    editor: &dyn EditorBackend,
    video: &Tensor,
    seed: u64,
) -> Result<EditTriplet, PipelineError> {
    let (n_frames, _) = require_video(video)?;
    if n_frames < KEYFRAMES {
        return Err(PipelineError::BadInput(format!(
            "need at least {KEYFRAMES} frames, got {n_frames}"
        )));
    }
    let bundle = compose_caption(
        &*clients.frame_captioner,
        &*clients.video_captioner,
        &*clients.summarizer,
        video,
    )?;
    let inst = gen_instruction(&*clients.instruction, &bundle.summary, &clients.few_shot)?;
    let edited = editor.edit(video, &inst.instruction, &inst.edited_caption)?;
    if edited.shape() != video.shape() {
        return Err(PipelineError::Malformed {
            stage: Stage::Editor,
            detail: format!(
                "edited video shape {:?} does not match input {:?}",
                edited.shape(),
                video.shape()
            ),
        });
    }
    Ok(EditTriplet::new(
        video.clone(),
        inst.instruction,
        edited,
        SourceTag::Openworld,
        seed,
    )?)
}
