//! HTTP-backed stage clients.
//!
//! Wire protocol: POST a JSON body {"task": ..., "inputs": ...} to the
//! endpoint URL; successful responses carry {"output": ...}. Images travel
//! as base64-encoded PNG. Transport failures and non-2xx statuses are
//! retried per the endpoint policy; malformed bodies are not retried.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};

use crate::augment::imgio::{decode_png, encode_png};
use crate::numkit::Tensor;

use super::backends::{
    EditorBackend, FrameCaptioner, InstructionBackend, Summarizer, VideoCaptioner,
};
use super::{frame_at, BackendEndpoint, FewShotExample, InstructionResult, PipelineError, Stage};

pub const ENV_CAPTION_URL: &str = "EVD_CAPTION_URL";
pub const ENV_VIDEO_CAPTION_URL: &str = "EVD_VIDEO_CAPTION_URL";
pub const ENV_SUMMARY_URL: &str = "EVD_SUMMARY_URL";
pub const ENV_INSTRUCT_URL: &str = "EVD_INSTRUCT_URL";
pub const ENV_EDITOR_URL: &str = "EVD_EDITOR_URL";

fn endpoint_from_env(var: &'static str) -> Result<BackendEndpoint, PipelineError> {
    match std::env::var(var) {
        Ok(url) if !url.is_empty() => Ok(BackendEndpoint::new(url)),
        _ => Err(PipelineError::Config(format!("{var} is not set"))),
    }
}

/// One backend connection: owns the agent and applies the retry policy.
pub struct ServiceClient {
    stage: Stage,
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
}

impl ServiceClient {
    pub fn new(stage: Stage, endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        endpoint.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build();
        Ok(ServiceClient { stage, endpoint, agent })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// POST the task envelope and unwrap the response's output field.
    pub fn call(&self, task: &str, inputs: Value) -> Result<Value, PipelineError> {
        let body = json!({ "task": task, "inputs": inputs });
        let mut delay = Duration::from_millis(self.endpoint.backoff_start_ms);
        let mut last = String::new();
        for attempt in 1..=self.endpoint.max_retries {
            match self.agent.post(&self.endpoint.base_url).send_json(&body) {
                Ok(resp) => {
                    let v: Value = resp.into_json().map_err(|e| PipelineError::Malformed {
                        stage: self.stage,
                        detail: format!("response is not JSON: {e}"),
                    })?;
                    return v.get("output").cloned().ok_or_else(|| PipelineError::Malformed {
                        stage: self.stage,
                        detail: "response lacks an output field".into(),
                    });
                }
                Err(e) => {
                    last = match &e {
                        ureq::Error::Status(code, _) => format!("http status {code}"),
                        ureq::Error::Transport(t) => t.to_string(),
                    };
                    log::warn!(
                        "{}: attempt {attempt}/{} failed: {last}",
                        self.stage,
                        self.endpoint.max_retries
                    );
                    if attempt < self.endpoint.max_retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(PipelineError::Unavailable {
            stage: self.stage,
            attempts: self.endpoint.max_retries,
            detail: last,
        })
    }
}

fn png_b64(stage: Stage, frame: &Tensor) -> Result<String, PipelineError> {
    let bytes = encode_png(frame)
        .map_err(|e| PipelineError::BadInput(format!("{stage}: frame encode: {e}")))?;
    Ok(B64.encode(bytes))
}

fn video_b64(stage: Stage, video: &Tensor) -> Result<Vec<String>, PipelineError> {
    (0..video.shape()[0]).map(|i| png_b64(stage, &frame_at(video, i))).collect()
}

fn expect_string(stage: Stage, v: Value) -> Result<String, PipelineError> {
    v.as_str().map(str::to_string).ok_or_else(|| PipelineError::Malformed {
        stage,
        detail: "output is not a string".into(),
    })
}

fn expect_field(stage: Stage, v: &Value, field: &str) -> Result<String, PipelineError> {
    v.get(field).and_then(Value::as_str).map(str::to_string).ok_or_else(|| {
        PipelineError::Malformed { stage, detail: format!("response missing {field}") }
    })
}

pub struct HttpFrameCaptioner {
    client: ServiceClient,
}

impl HttpFrameCaptioner {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        Ok(HttpFrameCaptioner { client: ServiceClient::new(Stage::FrameCaption, endpoint)? })
    }

    pub fn from_env() -> Result<Self, PipelineError> {
        Self::new(endpoint_from_env(ENV_CAPTION_URL)?)
    }
}

impl FrameCaptioner for HttpFrameCaptioner {
    fn caption_frame(&self, frame: &Tensor) -> Result<String, PipelineError> {
        let out = self
            .client
            .call("caption-frame", json!({ "image": png_b64(Stage::FrameCaption, frame)? }))?;
        expect_string(Stage::FrameCaption, out)
    }
}

pub struct HttpVideoCaptioner {
    client: ServiceClient,
}

impl HttpVideoCaptioner {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        Ok(HttpVideoCaptioner { client: ServiceClient::new(Stage::VideoCaption, endpoint)? })
    }

    pub fn from_env() -> Result<Self, PipelineError> {
        Self::new(endpoint_from_env(ENV_VIDEO_CAPTION_URL)?)
    }
}

impl VideoCaptioner for HttpVideoCaptioner {
    fn caption_video(&self, video: &Tensor) -> Result<String, PipelineError> {
        let out = self
            .client
            .call("caption-video", json!({ "frames": video_b64(Stage::VideoCaption, video)? }))?;
        expect_string(Stage::VideoCaption, out)
    }
}

pub struct HttpSummarizer {
    client: ServiceClient,
}

impl HttpSummarizer {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        Ok(HttpSummarizer { client: ServiceClient::new(Stage::Summary, endpoint)? })
    }

    pub fn from_env() -> Result<Self, PipelineError> {
        Self::new(endpoint_from_env(ENV_SUMMARY_URL)?)
    }
}

impl Summarizer for HttpSummarizer {
    fn summarize(&self, captions: &[String]) -> Result<String, PipelineError> {
        let out = self.client.call("summarize", json!({ "captions": captions }))?;
        expect_string(Stage::Summary, out)
    }
}

pub struct HttpInstructionBackend {
    client: ServiceClient,
}

impl HttpInstructionBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        Ok(HttpInstructionBackend { client: ServiceClient::new(Stage::Instruction, endpoint)? })
    }

    pub fn from_env() -> Result<Self, PipelineError> {
        Self::new(endpoint_from_env(ENV_INSTRUCT_URL)?)
    }
}

impl InstructionBackend for HttpInstructionBackend {
    fn instruct(
        &self,
        caption: &str,
        few_shot: &[FewShotExample],
    ) -> Result<InstructionResult, PipelineError> {
        let out = self
            .client
            .call("instruct", json!({ "caption": caption, "few_shot": few_shot }))?;
        Ok(InstructionResult {
            instruction: expect_field(Stage::Instruction, &out, "instruction")?,
            edited_caption: expect_field(Stage::Instruction, &out, "edited_caption")?,
        })
    }
}

pub struct HttpEditor {
    client: ServiceClient,
}

impl HttpEditor {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, PipelineError> {
        Ok(HttpEditor { client: ServiceClient::new(Stage::Editor, endpoint)? })
    }

    pub fn from_env() -> Result<Self, PipelineError> {
        Self::new(endpoint_from_env(ENV_EDITOR_URL)?)
    }
}

impl EditorBackend for HttpEditor {
    fn edit(
        &self,
        video: &Tensor,
        instruction: &str,
        edited_caption: &str,
    ) -> Result<Tensor, PipelineError> {
        let out = self.client.call(
            "edit-video",
            json!({
                "frames": video_b64(Stage::Editor, video)?,
                "instruction": instruction,
                "edited_caption": edited_caption,
            }),
        )?;
        let malformed = |detail: String| PipelineError::Malformed { stage: Stage::Editor, detail };
        let frames = out
            .get("frames")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("response missing frames array".into()))?;
        if frames.len() != video.shape()[0] {
            return Err(malformed(format!(
                "editor returned {} frames for a {}-frame video",
                frames.len(),
                video.shape()[0]
            )));
        }
        let mut data = Vec::new();
        let mut frame_shape: Option<Vec<usize>> = None;
        for (i, f) in frames.iter().enumerate() {
            let b64 = f.as_str().ok_or_else(|| malformed(format!("frame {i} is not a string")))?;
            let bytes =
                B64.decode(b64).map_err(|e| malformed(format!("frame {i} base64: {e}")))?;
            let t = decode_png(&bytes).map_err(|e| malformed(format!("frame {i} png: {e}")))?;
            match &frame_shape {
                None => frame_shape = Some(t.shape().to_vec()),
                Some(s) if s.as_slice() != t.shape() => {
                    return Err(malformed(format!(
                        "frame {i} shape {:?} differs from {s:?}",
                        t.shape()
                    )));
                }
                _ => {}
            }
            data.extend_from_slice(t.data());
        }
        let fs = frame_shape.expect("at least four frames");
        Ok(Tensor::new(vec![frames.len(), fs[0], fs[1], fs[2]], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cappipe::testserver::{ScriptedResponse, TestServer};

    fn fast(url: String) -> BackendEndpoint {
        BackendEndpoint { backoff_start_ms: 1, ..BackendEndpoint::new(url) }
    }

    #[test]
    fn two_failures_then_success_takes_exactly_three_attempts() {
        let server = TestServer::start(vec![
            ScriptedResponse::failure(500),
            ScriptedResponse::failure(500),
            ScriptedResponse::output(serde_json::json!("a distant shoreline")),
        ])
        .unwrap();
        let captioner = HttpFrameCaptioner::new(fast(server.url())).unwrap();
        let frame = Tensor::rand_uniform(vec![1, 4, 4], 5).unwrap();
        let caption = captioner.caption_frame(&frame).unwrap();
        assert_eq!(caption, "a distant shoreline");
        assert_eq!(server.hits(), 3);
    }

    #[test]
    fn exhausted_retries_name_the_stage() {
        let server = TestServer::start(vec![
            ScriptedResponse::failure(500),
            ScriptedResponse::failure(500),
            ScriptedResponse::failure(500),
        ])
        .unwrap();
        let summarizer = HttpSummarizer::new(fast(server.url())).unwrap();
        let err = summarizer.summarize(&["one".into()]).unwrap_err();
        match &err {
            PipelineError::Unavailable { stage, attempts, .. } => {
                assert_eq!(*stage, Stage::Summary);
                assert_eq!(*attempts, 3);
            }
            other => panic!("expected unavailable, got {other:?}"),
        }
        assert!(err.to_string().contains("summarizer"));
        assert_eq!(server.hits(), 3);
    }

    #[test]
    fn missing_output_field_is_malformed_without_retry() {
        let server =
            TestServer::start(vec![ScriptedResponse::ok(r#"{"data":"x"}"#)]).unwrap();
        let captioner = HttpFrameCaptioner::new(fast(server.url())).unwrap();
        let frame = Tensor::zeros(vec![1, 4, 4]).unwrap();
        let err = captioner.caption_frame(&frame).unwrap_err();
        assert!(matches!(err, PipelineError::Malformed { .. }), "{err:?}");
        assert_eq!(server.hits(), 1);
    }

    #[test]
    fn instruction_response_missing_field_is_malformed() {
        let server = TestServer::start(vec![ScriptedResponse::output(
            serde_json::json!({ "instruction": "turn it blue" }),
        )])
        .unwrap();
        let backend = HttpInstructionBackend::new(fast(server.url())).unwrap();
        let err = backend.instruct("a caption", &crate::cappipe::default_few_shot()).unwrap_err();
        match err {
            PipelineError::Malformed { stage, detail } => {
                assert_eq!(stage, Stage::Instruction);
                assert!(detail.contains("edited_caption"), "{detail}");
            }
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn editor_roundtrips_base64_png_frames() {
        let video = Tensor::rand_uniform(vec![2, 3, 4, 4], 11).unwrap();
        // The scripted editor echoes the input frames back.
        let frames = video_b64(Stage::Editor, &video).unwrap();
        let server = TestServer::start(vec![ScriptedResponse::output(
            serde_json::json!({ "frames": frames }),
        )])
        .unwrap();
        let editor = HttpEditor::new(fast(server.url())).unwrap();
        let out = editor.edit(&video, "keep everything", "the same clip").unwrap();
        assert_eq!(out.shape(), video.shape());
        let quantized: Vec<f32> =
            video.data().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
        assert_eq!(out.data(), quantized.as_slice());
    }

    #[test]
    fn missing_env_var_names_the_variable() {
        std::env::remove_var(ENV_VIDEO_CAPTION_URL);
        let err = match HttpVideoCaptioner::from_env() {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert!(err.to_string().contains(ENV_VIDEO_CAPTION_URL), "{err}");
    }
}
