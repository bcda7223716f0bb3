//! Deterministic stand-in tools: sine synthesis and an HTTP mock tool server.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::audio::{decode_wav, encode_wav, AudioArtifact, DEFAULT_SAMPLE_RATE};
use crate::mixer::{apply_local_action, PostProcessAction};
use crate::serve::{spawn, wire_error, ServerHandle};
use crate::tools::{GenerationSpec, ToolDescriptor, ToolKind, ToolLibrary};

pub const MOCK_AMPLITUDE: f64 = 0.3;
pub const MOCK_BASE_HZ: u32 = 200;
pub const MOCK_SPAN_HZ: u32 = 1600;

const FNV_OFFSET: u32 = 0x811c_9dc5;
const FNV_PRIME: u32 = 0x0100_0193;

fn fnv1a32(state: u32, bytes: &[u8]) -> u32 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ b as u32).wrapping_mul(FNV_PRIME))
}

/// Tone frequency for a prompt: 200 + (FNV-1a-32 mod 1600) Hz. A nonzero seed is
/// hashed after the prompt bytes as 8 little-endian bytes.
pub fn mock_frequency(prompt: &str, seed: u64) -> u32 {
    let mut h = fnv1a32(FNV_OFFSET, prompt.as_bytes());
    if seed != 0 {
        h = fnv1a32(h, &seed.to_le_bytes());
    }
    MOCK_BASE_HZ + h % MOCK_SPAN_HZ
}

/// 48 kHz mono sine of `round(duration_s * 48000)` frames at amplitude 0.3.
pub fn mock_synthesize(prompt: &str, duration_s: f64, seed: u64) -> AudioArtifact {
    let rate = DEFAULT_SAMPLE_RATE;
    let frames = (duration_s.max(0.0) * rate as f64).round() as usize;
    let f = mock_frequency(prompt, seed) as f64;
    let samples = (0..frames)
        .map(|n| (MOCK_AMPLITUDE * (std::f64::consts::TAU * f * n as f64 / rate as f64).sin()) as f32)
        .collect();
    AudioArtifact::from_parts_unchecked(samples, rate, 1)
}

/// Synthesis for a generation spec.
pub fn mock_generate(spec: &GenerationSpec, seed: u64) -> AudioArtifact {
    mock_synthesize(&spec.prompt, spec.duration_s, seed)
}

/// Local implementation of `/v1/process` actions. `super_resolution` and `extract` are
/// identity transforms here.
pub fn mock_process(action: &str, params: &BTreeMap<String, f64>, input: &AudioArtifact) -> Result<AudioArtifact, String> {
    match action {
        "super_resolution" | "extract" => Ok(input.clone()),
        _ => {
            let local = PostProcessAction::from_wire(action, params).ok_or_else(|| format!("unknown action `{action}`"))?;
            apply_local_action(input, &local).map_err(|e| e.to_string())
        }
    }
}

/// Descriptor served for `tool_id` by mock endpoints: the default library entry, or a
/// text-driven generator covering every audio type.
pub fn mock_descriptor(tool_id: &str) -> ToolDescriptor {
    ToolLibrary::default().get(tool_id).cloned().unwrap_or_else(|| ToolDescriptor {
        id: tool_id.to_string(),
        task: "Mock Generation".into(),
        input_modalities: [crate::tools::Modality::Text].into(),
        audio_types: crate::plan::AudioType::ALL.into(),
        characteristics: "deterministic sine tone".into(),
        kind: ToolKind::Generator,
    })
}

/// Knobs for misbehaving mock tools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockToolBehavior {
    /// Ignore the requested duration and return this many seconds.
    pub duration_override: Option<f64>,
    /// Seconds of digital silence placed before the tone; total length is unchanged.
    pub leading_silence_s: f64,
    /// Linear gain applied to the tone.
    pub gain: Option<f32>,
    /// Fail every request with this status and code.
    pub fail: Option<(u16, String)>,
}

impl MockToolBehavior {
    pub fn render(&self, spec: &GenerationSpec, seed: u64) -> AudioArtifact {
        let duration = self.duration_override.unwrap_or(spec.duration_s);
        let tone = mock_synthesize(&spec.prompt, duration, seed);
        let lead = ((self.leading_silence_s.max(0.0) * DEFAULT_SAMPLE_RATE as f64).round() as usize).min(tone.frames());
        let gain = self.gain.unwrap_or(1.0);
        let samples: Vec<f32> = std::iter::repeat_n(0.0, lead)
            .chain(tone.samples()[..tone.frames() - lead].iter().map(|x| x * gain))
            .collect();
        AudioArtifact::mono(samples, DEFAULT_SAMPLE_RATE).expect("mock audio is finite")
    }
}

#[derive(Debug, Clone)]
pub struct MockToolConfig {
    pub descriptor: ToolDescriptor,
    pub seed: u64,
    pub behavior: MockToolBehavior,
}

impl MockToolConfig {
    pub fn new(tool_id: &str) -> Self {
        MockToolConfig {
            descriptor: mock_descriptor(tool_id),
            seed: 0,
            behavior: MockToolBehavior::default(),
        }
    }
}

#[derive(Clone)]
struct AppState {
    config: Arc<MockToolConfig>,
    log: Arc<Mutex<Vec<String>>>,
}

/// Loopback server implementing the tool wire protocol with mock synthesis.
pub struct MockToolServer {
    handle: ServerHandle,
    log: Arc<Mutex<Vec<String>>>,
}

impl MockToolServer {
    pub async fn start(config: MockToolConfig) -> std::io::Result<Self> {
        let log = Arc::new(Mutex::new(Vec::new()));
        let state = AppState {
            config: Arc::new(config),
            log: log.clone(),
        };
        let router = Router::new()
            .route("/v1/generate", post(generate))
            .route("/v1/process", post(process))
            .route("/v1/describe", get(describe))
            .with_state(state);
        Ok(MockToolServer {
            handle: spawn(router).await?,
            log,
        })
    }

    pub fn base_url(&self) -> String {
        self.handle.base_url()
    }

    /// One entry per request: `generate:<tool_id>`, `process:<action>` or `describe`.
    pub fn requests(&self) -> Vec<String> {
        self.log.lock().expect("request log").clone()
    }
}

fn wav_response(artifact: &AudioArtifact) -> Response {
    ([(header::CONTENT_TYPE, "audio/wav")], encode_wav(artifact)).into_response()
}

fn failure(config: &MockToolConfig) -> Option<Response> {
    config.behavior.fail.as_ref().map(|(status, code)| {
        let status = StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        wire_error(status, code, "mock tool failure")
    })
}

#[derive(Deserialize)]
struct GenerateBody {
    tool_id: String,
    prompt: String,
    duration_s: f64,
    #[serde(default)]
    extra: BTreeMap<String, String>,
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let body: GenerateBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return wire_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
    };
    state.log.lock().expect("request log").push(format!("generate:{}", body.tool_id));
    if let Some(resp) = failure(&state.config) {
        return resp;
    }
    if !(body.duration_s > 0.0 && body.duration_s <= super::MAX_REQUEST_SECONDS) {
        return wire_error(StatusCode::BAD_REQUEST, "bad_request", "duration_s out of range");
    }
    let spec = GenerationSpec {
        tool_id: body.tool_id,
        prompt: body.prompt,
        duration_s: body.duration_s,
        extra: body.extra,
    };
    wav_response(&state.config.behavior.render(&spec, state.config.seed))
}

#[derive(Deserialize)]
struct ProcessBody {
    action: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

async fn process(State(state): State<AppState>, mut multipart: Multipart) -> Response {
    let mut request: Option<ProcessBody> = None;
    let mut audio: Option<AudioArtifact> = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return wire_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => return wire_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
        };
        match name.as_str() {
            super::PROCESS_REQUEST_PART => match serde_json::from_slice(&bytes) {
                Ok(r) => request = Some(r),
                Err(e) => return wire_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
            },
            super::PROCESS_AUDIO_PART => match decode_wav(&bytes) {
                Ok(a) => audio = Some(a),
                Err(e) => return wire_error(StatusCode::BAD_REQUEST, "bad_audio", e.to_string()),
            },
            _ => {}
        }
    }
    let (Some(request), Some(audio)) = (request, audio) else {
        return wire_error(StatusCode::BAD_REQUEST, "bad_request", "multipart needs `request` and `audio` parts");
    };
    state.log.lock().expect("request log").push(format!("process:{}", request.action));
    if let Some(resp) = failure(&state.config) {
        return resp;
    }
    match mock_process(&request.action, &request.params, &audio) {
        Ok(out) => wav_response(&out),
        Err(msg) => wire_error(StatusCode::BAD_REQUEST, "unsupported_action", msg),
    }
}

async fn describe(State(state): State<AppState>) -> Response {
    state.log.lock().expect("request log").push("describe".into());
    Json(state.config.descriptor.clone()).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a32(FNV_OFFSET, b""), 0x811c_9dc5);
        assert_eq!(fnv1a32(FNV_OFFSET, b"a"), 0xe40c_292c);
        assert_eq!(fnv1a32(FNV_OFFSET, b"foobar"), 0xbf9c_f968);
        assert_eq!(mock_frequency("a", 0), 200 + 0xe40c_292c % 1600);
        assert_ne!(mock_frequency("a", 7), mock_frequency("a", 0));
    }

    #[test]
    fn frame_count_and_determinism() {
        let a = mock_synthesize("a", 1.0, 0);
        assert_eq!(a.frames(), 48_000);
        assert_eq!(a.sample_rate(), 48_000);
        assert_eq!(a.channels(), 1);
        assert_eq!(encode_wav(&a), encode_wav(&mock_synthesize("a", 1.0, 0)));
        assert_eq!(mock_synthesize("fireworks", 4.5, 0).frames(), 216_000);
    }

    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    #[test]
    fn peak_amplitude() {
        for i in 0..300 {
            let prompt = format!("prompt {i}");
            let a = mock_synthesize(&prompt, 1.0, 0);
            let peak = a.peak() as f64;
            assert!(peak <= MOCK_AMPLITUDE + 1e-6, "{prompt}: {peak}");
            // The sample grid reaches the crest exactly when 12000 is a multiple of
            // gcd(f, 48000); otherwise it misses it by at most half a grid step.
            let g = gcd(mock_frequency(&prompt, 0), 48_000);
            let tol = if 12_000 % g == 0 {
                1e-6
            } else {
                MOCK_AMPLITUDE * (1.0 - (std::f64::consts::PI * g as f64 / 48_000.0).cos()) + 1e-6
            };
            assert!((peak - MOCK_AMPLITUDE).abs() <= tol, "{prompt}: {peak}");
        }
    }

    #[test]
    fn behavior_shapes_audio() {
        let spec = GenerationSpec {
            tool_id: "MMAudio".into(),
            prompt: "fireworks".into(),
            duration_s: 4.5,
            extra: BTreeMap::new(),
        };
        let long = MockToolBehavior {
            duration_override: Some(7.0),
            ..Default::default()
        };
        assert_eq!(long.render(&spec, 0).frames(), 336_000);
        let lead = MockToolBehavior {
            leading_silence_s: 1.0,
            ..Default::default()
        };
        let out = lead.render(&spec, 0);
        assert_eq!(out.frames(), 216_000);
        assert!(out.samples()[..48_000].iter().all(|&x| x == 0.0));
        assert_eq!(MockToolBehavior::default().render(&spec, 0), mock_generate(&spec, 0));
    }

    #[test]
    fn process_actions() {
        let tone = mock_synthesize("x", 0.5, 0);
        let params = BTreeMap::from([("gain_db".to_string(), 6.0206)]);
        let louder = mock_process("apply_gain", &params, &tone).unwrap();
        assert!((louder.peak() - 2.0 * tone.peak()).abs() < 1e-4);
        assert_eq!(mock_process("super_resolution", &BTreeMap::new(), &tone).unwrap(), tone);
        assert!(mock_process("reverse", &BTreeMap::new(), &tone).is_err());
    }
}
