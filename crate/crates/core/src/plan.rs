//! Structured event plans: typed, timed audio sub-events plus a scene caption.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::reply::{extract_first_json, Fields, ReplyError};

/// Shortest event accepted by validation, in seconds.
pub const MIN_EVENT_SECONDS: f64 = 0.1;
/// Allowed overrun of an event end past the input duration, in seconds.
pub const DURATION_SLACK_SECONDS: f64 = 0.5;
/// Upper bound of the linear volume multiplier.
pub const MAX_VOLUME: f64 = 2.0;
/// Default volume when a reply omits it.
pub const DEFAULT_VOLUME: f64 = 1.0;

const EPS: f64 = 1e-9;

/// The six event field names, in canonical order.
pub const EVENT_FIELDS: [&str; 6] = [
    "audio_type",
    "object",
    "start_time",
    "end_time",
    "description",
    "volume",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioType {
    SoundEffect,
    Speech,
    Music,
    Song,
}

impl AudioType {
    /// All audio types in tool-library task order.
    pub const ALL: [AudioType; 4] = [
        AudioType::SoundEffect,
        AudioType::Speech,
        AudioType::Music,
        AudioType::Song,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AudioType::SoundEffect => "sound_effect",
            AudioType::Speech => "speech",
            AudioType::Music => "music",
            AudioType::Song => "song",
        }
    }
}

impl fmt::Display for AudioType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown audio type `{0}` (expected speech, sound_effect, music or song)")]
pub struct UnknownAudioType(pub String);

impl FromStr for AudioType {
    type Err = UnknownAudioType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AudioType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownAudioType(s.to_string()))
    }
}

/// One timed audio sub-event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEvent {
    pub audio_type: AudioType,
    pub object: String,
    pub start_time: f64,
    pub end_time: f64,
    pub description: String,
    pub volume: f64,
}

impl AudioEvent {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventPlan {
    #[serde(default)]
    pub scene_caption: String,
    #[serde(default)]
    pub total_duration: Option<f64>,
    pub events: Vec<AudioEvent>,
}

impl EventPlan {
    /// Latest event end, or 0 for an empty plan.
    pub fn max_end_time(&self) -> f64 {
        self.events.iter().map(|e| e.end_time).fold(0.0, f64::max)
    }
}

/// The user-facing request: any mix of text, images and video.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputDescriptor {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub video_ref: Option<String>,
    #[serde(default)]
    pub precomputed_caption: Option<String>,
    #[serde(default)]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InputError {
    #[error("input has no text, image or video")]
    Empty,
    #[error("input duration must be positive and finite, got {0}")]
    BadDuration(f64),
}

impl InputDescriptor {
    pub fn text_only(text: impl Into<String>) -> Self {
        InputDescriptor {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn has_visuals(&self) -> bool {
        !self.image_refs.is_empty() || self.video_ref.is_some()
    }

    pub fn validate(&self) -> Result<(), InputError> {
        let has_text = self.text.as_deref().is_some_and(|t| !t.trim().is_empty());
        if !has_text && !self.has_visuals() {
            return Err(InputError::Empty);
        }
        if let Some(d) = self.duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(InputError::BadDuration(d));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    EmptyPlan,
    NonFinite,
    NegativeStart,
    EndNotAfterStart,
    TooShort,
    VolumeOutOfRange,
    EmptyDescription,
    ExceedsDuration,
}

impl ViolationCode {
    fn reason(self) -> &'static str {
        match self {
            ViolationCode::EmptyPlan => "plan must contain at least one event",
            ViolationCode::NonFinite => "value is not a finite number",
            ViolationCode::NegativeStart => "start_time must be >= 0",
            ViolationCode::EndNotAfterStart => "end_time must be greater than start_time",
            ViolationCode::TooShort => "event must last at least 0.1 s",
            ViolationCode::VolumeOutOfRange => "volume must be in (0, 2]",
            ViolationCode::EmptyDescription => "description must not be empty",
            ViolationCode::ExceedsDuration => "end_time exceeds the input duration",
        }
    }
}

/// One broken plan invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub event_index: Option<usize>,
    pub field: String,
    pub code: ViolationCode,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.code)?;
        if let Some(i) = self.event_index {
            write!(f, "@{i}")?;
        }
        write!(f, " ({}: {})", self.field, self.code.reason())
    }
}

impl From<&Violation> for ReplyError {
    fn from(v: &Violation) -> Self {
        ReplyError::schema(v.event_index, v.field.clone(), v.code.reason())
    }
}

fn violation(index: Option<usize>, field: &str, code: ViolationCode) -> Violation {
    Violation {
        event_index: index,
        field: field.to_string(),
        code,
    }
}

fn event_violations(index: usize, e: &AudioEvent, out: &mut Vec<Violation>) {
    let at = Some(index);
    let mut timing_ok = true;
    for (field, value) in [("start_time", e.start_time), ("end_time", e.end_time)] {
        if !value.is_finite() {
            out.push(violation(at, field, ViolationCode::NonFinite));
            timing_ok = false;
        }
    }
    if timing_ok {
        if e.start_time < 0.0 {
            out.push(violation(at, "start_time", ViolationCode::NegativeStart));
        }
        if e.end_time <= e.start_time {
            out.push(violation(at, "end_time", ViolationCode::EndNotAfterStart));
        } else if e.end_time - e.start_time < MIN_EVENT_SECONDS - EPS {
            out.push(violation(at, "end_time", ViolationCode::TooShort));
        }
    }
    if !e.volume.is_finite() {
        out.push(violation(at, "volume", ViolationCode::NonFinite));
    } else if e.volume <= 0.0 || e.volume > MAX_VOLUME {
        out.push(violation(at, "volume", ViolationCode::VolumeOutOfRange));
    }
    if e.description.trim().is_empty() {
        out.push(violation(at, "description", ViolationCode::EmptyDescription));
    }
}

/// Checks every plan invariant. `duration` overrides the plan's own `total_duration`.
///
/// Returns an empty list iff the plan is valid.
pub fn validate_plan(plan: &EventPlan, duration: Option<f64>) -> Vec<Violation> {
    let mut out = Vec::new();
    if plan.events.is_empty() {
        out.push(violation(None, "events", ViolationCode::EmptyPlan));
    }
    let limit = duration.or(plan.total_duration);
    for (i, e) in plan.events.iter().enumerate() {
        event_violations(i, e, &mut out);
        if let Some(limit) = limit {
            if e.end_time.is_finite() && e.end_time > limit + DURATION_SLACK_SECONDS + EPS {
                out.push(violation(Some(i), "end_time", ViolationCode::ExceedsDuration));
            }
        }
    }
    out
}

fn quantize(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn event_from_value(index: usize, value: &Value) -> Result<AudioEvent, ReplyError> {
    let fields = Fields::new(value, Some(index), "events")?;
    if let Some(unknown) = fields.map().keys().find(|k| !EVENT_FIELDS.contains(&k.as_str())) {
        return Err(fields.violation(unknown, "unknown field"));
    }
    let audio_type = fields
        .str("audio_type")?
        .parse::<AudioType>()
        .map_err(|e| fields.violation("audio_type", e.to_string()))?;
    Ok(AudioEvent {
        audio_type,
        object: fields.str("object")?.to_string(),
        start_time: quantize(fields.f64("start_time")?),
        end_time: quantize(fields.f64("end_time")?),
        description: fields.str("description")?.to_string(),
        volume: quantize(fields.opt_f64("volume")?.unwrap_or(DEFAULT_VOLUME)),
    })
}

/// Maps a JSON value (bare event list, plan object, or single event) onto a plan.
///
/// Event-local invariants are enforced; duration limits are left to [`validate_plan`].
pub fn plan_from_value(value: &Value) -> Result<EventPlan, ReplyError> {
    let (events_value, scene_caption, total_duration) = match value {
        Value::Array(_) => (value, String::new(), None),
        Value::Object(map) if map.contains_key("audio_type") => {
            return plan_from_value(&Value::Array(vec![value.clone()]));
        }
        Value::Object(_) => {
            let fields = Fields::new(value, None, "plan")?;
            let events = fields
                .get("events")
                .ok_or_else(|| fields.violation("events", "missing"))?;
            let caption = fields.opt_str("scene_caption")?.unwrap_or_default().to_string();
            let total = fields.opt_f64("total_duration")?.map(quantize);
            (events, caption, total)
        }
        _ => return Err(ReplyError::schema(None, "events", "expected a JSON list or object")),
    };
    let Value::Array(items) = events_value else {
        return Err(ReplyError::schema(None, "events", "expected a JSON list"));
    };
    let events = items
        .iter()
        .enumerate()
        .map(|(i, v)| event_from_value(i, v))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = EventPlan {
        scene_caption,
        total_duration,
        events,
    };
    if let Some(v) = validate_plan(&plan, None)
        .iter()
        .find(|v| v.code != ViolationCode::ExceedsDuration)
    {
        return Err(v.into());
    }
    Ok(plan)
}

/// Parses the first JSON block of an agent reply into an [`EventPlan`].
pub fn parse_plan(reply_text: &str) -> Result<EventPlan, ReplyError> {
    plan_from_value(&extract_first_json(reply_text)?)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Canonical plan text: fixed key order and three fractional digits for numbers.
pub fn serialize_plan(plan: &EventPlan) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!("  \"scene_caption\": {},\n", json_str(&plan.scene_caption)));
    match plan.total_duration {
        Some(d) => out.push_str(&format!("  \"total_duration\": {d:.3},\n")),
        None => out.push_str("  \"total_duration\": null,\n"),
    }
    out.push_str("  \"events\": [");
    for (i, e) in plan.events.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&format!(
            "    {{\"audio_type\": {}, \"object\": {}, \"start_time\": {:.3}, \"end_time\": {:.3}, \"description\": {}, \"volume\": {:.3}}}",
            json_str(e.audio_type.as_str()),
            json_str(&e.object),
            e.start_time,
            e.end_time,
            json_str(&e.description),
            e.volume,
        ));
    }
    if !plan.events.is_empty() {
        out.push_str("\n  ");
    }
    out.push_str("]\n}\n");
    out
}
