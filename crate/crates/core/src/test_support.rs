use std::sync::Arc;

use serde_json::{json, Value};

use crate::agent::{AgentClient, PromptBook, ScriptedBackend};
use crate::plan::{AudioEvent, AudioType, EventPlan};

pub fn event(t: AudioType, object: &str, start: f64, end: f64, desc: &str) -> AudioEvent {
    AudioEvent {
        audio_type: t,
        object: object.into(),
        start_time: start,
        end_time: end,
        description: desc.into(),
        volume: 1.0,
    }
}

/// The four-event street scene: pedestrians, fireworks, shops, and the song.
pub fn street_plan() -> EventPlan {
    EventPlan {
        scene_caption: "A bustling commercial street at dusk with a street performer".into(),
        total_duration: Some(30.0),
        events: vec![
            event(AudioType::SoundEffect, "pedestrians", 0.0, 30.0, "footsteps and cheers of passing pedestrians"),
            event(AudioType::SoundEffect, "fireworks", 2.0, 6.5, "fireworks bursting in the sky"),
            event(AudioType::SoundEffect, "shops", 0.0, 30.0, "ambient noise from surrounding shops"),
            event(AudioType::Song, "street performer", 0.0, 30.0, "a street performer sings the folk song Chengdu"),
        ],
    }
}

pub fn events_json(plan: &EventPlan) -> Value {
    serde_json::to_value(&plan.events).unwrap()
}

pub fn scripted(replies: Value) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::from_value(&json!({ "replies": replies })).unwrap())
}

pub fn client(backend: Arc<ScriptedBackend>) -> AgentClient {
    AgentClient::new(backend, Arc::new(PromptBook::default()))
}
