use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::Value;

use super::{AgentBackend, AgentError, AgentRequest, AttachmentKind};

/// Replays recorded replies keyed by role and per-role turn.
///
/// Script file:
///
/// ```json
/// {
///   "replies": {
///     "planner": ["first planner reply", "second planner reply"],
///     "audio_evaluator@e2": [{"quality": 4, "alignment": 4, "aesthetics": 4, "verdict": "accept"}]
///   },
///   "unsupported_attachments": ["video"]
/// }
/// ```
///
/// A request with channel `c` reads `role@c` when the script has that key, otherwise the
/// shared `role` queue. String replies are returned byte-exactly; any other JSON value is
/// returned as its compact serialization.
#[derive(Debug)]
pub struct ScriptedBackend {
    replies: HashMap<String, Vec<String>>,
    unsupported: HashSet<AttachmentKind>,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    turns: HashMap<String, usize>,
    log: Vec<ScriptedCall>,
}

/// One served (or refused) call, in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedCall {
    pub key: String,
    pub turn: usize,
    pub request: AgentRequest,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    replies: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    unsupported_attachments: Vec<AttachmentKind>,
}

impl ScriptedBackend {
    pub fn from_value(value: &Value) -> Result<Self, AgentError> {
        let file: ScriptFile = serde_json::from_value(value.clone())
            .map_err(|e| AgentError::Config(format!("script: {e}")))?;
        let replies = file
            .replies
            .into_iter()
            .map(|(key, items)| {
                let texts = items
                    .into_iter()
                    .map(|v| match v {
                        Value::String(s) => s,
                        other => other.to_string(),
                    })
                    .collect();
                (key, texts)
            })
            .collect();
        Ok(ScriptedBackend {
            replies,
            unsupported: file.unsupported_attachments.into_iter().collect(),
            state: Mutex::new(ScriptState::default()),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let value: Value = serde_json::from_str(text).map_err(|e| AgentError::Config(format!("script: {e}")))?;
        Self::from_value(&value)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Calls served so far.
    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.state.lock().expect("script state").log.clone()
    }

    /// Number of calls whose resolved key starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.state
            .lock()
            .expect("script state")
            .log
            .iter()
            .filter(|c| c.key.starts_with(prefix))
            .count()
    }

    /// Unconsumed replies per key, for checking that a session was fully replayed.
    pub fn remaining(&self) -> BTreeMap<String, usize> {
        let state = self.state.lock().expect("script state");
        self.replies
            .iter()
            .map(|(k, v)| (k.clone(), v.len() - state.turns.get(k).copied().unwrap_or(0).min(v.len())))
            .filter(|(_, n)| *n > 0)
            .collect()
    }

    fn resolve_key(&self, request: &AgentRequest) -> String {
        let role = request.role.key();
        if let Some(channel) = &request.channel {
            let scoped = format!("{role}@{channel}");
            if self.replies.contains_key(&scoped) {
                return scoped;
            }
        }
        role
    }
}

#[async_trait]
impl AgentBackend for ScriptedBackend {
    async fn complete(&self, request: &AgentRequest) -> Result<String, AgentError> {
        if let Some(kind) = request
            .messages
            .iter()
            .flat_map(|m| &m.attachments)
            .map(|a| a.kind)
            .find(|k| self.unsupported.contains(k))
        {
            return Err(AgentError::AttachmentUnsupported(kind.to_string()));
        }
        let key = self.resolve_key(request);
        let mut state = self.state.lock().expect("script state");
        let turn = {
            let counter = state.turns.entry(key.clone()).or_insert(0);
            let turn = *counter;
            *counter += 1;
            turn
        };
        state.log.push(ScriptedCall {
            key: key.clone(),
            turn,
            request: request.clone(),
        });
        self.replies
            .get(&key)
            .and_then(|queue| queue.get(turn))
            .cloned()
            .ok_or(AgentError::ScriptExhausted { key, turn })
    }
}
