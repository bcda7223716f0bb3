//! Tool descriptors and the tool library.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::plan::AudioType;

const DEFAULT_LIBRARY: &str = include_str!("../tools/default_library.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Video,
    Image,
    Lyrics,
    Audio,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
            Modality::Image => "image",
            Modality::Lyrics => "lyrics",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Generator,
    PostProcessor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDescriptor {
    pub id: String,
    pub task: String,
    pub input_modalities: BTreeSet<Modality>,
    pub audio_types: BTreeSet<AudioType>,
    #[serde(default)]
    pub characteristics: String,
    pub kind: ToolKind,
}

impl ToolDescriptor {
    /// True for generators that produce `audio_type`.
    pub fn covers(&self, audio_type: AudioType) -> bool {
        self.kind == ToolKind::Generator && self.audio_types.contains(&audio_type)
    }

    pub fn accepts(&self, modality: Modality) -> bool {
        self.input_modalities.contains(&modality)
    }
}

/// Tool-specific generation request for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub tool_id: String,
    pub prompt: String,
    pub duration_s: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// `extra` keys that carry a conditioning input of the given modality.
pub const MODALITY_EXTRA_KEYS: [(&str, Modality); 4] = [
    ("lyrics", Modality::Lyrics),
    ("video_ref", Modality::Video),
    ("image_ref", Modality::Image),
    ("reference_audio", Modality::Audio),
];

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("duplicate tool id `{0}`")]
    DuplicateId(String),
    #[error("tool id is empty")]
    EmptyId,
    #[error("generator `{0}` names no audio type")]
    GeneratorWithoutType(String),
    #[error("invalid tool library: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read tool library: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable registry of tools, kept in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolLibrary {
    descriptors: IndexMap<String, ToolDescriptor>,
}

impl ToolLibrary {
    pub fn new(descriptors: Vec<ToolDescriptor>) -> Result<Self, LibraryError> {
        let mut map = IndexMap::with_capacity(descriptors.len());
        for d in descriptors {
            if d.id.trim().is_empty() {
                return Err(LibraryError::EmptyId);
            }
            if d.kind == ToolKind::Generator && d.audio_types.is_empty() {
                return Err(LibraryError::GeneratorWithoutType(d.id));
            }
            if map.contains_key(&d.id) {
                return Err(LibraryError::DuplicateId(d.id));
            }
            map.insert(d.id.clone(), d);
        }
        Ok(ToolLibrary { descriptors: map })
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, id: &str) -> Option<&ToolDescriptor> {
        self.descriptors.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.descriptors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.descriptors.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.descriptors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Generators covering `audio_type`, in library order.
    pub fn generators_for(&self, audio_type: AudioType) -> Vec<&ToolDescriptor> {
        self.iter().filter(|d| d.covers(audio_type)).collect()
    }

    pub fn post_processors(&self) -> Vec<&ToolDescriptor> {
        self.iter().filter(|d| d.kind == ToolKind::PostProcessor).collect()
    }

    /// JSON list of the descriptors covering `audio_type`, as shown to experts.
    pub fn catalog_json(&self, audio_type: AudioType) -> String {
        serde_json::to_string_pretty(&self.generators_for(audio_type)).expect("descriptors serialize")
    }

    pub fn to_json(&self) -> String {
        let list: Vec<_> = self.iter().collect();
        serde_json::to_string_pretty(&list).expect("descriptors serialize")
    }
}

impl Default for ToolLibrary {
    fn default() -> Self {
        Self::from_json(DEFAULT_LIBRARY).expect("bundled tool library is valid")
    }
}
