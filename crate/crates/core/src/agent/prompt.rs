use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentError, AgentMessage, Attachment, Author, RoleName};

const DEFAULT_BOOK: &str = include_str!("../../prompts/default.json");

const ROLE_KEYS: [&str; 5] = [
    "planner",
    "plan_supervisor",
    "expert",
    "assignment_supervisor",
    "audio_evaluator",
];

/// Versioned prompt templates: one persona per role plus named task templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBook {
    pub version: u32,
    #[serde(default)]
    pub note: String,
    /// Re-prompt sent after an unparseable reply; uses `{schema_id}` and `{error}`.
    pub repair: String,
    pub roles: BTreeMap<String, RoleTemplates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleTemplates {
    pub persona: String,
    pub tasks: BTreeMap<String, String>,
}

/// A resolved role: persona and task templates, with expert parameters applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Role {
    pub name: RoleName,
    pub persona_prompt: String,
    pub tasks: BTreeMap<String, String>,
}

impl Default for PromptBook {
    fn default() -> Self {
        PromptBook::from_json(DEFAULT_BOOK).expect("bundled prompt book is valid")
    }
}

impl PromptBook {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let book: PromptBook =
            serde_json::from_str(text).map_err(|e| AgentError::Config(format!("prompt book: {e}")))?;
        for key in ROLE_KEYS {
            if !book.roles.contains_key(key) {
                return Err(AgentError::Config(format!("prompt book is missing role `{key}`")));
            }
        }
        if let Some(extra) = book.roles.keys().find(|k| !ROLE_KEYS.contains(&k.as_str())) {
            return Err(AgentError::Config(format!("prompt book has unknown role `{extra}`")));
        }
        Ok(book)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn role(&self, name: RoleName) -> Result<Role, AgentError> {
        let templates = &self.roles[name.template_key()];
        let mut role = Role {
            name,
            persona_prompt: templates.persona.clone(),
            tasks: templates.tasks.clone(),
        };
        if let RoleName::Expert(t) = name {
            // Expert templates are parameterized by audio type; a bare `{audio_type}` is
            // filled here so callers only supply task context.
            role.persona_prompt = role.persona_prompt.replace("{audio_type}", t.as_str());
            for template in role.tasks.values_mut() {
                *template = template.replace("{audio_type}", t.as_str());
            }
        }
        Ok(role)
    }
}

/// Placeholder values and attachments for one rendering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptContext {
    pub vars: BTreeMap<String, String>,
    pub attachments: Vec<Attachment>,
}

impl PromptContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.vars.insert(name.into(), value.into());
        self
    }

    pub fn attach(mut self, attachment: Attachment) -> Self {
        self.attachments.push(attachment);
        self
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Replaces every `{identifier}` with its context value. Other braces are literal.
pub fn render_template(template: &str, ctx: &PromptContext) -> Result<String, AgentError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .char_indices()
            .find(|&(i, c)| if i == 0 { !is_ident_start(c) } else { !is_ident(c) })
            .map(|(i, _)| i)
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            let value = ctx
                .vars
                .get(name)
                .ok_or_else(|| AgentError::MissingPlaceholder(name.to_string()))?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Expands a role's persona and `task` template into a persona message followed by a
/// task message carrying the context attachments.
pub fn render_prompt(role: &Role, task: &str, ctx: &PromptContext) -> Result<Vec<AgentMessage>, AgentError> {
    let template = role.tasks.get(task).ok_or_else(|| AgentError::UnknownTask {
        role: role.name.key(),
        task: task.to_string(),
    })?;
    Ok(vec![
        AgentMessage {
            author: Author::System,
            content: render_template(&role.persona_prompt, ctx)?,
            attachments: Vec::new(),
        },
        AgentMessage {
            author: Author::User,
            content: render_template(template, ctx)?,
            attachments: ctx.attachments.clone(),
        },
    ])
}
