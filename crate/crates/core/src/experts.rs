//! Multi-expert tool assignment: each audio-type expert picks candidate tools for its
//! events and writes tool-specific generation specs, then the experts refine the
//! combined plan in turn under supervisor review.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AgentClient, AgentError, PromptContext, RoleName};
use crate::plan::{AudioEvent, AudioType, EventPlan, MAX_VOLUME};
use crate::reply::{extract_first_json, Fields, ReplyError};
use crate::stage1::Decision;
use crate::tools::{GenerationSpec, Modality, ToolDescriptor, ToolLibrary, MODALITY_EXTRA_KEYS};

pub const MAX_CANDIDATES: usize = 2;
pub const DEFAULT_SELF_REFINE_ITERS: usize = 2;
pub const DEFAULT_COLLABORATIVE_PASSES: usize = 1;
pub const DEFAULT_SUPERVISION_ROUNDS: usize = 2;

/// Tool candidates and specs for one plan event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAssignment {
    pub event_index: usize,
    pub event: AudioEvent,
    /// Ordered; `candidates[0]` has priority.
    pub candidates: Vec<String>,
    pub specs: BTreeMap<String, GenerationSpec>,
}

impl EventAssignment {
    pub fn spec(&self, tool_id: &str) -> Option<&GenerationSpec> {
        self.specs.get(tool_id)
    }

    pub fn priority_spec(&self) -> &GenerationSpec {
        &self.specs[&self.candidates[0]]
    }

    /// Checks the assignment invariants against `library`.
    pub fn check(&self, library: &ToolLibrary) -> Result<(), String> {
        if self.candidates.is_empty() || self.candidates.len() > MAX_CANDIDATES {
            return Err(format!("{} candidates", self.candidates.len()));
        }
        for (i, id) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(id) {
                return Err(format!("duplicate candidate `{id}`"));
            }
            match library.get(id) {
                Some(tool) if tool.covers(self.event.audio_type) => {}
                _ => return Err(format!("`{id}` does not generate {}", self.event.audio_type)),
            }
            let spec = self.specs.get(id).ok_or_else(|| format!("no spec for `{id}`"))?;
            if spec.tool_id != *id || spec.prompt.trim().is_empty() {
                return Err(format!("malformed spec for `{id}`"));
            }
            if (spec.duration_s - self.event.duration()).abs() > 1e-9 {
                return Err(format!("spec duration {} differs from event", spec.duration_s));
            }
        }
        if self.specs.len() != self.candidates.len() {
            return Err("specs for tools that are not candidates".into());
        }
        Ok(())
    }
}

/// Scene-level inputs shared by every expert.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneContext {
    pub caption: String,
    pub video_ref: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum Stage2Error {
    #[error("the tool library has no generator for {0}")]
    NoToolForType(AudioType),
    #[error("expert order must list each present audio type exactly once: {0}")]
    BadExpertOrder(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Partitions plan events by audio type, preserving plan order within each type.
pub fn route(plan: &EventPlan) -> BTreeMap<AudioType, Vec<(usize, &AudioEvent)>> {
    let mut routed: BTreeMap<AudioType, Vec<(usize, &AudioEvent)>> = BTreeMap::new();
    for (i, e) in plan.events.iter().enumerate() {
        routed.entry(e.audio_type).or_default().push((i, e));
    }
    routed
}

pub(crate) fn event_json(index: usize, event: &AudioEvent) -> String {
    let mut value = serde_json::to_value(event).expect("event serializes");
    value
        .as_object_mut()
        .expect("event is an object")
        .insert("event_index".into(), index.into());
    value.to_string()
}

pub(crate) fn channel(index: usize) -> String {
    format!("e{index}")
}

fn or_none(text: &str) -> &str {
    if text.trim().is_empty() {
        "none"
    } else {
        text
    }
}

/// Applies the engine-side spec rules: non-empty prompt, duration from the event
/// bounds, and `extra` restricted to the tool's input modalities. Song tools that take
/// lyrics must receive them.
pub fn finalize_spec(
    index: usize,
    event: &AudioEvent,
    tool: &ToolDescriptor,
    prompt: &str,
    mut extra: BTreeMap<String, String>,
    scene: &SceneContext,
) -> Result<GenerationSpec, ReplyError> {
    let prompt = prompt.trim();
    if prompt.is_empty() {
        return Err(ReplyError::schema(Some(index), "prompt", "prompt is empty"));
    }
    for (key, modality) in MODALITY_EXTRA_KEYS {
        if !tool.accepts(modality) {
            extra.remove(key);
        }
    }
    if tool.accepts(Modality::Video) && !extra.contains_key("video_ref") {
        if let Some(video) = &scene.video_ref {
            extra.insert("video_ref".into(), video.clone());
        }
    }
    let needs_lyrics = event.audio_type == AudioType::Song && tool.accepts(Modality::Lyrics);
    if needs_lyrics && extra.get("lyrics").is_none_or(|l| l.trim().is_empty()) {
        return Err(ReplyError::schema(
            Some(index),
            "extra.lyrics",
            format!("{} needs lyrics", tool.id),
        ));
    }
    Ok(GenerationSpec {
        tool_id: tool.id.clone(),
        prompt: prompt.to_string(),
        duration_s: event.duration(),
        extra,
    })
}

pub(crate) fn spec_body(fields: &Fields<'_>) -> Result<(String, BTreeMap<String, String>), ReplyError> {
    let prompt = fields.str("prompt")?.to_string();
    let extra = fields.string_map("extra")?.unwrap_or_default();
    Ok((prompt, extra))
}

/// Filtered expert choice for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<String>,
    /// Specs supplied with the choice, for retained candidates only.
    pub specs: BTreeMap<String, GenerationSpec>,
    /// True when none of the expert's picks were usable.
    pub fell_back: bool,
}

/// Keeps covering generators in reply order without duplicates; falls back to the
/// library's covering set when nothing survives. At most two are kept.
pub fn filter_candidates(picked: &[String], audio_type: AudioType, library: &ToolLibrary) -> (Vec<String>, bool) {
    let mut out: Vec<String> = Vec::new();
    for id in picked {
        let id = id.trim();
        if library.get(id).is_some_and(|t| t.covers(audio_type)) && !out.iter().any(|c| c == id) {
            out.push(id.to_string());
        }
    }
    let fell_back = out.is_empty();
    if fell_back {
        out = library
            .generators_for(audio_type)
            .into_iter()
            .map(|t| t.id.clone())
            .collect();
    }
    out.truncate(MAX_CANDIDATES);
    (out, fell_back)
}

pub fn parse_selection(
    text: &str,
    index: usize,
    event: &AudioEvent,
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<Selection, ReplyError> {
    let value = extract_first_json(text)?;
    let (picked, spec_map) = match &value {
        Value::Array(_) => {
            let wrapped = serde_json::json!({ "candidates": value });
            (Fields::new(&wrapped, Some(index), "selection")?.str_list("candidates")?, None)
        }
        _ => {
            let fields = Fields::new(&value, Some(index), "selection")?;
            let specs = match fields.get("specs") {
                Some(Value::Object(map)) => Some(map.clone()),
                Some(_) => return Err(fields.violation("specs", "expected an object keyed by tool id")),
                None => None,
            };
            (fields.str_list("candidates")?, specs)
        }
    };
    let (candidates, fell_back) = filter_candidates(&picked, event.audio_type, library);
    let mut specs = BTreeMap::new();
    if let Some(map) = spec_map {
        for id in &candidates {
            if let Some(body) = map.get(id) {
                let fields = Fields::new(body, Some(index), &format!("specs.{id}"))?;
                let (prompt, extra) = spec_body(&fields)?;
                let tool = library.get(id).expect("filtered candidates exist");
                specs.insert(id.clone(), finalize_spec(index, event, tool, &prompt, extra, scene)?);
            }
        }
    }
    Ok(Selection {
        candidates,
        specs,
        fell_back,
    })
}

/// Asks the event's expert for up to two ordered candidate tools (with specs).
pub async fn select_candidates(
    agent: &AgentClient,
    index: usize,
    event: &AudioEvent,
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<Selection, Stage2Error> {
    if library.generators_for(event.audio_type).is_empty() {
        return Err(Stage2Error::NoToolForType(event.audio_type));
    }
    let ctx = PromptContext::new()
        .var("event_json", event_json(index, event))
        .var("scene_caption", or_none(&scene.caption))
        .var("tool_catalog", library.catalog_json(event.audio_type));
    let selection = agent
        .ask(
            RoleName::Expert(event.audio_type),
            Some(&channel(index)),
            "select",
            &ctx,
            "tool_selection",
            |text| parse_selection(text, index, event, library, scene),
        )
        .await?;
    Ok(selection)
}

/// Asks the expert for a spec tailored to one tool.
pub async fn refine_spec(
    agent: &AgentClient,
    index: usize,
    event: &AudioEvent,
    tool_id: &str,
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<GenerationSpec, Stage2Error> {
    let tool = match library.get(tool_id) {
        Some(t) if t.covers(event.audio_type) => t,
        _ => return Err(Stage2Error::NoToolForType(event.audio_type)),
    };
    let ctx = PromptContext::new()
        .var("tool_id", tool_id)
        .var("event_json", event_json(index, event))
        .var("scene_caption", or_none(&scene.caption))
        .var("tool_json", serde_json::to_string(tool).expect("descriptor serializes"));
    let spec = agent
        .ask(
            RoleName::Expert(event.audio_type),
            Some(&channel(index)),
            "refine",
            &ctx,
            "generation_spec",
            |text| {
                let value = extract_first_json(text)?;
                let (prompt, extra) = spec_body(&Fields::new(&value, Some(index), "spec")?)?;
                finalize_spec(index, event, tool, &prompt, extra, scene)
            },
        )
        .await?;
    Ok(spec)
}

/// Selection plus a spec for every candidate. Candidates the selection reply left
/// without a spec get one `refine_spec` call each.
pub async fn assign_event(
    agent: &AgentClient,
    index: usize,
    event: &AudioEvent,
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<EventAssignment, Stage2Error> {
    let Selection {
        candidates, mut specs, ..
    } = select_candidates(agent, index, event, library, scene).await?;
    for id in &candidates {
        if !specs.contains_key(id) {
            let spec = refine_spec(agent, index, event, id, library, scene).await?;
            specs.insert(id.clone(), spec);
        }
    }
    Ok(EventAssignment {
        event_index: index,
        event: event.clone(),
        candidates,
        specs,
    })
}

fn parse_self_review(
    text: &str,
    assignment: &EventAssignment,
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<Option<BTreeMap<String, GenerationSpec>>, ReplyError> {
    let index = assignment.event_index;
    let value = extract_first_json(text)?;
    let fields = Fields::new(&value, Some(index), "self_review")?;
    let specs = fields.get("specs");
    let changes = match fields.opt_bool("changes")? {
        Some(c) => c,
        None if specs.is_some() => true,
        None => return Err(fields.violation("changes", "missing")),
    };
    if !changes {
        return Ok(None);
    }
    let Some(Value::Object(map)) = specs else {
        return Err(fields.violation("specs", "changes=true needs an object of revised specs"));
    };
    if map.is_empty() {
        return Err(fields.violation("specs", "changes=true with no revised specs"));
    }
    let mut out = assignment.specs.clone();
    for (id, body) in map {
        if !assignment.candidates.contains(id) {
            return Err(fields.violation("specs", format!("`{id}` is not a candidate of this event")));
        }
        let (prompt, extra) = spec_body(&Fields::new(body, Some(index), &format!("specs.{id}"))?)?;
        let tool = library.get(id).expect("candidates are in the library");
        out.insert(id.clone(), finalize_spec(index, &assignment.event, tool, &prompt, extra, scene)?);
    }
    Ok(Some(out))
}

/// Critique-and-rewrite loop over one assignment's specs. Stops at a no-change reply
/// or after `max_iters` calls. Returns the assignment and the number of calls made.
pub async fn self_refine(
    agent: &AgentClient,
    mut assignment: EventAssignment,
    library: &ToolLibrary,
    scene: &SceneContext,
    max_iters: usize,
) -> Result<(EventAssignment, usize), Stage2Error> {
    let index = assignment.event_index;
    for iter in 1..=max_iters {
        let ctx = PromptContext::new()
            .var("event_json", event_json(index, &assignment.event))
            .var("specs_json", serde_json::to_string(&assignment.specs).expect("specs serialize"));
        let current = &assignment;
        let revised = agent
            .ask(
                RoleName::Expert(assignment.event.audio_type),
                Some(&channel(index)),
                "self_review",
                &ctx,
                "self_review",
                |text| parse_self_review(text, current, library, scene),
            )
            .await?;
        match revised {
            Some(specs) => assignment.specs = specs,
            None => return Ok((assignment, iter)),
        }
    }
    Ok((assignment, max_iters))
}

fn assignments_json(assignments: &[EventAssignment]) -> String {
    serde_json::to_string_pretty(assignments).expect("assignments serialize")
}

fn find<'a>(
    assignments: &'a mut [EventAssignment],
    fields: &Fields<'_>,
) -> Result<&'a mut EventAssignment, ReplyError> {
    let raw = fields.f64("event_index")?;
    if raw < 0.0 || raw.fract() != 0.0 {
        return Err(fields.violation("event_index", "expected a non-negative integer"));
    }
    let index = raw as usize;
    assignments
        .iter_mut()
        .find(|a| a.event_index == index)
        .ok_or_else(|| fields.violation("event_index", format!("no event {index}")))
}

fn append_tags(prompt: &str, tags: &[String]) -> String {
    let mut out = prompt.to_string();
    for tag in tags.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
        if !out.contains(tag) {
            out.push_str(", ");
            out.push_str(tag);
        }
    }
    out
}

/// Validates one expert's collaborative reply and applies it to a copy of
/// `assignments`. The expert may rewrite prompt and extra of its own type's events;
/// on other events it may only append style tags or set a volume hint.
pub fn apply_amendments(
    text: &str,
    expert: AudioType,
    assignments: &[EventAssignment],
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<Vec<EventAssignment>, ReplyError> {
    let value = extract_first_json(text)?;
    let top = Fields::new(&value, None, "collaboration")?;
    if top.opt_bool("changes")? == Some(false) {
        return Ok(assignments.to_vec());
    }
    let items = match top.get("amendments") {
        None => return Ok(assignments.to_vec()),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(top.violation("amendments", "expected a list")),
    };
    let mut out = assignments.to_vec();
    for item in items {
        let probe = Fields::new(item, None, "amendment")?;
        let target = find(&mut out, &probe)?;
        let index = target.event_index;
        let fields = Fields::new(item, Some(index), "amendment")?;
        let own = target.event.audio_type == expert;
        let tool_id = fields.opt_str("tool_id")?;
        if let Some(id) = tool_id {
            if !target.candidates.iter().any(|c| c == id) {
                return Err(fields.violation("tool_id", format!("`{id}` is not a candidate of this event")));
            }
        }
        let prompt = fields.opt_str("prompt")?;
        let extra = fields.string_map("extra")?;
        if (prompt.is_some() || extra.is_some()) && !own {
            return Err(fields.violation(
                if prompt.is_some() { "prompt" } else { "extra" },
                format!(
                    "the {expert} expert may only add style_tags or volume to {} events",
                    target.event.audio_type
                ),
            ));
        }
        if (prompt.is_some() || extra.is_some()) && tool_id.is_none() {
            return Err(fields.violation("tool_id", "required when rewriting a request"));
        }
        if let Some(volume) = fields.opt_f64("volume")? {
            if !(volume > 0.0 && volume <= MAX_VOLUME) {
                return Err(fields.violation("volume", format!("{volume} outside (0, {MAX_VOLUME}]")));
            }
            target.event.volume = volume;
        }
        let tags = fields.str_list("style_tags")?;
        let targets: Vec<String> = match tool_id {
            Some(id) => vec![id.to_string()],
            None => target.candidates.clone(),
        };
        for id in targets {
            let old = target.specs[&id].clone();
            let new_prompt = append_tags(prompt.unwrap_or(&old.prompt), &tags);
            let new_extra = extra.clone().unwrap_or(old.extra);
            let tool = library.get(&id).expect("candidates are in the library");
            let spec = finalize_spec(index, &target.event, tool, &new_prompt, new_extra, scene)?;
            target.specs.insert(id, spec);
        }
    }
    Ok(out)
}

/// One pass of collaborative refinement: each present type's expert, in `order`.
/// Returns the amended assignments and the number of expert turns.
pub async fn collaborative_refine(
    agent: &AgentClient,
    assignments: Vec<EventAssignment>,
    order: &[AudioType],
    suggestions: &[String],
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<(Vec<EventAssignment>, usize), Stage2Error> {
    check_order(&assignments, order)?;
    let mut current = assignments;
    let mut turns = 0;
    let suggestions = if suggestions.is_empty() {
        "none".to_string()
    } else {
        suggestions.join("\n")
    };
    for &expert in order {
        if !current.iter().any(|a| a.event.audio_type == expert) {
            continue;
        }
        let ctx = PromptContext::new()
            .var("assignments_json", assignments_json(&current))
            .var("suggestions", suggestions.as_str());
        let snapshot = &current;
        let next = agent
            .ask(
                RoleName::Expert(expert),
                None,
                "collaborate",
                &ctx,
                "amendments",
                |text| apply_amendments(text, expert, snapshot, library, scene),
            )
            .await?;
        current = next;
        turns += 1;
    }
    Ok((current, turns))
}

fn check_order(assignments: &[EventAssignment], order: &[AudioType]) -> Result<(), Stage2Error> {
    for (i, t) in order.iter().enumerate() {
        if order[..i].contains(t) {
            return Err(Stage2Error::BadExpertOrder(format!("{t} listed twice")));
        }
    }
    if let Some(a) = assignments.iter().find(|a| !order.contains(&a.event.audio_type)) {
        return Err(Stage2Error::BadExpertOrder(format!("{} missing", a.event.audio_type)));
    }
    Ok(())
}

/// Assignment supervisor verdict; `replaced` holds the rewritten assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentVerdict {
    pub decision: Decision,
    pub suggestions: Vec<String>,
    pub replaced: Option<Vec<EventAssignment>>,
}

pub fn parse_assignment_verdict(
    text: &str,
    assignments: &[EventAssignment],
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<AssignmentVerdict, ReplyError> {
    let value = extract_first_json(text)?;
    let fields = Fields::new(&value, None, "verdict")?;
    let decision = Decision::parse(&fields)?;
    let suggestions = fields.str_list("suggestions")?;
    let replaced = match decision {
        Decision::Approve => None,
        Decision::Revise => {
            if suggestions.iter().all(|s| s.trim().is_empty()) {
                return Err(fields.violation("suggestions", "a revise verdict needs at least one suggestion"));
            }
            None
        }
        Decision::Rewrite => {
            let items = match fields.get("replacement_specs") {
                Some(Value::Array(items)) if !items.is_empty() => items,
                _ => return Err(fields.violation("replacement_specs", "rewrite needs at least one replacement")),
            };
            let mut out = assignments.to_vec();
            for item in items {
                let probe = Fields::new(item, None, "replacement")?;
                let target = find(&mut out, &probe)?;
                let index = target.event_index;
                let f = Fields::new(item, Some(index), "replacement")?;
                let id = f.str("tool_id")?;
                let tool = match library.get(id) {
                    Some(t) if t.covers(target.event.audio_type) => t,
                    _ => {
                        return Err(f.violation(
                            "tool_id",
                            format!("`{id}` does not generate {}", target.event.audio_type),
                        ))
                    }
                };
                let (prompt, extra) = spec_body(&f)?;
                let spec = finalize_spec(index, &target.event, tool, &prompt, extra, scene)?;
                if !target.candidates.iter().any(|c| c == id) {
                    target.candidates.insert(0, id.to_string());
                    for dropped in target.candidates.split_off(MAX_CANDIDATES.min(target.candidates.len())) {
                        target.specs.remove(&dropped);
                    }
                }
                target.specs.insert(id.to_string(), spec);
            }
            Some(out)
        }
    };
    Ok(AssignmentVerdict {
        decision,
        suggestions,
        replaced,
    })
}

pub async fn supervise_assignments(
    agent: &AgentClient,
    assignments: &[EventAssignment],
    library: &ToolLibrary,
    scene: &SceneContext,
) -> Result<AssignmentVerdict, Stage2Error> {
    let ctx = PromptContext::new()
        .var("assignments_json", assignments_json(assignments))
        .var("tool_catalog", library.to_json());
    let verdict = agent
        .ask(
            RoleName::AssignmentSupervisor,
            None,
            "review",
            &ctx,
            "assignment_verdict",
            |text| parse_assignment_verdict(text, assignments, library, scene),
        )
        .await?;
    Ok(verdict)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Options {
    pub self_refine_iters: usize,
    pub collaborative_passes: usize,
    pub supervision_rounds: usize,
    pub expert_order: Vec<AudioType>,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            self_refine_iters: DEFAULT_SELF_REFINE_ITERS,
            collaborative_passes: DEFAULT_COLLABORATIVE_PASSES,
            supervision_rounds: DEFAULT_SUPERVISION_ROUNDS,
            expert_order: AudioType::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Outcome {
    /// In plan order.
    pub assignments: Vec<EventAssignment>,
    /// Self-review calls per assignment.
    pub self_refine_calls: Vec<usize>,
    /// Standalone spec-refinement calls made for candidates the selection left bare.
    pub refine_calls: usize,
    pub collaborative_passes: usize,
    /// Expert turns across all collaborative passes.
    pub collaborative_turns: usize,
    pub decisions: Vec<Decision>,
    /// The last supervision round still asked for revisions.
    pub forced_acceptance: bool,
    pub calls: usize,
}

/// Stage 2 over an approved plan. Events are processed in plan order.
pub async fn run_stage2(
    agent: &AgentClient,
    plan: &EventPlan,
    library: &ToolLibrary,
    scene: &SceneContext,
    opts: &Stage2Options,
) -> Result<Stage2Outcome, Stage2Error> {
    let start_calls = agent.calls();
    let routed = route(plan);
    for &t in routed.keys() {
        if library.generators_for(t).is_empty() {
            return Err(Stage2Error::NoToolForType(t));
        }
        if !opts.expert_order.contains(&t) {
            return Err(Stage2Error::BadExpertOrder(format!("{t} missing")));
        }
    }

    let mut assignments = Vec::with_capacity(plan.events.len());
    let mut self_refine_calls = Vec::with_capacity(plan.events.len());
    let mut refine_calls = 0;
    for (index, event) in plan.events.iter().enumerate() {
        let before = agent.calls();
        let assignment = assign_event(agent, index, event, library, scene).await?;
        let selected_calls = agent.calls() - before;
        refine_calls += selected_calls.saturating_sub(1);
        let (assignment, iters) = self_refine(agent, assignment, library, scene, opts.self_refine_iters).await?;
        assignments.push(assignment);
        self_refine_calls.push(iters);
    }

    let mut passes = 0;
    let mut turns = 0;
    for _ in 0..opts.collaborative_passes {
        let (next, t) = collaborative_refine(agent, assignments, &opts.expert_order, &[], library, scene).await?;
        assignments = next;
        turns += t;
        passes += 1;
    }

    let mut decisions = Vec::new();
    let mut forced_acceptance = false;
    for round in 1..=opts.supervision_rounds {
        let verdict = supervise_assignments(agent, &assignments, library, scene).await?;
        decisions.push(verdict.decision);
        let last = round == opts.supervision_rounds;
        match verdict.decision {
            Decision::Approve => break,
            Decision::Revise if last => {
                tracing::info!("assignment supervision rounds exhausted; accepting current assignments");
                forced_acceptance = true;
            }
            Decision::Revise => {
                let (next, t) = collaborative_refine(
                    agent,
                    assignments,
                    &opts.expert_order,
                    &verdict.suggestions,
                    library,
                    scene,
                )
                .await?;
                assignments = next;
                turns += t;
                passes += 1;
            }
            Decision::Rewrite => {
                assignments = verdict.replaced.expect("rewrite carries replacements");
            }
        }
    }

    debug_assert!(assignments.iter().all(|a| a.check(library).is_ok()));
    Ok(Stage2Outcome {
        assignments,
        self_refine_calls,
        refine_calls,
        collaborative_passes: passes,
        collaborative_turns: turns,
        decisions,
        forced_acceptance,
        calls: agent.calls() - start_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::tests::arb_event;
    use crate::test_support::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn lib() -> ToolLibrary {
        ToolLibrary::default()
    }

    fn scene() -> SceneContext {
        SceneContext {
            caption: "busy street at dusk".into(),
            video_ref: None,
        }
    }

    fn song_event() -> AudioEvent {
        street_plan().events[3].clone()
    }

    fn music_event() -> AudioEvent {
        event(AudioType::Music, "band", 0.0, 10.0, "a slow jazz band")
    }

    #[test]
    fn route_street_scene() {
        let plan = street_plan();
        let routed = route(&plan);
        assert_eq!(routed.len(), 2);
        assert_eq!(
            routed[&AudioType::SoundEffect].iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            [0, 1, 2]
        );
        assert_eq!(routed[&AudioType::Song].len(), 1);

        let one = EventPlan {
            scene_caption: String::new(),
            total_duration: None,
            events: vec![event(AudioType::Speech, "host", 0.0, 2.0, "hello")],
        };
        assert_eq!(route(&one)[&AudioType::Speech][0].1, &one.events[0]);
    }

    proptest! {
        #[test]
        fn routing_is_a_partition(events in prop::collection::vec(arb_event(), 1..20)) {
            let plan = EventPlan { scene_caption: String::new(), total_duration: None, events };
            let routed = route(&plan);
            let mut indices: Vec<usize> = routed.values().flatten().map(|(i, _)| *i).collect();
            prop_assert_eq!(indices.len(), plan.events.len());
            for (t, list) in &routed {
                prop_assert!(list.windows(2).all(|w| w[0].0 < w[1].0));
                prop_assert!(list.iter().all(|(i, e)| e.audio_type == *t && *e == &plan.events[*i]));
            }
            indices.sort();
            prop_assert_eq!(indices, (0..plan.events.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn filter_rules() {
        let l = lib();
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(
            filter_candidates(&ids(&["MusicGen", "InspireMusic"]), AudioType::Music, &l),
            (ids(&["MusicGen", "InspireMusic"]), false)
        );
        assert_eq!(
            filter_candidates(&ids(&["FooGen"]), AudioType::Music, &l),
            (ids(&["InspireMusic", "MusicGen"]), true)
        );
        assert_eq!(
            filter_candidates(&ids(&["MusicGen", "DiffRhythm", "MusicGen", "AudioSR"]), AudioType::Music, &l),
            (ids(&["MusicGen"]), false)
        );
        assert_eq!(
            filter_candidates(&ids(&["DiffRhythm", "MusicGen"]), AudioType::Song, &l),
            (ids(&["DiffRhythm"]), false)
        );
    }

    fn music_selection() -> serde_json::Value {
        json!({
            "candidates": ["InspireMusic", "MusicGen"],
            "specs": {
                "InspireMusic": {"prompt": "slow jazz band, warm", "extra": {"tempo": "70"}},
                "MusicGen": {"prompt": "slow jazz", "extra": {}}
            }
        })
    }

    #[tokio::test]
    async fn select_music_is_subset_of_library() {
        let backend = scripted(json!({"expert:music": [music_selection()]}));
        let sel = select_candidates(&client(backend.clone()), 0, &music_event(), &lib(), &scene())
            .await
            .unwrap();
        assert_eq!(sel.candidates, ["InspireMusic", "MusicGen"]);
        assert_eq!(sel.specs["InspireMusic"].extra["tempo"], "70");
        assert_eq!(backend.calls()[0].request.channel.as_deref(), Some("e0"));
    }

    #[tokio::test]
    async fn unknown_pick_falls_back_and_refines() {
        let backend = scripted(json!({"expert:music": [
            {"candidates": ["FooGen"]},
            {"prompt": "jazz A", "extra": {}},
            {"prompt": "jazz B", "extra": {}}
        ]}));
        let agent = client(backend.clone());
        let a = assign_event(&agent, 0, &music_event(), &lib(), &scene()).await.unwrap();
        assert_eq!(a.candidates, ["InspireMusic", "MusicGen"]);
        assert_eq!(a.specs["MusicGen"].prompt, "jazz B");
        assert_eq!(agent.calls(), 3);
        a.check(&lib()).unwrap();
    }

    #[tokio::test]
    async fn song_has_single_candidate_with_lyrics() {
        let backend = scripted(json!({"expert:song": [{
            "candidates": ["DiffRhythm", "MusicGen"],
            "specs": {"DiffRhythm": {"prompt": "folk ballad", "extra": {"lyrics": "[00:01.00] walking the streets"}}}
        }]}));
        let a = assign_event(&client(backend), 3, &song_event(), &lib(), &scene()).await.unwrap();
        assert_eq!(a.candidates, ["DiffRhythm"]);
        assert!(a.specs["DiffRhythm"].extra.contains_key("lyrics"));
        assert_eq!(a.specs["DiffRhythm"].duration_s, 30.0);
    }

    #[test]
    fn spec_rules() {
        let l = lib();
        let fireworks = street_plan().events[1].clone();
        let mmaudio = l.get("MMAudio").unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("lyrics".to_string(), "la la".to_string());
        let with_video = SceneContext {
            caption: String::new(),
            video_ref: Some("street.mp4".into()),
        };
        let spec = finalize_spec(1, &fireworks, mmaudio, " bangs ", extra, &with_video).unwrap();
        assert_eq!(spec.duration_s, 4.5);
        assert_eq!(spec.prompt, "bangs");
        assert!(!spec.extra.contains_key("lyrics"));
        assert_eq!(spec.extra["video_ref"], "street.mp4");

        let err = finalize_spec(1, &fireworks, mmaudio, "  ", BTreeMap::new(), &scene()).unwrap_err();
        assert!(err.is_schema_violation());
        let err = finalize_spec(3, &song_event(), l.get("DiffRhythm").unwrap(), "folk", BTreeMap::new(), &scene())
            .unwrap_err();
        assert!(err.to_string().contains("extra.lyrics"), "{err}");
    }

    fn music_assignment() -> EventAssignment {
        let l = lib();
        let sel = parse_selection(&music_selection().to_string(), 0, &music_event(), &l, &scene()).unwrap();
        EventAssignment {
            event_index: 0,
            event: music_event(),
            candidates: sel.candidates,
            specs: sel.specs,
        }
    }

    #[tokio::test]
    async fn self_refine_fixed_point_rewrite_and_zero() {
        let l = lib();
        let backend = scripted(json!({"expert:music": [{"changes": false}]}));
        let agent = client(backend);
        let (a, calls) = self_refine(&agent, music_assignment(), &l, &scene(), 2).await.unwrap();
        assert_eq!((a, calls), (music_assignment(), 1));

        let backend = scripted(json!({"expert:music": [
            {"changes": true, "specs": {"MusicGen": {"prompt": "slow jazz, brushed drums", "extra": {}}}},
            {"changes": false}
        ]}));
        let agent = client(backend);
        let (a, calls) = self_refine(&agent, music_assignment(), &l, &scene(), 2).await.unwrap();
        assert_eq!(calls, 2);
        assert_eq!(a.specs["MusicGen"].prompt, "slow jazz, brushed drums");
        assert_eq!(a.event, music_event());

        let agent = client(scripted(json!({})));
        let (a, calls) = self_refine(&agent, music_assignment(), &l, &scene(), 0).await.unwrap();
        assert_eq!((a, calls, agent.calls()), (music_assignment(), 0, 0));
    }

    #[test]
    fn self_review_cannot_add_candidates() {
        let text = r#"{"changes": true, "specs": {"DiffRhythm": {"prompt": "x"}}}"#;
        assert!(parse_self_review(text, &music_assignment(), &lib(), &scene()).is_err());
    }

    fn song_assignment() -> EventAssignment {
        let mut extra = BTreeMap::new();
        extra.insert("lyrics".to_string(), "verse".to_string());
        let spec = finalize_spec(1, &song_event(), lib().get("DiffRhythm").unwrap(), "city ballad", extra, &scene())
            .unwrap();
        EventAssignment {
            event_index: 1,
            event: song_event(),
            candidates: vec!["DiffRhythm".into()],
            specs: BTreeMap::from([("DiffRhythm".to_string(), spec)]),
        }
    }

    #[tokio::test]
    async fn collaboration_rules() {
        let l = lib();
        let all = vec![music_assignment(), song_assignment()];

        let backend = scripted(json!({"expert:music": [{"changes": false}], "expert:song": [{"changes": false}]}));
        let agent = client(backend.clone());
        let (out, turns) = collaborative_refine(&agent, all.clone(), &AudioType::ALL, &[], &l, &scene())
            .await
            .unwrap();
        assert_eq!((out, turns), (all.clone(), 2));
        let keys: Vec<_> = backend.calls().into_iter().map(|c| c.key).collect();
        assert_eq!(keys, ["expert:music", "expert:song"]);

        let backend = scripted(json!({
            "expert:music": [{"amendments": [{"event_index": 1, "style_tags": ["folk, live"], "volume": 0.8}]}],
            "expert:song": [{"changes": false}]
        }));
        let (out, _) = collaborative_refine(&client(backend), all.clone(), &AudioType::ALL, &[], &l, &scene())
            .await
            .unwrap();
        assert!(out[1].specs["DiffRhythm"].prompt.contains("folk, live"));
        assert_eq!(out[1].event.volume, 0.8);
        assert_eq!(out[1].event.start_time, all[1].event.start_time);
        assert_eq!(out[1].event.end_time, all[1].event.end_time);

        let foreign = json!({"amendments": [{"event_index": 1, "tool_id": "DiffRhythm", "prompt": "rock"}]}).to_string();
        assert!(apply_amendments(&foreign, AudioType::Music, &all, &l, &scene()).is_err());
        let own = json!({"amendments": [{"event_index": 0, "tool_id": "MusicGen", "prompt": "bebop"}]}).to_string();
        let out = apply_amendments(&own, AudioType::Music, &all, &l, &scene()).unwrap();
        assert_eq!(out[0].specs["MusicGen"].prompt, "bebop");
        let loud = json!({"amendments": [{"event_index": 1, "volume": 3.0}]}).to_string();
        assert!(apply_amendments(&loud, AudioType::Music, &all, &l, &scene()).is_err());

        let err = collaborative_refine(
            &client(scripted(json!({}))),
            all,
            &[AudioType::Music],
            &[],
            &l,
            &scene(),
        )
        .await
        .unwrap_err();
        assert!(matches!(err, Stage2Error::BadExpertOrder(_)));
    }

    #[test]
    fn rewrite_replacement_is_validated() {
        let l = lib();
        let all = vec![music_assignment(), song_assignment()];
        let bad = json!({"decision": "rewrite", "replacement_specs": [
            {"event_index": 1, "tool_id": "MusicGen", "prompt": "song"}
        ]})
        .to_string();
        assert!(parse_assignment_verdict(&bad, &all, &l, &scene()).is_err());
        let good = json!({"decision": "rewrite", "replacement_specs": [
            {"event_index": 0, "tool_id": "MusicGen", "prompt": "swing trio", "extra": {}}
        ]})
        .to_string();
        let v = parse_assignment_verdict(&good, &all, &l, &scene()).unwrap();
        let replaced = v.replaced.unwrap();
        assert_eq!(replaced[0].specs["MusicGen"].prompt, "swing trio");
        for a in &replaced {
            a.check(&l).unwrap();
        }
    }

    fn street_replies(supervisor: Vec<serde_json::Value>, extra_pass: bool) -> serde_json::Value {
        let se = |prompt: &str| {
            json!({"candidates": ["MMAudio", "Auffusion"], "specs": {
                "MMAudio": {"prompt": prompt}, "Auffusion": {"prompt": prompt}
            }})
        };
        let rewrite = |prompt: &str| json!({"changes": true, "specs": {"Auffusion": {"prompt": prompt}}});
        let no = json!({"changes": false});
        let passes = if extra_pass { 2 } else { 1 };
        json!({
            "expert:sound_effect@e0": [se("footsteps and cheers"), rewrite("crowd"), rewrite("crowd, cheering")],
            "expert:sound_effect@e1": [se("fireworks"), no],
            "expert:sound_effect@e2": [se("shop ambience"), rewrite("shops"), no],
            "expert:sound_effect": vec![no.clone(); passes],
            "expert:song@e3": [
                {"candidates": ["DiffRhythm"], "specs": {"DiffRhythm": {"prompt": "folk", "extra": {"lyrics": "la"}}}},
                no
            ],
            "expert:song": vec![no.clone(); passes],
            "assignment_supervisor": supervisor
        })
    }

    #[tokio::test]
    async fn stage2_call_count_matches_closed_form() {
        let plan = street_plan();
        let revise = json!({"decision": "revise", "suggestions": ["quieter shops"]});
        let backend = scripted(street_replies(vec![revise.clone(), revise], true));
        let agent = client(backend.clone());
        let out = run_stage2(&agent, &plan, &lib(), &scene(), &Stage2Options::default())
            .await
            .unwrap();
        assert_eq!(out.self_refine_calls, [2, 1, 2, 1]);
        assert_eq!(out.collaborative_passes, 2);
        assert_eq!(out.decisions, [Decision::Revise, Decision::Revise]);
        assert!(out.forced_acceptance);
        let types = 2;
        let closed_form = plan.events.len() + out.self_refine_calls.iter().sum::<usize>()
            + types * out.collaborative_passes
            + out.decisions.len();
        assert_eq!(out.calls, closed_form);
        assert_eq!(backend.calls().len(), closed_form);
        assert!(backend.remaining().values().all(|&n| n == 0));
        let bound = plan.events.len() * (1 + DEFAULT_SELF_REFINE_ITERS) + types * 2 + 2;
        assert!(out.calls <= bound);
        assert_eq!(out.assignments[0].specs["Auffusion"].prompt, "crowd, cheering");
        for a in &out.assignments {
            a.check(&lib()).unwrap();
        }
    }

    #[tokio::test]
    async fn stage2_approve_passes_through() {
        let backend = scripted(street_replies(vec![json!({"decision": "approve"})], false));
        let out = run_stage2(&client(backend), &street_plan(), &lib(), &scene(), &Stage2Options::default())
            .await
            .unwrap();
        assert_eq!(out.decisions, [Decision::Approve]);
        assert!(!out.forced_acceptance);
        assert_eq!(out.calls, 4 + 6 + 2 + 1);
    }

    #[tokio::test]
    async fn missing_generator_fails_before_any_call() {
        let l = ToolLibrary::from_json(
            r#"[{"id":"A","task":"t","input_modalities":["text"],"audio_types":["music"],"kind":"generator"}]"#,
        )
        .unwrap();
        let agent = client(scripted(json!({})));
        let err = run_stage2(&agent, &street_plan(), &l, &scene(), &Stage2Options::default())
            .await
            .unwrap_err();
        assert!(matches!(err, Stage2Error::NoToolForType(AudioType::SoundEffect)));
        assert_eq!(agent.calls(), 0);
    }
}
