//! Fine-grained task decomposition: the planner proposes an event plan and the plan
//! supervisor approves, asks for revisions, or rewrites it.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentClient, AgentError, Attachment, AttachmentKind, PromptContext, RoleName};
use crate::plan::{parse_plan, plan_from_value, serialize_plan, validate_plan, EventPlan, InputDescriptor, InputError};
use crate::reply::{extract_first_json, Fields, ReplyError};

pub const DEFAULT_PLAN_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Revise,
    Rewrite,
}

impl Decision {
    pub(crate) fn parse(fields: &Fields<'_>) -> Result<Self, ReplyError> {
        match fields.str("decision")? {
            "approve" => Ok(Decision::Approve),
            "revise" => Ok(Decision::Revise),
            "rewrite" => Ok(Decision::Rewrite),
            other => Err(fields.violation("decision", format!("unknown decision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanVerdict {
    pub decision: Decision,
    pub suggestions: Vec<String>,
    /// Present iff the decision is `rewrite`.
    pub replacement_plan: Option<EventPlan>,
}

pub fn parse_plan_verdict(text: &str) -> Result<PlanVerdict, ReplyError> {
    let value = extract_first_json(text)?;
    let fields = Fields::new(&value, None, "verdict")?;
    let decision = Decision::parse(&fields)?;
    let suggestions = fields.str_list("suggestions")?;
    let replacement_plan = match decision {
        Decision::Approve => None,
        Decision::Revise => {
            if suggestions.iter().all(|s| s.trim().is_empty()) {
                return Err(fields.violation("suggestions", "a revise verdict needs at least one suggestion"));
            }
            None
        }
        Decision::Rewrite => {
            let plan = fields
                .get("replacement_plan")
                .ok_or_else(|| fields.violation("replacement_plan", "required for rewrite"))?;
            Some(plan_from_value(plan)?)
        }
    };
    Ok(PlanVerdict {
        decision,
        suggestions,
        replacement_plan,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum Stage1Error {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn media_attachments(input: &InputDescriptor) -> Vec<Attachment> {
    let images = input.image_refs.iter().map(|r| Attachment {
        kind: AttachmentKind::Image,
        reference: r.clone(),
    });
    let video = input.video_ref.iter().map(|r| Attachment {
        kind: AttachmentKind::Video,
        reference: r.clone(),
    });
    images.chain(video).collect()
}

fn or_none(text: &str) -> &str {
    if text.trim().is_empty() {
        "none"
    } else {
        text
    }
}

fn input_context(input: &InputDescriptor, caption: &str) -> PromptContext {
    PromptContext {
        attachments: media_attachments(input),
        ..Default::default()
    }
    .var("input_text", or_none(input.text.as_deref().unwrap_or("")))
    .var("scene_caption", or_none(caption))
    .var(
        "duration",
        input.duration_s.map(|d| format!("{d:.3}")).unwrap_or_else(|| "unknown".into()),
    )
}

fn parse_caption(text: &str) -> Result<String, ReplyError> {
    let caption = text.trim().trim_matches('`').trim();
    if caption.is_empty() {
        return Err(ReplyError::schema(None, "caption", "caption is empty"));
    }
    Ok(caption.to_string())
}

/// Scene caption for inputs with images or video. Precomputed captions and text-only
/// inputs make no backend call.
pub async fn caption_visuals(agent: &AgentClient, input: &InputDescriptor) -> Result<String, AgentError> {
    if let Some(caption) = &input.precomputed_caption {
        return Ok(caption.clone());
    }
    if !input.has_visuals() {
        return Ok(String::new());
    }
    let ctx = input_context(input, "");
    agent
        .ask(RoleName::Planner, None, "caption", &ctx, "caption", parse_caption)
        .await
}

/// Asks the planner for an event plan. `feedback` carries supervisor suggestions from a
/// previous round.
pub async fn decompose(
    agent: &AgentClient,
    input: &InputDescriptor,
    caption: &str,
    feedback: &str,
) -> Result<EventPlan, AgentError> {
    let ctx = input_context(input, caption).var("feedback", or_none(feedback));
    let mut plan = agent
        .ask(RoleName::Planner, None, "decompose", &ctx, "event_plan", parse_plan)
        .await?;
    plan.scene_caption = caption.to_string();
    plan.total_duration = input.duration_s;
    Ok(plan)
}

/// Supervisor review. Mechanical validation results are included in the prompt.
pub async fn supervise_plan(
    agent: &AgentClient,
    plan: &EventPlan,
    input: &InputDescriptor,
) -> Result<PlanVerdict, AgentError> {
    let violations = validate_plan(plan, input.duration_s);
    let violations_text = if violations.is_empty() {
        "none".to_string()
    } else {
        violations.iter().map(|v| format!("- {v}")).collect::<Vec<_>>().join("\n")
    };
    let ctx = input_context(input, &plan.scene_caption)
        .var("plan_json", serialize_plan(plan))
        .var("violations", violations_text);
    let mut verdict = agent
        .ask(RoleName::PlanSupervisor, None, "review", &ctx, "plan_verdict", parse_plan_verdict)
        .await?;
    if let Some(replacement) = verdict.replacement_plan.as_mut() {
        if replacement.scene_caption.is_empty() {
            replacement.scene_caption = plan.scene_caption.clone();
        }
        replacement.total_duration = input.duration_s;
    }
    Ok(verdict)
}

/// Result of the plan-and-verify loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: EventPlan,
    /// Set when no plan was approved within the round cap.
    pub best_effort: bool,
    /// Effective decision per completed supervision round. An approval overridden by
    /// mechanical validation is recorded as `revise`.
    pub decisions: Vec<Decision>,
    pub rounds: usize,
}

fn feedback_text(plan: &EventPlan, suggestions: &[String]) -> String {
    let mut text = String::from("Previous plan:\n");
    text.push_str(&serialize_plan(plan));
    text.push_str("Suggestions:\n");
    for s in suggestions {
        text.push_str("- ");
        text.push_str(s);
        text.push('\n');
    }
    text
}

/// Runs decompose → supervise for at most `max_rounds` supervision rounds.
///
/// A round whose planner or supervisor reply cannot be parsed is spent without a
/// verdict; only when no round produced a plan is that error returned. Unreachable
/// backends fail immediately.
pub async fn plan_loop(
    agent: &AgentClient,
    input: &InputDescriptor,
    max_rounds: usize,
) -> Result<PlanOutcome, Stage1Error> {
    input.validate()?;
    if max_rounds == 0 {
        return Err(Stage1Error::NoRounds);
    }
    let caption = caption_visuals(agent, input).await?;

    let mut current: Option<EventPlan> = None;
    let mut need_plan = true;
    let mut feedback = String::new();
    let mut decisions = Vec::new();
    let mut last_err = None;

    for round in 1..=max_rounds {
        if need_plan {
            match decompose(agent, input, &caption, &feedback).await {
                Ok(plan) => {
                    current = Some(plan);
                    need_plan = false;
                }
                Err(e) if e.is_unreachable() => return Err(e.into()),
                Err(e) => {
                    tracing::warn!(round, "planner reply unusable: {e}");
                    last_err = Some(e);
                    continue;
                }
            }
        }
        let plan = current.as_ref().expect("plan present after decompose");
        let verdict = match supervise_plan(agent, plan, input).await {
            Ok(v) => v,
            Err(e) if e.is_unreachable() => return Err(e.into()),
            Err(e) => {
                tracing::warn!(round, "supervisor reply unusable: {e}");
                last_err = Some(e);
                continue;
            }
        };
        let violations = validate_plan(plan, input.duration_s);
        match verdict.decision {
            Decision::Approve if violations.is_empty() => {
                decisions.push(Decision::Approve);
                return Ok(PlanOutcome {
                    plan: plan.clone(),
                    best_effort: false,
                    decisions,
                    rounds: round,
                });
            }
            Decision::Approve | Decision::Revise => {
                decisions.push(Decision::Revise);
                let mut suggestions = verdict.suggestions;
                suggestions.extend(violations.iter().map(|v| v.to_string()));
                feedback = feedback_text(plan, &suggestions);
                need_plan = true;
            }
            Decision::Rewrite => {
                decisions.push(Decision::Rewrite);
                current = verdict.replacement_plan;
                need_plan = false;
            }
        }
    }

    match current {
        Some(plan) => Ok(PlanOutcome {
            plan,
            best_effort: true,
            decisions,
            rounds: max_rounds,
        }),
        None => Err(last_err.expect("every round failed with an error").into()),
    }
}
