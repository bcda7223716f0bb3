use std::path::PathBuf;

use crate::agent::{AgentClient, AgentError, Attachment, AttachmentKind, PromptContext, RoleName};
use crate::audio::{write_wav, AudioArtifact};
use crate::experts::{channel, event_json, finalize_spec, spec_body, EventAssignment, SceneContext};
use crate::gateway::{DurationMismatch, ToolGateway, ToolRequest};
use crate::mixer::{apply_local_action, PostProcessAction};
use crate::plan::AudioEvent;
use crate::reply::{extract_first_json, Fields};
use crate::tools::{GenerationSpec, ToolLibrary};

use super::{
    best_result, classify, parse_eval_report, Budget, ClassifyPolicy, EvalReport, GenerationTree, NextAction,
    NodePayload, NodeStatus, TreeTrace,
};

#[derive(Debug, thiserror::Error)]
pub enum TotError {
    #[error("invalid assignment for event {event_index}: {reason}")]
    InvalidAssignment { event_index: usize, reason: String },
    #[error("retry budget exhausted")]
    BudgetExhausted,
    #[error("every generation attempt for event {event_index} failed at the tool level")]
    AllBranchesFailed { event_index: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("cannot write node artifact: {0}")]
    Io(String),
}

/// Shared inputs for running event trees.
pub struct TotContext<'a> {
    pub agent: &'a AgentClient,
    pub gateway: &'a ToolGateway,
    pub library: &'a ToolLibrary,
    pub scene: &'a SceneContext,
    pub budget: Budget,
    pub policy: ClassifyPolicy,
    /// When set, every node artifact is written here and passed to the evaluator by path.
    pub artifact_dir: Option<PathBuf>,
}

impl<'a> TotContext<'a> {
    pub fn new(
        agent: &'a AgentClient,
        gateway: &'a ToolGateway,
        library: &'a ToolLibrary,
        scene: &'a SceneContext,
    ) -> Self {
        TotContext {
            agent,
            gateway,
            library,
            scene,
            budget: Budget::default(),
            policy: ClassifyPolicy::for_library(library),
            artifact_dir: None,
        }
    }
}

/// How the next generation sibling is produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetryPlan {
    SwitchModel(String),
    /// Ask the expert to rewrite the most recent request for this tool.
    AdjustPrompt { tool_id: String },
}

/// Switches to the first candidate not yet tried, else adjusts the latest prompt.
pub fn retry_strategy(tree: &GenerationTree, retries_left: usize) -> Result<RetryPlan, TotError> {
    if retries_left == 0 {
        return Err(TotError::BudgetExhausted);
    }
    let tried: Vec<&str> = tree
        .generation_nodes()
        .filter_map(|n| match &n.payload {
            NodePayload::Generation(spec) => Some(spec.tool_id.as_str()),
            _ => None,
        })
        .collect();
    if let Some(unused) = tree.assignment().candidates.iter().find(|c| !tried.contains(&c.as_str())) {
        return Ok(RetryPlan::SwitchModel(unused.clone()));
    }
    let last = tried.last().copied().unwrap_or(&tree.assignment().candidates[0]);
    Ok(RetryPlan::AdjustPrompt {
        tool_id: last.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub tree: GenerationTree,
    pub selected: usize,
    /// False when the result came from the best-branch fallback.
    pub accepted: bool,
    /// Classification per evaluated or failed node, in execution order.
    pub verdicts: Vec<String>,
    pub evaluations: usize,
    pub adjust_calls: usize,
    pub duration_mismatches: Vec<(usize, DurationMismatch)>,
}

impl EventOutcome {
    pub fn event_index(&self) -> usize {
        self.tree.assignment().event_index
    }

    pub fn artifact(&self) -> &AudioArtifact {
        self.tree
            .node(self.selected)
            .artifact
            .as_ref()
            .expect("selected node holds an artifact")
    }

    pub fn trace(&self) -> TreeTrace {
        TreeTrace::new(&self.tree, Some(self.selected), self.accepted)
    }
}

/// Scores one artifact with the evaluator role.
pub async fn evaluate(
    agent: &AgentClient,
    index: usize,
    event: &AudioEvent,
    spec: &GenerationSpec,
    audio_ref: &str,
) -> Result<EvalReport, AgentError> {
    let ctx = PromptContext::new()
        .var("audio_ref", audio_ref)
        .var("event_json", event_json(index, event))
        .var("spec_json", serde_json::to_string(spec).expect("spec serializes"))
        .attach(Attachment {
            kind: AttachmentKind::Audio,
            reference: audio_ref.to_string(),
        });
    agent
        .ask(
            RoleName::AudioEvaluator,
            Some(&channel(index)),
            "evaluate",
            &ctx,
            "eval_report",
            parse_eval_report,
        )
        .await
}

struct Run<'c, 'a> {
    ctx: &'c TotContext<'a>,
    tree: GenerationTree,
    index: usize,
    event: AudioEvent,
    verdicts: Vec<String>,
    evaluations: usize,
    adjust_calls: usize,
    mismatches: Vec<(usize, DurationMismatch)>,
}

impl Run<'_, '_> {
    fn fail(&mut self, node: usize, error: String) -> String {
        let n = self.tree.node_mut(node);
        n.status = NodeStatus::Failed;
        n.error = Some(error.clone());
        self.verdicts.push("error".into());
        error
    }

    /// Attaches an artifact to `node`, evaluates it and classifies the report.
    async fn settle(&mut self, node: usize, artifact: AudioArtifact) -> Result<(NextAction, EvalReport), TotError> {
        let file = format!("event_{:02}_node_{:02}.wav", self.index, node);
        let audio_ref = match &self.ctx.artifact_dir {
            Some(dir) => {
                let path = dir.join(&file);
                write_wav(&path, &artifact).map_err(|e| TotError::Io(e.to_string()))?;
                path.display().to_string()
            }
            None => format!("memory://{file}"),
        };
        {
            let n = self.tree.node_mut(node);
            n.artifact = Some(artifact);
            n.artifact_ref = Some(file);
        }
        let spec = self.tree.generation_spec(node).expect("artifact nodes descend from a generation").clone();
        let report = evaluate(self.ctx.agent, self.index, &self.event, &spec, &audio_ref).await?;
        self.evaluations += 1;
        let action = classify(&report, &self.ctx.policy);
        self.verdicts.push(
            match action {
                NextAction::Accept => "accept",
                NextAction::Refine(_) => "fixable",
                NextAction::Retry => "retry",
            }
            .into(),
        );
        let n = self.tree.node_mut(node);
        n.report = Some(report.clone());
        n.status = NodeStatus::Done;
        Ok((action, report))
    }

    async fn apply(&self, input: &AudioArtifact, actions: &[PostProcessAction]) -> Result<AudioArtifact, String> {
        let mut current = input.clone();
        for action in actions {
            current = match action {
                PostProcessAction::External {
                    tool_id,
                    action,
                    params,
                } => {
                    let request = ToolRequest::Process {
                        tool_id: tool_id.clone(),
                        action: action.clone(),
                        params: params.clone(),
                        input: current,
                    };
                    self.ctx
                        .gateway
                        .invoke(&request)
                        .await
                        .map_err(|e| e.to_string())?
                        .artifact
                }
                local => apply_local_action(&current, local).map_err(|e| e.to_string())?,
            };
        }
        Ok(current)
    }

    async fn adjust(&mut self, tool_id: &str, failure: &str) -> Result<GenerationSpec, TotError> {
        let last = self
            .tree
            .generation_nodes()
            .filter_map(|n| match &n.payload {
                NodePayload::Generation(spec) if spec.tool_id == tool_id => Some(spec.clone()),
                _ => None,
            })
            .last()
            .expect("adjusting a tool that was tried");
        let tool = self.ctx.library.get(tool_id).expect("candidates are in the library");
        let ctx = PromptContext::new()
            .var("event_json", event_json(self.index, &self.event))
            .var("spec_json", serde_json::to_string(&last).expect("spec serializes"))
            .var("failure", failure)
            .var("tool_id", tool_id);
        let (index, event, scene) = (self.index, &self.event, self.ctx.scene);
        let spec = self
            .ctx
            .agent
            .ask(
                RoleName::Expert(event.audio_type),
                Some(&channel(index)),
                "adjust_prompt",
                &ctx,
                "generation_spec",
                |text| {
                    let value = extract_first_json(text)?;
                    let (prompt, extra) = spec_body(&Fields::new(&value, Some(index), "spec")?)?;
                    finalize_spec(index, event, tool, &prompt, extra, scene)
                },
            )
            .await?;
        self.adjust_calls += 1;
        Ok(spec)
    }

    fn finish(self, selected: usize, accepted: bool) -> EventOutcome {
        EventOutcome {
            tree: self.tree,
            selected,
            accepted,
            verdicts: self.verdicts,
            evaluations: self.evaluations,
            adjust_calls: self.adjust_calls,
            duration_mismatches: self.mismatches,
        }
    }
}

/// Searches one event's tree until a node is accepted or the budget runs out, then
/// falls back to the best evaluated node.
pub async fn run_event(ctx: &TotContext<'_>, assignment: EventAssignment) -> Result<EventOutcome, TotError> {
    let index = assignment.event_index;
    assignment
        .check(ctx.library)
        .map_err(|reason| TotError::InvalidAssignment {
            event_index: index,
            reason,
        })?;
    let mut next_spec = assignment.priority_spec().clone();
    let mut run = Run {
        ctx,
        index,
        event: assignment.event.clone(),
        tree: GenerationTree::new(assignment, ctx.budget),
        verdicts: Vec::new(),
        evaluations: 0,
        adjust_calls: 0,
        mismatches: Vec::new(),
    };
    let budget = ctx.budget;
    let mut retries_used = 0;

    loop {
        let gen = run.tree.add(GenerationTree::ROOT, NodePayload::Generation(next_spec.clone()));
        let failure = match ctx.gateway.generate(&next_spec).await {
            Err(e) => run.fail(gen, e.to_string()),
            Ok(outcome) => {
                if let Some(m) = outcome.duration_mismatch {
                    run.mismatches.push((gen, m));
                }
                let mut node = gen;
                let mut artifact = outcome.artifact;
                let mut chain = 0;
                loop {
                    let (action, report) = run.settle(node, artifact).await?;
                    match action {
                        NextAction::Accept => return Ok(run.finish(node, true)),
                        NextAction::Retry => break report.summary(),
                        NextAction::Refine(_) if chain == budget.max_fix_chain => {
                            break format!("still needs fixing after {chain} refinements: {}", report.summary())
                        }
                        NextAction::Refine(actions) => {
                            chain += 1;
                            let child = run.tree.add(node, NodePayload::Refinement(actions.clone()));
                            let input = run.tree.node(node).artifact.clone().expect("settled node has audio");
                            match run.apply(&input, &actions).await {
                                Ok(next) => {
                                    node = child;
                                    artifact = next;
                                }
                                Err(e) => break run.fail(child, e),
                            }
                        }
                    }
                }
            }
        };
        if retries_used == budget.max_retries {
            break;
        }
        let plan = retry_strategy(&run.tree, budget.max_retries - retries_used)?;
        retries_used += 1;
        next_spec = match plan {
            RetryPlan::SwitchModel(id) => run.tree.assignment().specs[&id].clone(),
            RetryPlan::AdjustPrompt { tool_id } => run.adjust(&tool_id, &failure).await?,
        };
    }

    match best_result(&run.tree) {
        Some(id) => Ok(run.finish(id, false)),
        None => Err(TotError::AllBranchesFailed { event_index: index }),
    }
}
