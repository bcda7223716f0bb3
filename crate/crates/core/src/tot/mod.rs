//! Per-event tree-of-thought search over generation attempts.
//!
//! The root holds the event assignment. Generation children are tried left to right;
//! each may own a chain of refinement nodes that post-process its artifact.

mod run;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::audio::AudioArtifact;
use crate::experts::EventAssignment;
use crate::mixer::PostProcessAction;
use crate::reply::{extract_first_json, Fields, ReplyError};
use crate::tools::{GenerationSpec, ToolKind, ToolLibrary};

pub use run::{evaluate, retry_strategy, run_event, EventOutcome, RetryPlan, TotContext, TotError};

pub const DEFAULT_MAX_RETRIES: usize = 2;
pub const DEFAULT_MAX_FIX_CHAIN: usize = 2;
pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;
pub const ACCEPT_THRESHOLD: f64 = 3.5;
pub const RETRY_BELOW_MEAN: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Generation siblings allowed after the first attempt.
    pub max_retries: usize,
    /// Refinement nodes allowed under one generation node.
    pub max_fix_chain: usize,
}

impl Budget {
    pub fn max_nodes(&self) -> usize {
        1 + (1 + self.max_retries) * (1 + self.max_fix_chain)
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_retries: DEFAULT_MAX_RETRIES,
            max_fix_chain: DEFAULT_MAX_FIX_CHAIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueTag {
    LeadingSilence,
    Noise,
    LowVolume,
    Clipped,
    WrongContent,
    OffStyle,
    Other,
}

impl IssueTag {
    fn parse(s: &str) -> IssueTag {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "leading_silence" => IssueTag::LeadingSilence,
            "noise" => IssueTag::Noise,
            "low_volume" => IssueTag::LowVolume,
            "clipped" => IssueTag::Clipped,
            "wrong_content" => IssueTag::WrongContent,
            "off_style" => IssueTag::OffStyle,
            _ => IssueTag::Other,
        }
    }

    /// Issues a post-processing step may repair.
    pub fn is_fixable(self) -> bool {
        matches!(
            self,
            IssueTag::LeadingSilence | IssueTag::Noise | IssueTag::LowVolume | IssueTag::Clipped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub tag: IssueTag,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Fixable,
    Retry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub quality: f64,
    pub alignment: f64,
    pub aesthetics: f64,
    pub issues: Vec<Issue>,
    pub verdict: Option<Verdict>,
}

impl EvalReport {
    pub fn score_sum(&self) -> f64 {
        self.quality + self.alignment + self.aesthetics
    }

    pub fn mean(&self) -> f64 {
        self.score_sum() / 3.0
    }

    pub fn has(&self, tag: IssueTag) -> bool {
        self.issues.iter().any(|i| i.tag == tag)
    }

    /// Short failure description used when asking an expert to adjust a prompt.
    pub fn summary(&self) -> String {
        let mut text = format!(
            "quality {:.1}, alignment {:.1}, aesthetics {:.1}",
            self.quality, self.alignment, self.aesthetics
        );
        for issue in &self.issues {
            text.push_str(&format!("; {:?}: {}", issue.tag, issue.detail));
        }
        text
    }
}

/// Parses an evaluator reply. Scores are clamped into [1, 5]; an `accept` verdict that
/// reports wrong content is downgraded to `retry`.
pub fn parse_eval_report(text: &str) -> Result<EvalReport, ReplyError> {
    let value = extract_first_json(text)?;
    let fields = Fields::new(&value, None, "report")?;
    let score = |name: &str| fields.f64(name).map(|s| s.clamp(MIN_SCORE, MAX_SCORE));
    let quality = score("quality")?;
    let alignment = score("alignment")?;
    let aesthetics = score("aesthetics")?;
    let mut issues = Vec::new();
    match fields.get("issues") {
        None => {}
        Some(serde_json::Value::Array(items)) => {
            for item in items {
                let issue = match item {
                    serde_json::Value::String(tag) => Issue {
                        tag: IssueTag::parse(tag),
                        detail: String::new(),
                    },
                    _ => {
                        let f = Fields::new(item, None, "issues")?;
                        Issue {
                            tag: IssueTag::parse(f.str("tag")?),
                            detail: f.opt_str("detail")?.unwrap_or_default().to_string(),
                        }
                    }
                };
                issues.push(issue);
            }
        }
        Some(_) => return Err(fields.violation("issues", "expected a list")),
    }
    let mut verdict = match fields.opt_str("verdict")? {
        None => None,
        Some("accept") => Some(Verdict::Accept),
        Some("fixable") => Some(Verdict::Fixable),
        Some("retry") => Some(Verdict::Retry),
        Some(other) => return Err(fields.violation("verdict", format!("unknown verdict `{other}`"))),
    };
    let report_has_wrong_content = issues.iter().any(|i| i.tag == IssueTag::WrongContent);
    if verdict == Some(Verdict::Accept) && report_has_wrong_content {
        verdict = Some(Verdict::Retry);
    }
    Ok(EvalReport {
        quality,
        alignment,
        aesthetics,
        issues,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum NextAction {
    Accept,
    Refine(Vec<PostProcessAction>),
    Retry,
}

/// Classification knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyPolicy {
    /// Post-processor handling `noise` through `super_resolution`, when registered.
    pub super_resolution_tool: Option<String>,
}

impl ClassifyPolicy {
    pub fn for_library(library: &ToolLibrary) -> Self {
        let tool = library
            .iter()
            .find(|t| t.kind == ToolKind::PostProcessor && t.task == "Super Resolution")
            .map(|t| t.id.clone());
        ClassifyPolicy {
            super_resolution_tool: tool,
        }
    }

    /// Action repairing `tag`, if one is available.
    pub fn action_for(&self, tag: IssueTag) -> Option<PostProcessAction> {
        match tag {
            IssueTag::LeadingSilence => Some(PostProcessAction::trim_default()),
            IssueTag::LowVolume => Some(PostProcessAction::gain_toward_peak(0.95, 6.0)),
            IssueTag::Clipped => Some(PostProcessAction::gain_toward_peak(0.95, 0.0)),
            IssueTag::Noise => self.super_resolution_tool.as_ref().map(|id| PostProcessAction::External {
                tool_id: id.clone(),
                action: "super_resolution".into(),
                params: Default::default(),
            }),
            _ => None,
        }
    }

    /// Mapped actions for the report's fixable issues, in issue order. `None` when
    /// there are none or any of them has no available action.
    fn fixes(&self, report: &EvalReport) -> Option<Vec<PostProcessAction>> {
        let mut seen = BTreeSet::new();
        let mut actions = Vec::new();
        for issue in report.issues.iter().filter(|i| i.tag.is_fixable()) {
            if seen.insert(issue.tag) {
                actions.push(self.action_for(issue.tag)?);
            }
        }
        (!actions.is_empty()).then_some(actions)
    }
}

/// Decides what follows an evaluation. The verdict wins when present.
pub fn classify(report: &EvalReport, policy: &ClassifyPolicy) -> NextAction {
    let refine_or_retry = || policy.fixes(report).map_or(NextAction::Retry, NextAction::Refine);
    match report.verdict {
        Some(Verdict::Accept) => NextAction::Accept,
        Some(Verdict::Fixable) => refine_or_retry(),
        Some(Verdict::Retry) => NextAction::Retry,
        None => {
            if report.mean() < RETRY_BELOW_MEAN || report.has(IssueTag::WrongContent) {
                NextAction::Retry
            } else if report.issues.iter().any(|i| i.tag.is_fixable()) {
                refine_or_retry()
            } else if [report.quality, report.alignment, report.aesthetics]
                .iter()
                .all(|&s| s >= ACCEPT_THRESHOLD)
            {
                NextAction::Accept
            } else {
                NextAction::Retry
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Initial,
    Generation,
    Refinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum NodePayload {
    Assignment(EventAssignment),
    Generation(GenerationSpec),
    Refinement(Vec<PostProcessAction>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToTNode {
    pub id: usize,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    /// Left to right in trial order.
    pub children: Vec<usize>,
    pub payload: NodePayload,
    pub artifact: Option<AudioArtifact>,
    pub artifact_ref: Option<String>,
    pub report: Option<EvalReport>,
    pub status: NodeStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTree {
    nodes: Vec<ToTNode>,
    pub budget: Budget,
}

impl GenerationTree {
    pub fn new(assignment: EventAssignment, budget: Budget) -> Self {
        let root = ToTNode {
            id: 0,
            kind: NodeKind::Initial,
            parent: None,
            children: Vec::new(),
            payload: NodePayload::Assignment(assignment),
            artifact: None,
            artifact_ref: None,
            report: None,
            status: NodeStatus::Done,
            error: None,
        };
        GenerationTree {
            nodes: vec![root],
            budget,
        }
    }

    pub const ROOT: usize = 0;

    pub fn add(&mut self, parent: usize, payload: NodePayload) -> usize {
        let kind = match payload {
            NodePayload::Assignment(_) => panic!("only the root holds the assignment"),
            NodePayload::Generation(_) => NodeKind::Generation,
            NodePayload::Refinement(_) => NodeKind::Refinement,
        };
        debug_assert!(match kind {
            NodeKind::Generation => parent == Self::ROOT,
            _ => self.nodes[parent].kind != NodeKind::Initial,
        });
        let id = self.nodes.len();
        self.nodes.push(ToTNode {
            id,
            kind,
            parent: Some(parent),
            children: Vec::new(),
            payload,
            artifact: None,
            artifact_ref: None,
            report: None,
            status: NodeStatus::Pending,
            error: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn node(&self, id: usize) -> &ToTNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut ToTNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[ToTNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn assignment(&self) -> &EventAssignment {
        match &self.nodes[Self::ROOT].payload {
            NodePayload::Assignment(a) => a,
            _ => unreachable!("root holds the assignment"),
        }
    }

    /// Number of ancestors.
    pub fn depth(&self, id: usize) -> usize {
        let mut depth = 0;
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            depth += 1;
            cur = self.nodes[p].parent;
        }
        depth
    }

    /// Node ids in pre-order, children left to right.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![Self::ROOT];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        out
    }

    pub fn generation_nodes(&self) -> impl Iterator<Item = &ToTNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Generation)
    }

    /// Generator spec a node's artifact derives from.
    pub fn generation_spec(&self, id: usize) -> Option<&GenerationSpec> {
        let mut cur = Some(id);
        while let Some(i) = cur {
            if let NodePayload::Generation(spec) = &self.nodes[i].payload {
                return Some(spec);
            }
            cur = self.nodes[i].parent;
        }
        None
    }
}

/// Node with the highest mean score among evaluated artifacts. Ties go to the
/// shallower node, then to the leftmost in pre-order.
pub fn best_result(tree: &GenerationTree) -> Option<usize> {
    let mut best: Option<(usize, f64, usize)> = None;
    for id in tree.preorder() {
        let node = tree.node(id);
        let (Some(_), Some(report)) = (&node.artifact, &node.report) else {
            continue;
        };
        let sum = report.score_sum();
        let depth = tree.depth(id);
        let better = match best {
            None => true,
            Some((_, best_sum, best_depth)) => sum > best_sum || (sum == best_sum && depth < best_depth),
        };
        if better {
            best = Some((id, sum, depth));
        }
    }
    best.map(|(id, _, _)| id)
}

/// Serializable view of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTrace {
    pub event_index: usize,
    pub budget: Budget,
    pub nodes: Vec<NodeTrace>,
    pub edges: Vec<(usize, usize)>,
    pub selected: Option<usize>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub id: usize,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    pub status: NodeStatus,
    pub tool_id: Option<String>,
    pub payload: NodePayload,
    pub artifact: Option<String>,
    pub duration_s: Option<f64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

impl TreeTrace {
    pub fn new(tree: &GenerationTree, selected: Option<usize>, accepted: bool) -> Self {
        let nodes: Vec<NodeTrace> = tree
            .nodes()
            .iter()
            .map(|n| NodeTrace {
                id: n.id,
                kind: n.kind,
                parent: n.parent,
                children: n.children.clone(),
                depth: tree.depth(n.id),
                status: n.status,
                tool_id: match &n.payload {
                    NodePayload::Generation(spec) => Some(spec.tool_id.clone()),
                    _ => None,
                },
                payload: n.payload.clone(),
                artifact: n.artifact_ref.clone(),
                duration_s: n.artifact.as_ref().map(|a| a.duration_s()),
                report: n.report.clone(),
                error: n.error.clone(),
            })
            .collect();
        let edges = tree
            .nodes()
            .iter()
            .flat_map(|n| n.children.iter().map(move |&c| (n.id, c)))
            .collect();
        TreeTrace {
            event_index: tree.assignment().event_index,
            budget: tree.budget,
            nodes,
            edges,
            selected,
            accepted,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("trace serializes");
        text.push('\n');
        text
    }
}
