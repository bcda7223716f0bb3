use std::fmt::Write as _;
use std::path::Path;

use super::PipelineError;
use crate::tot::{NodeKind, NodePayload, NodeStatus, NodeTrace, TreeTrace};

pub fn load_trace(path: &Path) -> Result<TreeTrace, PipelineError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| PipelineError::TraceParse(format!("{}: {e}", path.display())))?;
    parse_trace(&text).map_err(|e| match e {
        PipelineError::TraceParse(m) => PipelineError::TraceParse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses a trace and checks that ids, parents and children agree.
pub fn parse_trace(text: &str) -> Result<TreeTrace, PipelineError> {
    let trace: TreeTrace = serde_json::from_str(text).map_err(|e| PipelineError::TraceParse(e.to_string()))?;
    let bad = |m: String| Err(PipelineError::TraceParse(m));
    if trace.nodes.is_empty() {
        return bad("trace has no nodes".into());
    }
    for (i, n) in trace.nodes.iter().enumerate() {
        if n.id != i {
            return bad(format!("node at position {i} has id {}", n.id));
        }
        if (i == 0) != n.parent.is_none() {
            return bad(format!("node {i} has a wrong parent"));
        }
        for &c in &n.children {
            if trace.nodes.get(c).and_then(|child| child.parent) != Some(i) {
                return bad(format!("node {i} lists child {c} that does not point back"));
            }
        }
        if let Some(p) = n.parent {
            if !trace.nodes.get(p).is_some_and(|parent| parent.children.contains(&i)) {
                return bad(format!("node {i} is missing from its parent's children"));
            }
        }
    }
    if let Some(s) = trace.selected {
        if s >= trace.nodes.len() {
            return bad(format!("selected node {s} does not exist"));
        }
    }
    Ok(trace)
}

fn preorder(trace: &TreeTrace) -> Vec<usize> {
    let mut order = Vec::with_capacity(trace.nodes.len());
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        order.push(id);
        stack.extend(trace.nodes[id].children.iter().rev());
    }
    order
}

fn kind(n: &NodeTrace) -> &'static str {
    match n.kind {
        NodeKind::Initial => "initial",
        NodeKind::Generation => "generation",
        NodeKind::Refinement => "refinement",
    }
}

fn status(n: &NodeTrace) -> &'static str {
    match n.status {
        NodeStatus::Pending => "pending",
        NodeStatus::Done => "done",
        NodeStatus::Failed => "failed",
    }
}

fn label(n: &NodeTrace) -> String {
    let what = match &n.payload {
        NodePayload::Assignment(a) => format!("event {} {}", a.event_index, a.candidates.join("|")),
        NodePayload::Generation(spec) => spec.tool_id.clone(),
        NodePayload::Refinement(actions) => actions.iter().map(|a| a.name().to_string()).collect::<Vec<_>>().join("+"),
    };
    let mut s = format!("#{} {} {} [{}]", n.id, kind(n), what, status(n));
    if let Some(r) = &n.report {
        let _ = write!(s, " q={} a={} ae={}", r.quality, r.alignment, r.aesthetics);
    }
    if let Some(e) = &n.error {
        let _ = write!(s, " error={e}");
    }
    s
}

/// One line per node in preorder, indented by depth. The selected node is starred.
pub fn render_text(trace: &TreeTrace) -> String {
    let mut out = String::new();
    for id in preorder(trace) {
        let n = &trace.nodes[id];
        let mark = if trace.selected == Some(id) { " *" } else { "" };
        let _ = writeln!(out, "{}{}{mark}", "  ".repeat(n.depth), label(n));
    }
    out
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

pub fn render_dot(trace: &TreeTrace) -> String {
    let mut out = format!("digraph event_{} {{\n", trace.event_index);
    out.push_str("  node [shape=box];\n");
    for id in preorder(trace) {
        let n = &trace.nodes[id];
        let style = if trace.selected == Some(id) { ", style=bold" } else { "" };
        let _ = writeln!(out, "  n{id} [label=\"{}\"{style}];", dot_escape(&label(n)));
    }
    for id in preorder(trace) {
        for c in &trace.nodes[id].children {
            let _ = writeln!(out, "  n{id} -> n{c};");
        }
    }
    out.push_str("}\n");
    out
}

/// Text rendering and DOT source for a trace file.
pub fn inspect_tree(path: &Path) -> Result<(TreeTrace, String, String), PipelineError> {
    let trace = load_trace(path)?;
    let text = render_text(&trace);
    let dot = render_dot(&trace);
    Ok((trace, text, dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::EventAssignment;
    use crate::test_support::street_plan;
    use crate::tools::GenerationSpec;
    use crate::tot::{Budget, EvalReport, GenerationTree, NodeStatus, Verdict};
    use std::collections::BTreeMap;

    fn tree(generations: usize) -> GenerationTree {
        let event = street_plan().events[1].clone();
        let duration_s = event.duration();
        let spec = |id: &str| GenerationSpec {
            tool_id: id.into(),
            prompt: "fireworks".into(),
            duration_s,
            extra: BTreeMap::new(),
        };
        let assignment = EventAssignment {
            event_index: 1,
            event,
            candidates: vec!["MMAudio".into()],
            specs: [("MMAudio".to_string(), spec("MMAudio"))].into(),
        };
        let mut t = GenerationTree::new(assignment, Budget::default());
        for _ in 0..generations {
            let id = t.add(GenerationTree::ROOT, NodePayload::Generation(spec("MMAudio")));
            let n = t.node_mut(id);
            n.status = NodeStatus::Done;
            n.report = Some(EvalReport {
                quality: 4.0,
                alignment: 4.0,
                aesthetics: 3.0,
                issues: vec![],
                verdict: Some(Verdict::Accept),
            });
        }
        t
    }

    #[test]
    fn two_node_trace_renders_two_lines_root_first() {
        let trace = TreeTrace::new(&tree(1), Some(1), true);
        let text = render_text(&parse_trace(&trace.to_json()).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("#0 initial event 1 MMAudio"), "{}", lines[0]);
        assert_eq!(lines[1], "  #1 generation MMAudio [done] q=4 a=4 ae=3 *");
        let dot = render_dot(&trace);
        assert!(dot.starts_with("digraph event_1 {"));
        assert!(dot.contains("n0 -> n1;"));
        assert!(dot.trim_end().ends_with('}'));
    }

    #[test]
    fn child_order_is_preserved() {
        let trace = TreeTrace::new(&tree(3), None, false);
        let text = render_text(&trace);
        let ids: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(ids, ["#0", "#1", "#2", "#3"]);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        assert!(matches!(parse_trace("{"), Err(PipelineError::TraceParse(_))));
        assert!(matches!(parse_trace(r#"{"nodes": []}"#), Err(PipelineError::TraceParse(_))));
        let mut v: serde_json::Value = serde_json::from_str(&TreeTrace::new(&tree(2), None, false).to_json()).unwrap();
        v["nodes"][0]["children"] = serde_json::json!([1, 5]);
        assert!(matches!(parse_trace(&v.to_string()), Err(PipelineError::TraceParse(_))));
        let err = load_trace(Path::new("/nonexistent/trace.json")).unwrap_err();
        assert_eq!(err.exit_code(), 15);
    }
}
