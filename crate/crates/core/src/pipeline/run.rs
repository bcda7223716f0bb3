use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::Serialize;

use super::{io_err, PipelineError, RunConfig};
use crate::agent::{AgentBackend, AgentClient};
use crate::audio::{write_wav, AudioArtifact};
use crate::experts::{run_stage2, EventAssignment, SceneContext};
use crate::gateway::{ArtifactStore, MockToolBehavior, ToolGateway};
use crate::mixer::{mixdown, Stem};
use crate::plan::{serialize_plan, AudioType, EventPlan, InputDescriptor};
use crate::stage1::{plan_loop, Decision, PlanOutcome};
use crate::tools::ToolLibrary;
use crate::tot::{run_event, EventOutcome, TotContext};

pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "report.json";
pub const MIX_FILE: &str = "mix.wav";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventReport {
    pub event_index: usize,
    pub audio_type: AudioType,
    pub object: String,
    pub start_time: f64,
    pub end_time: f64,
    pub volume: f64,
    pub candidates: Vec<String>,
    pub selected_node: usize,
    pub selected_tool: String,
    pub accepted: bool,
    pub verdicts: Vec<String>,
    pub nodes: usize,
    pub evaluations: usize,
    pub adjust_calls: usize,
    pub duration_mismatches: usize,
    pub stem: String,
    pub trace: String,
}

/// Machine-readable run report. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub status: &'static str,
    pub scene_caption: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub plan_rounds: usize,
    pub plan_decisions: Vec<Decision>,
    pub best_effort: bool,
    pub assignment_decisions: Vec<Decision>,
    pub forced_acceptance: bool,
    pub collaborative_passes: usize,
    pub self_refine_calls: Vec<usize>,
    pub calls: CallCounts,
    pub events: Vec<EventReport>,
    pub mix: String,
    pub mix_frames: usize,
    pub mix_duration_s: f64,
    pub mix_peak: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub plan: EventPlan,
    pub mix_path: PathBuf,
    pub stem_paths: Vec<PathBuf>,
    pub trace_paths: Vec<PathBuf>,
    pub report_path: PathBuf,
    pub report: RunReport,
}

/// A configured engine: agent backend, tool gateway and library.
pub struct Pipeline {
    config: RunConfig,
    library: ToolLibrary,
    agent: AgentClient,
    gateway: ToolGateway,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_audio(path: &Path, artifact: &AudioArtifact) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_wav(path, artifact).map_err(|e| io_err(path, e))
}

/// Pads with silence or cuts so the mix spans exactly `frames`.
fn fit_frames(mix: AudioArtifact, frames: usize) -> AudioArtifact {
    if mix.frames() > frames {
        return mix.slice_frames(0, frames);
    }
    let rate = mix.sample_rate();
    let mut samples = mix.into_samples();
    samples.resize(frames, 0.0);
    AudioArtifact::mono(samples, rate).expect("padded mono mix is valid")
}

impl Pipeline {
    /// Validates `config` and wires the engine. No backend call is made.
    pub fn new(config: RunConfig, backend: Arc<dyn AgentBackend>) -> Result<Self, PipelineError> {
        let library = config.load_library()?;
        let endpoints = config.validate(&library)?;
        let prompts = config.load_prompts()?;
        let agent = AgentClient::new(backend, Arc::new(prompts))
            .with_max_repairs(config.max_repairs)
            .with_timeout(config.agent_timeout());
        let gateway = ToolGateway::new(endpoints)
            .with_seed(config.seed)
            .with_in_flight(config.tool_in_flight)
            .with_timeout(config.tool_timeout())
            .with_store(ArtifactStore::new(config.out_dir.join("artifacts")));
        Ok(Pipeline {
            config,
            library,
            agent,
            gateway,
        })
    }

    /// Like [`Pipeline::new`] with the backend named in the config.
    pub fn from_config(config: RunConfig) -> Result<Self, PipelineError> {
        // Validate before touching the backend so a bad config never reaches it.
        config.validate(&config.load_library()?)?;
        let backend = config.build_backend()?;
        Self::new(config, backend)
    }

    /// Overrides how one in-process tool behaves.
    pub fn with_mock_behavior(mut self, tool_id: &str, behavior: MockToolBehavior) -> Self {
        self.gateway = self.gateway.with_mock_behavior(tool_id, behavior);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn library(&self) -> &ToolLibrary {
        &self.library
    }

    pub fn agent(&self) -> &AgentClient {
        &self.agent
    }

    pub fn gateway(&self) -> &ToolGateway {
        &self.gateway
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    /// Stage 1 only; writes `plan.json`.
    pub async fn plan(&self, input: &InputDescriptor) -> Result<PlanOutcome, PipelineError> {
        input.validate()?;
        let outcome = plan_loop(&self.agent, input, self.config.plan_rounds).await?;
        write_file(&self.out(PLAN_FILE), serialize_plan(&outcome.plan).as_bytes())?;
        Ok(outcome)
    }

    async fn stage3(
        &self,
        assignments: Vec<EventAssignment>,
        scene: &SceneContext,
    ) -> Result<Vec<EventOutcome>, PipelineError> {
        let mut ctx = TotContext::new(&self.agent, &self.gateway, &self.library, scene);
        ctx.budget = self.config.budget();
        ctx.artifact_dir = Some(self.out("nodes"));
        std::fs::create_dir_all(self.out("nodes")).map_err(|e| io_err(&self.out("nodes"), e))?;
        let ctx = &ctx;
        let mut outcomes: Vec<EventOutcome> = stream::iter(assignments)
            .map(|a| async move {
                let index = a.event_index;
                run_event(ctx, a).await.map_err(|source| PipelineError::Stage3 {
                    event_index: index,
                    source,
                })
            })
            .buffer_unordered(self.config.parallel)
            .try_collect()
            .await?;
        outcomes.sort_by_key(|o| o.event_index());
        Ok(outcomes)
    }

    /// Stage 1 → 2 → 3 → mixdown, writing every artifact under the output directory.
    pub async fn run(&self, input: &InputDescriptor) -> Result<RunSummary, PipelineError> {
        let mut calls = CallCounts::default();
        let before = self.agent.calls();
        let planned = self.plan(input).await?;
        calls.stage1 = self.agent.calls() - before;

        let scene = SceneContext {
            caption: planned.plan.scene_caption.clone(),
            video_ref: input.video_ref.clone(),
        };
        let before = self.agent.calls();
        let stage2 = run_stage2(
            &self.agent,
            &planned.plan,
            &self.library,
            &scene,
            &self.config.stage2_options(),
        )
        .await?;
        calls.stage2 = self.agent.calls() - before;

        let before = self.agent.calls();
        let outcomes = self.stage3(stage2.assignments.clone(), &scene).await?;
        calls.stage3 = self.agent.calls() - before;
        calls.total = calls.stage1 + calls.stage2 + calls.stage3;

        let mut stems = Vec::with_capacity(outcomes.len());
        let mut events = Vec::with_capacity(outcomes.len());
        let mut stem_paths = Vec::new();
        let mut trace_paths = Vec::new();
        for outcome in &outcomes {
            let i = outcome.event_index();
            let event = &planned.plan.events[i];
            let stem = Stem::for_event(i, event, outcome.artifact().clone())?;
            let stem_rel = format!("stems/event_{i:02}.wav");
            let trace_rel = format!("traces/event_{i:02}.json");
            write_audio(&self.out(&stem_rel), &stem.artifact)?;
            write_file(&self.out(&trace_rel), outcome.trace().to_json().as_bytes())?;
            stem_paths.push(self.out(&stem_rel));
            trace_paths.push(self.out(&trace_rel));
            let selected_tool = outcome
                .tree
                .generation_spec(outcome.selected)
                .map(|s| s.tool_id.clone())
                .unwrap_or_default();
            events.push(EventReport {
                event_index: i,
                audio_type: event.audio_type,
                object: event.object.clone(),
                start_time: event.start_time,
                end_time: event.end_time,
                volume: event.volume,
                candidates: outcome.tree.assignment().candidates.clone(),
                selected_node: outcome.selected,
                selected_tool,
                accepted: outcome.accepted,
                verdicts: outcome.verdicts.clone(),
                nodes: outcome.tree.len(),
                evaluations: outcome.evaluations,
                adjust_calls: outcome.adjust_calls,
                duration_mismatches: outcome.duration_mismatches.len(),
                stem: stem_rel,
                trace: trace_rel,
            });
            stems.push(stem);
        }

        let mix = mixdown(&stems, self.config.mix_options())?;
        let frames = (planned.plan.max_end_time() * self.config.target_rate as f64).round() as usize;
        let mix = fit_frames(mix, frames);
        let mix_path = self.out(MIX_FILE);
        write_audio(&mix_path, &mix)?;

        let report = RunReport {
            status: "ok",
            scene_caption: planned.plan.scene_caption.clone(),
            seed: self.config.seed,
            sample_rate: mix.sample_rate(),
            plan_rounds: planned.rounds,
            plan_decisions: planned.decisions.clone(),
            best_effort: planned.best_effort,
            assignment_decisions: stage2.decisions.clone(),
            forced_acceptance: stage2.forced_acceptance,
            collaborative_passes: stage2.collaborative_passes,
            self_refine_calls: stage2.self_refine_calls.clone(),
            calls,
            events,
            mix: MIX_FILE.into(),
            mix_frames: mix.frames(),
            mix_duration_s: mix.duration_s(),
            mix_peak: mix.peak(),
        };
        let report_path = self.out(REPORT_FILE);
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_file(&report_path, text.as_bytes())?;

        Ok(RunSummary {
            out_dir: self.config.out_dir.clone(),
            plan: planned.plan,
            mix_path,
            stem_paths,
            trace_paths,
            report_path,
            report,
        })
    }
}
