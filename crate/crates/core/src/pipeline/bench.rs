use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, BackendSpec, Pipeline, PipelineError, RunConfig};
use crate::plan::InputDescriptor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub id: String,
    pub input: InputDescriptor,
    #[serde(default)]
    pub expected_event_count: Option<usize>,
    /// Target duration; fills `input.duration_s` when that is unset.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Scripted session replacing the configured backend for this case.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchManifest {
    pub cases: Vec<BenchCase>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Wrapped(BenchManifest),
    Bare(Vec<BenchCase>),
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl BenchManifest {
    /// Accepts `{"cases": [...]}` or a bare list.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let manifest = match file {
            ManifestFile::Wrapped(m) => m,
            ManifestFile::Bare(cases) => BenchManifest { cases },
        };
        manifest.check()?;
        Ok(manifest)
    }

    /// Reads a manifest; case scripts are relative to the manifest file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let mut manifest = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for case in &mut manifest.cases {
            if let Some(s) = &mut case.script {
                if s.is_relative() {
                    *s = base.join(&*s);
                }
            }
        }
        Ok(manifest)
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let mut seen = BTreeSet::new();
        for case in &self.cases {
            if !safe_id(&case.id) {
                return Err(PipelineError::Manifest(format!(
                    "case id `{}` must be non-empty and use only letters, digits, `-`, `_` or `.`",
                    case.id
                )));
            }
            if !seen.insert(case.id.as_str()) {
                return Err(PipelineError::Manifest(format!("duplicate case id `{}`", case.id)));
            }
        }
        Ok(())
    }
}

/// One case's outcome. Flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub id: String,
    pub pass: bool,
    pub succeeded: bool,
    pub stage: Option<String>,
    pub exit_code: i32,
    pub error: Option<String>,
    pub events: Option<usize>,
    pub expected_event_count: Option<usize>,
    pub event_count_match: Option<bool>,
    pub duration_s: Option<f64>,
    pub mix_duration_s: Option<f64>,
    pub nodes: Option<usize>,
    pub agent_calls: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

impl BenchSummary {
    pub fn passed(&self) -> usize {
        self.rows.iter().filter(|r| r.pass).count()
    }
}

async fn run_case(config: &RunConfig, case: &BenchCase, out_dir: PathBuf) -> BenchRow {
    let mut row = BenchRow {
        id: case.id.clone(),
        pass: false,
        succeeded: false,
        stage: None,
        exit_code: 0,
        error: None,
        events: None,
        expected_event_count: case.expected_event_count,
        event_count_match: None,
        duration_s: case.input.duration_s.or(case.duration_s),
        mix_duration_s: None,
        nodes: None,
        agent_calls: None,
    };
    let mut cfg = config.clone();
    cfg.out_dir = out_dir;
    if let Some(script) = &case.script {
        cfg.backend = Some(BackendSpec::Scripted(script.clone()));
    }
    let mut input = case.input.clone();
    if input.duration_s.is_none() {
        input.duration_s = case.duration_s;
    }
    let result = match Pipeline::from_config(cfg) {
        Ok(p) => p.run(&input).await,
        Err(e) => Err(e),
    };
    match result {
        Ok(summary) => {
            let r = &summary.report;
            row.succeeded = true;
            row.events = Some(r.events.len());
            row.event_count_match = case.expected_event_count.map(|n| n == r.events.len());
            row.mix_duration_s = Some(r.mix_duration_s);
            row.nodes = Some(r.events.iter().map(|e| e.nodes).sum());
            row.agent_calls = Some(r.calls.total);
            row.pass = row.event_count_match != Some(false);
        }
        Err(e) => {
            row.stage = Some(e.stage().to_string());
            row.exit_code = e.exit_code();
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Runs every case under `out_dir/cases/<id>` and writes `bench.csv` and `bench.json`.
/// A failing case only marks its own row.
pub async fn bench(config: &RunConfig, manifest: &BenchManifest, out_dir: &Path) -> Result<BenchSummary, PipelineError> {
    manifest.check()?;
    let mut rows = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        let row = run_case(config, case, out_dir.join("cases").join(&case.id)).await;
        if let Some(e) = &row.error {
            tracing::warn!(case = %case.id, "bench case failed: {e}");
        }
        rows.push(row);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv_path = out_dir.join("bench.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| io_err(&csv_path, e))?;
    }
    writer.flush().map_err(|e| io_err(&csv_path, e))?;

    let json_path = out_dir.join("bench.json");
    let mut text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    text.push('\n');
    std::fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;

    Ok(BenchSummary {
        rows,
        csv_path,
        json_path,
    })
}
