mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};
use stemweaver::agent::mock_server::{MockAgentBehavior, MockAgentServer};
use stemweaver::agent::ScriptedBackend;
use stemweaver::gateway::{Endpoint, MockToolConfig, MockToolServer};
use stemweaver::pipeline::{BackendSpec, Pipeline, PipelineError, ToolEndpoints};
use stemweaver::tools::ToolLibrary;

use common::*;

/// The street session re-keyed by role alone, in the order a sequential run consumes it.
/// The chat wire carries no event channel, so an HTTP replay must be ordered.
async fn flattened_session(scratch: &std::path::Path) -> Value {
    let text = std::fs::read_to_string(fixture("street/session.json")).unwrap();
    let original: Value = serde_json::from_str(&text).unwrap();
    let backend = Arc::new(ScriptedBackend::from_value(&original).unwrap());
    let mut config = street_config(&scratch.join("record"));
    config.parallel = 1;
    Pipeline::new(config, backend.clone()).unwrap().run(&street_input()).await.unwrap();
    let mut replies: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for call in backend.calls() {
        let role = call.key.split('@').next().unwrap().to_string();
        replies.entry(role).or_default().push(original["replies"][&call.key][call.turn].clone());
    }
    json!({ "replies": replies })
}

#[tokio::test]
async fn http_agent_and_tools_match_in_process_run() {
    let local = tempfile::tempdir().unwrap();
    let remote = tempfile::tempdir().unwrap();
    Pipeline::from_config(street_config(local.path()))
        .unwrap()
        .run(&street_input())
        .await
        .unwrap();

    let script = Arc::new(ScriptedBackend::from_value(&flattened_session(local.path()).await).unwrap());
    let agent = MockAgentServer::start(MockAgentBehavior::Scripted(script.clone())).await.unwrap();
    let mut servers = Vec::new();
    let mut map = BTreeMap::new();
    for id in ToolLibrary::default().ids() {
        let server = MockToolServer::start(MockToolConfig {
            seed: 7,
            ..MockToolConfig::new(id)
        })
        .await
        .unwrap();
        map.insert(id.to_string(), Endpoint::Http(server.base_url()));
        servers.push(server);
    }
    let mut config = street_config(remote.path());
    config.backend = Some(BackendSpec::Http(agent.base_url()));
    config.tools = ToolEndpoints::Map(map);
    config.parallel = 1;
    let out = Pipeline::from_config(config).unwrap().run(&street_input()).await.unwrap();

    assert_eq!(agent.requests().len(), out.report.calls.total);
    assert!(script.remaining().is_empty());
    let generated: usize = servers
        .iter()
        .map(|s| s.requests().iter().filter(|r| r.starts_with("generate:")).count())
        .sum();
    assert_eq!(generated, 6);

    for f in ["mix.wav", "plan.json", "report.json", "stems/event_00.wav", "stems/event_03.wav"] {
        let a = std::fs::read(local.path().join(f)).unwrap();
        let b = std::fs::read(remote.path().join(f)).unwrap();
        assert!(a == b, "{f} differs between in-process and HTTP runs");
    }
}

#[tokio::test]
async fn failing_agent_surfaces_as_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let agent = MockAgentServer::start(MockAgentBehavior::Fail {
        status: 503,
        code: "overloaded".into(),
    })
    .await
    .unwrap();
    let mut config = street_config(dir.path());
    config.backend = Some(BackendSpec::Http(agent.base_url()));
    let err = Pipeline::from_config(config).unwrap().run(&street_input()).await.unwrap_err();
    assert!(matches!(err, PipelineError::Stage1(_)), "{err}");
    assert_eq!(err.exit_code(), 10);
}
