mod common;

use std::fs;

use common::*;
use pipewright::debugger::{DebugConfig, FilterSpec, PartitionMode, PartitionSpec};
use pipewright::engine::{EngineError, RunStatus};
use pipewright::filter::parse_predicate;
use pipewright::lineage::{DatasetUri, LineageError};
use serde_json::json;

fn chain(e: &Env, body: &str) -> (pipewright::engine::WorkflowSpec, std::path::PathBuf) {
    let src = e.csv("people.csv", body);
    let w = spec(json!({
        "nodes": [
            {"id": "clean", "module": "identity", "version": "1.0.0"},
            {"id": "upper", "module": "uppercase", "version": "1.0.0", "params": {"columns": "city"}},
            {"id": "drop", "module": "drop_where", "version": "1.0.0", "params": {"predicate": "city = 'BOSTON'"}}
        ],
        "edges": [{"from": "src", "to": "clean"}, {"from": "clean", "to": "upper"}, {"from": "upper", "to": "drop"}],
        "sources": [{"id": "src", "path": src.to_str().unwrap()}],
        "key_column": "id"
    }));
    (w, src)
}

#[test]
fn replay_reproduces_and_detects_divergence() {
    let e = env();
    let (w, src) = chain(&e, &cities_csv(40));
    let dbg = DebugConfig {
        filters: vec![FilterSpec {
            target: "upper".into(),
            predicate: parse_predicate("score > 10").unwrap(),
        }],
        partitions: vec![PartitionSpec {
            node: "upper".into(),
            mode: PartitionMode::Fraction(3),
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let (s, _) = drive(&run);
    assert_eq!(s.status, RunStatus::Completed, "{:?}", s.error);
    let uri: DatasetUri = s.nodes["drop"].output_uris[0].clone();

    let graph = e.engine.lineage().get_lineage(&uri).unwrap();
    let runs: Vec<_> = graph.runs().map(|r| r.node_id.clone()).collect();
    assert_eq!(runs, ["clean", "upper", "drop"]);
    assert_eq!(graph.datasets().filter(|d| d.source).count(), 1);
    let upper = graph.runs().find(|r| r.node_id == "upper").unwrap();
    assert!(upper.input_filters[0].is_some());
    assert_eq!(upper.partitioning.as_deref(), Some("fraction 3"));

    let report = e.engine.replay(&uri).unwrap();
    assert!(report.equal, "{report:?}");
    assert_eq!(report.replayed, uri);

    // an edited source changes every downstream identity
    let mut body = fs::read_to_string(&src).unwrap();
    body = body.replacen("Chicago", "Chicagoland", 1);
    fs::write(&src, body).unwrap();
    let report = e.engine.replay(&uri).unwrap();
    assert!(!report.equal);
    assert_ne!(report.replayed, uri);
    let first = report.first_divergent.unwrap();
    assert_eq!(first.node_id, None);
    assert_eq!(first.original_uri, graph.datasets().find(|d| d.source).unwrap().uri);

    // a deleted source cannot be replayed
    fs::remove_file(&src).unwrap();
    assert!(matches!(
        e.engine.replay(&uri),
        Err(EngineError::Lineage(LineageError::MissingSource { .. }))
    ));
}

#[test]
fn identical_runs_share_uris_and_sources_resolve_by_uri() {
    let e = env();
    let (w, _) = chain(&e, &cities_csv(12));
    let a = e.engine.start_run(&w, &DebugConfig::default()).unwrap().wait_finished(LONG);
    let b = e.engine.start_run(&w, &DebugConfig::default()).unwrap().wait_finished(LONG);
    assert_eq!(a.nodes["drop"].output_uris, b.nodes["drop"].output_uris);
    assert_ne!(a.run_id, b.run_id);

    // a workflow may read an earlier output by its URI
    let uri = a.nodes["upper"].output_uris[0].clone();
    let w2 = spec(json!({
        "nodes": [{"id": "again", "module": "identity", "version": "1.0.0"}],
        "edges": [{"from": "prev", "to": "again"}],
        "sources": [{"id": "prev", "path": uri.as_str()}]
    }));
    let s = e.engine.start_run(&w2, &DebugConfig::default()).unwrap().wait_finished(LONG);
    assert_eq!(s.status, RunStatus::Completed, "{:?}", s.error);
    assert_eq!(
        fs::read(&s.nodes["again"].outputs[0]).unwrap(),
        fs::read(&a.nodes["upper"].outputs[0]).unwrap()
    );
    let g = e.engine.lineage().get_lineage(&s.nodes["again"].output_uris[0]).unwrap();
    assert_eq!(g.runs().count(), 3);

    let missing: DatasetUri = format!("dcd://{}", "0".repeat(64)).parse().unwrap();
    assert!(matches!(e.engine.replay(&missing), Err(EngineError::Lineage(LineageError::UnknownUri(_)))));
}
