mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use pipewright::debugger::{
    BreakpointSpec, DebugConfig, FilterSpec, PartitionMode, PartitionSpec, PauseReason, Scope, TrackEntry,
};
use pipewright::engine::{EngineError, EventBody, NodeStatus, RunStatus};
use pipewright::filter::parse_predicate;
use pipewright::table::load_table;
use serde_json::json;

fn p(s: &str) -> pipewright::filter::Predicate {
    parse_predicate(s).unwrap()
}

fn one_node(e: &Env, module: &str, params: serde_json::Value, csv: &str) -> pipewright::engine::WorkflowSpec {
    let src = e.csv("src.csv", csv);
    spec(json!({
        "nodes": [{"id": "n", "module": module, "version": "1.0.0", "params": params},
                  {"id": "after", "module": "identity", "version": "1.0.0"}],
        "edges": [{"from": "src", "to": "n"}, {"from": "n", "to": "after"}],
        "sources": [{"id": "src", "path": src.to_str().unwrap()}],
        "key_column": "id"
    }))
}

#[test]
fn source_and_node_filters() {
    let e = env();
    let w = one_node(&e, "identity", json!({}), "id,City\n1,Chicago\n2,NY\n3,Chicago\n");
    let run = e.engine.create_run(&w, &DebugConfig::default()).unwrap();
    assert_eq!(run.set_filter("src", p("City = 'Chicago'")).unwrap(), Some(2));
    assert!(matches!(run.set_filter("src", p("Town = 'x'")), Err(EngineError::Filter(_))));
    assert!(matches!(run.set_filter("nowhere", p("City = 'x'")), Err(EngineError::UnknownNode(_))));
    run.start().unwrap();
    let s = run.wait_finished(LONG);
    assert_eq!(s.status, RunStatus::Completed);
    assert_eq!(s.edges.iter().find(|x| x.id == "src->n").unwrap().rows, Some(2));
    assert!(matches!(run.set_filter("n", p("City = 'x'")), Err(EngineError::NodeStarted(_))));

    // a filter matching nothing still runs downstream nodes on empty tables
    let dbg = DebugConfig {
        filters: vec![FilterSpec {
            target: "n".into(),
            predicate: p("City = 'Paris'"),
        }],
        ..Default::default()
    };
    let s = e.engine.start_run(&w, &dbg).unwrap().wait_finished(LONG);
    assert_eq!(s.status, RunStatus::Completed);
    assert_eq!(load_table(&s.nodes["after"].outputs[0], None).unwrap().len(), 0);

    // unknown column in a source filter fails before the run starts
    let bad = DebugConfig {
        filters: vec![FilterSpec {
            target: "src".into(),
            predicate: p("Nope = 1"),
        }],
        ..Default::default()
    };
    assert!(e.engine.create_run(&w, &bad).is_err());
}

#[test]
fn breakpoint_hits_and_events() {
    let e = env();
    let w = one_node(
        &e,
        "uppercase",
        json!({}),
        "id,City\n1,Boston\n2,Chicago\n3,NY\n4,Chicago\n5,Denver\n",
    );
    let reference = e.engine.start_run(&w, &DebugConfig::default()).unwrap().wait_finished(LONG);

    let run = e.engine.create_run(&w, &DebugConfig::default()).unwrap();
    let bp = run
        .set_breakpoint(BreakpointSpec {
            node: "n".into(),
            predicate: p("City = 'Chicago'"),
            scope: Scope::Input,
            enabled: true,
        })
        .unwrap();
    run.start().unwrap();
    let s = run.wait_settled(LONG);
    assert_eq!(s.status, RunStatus::Paused);
    assert_eq!(
        s.pause_reason,
        Some(PauseReason::Breakpoint {
            bp_id: bp.bp_id.clone(),
            node: "n".into(),
            key: json!(2)
        })
    );
    assert_eq!(s.breakpoints[0].hit_count, 1);
    // the matching record has not been consumed downstream
    assert_eq!(s.nodes["after"].status, NodeStatus::Waiting);
    assert_eq!(s.nodes["n"].partitions_done, 1);
    let events = run.events_since(0);
    let hit = events.iter().position(|e| matches!(e.body, EventBody::BreakpointHit { .. })).unwrap();
    let paused = events
        .iter()
        .position(|e| matches!(&e.body, EventBody::StateChange { node: None, status, .. } if status == "PAUSED"))
        .unwrap();
    assert!(hit < paused);
    assert!(events.windows(2).all(|w| w[0].seq + 1 == w[1].seq));
    let (s, pauses) = {
        run.resume().unwrap();
        drive(&run)
    };
    assert_eq!(pauses, 1);
    assert_eq!(s.breakpoints[0].hit_count, 2);
    assert_eq!(s.status, RunStatus::Completed);
    assert_eq!(
        fs::read(&reference.nodes["after"].outputs[0]).unwrap(),
        fs::read(&s.nodes["after"].outputs[0]).unwrap()
    );

    // disabled and non-matching breakpoints never pause
    for (pred, enabled) in [("City = 'Chicago'", false), ("City = 'Paris'", true)] {
        let dbg = DebugConfig {
            breakpoints: vec![BreakpointSpec {
                node: "n".into(),
                predicate: p(pred),
                scope: Scope::Input,
                enabled,
            }],
            ..Default::default()
        };
        let run = e.engine.start_run(&w, &dbg).unwrap();
        let s = run.wait_settled(LONG);
        assert_eq!(s.status, RunStatus::Completed);
        assert_eq!(s.breakpoints[0].hit_count, 0);
        assert_eq!(s.pause_count, 0);
    }

    // output scope sees the module's rewritten values
    let dbg = DebugConfig {
        breakpoints: vec![BreakpointSpec {
            node: "n".into(),
            predicate: p("City = 'CHICAGO'"),
            scope: Scope::Output,
            enabled: true,
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let s = run.wait_settled(LONG);
    assert_eq!(s.status, RunStatus::Paused);
    assert_eq!(s.nodes["after"].status, NodeStatus::Waiting);
    let (s, _) = {
        run.resume().unwrap();
        drive(&run)
    };
    assert_eq!(s.breakpoints[0].hit_count, 1);

    // breakpoint errors
    let run = e.engine.create_run(&w, &DebugConfig::default()).unwrap();
    let bad = |node: &str, pred: &str| {
        run.set_breakpoint(BreakpointSpec {
            node: node.into(),
            predicate: p(pred),
            scope: Scope::Input,
            enabled: true,
        })
    };
    assert!(matches!(bad("ghost", "City = 'x'"), Err(EngineError::UnknownNode(_))));
    assert!(matches!(bad("n", "Town = 'x'"), Err(EngineError::Filter(_))));
}

#[test]
fn breakpoint_on_whole_input_module() {
    let e = env();
    let w = one_node(
        &e,
        "dedup",
        json!({"threshold": 0.8, "columns": "name,City"}),
        "id,name,City\n1,John Smith,Chicago\n2,Jon Smith,Chicago\n3,Mary Jones,Boston\n",
    );
    let dbg = DebugConfig {
        breakpoints: vec![BreakpointSpec {
            node: "n".into(),
            predicate: p("City = 'Chicago'"),
            scope: Scope::Input,
            enabled: true,
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let s = run.wait_settled(LONG);
    assert_eq!(s.status, RunStatus::Paused);
    assert_eq!(s.nodes["n"].status, NodeStatus::Paused);
    assert_eq!(s.breakpoints[0].hit_count, 1);
    let (s, pauses) = {
        run.resume().unwrap();
        drive(&run)
    };
    assert_eq!((s.status, pauses), (RunStatus::Completed, 0));
    assert!(matches!(
        e.engine.create_run(
            &w,
            &DebugConfig {
                partitions: vec![PartitionSpec {
                    node: "n".into(),
                    mode: PartitionMode::Fraction(2)
                }],
                ..Default::default()
            }
        ),
        Err(EngineError::NotRecordWise(_))
    ));
}

fn read_tracking(path: &std::path::Path) -> Vec<TrackEntry> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn tracking_before_after_dropped_absent() {
    let e = env();
    let w = one_node(&e, "uppercase", json!({"columns": "city"}), "id,city\n1,Chicago\n2,Boston\n3,Chicago\n");
    let dbg = DebugConfig {
        track: Some(p("city = 'Chicago'")),
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let s = run.wait_finished(LONG);
    let entries = read_tracking(s.tracking_file.as_ref().unwrap());
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].node, "n");
    assert_eq!(entries[0].module, "uppercase");
    assert_eq!(entries[0].params["columns"], "city");
    assert_eq!(entries[0].before["city"], "Chicago");
    assert_eq!(entries[0].after["city"], "CHICAGO");
    assert_eq!(entries[0].key, json!(1));
    assert_eq!(entries.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);

    // records removed by dedup are DROPPED
    let w = one_node(
        &e,
        "dedup",
        json!({"threshold": 0.5, "columns": "name"}),
        "id,name\n1,John Smith\n2,Jon Smith\n3,Mary Jones\n",
    );
    let dbg = DebugConfig {
        track: Some(p("name CONTAINS 'Smith'")),
        ..Default::default()
    };
    let s = e.engine.start_run(&w, &dbg).unwrap().wait_finished(LONG);
    let entries: Vec<TrackEntry> = read_tracking(s.tracking_file.as_ref().unwrap())
        .into_iter()
        .filter(|x| x.node == "n")
        .collect();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[1].key, json!(2));
    assert_eq!(entries[1].after, json!("DROPPED"));

    // records created by a module have no before
    let w = one_node(
        &e,
        "abbrev_map",
        json!({"column": "name"}),
        "id,name\n1,CS\n2,Computer Science\n",
    );
    let s = e
        .engine
        .start_run(
            &w,
            &DebugConfig {
                track: Some(p("id = 1")),
                ..Default::default()
            },
        )
        .unwrap()
        .wait_finished(LONG);
    assert_eq!(s.status, RunStatus::Completed, "{:?}", s.error);
    let entries = read_tracking(s.tracking_file.as_ref().unwrap());
    assert!(entries.iter().all(|x| x.key == json!(1)));
    assert!(matches!(
        e.engine.create_run(
            &w,
            &DebugConfig {
                track: Some(p("zzz = 1")),
                ..Default::default()
            }
        ),
        Err(EngineError::Filter(_))
    ));
}

#[test]
fn automatic_breakpoints() {
    let e = env();
    let w = one_node(&e, "uppercase", json!({}), &cities_csv(100));
    let reference = e.engine.start_run(&w, &DebugConfig::default()).unwrap().wait_finished(LONG);
    let dbg = DebugConfig {
        partitions: vec![PartitionSpec {
            node: "n".into(),
            mode: PartitionMode::Fraction(10),
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let first = run.wait_settled(LONG);
    assert_eq!(first.nodes["n"].cumulative.len(), 1);
    assert_eq!(load_table(&first.nodes["n"].cumulative[0], None).unwrap().len(), 10);
    assert_eq!(first.nodes["n"].partition_outputs.len(), 1);
    run.resume().unwrap();
    let (s, pauses) = drive(&run);
    assert_eq!(pauses + 1, 9);
    assert_eq!(s.pause_count, 9);
    assert_eq!(
        fs::read(&reference.nodes["after"].outputs[0]).unwrap(),
        fs::read(&s.nodes["after"].outputs[0]).unwrap()
    );

    // blocking: one partition per city
    let dbg = DebugConfig {
        partitions: vec![PartitionSpec {
            node: "n".into(),
            mode: PartitionMode::parse("city = *").unwrap(),
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    let (s, pauses) = drive(&run);
    assert_eq!(s.nodes["n"].partitions_total, 4);
    assert_eq!(pauses, 3);
    let rows = |p: &std::path::Path| {
        let t = load_table(p, None).unwrap();
        let mut v: Vec<String> = t.rows().iter().map(|r| format!("{:?}", r.cells)).collect();
        v.sort();
        v
    };
    assert_eq!(rows(&reference.nodes["n"].outputs[0]), rows(&s.nodes["n"].outputs[0]));

    // cancel after inspecting the first partitions
    let dbg = DebugConfig {
        partitions: vec![PartitionSpec {
            node: "n".into(),
            mode: PartitionMode::Fraction(5),
        }],
        ..Default::default()
    };
    let run = e.engine.start_run(&w, &dbg).unwrap();
    run.wait_settled(LONG);
    run.resume().unwrap();
    let s = run.wait_settled(LONG);
    assert_eq!(s.nodes["n"].partitions_done, 2);
    let s = run.cancel().unwrap();
    assert_eq!(s.status, RunStatus::Cancelled);
    let dirs: BTreeSet<String> = fs::read_dir(run.dir().join("n"))
        .unwrap()
        .flatten()
        .map(|d| d.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("part-"))
        .collect();
    assert_eq!(dirs.len(), 2);
}
