//! Engine-embedded implementations of the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use pipewright::debugger::{BreakpointSpec, DebugConfig, PauseReason, Scope};
use pipewright::discovery::{build_ekg, profile_lake, DiscoveryConfig, Ekg};
use pipewright::engine::{EdgePage, Engine, Event, Run, RunSnapshot, RunStatus, WorkflowSpec};
use pipewright::filter::parse_predicate;
use pipewright::lineage::{DatasetUri, LineageGraph, LineageNode, ReplayReport};
use pipewright::metrics::{MetricRow, MetricSelector};
use serde::Serialize;

const FOREVER: Duration = Duration::from_secs(365 * 24 * 3600);

pub fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn describe_pause(r: &PauseReason) -> String {
    match r {
        PauseReason::Manual => "manual pause".into(),
        PauseReason::Auto { node, partition } => format!("automatic breakpoint before partition {partition} of {node}"),
        PauseReason::Breakpoint { bp_id, node, key } => format!("breakpoint {bp_id} on {node} hit by record {key}"),
    }
}

pub fn summary(s: &RunSnapshot) -> String {
    let mut out = format!("run {} {}", s.run_id, s.status);
    if let Some(r) = &s.pause_reason {
        let _ = write!(out, " ({})", describe_pause(r));
    }
    if let Some(e) = &s.error {
        let _ = write!(out, "\n  error: {e}");
    }
    let width = s.nodes.keys().map(String::len).max().unwrap_or(4).max(4);
    for (id, n) in &s.nodes {
        let _ = write!(out, "\n  {id:<width$}  {:<8} {:>5.1}%", n.status.to_string(), n.progress * 100.0);
        if n.partitions_total > 1 {
            let _ = write!(out, "  partitions {}/{}", n.partitions_done, n.partitions_total);
        }
        for u in &n.output_uris {
            let _ = write!(out, "  {u}");
        }
        if let Some(e) = &n.error {
            let _ = write!(out, "\n  {:width$}  {e}", "");
        }
    }
    if let Some(t) = &s.tracking_file {
        let _ = write!(out, "\n  tracking: {}", t.display());
    }
    out
}

#[derive(Serialize)]
pub struct RunReport {
    pub run: RunSnapshot,
    pub pauses: Vec<PauseReason>,
}

fn exit_code(s: &RunSnapshot) -> i32 {
    if s.status == RunStatus::Completed {
        0
    } else {
        1
    }
}

fn create(engine: &Engine, workflow: &Path, dbg: &DebugConfig) -> Result<Arc<Run>> {
    let spec = WorkflowSpec::load(workflow)?;
    let wf = engine.submit_workflow(&spec)?;
    Ok(engine.create_run_for(&spec, dbg, Some(&wf))?)
}

/// Runs a workflow to the end, resuming after every pause.
pub fn run(engine: &Engine, workflow: &Path, dbg: &DebugConfig, json: bool) -> Result<i32> {
    let run = create(engine, workflow, dbg)?;
    run.start()?;
    if !json {
        println!("run {} started", run.id());
    }
    let mut pauses = Vec::new();
    let snap = loop {
        let s = run.wait_settled(FOREVER);
        match s.status {
            RunStatus::Paused => {
                let reason = s.pause_reason.clone().unwrap_or(PauseReason::Manual);
                if !json {
                    println!("paused: {}", describe_pause(&reason));
                }
                pauses.push(reason);
                run.resume()?;
            }
            st if st.is_terminal() => break s,
            _ => {}
        }
    };
    if json {
        print_json(&RunReport { run: snap.clone(), pauses })?;
    } else {
        println!("{}", summary(&snap));
    }
    Ok(exit_code(&snap))
}

const DEBUG_HELP: &str = "commands:
  resume | r                   continue to the next pause
  pause                        pause at the next quiescent point
  cancel                       cancel the run
  status                       show the run state
  rows <edge> [offset] [limit] [predicate]
                               show records on an edge
  break <node>:<predicate>     add an input breakpoint
  break-output <node>:<predicate>
  unbreak <bp>                 remove a breakpoint
  enable <bp> | disable <bp>
  events                       events since the last `events`
  quit                         cancel an unfinished run and leave
  help
end of input resumes the run until it finishes";

/// Interactive stepping through a run; commands are read from stdin.
pub fn debug(engine: &Engine, workflow: &Path, dbg: &DebugConfig, json: bool) -> Result<i32> {
    let run = create(engine, workflow, dbg)?;
    run.start()?;
    let show = |s: &RunSnapshot| -> Result<()> {
        if json {
            println!("{}", serde_json::to_string(s)?);
        } else {
            println!("{}", summary(s));
        }
        std::io::stdout().flush()?;
        Ok(())
    };
    show(&run.wait_settled(FOREVER))?;
    let mut seen = 0;
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        let (cmd, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let outcome: Result<()> = (|| {
            match cmd {
                "" => {}
                "help" | "?" => println!("{DEBUG_HELP}"),
                "resume" | "r" | "continue" | "c" => {
                    run.resume()?;
                    show(&run.wait_settled(FOREVER))?;
                }
                "pause" => show(&run.pause()?)?,
                "cancel" => show(&run.cancel()?)?,
                "status" | "s" => show(&run.snapshot())?,
                "rows" => {
                    let mut parts = rest.splitn(4, char::is_whitespace);
                    let edge = parts.next().filter(|e| !e.is_empty()).context("rows <edge> [offset] [limit] [predicate]")?;
                    let offset = parts.next().map(str::parse).transpose()?.unwrap_or(0);
                    let limit = parts.next().map(str::parse).transpose()?.unwrap_or(20);
                    let filter = parts.next().map(parse_predicate).transpose()?;
                    let page = engine.edge_rows(run.id(), edge, offset, limit, filter.as_ref())?;
                    print_page(&page, json)?;
                }
                "break" | "break-output" => {
                    let (node, p) = rest.split_once(':').context("break <node>:<predicate>")?;
                    let bp = run.set_breakpoint(BreakpointSpec {
                        node: node.trim().into(),
                        predicate: parse_predicate(p.trim())?,
                        scope: if cmd == "break" { Scope::Input } else { Scope::Output },
                        enabled: true,
                    })?;
                    println!("{}", serde_json::to_string(&bp)?);
                }
                "unbreak" => println!("{}", serde_json::to_string(&run.remove_breakpoint(rest)?)?),
                "enable" | "disable" => {
                    println!("{}", serde_json::to_string(&run.set_breakpoint_enabled(rest, cmd == "enable")?)?)
                }
                "events" => {
                    let ev = run.events_since(seen);
                    if let Some(last) = ev.last() {
                        seen = last.seq;
                    }
                    for e in ev {
                        println!("{}", serde_json::to_string(&e)?);
                    }
                }
                "quit" | "q" | "exit" => bail!("quit"),
                other => println!("unknown command `{other}`; try `help`"),
            }
            Ok(())
        })();
        match outcome {
            Ok(()) => {}
            Err(e) if e.to_string() == "quit" => {
                let s = run.snapshot();
                if !s.status.is_terminal() {
                    show(&run.cancel()?)?;
                    return Ok(1);
                }
                return Ok(exit_code(&s));
            }
            Err(e) => println!("error: {e:#}"),
        }
        std::io::stdout().flush()?;
    }
    // end of input: finish the run
    let snap = loop {
        let s = run.wait_settled(FOREVER);
        match s.status {
            RunStatus::Paused => {
                run.resume()?;
            }
            st if st.is_terminal() => break s,
            _ => {}
        }
    };
    show(&snap)?;
    Ok(exit_code(&snap))
}

pub fn print_page(page: &EdgePage, json: bool) -> Result<()> {
    if json {
        return print_json(page);
    }
    println!(
        "{} rows {}..{} of {}",
        page.edge,
        page.offset,
        page.offset + page.rows.len(),
        page.total
    );
    let names: Vec<&str> = page.columns.iter().map(|c| c.name.as_str()).collect();
    println!("key\t{}", names.join("\t"));
    for r in &page.rows {
        let cells: Vec<String> = names
            .iter()
            .map(|n| match &r.cells[n] {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        println!("{}\t{}", r.key, cells.join("\t"));
    }
    Ok(())
}

pub fn events(engine: &Engine, run_id: &str, after: u64) -> Result<()> {
    let snap = engine.snapshot(run_id)?;
    let text = fs::read_to_string(snap.run_dir.join("events.jsonl")).unwrap_or_default();
    for line in text.lines() {
        let e: Event = serde_json::from_str(line)?;
        if e.seq > after {
            println!("{line}");
        }
    }
    Ok(())
}

pub fn print_lineage(g: &LineageGraph, json: bool) -> Result<()> {
    if json {
        return print_json(g);
    }
    println!("lineage of {}", g.root);
    for n in &g.nodes {
        match n {
            LineageNode::Dataset(d) if d.source => {
                println!("  source  {}  {} rows  {}", d.uri, d.rows, d.path.display())
            }
            LineageNode::Dataset(d) => println!("  dataset {}  {} rows", d.uri, d.rows),
            LineageNode::Run(r) => {
                let params = serde_json::to_string(&r.params)?;
                println!("  run     {}  {}@{} {params}", r.key, r.module, r.version)
            }
        }
    }
    Ok(())
}

pub fn print_replay(r: &ReplayReport, json: bool) -> Result<()> {
    if json {
        return print_json(r);
    }
    println!("replayed {} as {}", r.original, r.replayed);
    match &r.first_divergent {
        None if r.equal => println!("equal: every dataset reproduced byte for byte"),
        None => println!("diverged: final identifier changed"),
        Some(d) => println!(
            "diverged: first at {} ({}), {} -> {}",
            d.original_uri,
            d.node_id.as_deref().map_or("source".to_string(), |n| format!("node {n}")),
            d.original_hash,
            d.replayed_hash
        ),
    }
    Ok(())
}

pub fn lineage_of(engine: &Engine, uri: &str) -> Result<(DatasetUri, LineageGraph)> {
    let uri: DatasetUri = uri.parse()?;
    let g = engine.lineage().get_lineage(&uri)?;
    Ok((uri, g))
}

pub fn print_metrics(rows: &[MetricRow], json: bool) -> Result<()> {
    if json {
        return print_json(&rows);
    }
    println!("run\tnode\tmodule\tname\tvalue\tparams");
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.run_id,
            r.node_id,
            r.module,
            r.name,
            r.value,
            serde_json::to_string(&r.params)?
        );
    }
    Ok(())
}

pub fn metrics(engine: &Engine, sel: &MetricSelector, json: bool) -> Result<()> {
    print_metrics(&engine.metrics().query(sel), json)
}

/// The discovery graph from a lake directory, or the one saved by `discover build`.
pub fn load_graph(engine: &Engine, lake: Option<&Path>, cfg: &DiscoveryConfig) -> Result<Ekg> {
    match lake {
        Some(dir) => {
            let lake = profile_lake(dir, cfg)?;
            for s in &lake.skipped {
                eprintln!("skipped {}: {}", s.path.display(), s.error);
            }
            Ok(build_ekg(lake.profiles, cfg))
        }
        None => {
            let path = engine.home().join("ekg.json");
            if !path.exists() {
                bail!("no discovery graph yet; run `pipewright discover build --lake <dir>` or pass --lake");
            }
            Ok(Ekg::load(&path)?)
        }
    }
}
