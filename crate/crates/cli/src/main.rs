mod commands;
mod config;
mod home;
mod server;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pipewright::discovery::{build_ekg, profile_lake, DiscoveryConfig, Ekg};
use pipewright::engine::{Engine, WorkflowSpec};
use pipewright::metrics::MetricSelector;

use crate::config::DebugArgs;

#[derive(Parser)]
#[command(name = "pipewright", version, about = "Run, debug and trace data-preparation pipelines")]
struct Cli {
    /// Directory holding runs, workflows, registered modules and the journals.
    #[arg(long, global = true, env = "PIPEWRIGHT_HOME", default_value = ".pipewright")]
    home: PathBuf,
    /// Maximum number of nodes executing at once.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    /// Per-invocation module timeout in seconds.
    #[arg(long, global = true)]
    timeout_secs: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Register module manifests.
    Register {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// List registered modules.
    Modules {
        #[arg(long)]
        json: bool,
    },
    /// Check a workflow file.
    Validate {
        workflow: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a workflow to completion, resuming at every pause.
    Run {
        workflow: PathBuf,
        #[command(flatten)]
        debug: DebugArgs,
        #[arg(long)]
        json: bool,
    },
    /// Run a workflow under interactive control (commands on stdin).
    Debug {
        workflow: PathBuf,
        #[command(flatten)]
        debug: DebugArgs,
        #[arg(long)]
        json: bool,
    },
    /// Show the state of a run.
    Status {
        run: String,
        #[arg(long)]
        json: bool,
    },
    /// List runs.
    Runs,
    /// Print a run's events.
    Events {
        run: String,
        /// Only events with a larger sequence number.
        #[arg(long, default_value_t = 0)]
        after: u64,
    },
    /// Page through the records on an edge (`from->to`, `node`, `node#i` or a source id).
    Rows {
        run: String,
        edge: String,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Data discovery over a directory of CSV files.
    Discover {
        #[command(subcommand)]
        cmd: DiscoverCmd,
    },
    /// Dataset provenance.
    Lineage {
        #[command(subcommand)]
        cmd: LineageCmd,
    },
    /// Query registered module metrics.
    Metrics {
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        module: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Build the discovery graph from this directory at startup.
        #[arg(long)]
        lake: Option<PathBuf>,
    },
    #[command(hide = true)]
    ExecModule {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(clap::Args, Clone)]
struct LakeArgs {
    /// Profile this directory instead of using the saved graph.
    #[arg(long)]
    lake: Option<PathBuf>,
    /// Columns with at most this many distinct values are compared exactly.
    #[arg(long)]
    exact_limit: Option<usize>,
    #[arg(long)]
    num_hashes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    json: bool,
}

impl LakeArgs {
    fn config(&self) -> DiscoveryConfig {
        let mut c = DiscoveryConfig::default();
        if let Some(v) = self.exact_limit {
            c.exact_limit = v;
        }
        if let Some(v) = self.num_hashes {
            c.num_hashes = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c
    }
}

#[derive(Subcommand)]
enum DiscoverCmd {
    /// Profile a lake and save its graph in the home directory.
    Build {
        #[command(flatten)]
        lake: LakeArgs,
    },
    /// Columns joinable with TABLE.COLUMN.
    Joinable {
        table: String,
        column: String,
        #[command(flatten)]
        lake: LakeArgs,
    },
    /// Tables, columns and values containing a keyword.
    Search {
        query: String,
        #[command(flatten)]
        lake: LakeArgs,
    },
    /// Every edge of the graph.
    Edges {
        #[command(flatten)]
        lake: LakeArgs,
    },
}

#[derive(Subcommand)]
enum LineageCmd {
    /// The upstream closure of a dataset.
    Show {
        uri: String,
        #[arg(long)]
        json: bool,
    },
    /// Re-execute the chain that produced a dataset and compare.
    Replay {
        uri: String,
        #[arg(long)]
        json: bool,
        /// Exit nonzero unless the replay reproduced every dataset.
        #[arg(long)]
        check: bool,
    },
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // module processes skip argument parsing and engine setup
    if args.get(1).map(String::as_str) == Some("exec-module") {
        std::process::exit(pipewright::prep::builtin::builtin_main(&args[2..]));
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn open(cli: &Cli) -> Result<Engine> {
    home::open(
        &cli.home,
        &home::Options {
            max_parallel: cli.max_parallel,
            timeout_secs: cli.timeout_secs,
        },
    )
}

fn graph(engine: &Engine, lake: &LakeArgs) -> Result<Ekg> {
    commands::load_graph(engine, lake.lake.as_deref(), &lake.config())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let engine = open(&cli)?;
    match cli.cmd {
        Cmd::Register { manifests } => {
            for m in &manifests {
                let r = home::register_file(&engine, m)?;
                println!("registered {}", r.id());
            }
        }
        Cmd::Modules { json } => {
            let mut list = engine.registry().list();
            list.sort_by_key(|m| m.id());
            if json {
                let v: Vec<_> = list.iter().map(|m| (**m).clone()).collect();
                commands::print_json(&v)?;
            } else {
                for m in list {
                    let params: Vec<String> = m
                        .params
                        .iter()
                        .map(|p| format!("{}{}", p.name, if p.required { "" } else { "?" }))
                        .collect();
                    let rw = if m.record_wise { " record-wise" } else { "" };
                    println!("{}{rw}  ({})", m.id(), params.join(", "));
                }
            }
        }
        Cmd::Validate { workflow, json } => {
            let spec = WorkflowSpec::load(&workflow)?;
            let report = engine.validate(&spec);
            if json {
                commands::print_json(&report)?;
            } else if report.is_valid() {
                println!("{}: valid", workflow.display());
            } else {
                println!("{report}");
            }
            return Ok(if report.is_valid() { 0 } else { 1 });
        }
        Cmd::Run { workflow, debug, json } => return commands::run(&engine, &workflow, &debug.to_config()?, json),
        Cmd::Debug { workflow, debug, json } => {
            return commands::debug(&engine, &workflow, &debug.to_config()?, json)
        }
        Cmd::Status { run, json } => {
            let s = engine.snapshot(&run)?;
            if json {
                commands::print_json(&s)?;
            } else {
                println!("{}", commands::summary(&s));
            }
        }
        Cmd::Runs => {
            for id in engine.list_runs() {
                println!("{id}");
            }
        }
        Cmd::Events { run, after } => commands::events(&engine, &run, after)?,
        Cmd::Rows {
            run,
            edge,
            offset,
            limit,
            filter,
            json,
        } => {
            let filter = filter.as_deref().map(pipewright::filter::parse_predicate).transpose()?;
            let page = engine.edge_rows(&run, &edge, offset, limit, filter.as_ref())?;
            commands::print_page(&page, json)?;
        }
        Cmd::Discover { cmd } => discover(&engine, cmd)?,
        Cmd::Lineage { cmd } => match cmd {
            LineageCmd::Show { uri, json } => {
                let (_, g) = commands::lineage_of(&engine, &uri)?;
                commands::print_lineage(&g, json)?;
            }
            LineageCmd::Replay { uri, json, check } => {
                let uri = uri.parse()?;
                let report = engine.replay(&uri)?;
                commands::print_replay(&report, json)?;
                if check && !report.equal {
                    return Ok(1);
                }
            }
        },
        Cmd::Metrics { run, module, name, json } => {
            commands::metrics(&engine, &MetricSelector { run, module, name }, json)?
        }
        Cmd::Serve { port, host, lake } => {
            let ekg = match &lake {
                Some(dir) => {
                    let cfg = DiscoveryConfig::default();
                    Some(build_ekg(profile_lake(dir, &cfg)?.profiles, &cfg))
                }
                None => {
                    let saved = engine.home().join("ekg.json");
                    saved.exists().then(|| Ekg::load(&saved)).transpose()?
                }
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("bad listen address {host}:{port}"))?;
            let state = Arc::new(server::AppState::new(engine, ekg));
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(server::serve(state, addr))?;
        }
        Cmd::ExecModule { args } => return Ok(pipewright::prep::builtin::builtin_main(&args)),
    }
    Ok(0)
}

fn discover(engine: &Engine, cmd: DiscoverCmd) -> Result<()> {
    match cmd {
        DiscoverCmd::Build { lake } => {
            let dir = lake.lake.as_deref().context("discover build needs --lake <dir>")?;
            let cfg = lake.config();
            let profile = profile_lake(dir, &cfg)?;
            for s in &profile.skipped {
                eprintln!("skipped {}: {}", s.path.display(), s.error);
            }
            let columns = profile.profiles.len();
            let g = build_ekg(profile.profiles, &cfg);
            let out = engine.home().join("ekg.json");
            g.save(&out)?;
            if lake.json {
                commands::print_json(&serde_json::json!({
                    "graph": out,
                    "columns": columns,
                    "edges": g.edges.len(),
                    "skipped": profile.skipped,
                }))?;
            } else {
                println!("{columns} columns, {} edges; saved {}", g.edges.len(), out.display());
            }
        }
        DiscoverCmd::Joinable { table, column, lake } => {
            let g = graph(engine, &lake)?;
            let hits = g.find_joinable(&table, &column)?;
            if lake.json {
                commands::print_json(&hits)?;
            } else {
                for h in hits {
                    let dir = match h.query_is_contained {
                        Some(true) => format!("{table}.{column} -> {}.{}", h.table, h.column),
                        Some(false) => format!("{}.{} -> {table}.{column}", h.table, h.column),
                        None => format!("{table}.{column} ~ {}.{}", h.table, h.column),
                    };
                    println!("{:?}\t{:.4}\t{dir}", h.edge, h.score);
                }
            }
        }
        DiscoverCmd::Search { query, lake } => {
            let g = graph(engine, &lake)?;
            let hits = g.keyword_search(&query);
            if lake.json {
                commands::print_json(&hits)?;
            } else {
                for h in hits {
                    match h.column {
                        Some(c) => println!("{:?}\t{}.{c}", h.kind, h.table),
                        None => println!("{:?}\t{}", h.kind, h.table),
                    }
                }
            }
        }
        DiscoverCmd::Edges { lake } => {
            let g = graph(engine, &lake)?;
            let name = |i: usize| format!("{}.{}", g.nodes[i].table, g.nodes[i].column);
            if lake.json {
                let v: Vec<_> = g
                    .edges
                    .iter()
                    .map(|e| serde_json::json!({"kind": e.kind, "from": name(e.from), "to": name(e.to), "score": e.score}))
                    .collect();
                commands::print_json(&v)?;
            } else {
                for e in &g.edges {
                    println!("{:?}\t{:.4}\t{} -> {}", e.kind, e.score, name(e.from), name(e.to));
                }
            }
        }
    }
    Ok(())
}

