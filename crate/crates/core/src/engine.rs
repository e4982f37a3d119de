//! Workflow specifications, validation and the run controller.
//!
//! A run executes a DAG of module nodes. Every edge table is materialized
//! under `runs/<run_id>/<node_id>/` before the consuming module starts, so
//! intermediate data can be inspected while the run is paused and after it
//! ends.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debugger::{
    plan_partitions, split_on_breakpoints, track_pairs, Breakpoint, BreakpointSpec, DebugConfig, PartitionMode,
    PauseReason, PlannedPartition, Scope, TrackEntry,
};
use crate::filter::{FilterError, Predicate, PredicateKind};
use crate::host::{
    invoke_module, write_cumulative, HostError, Invocation, InvokeOptions, ModuleManifest, ParamValues, Registry,
    DEFAULT_TIMEOUT,
};
use crate::lineage::{DatasetUri, HostExecutor, LineageError, LineageStore, ReplayReport, RunInfo};
use crate::metrics::{MetricError, MetricStore, METRICS_FILE};
use crate::table::{load_concatenated, load_table, write_table, Column, RecordKey, Table, TableError};
use crate::util::now_ms;

// ---------------------------------------------------------------------------
// workflow specification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub module: String,
    pub version: String,
    #[serde(default)]
    pub params: ParamValues,
    /// Per-invocation wall-clock limit; the engine default applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub slot: usize,
    /// Which output table of `from` flows along the edge.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub output: usize,
}

impl EdgeSpec {
    /// `from->to`, with `#slot` appended for slots other than 0.
    pub fn id(&self) -> String {
        if self.slot == 0 {
            format!("{}->{}", self.from, self.to)
        } else {
            format!("{}->{}#{}", self.from, self.to, self.slot)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: String,
    /// A CSV path or a `dcd://` dataset URI.
    pub path: String,
}

impl SourceSpec {
    pub fn uri(&self) -> Option<DatasetUri> {
        self.path.parse().ok().filter(|_| self.path.starts_with(crate::lineage::URI_SCHEME))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_column: Option<String>,
}

impl WorkflowSpec {
    /// Reads workflow JSON. Relative source paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        let mut spec: WorkflowSpec =
            serde_json::from_str(&text).map_err(|e| EngineError::BadRequest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for s in &mut self.sources {
            if s.uri().is_none() && Path::new(&s.path).is_relative() {
                s.path = base.join(&s.path).to_string_lossy().into_owned();
            }
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn source(&self, id: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.id == id)
    }

    /// Incoming edges of `node`, by slot.
    pub fn incoming(&self, node: &str) -> Vec<&EdgeSpec> {
        let mut v: Vec<&EdgeSpec> = self.edges.iter().filter(|e| e.to == node).collect();
        v.sort_by_key(|e| e.slot);
        v
    }

    /// Node ids in a topological order, ties broken by declaration order.
    /// `None` if the node graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let ids: Vec<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut indegree: HashMap<&str, usize> = ids.iter().map(|&i| (i, 0)).collect();
        for e in &self.edges {
            if indegree.contains_key(e.from.as_str()) {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d += 1;
                }
            }
        }
        let mut queue: VecDeque<&str> = ids.iter().copied().filter(|i| indegree[i] == 0).collect();
        let mut order = Vec::new();
        while let Some(n) = queue.pop_front() {
            order.push(n.to_string());
            for e in self.edges.iter().filter(|e| e.from == n) {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(&e.to);
                    }
                }
            }
        }
        (order.len() == ids.len()).then_some(order)
    }

    /// Every node reachable from `id` along edges.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(n) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.from == n) {
                if seen.insert(e.to.clone()) {
                    stack.push(e.to.clone());
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    DuplicateId { id: String },
    InvalidId { id: String },
    UnknownModule { node: String, module: String, version: String },
    BadParams { node: String, message: String },
    DanglingEdge { edge: String, missing: String },
    EdgeIntoSource { edge: String },
    DuplicateSlot { node: String, slot: usize },
    UnboundSlot { node: String, slot: usize },
    Cycle { nodes: Vec<String> },
    BadSource { id: String, message: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::DuplicateId { id } => write!(f, "id `{id}` is used more than once"),
            Finding::InvalidId { id } => write!(f, "id `{id}` may only contain letters, digits, `_`, `-` and `.`"),
            Finding::UnknownModule { node, module, version } => {
                write!(f, "node `{node}`: module {module} {version} is not registered")
            }
            Finding::BadParams { node, message } => write!(f, "node `{node}`: {message}"),
            Finding::DanglingEdge { edge, missing } => write!(f, "edge {edge}: no node or source `{missing}`"),
            Finding::EdgeIntoSource { edge } => write!(f, "edge {edge} points into a source"),
            Finding::DuplicateSlot { node, slot } => write!(f, "node `{node}`: input slot {slot} bound twice"),
            Finding::UnboundSlot { node, slot } => write!(f, "node `{node}`: input slot {slot} is not bound"),
            Finding::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
            Finding::BadSource { id, message } => write!(f, "source `{id}`: {message}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

pub fn validate_workflow(spec: &WorkflowSpec, registry: &Registry) -> ValidationReport {
    let mut findings = Vec::new();
    let mut seen = BTreeSet::new();
    for id in spec.nodes.iter().map(|n| &n.id).chain(spec.sources.iter().map(|s| &s.id)) {
        if !seen.insert(id.as_str()) {
            findings.push(Finding::DuplicateId { id: id.clone() });
        }
        if !valid_id(id) {
            findings.push(Finding::InvalidId { id: id.clone() });
        }
    }
    for n in &spec.nodes {
        match registry.get(&n.module, &n.version) {
            None => findings.push(Finding::UnknownModule {
                node: n.id.clone(),
                module: n.module.clone(),
                version: n.version.clone(),
            }),
            Some(m) => {
                if let Err(e) = m.check_params(&n.params) {
                    findings.push(Finding::BadParams {
                        node: n.id.clone(),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    for s in &spec.sources {
        if s.path.starts_with(crate::lineage::URI_SCHEME) {
            if s.uri().is_none() {
                findings.push(Finding::BadSource {
                    id: s.id.clone(),
                    message: format!("malformed dataset URI `{}`", s.path),
                });
            }
        } else if !Path::new(&s.path).is_file() {
            findings.push(Finding::BadSource {
                id: s.id.clone(),
                message: format!("{} does not exist", s.path),
            });
        }
    }
    for e in &spec.edges {
        if spec.node(&e.from).is_none() && spec.source(&e.from).is_none() {
            findings.push(Finding::DanglingEdge {
                edge: e.id(),
                missing: e.from.clone(),
            });
        }
        if spec.source(&e.to).is_some() {
            findings.push(Finding::EdgeIntoSource { edge: e.id() });
        } else if spec.node(&e.to).is_none() {
            findings.push(Finding::DanglingEdge {
                edge: e.id(),
                missing: e.to.clone(),
            });
        }
    }
    for n in &spec.nodes {
        let slots: Vec<usize> = spec.incoming(&n.id).iter().map(|e| e.slot).collect();
        let mut bound = BTreeSet::new();
        for &s in &slots {
            if !bound.insert(s) {
                findings.push(Finding::DuplicateSlot { node: n.id.clone(), slot: s });
            }
        }
        if let Some(&max) = bound.iter().next_back() {
            for s in 0..max {
                if !bound.contains(&s) {
                    findings.push(Finding::UnboundSlot { node: n.id.clone(), slot: s });
                }
            }
        }
    }
    if spec.topological_order().is_none() {
        // nodes left after repeatedly removing those without incoming node edges
        let mut remaining: BTreeSet<&str> = spec.nodes.iter().map(|n| n.id.as_str()).collect();
        loop {
            let free: Vec<&str> = remaining
                .iter()
                .copied()
                .filter(|n| !spec.edges.iter().any(|e| e.to == *n && remaining.contains(e.from.as_str())))
                .collect();
            if free.is_empty() {
                break;
            }
            for f in free {
                remaining.remove(f);
            }
        }
        findings.push(Finding::Cycle {
            nodes: remaining.into_iter().map(str::to_string).collect(),
        });
    }
    ValidationReport { findings }
}

// ---------------------------------------------------------------------------
// run state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Pending,
    Running,
    Paused,
    Completed,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::Failed | RunStatus::Cancelled)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("status serializes");
        f.write_str(s.as_str().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeStatus {
    Waiting,
    Running,
    Paused,
    Done,
    Failed,
    Skipped,
}

impl NodeStatus {
    pub fn is_settled(self) -> bool {
        matches!(self, NodeStatus::Done | NodeStatus::Failed | NodeStatus::Skipped)
    }
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("status serializes");
        f.write_str(s.as_str().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub status: NodeStatus,
    pub module: String,
    pub version: String,
    pub progress: f64,
    pub partitions_total: usize,
    pub partitions_done: usize,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub error: Option<String>,
    /// Materialized inputs, one per slot, after filters.
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub output_uris: Vec<DatasetUri>,
    /// Output tables of each finished partition, for attribution.
    pub partition_outputs: Vec<Vec<PathBuf>>,
    /// Outputs of all finished partitions so far.
    pub cumulative: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub id: String,
    pub from: String,
    pub to: String,
    pub slot: usize,
    pub output: usize,
    pub path: Option<PathBuf>,
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceState {
    pub path: PathBuf,
    pub uri: DatasetUri,
    pub rows: usize,
}

/// Everything observable about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run_id: String,
    pub workflow_id: Option<String>,
    pub status: RunStatus,
    pub pause_reason: Option<PauseReason>,
    pub pause_count: u64,
    pub nodes: BTreeMap<String, NodeState>,
    /// Node ids in the order they started.
    pub start_order: Vec<String>,
    pub edges: Vec<EdgeState>,
    pub sources: BTreeMap<String, SourceState>,
    pub breakpoints: Vec<Breakpoint>,
    pub filters: BTreeMap<String, Predicate>,
    pub partitions: BTreeMap<String, PartitionMode>,
    pub track: Option<Predicate>,
    pub tracking_file: Option<PathBuf>,
    pub key_column: Option<String>,
    pub run_dir: PathBuf,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub run_id: String,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventBody {
    Progress {
        node: String,
        fraction: f64,
    },
    StateChange {
        /// `None` for a run-level change.
        node: Option<String>,
        status: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<PauseReason>,
    },
    BreakpointHit {
        bp_id: String,
        node: String,
        key: serde_json::Value,
        hit_count: u64,
    },
    MetricRegistered {
        node: String,
        name: String,
        value: Option<f64>,
    },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid workflow: {0}")]
    Invalid(ValidationReport),
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error("unknown node or source `{0}`")]
    UnknownNode(String),
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("unknown breakpoint `{0}`")]
    UnknownBreakpoint(String),
    #[error("edge `{0}` is not materialized yet")]
    NotMaterialized(String),
    #[error("cannot {op} a {status} run")]
    WrongState { op: &'static str, status: RunStatus },
    #[error("node `{0}` has already started")]
    NodeStarted(String),
    #[error("node `{0}` is not record-wise")]
    NotRecordWise(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Lineage(#[from] LineageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// engine

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub max_parallel: usize,
    pub timeout: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_parallel: 2,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Runs workflows against one home directory holding the lineage journal,
/// the metric journal, submitted workflows and run directories.
pub struct Engine {
    home: PathBuf,
    registry: Arc<Registry>,
    lineage: Arc<LineageStore>,
    metrics: Arc<MetricStore>,
    config: EngineConfig,
    runs: Mutex<HashMap<String, Arc<Run>>>,
}

impl Engine {
    pub fn open(home: impl AsRef<Path>, registry: Arc<Registry>) -> Result<Self> {
        let home = home.as_ref().to_path_buf();
        fs::create_dir_all(home.join("runs"))?;
        fs::create_dir_all(home.join("workflows"))?;
        let home = home.canonicalize()?;
        Ok(Engine {
            lineage: Arc::new(LineageStore::open(home.join("lineage.jsonl"))?),
            metrics: Arc::new(MetricStore::open(home.join("metrics.jsonl"))?),
            home,
            registry,
            config: EngineConfig::default(),
            runs: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn lineage(&self) -> &LineageStore {
        &self.lineage
    }

    pub fn metrics(&self) -> &MetricStore {
        &self.metrics
    }

    pub fn validate(&self, spec: &WorkflowSpec) -> ValidationReport {
        validate_workflow(spec, &self.registry)
    }

    /// Validates and stores a workflow, returning its id.
    pub fn submit_workflow(&self, spec: &WorkflowSpec) -> Result<String> {
        let report = self.validate(spec);
        if !report.is_valid() {
            return Err(EngineError::Invalid(report));
        }
        let id = format!("wf-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let path = self.home.join("workflows").join(format!("{id}.json"));
        fs::write(path, serde_json::to_vec_pretty(spec).expect("workflow serializes"))?;
        Ok(id)
    }

    pub fn workflow(&self, id: &str) -> Result<WorkflowSpec> {
        if !valid_id(id) {
            return Err(EngineError::UnknownWorkflow(id.into()));
        }
        let path = self.home.join("workflows").join(format!("{id}.json"));
        let text = fs::read_to_string(&path).map_err(|_| EngineError::UnknownWorkflow(id.into()))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }

    /// Creates a PENDING run. Source tables are loaded and the debug
    /// configuration is checked against them now.
    pub fn create_run(&self, spec: &WorkflowSpec, debug: &DebugConfig) -> Result<Arc<Run>> {
        self.create_run_for(spec, debug, None)
    }

    pub fn create_run_for(&self, spec: &WorkflowSpec, debug: &DebugConfig, workflow_id: Option<&str>) -> Result<Arc<Run>> {
        let report = self.validate(spec);
        if !report.is_valid() {
            return Err(EngineError::Invalid(report));
        }
        let run = Run::create(self, spec.clone(), workflow_id.map(str::to_string))?;
        run.configure(debug)?;
        self.runs.lock().unwrap().insert(run.id.clone(), run.clone());
        Ok(run)
    }

    /// Creates and starts a run.
    pub fn start_run(&self, spec: &WorkflowSpec, debug: &DebugConfig) -> Result<Arc<Run>> {
        let run = self.create_run(spec, debug)?;
        run.start()?;
        Ok(run)
    }

    pub fn run(&self, id: &str) -> Result<Arc<Run>> {
        self.runs
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownRun(id.into()))
    }

    /// The live snapshot of a run of this engine, or the last persisted one.
    pub fn snapshot(&self, id: &str) -> Result<RunSnapshot> {
        if let Ok(run) = self.run(id) {
            return Ok(run.snapshot());
        }
        if !valid_id(id) {
            return Err(EngineError::UnknownRun(id.into()));
        }
        let path = self.home.join("runs").join(id).join("state.json");
        let text = fs::read_to_string(&path).map_err(|_| EngineError::UnknownRun(id.into()))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn list_runs(&self) -> Vec<String> {
        let mut ids: BTreeSet<String> = self.runs.lock().unwrap().keys().cloned().collect();
        if let Ok(rd) = fs::read_dir(self.home.join("runs")) {
            for e in rd.flatten() {
                if e.path().join("state.json").is_file() {
                    ids.insert(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.into_iter().collect()
    }

    pub fn edge_rows(
        &self,
        run_id: &str,
        edge: &str,
        offset: usize,
        limit: usize,
        filter: Option<&Predicate>,
    ) -> Result<EdgePage> {
        edge_page(&self.snapshot(run_id)?, edge, offset, limit, filter)
    }

    /// Re-executes the derivation chain of `uri`.
    pub fn replay(&self, uri: &DatasetUri) -> Result<ReplayReport> {
        let exec = HostExecutor {
            registry: &self.registry,
            options: InvokeOptions {
                timeout: self.config.timeout,
                cancel: None,
            },
        };
        let root = self.home.join("replays");
        fs::create_dir_all(&root)?;
        Ok(self.lineage.replay(uri, &exec, &root)?)
    }
}

// ---------------------------------------------------------------------------
// edge inspection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRow {
    pub key: serde_json::Value,
    pub cells: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePage {
    pub run_id: String,
    pub edge: String,
    /// Rows after filtering, before paging.
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub columns: Vec<Column>,
    pub rows: Vec<PageRow>,
}

/// Resolves an edge id (`from->to[#slot]`), a node output (`node` or
/// `node#i`) or a source id to its materialized table.
pub fn edge_path(snap: &RunSnapshot, edge: &str) -> Result<PathBuf> {
    if let Some(e) = snap.edges.iter().find(|e| e.id == edge) {
        return e.path.clone().ok_or_else(|| EngineError::NotMaterialized(edge.into()));
    }
    let (node, index) = match edge.rsplit_once('#') {
        Some((n, i)) if i.parse::<usize>().is_ok() => (n, i.parse().unwrap()),
        _ => (edge, 0),
    };
    if let Some(n) = snap.nodes.get(node) {
        return n
            .outputs
            .get(index)
            .cloned()
            .ok_or_else(|| EngineError::NotMaterialized(edge.into()));
    }
    if let Some(s) = snap.sources.get(edge) {
        return Ok(s.path.clone());
    }
    Err(EngineError::UnknownEdge(edge.into()))
}

pub fn edge_page(
    snap: &RunSnapshot,
    edge: &str,
    offset: usize,
    limit: usize,
    filter: Option<&Predicate>,
) -> Result<EdgePage> {
    let path = edge_path(snap, edge)?;
    let t = keyed(load_table(&path, None)?, snap.key_column.as_deref());
    let t = match filter {
        Some(p) => p.filter_table(&t)?,
        None => t,
    };
    let rows = t
        .rows()
        .iter()
        .skip(offset)
        .take(limit)
        .map(|r| PageRow {
            key: r.key.to_json(),
            cells: r.to_json_object(t.schema()),
        })
        .collect();
    Ok(EdgePage {
        run_id: snap.run_id.clone(),
        edge: edge.into(),
        total: t.len(),
        offset,
        limit,
        columns: t.schema().columns().to_vec(),
        rows,
    })
}

/// Keys records by `key` when the table has that column, by ordinal otherwise.
fn keyed(t: Table, key: Option<&str>) -> Table {
    match key {
        Some(k) if t.schema().index_of(k).is_some() => t.with_key_column(k).expect("column exists"),
        _ => t,
    }
}

// ---------------------------------------------------------------------------
// run controller

struct SourceData {
    table: Arc<Table>,
    uri: DatasetUri,
}

struct Inner {
    snap: RunSnapshot,
    pause_requested: Option<PauseReason>,
    /// Module processes currently executing.
    active: usize,
    /// Node workers currently alive.
    workers: usize,
    failed: bool,
    events: Vec<Event>,
    track_seq: u64,
    next_bp: u64,
    pause_after_ms: Option<u64>,
}

/// One workflow execution. All state transitions go through its lock.
pub struct Run {
    id: String,
    dir: PathBuf,
    spec: WorkflowSpec,
    manifests: HashMap<String, Arc<ModuleManifest>>,
    sources: HashMap<String, SourceData>,
    lineage: Arc<LineageStore>,
    metrics: Arc<MetricStore>,
    config: EngineConfig,
    cancel: Arc<AtomicBool>,
    state: Mutex<Inner>,
    cv: Condvar,
}

struct ActiveInvocation<'a>(&'a Run);

impl Drop for ActiveInvocation<'_> {
    fn drop(&mut self) {
        self.0.leave_invocation();
    }
}

enum Stop {
    Cancelled,
    Failed(String),
}

fn fail(e: impl fmt::Display) -> Stop {
    Stop::Failed(e.to_string())
}

fn conjoin(a: Option<&Predicate>, b: Option<&Predicate>) -> Option<Predicate> {
    match (a, b) {
        (Some(a), Some(b)) => Some(format!("{a} AND {b}").parse().expect("conjunction of valid predicates parses")),
        (a, b) => a.or(b).cloned(),
    }
}

impl Run {
    fn create(engine: &Engine, spec: WorkflowSpec, workflow_id: Option<String>) -> Result<Arc<Run>> {
        let id = format!("run-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let dir = engine.home.join("runs").join(&id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("workflow.json"), serde_json::to_vec_pretty(&spec).expect("workflow serializes"))?;
        let mut manifests = HashMap::new();
        for n in &spec.nodes {
            manifests.insert(n.id.clone(), engine.registry.require(&n.module, &n.version)?);
        }
        let mut sources = HashMap::new();
        let mut source_states = BTreeMap::new();
        for s in &spec.sources {
            let (path, uri, table) = match s.uri() {
                Some(uri) => {
                    let d = engine
                        .lineage
                        .dataset(&uri)
                        .ok_or_else(|| EngineError::BadRequest(format!("source `{}`: unknown dataset {uri}", s.id)))?;
                    let t = load_table(&d.path, None)?;
                    (d.path, uri, t)
                }
                None => {
                    let path = PathBuf::from(&s.path);
                    let t = load_table(&path, None)?;
                    let uri = engine.lineage.record_source(&path, &t)?;
                    (path, uri, t)
                }
            };
            source_states.insert(
                s.id.clone(),
                SourceState {
                    path,
                    uri: uri.clone(),
                    rows: table.len(),
                },
            );
            sources.insert(
                s.id.clone(),
                SourceData {
                    table: Arc::new(keyed(table, spec.key_column.as_deref())),
                    uri,
                },
            );
        }
        let nodes = spec
            .nodes
            .iter()
            .map(|n| {
                (
                    n.id.clone(),
                    NodeState {
                        status: NodeStatus::Waiting,
                        module: n.module.clone(),
                        version: n.version.clone(),
                        progress: 0.0,
                        partitions_total: 0,
                        partitions_done: 0,
                        started_ms: None,
                        finished_ms: None,
                        error: None,
                        inputs: Vec::new(),
                        outputs: Vec::new(),
                        output_uris: Vec::new(),
                        partition_outputs: Vec::new(),
                        cumulative: Vec::new(),
                    },
                )
            })
            .collect();
        let edges = spec
            .edges
            .iter()
            .map(|e| EdgeState {
                id: e.id(),
                from: e.from.clone(),
                to: e.to.clone(),
                slot: e.slot,
                output: e.output,
                path: None,
                rows: None,
            })
            .collect();
        let snap = RunSnapshot {
            run_id: id.clone(),
            workflow_id,
            status: RunStatus::Pending,
            pause_reason: None,
            pause_count: 0,
            nodes,
            start_order: Vec::new(),
            edges,
            sources: source_states,
            breakpoints: Vec::new(),
            filters: BTreeMap::new(),
            partitions: BTreeMap::new(),
            track: None,
            tracking_file: None,
            key_column: spec.key_column.clone(),
            run_dir: dir.clone(),
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
            error: None,
        };
        let run = Arc::new(Run {
            id,
            dir,
            spec,
            manifests,
            sources,
            lineage: engine.lineage.clone(),
            metrics: engine.metrics.clone(),
            config: engine.config.clone(),
            cancel: Arc::new(AtomicBool::new(false)),
            state: Mutex::new(Inner {
                snap,
                pause_requested: None,
                active: 0,
                workers: 0,
                failed: false,
                events: Vec::new(),
                track_seq: 0,
                next_bp: 0,
                pause_after_ms: None,
            }),
            cv: Condvar::new(),
        });
        run.persist(&run.state.lock().unwrap());
        Ok(run)
    }

    fn configure(&self, debug: &DebugConfig) -> Result<()> {
        for f in &debug.filters {
            self.set_filter(&f.target, f.predicate.clone())?;
        }
        for b in &debug.breakpoints {
            self.set_breakpoint(b.clone())?;
        }
        if let Some(t) = &debug.track {
            self.set_track(t.clone())?;
        }
        for p in &debug.partitions {
            self.set_partitions(&p.node, p.mode.clone())?;
        }
        self.lock().pause_after_ms = debug.pause_after_ms;
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn spec(&self) -> &WorkflowSpec {
        &self.spec
    }

    pub fn snapshot(&self) -> RunSnapshot {
        self.state.lock().unwrap().snap.clone()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.state.lock().unwrap()
    }

    fn persist(&self, g: &Inner) {
        let tmp = self.dir.join("state.json.tmp");
        let bytes = serde_json::to_vec_pretty(&g.snap).expect("snapshot serializes");
        if fs::write(&tmp, bytes).is_ok() {
            let _ = fs::rename(&tmp, self.dir.join("state.json"));
        }
    }

    fn emit(&self, g: &mut Inner, body: EventBody) {
        let e = Event {
            seq: g.events.len() as u64 + 1,
            run_id: self.id.clone(),
            ts_ms: now_ms(),
            body,
        };
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.dir.join("events.jsonl")) {
            let mut line = serde_json::to_vec(&e).expect("event serializes");
            line.push(b'\n');
            let _ = f.write_all(&line);
        }
        g.events.push(e);
        self.cv.notify_all();
    }

    fn set_status(&self, g: &mut Inner, status: RunStatus) {
        g.snap.status = status;
        let reason = if status == RunStatus::Paused {
            g.snap.pause_reason.clone()
        } else {
            None
        };
        self.emit(
            g,
            EventBody::StateChange {
                node: None,
                status: status.to_string(),
                reason,
            },
        );
        self.persist(g);
    }

    fn set_node_status(&self, g: &mut Inner, node: &str, status: NodeStatus) {
        let n = g.snap.nodes.get_mut(node).expect("known node");
        if n.status == status {
            return;
        }
        n.status = status;
        if status.is_settled() {
            n.finished_ms = Some(now_ms());
        }
        self.emit(
            g,
            EventBody::StateChange {
                node: Some(node.to_string()),
                status: serde_json::to_value(status).unwrap().as_str().unwrap().to_string(),
                reason: None,
            },
        );
        self.persist(g);
    }

    fn node_waiting(&self, g: &Inner, node: &str) -> Result<()> {
        match g.snap.nodes.get(node) {
            None => Err(EngineError::UnknownNode(node.into())),
            Some(n) if n.status != NodeStatus::Waiting => Err(EngineError::NodeStarted(node.into())),
            Some(_) if g.snap.status.is_terminal() => Err(EngineError::WrongState {
                op: "configure",
                status: g.snap.status,
            }),
            Some(_) => Ok(()),
        }
    }

    /// Schema of the table entering `node` at slot 0, when it comes straight
    /// from a source.
    fn source_schema_for(&self, node: &str) -> Option<&crate::table::Schema> {
        let e = self.spec.incoming(node).into_iter().find(|e| e.slot == 0)?;
        self.sources.get(&e.from).map(|s| s.table.schema())
    }

    /// Restricts a node's slot-0 input, or a source, to rows satisfying `p`.
    /// For a source the effective row count is returned.
    pub fn set_filter(&self, target: &str, p: Predicate) -> Result<Option<usize>> {
        if p.kind() != PredicateKind::Boolean {
            return Err(FilterError::WrongKind {
                expected: PredicateKind::Boolean,
            }
            .into());
        }
        let mut g = self.lock();
        let count = if let Some(src) = self.sources.get(target) {
            if g.snap.status != RunStatus::Pending {
                let consumers: Vec<&str> = self
                    .spec
                    .edges
                    .iter()
                    .filter(|e| e.from == target)
                    .map(|e| e.to.as_str())
                    .collect();
                if let Some(c) = consumers.iter().find(|c| g.snap.nodes[**c].status != NodeStatus::Waiting) {
                    return Err(EngineError::NodeStarted(c.to_string()));
                }
            }
            Some(p.filter_table(&src.table)?.len())
        } else {
            self.node_waiting(&g, target)?;
            if let Some(s) = self.source_schema_for(target) {
                p.bind(s)?;
            }
            None
        };
        g.snap.filters.insert(target.to_string(), p);
        self.persist(&g);
        Ok(count)
    }

    pub fn set_breakpoint(&self, spec: BreakpointSpec) -> Result<Breakpoint> {
        if spec.predicate.kind() != PredicateKind::Boolean {
            return Err(FilterError::WrongKind {
                expected: PredicateKind::Boolean,
            }
            .into());
        }
        let mut g = self.lock();
        self.node_waiting(&g, &spec.node)?;
        if spec.scope == Scope::Input {
            if let Some(s) = self.source_schema_for(&spec.node) {
                spec.predicate.bind(s)?;
            }
        }
        g.next_bp += 1;
        let bp = Breakpoint {
            bp_id: format!("bp{}", g.next_bp),
            node: spec.node,
            predicate: spec.predicate,
            scope: spec.scope,
            enabled: spec.enabled,
            hit_count: 0,
        };
        g.snap.breakpoints.push(bp.clone());
        self.persist(&g);
        Ok(bp)
    }

    fn breakpoint_index(&self, g: &Inner, bp_id: &str) -> Result<usize> {
        g.snap
            .breakpoints
            .iter()
            .position(|b| b.bp_id == bp_id)
            .ok_or_else(|| EngineError::UnknownBreakpoint(bp_id.into()))
    }

    pub fn remove_breakpoint(&self, bp_id: &str) -> Result<Breakpoint> {
        let mut g = self.lock();
        let i = self.breakpoint_index(&g, bp_id)?;
        let node = g.snap.breakpoints[i].node.clone();
        self.node_waiting(&g, &node)?;
        let bp = g.snap.breakpoints.remove(i);
        self.persist(&g);
        Ok(bp)
    }

    pub fn set_breakpoint_enabled(&self, bp_id: &str, enabled: bool) -> Result<Breakpoint> {
        let mut g = self.lock();
        let i = self.breakpoint_index(&g, bp_id)?;
        let node = g.snap.breakpoints[i].node.clone();
        self.node_waiting(&g, &node)?;
        g.snap.breakpoints[i].enabled = enabled;
        self.persist(&g);
        Ok(g.snap.breakpoints[i].clone())
    }

    /// Starts tracking records matching `p`. Returns the tracking file.
    pub fn set_track(&self, p: Predicate) -> Result<PathBuf> {
        if p.kind() != PredicateKind::Boolean {
            return Err(FilterError::WrongKind {
                expected: PredicateKind::Boolean,
            }
            .into());
        }
        if !self.sources.is_empty() {
            for attr in p.attrs() {
                if !self.sources.values().any(|s| s.table.schema().index_of(attr).is_some()) {
                    return Err(FilterError::UnknownAttribute(attr.to_string()).into());
                }
            }
        }
        let mut g = self.lock();
        if g.snap.status != RunStatus::Pending {
            return Err(EngineError::WrongState {
                op: "track",
                status: g.snap.status,
            });
        }
        let path = self.dir.join("tracking.jsonl");
        fs::write(&path, b"")?;
        g.snap.track = Some(p);
        g.snap.tracking_file = Some(path.clone());
        self.persist(&g);
        Ok(path)
    }

    /// Arms automatic breakpoints on a record-wise node.
    pub fn set_partitions(&self, node: &str, mode: PartitionMode) -> Result<()> {
        let mut g = self.lock();
        self.node_waiting(&g, node)?;
        if !self.manifests[node].record_wise {
            return Err(EngineError::NotRecordWise(node.into()));
        }
        if let (PartitionMode::Blocking(p), Some(s)) = (&mode, self.source_schema_for(node)) {
            let attr = p.wildcard_attr().expect("blocking mode is a wildcard");
            if s.index_of(attr).is_none() {
                return Err(FilterError::UnknownAttribute(attr.into()).into());
            }
        }
        g.snap.partitions.insert(node.to_string(), mode);
        self.persist(&g);
        Ok(())
    }

    pub fn start(self: &Arc<Self>) -> Result<RunSnapshot> {
        let mut g = self.lock();
        if g.snap.status != RunStatus::Pending {
            return Err(EngineError::WrongState {
                op: "start",
                status: g.snap.status,
            });
        }
        let started = now_ms();
        g.snap.started_ms = Some(started);
        self.metrics.begin_run(&self.id, started)?;
        self.set_status(&mut g, RunStatus::Running);
        let snap = g.snap.clone();
        let timer = g.pause_after_ms;
        drop(g);
        let me = self.clone();
        thread::spawn(move || me.drive());
        if let Some(ms) = timer {
            let me = self.clone();
            thread::spawn(move || {
                thread::sleep(Duration::from_millis(ms));
                let _ = me.request_pause(PauseReason::Manual);
            });
        }
        Ok(snap)
    }

    /// Requests a pause at the next quiescent point and waits for it.
    pub fn pause(&self) -> Result<RunSnapshot> {
        self.request_pause(PauseReason::Manual)?;
        Ok(self.wait_until(|s| s.status != RunStatus::Running, Duration::from_secs(600)))
    }

    /// Requests a pause without waiting for it to take effect.
    pub fn request_pause(&self, reason: PauseReason) -> Result<()> {
        let mut g = self.lock();
        if g.snap.status != RunStatus::Running {
            return Err(EngineError::WrongState {
                op: "pause",
                status: g.snap.status,
            });
        }
        if g.pause_requested.is_none() {
            g.pause_requested = Some(reason);
        }
        self.try_enter_paused(&mut g);
        self.cv.notify_all();
        Ok(())
    }

    pub fn resume(&self) -> Result<RunSnapshot> {
        let mut g = self.lock();
        if g.snap.status != RunStatus::Paused {
            return Err(EngineError::WrongState {
                op: "resume",
                status: g.snap.status,
            });
        }
        g.pause_requested = None;
        g.snap.pause_reason = None;
        self.set_status(&mut g, RunStatus::Running);
        self.cv.notify_all();
        Ok(g.snap.clone())
    }

    pub fn cancel(&self) -> Result<RunSnapshot> {
        let mut g = self.lock();
        if g.snap.status.is_terminal() {
            return Err(EngineError::WrongState {
                op: "cancel",
                status: g.snap.status,
            });
        }
        self.cancel.store(true, Ordering::SeqCst);
        g.pause_requested = None;
        let open: Vec<String> = g
            .snap
            .nodes
            .iter()
            .filter(|(_, n)| !n.status.is_settled())
            .map(|(id, _)| id.clone())
            .collect();
        for id in open {
            self.set_node_status(&mut g, &id, NodeStatus::Skipped);
        }
        g.snap.finished_ms = Some(now_ms());
        self.set_status(&mut g, RunStatus::Cancelled);
        self.cv.notify_all();
        Ok(g.snap.clone())
    }

    /// Blocks until `pred` holds for the snapshot, the run ends, or `timeout`
    /// elapses; returns the snapshot at that moment.
    pub fn wait_until(&self, pred: impl Fn(&RunSnapshot) -> bool, timeout: Duration) -> RunSnapshot {
        let deadline = Instant::now() + timeout;
        let mut g = self.lock();
        loop {
            if pred(&g.snap) || g.snap.status.is_terminal() {
                return g.snap.clone();
            }
            let now = Instant::now();
            if now >= deadline {
                return g.snap.clone();
            }
            g = self.cv.wait_timeout(g, deadline - now).unwrap().0;
        }
    }

    /// Waits until the run is paused or finished.
    pub fn wait_settled(&self, timeout: Duration) -> RunSnapshot {
        self.wait_until(|s| s.status == RunStatus::Paused, timeout)
    }

    /// Waits for the run to finish.
    pub fn wait_finished(&self, timeout: Duration) -> RunSnapshot {
        self.wait_until(|s| s.status.is_terminal(), timeout)
    }

    /// Events with sequence number greater than `after`.
    pub fn events_since(&self, after: u64) -> Vec<Event> {
        let g = self.lock();
        g.events.iter().skip(after as usize).cloned().collect()
    }

    /// Like [`Run::events_since`], but waits up to `timeout` for at least one.
    pub fn wait_events(&self, after: u64, timeout: Duration) -> Vec<Event> {
        let deadline = Instant::now() + timeout;
        let mut g = self.lock();
        loop {
            if g.events.len() as u64 > after {
                return g.events.iter().skip(after as usize).cloned().collect();
            }
            let now = Instant::now();
            if now >= deadline || g.snap.status.is_terminal() {
                return Vec::new();
            }
            g = self.cv.wait_timeout(g, deadline - now).unwrap().0;
        }
    }

    fn try_enter_paused(&self, g: &mut Inner) {
        if g.snap.status == RunStatus::Running && g.active == 0 {
            if let Some(reason) = g.pause_requested.clone() {
                g.snap.pause_reason = Some(reason);
                g.snap.pause_count += 1;
                self.set_status(g, RunStatus::Paused);
            }
        }
    }

    fn wait_running<'a>(&'a self, mut g: MutexGuard<'a, Inner>) -> Result<MutexGuard<'a, Inner>, Stop> {
        loop {
            if self.cancel.load(Ordering::SeqCst) {
                return Err(Stop::Cancelled);
            }
            if g.pause_requested.is_none() && g.snap.status == RunStatus::Running {
                return Ok(g);
            }
            g = self.cv.wait(g).unwrap();
        }
    }

    /// Quiescent point before an invocation: blocks while the run is paused.
    fn enter_invocation(&self, node: &str) -> Result<(), Stop> {
        let mut g = self.lock();
        if g.pause_requested.is_some() || g.snap.status != RunStatus::Running {
            self.set_node_status(&mut g, node, NodeStatus::Paused);
            g = self.wait_running(g)?;
            self.set_node_status(&mut g, node, NodeStatus::Running);
        }
        if self.cancel.load(Ordering::SeqCst) {
            return Err(Stop::Cancelled);
        }
        g.active += 1;
        Ok(())
    }

    fn leave_invocation(&self) {
        let mut g = self.lock();
        g.active -= 1;
        self.try_enter_paused(&mut g);
        self.cv.notify_all();
    }

    /// Pauses the run for `reason`, reporting breakpoint `hits` first, and
    /// returns once resumed.
    fn pause_at(&self, node: &str, reason: PauseReason, hits: &[(String, RecordKey)]) -> Result<(), Stop> {
        let mut g = self.wait_running(self.lock())?;
        for (bp_id, key) in hits {
            let Some(bp) = g.snap.breakpoints.iter_mut().find(|b| b.bp_id == *bp_id) else { continue };
            bp.hit_count += 1;
            let hit_count = bp.hit_count;
            self.emit(
                &mut g,
                EventBody::BreakpointHit {
                    bp_id: bp_id.clone(),
                    node: node.into(),
                    key: key.to_json(),
                    hit_count,
                },
            );
        }
        g.pause_requested = Some(reason);
        self.set_node_status(&mut g, node, NodeStatus::Paused);
        self.try_enter_paused(&mut g);
        let mut g = self.wait_running(g)?;
        self.set_node_status(&mut g, node, NodeStatus::Running);
        Ok(())
    }

    fn breakpoint_pause(&self, node: &str, hits: &[(String, RecordKey)]) -> Result<(), Stop> {
        let (bp_id, key) = hits[0].clone();
        self.pause_at(
            node,
            PauseReason::Breakpoint {
                bp_id,
                node: node.into(),
                key: key.to_json(),
            },
            hits,
        )
    }

    fn drive(self: Arc<Self>) {
        let order = self.spec.topological_order().expect("validated workflow is acyclic");
        let mut g = self.lock();
        loop {
            if g.snap.status.is_terminal() {
                break;
            }
            // nothing downstream of a failure, or after it, starts
            let blocked: Vec<String> = order
                .iter()
                .filter(|id| {
                    g.snap.nodes[*id].status == NodeStatus::Waiting
                        && (g.failed
                            || self.spec.incoming(id).iter().any(|e| {
                                g.snap
                                    .nodes
                                    .get(&e.from)
                                    .is_some_and(|n| matches!(n.status, NodeStatus::Failed | NodeStatus::Skipped))
                            }))
                })
                .cloned()
                .collect();
            for id in blocked {
                self.set_node_status(&mut g, &id, NodeStatus::Skipped);
            }
            if g.pause_requested.is_none() && g.snap.status == RunStatus::Running && !g.failed {
                for id in &order {
                    if g.workers >= self.config.max_parallel.max(1) {
                        break;
                    }
                    let ready = g.snap.nodes[id].status == NodeStatus::Waiting
                        && self
                            .spec
                            .incoming(id)
                            .iter()
                            .all(|e| g.snap.nodes.get(&e.from).is_none_or(|n| n.status == NodeStatus::Done));
                    if ready {
                        g.workers += 1;
                        g.snap.nodes.get_mut(id).unwrap().started_ms = Some(now_ms());
                        g.snap.start_order.push(id.clone());
                        self.set_node_status(&mut g, id, NodeStatus::Running);
                        let me = self.clone();
                        let node = id.clone();
                        thread::spawn(move || me.worker(node));
                    }
                }
            }
            if g.workers == 0 && g.snap.nodes.values().all(|n| n.status.is_settled()) {
                let all_done = g.snap.nodes.values().all(|n| n.status == NodeStatus::Done);
                g.pause_requested = None;
                g.snap.pause_reason = None;
                g.snap.finished_ms = Some(now_ms());
                self.set_status(&mut g, if all_done { RunStatus::Completed } else { RunStatus::Failed });
                break;
            }
            g = self.cv.wait(g).unwrap();
        }
    }

    fn worker(self: Arc<Self>, node: String) {
        let outcome = self.execute_node(&node);
        let mut g = self.lock();
        g.workers -= 1;
        if let Err(Stop::Failed(msg)) = outcome {
            if !g.snap.status.is_terminal() {
                g.failed = true;
                g.snap.nodes.get_mut(&node).unwrap().error = Some(msg.clone());
                if g.snap.error.is_none() {
                    g.snap.error = Some(format!("node `{node}`: {msg}"));
                }
                self.set_node_status(&mut g, &node, NodeStatus::Failed);
                // a pause requested by this node can no longer be honoured by it
                self.try_enter_paused(&mut g);
            }
        }
        self.cv.notify_all();
    }

    fn set_progress(&self, node: &str, done: usize, total: usize) {
        let mut g = self.lock();
        let n = g.snap.nodes.get_mut(node).unwrap();
        n.partitions_done = done;
        n.partitions_total = total;
        let fraction = if total == 0 { 1.0 } else { done as f64 / total as f64 };
        if fraction < n.progress {
            return;
        }
        n.progress = fraction;
        self.emit(
            &mut g,
            EventBody::Progress {
                node: node.into(),
                fraction,
            },
        );
        self.persist(&g);
    }

    fn record_failure(&self, node: &NodeSpec, inv: Option<&Invocation>, inputs: &[DatasetUri], filters: &[Option<Predicate>]) {
        let now = now_ms();
        let info = RunInfo {
            run_id: self.id.clone(),
            node_id: node.id.clone(),
            module: node.module.clone(),
            version: node.version.clone(),
            params: node.params.clone(),
            started_ms: inv.map_or(now, |i| i.started_ms),
            finished_ms: inv.map_or(now, |i| i.finished_ms),
            exit_status: inv.and_then(|i| i.exit_status),
            failure: inv.and_then(|i| i.failure.clone()),
            inputs: inputs.to_vec(),
            input_filters: filters.to_vec(),
            partitioning: None,
        };
        let _ = self.lineage.record_run(info, &[]);
    }

    fn execute_node(&self, id: &str) -> Result<(), Stop> {
        let spec = self.spec.node(id).expect("known node").clone();
        let m = self.manifests[id].clone();
        let dir = self.dir.join(id);
        fs::create_dir_all(&dir).map_err(fail)?;
        let (node_filter, bps, track, mode) = {
            let g = self.lock();
            let bps: Vec<Breakpoint> = g
                .snap
                .breakpoints
                .iter()
                .filter(|b| b.node == id && b.enabled)
                .cloned()
                .collect();
            (
                g.snap.filters.get(id).cloned(),
                bps,
                g.snap.track.clone(),
                g.snap.partitions.get(id).cloned(),
            )
        };
        self.metrics
            .describe_node(&self.id, id, &spec.module, &spec.params)
            .map_err(fail)?;
        let key = self.spec.key_column.as_deref();

        // materialize inputs
        let mut tables = Vec::new();
        let mut input_paths = Vec::new();
        let mut uris = Vec::new();
        let mut filters = Vec::new();
        for e in self.spec.incoming(id) {
            let (table, uri, upstream) = match self.sources.get(&e.from) {
                Some(src) => {
                    let f = self.lock().snap.filters.get(&e.from).cloned();
                    ((*src.table).clone(), src.uri.clone(), f)
                }
                None => {
                    let (path, uri) = {
                        let g = self.lock();
                        let up = &g.snap.nodes[&e.from];
                        match (up.outputs.get(e.output), up.output_uris.get(e.output)) {
                            (Some(p), Some(u)) => (p.clone(), u.clone()),
                            _ => {
                                return Err(Stop::Failed(format!(
                                    "`{}` produced {} outputs; edge {} reads output {}",
                                    e.from,
                                    up.outputs.len(),
                                    e.id(),
                                    e.output
                                )))
                            }
                        }
                    };
                    (keyed(load_table(&path, None).map_err(fail)?, key), uri, None)
                }
            };
            let own = if e.slot == 0 { node_filter.as_ref() } else { None };
            let combined = conjoin(upstream.as_ref(), own);
            let t = match &combined {
                Some(p) => p.filter_table(&table).map_err(|err| fail(format!("filter `{p}`: {err}")))?,
                None => table,
            };
            let path = write_table(&t, dir.join(format!("input-{}.csv", e.slot))).map_err(fail)?;
            {
                let mut g = self.lock();
                let edge_id = e.id();
                if let Some(es) = g.snap.edges.iter_mut().find(|x| x.id == edge_id) {
                    es.path = Some(path.clone());
                    es.rows = Some(t.len());
                }
                g.snap.nodes.get_mut(id).unwrap().inputs.push(path.clone());
                self.persist(&g);
            }
            tables.push(t);
            input_paths.push(path);
            uris.push(uri);
            filters.push(combined);
        }

        // plan invocations
        let bind = |scope: Scope, t: &Table| -> Result<Vec<(String, crate::filter::BoundPredicate)>, Stop> {
            bps.iter()
                .filter(|b| b.scope == scope)
                .map(|b| {
                    b.predicate
                        .bind(t.schema())
                        .map(|p| (b.bp_id.clone(), p))
                        .map_err(|err| fail(format!("breakpoint {}: {err}", b.bp_id)))
                })
                .collect()
        };
        let input_bps = match tables.first() {
            Some(t) => bind(Scope::Input, t)?,
            None => Vec::new(),
        };
        let partitioned = m.record_wise && !tables.is_empty() && (mode.is_some() || !input_bps.is_empty());
        let plan: Vec<PlannedPartition> = if partitioned {
            let base = match &mode {
                Some(mode) => plan_partitions(&tables[0], mode).map_err(fail)?,
                None => vec![(0..tables[0].len()).collect()],
            };
            split_on_breakpoints(&tables[0], base, &input_bps)
        } else {
            // whole-input evaluation: one pause before the single invocation
            let hits = tables.first().map_or_else(Vec::new, |t| {
                input_bps
                    .iter()
                    .filter_map(|(bp, p)| t.rows().iter().find(|r| p.eval(r)).map(|r| (bp.clone(), r.key.clone())))
                    .collect()
            });
            vec![PlannedPartition {
                rows: Vec::new(),
                auto_pause: false,
                hits,
            }]
        };
        let mut partitioning = mode.as_ref().map(|m| match m {
            PartitionMode::Fraction(p) => format!("fraction {p}"),
            PartitionMode::Blocking(p) => format!("blocking {p}"),
        });
        if partitioned && !input_bps.is_empty() {
            partitioning = Some(match partitioning {
                Some(p) => format!("{p}, split at breakpoint records"),
                None => "split at breakpoint records".into(),
            });
        }
        self.set_progress(id, 0, plan.len());
        let opts = InvokeOptions {
            timeout: spec
                .timeout_secs
                .map(Duration::from_secs_f64)
                .unwrap_or(self.config.timeout),
            cancel: Some(self.cancel.clone()),
        };

        let mut done: Vec<Invocation> = Vec::new();
        for (k, part) in plan.iter().enumerate() {
            if part.auto_pause {
                self.pause_at(
                    id,
                    PauseReason::Auto {
                        node: id.into(),
                        partition: k,
                    },
                    &[],
                )?;
            }
            if !part.hits.is_empty() {
                self.breakpoint_pause(id, &part.hits)?;
            }
            let (inputs, work) = if partitioned {
                let pdir = dir.join("partitions");
                fs::create_dir_all(&pdir).map_err(fail)?;
                let rows = part.rows.iter().map(|&i| tables[0].rows()[i].clone()).collect();
                let p = write_table(&tables[0].with_rows(rows), pdir.join(format!("part-{k:04}.csv"))).map_err(fail)?;
                let mut inputs = vec![p];
                inputs.extend(input_paths.iter().skip(1).cloned());
                (inputs, dir.join(format!("part-{k:04}")))
            } else {
                (input_paths.clone(), dir.join("work"))
            };
            self.enter_invocation(id)?;
            // the run only counts as quiescent once this partition is fully accounted for
            let active = ActiveInvocation(self);
            let res = invoke_module(&m, &spec.params, &inputs, &work, &opts);
            let inv = match res {
                Ok(inv) => inv,
                Err(e) => {
                    self.record_failure(&spec, None, &uris, &filters);
                    return Err(fail(e));
                }
            };
            if self.cancel.load(Ordering::SeqCst) {
                return Err(Stop::Cancelled);
            }
            let bundle = match inv.outcome() {
                Ok(b) => b.clone(),
                Err(e) => {
                    self.record_failure(&spec, Some(&inv), &uris, &filters);
                    let log = fs::read_to_string(inv.work_dir.join("stderr.log")).unwrap_or_default();
                    let tail: Vec<&str> = log.lines().rev().take(5).collect();
                    if tail.is_empty() {
                        return Err(fail(e));
                    }
                    let tail: Vec<&str> = tail.into_iter().rev().collect();
                    return Err(Stop::Failed(format!("{e}; stderr: {}", tail.join(" | "))));
                }
            };
            for meta in bundle.metadata.iter().filter(|p| p.file_name().is_some_and(|n| n == METRICS_FILE)) {
                let fresh = self.metrics.ingest(&self.id, id, meta).map_err(fail)?;
                if !fresh.is_empty() {
                    let metrics = self.metrics.node_metrics(&self.id, id);
                    let mut g = self.lock();
                    for name in fresh {
                        let value = metrics.iter().find(|x| x.name == name).and_then(|x| x.exposed());
                        self.emit(
                            &mut g,
                            EventBody::MetricRegistered {
                                node: id.into(),
                                name,
                                value,
                            },
                        );
                    }
                }
            }
            done.push(inv);
            if partitioned {
                let cdir = dir.join("cumulative");
                fs::create_dir_all(&cdir).map_err(fail)?;
                let cumulative = write_cumulative(&done, &cdir).map_err(fail)?;
                let mut g = self.lock();
                let n = g.snap.nodes.get_mut(id).unwrap();
                n.partition_outputs.push(bundle.output.clone());
                n.cumulative = cumulative;
            }
            self.set_progress(id, k + 1, plan.len());
            drop(active);
            let output_bps = match bundle.output.first() {
                Some(p) => {
                    let t = keyed(load_table(p, None).map_err(fail)?, key);
                    let bound = bind(Scope::Output, &t)?;
                    bound
                        .iter()
                        .filter_map(|(bp, p)| t.rows().iter().find(|r| p.eval(r)).map(|r| (bp.clone(), r.key.clone())))
                        .collect::<Vec<_>>()
                }
                None => Vec::new(),
            };
            if !output_bps.is_empty() {
                self.breakpoint_pause(id, &output_bps)?;
            }
        }

        // collect outputs
        let width = done[0].bundle.as_ref().map_or(0, |b| b.output.len());
        let mut outputs = Vec::new();
        for i in 0..width {
            let paths: Vec<PathBuf> = done
                .iter()
                .map(|inv| inv.bundle.as_ref().and_then(|b| b.output.get(i).cloned()))
                .collect::<Option<_>>()
                .ok_or_else(|| fail("partitions produced different numbers of output tables"))?;
            let t = load_concatenated(&paths).map_err(fail)?;
            let path = write_table(&t, dir.join(format!("output-{i}.csv"))).map_err(fail)?;
            outputs.push((path, t));
        }
        let info = RunInfo {
            run_id: self.id.clone(),
            node_id: id.into(),
            module: spec.module.clone(),
            version: spec.version.clone(),
            params: spec.params.clone(),
            started_ms: done[0].started_ms,
            finished_ms: done.last().unwrap().finished_ms,
            exit_status: Some(0),
            failure: None,
            inputs: uris,
            input_filters: filters,
            partitioning,
        };
        let (_, out_uris) = self.lineage.record_run(info, &outputs).map_err(fail)?;

        if let (Some(p), Some(input), Some((_, output))) = (&track, tables.first(), outputs.first()) {
            let output = keyed(output.clone(), key);
            let pairs = track_pairs(p, input, &output);
            if !pairs.is_empty() {
                let mut g = self.lock();
                let mut buf = Vec::new();
                for (k, before, after) in pairs {
                    g.track_seq += 1;
                    let entry = TrackEntry {
                        seq: g.track_seq,
                        run: self.id.clone(),
                        node: id.into(),
                        module: spec.module.clone(),
                        params: spec.params.clone(),
                        key: k.to_json(),
                        before,
                        after,
                    };
                    buf.extend(serde_json::to_vec(&entry).expect("entry serializes"));
                    buf.push(b'\n');
                }
                let path = g.snap.tracking_file.clone().expect("tracking file set with track");
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .and_then(|mut f| f.write_all(&buf))
                    .map_err(fail)?;
            }
        }

        let mut g = self.lock();
        if self.cancel.load(Ordering::SeqCst) {
            return Err(Stop::Cancelled);
        }
        let n = g.snap.nodes.get_mut(id).unwrap();
        n.outputs = outputs.into_iter().map(|(p, _)| p).collect();
        n.output_uris = out_uris;
        self.set_node_status(&mut g, id, NodeStatus::Done);
        Ok(())
    }
}
