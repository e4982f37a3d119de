//! Dataset provenance: permanent dataset URIs, an append-only journal of
//! module runs, upstream lineage queries and chain replay.
//!
//! A derived dataset's URI digests its content hash, the derivation
//! fingerprint of the run that produced it (module, version, parameters,
//! input filters and input URIs) and the node id. Re-running the same
//! deterministic chain therefore mints the same URIs. Source datasets digest
//! their content hash, the word `source` and their path.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::filter::Predicate;
use crate::host::{invoke_module, HostError, InvocationFailure, InvokeOptions, ParamValues, Registry};
use crate::table::{load_table, write_table, Table, TableError};
use crate::util::{digest_parts, now_ms};

pub const URI_SCHEME: &str = "dcd://";

#[derive(Debug, Error)]
pub enum LineageError {
    #[error("unknown dataset {0}")]
    UnknownUri(String),
    #[error("malformed dataset URI `{0}`")]
    BadUri(String),
    #[error("lineage journal {path}:{line}: {message}")]
    BadJournal {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("source dataset {uri} is no longer readable at {path}")]
    MissingSource { uri: String, path: PathBuf },
    #[error("replay of {node} failed: {message}")]
    Replay { node: String, message: String },
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("lineage store: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LineageError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DatasetUri(String);

impl DatasetUri {
    pub fn for_source(content_hash: &str, path: &Path) -> Self {
        DatasetUri(format!(
            "{URI_SCHEME}{}",
            digest_parts([content_hash, "source", &path.to_string_lossy()])
        ))
    }

    pub fn for_output(content_hash: &str, fingerprint: &str, node_id: &str) -> Self {
        DatasetUri(format!("{URI_SCHEME}{}", digest_parts([content_hash, fingerprint, node_id])))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DatasetUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DatasetUri {
    type Err = LineageError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix(URI_SCHEME) {
            Some(h) if h.len() == 64 && h.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) => {
                Ok(DatasetUri(s.to_string()))
            }
            _ => Err(LineageError::BadUri(s.to_string())),
        }
    }
}

impl Serialize for DatasetUri {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DatasetUri {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub uri: DatasetUri,
    pub content_hash: String,
    pub schema: String,
    pub rows: usize,
    /// Where the content was first stored.
    pub path: PathBuf,
    pub source: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `{run_id}/{node_id}`.
    pub key: String,
    pub run_id: String,
    pub node_id: String,
    pub module: String,
    pub version: String,
    pub params: ParamValues,
    pub params_digest: String,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub exit_status: Option<i32>,
    pub failure: Option<InvocationFailure>,
    pub inputs: Vec<DatasetUri>,
    /// Filter applied to each input slot before the module saw it.
    #[serde(default)]
    pub input_filters: Vec<Option<Predicate>>,
    /// How the module's input was partitioned, for the record.
    #[serde(default)]
    pub partitioning: Option<String>,
    pub outputs: Vec<DatasetUri>,
}

impl RunRecord {
    pub fn fingerprint(&self) -> String {
        derivation_fingerprint(&self.module, &self.version, &self.params, &self.input_filters, &self.inputs)
    }
}

pub fn derivation_fingerprint(
    module: &str,
    version: &str,
    params: &ParamValues,
    filters: &[Option<Predicate>],
    inputs: &[DatasetUri],
) -> String {
    let params = serde_json::to_string(params).expect("params serialize");
    let filters = serde_json::to_string(filters).expect("filters serialize");
    let mut parts = vec![module, version, params.as_str(), filters.as_str()];
    parts.extend(inputs.iter().map(DatasetUri::as_str));
    digest_parts(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineageNode {
    Dataset(DatasetRecord),
    Run(RunRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: String,
    pub to: String,
}

/// Upstream closure of a dataset in topological order (ancestors first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageGraph {
    pub root: DatasetUri,
    pub nodes: Vec<LineageNode>,
    pub edges: Vec<LineageEdge>,
}

impl LineageGraph {
    pub fn datasets(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.nodes.iter().filter_map(|n| match n {
            LineageNode::Dataset(d) => Some(d),
            _ => None,
        })
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.nodes.iter().filter_map(|n| match n {
            LineageNode::Run(r) => Some(r),
            _ => None,
        })
    }
}

/// What the engine knows about a finished invocation.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub run_id: String,
    pub node_id: String,
    pub module: String,
    pub version: String,
    pub params: ParamValues,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub exit_status: Option<i32>,
    pub failure: Option<InvocationFailure>,
    pub inputs: Vec<DatasetUri>,
    pub input_filters: Vec<Option<Predicate>>,
    pub partitioning: Option<String>,
}

#[derive(Debug, Default)]
struct Index {
    seq: u64,
    datasets: HashMap<DatasetUri, (u64, DatasetRecord)>,
    runs: BTreeMap<String, (u64, RunRecord)>,
    producer: HashMap<DatasetUri, String>,
}

impl Index {
    fn apply(&mut self, node: LineageNode) {
        self.seq += 1;
        match node {
            LineageNode::Dataset(d) => {
                self.datasets.entry(d.uri.clone()).or_insert((self.seq, d));
            }
            LineageNode::Run(r) => {
                for o in &r.outputs {
                    self.producer.entry(o.clone()).or_insert_with(|| r.key.clone());
                }
                self.runs.entry(r.key.clone()).or_insert((self.seq, r));
            }
        }
    }
}

/// Append-only JSON Lines journal with an in-memory index.
#[derive(Debug, Default)]
pub struct LineageStore {
    index: Mutex<Index>,
    journal: Option<PathBuf>,
}

impl LineageStore {
    pub fn in_memory() -> Self {
        LineageStore::default()
    }

    /// Opens the journal at `path`, rebuilding the index by rescanning it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut index = Index::default();
        if path.exists() {
            for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let node: LineageNode = serde_json::from_str(line).map_err(|e| LineageError::BadJournal {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                index.apply(node);
            }
        }
        Ok(LineageStore {
            index: Mutex::new(index),
            journal: Some(path),
        })
    }

    fn append(&self, index: &mut Index, nodes: Vec<LineageNode>) -> Result<()> {
        if let Some(path) = &self.journal {
            let mut buf = Vec::new();
            for n in &nodes {
                serde_json::to_writer(&mut buf, n).expect("lineage node serializes");
                buf.push(b'\n');
            }
            OpenOptions::new().create(true).append(true).open(path)?.write_all(&buf)?;
        }
        for n in nodes {
            index.apply(n);
        }
        Ok(())
    }

    /// Registers a source dataset stored at `path`.
    pub fn record_source(&self, path: &Path, table: &Table) -> Result<DatasetUri> {
        let hash = table.content_hash();
        let uri = DatasetUri::for_source(&hash, path);
        let mut index = self.index.lock().unwrap();
        if !index.datasets.contains_key(&uri) {
            let d = DatasetRecord {
                uri: uri.clone(),
                content_hash: hash,
                schema: table.schema().summary(),
                rows: table.len(),
                path: path.to_path_buf(),
                source: true,
            };
            self.append(&mut index, vec![LineageNode::Dataset(d)])?;
        }
        Ok(uri)
    }

    /// Records a finished invocation and mints URIs for its output tables.
    /// A failed invocation is recorded with no outputs.
    pub fn record_run(&self, info: RunInfo, outputs: &[(PathBuf, Table)]) -> Result<(RunRecord, Vec<DatasetUri>)> {
        let fingerprint =
            derivation_fingerprint(&info.module, &info.version, &info.params, &info.input_filters, &info.inputs);
        let params_json = serde_json::to_string(&info.params).expect("params serialize");
        let mut nodes = Vec::new();
        let mut uris = Vec::new();
        for (path, t) in outputs {
            let hash = t.content_hash();
            let uri = DatasetUri::for_output(&hash, &fingerprint, &info.node_id);
            uris.push(uri.clone());
            nodes.push(LineageNode::Dataset(DatasetRecord {
                uri,
                content_hash: hash,
                schema: t.schema().summary(),
                rows: t.len(),
                path: path.clone(),
                source: false,
            }));
        }
        let run = RunRecord {
            key: format!("{}/{}", info.run_id, info.node_id),
            run_id: info.run_id,
            node_id: info.node_id,
            module: info.module,
            version: info.version,
            params_digest: digest_parts([params_json.as_str()]),
            params: info.params,
            started_ms: info.started_ms,
            finished_ms: info.finished_ms,
            exit_status: info.exit_status,
            failure: info.failure,
            inputs: info.inputs,
            input_filters: info.input_filters,
            partitioning: info.partitioning,
            outputs: uris.clone(),
        };
        let mut index = self.index.lock().unwrap();
        let fresh: Vec<LineageNode> = nodes
            .into_iter()
            .filter(|n| match n {
                LineageNode::Dataset(d) => !index.datasets.contains_key(&d.uri),
                _ => true,
            })
            .collect();
        let mut batch = vec![LineageNode::Run(run.clone())];
        batch.extend(fresh);
        self.append(&mut index, batch)?;
        Ok((run, uris))
    }

    pub fn dataset(&self, uri: &DatasetUri) -> Option<DatasetRecord> {
        self.index.lock().unwrap().datasets.get(uri).map(|(_, d)| d.clone())
    }

    pub fn producer(&self, uri: &DatasetUri) -> Option<RunRecord> {
        let index = self.index.lock().unwrap();
        let key = index.producer.get(uri)?;
        index.runs.get(key).map(|(_, r)| r.clone())
    }

    pub fn runs_of(&self, run_id: &str) -> Vec<RunRecord> {
        let index = self.index.lock().unwrap();
        let mut runs: Vec<&(u64, RunRecord)> = index.runs.values().filter(|(_, r)| r.run_id == run_id).collect();
        runs.sort_by_key(|(s, _)| *s);
        runs.into_iter().map(|(_, r)| r.clone()).collect()
    }

    /// Every dataset and run upstream of `uri`, ancestors first.
    pub fn get_lineage(&self, uri: &DatasetUri) -> Result<LineageGraph> {
        let index = self.index.lock().unwrap();
        if !index.datasets.contains_key(uri) {
            return Err(LineageError::UnknownUri(uri.to_string()));
        }
        let mut seen_datasets: BTreeSet<DatasetUri> = BTreeSet::new();
        let mut seen_runs: BTreeSet<String> = BTreeSet::new();
        let mut edges = Vec::new();
        let mut stack = vec![uri.clone()];
        while let Some(d) = stack.pop() {
            if !seen_datasets.insert(d.clone()) {
                continue;
            }
            let Some(key) = index.producer.get(&d) else { continue };
            edges.push(LineageEdge {
                from: key.clone(),
                to: d.to_string(),
            });
            if !seen_runs.insert(key.clone()) {
                continue;
            }
            let (_, run) = &index.runs[key];
            for i in &run.inputs {
                edges.push(LineageEdge {
                    from: i.to_string(),
                    to: key.clone(),
                });
                stack.push(i.clone());
            }
        }
        let mut nodes: Vec<(u64, LineageNode)> = Vec::new();
        for d in &seen_datasets {
            let (seq, rec) = index
                .datasets
                .get(d)
                .ok_or_else(|| LineageError::UnknownUri(d.to_string()))?;
            nodes.push((*seq, LineageNode::Dataset(rec.clone())));
        }
        for k in &seen_runs {
            let (seq, rec) = &index.runs[k];
            nodes.push((*seq, LineageNode::Run(rec.clone())));
        }
        // journal order is a topological order: a run is appended after its
        // inputs and before its outputs
        nodes.sort_by_key(|(s, _)| *s);
        edges.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
        edges.dedup();
        Ok(LineageGraph {
            root: uri.clone(),
            nodes: nodes.into_iter().map(|(_, n)| n).collect(),
            edges,
        })
    }

    /// Re-executes the chain that produced `uri`. New runs are recorded under
    /// a fresh run id; `work_root` receives their working directories.
    pub fn replay(&self, uri: &DatasetUri, exec: &dyn ReplayExecutor, work_root: &Path) -> Result<ReplayReport> {
        let graph = self.get_lineage(uri)?;
        let replay_id = format!("replay-{}", uuid::Uuid::new_v4().simple());
        let root_dir = work_root.join(&replay_id);
        fs::create_dir_all(&root_dir)?;
        let mut mapped: HashMap<DatasetUri, (DatasetUri, PathBuf, String)> = HashMap::new();
        let mut comparisons = Vec::new();
        for node in &graph.nodes {
            match node {
                LineageNode::Dataset(d) if d.source => {
                    let t = load_table(&d.path, None).map_err(|_| LineageError::MissingSource {
                        uri: d.uri.to_string(),
                        path: d.path.clone(),
                    })?;
                    let new_uri = self.record_source(&d.path, &t)?;
                    let hash = t.content_hash();
                    comparisons.push(DatasetComparison::new(d, None, &new_uri, &hash));
                    mapped.insert(d.uri.clone(), (new_uri, d.path.clone(), hash));
                }
                LineageNode::Dataset(_) => {}
                LineageNode::Run(run) => {
                    let dir = root_dir.join(&run.node_id);
                    fs::create_dir_all(&dir)?;
                    let mut inputs = Vec::new();
                    let mut input_uris = Vec::new();
                    for (slot, i) in run.inputs.iter().enumerate() {
                        let (new_uri, path, _) = mapped
                            .get(i)
                            .cloned()
                            .ok_or_else(|| LineageError::UnknownUri(i.to_string()))?;
                        input_uris.push(new_uri);
                        // modules always receive the canonical form of their inputs
                        let mut t = load_table(&path, None)?;
                        if let Some(p) = run.input_filters.get(slot).cloned().flatten() {
                            t = p.filter_table(&t).map_err(|e| LineageError::Replay {
                                node: run.node_id.clone(),
                                message: e.to_string(),
                            })?;
                        }
                        inputs.push(write_table(&t, dir.join(format!("input-{slot}.csv")))?);
                    }
                    let started = now_ms();
                    let outs = exec.execute(run, &inputs, &dir)?;
                    let finished = now_ms();
                    let mut tables = Vec::new();
                    for p in &outs {
                        tables.push((p.clone(), load_table(p, None)?));
                    }
                    let info = RunInfo {
                        run_id: replay_id.clone(),
                        node_id: run.node_id.clone(),
                        module: run.module.clone(),
                        version: run.version.clone(),
                        params: run.params.clone(),
                        started_ms: started,
                        finished_ms: finished,
                        exit_status: Some(0),
                        failure: None,
                        inputs: input_uris,
                        input_filters: run.input_filters.clone(),
                        partitioning: None,
                    };
                    let (_, new_uris) = self.record_run(info, &tables)?;
                    for (i, old) in run.outputs.iter().enumerate() {
                        let Some(d) = graph.datasets().find(|d| d.uri == *old) else { continue };
                        let Some(new_uri) = new_uris.get(i) else {
                            return Err(LineageError::Replay {
                                node: run.node_id.clone(),
                                message: format!("produced {} outputs, expected at least {}", new_uris.len(), i + 1),
                            });
                        };
                        let hash = tables[i].1.content_hash();
                        comparisons.push(DatasetComparison::new(d, Some(&run.node_id), new_uri, &hash));
                        mapped.insert(old.clone(), (new_uri.clone(), tables[i].0.clone(), hash));
                    }
                }
            }
        }
        let replayed = mapped
            .get(uri)
            .map(|(u, _, _)| u.clone())
            .ok_or_else(|| LineageError::UnknownUri(uri.to_string()))?;
        let first_divergent = comparisons.iter().find(|c| !c.equal).cloned();
        Ok(ReplayReport {
            original: uri.clone(),
            replayed: replayed.clone(),
            replay_run_id: replay_id,
            equal: first_divergent.is_none() && replayed == *uri,
            datasets: comparisons,
            first_divergent,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    /// Producing node, or `None` for a source dataset.
    pub node_id: Option<String>,
    pub original_uri: DatasetUri,
    pub replayed_uri: DatasetUri,
    pub original_hash: String,
    pub replayed_hash: String,
    pub equal: bool,
}

impl DatasetComparison {
    fn new(d: &DatasetRecord, node: Option<&str>, new_uri: &DatasetUri, new_hash: &str) -> Self {
        DatasetComparison {
            node_id: node.map(str::to_string),
            original_uri: d.uri.clone(),
            replayed_uri: new_uri.clone(),
            original_hash: d.content_hash.clone(),
            replayed_hash: new_hash.to_string(),
            equal: d.content_hash == new_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original: DatasetUri,
    pub replayed: DatasetUri,
    pub replay_run_id: String,
    /// Every dataset hash matched and the final URI is unchanged.
    pub equal: bool,
    /// One entry per dataset of the lineage, in topological order.
    pub datasets: Vec<DatasetComparison>,
    pub first_divergent: Option<DatasetComparison>,
}

/// Re-runs one recorded module invocation on the given (already filtered)
/// inputs inside `work_dir` and returns the output table paths.
pub trait ReplayExecutor {
    fn execute(&self, run: &RunRecord, inputs: &[PathBuf], work_dir: &Path) -> Result<Vec<PathBuf>>;
}

/// Replays through the module registry and the subprocess host.
pub struct HostExecutor<'a> {
    pub registry: &'a Registry,
    pub options: InvokeOptions,
}

impl ReplayExecutor for HostExecutor<'_> {
    fn execute(&self, run: &RunRecord, inputs: &[PathBuf], work_dir: &Path) -> Result<Vec<PathBuf>> {
        let m = self.registry.require(&run.module, &run.version)?;
        let inv = invoke_module(&m, &run.params, inputs, work_dir, &self.options)?;
        let bundle = inv.outcome().map_err(|e| LineageError::Replay {
            node: run.node_id.clone(),
            message: e.to_string(),
        })?;
        Ok(bundle.output.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Upper;

    impl ReplayExecutor for Upper {
        fn execute(&self, _: &RunRecord, inputs: &[PathBuf], dir: &Path) -> Result<Vec<PathBuf>> {
            let t = load_table(&inputs[0], None)?;
            let rows = t
                .rows()
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    for c in &mut r.cells {
                        if let crate::table::Value::Text(s) = c {
                            *s = s.to_uppercase();
                        }
                    }
                    r
                })
                .collect();
            Ok(vec![write_table(&t.with_rows(rows), dir.join("out.csv"))?])
        }
    }

    fn info(run: &str, node: &str, inputs: Vec<DatasetUri>) -> RunInfo {
        RunInfo {
            run_id: run.into(),
            node_id: node.into(),
            module: "upper".into(),
            version: "1".into(),
            params: ParamValues::new(),
            started_ms: 0,
            finished_ms: 1,
            exit_status: Some(0),
            failure: None,
            inputs,
            input_filters: vec![None],
            partitioning: None,
        }
    }

    fn chain(store: &LineageStore, dir: &Path, run: &str) -> Vec<DatasetUri> {
        let src = dir.join("src.csv");
        if !src.exists() {
            fs::write(&src, "a\nx\ny\n").unwrap();
        }
        let mut cur = store.record_source(&src, &load_table(&src, None).unwrap()).unwrap();
        let mut cur_path = src;
        let mut uris = vec![cur.clone()];
        for node in ["n1", "n2"] {
            let wd = dir.join(run).join(node);
            fs::create_dir_all(&wd).unwrap();
            let out = Upper.execute(&dummy(), &[cur_path.clone()], &wd).unwrap().remove(0);
            let t = load_table(&out, None).unwrap();
            let (_, u) = store.record_run(info(run, node, vec![cur.clone()]), &[(out.clone(), t)]).unwrap();
            cur = u[0].clone();
            cur_path = out;
            uris.push(cur.clone());
        }
        uris
    }

    fn dummy() -> RunRecord {
        RunRecord {
            key: String::new(),
            run_id: String::new(),
            node_id: String::new(),
            module: String::new(),
            version: String::new(),
            params: ParamValues::new(),
            params_digest: String::new(),
            started_ms: 0,
            finished_ms: 0,
            exit_status: None,
            failure: None,
            inputs: vec![],
            input_filters: vec![],
            partitioning: None,
            outputs: vec![],
        }
    }

    #[test]
    fn uri_format() {
        let u = DatasetUri::for_source("abc", Path::new("/x.csv"));
        assert!(u.as_str().starts_with("dcd://"));
        assert_eq!(u.as_str().len(), 6 + 64);
        assert_eq!(u.as_str().parse::<DatasetUri>().unwrap(), u);
        assert!("dcd://xyz".parse::<DatasetUri>().is_err());
    }

    #[test]
    fn chain_closure_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let store = LineageStore::open(dir.path().join("lineage.jsonl")).unwrap();
        let a = chain(&store, dir.path(), "r1");
        let b = chain(&store, dir.path(), "r2");
        assert_eq!(a, b);
        let g = store.get_lineage(&a[2]).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(g.runs().count(), 2);
        // producer is the first run that minted the dataset
        assert!(g.runs().all(|r| r.run_id == "r1"));
        let kinds: Vec<bool> = g.nodes.iter().map(|n| matches!(n, LineageNode::Run(_))).collect();
        assert_eq!(kinds, vec![false, true, false, true, false]);
        assert_eq!(store.get_lineage(&a[0]).unwrap().nodes.len(), 1);

        // the index rebuilt from the journal answers the same
        let reopened = LineageStore::open(dir.path().join("lineage.jsonl")).unwrap();
        assert_eq!(reopened.get_lineage(&a[2]).unwrap(), g);
    }

    #[test]
    fn failed_run_has_no_outputs() {
        let store = LineageStore::in_memory();
        let mut i = info("r", "n", vec![]);
        i.exit_status = Some(3);
        i.failure = Some(InvocationFailure::NonZeroExit { code: 3 });
        let (run, uris) = store.record_run(i, &[]).unwrap();
        assert!(uris.is_empty());
        assert_eq!(run.exit_status, Some(3));
        assert_eq!(store.runs_of("r").len(), 1);
    }

    #[test]
    fn replay_equal_then_divergent() {
        let dir = tempfile::tempdir().unwrap();
        let store = LineageStore::in_memory();
        let uris = chain(&store, dir.path(), "r1");
        let report = store.replay(&uris[2], &Upper, &dir.path().join("replays")).unwrap();
        assert!(report.equal);
        assert_eq!(report.replayed, uris[2]);
        assert_eq!(report.datasets.len(), 3);
        let again = store.replay(&report.replayed, &Upper, &dir.path().join("replays")).unwrap();
        assert_eq!(again.replayed, uris[2]);

        fs::write(dir.path().join("src.csv"), "a\nx\nz\n").unwrap();
        let report = store.replay(&uris[2], &Upper, &dir.path().join("replays")).unwrap();
        assert!(!report.equal);
        assert_ne!(report.replayed, uris[2]);
        let first = report.first_divergent.unwrap();
        assert_eq!(first.node_id, None);
        assert_eq!(first.original_uri, uris[0]);

        assert!(matches!(
            store.get_lineage(&DatasetUri::for_source("nope", Path::new("x"))),
            Err(LineageError::UnknownUri(_))
        ));
    }
}
