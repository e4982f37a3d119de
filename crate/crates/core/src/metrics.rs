//! Per-run metric registry.
//!
//! A module reports metrics by writing `metrics.jsonl` on its metadata
//! stream, one `{"op":"set"|"register","name":..,"value":..}` object per line.
//! Metrics are scoped per (run, node). A metric is surfaced only once
//! registered, and its exposed value is the last value set.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::ParamValues;
use crate::util::digest_parts;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric `{name}`: value {value} is not finite")]
    NotFinite { name: String, value: f64 },
    #[error("metric `{0}` never set")]
    NeverSet(String),
    #[error("{path}:{line}: {message}")]
    BadLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("metric store: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub values_set: Vec<f64>,
    pub registered: bool,
}

impl Metric {
    /// The surfaced value: the last value set, once registered.
    pub fn exposed(&self) -> Option<f64> {
        if self.registered {
            self.values_set.last().copied()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub node_id: String,
    pub module: String,
    pub name: String,
    pub value: f64,
    pub params: ParamValues,
    pub params_digest: String,
    pub run_started_ms: u64,
}

/// Conjunctive filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelector {
    pub run: Option<String>,
    pub module: Option<String>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Event {
    Run { run: String, started_ms: u64 },
    Node { run: String, node: String, module: String, params: ParamValues },
    Set { run: String, node: String, name: String, value: f64 },
    Register { run: String, node: String, name: String },
}

#[derive(Debug, Clone, Deserialize)]
struct Line {
    op: String,
    name: String,
    #[serde(default)]
    value: Option<f64>,
}

#[derive(Debug, Default)]
struct State {
    runs: BTreeMap<String, u64>,
    nodes: BTreeMap<(String, String), (String, ParamValues)>,
    metrics: BTreeMap<(String, String), BTreeMap<String, Metric>>,
}

impl State {
    fn apply(&mut self, e: &Event) -> Result<bool, MetricError> {
        match e {
            Event::Run { run, started_ms } => {
                self.runs.insert(run.clone(), *started_ms);
            }
            Event::Node { run, node, module, params } => {
                self.nodes.insert((run.clone(), node.clone()), (module.clone(), params.clone()));
            }
            Event::Set { run, node, name, value } => {
                if !value.is_finite() {
                    return Err(MetricError::NotFinite { name: name.clone(), value: *value });
                }
                self.metrics
                    .entry((run.clone(), node.clone()))
                    .or_default()
                    .entry(name.clone())
                    .or_insert_with(|| Metric {
                        name: name.clone(),
                        values_set: Vec::new(),
                        registered: false,
                    })
                    .values_set
                    .push(*value);
            }
            Event::Register { run, node, name } => {
                let m = self
                    .metrics
                    .get_mut(&(run.clone(), node.clone()))
                    .and_then(|ms| ms.get_mut(name))
                    .ok_or_else(|| MetricError::NeverSet(name.clone()))?;
                let first = !m.registered;
                m.registered = true;
                return Ok(first);
            }
        }
        Ok(false)
    }
}

/// Metric store with an optional append-only JSON Lines journal.
#[derive(Debug, Default)]
pub struct MetricStore {
    state: Mutex<State>,
    journal: Option<PathBuf>,
}

impl MetricStore {
    pub fn in_memory() -> Self {
        MetricStore::default()
    }

    /// Opens (replaying) or creates the journal at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let path = path.as_ref().to_path_buf();
        let mut state = State::default();
        if path.exists() {
            for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: Event = serde_json::from_str(line).map_err(|e| MetricError::BadLine {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                state.apply(&e)?;
            }
        }
        Ok(MetricStore {
            state: Mutex::new(state),
            journal: Some(path),
        })
    }

    fn record(&self, e: Event) -> Result<bool, MetricError> {
        let mut state = self.state.lock().unwrap();
        let fresh = state.apply(&e)?;
        if let Some(path) = &self.journal {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&e).expect("event serializes");
            line.push(b'\n');
            f.write_all(&line)?;
        }
        Ok(fresh)
    }

    pub fn begin_run(&self, run: &str, started_ms: u64) -> Result<(), MetricError> {
        self.record(Event::Run { run: run.into(), started_ms })?;
        Ok(())
    }

    pub fn describe_node(&self, run: &str, node: &str, module: &str, params: &ParamValues) -> Result<(), MetricError> {
        self.record(Event::Node {
            run: run.into(),
            node: node.into(),
            module: module.into(),
            params: params.clone(),
        })?;
        Ok(())
    }

    pub fn set_value(&self, run: &str, node: &str, name: &str, value: f64) -> Result<(), MetricError> {
        if !value.is_finite() {
            return Err(MetricError::NotFinite { name: name.into(), value });
        }
        self.record(Event::Set {
            run: run.into(),
            node: node.into(),
            name: name.into(),
            value,
        })?;
        Ok(())
    }

    /// Registers a metric. Returns true the first time. Registering twice is a no-op.
    pub fn register(&self, run: &str, node: &str, name: &str) -> Result<bool, MetricError> {
        {
            let state = self.state.lock().unwrap();
            let m = state
                .metrics
                .get(&(run.to_string(), node.to_string()))
                .and_then(|ms| ms.get(name))
                .ok_or_else(|| MetricError::NeverSet(name.into()))?;
            if m.registered {
                return Ok(false);
            }
        }
        self.record(Event::Register {
            run: run.into(),
            node: node.into(),
            name: name.into(),
        })
    }

    /// Applies a module's `metrics.jsonl` in file order. Returns the names
    /// registered for the first time.
    pub fn ingest(&self, run: &str, node: &str, path: &Path) -> Result<Vec<String>, MetricError> {
        let text = fs::read_to_string(path)?;
        let mut registered = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |message: String| MetricError::BadLine {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let line: Line = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            match line.op.as_str() {
                "set" => {
                    let v = line.value.ok_or_else(|| bad("set without a value".into()))?;
                    self.set_value(run, node, &line.name, v)?;
                }
                "register" => {
                    if self.register(run, node, &line.name)? {
                        registered.push(line.name);
                    }
                }
                other => return Err(bad(format!("unknown op `{other}`"))),
            }
        }
        Ok(registered)
    }

    /// All metrics of one (run, node), registered or not.
    pub fn node_metrics(&self, run: &str, node: &str) -> Vec<Metric> {
        let state = self.state.lock().unwrap();
        state
            .metrics
            .get(&(run.to_string(), node.to_string()))
            .map(|ms| ms.values().cloned().collect())
            .unwrap_or_default()
    }

    /// Registered metrics matching `sel`, ordered by run start time, then node and name.
    pub fn query(&self, sel: &MetricSelector) -> Vec<MetricRow> {
        let state = self.state.lock().unwrap();
        let mut rows = Vec::new();
        for ((run, node), metrics) in &state.metrics {
            if sel.run.as_ref().is_some_and(|r| r != run) {
                continue;
            }
            let (module, params) = state
                .nodes
                .get(&(run.clone(), node.clone()))
                .cloned()
                .unwrap_or_default();
            if sel.module.as_ref().is_some_and(|m| *m != module) {
                continue;
            }
            for m in metrics.values() {
                if sel.name.as_ref().is_some_and(|n| *n != m.name) {
                    continue;
                }
                let Some(value) = m.exposed() else { continue };
                let canonical = serde_json::to_string(&params).expect("params serialize");
                rows.push(MetricRow {
                    run_id: run.clone(),
                    node_id: node.clone(),
                    module: module.clone(),
                    name: m.name.clone(),
                    value,
                    params_digest: digest_parts([canonical.as_str()]),
                    params: params.clone(),
                    run_started_ms: state.runs.get(run).copied().unwrap_or(0),
                });
            }
        }
        rows.sort_by(|a, b| {
            (a.run_started_ms, &a.run_id, &a.node_id, &a.name).cmp(&(b.run_started_ms, &b.run_id, &b.node_id, &b.name))
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_write_wins_after_register() {
        let s = MetricStore::in_memory();
        s.set_value("r1", "train", "f1", 0.7).unwrap();
        s.set_value("r1", "train", "f1", 0.9).unwrap();
        assert!(s.query(&MetricSelector::default()).is_empty());
        assert!(s.register("r1", "train", "f1").unwrap());
        let rows = s.query(&MetricSelector::default());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].value, 0.9);
        assert!(!s.register("r1", "train", "f1").unwrap());
    }

    #[test]
    fn unregistered_and_invalid() {
        let s = MetricStore::in_memory();
        s.set_value("r1", "n", "rmse", 1.0).unwrap();
        assert!(s.query(&MetricSelector::default()).is_empty());
        assert!(matches!(s.set_value("r1", "n", "rmse", f64::NAN), Err(MetricError::NotFinite { .. })));
        assert!(matches!(s.register("r1", "n", "nope"), Err(MetricError::NeverSet(_))));
        // scoped per node: registering on another node of the same run fails
        assert!(s.register("r1", "other", "rmse").is_err());
    }

    #[test]
    fn query_orders_by_run_start_and_isolates_runs() {
        let s = MetricStore::in_memory();
        for (run, start, v) in [("b", 20, 0.85), ("a", 10, 0.8)] {
            s.begin_run(run, start).unwrap();
            let params: ParamValues = [("lr".to_string(), serde_json::json!(v))].into();
            s.describe_node(run, "train", "trainer", &params).unwrap();
            s.set_value(run, "train", "f1", v).unwrap();
            s.register(run, "train", "f1").unwrap();
        }
        let rows = s.query(&MetricSelector { module: Some("trainer".into()), ..Default::default() });
        let got: Vec<(&str, f64)> = rows.iter().map(|r| (r.run_id.as_str(), r.value)).collect();
        assert_eq!(got, vec![("a", 0.8), ("b", 0.85)]);
        assert_eq!(rows[0].params["lr"], serde_json::json!(0.8));
        let only_b = s.query(&MetricSelector { run: Some("b".into()), ..Default::default() });
        assert_eq!(only_b.len(), 1);
        assert!(s.query(&MetricSelector { name: Some("nope".into()), ..Default::default() }).is_empty());
    }

    #[test]
    fn ingests_module_file_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(METRICS_FILE);
        fs::write(
            &m,
            "{\"op\":\"set\",\"name\":\"f1\",\"value\":0.7}\n{\"op\":\"set\",\"name\":\"f1\",\"value\":0.9}\n\
             {\"op\":\"register\",\"name\":\"f1\"}\n{\"op\":\"set\",\"name\":\"loss\",\"value\":3}\n",
        )
        .unwrap();
        let journal = dir.path().join("store.jsonl");
        {
            let s = MetricStore::open(&journal).unwrap();
            assert_eq!(s.ingest("r", "n", &m).unwrap(), vec!["f1".to_string()]);
        }
        let s = MetricStore::open(&journal).unwrap();
        let rows = s.query(&MetricSelector::default());
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].name.as_str(), rows[0].value), ("f1", 0.9));
        assert_eq!(s.node_metrics("r", "n").len(), 2);

        fs::write(&m, "{\"op\":\"register\",\"name\":\"ghost\"}\n").unwrap();
        assert!(matches!(s.ingest("r", "n", &m), Err(MetricError::NeverSet(_))));
        fs::write(&m, "not json\n").unwrap();
        assert!(matches!(s.ingest("r", "n", &m), Err(MetricError::BadLine { .. })));
    }
}
