//! Debugging configuration and the pure parts of the debugger: partition
//! plans for automatic breakpoints, breakpoint bookkeeping and tracking
//! entries. The engine drives them during a run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::filter::{partition_by, FilterError, Predicate, PredicateKind};
use crate::table::{Record, RecordKey, Schema, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scope {
    #[default]
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSpec {
    pub node: String,
    pub predicate: Predicate,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub bp_id: String,
    pub node: String,
    pub predicate: Predicate,
    pub scope: Scope,
    pub enabled: bool,
    pub hit_count: u64,
}

/// How a record-wise node's input is split for automatic breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    Fraction(usize),
    Blocking(Predicate),
}

impl PartitionMode {
    /// Parses `10` or `City = *`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Ok(p) = s.parse::<usize>() {
            if p < 2 {
                return Err(format!("fraction partitions must be at least 2, got {p}"));
            }
            return Ok(PartitionMode::Fraction(p));
        }
        let p: Predicate = s.parse().map_err(|e: FilterError| e.to_string())?;
        if p.kind() != PredicateKind::Wildcard {
            return Err(format!("`{s}` is neither a partition count nor of the form attr = *"));
        }
        Ok(PartitionMode::Blocking(p))
    }
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionMode::Fraction(p) => write!(f, "{p}"),
            PartitionMode::Blocking(p) => write!(f, "{p}"),
        }
    }
}

impl Serialize for PartitionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PartitionMode::Fraction(p) => s.serialize_u64(*p as u64),
            PartitionMode::Blocking(p) => s.serialize_str(&p.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for PartitionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let s = match &v {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            _ => return Err(serde::de::Error::custom("expected a partition count or `attr = *`")),
        };
        PartitionMode::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub node: String,
    pub mode: PartitionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// A node id or a source id.
    pub target: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DebugConfig {
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub breakpoints: Vec<BreakpointSpec>,
    #[serde(default)]
    pub track: Option<Predicate>,
    #[serde(default)]
    pub partitions: Vec<PartitionSpec>,
    /// Request a manual pause this many milliseconds after the run starts.
    #[serde(default)]
    pub pause_after_ms: Option<u64>,
}

/// Row indices of each partition. FRACTION(p) yields `min(p, n)` contiguous
/// chunks whose sizes differ by at most one (one empty chunk when `n = 0`);
/// BLOCKING yields one partition per distinct value in first-occurrence order.
pub fn plan_partitions(t: &Table, mode: &PartitionMode) -> Result<Vec<Vec<usize>>, FilterError> {
    match mode {
        PartitionMode::Fraction(p) => {
            let n = t.len();
            let k = (*p).min(n).max(1);
            let (base, extra) = (n / k, n % k);
            let mut out = Vec::with_capacity(k);
            let mut start = 0;
            for i in 0..k {
                let len = base + usize::from(i < extra);
                out.push((start..start + len).collect());
                start += len;
            }
            Ok(out)
        }
        PartitionMode::Blocking(p) => {
            let indexed = t.with_rows(
                t.rows()
                    .iter()
                    .enumerate()
                    .map(|(i, r)| Record::new(RecordKey::Ordinal(i as u64), r.cells.clone()))
                    .collect(),
            );
            let groups = partition_by(&indexed, p)?;
            if groups.is_empty() {
                return Ok(vec![Vec::new()]);
            }
            Ok(groups
                .into_iter()
                .map(|(_, g)| {
                    g.rows()
                        .iter()
                        .map(|r| match r.key {
                            RecordKey::Ordinal(i) => i as usize,
                            _ => unreachable!(),
                        })
                        .collect()
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoBreakpointPlan {
    pub node_id: String,
    pub mode: PartitionMode,
    pub partitions: Vec<Vec<usize>>,
    pub pauses: usize,
}

pub fn plan_auto_breakpoints(node_id: &str, t: &Table, mode: &PartitionMode) -> Result<AutoBreakpointPlan, FilterError> {
    let partitions = plan_partitions(t, mode)?;
    Ok(AutoBreakpointPlan {
        node_id: node_id.to_string(),
        mode: mode.clone(),
        pauses: partitions.len() - 1,
        partitions,
    })
}

/// Why a run is paused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PauseReason {
    Manual,
    Auto { node: String, partition: usize },
    Breakpoint { bp_id: String, node: String, key: serde_json::Value },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPartition {
    pub rows: Vec<usize>,
    /// Automatic pause before this partition.
    pub auto_pause: bool,
    /// Input-scope breakpoints hit by this partition's first row.
    pub hits: Vec<(String, RecordKey)>,
}

/// Splits `base` partitions so that every row matching an armed input-scope
/// breakpoint starts its own partition, which the engine pauses before.
pub fn split_on_breakpoints(
    t: &Table,
    base: Vec<Vec<usize>>,
    bps: &[(String, crate::filter::BoundPredicate)],
) -> Vec<PlannedPartition> {
    let mut out = Vec::new();
    for (k, part) in base.into_iter().enumerate() {
        let mut cur = PlannedPartition {
            rows: Vec::new(),
            auto_pause: k > 0,
            hits: Vec::new(),
        };
        for i in part {
            let row = &t.rows()[i];
            let hits: Vec<(String, RecordKey)> = bps
                .iter()
                .filter(|(_, p)| p.eval(row))
                .map(|(id, _)| (id.clone(), row.key.clone()))
                .collect();
            if !hits.is_empty() {
                if !cur.rows.is_empty() {
                    out.push(std::mem::replace(
                        &mut cur,
                        PlannedPartition {
                            rows: Vec::new(),
                            auto_pause: false,
                            hits: Vec::new(),
                        },
                    ));
                }
                cur.hits = hits;
            }
            cur.rows.push(i);
        }
        out.push(cur);
    }
    out
}

/// One tracking-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub seq: u64,
    pub run: String,
    pub node: String,
    pub module: String,
    pub params: crate::host::ParamValues,
    pub key: serde_json::Value,
    /// `null` when the record only appears at the output.
    pub before: serde_json::Value,
    /// `"DROPPED"` when the record does not appear at the output.
    pub after: serde_json::Value,
}

pub const DROPPED: &str = "DROPPED";

/// Records matching `p` at the node's input or output, paired by key.
/// Returns (key, before, after) in input order, then output-only records in
/// output order.
fn key_index(t: &Table) -> HashMap<&RecordKey, usize> {
    let mut m = HashMap::new();
    for (i, r) in t.rows().iter().enumerate() {
        m.entry(&r.key).or_insert(i);
    }
    m
}

pub fn track_pairs(
    p: &Predicate,
    input: &Table,
    output: &Table,
) -> Vec<(RecordKey, serde_json::Value, serde_json::Value)> {
    let matcher = |t: &Table| p.bind(t.schema()).ok();
    let (pin, pout) = (matcher(input), matcher(output));
    let (in_idx, out_idx) = (key_index(input), key_index(output));
    let obj = |r: &Record, s: &Schema| r.to_json_object(s);
    let mut out = Vec::new();
    let mut seen: HashMap<&RecordKey, ()> = HashMap::new();
    for r in input.rows() {
        if seen.contains_key(&r.key) {
            continue;
        }
        let partner = out_idx.get(&r.key).map(|&i| &output.rows()[i]);
        let hit = pin.as_ref().is_some_and(|b| b.eval(r)) || partner.is_some_and(|o| pout.as_ref().is_some_and(|b| b.eval(o)));
        if hit {
            seen.insert(&r.key, ());
            let after = match partner {
                Some(o) => obj(o, output.schema()),
                None => serde_json::Value::from(DROPPED),
            };
            out.push((r.key.clone(), obj(r, input.schema()), after));
        }
    }
    for o in output.rows() {
        if in_idx.contains_key(&o.key) || seen.contains_key(&o.key) {
            continue;
        }
        if pout.as_ref().is_some_and(|b| b.eval(o)) {
            seen.insert(&o.key, ());
            out.push((o.key.clone(), serde_json::Value::Null, obj(o, output.schema())));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::parse_predicate;
    use crate::table::Value;

    fn rows(n: usize) -> Table {
        let raw: Vec<Vec<String>> = (0..n).map(|i| vec![i.to_string()]).collect();
        let refs: Vec<Vec<&str>> = raw.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        Table::from_strings(&["x"], &refs).unwrap()
    }

    #[test]
    fn fraction_ten_over_hundred() {
        let plan = plan_auto_breakpoints("n", &rows(100), &PartitionMode::Fraction(10)).unwrap();
        assert_eq!(plan.partitions.len(), 10);
        assert!(plan.partitions.iter().all(|p| p.len() == 10));
        assert_eq!(plan.pauses, 9);
    }

    #[test]
    fn fraction_edge_cases() {
        let p = plan_partitions(&rows(1), &PartitionMode::Fraction(2)).unwrap();
        assert_eq!(p, vec![vec![0]]);
        let p = plan_partitions(&rows(0), &PartitionMode::Fraction(3)).unwrap();
        assert_eq!(p, vec![Vec::<usize>::new()]);
        let p = plan_partitions(&rows(3), &PartitionMode::Fraction(5)).unwrap();
        assert_eq!(p.len(), 3);
        let p = plan_partitions(&rows(11), &PartitionMode::Fraction(3)).unwrap();
        let sizes: Vec<usize> = p.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 3]);
    }

    #[test]
    fn blocking_groups_by_value() {
        let t = Table::from_strings(&["City"], &[vec!["Chi"], vec!["NY"], vec!["Chi"]]).unwrap();
        let p = plan_partitions(&t, &PartitionMode::parse("City = *").unwrap()).unwrap();
        assert_eq!(p, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(PartitionMode::parse("10").unwrap(), PartitionMode::Fraction(10));
        assert!(PartitionMode::parse("1").is_err());
        assert!(PartitionMode::parse("City = 'x'").is_err());
        let m: PartitionMode = serde_json::from_str("\"City = *\"").unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"City = *\"");
        let m: PartitionMode = serde_json::from_str("4").unwrap();
        assert_eq!(m, PartitionMode::Fraction(4));
    }

    #[test]
    fn breakpoints_split_partitions() {
        let t = rows(10);
        let bp = parse_predicate("x = 3").unwrap().bind(t.schema()).unwrap();
        let bp7 = parse_predicate("x >= 7").unwrap().bind(t.schema()).unwrap();
        let base = plan_partitions(&t, &PartitionMode::Fraction(2)).unwrap();
        let plan = split_on_breakpoints(&t, base, &[("a".into(), bp), ("b".into(), bp7)]);
        let shape: Vec<(Vec<usize>, bool, usize)> = plan.iter().map(|p| (p.rows.clone(), p.auto_pause, p.hits.len())).collect();
        assert_eq!(
            shape,
            vec![
                (vec![0, 1, 2], false, 0),
                (vec![3, 4], false, 1),
                (vec![5, 6], true, 0),
                (vec![7], false, 1),
                (vec![8], false, 1),
                (vec![9], false, 1),
            ]
        );
    }

    #[test]
    fn tracking_pairs_by_key() {
        let input = Table::from_strings(&["id", "city"], &[vec!["1", "Chicago"], vec!["2", "NY"], vec!["3", "Chicago"]])
            .unwrap()
            .with_key_column("id")
            .unwrap();
        let output = Table::from_strings(&["id", "city"], &[vec!["1", "CHICAGO"], vec!["4", "Chicago"]])
            .unwrap()
            .with_key_column("id")
            .unwrap();
        let p = parse_predicate("city = 'Chicago'").unwrap();
        let got = track_pairs(&p, &input, &output);
        let keys: Vec<RecordKey> = got.iter().map(|g| g.0.clone()).collect();
        assert_eq!(
            keys,
            vec![RecordKey::Cell(Value::Int(1)), RecordKey::Cell(Value::Int(3)), RecordKey::Cell(Value::Int(4))]
        );
        assert_eq!(got[0].2["city"], "CHICAGO");
        assert_eq!(got[1].2, DROPPED);
        assert_eq!(got[2].1, serde_json::Value::Null);
    }
}
