//! Duplicate detection with optional blocking, and golden-record consolidation.
//!
//! A pair's score is the mean, over the compared columns, of the Jaccard
//! similarity of the two cells' character 3-gram sets. Strings shorter than
//! three characters are their own single gram. Two missing cells score 1,
//! one missing cell scores 0. Pairs scoring at least the threshold are linked
//! and clusters are the connected components.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::abbrev::AbbrevMap;
use super::PrepError;
use crate::filter::{partition_by, Predicate, PredicateKind};
use crate::table::{ColumnKind, Record, RecordKey, Schema, Table, Value};

pub fn trigrams(s: &str) -> HashSet<&str> {
    let idx: Vec<usize> = s.char_indices().map(|(i, _)| i).chain([s.len()]).collect();
    let chars = idx.len() - 1;
    if chars < 3 {
        return HashSet::from([s]);
    }
    (0..=chars - 3).map(|i| &s[idx[i]..idx[i + 3]]).collect()
}

pub fn cell_similarity(a: &Value, b: &Value) -> f64 {
    match (a.is_missing(), b.is_missing()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let (x, y) = (a.render(), b.render());
            if x == y {
                return 1.0;
            }
            let (gx, gy) = (trigrams(&x), trigrams(&y));
            let inter = gx.intersection(&gy).count();
            inter as f64 / (gx.len() + gy.len() - inter) as f64
        }
    }
}

pub fn record_similarity(a: &Record, b: &Record, columns: &[usize]) -> f64 {
    if columns.is_empty() {
        return 0.0;
    }
    columns
        .iter()
        .map(|&c| cell_similarity(&a.cells[c], &b.cells[c]))
        .sum::<f64>()
        / columns.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub a: RecordKey,
    pub b: RecordKey,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuplicateClustering {
    /// Clusters of record keys, each sorted, ordered by smallest key.
    pub clusters: Vec<Vec<RecordKey>>,
    /// Linked pairs (score at or above the threshold).
    pub pair_scores: Vec<PairScore>,
    pub threshold: f64,
    pub blocking: Option<String>,
    pub compared_pairs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DedupConfig {
    pub threshold: f64,
    pub blocking: Option<Predicate>,
    /// Columns to compare; defaults to every text column.
    pub columns: Option<Vec<String>>,
    pub map: Option<AbbrevMap>,
}

impl DedupConfig {
    pub fn new(threshold: f64) -> Self {
        DedupConfig {
            threshold,
            ..Default::default()
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.0[x] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn compared_columns(schema: &Schema, columns: &Option<Vec<String>>) -> Result<Vec<usize>, PrepError> {
    match columns {
        Some(names) => names
            .iter()
            .map(|n| schema.index_of(n).ok_or_else(|| PrepError::UnknownColumn(n.clone())))
            .collect(),
        None => Ok(schema
            .columns()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Text)
            .map(|(i, _)| i)
            .collect()),
    }
}

/// Clusters duplicate records and keeps one golden record per cluster. The
/// deduplicated table is ordered by survivor key.
pub fn dedup(t: &Table, cfg: &DedupConfig) -> Result<(DuplicateClustering, Table), PrepError> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(PrepError::InvalidParameter(format!(
            "threshold {} is outside (0, 1]",
            cfg.threshold
        )));
    }
    let columns = compared_columns(t.schema(), &cfg.columns)?;
    let n = t.len();
    let blocks: Vec<Vec<usize>> = match &cfg.blocking {
        None => vec![(0..n).collect()],
        Some(p) => {
            if p.kind() != PredicateKind::Wildcard {
                return Err(PrepError::InvalidParameter(format!("blocking predicate `{p}` is not of the form attr = *")));
            }
            // partition_by on a key-indexed copy so block members map back to rows
            let indexed = t.with_rows(
                t.rows()
                    .iter()
                    .enumerate()
                    .map(|(i, r)| Record::new(RecordKey::Ordinal(i as u64), r.cells.clone()))
                    .collect(),
            );
            partition_by(&indexed, p)?
                .into_iter()
                .map(|(_, b)| {
                    b.rows()
                        .iter()
                        .map(|r| match r.key {
                            RecordKey::Ordinal(i) => i as usize,
                            _ => unreachable!(),
                        })
                        .collect()
                })
                .collect()
        }
    };

    let mut uf = UnionFind((0..n).collect());
    let mut linked = Vec::new();
    let mut compared = 0;
    let rows = t.rows();
    for block in &blocks {
        for (x, &i) in block.iter().enumerate() {
            for &j in &block[x + 1..] {
                compared += 1;
                let score = record_similarity(&rows[i], &rows[j], &columns);
                if score >= cfg.threshold {
                    uf.union(i, j);
                    linked.push((i, j, score));
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
    for c in &mut clusters {
        c.sort_by(|a, b| rows[*a].key.cmp(&rows[*b].key));
    }
    clusters.sort_by(|a, b| rows[a[0]].key.cmp(&rows[b[0]].key));

    let survivors: Vec<Record> = clusters
        .iter()
        .map(|c| {
            let members: Vec<Record> = c.iter().map(|&i| rows[i].clone()).collect();
            golden_record(&members, cfg.map.as_ref())
        })
        .collect();
    let deduped = rebuild(t.schema(), survivors)?;

    let mut pair_scores: Vec<PairScore> = linked
        .into_iter()
        .map(|(i, j, score)| {
            let (a, b) = if rows[i].key <= rows[j].key { (i, j) } else { (j, i) };
            PairScore {
                a: rows[a].key.clone(),
                b: rows[b].key.clone(),
                score,
            }
        })
        .collect();
    pair_scores.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    Ok((
        DuplicateClustering {
            clusters: clusters
                .iter()
                .map(|c| c.iter().map(|&i| rows[i].key.clone()).collect())
                .collect(),
            pair_scores,
            threshold: cfg.threshold,
            blocking: cfg.blocking.as_ref().map(|p| p.to_string()),
            compared_pairs: compared,
        },
        deduped,
    ))
}

/// Golden records may hold standardized text in a column; kinds are re-inferred.
fn rebuild(schema: &Schema, rows: Vec<Record>) -> Result<Table, PrepError> {
    let header = schema.names().map(str::to_string).collect();
    let raw = rows
        .into_iter()
        .map(|r| (r.key, r.cells.iter().map(|c| c.render().into_owned()).collect()))
        .collect();
    Ok(Table::from_keyed_strings(header, raw)?)
}

/// Consolidates a nonempty cluster. With a map, text cells are standardized
/// first. Per column the most frequent non-missing value wins; ties go to the
/// longest text, then to the smallest value. The key is the cluster's
/// smallest key.
pub fn golden_record(cluster: &[Record], map: Option<&AbbrevMap>) -> Record {
    assert!(!cluster.is_empty(), "golden record of an empty cluster");
    let width = cluster[0].cells.len();
    let key = cluster.iter().map(|r| &r.key).min().unwrap().clone();
    let cells = (0..width)
        .map(|c| {
            let mut counts: BTreeMap<Value, usize> = BTreeMap::new();
            for r in cluster {
                let v = match (&r.cells[c], map) {
                    (Value::Text(s), Some(m)) => Value::text(m.apply(s)),
                    (v, _) => v.clone(),
                };
                if !v.is_missing() {
                    *counts.entry(v).or_default() += 1;
                }
            }
            counts
                .into_iter()
                .min_by(|(va, ca), (vb, cb)| {
                    let len = |v: &Value| match v {
                        Value::Text(s) => s.chars().count(),
                        _ => 0,
                    };
                    cb.cmp(ca).then(len(vb).cmp(&len(va))).then(va.cmp(vb))
                })
                .map(|(v, _)| v)
                .unwrap_or(Value::Missing)
        })
        .collect();
    Record::new(key, cells)
}

/// Consolidates records sharing a value of `cluster_column` into golden
/// records, ordered by key.
pub fn golden_by_column(t: &Table, cluster_column: &str, map: Option<&AbbrevMap>) -> Result<Table, PrepError> {
    let idx = t
        .schema()
        .index_of(cluster_column)
        .ok_or_else(|| PrepError::UnknownColumn(cluster_column.to_string()))?;
    let mut groups: BTreeMap<&Value, Vec<Record>> = BTreeMap::new();
    let mut singles = Vec::new();
    for r in t.rows() {
        if r.cells[idx].is_missing() {
            singles.push(r.clone());
        } else {
            groups.entry(&r.cells[idx]).or_default().push(r.clone());
        }
    }
    let mut out: Vec<Record> = groups.values().map(|g| golden_record(g, map)).collect();
    out.extend(singles);
    out.sort_by(|a, b| a.key.cmp(&b.key));
    rebuild(t.schema(), out)
}
