//! Data discovery over a directory of CSV tables.
//!
//! Every column is profiled into a value signature: the exact set of distinct
//! values, or a MinHash signature for very high-cardinality columns. Column
//! pairs of the same kind class (numeric or text) are connected in an
//! enterprise knowledge graph (EKG) by SIMILAR, INCLUSION and PKFK edges.
//! Numeric values are compared on a canonical rendering, so `1` and `1.0`
//! are the same value.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{load_table, Table, Value};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("{0}: no loadable CSV tables")]
    EmptyLake(PathBuf),
    #[error("unknown column {table}.{column}")]
    UnknownColumn { table: String, column: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed knowledge graph: {message}")]
    BadGraph { path: PathBuf, message: String },
}

pub type Result<T, E = DiscoveryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub similarity_threshold: f64,
    pub containment_threshold: f64,
    pub uniqueness_threshold: f64,
    pub exact_limit: usize,
    pub num_hashes: usize,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            similarity_threshold: 0.5,
            containment_threshold: 0.95,
            uniqueness_threshold: 0.99,
            exact_limit: 100_000,
            num_hashes: 128,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindClass {
    Numeric,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Signature {
    Exact { values: BTreeSet<String> },
    Minhash { hashes: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub table: String,
    pub column: String,
    pub kind: KindClass,
    pub rows: usize,
    pub distinct: usize,
    pub uniqueness: f64,
    pub signature: Signature,
}

/// Canonical text of a cell for set comparisons.
pub fn canonical(v: &Value) -> Option<String> {
    match v {
        Value::Missing => None,
        Value::Int(i) => Some(i.to_string()),
        Value::Real(r) if r.fract() == 0.0 && r.abs() < 9.0e15 => Some((*r as i64).to_string()),
        Value::Real(r) => Some(format!("{r:?}")),
        Value::Text(s) => Some(s.clone()),
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

pub fn minhash<'a>(values: impl IntoIterator<Item = &'a str>, seeds: &[u64]) -> Vec<u64> {
    let mut sig = vec![u64::MAX; seeds.len()];
    for v in values {
        let base = fnv1a(v);
        for (s, seed) in sig.iter_mut().zip(seeds) {
            *s = (*s).min(mix(base ^ seed));
        }
    }
    sig
}

pub fn minhash_jaccard(a: &[u64], b: &[u64]) -> f64 {
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len().max(1) as f64
}

pub fn profile_table(name: &str, t: &Table, cfg: &DiscoveryConfig, seeds: &[u64]) -> Vec<ColumnProfile> {
    t.schema()
        .columns()
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let values: BTreeSet<String> = t.rows().iter().filter_map(|r| canonical(&r.cells[i])).collect();
            let distinct = values.len();
            let rows = t.len();
            let signature = if distinct <= cfg.exact_limit {
                Signature::Exact { values }
            } else {
                Signature::Minhash {
                    hashes: minhash(values.iter().map(String::as_str), seeds),
                }
            };
            ColumnProfile {
                table: name.to_string(),
                column: col.name.clone(),
                kind: if col.kind.is_numeric() { KindClass::Numeric } else { KindClass::Text },
                rows,
                distinct,
                uniqueness: if rows == 0 { 0.0 } else { distinct as f64 / rows as f64 },
                signature,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeProfile {
    pub profiles: Vec<ColumnProfile>,
    pub skipped: Vec<SkippedFile>,
}

/// Profiles every `*.csv` file directly inside `dir`. A table is named after
/// its file stem. Unloadable files are reported and skipped.
pub fn profile_lake(dir: &Path, cfg: &DiscoveryConfig) -> Result<LakeProfile> {
    let io = |source| DiscoveryError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let seeds = hash_seeds(cfg.seed, cfg.num_hashes);
    let mut profiles = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match load_table(&f, None) {
            Ok(t) => {
                let name = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                profiles.extend(profile_table(&name, &t, cfg, &seeds));
            }
            Err(e) => skipped.push(SkippedFile {
                path: f,
                error: e.to_string(),
            }),
        }
    }
    if profiles.is_empty() {
        return Err(DiscoveryError::EmptyLake(dir.to_path_buf()));
    }
    Ok(LakeProfile { profiles, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    Pkfk,
    Inclusion,
    Similar,
}

/// An EKG edge between profile indices. SIMILAR is symmetric; INCLUSION goes
/// from the contained column to the containing one; PKFK goes from the
/// foreign key to the primary key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ekg {
    pub nodes: Vec<ColumnProfile>,
    pub edges: Vec<Edge>,
    pub config: DiscoveryConfig,
    pub seeds: Vec<u64>,
}

/// (Jaccard, containment(a in b), containment(b in a)).
fn pair_scores(a: &ColumnProfile, b: &ColumnProfile, seeds: &[u64]) -> Option<(f64, f64, f64)> {
    if a.distinct == 0 || b.distinct == 0 {
        return None;
    }
    match (&a.signature, &b.signature) {
        (Signature::Exact { values: x }, Signature::Exact { values: y }) => {
            let inter = x.intersection(y).count() as f64;
            let union = (x.len() + y.len()) as f64 - inter;
            Some((inter / union, inter / x.len() as f64, inter / y.len() as f64))
        }
        _ => {
            let sig = |p: &ColumnProfile| match &p.signature {
                Signature::Exact { values } => minhash(values.iter().map(String::as_str), seeds),
                Signature::Minhash { hashes } => hashes.clone(),
            };
            let j = minhash_jaccard(&sig(a), &sig(b));
            // |A ∩ B| = J (|A| + |B|) / (1 + J)
            let inter = j * (a.distinct + b.distinct) as f64 / (1.0 + j);
            let c = |n: usize| (inter / n as f64).min(1.0);
            Some((j, c(a.distinct), c(b.distinct)))
        }
    }
}

pub fn build_ekg(profiles: Vec<ColumnProfile>, cfg: &DiscoveryConfig) -> Ekg {
    let seeds = hash_seeds(cfg.seed, cfg.num_hashes);
    let mut edges = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let (a, b) = (&profiles[i], &profiles[j]);
            if a.kind != b.kind {
                continue;
            }
            let Some((jac, a_in_b, b_in_a)) = pair_scores(a, b, &seeds) else {
                continue;
            };
            if jac >= cfg.similarity_threshold {
                edges.push(Edge { kind: EdgeKind::Similar, from: i, to: j, score: jac });
            }
            for (fk, pk, c) in [(i, j, a_in_b), (j, i, b_in_a)] {
                if c >= cfg.containment_threshold {
                    edges.push(Edge { kind: EdgeKind::Inclusion, from: fk, to: pk, score: c });
                    if profiles[pk].uniqueness >= cfg.uniqueness_threshold {
                        edges.push(Edge { kind: EdgeKind::Pkfk, from: fk, to: pk, score: c });
                    }
                }
            }
        }
    }
    Ekg {
        nodes: profiles,
        edges,
        config: cfg.clone(),
        seeds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinCandidate {
    pub table: String,
    pub column: String,
    pub edge: EdgeKind,
    pub score: f64,
    /// For PKFK and INCLUSION: whether the queried column is the contained (FK) side.
    pub query_is_contained: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Table,
    Column,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordHit {
    pub table: String,
    pub column: Option<String>,
    pub kind: MatchKind,
}

impl Ekg {
    pub fn lookup(&self, table: &str, column: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|p| p.table == table && p.column == column)
            .ok_or_else(|| DiscoveryError::UnknownColumn {
                table: table.into(),
                column: column.into(),
            })
    }

    /// Neighbors of a column: PKFK first, then INCLUSION by containment,
    /// then SIMILAR by Jaccard; ties by (table, column).
    pub fn find_joinable(&self, table: &str, column: &str) -> Result<Vec<JoinCandidate>> {
        let me = self.lookup(table, column)?;
        let mut out: Vec<JoinCandidate> = self
            .edges
            .iter()
            .filter(|e| e.from == me || e.to == me)
            .map(|e| {
                let other = if e.from == me { e.to } else { e.from };
                let p = &self.nodes[other];
                JoinCandidate {
                    table: p.table.clone(),
                    column: p.column.clone(),
                    edge: e.kind,
                    score: e.score,
                    query_is_contained: (e.kind != EdgeKind::Similar).then_some(e.from == me),
                }
            })
            .collect();
        out.sort_by(|a, b| {
            a.edge
                .cmp(&b.edge)
                .then(b.score.total_cmp(&a.score))
                .then((&a.table, &a.column).cmp(&(&b.table, &b.column)))
        });
        Ok(out)
    }

    /// Case-insensitive substring search over table names, column names and
    /// (exact profiles only) values.
    pub fn keyword_search(&self, q: &str) -> Vec<KeywordHit> {
        let q = q.to_lowercase();
        if q.is_empty() {
            return Vec::new();
        }
        let mut hits = BTreeSet::new();
        for p in &self.nodes {
            if p.table.to_lowercase().contains(&q) {
                hits.insert((MatchKind::Table, p.table.clone(), None));
            }
            if p.column.to_lowercase().contains(&q) {
                hits.insert((MatchKind::Column, p.table.clone(), Some(p.column.clone())));
            }
            if let Signature::Exact { values } = &p.signature {
                if values.iter().any(|v| v.to_lowercase().contains(&q)) {
                    hits.insert((MatchKind::Value, p.table.clone(), Some(p.column.clone())));
                }
            }
        }
        hits.into_iter()
            .map(|(kind, table, column)| KeywordHit { table, column, kind })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("graph serializes");
        fs::write(path, bytes).map_err(|source| DiscoveryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Ekg> {
        let text = fs::read_to_string(path).map_err(|source| DiscoveryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DiscoveryError::BadGraph {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
