//! Disguised missing value detection.
//!
//! Two detectors run per column. A dictionary detector flags placeholder
//! tokens such as `N/A` or `unknown`. A numeric detector flags values that are
//! both frequent (a frequency spike) and far from the rest of the column in
//! robust units: `count(v)/n >= freq_threshold` and
//! `|v - median(others)| > k * MAD(others)`, where `others` excludes every
//! occurrence of `v`.
//!
//! When MAD(others) is zero the mean absolute deviation around the median is
//! used instead; when that is also zero, any `v` different from the constant
//! value is flagged. Values held by more than half of the column are never
//! flagged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PrepError;
use crate::table::{parse_finite, Record, Table, Value};

/// Placeholder tokens, compared after trimming and lowercasing.
pub const DEFAULT_TOKENS: &[&str] = &[
    "na", "n/a", "null", "none", "unknown", "missing", "?", "-", "",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmvConfig {
    pub freq_threshold: f64,
    pub k: f64,
    pub extra_tokens: Vec<String>,
}

impl Default for DmvConfig {
    fn default() -> Self {
        DmvConfig {
            freq_threshold: 0.05,
            k: 6.0,
            extra_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DmvReason {
    Dictionary,
    NumericOutlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedValue {
    pub value: String,
    pub count: usize,
    pub reason: DmvReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDmv {
    pub column: String,
    pub flagged: Vec<FlaggedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmvReport {
    pub columns: Vec<ColumnDmv>,
    pub freq_threshold: f64,
    pub k: f64,
}

impl DmvReport {
    pub fn flagged_cells(&self) -> usize {
        self.columns
            .iter()
            .flat_map(|c| &c.flagged)
            .map(|f| f.count)
            .sum()
    }
}

pub(crate) fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Is `v` frequent-and-deviant relative to `others`?
fn numeric_outlier(v: f64, others: &[f64], k: f64) -> bool {
    let others = sorted(others.to_vec());
    let med = median(&others);
    let devs: Vec<f64> = others.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&sorted(devs.clone()));
    let scale = if mad > 0.0 {
        mad
    } else {
        devs.iter().sum::<f64>() / devs.len() as f64
    };
    if scale > 0.0 {
        (v - med).abs() > k * scale
    } else {
        v != med
    }
}

/// Flags disguised missing values and replaces them with missing cells.
/// Column kinds of the cleaned table are re-inferred, so a numeric column
/// that only looked like text because of placeholders becomes numeric.
pub fn detect_dmv(t: &Table, cfg: &DmvConfig) -> Result<(Table, DmvReport), PrepError> {
    if !(cfg.freq_threshold > 0.0 && cfg.freq_threshold <= 1.0) {
        return Err(PrepError::InvalidParameter(format!(
            "frequency threshold {} is outside (0, 1]",
            cfg.freq_threshold
        )));
    }
    if !(cfg.k > 0.0) {
        return Err(PrepError::InvalidParameter(format!("k = {} must be positive", cfg.k)));
    }
    let tokens: Vec<String> = DEFAULT_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(cfg.extra_tokens.iter().map(|s| s.trim().to_lowercase()))
        .collect();
    let is_token = |v: &Value| tokens.iter().any(|t| *t == v.render().trim().to_lowercase());

    let ncols = t.schema().len();
    let mut flags = vec![vec![false; ncols]; t.len()];
    let mut columns = Vec::new();
    for (c, col) in t.schema().columns().iter().enumerate() {
        let mut flagged: BTreeMap<String, (usize, DmvReason)> = BTreeMap::new();
        let mut numeric: Vec<(usize, f64)> = Vec::new();
        let mut all_numeric = true;
        for (r, row) in t.rows().iter().enumerate() {
            let cell = &row.cells[c];
            if cell.is_missing() {
                continue;
            }
            if is_token(cell) {
                flags[r][c] = true;
                flagged
                    .entry(cell.render().into_owned())
                    .or_insert((0, DmvReason::Dictionary))
                    .0 += 1;
                continue;
            }
            match cell.as_f64().or_else(|| cell.as_str().and_then(parse_finite)) {
                Some(x) => numeric.push((r, x)),
                None => all_numeric = false,
            }
        }
        // a flagged sentinel can mask another one, so repeat until nothing new is flagged
        while all_numeric && numeric.len() > 1 {
            let n = numeric.len();
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for (_, x) in &numeric {
                *counts.entry(x.to_bits()).or_default() += 1;
            }
            let mut hits = Vec::new();
            for (&bits, &count) in &counts {
                // a majority value is the column's norm, not a disguise
                if (count as f64) / (n as f64) < cfg.freq_threshold || 2 * count > n {
                    continue;
                }
                let others: Vec<f64> = numeric
                    .iter()
                    .map(|(_, x)| *x)
                    .filter(|x| x.to_bits() != bits)
                    .collect();
                if numeric_outlier(f64::from_bits(bits), &others, cfg.k) {
                    hits.push((bits, count));
                }
            }
            if hits.is_empty() {
                break;
            }
            for (bits, count) in hits {
                let mut rendered = None;
                for (r, x) in &numeric {
                    if x.to_bits() == bits {
                        flags[*r][c] = true;
                        rendered.get_or_insert_with(|| t.rows()[*r].cells[c].render().into_owned());
                    }
                }
                flagged.insert(rendered.unwrap(), (count, DmvReason::NumericOutlier));
            }
            numeric.retain(|(r, _)| !flags[*r][c]);
        }
        columns.push(ColumnDmv {
            column: col.name.clone(),
            flagged: flagged
                .into_iter()
                .map(|(value, (count, reason))| FlaggedValue { value, count, reason })
                .collect(),
        });
    }

    let rows = t
        .rows()
        .iter()
        .zip(&flags)
        .map(|(row, f)| {
            Record::new(
                row.key.clone(),
                row.cells
                    .iter()
                    .zip(f)
                    .map(|(cell, &flag)| if flag { Value::Missing } else { cell.clone() })
                    .collect(),
            )
        })
        .collect();
    let cleaned = t.with_rows(rows).reinfer();
    Ok((
        cleaned,
        DmvReport {
            columns,
            freq_threshold: cfg.freq_threshold,
            k: cfg.k,
        },
    ))
}
