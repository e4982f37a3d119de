//! Abbreviation discovery and standardization.
//!
//! `s` abbreviates `t` when the normalized `s` (lowercase, alphanumerics only)
//! splits into consecutive nonempty pieces, each a prefix of a distinct token
//! of `t`, with the tokens used in increasing order and the first piece taken
//! from the first token. "CS" abbreviates "Computer Science" (`c`+`s`),
//! "compsci" does too (`comp`+`sci`), "SC" does not. The rule is a
//! reconstruction; the original tool's exact rule is not published.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PrepError;
use crate::table::{ColumnKind, Table, Value};

fn normalize(s: &str) -> Vec<char> {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn tokens(t: &str) -> Vec<Vec<char>> {
    t.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

/// Does `s` abbreviate `t`? An empty abbreviation abbreviates nothing.
pub fn derives_abbrev(s: &str, t: &str) -> bool {
    let s = normalize(s);
    let toks = tokens(t);
    let (n, m) = (s.len(), toks.len());
    if n == 0 || m == 0 {
        return false;
    }
    // ok[i][j]: s[i..] can be covered using tokens j.. only
    let mut ok = vec![vec![false; m + 1]; n + 1];
    for j in 0..=m {
        ok[n][j] = true;
    }
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            // skip token j, or spend it on a piece s[i..i+len]
            let mut v = ok[i][j + 1];
            let tok = &toks[j];
            let mut len = 0;
            while !v && len < tok.len() && i + len < n && s[i + len] == tok[len] {
                len += 1;
                v = ok[i + len][j + 1];
            }
            ok[i][j] = v;
        }
    }
    // anchored: the first piece comes from the first token
    let tok = &toks[0];
    (1..=tok.len().min(n)).any(|len| s[..len] == tok[..len] && ok[len][1])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevPair {
    pub abbreviation: String,
    pub full_form: String,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ambiguity {
    pub abbreviation: String,
    pub chosen: String,
    pub alternatives: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevMap {
    pub pairs: Vec<AbbrevPair>,
    pub ambiguities: Vec<Ambiguity>,
}

impl AbbrevMap {
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        AbbrevMap {
            pairs: pairs
                .iter()
                .map(|(a, f)| AbbrevPair {
                    abbreviation: a.to_string(),
                    full_form: f.to_string(),
                    support: 0,
                })
                .collect(),
            ambiguities: Vec::new(),
        }
    }

    /// Full form to abbreviation. A full form claimed by several
    /// abbreviations maps to the shortest, then lexicographically smallest.
    pub fn rewrites(&self) -> BTreeMap<&str, &str> {
        let mut out: BTreeMap<&str, &str> = BTreeMap::new();
        for p in &self.pairs {
            let a = p.abbreviation.as_str();
            out.entry(&p.full_form)
                .and_modify(|cur| {
                    if (a.len(), a) < (cur.len(), *cur) {
                        *cur = a;
                    }
                })
                .or_insert(a);
        }
        out
    }

    pub fn apply<'a>(&'a self, value: &'a str) -> &'a str {
        self.pairs
            .iter()
            .filter(|p| p.full_form == value)
            .map(|p| p.abbreviation.as_str())
            .min_by_key(|a| (a.len(), *a))
            .unwrap_or(value)
    }

    /// Reads a map from JSON, or from a CSV table with `abbreviation` and
    /// `full_form` columns.
    pub fn load(path: &std::path::Path) -> Result<Self, PrepError> {
        if path.extension().is_some_and(|e| e == "csv") {
            let t = crate::table::load_table(path, None)?;
            let a = t.schema().index_of("abbreviation").ok_or_else(|| PrepError::UnknownColumn("abbreviation".into()))?;
            let f = t.schema().index_of("full_form").ok_or_else(|| PrepError::UnknownColumn("full_form".into()))?;
            let pairs = t
                .rows()
                .iter()
                .filter(|r| !r.cells[a].is_missing() && !r.cells[f].is_missing())
                .map(|r| AbbrevPair {
                    abbreviation: r.cells[a].render().into_owned(),
                    full_form: r.cells[f].render().into_owned(),
                    support: 0,
                })
                .collect();
            return Ok(AbbrevMap { pairs, ambiguities: Vec::new() });
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PrepError::InvalidParameter(format!("{}: {e}", path.display())))
    }

    pub fn to_table(&self) -> Table {
        let header = vec!["abbreviation".to_string(), "full_form".to_string(), "support".to_string()];
        let rows = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    crate::table::RecordKey::Ordinal(i as u64),
                    vec![p.abbreviation.clone(), p.full_form.clone(), p.support.to_string()],
                )
            })
            .collect();
        Table::from_keyed_strings(header, rows).expect("fixed header")
    }
}

fn text_column<'a>(t: &'a Table, column: &str) -> Result<impl Iterator<Item = &'a str>, PrepError> {
    let col = t
        .schema()
        .column(column)
        .ok_or_else(|| PrepError::UnknownColumn(column.to_string()))?;
    if col.kind != ColumnKind::Text {
        return Err(PrepError::NotText(column.to_string()));
    }
    Ok(t.column_values(column)?.filter_map(Value::as_str))
}

/// Finds (abbreviation, full form) pairs with abbreviations drawn from
/// `col_a` and full forms from `col_b`. Support is the full form's frequency
/// in `col_b`. Each abbreviation keeps its most frequent full form (ties go to
/// the lexicographically smallest); the rest are listed as ambiguities.
pub fn build_abbrev_map(a: (&Table, &str), b: (&Table, &str)) -> Result<AbbrevMap, PrepError> {
    let abbrevs: BTreeSet<&str> = text_column(a.0, a.1)?.collect();
    let mut fulls: BTreeMap<&str, usize> = BTreeMap::new();
    for v in text_column(b.0, b.1)? {
        *fulls.entry(v).or_default() += 1;
    }
    let mut map = AbbrevMap::default();
    for abbr in abbrevs {
        let candidates: Vec<(&str, usize)> = fulls
            .iter()
            .filter(|(f, _)| **f != abbr && derives_abbrev(abbr, f))
            .map(|(f, c)| (*f, *c))
            .collect();
        // BTreeMap order makes the first maximum the lexicographically smallest
        let Some(&(best, support)) = candidates.iter().rev().max_by_key(|(_, c)| *c) else {
            continue;
        };
        map.pairs.push(AbbrevPair {
            abbreviation: abbr.to_string(),
            full_form: best.to_string(),
            support,
        });
        if candidates.len() > 1 {
            map.ambiguities.push(Ambiguity {
                abbreviation: abbr.to_string(),
                chosen: best.to_string(),
                alternatives: candidates.iter().map(|(f, _)| f.to_string()).filter(|f| f != best).collect(),
            });
        }
    }
    Ok(map)
}

/// Rewrites every cell of `column` equal to a full form into its abbreviation.
pub fn standardize(t: &Table, column: &str, map: &AbbrevMap) -> Result<Table, PrepError> {
    let idx = t
        .schema()
        .index_of(column)
        .ok_or_else(|| PrepError::UnknownColumn(column.to_string()))?;
    if t.schema().columns()[idx].kind != ColumnKind::Text {
        return Err(PrepError::NotText(column.to_string()));
    }
    let rewrites = map.rewrites();
    let rows = t
        .rows()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(s) = r.cells[idx].as_str() {
                if let Some(a) = rewrites.get(s) {
                    r.cells[idx] = Value::text(*a);
                }
            }
            r
        })
        .collect();
    Ok(t.with_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    // exhaustive oracle: try every split of s into pieces and every increasing
    // assignment of pieces to tokens
    pub(crate) fn oracle(s: &str, t: &str) -> bool {
        let s: Vec<char> = normalize(s);
        let toks = tokens(t);
        if s.is_empty() {
            return false;
        }
        let n = s.len();
        for mask in 0..(1u32 << (n - 1)) {
            let mut pieces = Vec::new();
            let mut start = 0;
            for i in 1..n {
                if mask & (1 << (i - 1)) != 0 {
                    pieces.push(&s[start..i]);
                    start = i;
                }
            }
            pieces.push(&s[start..]);
            if assign(&pieces, &toks, 0) {
                return true;
            }
        }
        false
    }

    fn assign(pieces: &[&[char]], toks: &[Vec<char>], from: usize) -> bool {
        let Some((first, rest)) = pieces.split_first() else {
            return true;
        };
        let last = if from == 0 { 1.min(toks.len()) } else { toks.len() };
        (from..last).any(|k| toks[k].starts_with(first) && assign(rest, toks, k + 1))
    }

    #[test]
    fn examples() {
        assert!(derives_abbrev("CS", "Computer Science"));
        assert!(derives_abbrev("CS", "Computer Sci."));
        assert!(derives_abbrev("x", "x"));
        assert!(!derives_abbrev("SC", "Computer Science"));
        assert!(derives_abbrev("compsci", "Computer Science"));
        assert!(derives_abbrev("DCS", "Department of Computer Science"));
        assert!(!derives_abbrev("sci", "Computer Science"));
        assert!(derives_abbrev("Dep.", "Department"));
        assert!(!derives_abbrev("Dept.", "Department"));
        assert!(!derives_abbrev("", "anything"));
        assert!(!derives_abbrev("ab", "a"));
    }

    #[test]
    fn agrees_with_oracle_on_small_alphabet() {
        let alphabet = ['a', 'b'];
        let mut strings = vec![String::new()];
        let mut all = Vec::new();
        for _ in 0..4 {
            strings = strings
                .iter()
                .flat_map(|s| alphabet.iter().map(move |c| format!("{s}{c}")))
                .collect();
            all.extend(strings.clone());
        }
        let targets = ["a b", "ab ba", "a a b", "ba ab a b", "bb", "ab"];
        for s in &all {
            for t in targets {
                assert_eq!(derives_abbrev(s, t), oracle(s, t), "{s} vs {t}");
            }
        }
    }

    #[test]
    fn map_keeps_most_frequent_then_smallest() {
        let a = Table::from_strings(&["v"], &[vec!["CS"]]).unwrap();
        let b = Table::from_strings(&["v"], &[vec!["Computer Science"], vec!["Computer Sci."]]).unwrap();
        let map = build_abbrev_map((&a, "v"), (&b, "v")).unwrap();
        assert_eq!(map.pairs.len(), 1);
        assert_eq!(map.pairs[0].full_form, "Computer Sci.");
        assert_eq!(map.ambiguities[0].alternatives, vec!["Computer Science".to_string()]);

        let b = Table::from_strings(&["v"], &[vec!["Computer Science"], vec!["Computer Sci."], vec!["Computer Science"]])
            .unwrap();
        let map = build_abbrev_map((&a, "v"), (&b, "v")).unwrap();
        assert_eq!(map.pairs[0].full_form, "Computer Science");
        assert_eq!(map.pairs[0].support, 2);
    }

    #[test]
    fn disjoint_columns_give_identity() {
        let a = Table::from_strings(&["v"], &[vec!["zz"]]).unwrap();
        let b = Table::from_strings(&["v"], &[vec!["Computer Science"]]).unwrap();
        let map = build_abbrev_map((&a, "v"), (&b, "v")).unwrap();
        assert!(map.pairs.is_empty());
        assert_eq!(standardize(&b, "v", &map).unwrap(), b);
    }

    #[test]
    fn standardizes_toward_abbreviation() {
        let t = Table::from_strings(&["d"], &[vec!["Computer Science"], vec!["CS"]]).unwrap();
        let map = AbbrevMap::from_pairs(&[("CS", "Computer Science")]);
        let out = standardize(&t, "d", &map).unwrap();
        let got: Vec<_> = out.rows().iter().map(|r| r.cells[0].clone()).collect();
        assert_eq!(got, vec![Value::text("CS"), Value::text("CS")]);
    }

    #[test]
    fn non_text_column_rejected() {
        let t = Table::from_strings(&["n"], &[vec!["1"]]).unwrap();
        assert!(matches!(build_abbrev_map((&t, "n"), (&t, "n")), Err(PrepError::NotText(_))));
        assert!(matches!(standardize(&t, "n", &AbbrevMap::default()), Err(PrepError::NotText(_))));
    }
}
