//! Column-wise imputation of missing cells.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PrepError;
use crate::table::{Table, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImputeStrategy {
    Mean,
    Median,
    Mode,
    Constant(String),
}

impl fmt::Display for ImputeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImputeStrategy::Mean => f.write_str("mean"),
            ImputeStrategy::Median => f.write_str("median"),
            ImputeStrategy::Mode => f.write_str("mode"),
            ImputeStrategy::Constant(c) => write!(f, "constant({c})"),
        }
    }
}

impl FromStr for ImputeStrategy {
    type Err = PrepError;

    fn from_str(s: &str) -> Result<Self, PrepError> {
        let s = s.trim();
        match s {
            "mean" => return Ok(ImputeStrategy::Mean),
            "median" => return Ok(ImputeStrategy::Median),
            "mode" => return Ok(ImputeStrategy::Mode),
            _ => {}
        }
        match s.strip_prefix("constant(").and_then(|r| r.strip_suffix(')')) {
            Some(c) if !c.is_empty() => Ok(ImputeStrategy::Constant(c.to_string())),
            _ => Err(PrepError::InvalidParameter(format!("unknown imputation strategy `{s}`"))),
        }
    }
}

/// Parses `"col:mean,other:constant(0)"`.
pub fn parse_strategies(spec: &str) -> Result<Vec<(String, ImputeStrategy)>, PrepError> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (col, strat) = part
            .split_once(':')
            .ok_or_else(|| PrepError::InvalidParameter(format!("expected column:strategy, got `{part}`")))?;
        out.push((col.trim().to_string(), strat.parse()?));
    }
    if out.is_empty() {
        return Err(PrepError::InvalidParameter("no imputation strategies given".into()));
    }
    Ok(out)
}

fn fill_value(t: &Table, column: &str, strategy: &ImputeStrategy) -> Result<String, PrepError> {
    let present: Vec<&Value> = t
        .column_values(column)
        .map_err(|_| PrepError::UnknownColumn(column.to_string()))?
        .filter(|v| !v.is_missing())
        .collect();
    if let ImputeStrategy::Constant(c) = strategy {
        return Ok(c.clone());
    }
    if present.is_empty() {
        return Err(PrepError::AllMissing(column.to_string()));
    }
    let numeric = || -> Result<Vec<f64>, PrepError> {
        present
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| PrepError::NotNumeric(column.to_string())))
            .collect()
    };
    let number = |x: f64| {
        if x.fract() == 0.0 && x.abs() < 9.0e15 {
            (x as i64).to_string()
        } else {
            Value::real(x).render().into_owned()
        }
    };
    Ok(match strategy {
        ImputeStrategy::Mean => {
            let xs = numeric()?;
            number(xs.iter().sum::<f64>() / xs.len() as f64)
        }
        ImputeStrategy::Median => {
            let mut xs = numeric()?;
            xs.sort_by(f64::total_cmp);
            number(super::dmv::median(&xs))
        }
        ImputeStrategy::Mode => {
            let mut counts: BTreeMap<&Value, usize> = BTreeMap::new();
            for v in &present {
                *counts.entry(v).or_default() += 1;
            }
            // highest count; ties go to the smallest value
            let best = counts.values().copied().max().unwrap_or(0);
            let v = counts.iter().find(|(_, c)| **c == best).map(|(v, _)| *v).unwrap();
            v.render().into_owned()
        }
        ImputeStrategy::Constant(_) => unreachable!(),
    })
}

/// Replaces missing cells of each targeted column. Non-missing cells are kept;
/// a column's kind may widen (an integer column imputed with a mean of 2.5
/// becomes real).
pub fn impute_missing(t: &Table, strategies: &[(String, ImputeStrategy)]) -> Result<Table, PrepError> {
    let mut fills: Vec<Option<String>> = vec![None; t.schema().len()];
    for (column, strategy) in strategies {
        let idx = t
            .schema()
            .index_of(column)
            .ok_or_else(|| PrepError::UnknownColumn(column.clone()))?;
        fills[idx] = Some(fill_value(t, column, strategy)?);
    }
    let header = t.schema().names().map(str::to_string).collect();
    let rows = t
        .rows()
        .iter()
        .map(|r| {
            let fields = r
                .cells
                .iter()
                .zip(&fills)
                .map(|(c, fill)| match (c, fill) {
                    (Value::Missing, Some(f)) => f.clone(),
                    _ => c.render().into_owned(),
                })
                .collect();
            (r.key.clone(), fields)
        })
        .collect();
    Ok(Table::from_keyed_strings(header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::ColumnKind;
    use proptest::prelude::*;

    fn strat(col: &str, s: ImputeStrategy) -> Vec<(String, ImputeStrategy)> {
        vec![(col.to_string(), s)]
    }

    #[test]
    fn mean_fills_the_gap() {
        let t = Table::from_strings(&["x"], &[vec!["1"], vec![""], vec!["3"]]).unwrap();
        let out = impute_missing(&t, &strat("x", ImputeStrategy::Mean)).unwrap();
        // (1 + 3) / 2
        let got: Vec<f64> = out.rows().iter().map(|r| r.cells[0].as_f64().unwrap()).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        assert_eq!(out.schema().columns()[0].kind, ColumnKind::Integer);
    }

    #[test]
    fn fractional_mean_widens_to_real() {
        let t = Table::from_strings(&["x"], &[vec!["1"], vec![""], vec!["2"]]).unwrap();
        let out = impute_missing(&t, &strat("x", ImputeStrategy::Mean)).unwrap();
        assert_eq!(out.schema().columns()[0].kind, ColumnKind::Real);
        assert_eq!(out.rows()[1].cells[0], Value::real(1.5));
        assert_eq!(out.rows()[0].cells[0], Value::Int(1));
    }

    #[test]
    fn mode_and_median_and_constant() {
        let t = Table::from_strings(&["c", "n"], &[vec!["a", "1"], vec!["a", ""], vec!["", "10"], vec!["b", "4"]])
            .unwrap();
        let out = impute_missing(
            &t,
            &[("c".into(), ImputeStrategy::Mode), ("n".into(), ImputeStrategy::Median)],
        )
        .unwrap();
        assert_eq!(out.rows()[2].cells[0], Value::text("a"));
        assert_eq!(out.rows()[1].cells[1], Value::Int(4));
        let out = impute_missing(&t, &strat("c", ImputeStrategy::Constant("zz".into()))).unwrap();
        assert_eq!(out.rows()[2].cells[0], Value::text("zz"));
    }

    #[test]
    fn column_without_missing_is_unchanged() {
        let t = Table::from_strings(&["x"], &[vec!["1"], vec!["5"]]).unwrap();
        assert_eq!(impute_missing(&t, &strat("x", ImputeStrategy::Median)).unwrap(), t);
    }

    #[test]
    fn errors() {
        let t = Table::from_strings(&["c", "e"], &[vec!["a", ""], vec!["b", ""]]).unwrap();
        assert!(matches!(impute_missing(&t, &strat("c", ImputeStrategy::Mean)), Err(PrepError::NotNumeric(_))));
        assert!(matches!(impute_missing(&t, &strat("e", ImputeStrategy::Mode)), Err(PrepError::AllMissing(_))));
        assert!(matches!(impute_missing(&t, &strat("z", ImputeStrategy::Mode)), Err(PrepError::UnknownColumn(_))));
    }

    #[test]
    fn strategy_strings() {
        let s = parse_strategies("age:mean, city:constant(Boston),n:mode").unwrap();
        assert_eq!(s[1], ("city".to_string(), ImputeStrategy::Constant("Boston".into())));
        for (_, st) in &s {
            assert_eq!(st.to_string().parse::<ImputeStrategy>().unwrap(), *st);
        }
        assert!(parse_strategies("age").is_err());
        assert!(parse_strategies("age:avg").is_err());
    }

    proptest! {
        #[test]
        fn preserves_present_cells(cells in prop::collection::vec(prop::option::of(-50i64..50), 1..40)) {
            prop_assume!(cells.iter().any(Option::is_some));
            let raw: Vec<String> = cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()).collect();
            let rows: Vec<Vec<&str>> = raw.iter().map(|s| vec![s.as_str()]).collect();
            let t = Table::from_strings(&["x"], &rows).unwrap();
            for s in [ImputeStrategy::Mean, ImputeStrategy::Median, ImputeStrategy::Mode] {
                let out = impute_missing(&t, &strat("x", s)).unwrap();
                for (a, b) in t.rows().iter().zip(out.rows()) {
                    prop_assert!(!b.cells[0].is_missing());
                    if !a.cells[0].is_missing() {
                        prop_assert_eq!(&a.cells[0], &b.cells[0]);
                    }
                    prop_assert_eq!(&a.key, &b.key);
                }
            }
        }
    }
}
