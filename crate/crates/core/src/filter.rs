//! Record predicates used by filters, breakpoints, tracking and blocking.
//!
//! ```text
//! pred    := clause ("AND" clause)*
//! clause  := ident op literal | ident "=" "*"
//! op      := "=" | "!=" | "<" | "<=" | ">" | ">=" | "CONTAINS"
//! literal := 'single-quoted text' | decimal number
//! ```
//!
//! Keywords are case-insensitive and whitespace is insignificant. A quote
//! inside a text literal is written twice (`'O''Hare'`). The wildcard form
//! `attr = *` must stand alone; it is used to partition tables into blocks.
//!
//! A clause over a missing cell is always false.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::table::{parse_finite, ColumnKind, Record, Schema, Table, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("syntax error at offset {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("wildcard `{0} = *` cannot be combined with other clauses")]
    WildcardCombined(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("column `{attr}` is {kind}; `{literal}` is not a number")]
    NonNumericLiteral {
        attr: String,
        kind: ColumnKind,
        literal: String,
    },
    #[error("expected a {expected} predicate")]
    WrongKind { expected: PredicateKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredicateKind {
    Boolean,
    Wildcard,
}

impl fmt::Display for PredicateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredicateKind::Boolean => "boolean",
            PredicateKind::Wildcard => "wildcard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::Contains => "CONTAINS",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            Op::Eq => ord == Ordering::Equal,
            Op::Ne => ord != Ordering::Equal,
            Op::Lt => ord == Ordering::Less,
            Op::Le => ord != Ordering::Greater,
            Op::Gt => ord == Ordering::Greater,
            Op::Ge => ord != Ordering::Less,
            Op::Contains => unreachable!("contains is not an ordering test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Text(String),
    /// A number keeps its source lexeme so printing is exact.
    Number(String),
    Star,
}

impl Literal {
    fn lexeme(&self) -> &str {
        match self {
            Literal::Text(s) | Literal::Number(s) => s,
            Literal::Star => "*",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub attr: String,
    pub op: Op,
    pub value: Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    clauses: Vec<Clause>,
    kind: PredicateKind,
}

impl Predicate {
    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn kind(&self) -> PredicateKind {
        self.kind
    }

    /// The partition attribute of a wildcard predicate.
    pub fn wildcard_attr(&self) -> Option<&str> {
        match self.kind {
            PredicateKind::Wildcard => Some(&self.clauses[0].attr),
            PredicateKind::Boolean => None,
        }
    }

    pub fn attrs(&self) -> impl Iterator<Item = &str> {
        self.clauses.iter().map(|c| c.attr.as_str())
    }

    /// Resolves attributes against `schema` for repeated evaluation.
    pub fn bind(&self, schema: &Schema) -> Result<BoundPredicate, FilterError> {
        if self.kind != PredicateKind::Boolean {
            return Err(FilterError::WrongKind {
                expected: PredicateKind::Boolean,
            });
        }
        let clauses = self
            .clauses
            .iter()
            .map(|c| bind_clause(c, schema))
            .collect::<Result<_, _>>()?;
        Ok(BoundPredicate { clauses })
    }

    /// Binds without consulting column kinds: a number literal compares
    /// numerically against any cell that parses as a number and byte-wise
    /// against the rest. The outcome for a record depends on that record
    /// alone, whatever the kinds inferred for the table around it.
    pub fn bind_untyped(&self, schema: &Schema) -> Result<BoundPredicate, FilterError> {
        if self.kind != PredicateKind::Boolean {
            return Err(FilterError::WrongKind {
                expected: PredicateKind::Boolean,
            });
        }
        let clauses = self
            .clauses
            .iter()
            .map(|c| {
                let column = schema
                    .index_of(&c.attr)
                    .ok_or_else(|| FilterError::UnknownAttribute(c.attr.clone()))?;
                let lexeme = c.value.lexeme().to_string();
                let test = match (&c.value, c.op) {
                    (_, Op::Contains) => Test::Contains(lexeme),
                    (Literal::Number(_), _) => match parse_finite(&lexeme) {
                        Some(x) => Test::Either(x, lexeme),
                        None => Test::Text(lexeme),
                    },
                    _ => Test::Text(lexeme),
                };
                Ok(BoundClause { column, op: c.op, test })
            })
            .collect::<Result<_, FilterError>>()?;
        Ok(BoundPredicate { clauses })
    }

    /// Rows of `table` satisfying the predicate, keys and order preserved.
    pub fn filter_table(&self, table: &Table) -> Result<Table, FilterError> {
        let bound = self.bind(table.schema())?;
        Ok(table.with_rows(
            table
                .rows()
                .iter()
                .filter(|r| bound.eval(r))
                .cloned()
                .collect(),
        ))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{} {} ", c.attr, c.op.symbol())?;
            match &c.value {
                Literal::Text(s) => write!(f, "'{}'", s.replace('\'', "''"))?,
                Literal::Number(n) => f.write_str(n)?,
                Literal::Star => f.write_str("*")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Predicate {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_predicate(s)
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_predicate(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Op(Op),
    Text(String),
    Number(String),
    Star,
    And,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, pos: usize, message: impl Into<String>) -> FilterError {
        FilterError::Syntax {
            pos,
            message: message.into(),
        }
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn tokens(mut self) -> Result<Vec<(usize, Token)>, FilterError> {
        let mut out = Vec::new();
        while let Some(c) = self.peek_char() {
            let start = self.pos;
            if c.is_whitespace() {
                self.pos += c.len_utf8();
                continue;
            }
            let tok = match c {
                '*' => {
                    self.pos += 1;
                    Token::Star
                }
                '=' => {
                    self.pos += 1;
                    Token::Op(Op::Eq)
                }
                '!' => {
                    if self.src[self.pos..].starts_with("!=") {
                        self.pos += 2;
                        Token::Op(Op::Ne)
                    } else {
                        return Err(self.err(start, "expected `!=`"));
                    }
                }
                '<' | '>' => {
                    self.pos += 1;
                    let eq = self.peek_char() == Some('=');
                    if eq {
                        self.pos += 1;
                    }
                    Token::Op(match (c, eq) {
                        ('<', false) => Op::Lt,
                        ('<', true) => Op::Le,
                        ('>', false) => Op::Gt,
                        _ => Op::Ge,
                    })
                }
                '\'' => self.text_literal()?,
                '-' | '0'..='9' => self.number()?,
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let end = self.src[self.pos..]
                        .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                        .map_or(self.src.len(), |i| self.pos + i);
                    let word = &self.src[self.pos..end];
                    self.pos = end;
                    if word.eq_ignore_ascii_case("and") {
                        Token::And
                    } else if word.eq_ignore_ascii_case("contains") {
                        Token::Op(Op::Contains)
                    } else {
                        Token::Ident(word.to_string())
                    }
                }
                other => return Err(self.err(start, format!("unexpected character `{other}`"))),
            };
            out.push((start, tok));
        }
        Ok(out)
    }

    fn text_literal(&mut self) -> Result<Token, FilterError> {
        let start = self.pos;
        self.pos += 1;
        let mut s = String::new();
        loop {
            match self.peek_char() {
                None => return Err(self.err(start, "unterminated text literal")),
                Some('\'') => {
                    self.pos += 1;
                    if self.peek_char() == Some('\'') {
                        s.push('\'');
                        self.pos += 1;
                    } else {
                        return Ok(Token::Text(s));
                    }
                }
                Some(c) => {
                    s.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
    }

    fn number(&mut self) -> Result<Token, FilterError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        if bytes[i] == b'-' {
            i += 1;
        }
        let int_start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == int_start {
            return Err(self.err(start, "expected digits"));
        }
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            let frac_start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i == frac_start {
                return Err(self.err(start, "expected digits after `.`"));
            }
        }
        self.pos = i;
        Ok(Token::Number(self.src[start..i].to_string()))
    }
}

/// Parses predicate source text.
pub fn parse_predicate(src: &str) -> Result<Predicate, FilterError> {
    let tokens = Lexer { src, pos: 0 }.tokens()?;
    let mut it = tokens.into_iter().peekable();
    let mut clauses = Vec::new();
    let mut star_at = None;
    loop {
        let (pos, tok) = it.next().ok_or(FilterError::Syntax {
            pos: src.len(),
            message: "expected an attribute name".into(),
        })?;
        let Token::Ident(attr) = tok else {
            return Err(FilterError::Syntax {
                pos,
                message: "expected an attribute name".into(),
            });
        };
        let (op_pos, op) = match it.next() {
            Some((p, Token::Op(op))) => (p, op),
            Some((p, _)) => {
                return Err(FilterError::Syntax {
                    pos: p,
                    message: "expected a comparison operator".into(),
                })
            }
            None => {
                return Err(FilterError::Syntax {
                    pos: src.len(),
                    message: "expected a comparison operator".into(),
                })
            }
        };
        let value = match it.next() {
            Some((_, Token::Text(s))) => Literal::Text(s),
            Some((_, Token::Number(n))) => Literal::Number(n),
            Some((p, Token::Star)) => {
                if op != Op::Eq {
                    return Err(FilterError::Syntax {
                        pos: op_pos,
                        message: "`*` is only allowed with `=`".into(),
                    });
                }
                star_at = Some((p, attr.clone()));
                Literal::Star
            }
            Some((p, _)) => {
                return Err(FilterError::Syntax {
                    pos: p,
                    message: "expected a literal".into(),
                })
            }
            None => {
                return Err(FilterError::Syntax {
                    pos: src.len(),
                    message: "expected a literal".into(),
                })
            }
        };
        clauses.push(Clause { attr, op, value });
        match it.next() {
            None => break,
            Some((_, Token::And)) => continue,
            Some((p, _)) => {
                return Err(FilterError::Syntax {
                    pos: p,
                    message: "expected `AND` or end of input".into(),
                })
            }
        }
    }
    let kind = match star_at {
        Some((_, attr)) if clauses.len() > 1 => return Err(FilterError::WildcardCombined(attr)),
        Some(_) => PredicateKind::Wildcard,
        None => PredicateKind::Boolean,
    };
    Ok(Predicate { clauses, kind })
}

#[derive(Debug, Clone)]
enum Test {
    /// Exact integer comparison, used when both sides are integral.
    Int(i64),
    Num(f64),
    Text(String),
    Contains(String),
    /// Numeric when the cell parses as a number, byte-wise otherwise.
    Either(f64, String),
}

#[derive(Debug, Clone)]
struct BoundClause {
    column: usize,
    op: Op,
    test: Test,
}

/// A predicate resolved against a schema.
#[derive(Debug, Clone)]
pub struct BoundPredicate {
    clauses: Vec<BoundClause>,
}

fn bind_clause(c: &Clause, schema: &Schema) -> Result<BoundClause, FilterError> {
    let column = schema
        .index_of(&c.attr)
        .ok_or_else(|| FilterError::UnknownAttribute(c.attr.clone()))?;
    let kind = schema.columns()[column].kind;
    let lexeme = c.value.lexeme();
    let test = if c.op == Op::Contains {
        Test::Contains(lexeme.to_string())
    } else if kind.is_numeric() {
        let non_numeric = || FilterError::NonNumericLiteral {
            attr: c.attr.clone(),
            kind,
            literal: lexeme.to_string(),
        };
        if !matches!(c.value, Literal::Number(_)) {
            return Err(non_numeric());
        }
        match lexeme.parse::<i64>() {
            Ok(i) if kind == ColumnKind::Integer => Test::Int(i),
            _ => Test::Num(parse_finite(lexeme).ok_or_else(non_numeric)?),
        }
    } else {
        Test::Text(lexeme.to_string())
    };
    Ok(BoundClause {
        column,
        op: c.op,
        test,
    })
}

impl BoundClause {
    fn eval(&self, r: &Record) -> bool {
        let cell = &r.cells[self.column];
        if cell.is_missing() {
            return false;
        }
        match (&self.test, cell) {
            (Test::Contains(needle), v) => v.render().contains(needle.as_str()),
            (Test::Int(lit), Value::Int(v)) => self.op.holds(v.cmp(lit)),
            (Test::Int(lit), v) => self.op.holds(v.as_f64().unwrap().total_cmp(&(*lit as f64))),
            (Test::Num(lit), v) => match v.as_f64() {
                Some(x) => self.op.holds(x.total_cmp(lit)),
                None => false,
            },
            (Test::Text(lit), v) => self.op.holds(v.render().as_bytes().cmp(lit.as_bytes())),
            (Test::Either(x, lit), v) => {
                let rendered = v.render();
                match v.as_f64().or_else(|| parse_finite(&rendered)) {
                    Some(y) => self.op.holds(y.total_cmp(x)),
                    None => self.op.holds(rendered.as_bytes().cmp(lit.as_bytes())),
                }
            }
        }
    }
}

impl BoundPredicate {
    pub fn eval(&self, r: &Record) -> bool {
        self.clauses.iter().all(|c| c.eval(r))
    }
}

/// Evaluates a boolean predicate against one record.
pub fn eval_predicate(p: &Predicate, r: &Record, s: &Schema) -> Result<bool, FilterError> {
    Ok(p.bind(s)?.eval(r))
}

/// Splits `t` into blocks sharing the wildcard attribute's value, in order of
/// first occurrence. Missing values form their own block.
pub fn partition_by(t: &Table, p: &Predicate) -> Result<Vec<(Value, Table)>, FilterError> {
    let attr = p.wildcard_attr().ok_or(FilterError::WrongKind {
        expected: PredicateKind::Wildcard,
    })?;
    let idx = t
        .schema()
        .index_of(attr)
        .ok_or_else(|| FilterError::UnknownAttribute(attr.to_string()))?;
    let mut groups: IndexMap<Value, Vec<Record>> = IndexMap::new();
    for r in t.rows() {
        groups.entry(r.cells[idx].clone()).or_default().push(r.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(v, rows)| (v, t.with_rows(rows)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{RecordKey, Value};
    use proptest::prelude::*;

    fn cities(values: &[&str]) -> Table {
        let rows: Vec<Vec<&str>> = values.iter().map(|v| vec![*v]).collect();
        Table::from_strings(&["City"], &rows).unwrap()
    }

    #[test]
    fn parses_single_clause() {
        let p = parse_predicate("City = 'Chicago'").unwrap();
        assert_eq!(p.kind(), PredicateKind::Boolean);
        assert_eq!(p.clauses().len(), 1);
        assert_eq!(p.clauses()[0].value, Literal::Text("Chicago".into()));
    }

    #[test]
    fn parses_wildcard() {
        let p = parse_predicate("City = *").unwrap();
        assert_eq!(p.kind(), PredicateKind::Wildcard);
        assert_eq!(p.wildcard_attr(), Some("City"));
    }

    #[test]
    fn rejects_combined_wildcard() {
        assert_eq!(
            parse_predicate("City = 'Chicago' AND City = *"),
            Err(FilterError::WildcardCombined("City".into()))
        );
    }

    #[test]
    fn rejects_star_with_other_ops() {
        assert!(matches!(
            parse_predicate("City != *"),
            Err(FilterError::Syntax { pos: 5, .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_position() {
        assert!(matches!(parse_predicate("Age >"), Err(FilterError::Syntax { pos: 5, .. })));
        assert!(matches!(parse_predicate("Age > 5 OR"), Err(FilterError::Syntax { pos: 8, .. })));
        assert!(matches!(parse_predicate("'x' = 1"), Err(FilterError::Syntax { pos: 0, .. })));
        assert!(matches!(parse_predicate("a = 'open"), Err(FilterError::Syntax { pos: 4, .. })));
        assert!(parse_predicate("").is_err());
    }

    #[test]
    fn keywords_and_whitespace() {
        let a = parse_predicate("a>=1 and b contains 'x'").unwrap();
        let b = parse_predicate("  a >= 1   AND   b CONTAINS 'x' ").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "a >= 1 AND b CONTAINS 'x'");
    }

    #[test]
    fn evaluates_documented_examples() {
        let t = cities(&["Chicago"]);
        let p = parse_predicate("City = 'Chicago'").unwrap();
        assert!(eval_predicate(&p, &t.rows()[0], t.schema()).unwrap());

        let ages = Table::from_strings(&["Age"], &[vec!["40"]]).unwrap();
        let p = parse_predicate("Age > 50").unwrap();
        assert!(!eval_predicate(&p, &ages.rows()[0], ages.schema()).unwrap());
    }

    #[test]
    fn missing_fails_every_clause() {
        let t = Table::from_strings(&["City", "n"], &[vec!["", "1"], vec!["Boston", "2"]]).unwrap();
        for src in ["City != 'Chicago'", "City = 'x'", "City CONTAINS ''", "City < 'zzz'"] {
            let p = parse_predicate(src).unwrap();
            assert!(!eval_predicate(&p, &t.rows()[0], t.schema()).unwrap(), "{src}");
        }
    }

    #[test]
    fn eval_errors() {
        let t = Table::from_strings(&["Age"], &[vec!["40"]]).unwrap();
        let unknown = parse_predicate("Name = 'x'").unwrap();
        assert_eq!(
            eval_predicate(&unknown, &t.rows()[0], t.schema()),
            Err(FilterError::UnknownAttribute("Name".into()))
        );
        let text_on_num = parse_predicate("Age > 'forty'").unwrap();
        assert!(matches!(
            eval_predicate(&text_on_num, &t.rows()[0], t.schema()),
            Err(FilterError::NonNumericLiteral { .. })
        ));
    }

    #[test]
    fn numeric_comparison_mixes_int_and_real() {
        let t = Table::from_strings(&["x"], &[vec!["2.5"], vec!["3"]]).unwrap();
        let p = parse_predicate("x > 2").unwrap().bind(t.schema()).unwrap();
        assert!(p.eval(&t.rows()[0]) && p.eval(&t.rows()[1]));
        let p = parse_predicate("x = 3").unwrap().bind(t.schema()).unwrap();
        assert!(!p.eval(&t.rows()[0]) && p.eval(&t.rows()[1]));
        let ints = Table::from_strings(&["n"], &[vec!["3"]]).unwrap();
        let p = parse_predicate("n < 3.5").unwrap().bind(ints.schema()).unwrap();
        assert!(p.eval(&ints.rows()[0]));
    }

    #[test]
    fn contains_uses_text_rendering() {
        let t = Table::from_strings(&["n", "s"], &[vec!["1234", "Chicago"]]).unwrap();
        let p = parse_predicate("n CONTAINS 23 AND s CONTAINS 'cag'").unwrap();
        assert!(eval_predicate(&p, &t.rows()[0], t.schema()).unwrap());
    }

    #[test]
    fn partitions_by_first_occurrence() {
        let t = cities(&["Chi", "NY", "Chi"]);
        let groups = partition_by(&t, &parse_predicate("City = *").unwrap()).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, Value::text("Chi"));
        let keys: Vec<_> = groups[0].1.rows().iter().map(|r| r.key.clone()).collect();
        assert_eq!(keys, vec![RecordKey::Ordinal(0), RecordKey::Ordinal(2)]);
        assert_eq!(groups[1].1.rows()[0].key, RecordKey::Ordinal(1));
    }

    #[test]
    fn partition_degenerate_cases() {
        let distinct = cities(&["a", "b", "c", "d"]);
        let w = parse_predicate("City = *").unwrap();
        assert_eq!(partition_by(&distinct, &w).unwrap().len(), 4);
        let empty = distinct.with_rows(vec![]);
        assert!(partition_by(&empty, &w).unwrap().is_empty());
        let missing = cities(&["a", "", "a", ""]);
        let g = partition_by(&missing, &w).unwrap();
        assert_eq!(g[1].0, Value::Missing);
        assert_eq!(g[1].1.len(), 2);
        assert!(matches!(
            partition_by(&distinct, &parse_predicate("Town = *").unwrap()),
            Err(FilterError::UnknownAttribute(_))
        ));
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z_][a-z0-9_]{0,5}".prop_filter("keyword", |s| s != "and" && s != "contains")
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            Just(Op::Eq),
            Just(Op::Ne),
            Just(Op::Lt),
            Just(Op::Le),
            Just(Op::Gt),
            Just(Op::Ge),
            Just(Op::Contains)
        ]
    }

    fn literal() -> impl Strategy<Value = Literal> {
        prop_oneof![
            "[a-zA-Z' ]{0,6}".prop_map(Literal::Text),
            (-500i64..500, prop::option::of(0u32..100)).prop_map(|(i, f)| Literal::Number(
                match f {
                    Some(f) => format!("{i}.{f}"),
                    None => i.to_string(),
                }
            )),
        ]
    }

    fn predicate() -> impl Strategy<Value = Predicate> {
        prop_oneof![
            prop::collection::vec((ident(), op(), literal()), 1..4).prop_map(|cs| Predicate {
                clauses: cs
                    .into_iter()
                    .map(|(attr, op, value)| Clause { attr, op, value })
                    .collect(),
                kind: PredicateKind::Boolean,
            }),
            ident().prop_map(|attr| Predicate {
                clauses: vec![Clause {
                    attr,
                    op: Op::Eq,
                    value: Literal::Star
                }],
                kind: PredicateKind::Wildcard,
            }),
        ]
    }

    /// Straightforward interpreter over raw strings, independent of binding.
    fn brute_force(clauses: &[(usize, Op, String)], row: &[String], numeric: &[bool]) -> bool {
        clauses.iter().all(|(col, op, lit)| {
            let cell = &row[*col];
            if cell.is_empty() {
                return false;
            }
            if *op == Op::Contains {
                return cell.contains(lit.as_str());
            }
            let ord = if numeric[*col] {
                cell.parse::<f64>().unwrap().partial_cmp(&lit.parse::<f64>().unwrap()).unwrap()
            } else {
                cell.as_str().cmp(lit.as_str())
            };
            match op {
                Op::Eq => ord.is_eq(),
                Op::Ne => ord.is_ne(),
                Op::Lt => ord.is_lt(),
                Op::Le => ord.is_le(),
                Op::Gt => ord.is_gt(),
                Op::Ge => ord.is_ge(),
                Op::Contains => unreachable!(),
            }
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(p in predicate()) {
            prop_assert_eq!(parse_predicate(&p.to_string()).unwrap(), p);
        }

        #[test]
        fn eval_agrees_with_brute_force(
            rows in prop::collection::vec(
                (prop::option::of(-20i64..20), prop::option::of("[a-c]{1,3}")), 1..30),
            clauses in prop::collection::vec((0usize..2, op(), -20i64..20, "[a-c]{1,3}"), 1..3),
        ) {
            let raw: Vec<Vec<String>> = rows.iter().map(|(n, s)| vec![
                n.map(|n| n.to_string()).unwrap_or_default(),
                s.clone().unwrap_or_default(),
            ]).collect();
            // force the kinds regardless of which cells happen to be missing
            let schema = Schema::of(&[("n", ColumnKind::Integer), ("s", ColumnKind::Text)]).unwrap();
            let records: Vec<Record> = raw.iter().enumerate().map(|(i, r)| Record::new(
                RecordKey::Ordinal(i as u64),
                vec![Value::parse_as(&r[0], ColumnKind::Integer).unwrap(), Value::text(r[1].clone())],
            )).collect();
            let table = Table::new(schema, records).unwrap();
            let spec: Vec<(usize, Op, String)> = clauses.iter().map(|(col, op, n, s)| {
                (*col, *op, if *col == 0 { n.to_string() } else { s.clone() })
            }).collect();
            let src = spec.iter().map(|(col, op, lit)| {
                if *col == 0 { format!("n {} {lit}", op.symbol()) }
                else { format!("s {} '{lit}'", op.symbol()) }
            }).collect::<Vec<_>>().join(" AND ");
            let bound = parse_predicate(&src).unwrap().bind(table.schema()).unwrap();
            for (r, raw_row) in table.rows().iter().zip(&raw) {
                prop_assert_eq!(bound.eval(r), brute_force(&spec, raw_row, &[true, false]));
            }
        }

        #[test]
        fn partitions_are_disjoint_and_exhaustive(values in prop::collection::vec("[a-c]?", 0..40)) {
            let refs: Vec<&str> = values.iter().map(String::as_str).collect();
            let t = cities(&refs);
            let groups = partition_by(&t, &parse_predicate("City = *").unwrap()).unwrap();
            let mut keys: Vec<RecordKey> = groups.iter()
                .flat_map(|(_, g)| g.rows().iter().map(|r| r.key.clone())).collect();
            for (v, g) in &groups {
                prop_assert!(g.rows().iter().all(|r| &r.cells[0] == v));
                let ks: Vec<_> = g.rows().iter().map(|r| r.key.clone()).collect();
                let mut sorted = ks.clone();
                sorted.sort();
                prop_assert_eq!(ks, sorted);
            }
            keys.sort();
            let all: Vec<RecordKey> = t.rows().iter().map(|r| r.key.clone()).collect();
            prop_assert_eq!(keys, all);
        }
    }
}
