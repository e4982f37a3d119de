//! Tabular data model shared by every module.
//!
//! A [`Table`] is a schema plus an ordered list of records, loaded from and
//! written to CSV in a single dialect: comma separator, double-quote quoting,
//! UTF-8, LF line endings. An empty field is a missing cell.
//!
//! Column kinds are inferred when no schema is declared: a column is
//! `integer` if every non-missing cell parses as an integer, else `real` if
//! every non-missing cell parses as a finite number, else `text`.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Upper bound on `rows * columns` for a single in-memory table.
pub const MAX_CELLS: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: missing header row")]
    NoHeader { path: PathBuf },
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("schema must have at least one column")]
    EmptySchema,
    #[error("{path}: header does not match declared schema (expected {expected:?}, found {found:?})")]
    HeaderMismatch {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}: row {row}, column `{column}`: `{value}` is not a valid {kind}")]
    KindViolation {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
        kind: ColumnKind,
    },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("table exceeds the {MAX_CELLS} cell limit")]
    TooLarge,
    #[error("incompatible schemas: {0}")]
    SchemaMismatch(String),
    #[error("{path}: malformed stream bundle: {message}")]
    BadBundle { path: PathBuf, message: String },
    #[error("{path}: listed file `{listed}` does not exist")]
    BundleFileMissing { path: PathBuf, listed: PathBuf },
}

pub type Result<T, E = TableError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Integer,
    Real,
    Text,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnKind::Integer | ColumnKind::Real)
    }

    /// Least kind able to hold values of both `self` and `other`.
    pub fn unify(self, other: ColumnKind) -> ColumnKind {
        use ColumnKind::*;
        match (self, other) {
            (Text, _) | (_, Text) => Text,
            (Real, _) | (_, Real) => Real,
            (Integer, Integer) => Integer,
        }
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Integer => "integer",
            ColumnKind::Real => "real",
            ColumnKind::Text => "text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Column>", into = "Vec<Column>")]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        if columns.is_empty() {
            return Err(TableError::EmptySchema);
        }
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|d| d.name == c.name) {
                return Err(TableError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(Schema { columns })
    }

    /// Convenience constructor from `(name, kind)` pairs.
    pub fn of(columns: &[(&str, ColumnKind)]) -> Result<Self> {
        Self::new(
            columns
                .iter()
                .map(|(n, k)| Column {
                    name: n.to_string(),
                    kind: *k,
                })
                .collect(),
        )
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Compact `name:kind,...` rendering.
    pub fn summary(&self) -> String {
        self.columns
            .iter()
            .map(|c| format!("{}:{}", c.name, c.kind))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl TryFrom<Vec<Column>> for Schema {
    type Error = TableError;
    fn try_from(columns: Vec<Column>) -> Result<Self> {
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<Column> {
    fn from(s: Schema) -> Self {
        s.columns
    }
}

/// A single cell. `Real` values are always finite.
#[derive(Debug, Clone)]
pub enum Value {
    Missing,
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    /// Builds a real cell, normalizing `-0.0` to `0.0`.
    pub fn real(v: f64) -> Value {
        debug_assert!(v.is_finite());
        Value::Real(if v == 0.0 { 0.0 } else { v })
    }

    /// Builds a text cell; the empty string is a missing cell.
    pub fn text(s: impl Into<String>) -> Value {
        let s = s.into();
        if s.is_empty() {
            Value::Missing
        } else {
            Value::Text(s)
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// CSV rendering of the cell. Reals always carry a decimal point or an
    /// exponent so that they re-infer as `real`.
    pub fn render(&self) -> Cow<'_, str> {
        match self {
            Value::Missing => Cow::Borrowed(""),
            Value::Int(i) => Cow::Owned(i.to_string()),
            Value::Real(r) => Cow::Owned(format!("{r:?}")),
            Value::Text(s) => Cow::Borrowed(s),
        }
    }

    /// Parses a raw field under a given kind. `None` means the field violates the kind.
    pub fn parse_as(raw: &str, kind: ColumnKind) -> Option<Value> {
        if raw.is_empty() {
            return Some(Value::Missing);
        }
        match kind {
            ColumnKind::Integer => raw.parse::<i64>().ok().map(Value::Int),
            ColumnKind::Real => parse_finite(raw).map(Value::real),
            ColumnKind::Text => Some(Value::Text(raw.to_string())),
        }
    }

    /// Converts the cell so it fits a (wider or equal) column kind.
    pub fn coerce(self, kind: ColumnKind) -> Value {
        match (self, kind) {
            (Value::Int(i), ColumnKind::Real) => Value::real(i as f64),
            (v @ (Value::Int(_) | Value::Real(_)), ColumnKind::Text) => {
                Value::Text(v.render().into_owned())
            }
            (v, _) => v,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Missing => serde_json::Value::Null,
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Real(r) => serde_json::Value::from(*r),
            Value::Text(s) => serde_json::Value::from(s.as_str()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Missing => 0,
            Value::Int(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
        }
    }
}

pub(crate) fn parse_finite(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order: missing < numbers < text. Integers and reals compare numerically.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.as_bytes().cmp(b.as_bytes()),
            (a, b) if a.rank() == 1 && b.rank() == 1 => {
                let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
                x.total_cmp(&y)
            }
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Value::Missing => {}
            // ints and integral reals compare equal, so they must hash equally
            Value::Int(i) => (*i as f64).to_bits().hash(state),
            Value::Real(r) => r.to_bits().hash(state),
            Value::Text(s) => s.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// Stable identity of a record: its row ordinal, or the value of a declared key column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKey {
    Ordinal(u64),
    Cell(Value),
}

impl RecordKey {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            RecordKey::Ordinal(i) => serde_json::Value::from(*i),
            RecordKey::Cell(v) => v.to_json(),
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordKey::Ordinal(i) => write!(f, "#{i}"),
            RecordKey::Cell(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for RecordKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: RecordKey,
    pub cells: Vec<Value>,
}

impl Record {
    pub fn new(key: RecordKey, cells: Vec<Value>) -> Self {
        Record { key, cells }
    }

    /// `{column: value}` object for the record under `schema`.
    pub fn to_json_object(&self, schema: &Schema) -> serde_json::Value {
        let map = schema
            .columns()
            .iter()
            .zip(&self.cells)
            .map(|(c, v)| (c.name.clone(), v.to_json()))
            .collect::<serde_json::Map<_, _>>();
        serde_json::Value::Object(map)
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    schema: Schema,
    rows: Vec<Record>,
    source_path: Option<PathBuf>,
}

/// Equality compares schema and rows; the source path is not part of a table's value.
impl PartialEq for Table {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.rows == other.rows
    }
}

impl Table {
    /// Builds a table, checking cell counts and kinds against the schema.
    pub fn new(schema: Schema, rows: Vec<Record>) -> Result<Self> {
        if rows.len().saturating_mul(schema.len()) > MAX_CELLS {
            return Err(TableError::TooLarge);
        }
        for (r, row) in rows.iter().enumerate() {
            if row.cells.len() != schema.len() {
                return Err(TableError::SchemaMismatch(format!(
                    "row {r} has {} cells, schema has {} columns",
                    row.cells.len(),
                    schema.len()
                )));
            }
            for (cell, col) in row.cells.iter().zip(schema.columns()) {
                let ok = match (cell, col.kind) {
                    (Value::Missing, _) => true,
                    (Value::Int(_), ColumnKind::Integer) => true,
                    (Value::Real(_), ColumnKind::Real) => true,
                    (Value::Text(s), ColumnKind::Text) => !s.is_empty(),
                    _ => false,
                };
                if !ok {
                    return Err(TableError::SchemaMismatch(format!(
                        "row {r}, column `{}`: {cell:?} is not a {}",
                        col.name, col.kind
                    )));
                }
            }
        }
        Ok(Table {
            schema,
            rows,
            source_path: None,
        })
    }

    /// Builds a table from raw string fields, inferring kinds. Keys are row ordinals.
    pub fn from_strings(header: &[&str], rows: &[Vec<&str>]) -> Result<Self> {
        let header = header.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let rows = rows
            .iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect::<Vec<Vec<String>>>();
        build_from_raw(Path::new("<memory>"), header, rows, None)
    }

    /// Builds a table from keyed raw fields, inferring kinds.
    pub fn from_keyed_strings(header: Vec<String>, rows: Vec<(RecordKey, Vec<String>)>) -> Result<Self> {
        let (keys, raw): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        if let Some((r, f)) = raw.iter().enumerate().find(|(_, f)| f.len() != header.len()) {
            return Err(TableError::SchemaMismatch(format!(
                "row {r} has {} fields, header has {}",
                f.len(),
                header.len()
            )));
        }
        let mut t = build_from_raw(Path::new("<memory>"), header, raw, None)?;
        for (row, key) in t.rows.iter_mut().zip(keys) {
            row.key = key;
        }
        Ok(t)
    }

    pub fn empty(schema: Schema) -> Self {
        Table {
            schema,
            rows: Vec::new(),
            source_path: None,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Record> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    pub fn column_values(&self, name: &str) -> Result<impl Iterator<Item = &Value>> {
        let idx = self
            .schema
            .index_of(name)
            .ok_or_else(|| TableError::UnknownColumn(name.to_string()))?;
        Ok(self.rows.iter().map(move |r| &r.cells[idx]))
    }

    /// Re-keys every record by the value of `column`.
    pub fn with_key_column(mut self, column: &str) -> Result<Self> {
        let idx = self
            .schema
            .index_of(column)
            .ok_or_else(|| TableError::UnknownColumn(column.to_string()))?;
        for r in &mut self.rows {
            r.key = RecordKey::Cell(r.cells[idx].clone());
        }
        Ok(self)
    }

    /// Same schema, a subset (or reordering) of rows. Keys are preserved.
    pub fn with_rows(&self, rows: Vec<Record>) -> Table {
        Table {
            schema: self.schema.clone(),
            rows,
            source_path: None,
        }
    }

    /// Renders every cell and re-runs kind inference. Keys are kept.
    pub fn reinfer(&self) -> Table {
        let header = self.schema.names().map(str::to_string).collect();
        let raw = self
            .rows
            .iter()
            .map(|r| r.cells.iter().map(|c| c.render().into_owned()).collect())
            .collect();
        let mut t = build_from_raw(Path::new("<memory>"), header, raw, None)
            .expect("re-inference of a valid table cannot fail");
        for (new, old) in t.rows.iter_mut().zip(&self.rows) {
            new.key = old.key.clone();
        }
        t
    }

    /// Concatenates tables with identical column names, widening kinds as needed.
    /// Keys are renumbered as ordinals of the result.
    pub fn concat(tables: &[Table]) -> Result<Table> {
        let first = tables
            .first()
            .ok_or_else(|| TableError::SchemaMismatch("nothing to concatenate".into()))?;
        let names: Vec<&str> = first.schema.names().collect();
        let mut kinds: Vec<ColumnKind> = first.schema.columns().iter().map(|c| c.kind).collect();
        for t in &tables[1..] {
            let other: Vec<&str> = t.schema.names().collect();
            if other != names {
                return Err(TableError::SchemaMismatch(format!(
                    "columns {other:?} differ from {names:?}"
                )));
            }
            for (k, c) in kinds.iter_mut().zip(t.schema.columns()) {
                *k = k.unify(c.kind);
            }
        }
        let schema = Schema::new(
            names
                .iter()
                .zip(&kinds)
                .map(|(n, k)| Column {
                    name: n.to_string(),
                    kind: *k,
                })
                .collect(),
        )?;
        let mut rows = Vec::new();
        for t in tables {
            for r in &t.rows {
                let cells = r
                    .cells
                    .iter()
                    .zip(&kinds)
                    .map(|(c, k)| c.clone().coerce(*k))
                    .collect();
                rows.push(Record::new(RecordKey::Ordinal(rows.len() as u64), cells));
            }
        }
        // parts with all-missing columns infer `integer`, so the widened kinds may be too wide
        Ok(Table::new(schema, rows)?.reinfer())
    }

    /// Canonical CSV bytes of the table.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.schema.names()).expect("write to Vec");
        for r in &self.rows {
            w.write_record(r.cells.iter().map(|c| c.render().into_owned()))
                .expect("write to Vec");
        }
        w.into_inner().expect("flush to Vec")
    }

    /// Hex SHA-256 of the canonical CSV bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_bytes()))
    }
}

fn infer_kind<'a>(cells: impl Iterator<Item = &'a str>) -> ColumnKind {
    let mut kind = ColumnKind::Integer;
    for c in cells.filter(|c| !c.is_empty()) {
        if kind == ColumnKind::Integer && c.parse::<i64>().is_err() {
            kind = ColumnKind::Real;
        }
        if kind == ColumnKind::Real && parse_finite(c).is_none() {
            return ColumnKind::Text;
        }
    }
    kind
}

fn build_from_raw(
    path: &Path,
    header: Vec<String>,
    raw: Vec<Vec<String>>,
    declared: Option<&Schema>,
) -> Result<Table> {
    if raw.len().saturating_mul(header.len()) > MAX_CELLS {
        return Err(TableError::TooLarge);
    }
    let schema = match declared {
        Some(s) => {
            let expected: Vec<String> = s.names().map(str::to_string).collect();
            if expected != header {
                return Err(TableError::HeaderMismatch {
                    path: path.to_path_buf(),
                    expected,
                    found: header,
                });
            }
            s.clone()
        }
        None => {
            let columns = header
                .iter()
                .enumerate()
                .map(|(i, name)| Column {
                    name: name.clone(),
                    kind: infer_kind(raw.iter().map(|r| r[i].as_str())),
                })
                .collect();
            Schema::new(columns)?
        }
    };
    let mut rows = Vec::with_capacity(raw.len());
    for (r, fields) in raw.into_iter().enumerate() {
        let mut cells = Vec::with_capacity(fields.len());
        for (field, col) in fields.iter().zip(schema.columns()) {
            let v = Value::parse_as(field, col.kind).ok_or_else(|| TableError::KindViolation {
                path: path.to_path_buf(),
                row: r,
                column: col.name.clone(),
                value: field.clone(),
                kind: col.kind,
            })?;
            cells.push(v);
        }
        rows.push(Record::new(RecordKey::Ordinal(r as u64), cells));
    }
    Ok(Table {
        schema,
        rows,
        source_path: None,
    })
}

/// Reads a table from any CSV source. `origin` is only used in error messages.
pub fn read_table(reader: impl Read, origin: &Path, declared: Option<&Schema>) -> Result<Table> {
    let csv_err = |e: csv::Error| TableError::Csv {
        path: origin.to_path_buf(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(h) => h.map_err(csv_err)?.iter().map(str::to_string).collect(),
        None => {
            return Err(TableError::NoHeader {
                path: origin.to_path_buf(),
            })
        }
    };
    let mut raw = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        raw.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
        if raw.len().saturating_mul(header.len()) > MAX_CELLS {
            return Err(TableError::TooLarge);
        }
    }
    build_from_raw(origin, header, raw, declared)
}

fn read_raw(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = fs::File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |e: csv::Error| TableError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(std::io::BufReader::new(file));
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(csv_err)?.iter().map(str::to_string).collect(),
        None => {
            return Err(TableError::NoHeader {
                path: path.to_path_buf(),
            })
        }
    };
    let mut raw = Vec::new();
    for rec in records {
        raw.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok((header, raw))
}

/// Loads several CSV files with identical headers as one table. Kinds are
/// inferred over the raw fields of all files together, so the result equals
/// loading the files' concatenated text.
pub fn load_concatenated(paths: &[PathBuf]) -> Result<Table> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for p in paths {
        let (h, raw) = read_raw(p)?;
        match &header {
            Some(prev) if *prev != h => {
                return Err(TableError::SchemaMismatch(format!(
                    "{}: columns {h:?} differ from {prev:?}",
                    p.display()
                )))
            }
            Some(_) => {}
            None => header = Some(h),
        }
        rows.extend(raw);
        if rows.len().saturating_mul(header.as_ref().map_or(0, Vec::len)) > MAX_CELLS {
            return Err(TableError::TooLarge);
        }
    }
    let header =
        header.ok_or_else(|| TableError::SchemaMismatch("nothing to concatenate".into()))?;
    build_from_raw(Path::new("<concatenated>"), header, rows, None)
}

/// Loads a CSV file with every column declared text, so each cell keeps its
/// exact field text.
pub fn load_text_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let (header, raw) = read_raw(path)?;
    let columns = header
        .iter()
        .map(|name| Column {
            name: name.clone(),
            kind: ColumnKind::Text,
        })
        .collect();
    let schema = Schema::new(columns)?;
    let mut t = build_from_raw(path, header, raw, Some(&schema))?;
    t.source_path = Some(path.to_path_buf());
    Ok(t)
}

/// Loads a CSV file, inferring kinds unless a schema is declared.
pub fn load_table(path: impl AsRef<Path>, declared: Option<&Schema>) -> Result<Table> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut t = read_table(std::io::BufReader::new(file), path, declared)?;
    t.source_path = Some(path.to_path_buf());
    Ok(t)
}

/// Writes the canonical CSV form of `table` to `path`, returning the path.
pub fn write_table(table: &Table, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let io = |source| TableError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&table.to_csv_bytes()).map_err(io)?;
    Ok(path.to_path_buf())
}

/// Files a module produced: `output` tables flow to successors, `metadata` never does.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamBundle {
    pub output: Vec<PathBuf>,
    pub metadata: Vec<PathBuf>,
}

impl StreamBundle {
    /// Resolves relative paths against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        for p in self.output.iter_mut().chain(self.metadata.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

/// Parses a module's output JSON. Relative paths are resolved against the
/// JSON file's directory; every output must load as a table.
pub fn parse_stream_bundle(output_json_path: impl AsRef<Path>) -> Result<StreamBundle> {
    let path = output_json_path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bundle: StreamBundle = serde_json::from_str(&text).map_err(|e| TableError::BadBundle {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bundle = bundle.resolved(base);
    for p in bundle.output.iter().chain(&bundle.metadata) {
        if !p.exists() {
            return Err(TableError::BundleFileMissing {
                path: path.to_path_buf(),
                listed: p.clone(),
            });
        }
    }
    for p in &bundle.output {
        load_table(p, None)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load_str(s: &str) -> Result<Table> {
        read_table(s.as_bytes(), Path::new("t.csv"), None)
    }

    #[test]
    fn infers_integer_and_text() {
        let t = load_str("a,b\n1,x\n2,y").unwrap();
        assert_eq!(
            t.schema(),
            &Schema::of(&[("a", ColumnKind::Integer), ("b", ColumnKind::Text)]).unwrap()
        );
        assert_eq!(t.len(), 2);
        assert_eq!(t.rows()[1].cells, vec![Value::Int(2), Value::text("y")]);
    }

    #[test]
    fn falls_back_to_real() {
        let t = load_str("a\n1\n2.5").unwrap();
        assert_eq!(t.schema().columns()[0].kind, ColumnKind::Real);
        assert_eq!(t.rows()[0].cells[0], Value::Real(1.0));
    }

    #[test]
    fn rejects_duplicate_header() {
        assert!(matches!(
            load_str("a,a\n1,2"),
            Err(TableError::DuplicateColumn(c)) if c == "a"
        ));
    }

    #[test]
    fn empty_cell_is_missing_in_every_kind() {
        let t = load_str("i,r,s\n1,1.5,x\n,,\n").unwrap();
        assert_eq!(t.rows()[1].cells, vec![Value::Missing; 3]);
        assert_eq!(t.schema().columns()[1].kind, ColumnKind::Real);
    }

    #[test]
    fn declared_schema_violation() {
        let s = Schema::of(&[("a", ColumnKind::Integer)]).unwrap();
        let err = read_table("a\n1\nx".as_bytes(), Path::new("t.csv"), Some(&s)).unwrap_err();
        assert!(matches!(err, TableError::KindViolation { row: 1, .. }));
    }

    #[test]
    fn missing_written_as_empty_field() {
        let t = load_str("a,b\n1,\n").unwrap();
        assert_eq!(t.to_csv_bytes(), b"a,b\n1,\n");
    }

    #[test]
    fn zero_rows_writes_header_only() {
        let t = Table::empty(Schema::of(&[("a", ColumnKind::Text)]).unwrap());
        assert_eq!(t.to_csv_bytes(), b"a\n");
    }

    #[test]
    fn missing_file_errors() {
        assert!(matches!(
            load_table("/nonexistent/x.csv", None),
            Err(TableError::Io { .. })
        ));
    }

    #[test]
    fn reals_keep_their_kind_across_round_trip() {
        let t = load_str("a\n1.0\n2.0").unwrap();
        assert_eq!(t.to_csv_bytes(), b"a\n1.0\n2.0\n");
        assert_eq!(load_str(std::str::from_utf8(&t.to_csv_bytes()).unwrap()).unwrap(), t);
    }

    #[test]
    fn quoting_round_trips() {
        let t = load_str("a,b\n\"x, y\",\"say \"\"hi\"\"\"\n").unwrap();
        assert_eq!(t.rows()[0].cells[0], Value::text("x, y"));
        let back = load_str(std::str::from_utf8(&t.to_csv_bytes()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn concat_widens_kinds() {
        let a = load_str("x\n1\n2").unwrap();
        let b = load_str("x\n2.5").unwrap();
        let c = Table::concat(&[a, b]).unwrap();
        assert_eq!(c.schema().columns()[0].kind, ColumnKind::Real);
        assert_eq!(c.rows()[0].cells[0], Value::Real(1.0));
        assert_eq!(c.to_csv_bytes(), b"x\n1.0\n2.0\n2.5\n");
    }

    #[test]
    fn stream_bundle_checks_listed_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("o.csv"), "a\n1\n").unwrap();
        fs::write(dir.path().join("log.txt"), "hi").unwrap();
        let ok = dir.path().join("ok.json");
        fs::write(&ok, r#"{"output":["o.csv"],"metadata":["log.txt"]}"#).unwrap();
        let b = parse_stream_bundle(&ok).unwrap();
        assert_eq!((b.output.len(), b.metadata.len()), (1, 1));

        let empty = dir.path().join("empty.json");
        fs::write(&empty, r#"{"output":[],"metadata":[]}"#).unwrap();
        assert_eq!(parse_stream_bundle(&empty).unwrap(), StreamBundle::default());

        let gone = dir.path().join("gone.json");
        fs::write(&gone, r#"{"output":["gone.csv"],"metadata":[]}"#).unwrap();
        assert!(matches!(
            parse_stream_bundle(&gone),
            Err(TableError::BundleFileMissing { .. })
        ));

        let bad = dir.path().join("bad.json");
        fs::write(&bad, r#"{"output":[]}"#).unwrap();
        assert!(matches!(parse_stream_bundle(&bad), Err(TableError::BadBundle { .. })));
    }

    fn cell_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            (-1000i64..1000).prop_map(|i| i.to_string()),
            (-1000.0f64..1000.0).prop_map(|f| format!("{f:?}")),
            "[a-zA-Z ,\"\n]{1,6}",
        ]
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            rows in prop::collection::vec(prop::collection::vec(cell_strategy(), 3), 0..20)
        ) {
            let header = ["a", "b", "c"];
            let refs: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
            let t = Table::from_strings(&header, &refs).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = write_table(&t, dir.path().join("t.csv")).unwrap();
            prop_assert_eq!(load_table(&p, None).unwrap(), t.clone());
            prop_assert_eq!(load_table(&p, Some(t.schema())).unwrap(), t);
        }

        #[test]
        fn adding_text_cell_never_narrows_kind(
            cells in prop::collection::vec(cell_strategy(), 0..10),
            extra in "[a-z]{1,4}",
        ) {
            let before = infer_kind(cells.iter().map(String::as_str));
            let with = infer_kind(cells.iter().map(String::as_str).chain([extra.as_str()]));
            prop_assert_eq!(with, ColumnKind::Text);
            prop_assert_eq!(before.unify(with), with);
        }
    }
}
