//! Ordered, typed, named-column tables and the `dataframe.tv` text format.
//!
//! ```text
//! tv-dataframe 1
//! keys<TAB>doc_id
//! columns<TAB>doc_id:int<TAB>text:string
//! rows<TAB>2
//! 0<TAB>first doc
//! 1<TAB>\E
//! ```
//!
//! Cells are tab-separated. Backslash escapes `\\`, `\t`, `\n` and `\r`;
//! `\E` marks an EMPTY cell and cannot be produced by escaping a real
//! value, so the empty string (an empty field) stays distinct from EMPTY.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::{Error, Result};

const MAGIC: &str = "tv-dataframe 1";
const EMPTY_SENTINEL: &str = "\\E";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    String,
    Int,
    Float,
    Bool,
    Artifact,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::String => "string",
            Dtype::Int => "int",
            Dtype::Float => "float",
            Dtype::Bool => "bool",
            Dtype::Artifact => "artifact",
        }
    }

    pub fn is_orderable(self) -> bool {
        matches!(self, Dtype::Int | Dtype::Float | Dtype::String)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "string" => Dtype::String,
            "int" => Dtype::Int,
            "float" => Dtype::Float,
            "bool" => Dtype::Bool,
            "artifact" => Dtype::Artifact,
            other => return Err(Error::InvalidArgument(format!("unknown dtype {other:?}"))),
        })
    }
}

/// One table cell: a typed value or the EMPTY (not yet computed) marker.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Empty,
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    /// Path relative to the owning instance directory.
    Artifact(String),
}

impl Cell {
    pub fn is_empty(&self) -> bool {
        matches!(self, Cell::Empty)
    }

    pub fn dtype(&self) -> Option<Dtype> {
        Some(match self {
            Cell::Empty => return None,
            Cell::Str(_) => Dtype::String,
            Cell::Int(_) => Dtype::Int,
            Cell::Float(_) => Dtype::Float,
            Cell::Bool(_) => Dtype::Bool,
            Cell::Artifact(_) => Dtype::Artifact,
        })
    }

    pub fn to_json(&self) -> Json {
        match self {
            Cell::Empty => Json::Null,
            Cell::Str(s) | Cell::Artifact(s) => Json::String(s.clone()),
            Cell::Int(i) => Json::from(*i),
            Cell::Float(x) => {
                serde_json::Number::from_f64(*x).map(Json::Number).unwrap_or_else(|| Json::String(format!("{x:?}")))
            }
            Cell::Bool(b) => Json::Bool(*b),
        }
    }

    /// Convert an executor-returned JSON value into a cell of `dtype`.
    /// Artifact columns are handled by the engine, not here.
    pub fn from_json(dtype: Dtype, v: &Json) -> std::result::Result<Cell, String> {
        match (dtype, v) {
            (_, Json::Null) => Err("null is not a value".into()),
            (Dtype::String, Json::String(s)) => Ok(Cell::Str(s.clone())),
            (Dtype::Int, Json::Number(n)) => n.as_i64().map(Cell::Int).ok_or_else(|| format!("{n} is not an integer")),
            (Dtype::Float, Json::Number(n)) => n.as_f64().map(Cell::Float).ok_or_else(|| format!("{n} is not a float")),
            (Dtype::Float, Json::String(s)) if matches!(s.as_str(), "NaN" | "inf" | "-inf") => {
                Ok(Cell::Float(s.parse().expect("literal float")))
            }
            (Dtype::Bool, Json::Bool(b)) => Ok(Cell::Bool(*b)),
            (Dtype::Artifact, Json::String(s)) => Ok(Cell::Artifact(s.clone())),
            (d, v) => Err(format!("{v} is not a {d}")),
        }
    }

    /// Plain-text rendering used for prompt substitution.
    pub fn render(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Str(s) | Cell::Artifact(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format!("{x:?}"),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn encode(&self, out: &mut String) {
        match self {
            Cell::Empty => out.push_str(EMPTY_SENTINEL),
            Cell::Str(s) | Cell::Artifact(s) => escape_into(s, out),
            Cell::Int(i) => out.push_str(&i.to_string()),
            Cell::Float(x) => out.push_str(&format!("{x:?}")),
            Cell::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        }
    }

    fn decode(dtype: Dtype, field: &str) -> std::result::Result<Cell, String> {
        if field == EMPTY_SENTINEL {
            return Ok(Cell::Empty);
        }
        Ok(match dtype {
            Dtype::String => Cell::Str(unescape(field)?),
            Dtype::Artifact => Cell::Artifact(unescape(field)?),
            Dtype::Int => Cell::Int(field.parse().map_err(|e| format!("{field:?}: {e}"))?),
            Dtype::Float => Cell::Float(field.parse().map_err(|e| format!("{field:?}: {e}"))?),
            Dtype::Bool => match field {
                "true" => Cell::Bool(true),
                "false" => Cell::Bool(false),
                _ => return Err(format!("{field:?} is not a bool")),
            },
        })
    }
}

fn escape_into(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub dtype: Dtype,
    pub cells: Vec<Cell>,
}

/// In-memory table. Key columns (the generator's output) identify rows and
/// are stored as ordinary columns listed in `key_columns`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ColumnTable {
    key_columns: Vec<String>,
    columns: Vec<Column>,
    nrows: usize,
}

impl ColumnTable {
    pub fn new(keys: &[(String, Dtype)]) -> Self {
        let mut t = Self::default();
        for (name, dtype) in keys {
            t.key_columns.push(name.clone());
            t.columns.push(Column { name: name.clone(), dtype: *dtype, cells: Vec::new() });
        }
        t
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn key_columns(&self) -> &[String] {
        &self.key_columns
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.column(name).is_some()
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column {name}")))
    }

    /// Add a column filled with EMPTY; an existing column of the same dtype is kept.
    pub fn add_column(&mut self, name: &str, dtype: Dtype) -> Result<()> {
        if let Some(c) = self.column(name) {
            if c.dtype != dtype {
                return Err(Error::DtypeMismatch {
                    column: name.into(),
                    expected: dtype.to_string(),
                    found: c.dtype.to_string(),
                });
            }
            return Ok(());
        }
        self.columns.push(Column { name: name.into(), dtype, cells: vec![Cell::Empty; self.nrows] });
        Ok(())
    }

    /// Append a row with the given key values; non-key cells start EMPTY.
    pub fn push_row(&mut self, key: Vec<Cell>) -> Result<()> {
        if key.len() != self.key_columns.len() {
            return Err(Error::InvalidArgument(format!(
                "row key has {} values, table has {} key columns",
                key.len(),
                self.key_columns.len()
            )));
        }
        let mut key = key.into_iter();
        for col in &mut self.columns {
            if self.key_columns.contains(&col.name) {
                let v = key.next().expect("length checked");
                if v.is_empty() || v.dtype() != Some(col.dtype) {
                    return Err(Error::DtypeMismatch {
                        column: col.name.clone(),
                        expected: col.dtype.to_string(),
                        found: v.dtype().map(|d| d.to_string()).unwrap_or_else(|| "EMPTY".into()),
                    });
                }
                col.cells.push(v);
            } else {
                col.cells.push(Cell::Empty);
            }
        }
        self.nrows += 1;
        Ok(())
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&Cell> {
        self.column(column).and_then(|c| c.cells.get(row))
    }

    /// Set one cell, checking the column dtype.
    pub fn set(&mut self, row: usize, column: &str, cell: Cell) -> Result<()> {
        let idx = self.column_index(column)?;
        let col = &mut self.columns[idx];
        if let Some(d) = cell.dtype() {
            if d != col.dtype {
                return Err(Error::DtypeMismatch {
                    column: column.into(),
                    expected: col.dtype.to_string(),
                    found: d.to_string(),
                });
            }
        }
        let slot = col.cells.get_mut(row).ok_or_else(|| Error::InvalidArgument(format!("row {row} out of range")))?;
        *slot = cell;
        Ok(())
    }

    pub fn row_key(&self, row: usize) -> Vec<Cell> {
        self.key_columns.iter().map(|k| self.get(row, k).cloned().unwrap_or(Cell::Empty)).collect()
    }

    /// Canonical string encoding of a row key, used for joins and digests.
    pub fn row_key_string(&self, row: usize) -> String {
        encode_key(&self.row_key(row))
    }

    pub fn row_key_json(&self, row: usize) -> Json {
        Json::Array(self.row_key(row).iter().map(Cell::to_json).collect())
    }

    /// Ordinals of EMPTY cells in `column`.
    pub fn empty_rows(&self, column: &str) -> Vec<usize> {
        self.column(column)
            .map(|c| c.cells.iter().enumerate().filter(|(_, v)| v.is_empty()).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    /// New table with only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ColumnTable {
        ColumnTable {
            key_columns: self.key_columns.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    dtype: c.dtype,
                    cells: rows.iter().map(|&r| c.cells[r].clone()).collect(),
                })
                .collect(),
            nrows: rows.len(),
        }
    }

    /// Column-oriented JSON: `{ column: [values...] }`.
    pub fn to_json(&self) -> Json {
        let mut map = serde_json::Map::new();
        for c in &self.columns {
            map.insert(c.name.clone(), Json::Array(c.cells.iter().map(Cell::to_json).collect()));
        }
        Json::Object(map)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str("keys");
        for k in &self.key_columns {
            out.push('\t');
            out.push_str(k);
        }
        out.push('\n');
        out.push_str("columns");
        for c in &self.columns {
            out.push('\t');
            out.push_str(&c.name);
            out.push(':');
            out.push_str(c.dtype.as_str());
        }
        out.push('\n');
        out.push_str(&format!("rows\t{}\n", self.nrows));
        for r in 0..self.nrows {
            for (i, c) in self.columns.iter().enumerate() {
                if i > 0 {
                    out.push('\t');
                }
                c.cells[r].encode(&mut out);
            }
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::corrupt(path, e))?;
        let mut lines = text.split('\n');
        let bad = |reason: &str| Error::corrupt(path, reason);
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header"));
        }
        let keys_line = lines.next().ok_or_else(|| bad("missing keys line"))?;
        let mut keys = keys_line.split('\t');
        if keys.next() != Some("keys") {
            return Err(bad("malformed keys line"));
        }
        let key_columns: Vec<String> = keys.map(String::from).collect();
        let cols_line = lines.next().ok_or_else(|| bad("missing columns line"))?;
        let mut cols = cols_line.split('\t');
        if cols.next() != Some("columns") {
            return Err(bad("malformed columns line"));
        }
        let mut columns = Vec::new();
        for spec in cols {
            let (name, dtype) = spec.rsplit_once(':').ok_or_else(|| bad("malformed column spec"))?;
            columns.push(Column { name: name.into(), dtype: dtype.parse()?, cells: Vec::new() });
        }
        let nrows: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("rows\t"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("malformed rows line"))?;
        for r in 0..nrows {
            let line = lines.next().ok_or_else(|| bad("truncated rows"))?;
            let fields: Vec<&str> = if columns.is_empty() { Vec::new() } else { line.split('\t').collect() };
            if fields.len() != columns.len() {
                return Err(Error::corrupt(path, format!("row {r} has {} fields", fields.len())));
            }
            for (col, field) in columns.iter_mut().zip(fields) {
                let cell = Cell::decode(col.dtype, field).map_err(|e| Error::corrupt(path, e))?;
                col.cells.push(cell);
            }
        }
        match (lines.next(), lines.next()) {
            (Some(""), None) => {}
            _ => return Err(bad("trailing data")),
        }
        for k in &key_columns {
            if !columns.iter().any(|c| &c.name == k) {
                return Err(bad("key column missing from columns"));
            }
        }
        Ok(ColumnTable { key_columns, columns, nrows })
    }

    /// Render for humans, truncating cells to `max_width` characters when given.
    pub fn render(&self, max_width: Option<usize>) -> String {
        let clip = |s: String| match max_width {
            Some(w) if s.chars().count() > w => {
                let mut t: String = s.chars().take(w.saturating_sub(1)).collect();
                t.push('…');
                t
            }
            _ => s,
        };
        let header: Vec<String> = self.columns.iter().map(|c| format!("{}:{}", c.name, c.dtype)).collect();
        let mut rows: Vec<Vec<String>> = vec![header];
        for r in 0..self.nrows {
            rows.push(
                self.columns
                    .iter()
                    .map(|c| match &c.cells[r] {
                        Cell::Empty => "<EMPTY>".to_string(),
                        v => clip(v.render().replace('\n', "\\n")),
                    })
                    .collect(),
            );
        }
        let widths: Vec<usize> =
            (0..self.columns.len()).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}", w = *w)).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

pub(crate) fn encode_key(key: &[Cell]) -> String {
    Json::Array(key.iter().map(Cell::to_json).collect()).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ColumnTable {
        let mut t = ColumnTable::new(&[("id".into(), Dtype::Int)]);
        t.add_column("text", Dtype::String).unwrap();
        t.add_column("score", Dtype::Float).unwrap();
        t.push_row(vec![Cell::Int(0)]).unwrap();
        t.push_row(vec![Cell::Int(1)]).unwrap();
        t.set(0, "text", Cell::Str(String::new())).unwrap();
        t.set(0, "score", Cell::Float(0.5)).unwrap();
        t
    }

    #[test]
    fn empty_string_is_not_empty_cell() {
        let t = sample();
        let back = ColumnTable::from_bytes(Path::new("x"), &t.to_bytes()).unwrap();
        assert_eq!(back.get(0, "text"), Some(&Cell::Str(String::new())));
        assert_eq!(back.get(1, "text"), Some(&Cell::Empty));
        assert_eq!(back, t);
    }

    #[test]
    fn literal_backslash_e_survives() {
        let mut t = sample();
        t.set(1, "text", Cell::Str("\\E".into())).unwrap();
        let back = ColumnTable::from_bytes(Path::new("x"), &t.to_bytes()).unwrap();
        assert_eq!(back.get(1, "text"), Some(&Cell::Str("\\E".into())));
    }

    #[test]
    fn set_checks_dtype() {
        let mut t = sample();
        assert!(matches!(t.set(0, "score", Cell::Str("x".into())), Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn rejects_truncated_file() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(ColumnTable::from_bytes(Path::new("x"), cut).is_err());
    }

    fn cell_for(dtype: Dtype) -> BoxedStrategy<Cell> {
        let value = match dtype {
            Dtype::String => any::<String>().prop_map(Cell::Str).boxed(),
            Dtype::Artifact => "[a-z/._]{0,12}".prop_map(Cell::Artifact).boxed(),
            Dtype::Int => any::<i64>().prop_map(Cell::Int).boxed(),
            Dtype::Float => any::<f64>().prop_filter("nan", |x| !x.is_nan()).prop_map(Cell::Float).boxed(),
            Dtype::Bool => any::<bool>().prop_map(Cell::Bool).boxed(),
        };
        prop_oneof![1 => Just(Cell::Empty), 3 => value].boxed()
    }

    fn dtype() -> impl Strategy<Value = Dtype> {
        prop_oneof![Just(Dtype::String), Just(Dtype::Int), Just(Dtype::Float), Just(Dtype::Bool), Just(Dtype::Artifact)]
    }

    proptest! {
        #[test]
        fn round_trip_preserves_empty_and_values(
            dtypes in proptest::collection::vec(dtype(), 0..4),
            nrows in 0usize..6,
            seed in any::<u64>(),
        ) {
            let mut t = ColumnTable::new(&[("k".into(), Dtype::Int)]);
            for (i, d) in dtypes.iter().enumerate() {
                t.add_column(&format!("c{i}"), *d).unwrap();
            }
            for r in 0..nrows {
                t.push_row(vec![Cell::Int(r as i64)]).unwrap();
            }
            let mut runner = proptest::test_runner::TestRunner::new_with_rng(
                Default::default(),
                proptest::test_runner::TestRng::from_seed(
                    proptest::test_runner::RngAlgorithm::ChaCha,
                    &{ let mut s = [0u8; 32]; s[..8].copy_from_slice(&seed.to_le_bytes()); s },
                ),
            );
            for (i, d) in dtypes.iter().enumerate() {
                for r in 0..nrows {
                    let cell = cell_for(*d).new_tree(&mut runner).unwrap().current();
                    t.set(r, &format!("c{i}"), cell).unwrap();
                }
            }
            let back = ColumnTable::from_bytes(Path::new("x"), &t.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), t.to_bytes());
            for (a, b) in back.columns().iter().zip(t.columns()) {
                for (x, y) in a.cells.iter().zip(&b.cells) {
                    prop_assert_eq!(x.is_empty(), y.is_empty());
                }
            }
            prop_assert_eq!(back, t);
        }
    }
}
