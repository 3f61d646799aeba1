//! Builder YAML files: parsing, validation and dependency extraction.
//!
//! ```yaml
//! type: code                      # optional; inferred from the filename
//! changed_columns: [question-1, question-2]
//! n_threads: 4                    # default 1
//! column_dtype: {question-1: string}
//! row_wise: true                  # default true (false for generators)
//! function: {executor: mock, entry: echo}
//! arguments: {df: <<financial_docs>>}
//! row_save: true                  # default true
//! ```
//!
//! A file whose name starts with `gen_` is the generator: its columns are the
//! row-key columns of the instance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::ids::is_valid_name;
use crate::table::Dtype;
use crate::tablestring::{scan_embedded, ColumnRef, TableRef, TableStringAst, TableStringError};

pub const GENERATOR_PREFIX: &str = "gen_";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuilderError {
    #[error("{file}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse { file: String, line: Option<usize>, message: String },
    #[error("{file}{}: unknown key `{key}`", line.map(|l| format!(":{l}")).unwrap_or_default())]
    UnknownKey { file: String, key: String, line: Option<usize> },
    #[error("{file}: missing field `{field}`")]
    MissingField { file: String, field: String },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
    #[error("{file}: unknown builder type `{ty}`")]
    UnknownType { file: String, ty: String },
    #[error("builder type `{0}` is already registered")]
    DuplicateType(String),
    #[error("no generator builder (a file named gen_*.yaml)")]
    NoGenerator,
    #[error("more than one generator builder: {}", .0.join(", "))]
    MultipleGenerators(Vec<String>),
    #[error("column {column} is produced by both {first} and {second}")]
    ColumnOwnedTwice { column: String, first: String, second: String },
    #[error("{file}: SELF.{column} is not produced by any builder")]
    UnknownSelfColumn { file: String, column: String },
}

impl BuilderError {
    pub fn code(&self) -> &'static str {
        match self {
            BuilderError::Parse { .. } => "ParseError",
            BuilderError::UnknownKey { .. } => "UnknownKey",
            BuilderError::MissingField { .. } => "MissingField",
            BuilderError::Invalid { .. } => "InvalidBuilder",
            BuilderError::UnknownType { .. } => "UnknownBuilderType",
            BuilderError::DuplicateType(_) => "DuplicateBuilderType",
            BuilderError::NoGenerator => "NoGenerator",
            BuilderError::MultipleGenerators(_) => "MultipleGenerators",
            BuilderError::ColumnOwnedTwice { .. } => "ColumnOwnedTwice",
            BuilderError::UnknownSelfColumn { .. } => "UnknownSelfColumn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionRef {
    pub executor: String,
    pub entry: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Builder {
    pub filename: String,
    pub builder_type: String,
    pub changed_columns: Vec<String>,
    pub n_threads: usize,
    pub column_dtype: BTreeMap<String, Dtype>,
    pub row_wise: bool,
    pub function: FunctionRef,
    pub arguments: Map<String, Json>,
    pub row_save: bool,
    pub is_generator: bool,
    /// Keys declared by a registered custom builder type.
    pub extra: BTreeMap<String, Json>,
}

impl Builder {
    pub fn dtype_of(&self, column: &str) -> Dtype {
        self.column_dtype.get(column).copied().unwrap_or(Dtype::String)
    }

    /// Every TableString embedded anywhere in the arguments.
    pub fn references(&self) -> Vec<TableStringAst> {
        let mut out = Vec::new();
        for v in self.arguments.values() {
            collect_refs(v, &mut out);
        }
        out
    }

    /// True if any argument reference uses `SELF.INDEX`.
    pub fn uses_self_index(&self) -> bool {
        self.references().iter().any(TableStringAst::uses_self_index)
    }
}

fn collect_refs(v: &Json, out: &mut Vec<TableStringAst>) {
    match v {
        Json::String(s) => {
            // Strings were validated at parse time.
            if let Ok(spans) = scan_embedded(s) {
                out.extend(spans.into_iter().map(|(_, ast)| ast));
            }
        }
        Json::Array(items) => items.iter().for_each(|i| collect_refs(i, out)),
        Json::Object(map) => map.values().for_each(|i| collect_refs(i, out)),
        _ => {}
    }
}

/// A builder type: its name, whether it generates row keys, and any extra
/// top-level keys it accepts.
#[derive(Clone, Debug)]
pub struct BuilderType {
    pub name: String,
    pub generator: bool,
    pub extra_keys: Vec<String>,
    pub required_extra: Vec<String>,
    /// Used when the file has no `function` key.
    pub default_function: Option<FunctionRef>,
}

impl BuilderType {
    pub fn new(name: &str, generator: bool) -> Self {
        Self {
            name: name.into(),
            generator,
            extra_keys: Vec::new(),
            required_extra: Vec::new(),
            default_function: None,
        }
    }
}

#[derive(Deserialize)]
struct RawBuilder {
    #[serde(rename = "type")]
    builder_type: Option<String>,
    changed_columns: Option<Vec<String>>,
    n_threads: Option<i64>,
    column_dtype: Option<BTreeMap<String, Dtype>>,
    row_wise: Option<bool>,
    function: Option<FunctionRef>,
    arguments: Option<serde_yaml::Value>,
    row_save: Option<bool>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_yaml::Value>,
}

/// Registry of builder types. The default has `code` and `generator-code`.
#[derive(Clone, Debug)]
pub struct BuilderTypes {
    types: BTreeMap<String, BuilderType>,
}

impl Default for BuilderTypes {
    fn default() -> Self {
        let mut types = BTreeMap::new();
        for t in [BuilderType::new("code", false), BuilderType::new("generator-code", true)] {
            types.insert(t.name.clone(), t);
        }
        Self { types }
    }
}

fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.contains(needle)).map(|i| i + 1)
}

impl BuilderTypes {
    pub fn register(&mut self, t: BuilderType) -> Result<(), BuilderError> {
        if self.types.contains_key(&t.name) {
            return Err(BuilderError::DuplicateType(t.name));
        }
        self.types.insert(t.name.clone(), t);
        Ok(())
    }

    pub fn parse(&self, text: &str, filename: &str) -> Result<Builder, BuilderError> {
        let file = filename.to_string();
        let invalid = |message: String| BuilderError::Invalid { file: file.clone(), message };
        let raw: RawBuilder = serde_yaml::from_str(text).map_err(|e| BuilderError::Parse {
            file: file.clone(),
            line: e.location().map(|l| l.line()),
            message: e.to_string(),
        })?;
        let is_generator = filename.starts_with(GENERATOR_PREFIX);
        let ty_name = raw
            .builder_type
            .clone()
            .unwrap_or_else(|| if is_generator { "generator-code" } else { "code" }.to_string());
        let ty = self
            .types
            .get(&ty_name)
            .ok_or_else(|| BuilderError::UnknownType { file: file.clone(), ty: ty_name.clone() })?;
        if ty.generator != is_generator {
            return Err(invalid(if is_generator {
                format!("gen_ files must use a generator type, not `{ty_name}`")
            } else {
                format!("type `{ty_name}` is a generator type; the filename must start with gen_")
            }));
        }
        let mut extra = BTreeMap::new();
        for (k, v) in raw.extra {
            if !ty.extra_keys.contains(&k) {
                return Err(BuilderError::UnknownKey {
                    file: file.clone(),
                    line: line_of(text, &format!("{k}:")),
                    key: k,
                });
            }
            let json = serde_json::to_value(&v).map_err(|e| invalid(format!("{k}: {e}")))?;
            extra.insert(k, json);
        }
        for k in &ty.required_extra {
            if !extra.contains_key(k) {
                return Err(BuilderError::MissingField { file: file.clone(), field: k.clone() });
            }
        }
        let changed_columns = raw
            .changed_columns
            .ok_or_else(|| BuilderError::MissingField { file: file.clone(), field: "changed_columns".into() })?;
        if changed_columns.is_empty() {
            return Err(invalid("changed_columns is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &changed_columns {
            if !is_valid_name(c) || c == "SELF" || c == "INDEX" {
                return Err(invalid(format!("invalid column name {c:?}")));
            }
            if !seen.insert(c) {
                return Err(invalid(format!("column {c} listed twice")));
            }
        }
        let column_dtype = raw.column_dtype.unwrap_or_default();
        for (c, d) in &column_dtype {
            if !seen.contains(c) {
                return Err(invalid(format!("column_dtype names {c}, which is not in changed_columns")));
            }
            if is_generator && *d == Dtype::Artifact {
                return Err(invalid(format!("key column {c} cannot be an artifact")));
            }
        }
        let n_threads = match raw.n_threads {
            None => 1,
            Some(n) if n >= 1 => n as usize,
            Some(n) => return Err(invalid(format!("n_threads must be at least 1, got {n}"))),
        };
        let function = raw
            .function
            .or_else(|| ty.default_function.clone())
            .ok_or_else(|| BuilderError::MissingField { file: file.clone(), field: "function".into() })?;
        let arguments = match raw.arguments {
            None | Some(serde_yaml::Value::Null) => Map::new(),
            Some(v) => match serde_json::to_value(&v).map_err(|e| invalid(format!("arguments: {e}")))? {
                Json::Object(m) => m,
                _ => return Err(invalid("arguments must be a mapping".into())),
            },
        };
        for v in arguments.values() {
            check_strings(v, &mut |s| {
                scan_embedded(s).map(|_| ()).map_err(|e: TableStringError| BuilderError::Parse {
                    file: file.clone(),
                    line: line_of(text, s.lines().next().unwrap_or(s)),
                    message: format!("in {s:?}: {e}"),
                })
            })?;
        }
        Ok(Builder {
            filename: file.clone(),
            builder_type: ty_name,
            changed_columns,
            n_threads,
            column_dtype,
            row_wise: raw.row_wise.unwrap_or(!is_generator),
            function,
            arguments,
            row_save: raw.row_save.unwrap_or(true),
            is_generator,
            extra,
        })
    }
}

fn check_strings(v: &Json, f: &mut impl FnMut(&str) -> Result<(), BuilderError>) -> Result<(), BuilderError> {
    match v {
        Json::String(s) => f(s),
        Json::Array(items) => items.iter().try_for_each(|i| check_strings(i, f)),
        Json::Object(map) => map.values().try_for_each(|i| check_strings(i, f)),
        _ => Ok(()),
    }
}

/// Parse with the default builder types.
pub fn parse_builder(text: &str, filename: &str) -> Result<Builder, BuilderError> {
    BuilderTypes::default().parse(text, filename)
}

#[derive(Serialize)]
struct Rendered<'a> {
    #[serde(rename = "type")]
    builder_type: &'a str,
    changed_columns: &'a [String],
    n_threads: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    column_dtype: &'a BTreeMap<String, Dtype>,
    row_wise: bool,
    function: &'a FunctionRef,
    #[serde(skip_serializing_if = "Map::is_empty")]
    arguments: &'a Map<String, Json>,
    row_save: bool,
    #[serde(flatten)]
    extra: &'a BTreeMap<String, Json>,
}

/// Canonical YAML for a builder.
pub fn render_builder(b: &Builder) -> String {
    serde_yaml::to_string(&Rendered {
        builder_type: &b.builder_type,
        changed_columns: &b.changed_columns,
        n_threads: b.n_threads,
        column_dtype: &b.column_dtype,
        row_wise: b.row_wise,
        function: &b.function,
        arguments: &b.arguments,
        row_save: b.row_save,
        extra: &b.extra,
    })
    .expect("builder serializes")
}

/// The builders of one instance, validated together.
#[derive(Clone, Debug)]
pub struct BuilderSet {
    builders: Vec<Builder>,
    generator: usize,
    owners: BTreeMap<String, usize>,
}

impl BuilderSet {
    pub fn builders(&self) -> &[Builder] {
        &self.builders
    }

    pub fn generator(&self) -> &Builder {
        &self.builders[self.generator]
    }

    pub fn generator_index(&self) -> usize {
        self.generator
    }

    pub fn key_columns(&self) -> &[String] {
        &self.generator().changed_columns
    }

    /// Index of the builder owning `column`.
    pub fn owner(&self, column: &str) -> Option<usize> {
        self.owners.get(column).copied()
    }

    /// Column → owning builder filename.
    pub fn ownership(&self) -> BTreeMap<String, String> {
        self.owners.iter().map(|(c, &i)| (c.clone(), self.builders[i].filename.clone())).collect()
    }
}

pub fn validate_builder_set(mut builders: Vec<Builder>) -> Result<BuilderSet, BuilderError> {
    builders.sort_by(|a, b| a.filename.cmp(&b.filename));
    let gens: Vec<usize> = (0..builders.len()).filter(|&i| builders[i].is_generator).collect();
    let generator = match gens.as_slice() {
        [] => return Err(BuilderError::NoGenerator),
        [g] => *g,
        _ => {
            return Err(BuilderError::MultipleGenerators(gens.iter().map(|&i| builders[i].filename.clone()).collect()))
        }
    };
    let mut owners: BTreeMap<String, usize> = BTreeMap::new();
    for (i, b) in builders.iter().enumerate() {
        for c in &b.changed_columns {
            if let Some(&j) = owners.get(c) {
                return Err(BuilderError::ColumnOwnedTwice {
                    column: c.clone(),
                    first: builders[j].filename.clone(),
                    second: b.filename.clone(),
                });
            }
            owners.insert(c.clone(), i);
        }
    }
    Ok(BuilderSet { builders, generator, owners })
}

/// An upstream reference: table, optional instance selector, optional column.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExternalDep {
    pub table: String,
    pub instance: Option<String>,
    pub column: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dependencies {
    pub external: BTreeSet<ExternalDep>,
    /// `(dependent, dependency)` builder filenames: the first reads a SELF
    /// column owned by the second.
    pub internal: BTreeSet<(String, String)>,
}

impl Dependencies {
    pub fn tables(&self) -> BTreeSet<String> {
        self.external.iter().map(|d| d.table.clone()).collect()
    }
}

pub fn extract_dependencies(set: &BuilderSet) -> Result<Dependencies, BuilderError> {
    let mut deps = Dependencies::default();
    for b in set.builders() {
        for ast in b.references() {
            match &ast.table {
                TableRef::Named(t) => {
                    deps.external.insert(ExternalDep {
                        table: t.clone(),
                        instance: ast.instance.clone(),
                        column: match &ast.column {
                            Some(ColumnRef::Named(c)) => Some(c.clone()),
                            _ => None,
                        },
                    });
                }
                TableRef::SelfTable => {
                    let mut cols = Vec::new();
                    if let Some(ColumnRef::Named(c)) = &ast.column {
                        cols.push(c.clone());
                    }
                    if let Some(f) = &ast.filter {
                        if let ColumnRef::Named(k) = &f.key {
                            cols.push(k.clone());
                        }
                    }
                    for c in cols {
                        let owner = set.owner(&c).ok_or_else(|| BuilderError::UnknownSelfColumn {
                            file: b.filename.clone(),
                            column: c.clone(),
                        })?;
                        deps.internal.insert((b.filename.clone(), set.builders()[owner].filename.clone()));
                    }
                }
            }
        }
    }
    Ok(deps)
}
