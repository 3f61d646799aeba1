use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};

/// One executor call, serialized as-is for process and http executors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub entry: String,
    pub args: Map<String, Json>,
    /// Columns the builder owns, in declaration order.
    pub columns: Vec<String>,
    /// Row-wise calls: the row's key values and ordinal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_key: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_index: Option<usize>,
    /// Column calls of non-generator builders: every row key, in row order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_keys: Option<Vec<Json>>,
}

impl Request {
    pub fn is_row_wise(&self) -> bool {
        self.row_index.is_some()
    }
}

/// `cells` maps each owned column to a value (row-wise) or an array (column calls).
/// Artifact values are `{filename, content}`, `{filename, content_b64}` or `{path}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub cells: Map<String, Json>,
}

/// Where a call comes from.
#[derive(Clone, Debug)]
pub struct CallContext {
    pub table: String,
    pub builder: String,
    pub builders_dir: PathBuf,
}

/// Runs builder functions. Implementations must not touch the vault.
pub trait Executor: Send + Sync {
    fn call(&self, ctx: &CallContext, req: &Request) -> std::result::Result<Response, String>;
}

impl<F> Executor for F
where
    F: Fn(&CallContext, &Request) -> std::result::Result<Response, String> + Send + Sync,
{
    fn call(&self, ctx: &CallContext, req: &Request) -> std::result::Result<Response, String> {
        self(ctx, req)
    }
}

/// Executor kinds available to builders (`function.executor`).
#[derive(Clone, Default)]
pub struct ExecutorRegistry {
    kinds: BTreeMap<String, Arc<dyn Executor>>,
}

impl std::fmt::Debug for ExecutorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.kinds.keys()).finish()
    }
}

impl ExecutorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `process`, `http` and a fresh `mock`.
    pub fn with_defaults() -> Self {
        Self::with_mock(Arc::new(super::MockExecutor::new()))
    }

    /// `process`, `http` and the given mock.
    pub fn with_mock(mock: Arc<super::MockExecutor>) -> Self {
        let mut r = Self::new();
        r.register("process", Arc::new(super::ProcessExecutor)).expect("fresh registry");
        r.register("http", Arc::new(super::HttpExecutor::default())).expect("fresh registry");
        r.register("mock", mock).expect("fresh registry");
        r
    }

    pub fn register(&mut self, kind: &str, executor: Arc<dyn Executor>) -> Result<()> {
        if self.kinds.contains_key(kind) {
            return Err(Error::DuplicateKind(kind.into()));
        }
        self.kinds.insert(kind.into(), executor);
        Ok(())
    }

    pub fn get(&self, kind: &str) -> Option<Arc<dyn Executor>> {
        self.kinds.get(kind).cloned()
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.kinds.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_kind_is_rejected() {
        let mut r = ExecutorRegistry::with_defaults();
        let f = |_: &CallContext, _: &Request| Ok(Response::default());
        assert!(matches!(r.register("mock", Arc::new(f)), Err(Error::DuplicateKind(_))));
        r.register("custom", Arc::new(f)).unwrap();
        assert_eq!(r.kinds().collect::<Vec<_>>(), ["custom", "http", "mock", "process"]);
        assert!(ExecutorRegistry::new().get("mock").is_none());
    }

    #[test]
    fn request_wire_shape() {
        let req = Request {
            entry: "e".into(),
            args: Map::new(),
            columns: vec!["a".into()],
            row_key: Some(serde_json::json!([1])),
            row_index: Some(0),
            row_keys: None,
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v, serde_json::json!({"entry": "e", "args": {}, "columns": ["a"], "row_key": [1], "row_index": 0}));
    }
}
