//! Table-driven executor for tests, with call counters.
//!
//! Built-in entries (row-wise calls produce one value per owned column,
//! column calls an array with one value per row):
//!
//! | entry      | arguments                  | value                                  |
//! |------------|----------------------------|----------------------------------------|
//! | `range`    | `n`, `start`               | `start + i`                            |
//! | `list`     | `values` or `<column>`     | `values[i]`                            |
//! | `echo`     | `<column>` or `value`      | the argument; all arguments otherwise  |
//! | `constant` | `value`                    | `value`                                |
//! | `format`   | `template`                 | `{index}` and `{key}` filled in        |
//! | `upper`    | `value`                    | upper-cased text                       |
//! | `join`     | `values`, `sep`            | rendered values joined                 |
//! | `count`    | `values`                   | length of `values`                     |
//! | `fail`     | `message`                  | always fails                           |
//! | `fail_at`  | `row`, `value`             | fails on row `row`, else `value`       |
//! | `artifact` | `filename`, `content`      | an artifact payload                    |
//!
//! `VAULT_MOCK_DELAY_MS` delays every call; `VAULT_MOCK_LOG` names a file
//! that receives one JSON line per call, for counting across processes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use super::executor::{CallContext, Executor, Request, Response};

pub const MOCK_LOG_ENV: &str = "VAULT_MOCK_LOG";
pub const MOCK_DELAY_ENV: &str = "VAULT_MOCK_DELAY_MS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockCall {
    pub table: String,
    pub builder: String,
    pub entry: String,
    #[serde(default)]
    pub row_index: Option<usize>,
}

pub type MockFn = Arc<dyn Fn(&Request) -> Result<Response, String> + Send + Sync>;

#[derive(Default)]
pub struct MockExecutor {
    calls: Mutex<Vec<MockCall>>,
    custom: Mutex<BTreeMap<String, MockFn>>,
    delay: Mutex<Option<Duration>>,
}

impl std::fmt::Debug for MockExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockExecutor").field("calls", &self.calls.lock().unwrap().len()).finish()
    }
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register or replace a custom entry.
    pub fn define(&self, entry: &str, f: MockFn) {
        self.custom.lock().unwrap().insert(entry.into(), f);
    }

    pub fn set_delay(&self, delay: Option<Duration>) {
        *self.delay.lock().unwrap() = delay;
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Calls made on behalf of builder file `builder` (any table).
    pub fn calls_for(&self, builder: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.builder == builder).count()
    }

    pub fn calls_for_table(&self, table: &str, builder: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.table == table && c.builder == builder).count()
    }

    pub fn reset(&self) {
        self.calls.lock().unwrap().clear();
    }

    /// Read a `VAULT_MOCK_LOG` file.
    pub fn read_log(path: &std::path::Path) -> Vec<MockCall> {
        std::fs::read_to_string(path).unwrap_or_default().lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
    }

    fn record(&self, ctx: &CallContext, req: &Request) {
        let call = MockCall {
            table: ctx.table.clone(),
            builder: ctx.builder.clone(),
            entry: req.entry.clone(),
            row_index: req.row_index,
        };
        if let Ok(path) = std::env::var(MOCK_LOG_ENV) {
            if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{}", serde_json::to_string(&call).expect("serializable"));
            }
        }
        self.calls.lock().unwrap().push(call);
    }

    fn delay(&self) -> Option<Duration> {
        if let Some(d) = *self.delay.lock().unwrap() {
            return Some(d);
        }
        std::env::var(MOCK_DELAY_ENV).ok().and_then(|v| v.parse().ok()).map(Duration::from_millis)
    }
}

impl Executor for MockExecutor {
    fn call(&self, ctx: &CallContext, req: &Request) -> Result<Response, String> {
        if let Some(d) = self.delay() {
            std::thread::sleep(d);
        }
        self.record(ctx, req);
        let custom = self.custom.lock().unwrap().get(&req.entry).cloned();
        if let Some(f) = custom {
            return f(req);
        }
        builtin(req)
    }
}

fn render(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        Json::Null => String::new(),
        other => other.to_string(),
    }
}

fn int_arg(args: &Map<String, Json>, name: &str, default: Option<i64>) -> Result<i64, String> {
    match args.get(name) {
        Some(Json::Number(n)) => n.as_i64().ok_or_else(|| format!("{name} must be an integer")),
        Some(Json::String(s)) => s.trim().parse().map_err(|_| format!("{name} must be an integer")),
        None => default.ok_or_else(|| format!("missing argument {name}")),
        Some(other) => Err(format!("{name} must be an integer, got {other}")),
    }
}

fn array_arg<'a>(args: &'a Map<String, Json>, name: &str) -> Result<&'a Vec<Json>, String> {
    match args.get(name) {
        Some(Json::Array(a)) => Ok(a),
        Some(other) => Err(format!("{name} must be a list, got {other}")),
        None => Err(format!("missing argument {name}")),
    }
}

/// Value for one row of one column.
fn row_value(req: &Request, column: &str, index: usize, key: &Json) -> Result<Json, String> {
    let args = &req.args;
    match req.entry.as_str() {
        "range" => Ok(json!(int_arg(args, "start", Some(0))? + index as i64)),
        "list" => {
            let values = args.get(column).map_or_else(|| array_arg(args, "values"), |_| array_arg(args, column))?;
            values.get(index).cloned().ok_or_else(|| format!("list has no element {index}"))
        }
        "echo" => Ok(args
            .get(column)
            .or_else(|| args.get("value"))
            .cloned()
            .unwrap_or_else(|| Json::String(Json::Object(args.clone()).to_string()))),
        "constant" => args.get("value").cloned().ok_or_else(|| "missing argument value".into()),
        "format" => {
            let t = args.get("template").map(render).ok_or("missing argument template")?;
            Ok(json!(t.replace("{index}", &index.to_string()).replace("{key}", &render_key(key))))
        }
        "upper" => Ok(json!(args.get("value").map(render).unwrap_or_default().to_uppercase())),
        "join" => {
            let sep = args.get("sep").map(render).unwrap_or_else(|| " ".into());
            let parts: Vec<String> = array_arg(args, "values")?.iter().map(render).collect();
            Ok(json!(parts.join(&sep)))
        }
        "count" => Ok(json!(array_arg(args, "values")?.len())),
        "fail" => Err(args.get("message").map(render).unwrap_or_else(|| "mock failure".into())),
        "fail_at" => {
            if int_arg(args, "row", None)? == index as i64 {
                Err(format!("mock failure at row {index}"))
            } else {
                Ok(args.get("value").cloned().unwrap_or_else(|| json!("ok")))
            }
        }
        "artifact" => {
            let filename = args.get("filename").map(render).unwrap_or_else(|| format!("{column}.txt"));
            let content = args.get("content").map(render).unwrap_or_default();
            Ok(json!({"filename": filename, "content": content}))
        }
        other => Err(format!("unknown mock entry {other:?}")),
    }
}

fn render_key(key: &Json) -> String {
    match key {
        Json::Array(a) if a.len() == 1 => render(&a[0]),
        other => render(other),
    }
}

/// Arrays for a column call without row keys (a generator).
fn generator_column(req: &Request, column: &str) -> Result<Json, String> {
    let args = &req.args;
    match req.entry.as_str() {
        "range" => {
            let start = int_arg(args, "start", Some(0))?;
            let n = int_arg(args, "n", None)?;
            Ok(Json::Array((start..start + n.max(0)).map(|i| json!(i)).collect()))
        }
        "list" => Ok(Json::Array(
            args.get(column).map_or_else(|| array_arg(args, "values"), |_| array_arg(args, column))?.clone(),
        )),
        "echo" | "constant" => match args.get(column).or_else(|| args.get("value")) {
            Some(Json::Array(a)) => Ok(Json::Array(a.clone())),
            Some(v) => Ok(Json::Array(vec![v.clone()])),
            None => Err("echo needs a list argument to produce rows".into()),
        },
        "fail" => Err(args.get("message").map(render).unwrap_or_else(|| "mock failure".into())),
        other => Err(format!("mock entry {other:?} cannot generate rows")),
    }
}

fn builtin(req: &Request) -> Result<Response, String> {
    let mut cells = Map::new();
    for column in &req.columns {
        let v = match (req.row_index, &req.row_keys) {
            (Some(i), _) => row_value(req, column, i, req.row_key.as_ref().unwrap_or(&Json::Null))?,
            (None, Some(keys)) => Json::Array(
                keys.iter().enumerate().map(|(i, k)| row_value(req, column, i, k)).collect::<Result<_, _>>()?,
            ),
            (None, None) => generator_column(req, column)?,
        };
        cells.insert(column.clone(), v);
    }
    Ok(Response { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(entry: &str, args: Json, row: Option<usize>, keys: Option<usize>) -> Result<Json, String> {
        let req = Request {
            entry: entry.into(),
            args: args.as_object().unwrap().clone(),
            columns: vec!["c".into()],
            row_key: row.map(|i| json!([i])),
            row_index: row,
            row_keys: keys.map(|n| (0..n).map(|i| json!([i])).collect()),
        };
        let ctx = CallContext { table: "t".into(), builder: "b.yaml".into(), builders_dir: ".".into() };
        MockExecutor::new().call(&ctx, &req).map(|r| r.cells["c"].clone())
    }

    #[test]
    fn builtins() {
        assert_eq!(call("range", json!({"n": 3, "start": 1}), None, None).unwrap(), json!([1, 2, 3]));
        assert_eq!(call("list", json!({"values": ["a", "b"]}), None, None).unwrap(), json!(["a", "b"]));
        assert_eq!(call("list", json!({"values": ["a", "b"]}), Some(1), None).unwrap(), json!("b"));
        assert_eq!(call("echo", json!({"c": 5}), Some(0), None).unwrap(), json!(5));
        assert_eq!(call("upper", json!({"value": "ab"}), Some(0), None).unwrap(), json!("AB"));
        assert_eq!(call("upper", json!({"value": "ab"}), None, Some(2)).unwrap(), json!(["AB", "AB"]));
        assert_eq!(call("join", json!({"values": ["a", 1], "sep": "-"}), Some(0), None).unwrap(), json!("a-1"));
        assert_eq!(call("count", json!({"values": [1, 2]}), Some(0), None).unwrap(), json!(2));
        assert_eq!(call("format", json!({"template": "r{index}:{key}"}), Some(4), None).unwrap(), json!("r4:4"));
        assert!(call("fail", json!({}), Some(0), None).is_err());
        assert!(call("fail_at", json!({"row": 1}), Some(1), None).is_err());
        assert_eq!(call("fail_at", json!({"row": 1}), Some(0), None).unwrap(), json!("ok"));
        assert_eq!(
            call("artifact", json!({"content": "x"}), Some(0), None).unwrap(),
            json!({"filename": "c.txt", "content": "x"})
        );
        assert!(call("nope", json!({}), Some(0), None).is_err());
    }

    #[test]
    fn counters_and_custom_entries() {
        let m = MockExecutor::new();
        m.define(
            "twice",
            Arc::new(|r: &Request| {
                let v = r.args["v"].as_i64().unwrap();
                Ok(Response { cells: [("c".to_string(), json!(v * 2))].into_iter().collect() })
            }),
        );
        let ctx = CallContext { table: "t".into(), builder: "b.yaml".into(), builders_dir: ".".into() };
        let req = Request {
            entry: "twice".into(),
            args: json!({"v": 4}).as_object().unwrap().clone(),
            columns: vec!["c".into()],
            row_key: None,
            row_index: Some(0),
            row_keys: None,
        };
        assert_eq!(m.call(&ctx, &req).unwrap().cells["c"], json!(8));
        assert_eq!(m.calls_for("b.yaml"), 1);
        assert_eq!(m.calls_for("other.yaml"), 0);
        m.reset();
        assert_eq!(m.call_count(), 0);
    }
}
