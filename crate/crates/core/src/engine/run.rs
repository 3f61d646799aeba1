use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use serde_json::{Map, Value as Json};

use super::executor::{CallContext, Executor, ExecutorRegistry, Request};
use super::plan::{pin_key, GenerationPlan};
use crate::builder::Builder;
use crate::error::{Error, Result};
use crate::ids::{InstanceId, OpId};
use crate::lock::LockManager;
use crate::store::{sha256_hex, InstanceMeta, Progress, Store};
use crate::table::{encode_key, Cell, ColumnTable, Dtype};
use crate::tablestring::{resolve, scan_embedded, substitute, ResolveContext, TableSource};

/// Column → row key → input digest.
type CellDigests = BTreeMap<String, BTreeMap<String, String>>;

/// What a generation runs against.
pub struct EngineContext<'a> {
    pub store: &'a Store,
    pub locks: &'a LockManager,
    pub op: &'a OpId,
    pub executors: &'a ExecutorRegistry,
    /// Polled at cell boundaries; true halts the run with `Stopped`.
    pub stop: &'a (dyn Fn() -> bool + Sync),
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub data: ColumnTable,
    pub generator_digest: String,
    pub cell_digests: BTreeMap<String, BTreeMap<String, String>>,
    /// Executor calls made by this run (0 for a fully reused instance).
    pub executor_calls: usize,
}

/// Pinned upstream tables, loaded on first use.
struct DepSource<'a> {
    store: &'a Store,
    pins: &'a BTreeMap<String, InstanceId>,
    cache: Mutex<HashMap<String, Arc<ColumnTable>>>,
}

impl TableSource for DepSource<'_> {
    fn load(&self, table: &str, instance: Option<&str>) -> Result<Arc<ColumnTable>> {
        let key = pin_key(table, instance);
        if let Some(t) = self.cache.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let id = self.pins.get(&key).ok_or_else(|| Error::DependencyNotMaterialized(key.clone()))?;
        let data = self
            .store
            .load_dataframe(table, id)?
            .ok_or_else(|| Error::NotMaterialized { table: table.into(), instance: id.to_string() })?;
        let data = Arc::new(data);
        self.cache.lock().unwrap().insert(key, data.clone());
        Ok(data)
    }
}

fn resolve_value(v: &Json, ctx: &ResolveContext<'_>) -> Result<Json> {
    Ok(match v {
        Json::String(s) => {
            let spans = scan_embedded(s)?;
            match spans.as_slice() {
                [] => v.clone(),
                // A whole-string reference keeps its structure.
                [(range, ast)] if range.start == 0 && range.end == s.len() => resolve(ast, ctx)?.to_json(),
                _ => Json::String(substitute(s, &spans, |ast| resolve(ast, ctx).map(|r| r.render()))?),
            }
        }
        Json::Array(items) => Json::Array(items.iter().map(|i| resolve_value(i, ctx)).collect::<Result<_>>()?),
        Json::Object(map) => Json::Object(resolve_args(map, ctx)?),
        other => other.clone(),
    })
}

/// Substitute every TableString in a builder's arguments.
pub fn resolve_args(args: &Map<String, Json>, ctx: &ResolveContext<'_>) -> Result<Map<String, Json>> {
    args.iter().map(|(k, v)| Ok((k.clone(), resolve_value(v, ctx)?))).collect()
}

/// Digest of one call's inputs.
fn input_digest(builder_hash: &str, args: &Map<String, Json>) -> String {
    let canon = serde_json::to_string(args).expect("serializable");
    sha256_hex(format!("{builder_hash}\n{canon}").as_bytes())
}

struct Runner<'a> {
    ctx: &'a EngineContext<'a>,
    plan: &'a GenerationPlan,
    source: DepSource<'a>,
    calls: AtomicUsize,
    call_ctx: BTreeMap<String, CallContext>,
}

impl<'a> Runner<'a> {
    fn executor(&self, b: &Builder) -> Result<Arc<dyn Executor>> {
        self.ctx.executors.get(&b.function.executor).ok_or_else(|| Error::ExecutorFailure {
            builder: b.filename.clone(),
            row: None,
            cause: format!("no executor registered for kind {:?}", b.function.executor),
        })
    }

    fn check_stop(&self) -> Result<()> {
        if (self.ctx.stop)() {
            Err(Error::Stopped { op: self.ctx.op.clone(), keep_progress: false })
        } else {
            Ok(())
        }
    }

    fn resolve(&self, b: &Builder, data: Option<&ColumnTable>, row: Option<usize>) -> Result<Map<String, Json>> {
        resolve_args(&b.arguments, &ResolveContext { source: &self.source, self_table: data, row })
    }

    fn call(&self, b: &Builder, req: &Request) -> Result<super::executor::Response> {
        let exec = self.executor(b)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        exec.call(&self.call_ctx[&b.filename], req).map_err(|cause| Error::ExecutorFailure {
            builder: b.filename.clone(),
            row: req.row_index,
            cause,
        })
    }

    fn checkpoint(&self, data: &ColumnTable) -> Result<()> {
        let p = self.plan;
        self.ctx.store.write_checkpoint(self.ctx.locks, self.ctx.op, &p.table, &p.instance, data)
    }

    fn save_progress(&self, meta: &mut InstanceMeta, progress: Progress) -> Result<()> {
        meta.progress = Some(progress);
        self.ctx.store.write_meta(meta)
    }

    /// Convert one returned value, writing artifact payloads to disk.
    fn to_cell(&self, b: &Builder, column: &str, row: usize, row_key: &str, v: &Json) -> Result<Cell> {
        let dtype = b.dtype_of(column);
        let violation = |detail: String| Error::DtypeViolation { column: column.into(), row: Some(row), detail };
        if dtype != Dtype::Artifact {
            return Cell::from_json(dtype, v).map_err(violation);
        }
        let obj = v.as_object().ok_or_else(|| violation(format!("{v} is not an artifact payload")))?;
        let text = |k: &str| obj.get(k).and_then(Json::as_str);
        let (filename, bytes) = if let Some(path) = text("path") {
            let src = self.call_ctx[&b.filename].builders_dir.join(path);
            let bytes = std::fs::read(&src).map_err(|e| violation(format!("artifact path {path}: {e}")))?;
            let name = src.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            (text("filename").map(str::to_string).unwrap_or(name), bytes)
        } else {
            let filename = text("filename").ok_or_else(|| violation("artifact payload has no filename".into()))?;
            let bytes = match (text("content"), text("content_b64")) {
                (Some(c), _) => c.as_bytes().to_vec(),
                (None, Some(b64)) => base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| violation(format!("content_b64: {e}")))?,
                (None, None) => return Err(violation("artifact payload has no content".into())),
            };
            (filename.to_string(), bytes)
        };
        let p = self.plan;
        let rel = self.ctx.store.store_artifact(
            self.ctx.locks,
            self.ctx.op,
            &p.table,
            &p.instance,
            column,
            dtype,
            row_key,
            &bytes,
            &filename,
        )?;
        Ok(Cell::Artifact(rel))
    }

    fn clear_artifacts(&self, b: &Builder, data: &ColumnTable, row: usize) -> Result<()> {
        for c in &b.changed_columns {
            if b.dtype_of(c) == Dtype::Artifact && data.get(row, c).is_some_and(Cell::is_empty) {
                let p = self.plan;
                self.ctx.store.clear_artifact_slot(&p.table, &p.instance, c, &data.row_key_string(row))?;
            }
        }
        Ok(())
    }

    /// Row keys from the generator, reusing the previous instance's keys when
    /// the generator and its resolved inputs are unchanged.
    fn generate_keys(&self, prev: Option<&(InstanceMeta, ColumnTable)>) -> Result<Vec<Vec<Cell>>> {
        let gen = self.plan.builders.generator();
        let keys = self.plan.builders.key_columns();
        self.check_stop()?;
        let args = self.resolve(gen, None, None)?;
        let digest = input_digest(&self.plan.builder_hashes[&gen.filename], &args);
        if let Some((pm, pdf)) = prev {
            if pm.generator_digest.as_deref() == Some(&digest) && pdf.key_columns() == keys {
                return Ok((0..pdf.nrows()).map(|r| pdf.row_key(r)).collect());
            }
        }
        let req = Request {
            entry: gen.function.entry.clone(),
            args,
            columns: keys.to_vec(),
            row_key: None,
            row_index: None,
            row_keys: None,
        };
        let resp = self.call(gen, &req)?;
        let mut columns = Vec::new();
        for k in keys {
            let dtype = gen.dtype_of(k);
            let values = match resp.cells.get(k) {
                Some(Json::Array(a)) => a,
                _ => {
                    return Err(Error::ExecutorFailure {
                        builder: gen.filename.clone(),
                        row: None,
                        cause: format!("response has no list for key column {k}"),
                    })
                }
            };
            if dtype == Dtype::Artifact {
                return Err(Error::DtypeViolation {
                    column: k.clone(),
                    row: None,
                    detail: "key columns cannot hold artifacts".into(),
                });
            }
            let cells = values
                .iter()
                .enumerate()
                .map(|(r, v)| {
                    Cell::from_json(dtype, v).map_err(|detail| Error::DtypeViolation {
                        column: k.clone(),
                        row: Some(r),
                        detail,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            columns.push(cells);
        }
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::ExecutorFailure {
                builder: gen.filename.clone(),
                row: None,
                cause: "key columns have different lengths".into(),
            });
        }
        let rows: Vec<Vec<Cell>> = (0..n).map(|r| columns.iter().map(|c| c[r].clone()).collect()).collect();
        let mut seen = std::collections::HashSet::new();
        for row in &rows {
            let k = encode_key(row);
            if !seen.insert(k.clone()) {
                return Err(Error::DuplicateRowKey(k));
            }
        }
        Ok(rows)
    }

    /// Generator output left-joined with the retained columns of the previous instance.
    fn join(&self, prev: Option<&(InstanceMeta, ColumnTable)>) -> Result<ColumnTable> {
        let p = self.plan;
        let gen = p.builders.generator();
        let key_types: Vec<(String, Dtype)> =
            p.builders.key_columns().iter().map(|k| (k.clone(), gen.dtype_of(k))).collect();
        let mut data = ColumnTable::new(&key_types);
        for f in &p.builder_order[1..] {
            let b = p.builder(f);
            for c in &b.changed_columns {
                data.add_column(c, b.dtype_of(c))?;
            }
        }
        for key in self.generate_keys(prev)? {
            data.push_row(key)?;
        }
        if let (Some((_, pdf)), Some(prev_id)) = (prev, &p.previous) {
            let index: HashMap<String, usize> = (0..pdf.nrows()).map(|r| (pdf.row_key_string(r), r)).collect();
            for r in 0..data.nrows() {
                let Some(&pr) = index.get(&data.row_key_string(r)) else { continue };
                for c in &p.retained_columns {
                    let cell = pdf.get(pr, c).cloned().unwrap_or(Cell::Empty);
                    if let Cell::Artifact(rel) = &cell {
                        self.ctx.store.copy_artifact(&p.table, prev_id, &p.instance, rel)?;
                    }
                    data.set(r, c, cell)?;
                }
            }
        }
        Ok(data)
    }

    /// Clear carried cells of `b` whose inputs differ from those recorded for
    /// them. Returns true if anything was cleared.
    fn validate(
        &self,
        b: &Builder,
        data: &mut ColumnTable,
        prev: Option<&(InstanceMeta, ColumnTable)>,
    ) -> Result<bool> {
        let recorded = prev.and_then(|(pm, _)| pm.cell_digests.get(&b.filename));
        let hash = &self.plan.builder_hashes[&b.filename];
        let filled: Vec<usize> = (0..data.nrows())
            .filter(|&r| b.changed_columns.iter().any(|c| !data.get(r, c).is_some_and(Cell::is_empty)))
            .collect();
        let column_digest = if b.row_wise || filled.is_empty() {
            None
        } else {
            self.resolve(b, Some(data), None).ok().map(|a| input_digest(hash, &a))
        };
        let mut stale = Vec::new();
        for r in filled {
            let digest = if b.row_wise {
                self.resolve(b, Some(data), Some(r)).ok().map(|a| input_digest(hash, &a))
            } else {
                column_digest.clone()
            };
            let key = data.row_key_string(r);
            let ok = digest.is_some() && recorded.and_then(|m| m.get(&key)) == digest.as_ref();
            if !ok {
                stale.push(r);
            }
        }
        for &r in &stale {
            for c in &b.changed_columns {
                data.set(r, c, Cell::Empty)?;
            }
            self.clear_artifacts(b, data, r)?;
        }
        Ok(!stale.is_empty())
    }

    fn empty_rows(b: &Builder, data: &ColumnTable) -> Vec<usize> {
        (0..data.nrows())
            .filter(|&r| b.changed_columns.iter().any(|c| data.get(r, c).is_some_and(Cell::is_empty)))
            .collect()
    }

    fn run_column_builder(&self, b: &Builder, data: &mut ColumnTable) -> Result<()> {
        let rows = Self::empty_rows(b, data);
        if rows.is_empty() {
            return Ok(());
        }
        self.check_stop()?;
        let args = self.resolve(b, Some(data), None)?;
        let row_keys: Vec<Json> = (0..data.nrows()).map(|r| data.row_key_json(r)).collect();
        for &r in &rows {
            self.clear_artifacts(b, data, r)?;
        }
        let n = row_keys.len();
        let req = Request {
            entry: b.function.entry.clone(),
            args,
            columns: b.changed_columns.clone(),
            row_key: None,
            row_index: None,
            row_keys: Some(row_keys),
        };
        let resp = self.call(b, &req)?;
        for c in &b.changed_columns {
            let values = match resp.cells.get(c) {
                Some(Json::Array(a)) if a.len() == n => a,
                _ => {
                    return Err(Error::ExecutorFailure {
                        builder: b.filename.clone(),
                        row: None,
                        cause: format!("response needs a list of {n} values for column {c}"),
                    })
                }
            };
            for &r in &rows {
                if data.get(r, c).is_some_and(Cell::is_empty) {
                    let cell = self.to_cell(b, c, r, &data.row_key_string(r), &values[r])?;
                    data.set(r, c, cell)?;
                }
            }
        }
        self.checkpoint(data)
    }

    fn run_row_builder(&self, b: &Builder, data: &mut ColumnTable) -> Result<()> {
        let rows = Self::empty_rows(b, data);
        if rows.is_empty() {
            return Ok(());
        }
        struct Shared<'t> {
            data: &'t mut ColumnTable,
            done: Vec<bool>,
            /// Number of leading entries of `rows` that are complete.
            prefix: usize,
        }
        let shared = Mutex::new(Shared { data, done: vec![false; rows.len()], prefix: 0 });
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let fail = |e: Error| {
            abort.store(true, Ordering::SeqCst);
            let mut f = failure.lock().unwrap();
            if f.is_none() {
                *f = Some(e);
            }
        };
        let work = || -> Result<()> {
            loop {
                if abort.load(Ordering::SeqCst) {
                    return Ok(());
                }
                self.check_stop()?;
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&r) = rows.get(i) else { return Ok(()) };
                let (args, key_json, key, empty) = {
                    let st = shared.lock().unwrap();
                    let args = self.resolve(b, Some(st.data), Some(r))?;
                    let empty: Vec<String> = b
                        .changed_columns
                        .iter()
                        .filter(|c| st.data.get(r, c).is_some_and(Cell::is_empty))
                        .cloned()
                        .collect();
                    self.clear_artifacts(b, st.data, r)?;
                    (args, st.data.row_key_json(r), st.data.row_key_string(r), empty)
                };
                let req = Request {
                    entry: b.function.entry.clone(),
                    args,
                    columns: b.changed_columns.clone(),
                    row_key: Some(key_json),
                    row_index: Some(r),
                    row_keys: None,
                };
                let resp = self.call(b, &req)?;
                let mut cells = Vec::new();
                for c in &empty {
                    let v = resp.cells.get(c).ok_or_else(|| Error::ExecutorFailure {
                        builder: b.filename.clone(),
                        row: Some(r),
                        cause: format!("response has no value for column {c}"),
                    })?;
                    cells.push((c, self.to_cell(b, c, r, &key, v)?));
                }
                let mut st = shared.lock().unwrap();
                for (c, cell) in cells {
                    st.data.set(r, c, cell)?;
                }
                st.done[i] = true;
                let before = st.prefix;
                while st.prefix < st.done.len() && st.done[st.prefix] {
                    st.prefix += 1;
                }
                if b.row_save && st.prefix > before {
                    self.checkpoint(st.data)?;
                }
            }
        };
        std::thread::scope(|s| {
            let workers: Vec<_> = (0..b.n_threads.clamp(1, rows.len()))
                .map(|_| {
                    s.spawn(|| {
                        if let Err(e) = work() {
                            fail(e);
                        }
                    })
                })
                .collect();
            for w in workers {
                if w.join().is_err() {
                    fail(Error::ExecutorFailure {
                        builder: b.filename.clone(),
                        row: None,
                        cause: "worker panicked".into(),
                    });
                }
            }
        });
        let st = shared.into_inner().unwrap();
        // Rows finished beyond the prefix are kept when the builder fails.
        if let Some(e) = failure.into_inner().unwrap() {
            if b.row_save && st.done.iter().any(|d| *d) {
                self.checkpoint(st.data)?;
            }
            return Err(e);
        }
        if !b.row_save {
            self.checkpoint(st.data)?;
        }
        Ok(())
    }

    fn digests(&self, data: &ColumnTable) -> Result<(String, CellDigests)> {
        let p = self.plan;
        let gen = p.builders.generator();
        let gen_digest = input_digest(&p.builder_hashes[&gen.filename], &self.resolve(gen, None, None)?);
        let mut all = BTreeMap::new();
        for f in &p.builder_order[1..] {
            let b = p.builder(f);
            let hash = &p.builder_hashes[f];
            let mut per_row = BTreeMap::new();
            let shared = if b.row_wise { None } else { Some(input_digest(hash, &self.resolve(b, Some(data), None)?)) };
            for r in 0..data.nrows() {
                let d = match &shared {
                    Some(d) => d.clone(),
                    None => input_digest(hash, &self.resolve(b, Some(data), Some(r))?),
                };
                per_row.insert(data.row_key_string(r), d);
            }
            all.insert(f.clone(), per_row);
        }
        Ok((gen_digest, all))
    }
}

/// Run a planned generation. The caller holds an exclusive lock on the
/// instance and shared locks on every pinned dependency table.
///
/// Progress is recorded in the instance metadata under the op id; calling
/// again with the same op after an interruption resumes from the last
/// checkpoint.
pub fn run_generation(ctx: &EngineContext<'_>, plan: &GenerationPlan) -> Result<GenerationOutput> {
    let store = ctx.store;
    let builders_dir = store.builders_dir(&plan.table, &plan.instance);
    let call_ctx = plan
        .builders
        .builders()
        .iter()
        .map(|b| {
            let c = CallContext {
                table: plan.table.clone(),
                builder: b.filename.clone(),
                builders_dir: builders_dir.clone(),
            };
            (b.filename.clone(), c)
        })
        .collect();
    let runner = Runner {
        ctx,
        plan,
        source: DepSource { store, pins: &plan.pinned_deps, cache: Mutex::new(HashMap::new()) },
        calls: AtomicUsize::new(0),
        call_ctx,
    };

    let prev = match &plan.previous {
        Some(id) => match store.load_dataframe(&plan.table, id)? {
            Some(df) => Some((store.read_meta(&plan.table, id)?, df)),
            None => None,
        },
        None => None,
    };
    let mut meta = store.read_meta(&plan.table, &plan.instance)?;
    let resumed = match meta.progress.clone().filter(|p| &p.op == ctx.op && p.joined) {
        Some(p) => store.load_dataframe(&plan.table, &plan.instance)?.map(|d| (d, p)),
        None => None,
    };
    let (mut data, mut progress) = match resumed {
        Some(x) => x,
        None => {
            store.remove_all_artifacts(&plan.table, &plan.instance)?;
            let data = runner.join(prev.as_ref())?;
            runner.checkpoint(&data)?;
            let progress = Progress { op: ctx.op.clone(), joined: true, validated: Vec::new() };
            runner.save_progress(&mut meta, progress.clone())?;
            (data, progress)
        }
    };

    for f in &plan.builder_order[1..] {
        let b = plan.builder(f);
        if !progress.validated.contains(f) {
            runner.check_stop()?;
            if runner.validate(b, &mut data, prev.as_ref())? {
                runner.checkpoint(&data)?;
            }
            progress.validated.push(f.clone());
            runner.save_progress(&mut meta, progress.clone())?;
        }
        if b.row_wise {
            runner.run_row_builder(b, &mut data)?;
        } else {
            runner.run_column_builder(b, &mut data)?;
        }
    }
    runner.checkpoint(&data)?;
    let (generator_digest, cell_digests) = runner.digests(&data)?;
    Ok(GenerationOutput { data, generator_digest, cell_digests, executor_calls: runner.calls.load(Ordering::SeqCst) })
}
