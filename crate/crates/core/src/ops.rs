//! Public vault operations.
//!
//! Every mutating operation runs one lifecycle: it is logged as active,
//! saves the state of its targets, takes its locks, logs its resolved
//! inputs and executes. It then either commits (complete record, snapshot
//! dropped, locks released) or rolls back (snapshot restored, failure
//! record, locks released). Generations can run on a background thread,
//! be stopped, and be resumed after their process dies.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::builder::{BuilderType, BuilderTypes};
use crate::crash::site;
use crate::durable;
use crate::engine::{
    dependency_tables, latest_active, load_builders, pin_dependencies, plan_generation, previous_instance,
    run_generation, EngineContext, Executor, ExecutorRegistry, GenerationOutput, GenerationPlan, PlanInputs,
};
use crate::error::{Error, IoContext, Result};
use crate::ids::{is_valid_name, InstanceId, OpId};
use crate::lock::{self, LockManager, LockMode, LockTarget};
use crate::oplog::{CompletedRecord, ErrorInfo, OpLog, OpRecord, OpState, OpStatus, OpTarget, OpType};
use crate::process::ProcessId;
use crate::store::{
    read_yaml_files, sha256_hex, InstanceMeta, LineageRecord, Phase, SnapshotRef, Store, TableConfig, TableRecord,
};
use crate::table::{Cell, ColumnTable, Dtype};

const POLL: Duration = Duration::from_millis(20);

/// What a stop does with the work done so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Restore the pre-operation state.
    Rollback,
    /// Keep the last checkpoint of a generation as an unmaterialized instance.
    KeepProgress,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StopRequest {
    mode: StopMode,
    user: String,
}

pub struct VaultOptions {
    pub lock_timeout: Duration,
    pub executors: ExecutorRegistry,
    pub builder_types: BuilderTypes,
}

impl Default for VaultOptions {
    fn default() -> Self {
        Self {
            lock_timeout: lock::DEFAULT_TIMEOUT,
            executors: ExecutorRegistry::with_defaults(),
            builder_types: BuilderTypes::default(),
        }
    }
}

/// An active operation with the liveness of its bound process.
#[derive(Clone, Debug, Serialize)]
pub struct ActiveOp {
    #[serde(flatten)]
    pub record: OpRecord,
    pub alive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    Resumed,
    RolledBack,
}

/// What `restart_vault` did with one interrupted operation.
#[derive(Clone, Debug, Serialize)]
pub struct RecoveredOp {
    pub op_id: OpId,
    pub op_type: OpType,
    pub action: Recovery,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

/// An instance and, transitively, the upstream instances it was generated from.
#[derive(Clone, Debug, Serialize)]
pub struct LineageNode {
    pub table: String,
    pub instance: InstanceId,
    /// None when the instance has no metadata.
    pub phase: Option<Phase>,
    pub fingerprints: BTreeMap<String, String>,
    pub upstream: Vec<LineageNode>,
}

/// Inputs logged by a generation before it executes.
#[derive(Serialize, Deserialize)]
struct GenerateInputs {
    instance: InstanceId,
    #[serde(flatten)]
    plan: PlanInputs,
}

#[derive(Default)]
struct Job {
    stop: Mutex<Option<StopRequest>>,
}

struct Inner {
    store: Store,
    locks: LockManager,
    log: Arc<OpLog>,
    executors: RwLock<ExecutorRegistry>,
    types: RwLock<BuilderTypes>,
    jobs: Mutex<HashMap<OpId, Arc<Job>>>,
    finished: Condvar,
}

/// Handle on an open vault. Cheap to clone; clones share running jobs.
#[derive(Clone)]
pub struct Vault {
    inner: Arc<Inner>,
}

fn check_name(table: &str) -> Result<()> {
    if is_valid_name(table) {
        Ok(())
    } else {
        Err(Error::InvalidName(table.into()))
    }
}

fn check_user(user: &str) -> Result<()> {
    if user.trim().is_empty() {
        Err(Error::InvalidArgument("user must not be empty".into()))
    } else {
        Ok(())
    }
}

fn parse_op(op: &str) -> Result<OpId> {
    op.parse().map_err(|_| Error::NoSuchOp(op.into()))
}

fn is_alive(rec: &OpRecord) -> bool {
    rec.process.is_some_and(|p| p.is_alive())
}

fn generate_target(rec: &OpRecord) -> Option<(String, InstanceId)> {
    let inputs: GenerateInputs = serde_json::from_value(rec.inputs.clone()?).ok()?;
    Some((rec.target.table.clone(), inputs.instance))
}

impl Vault {
    /// Create a vault at `path` and open it with default options.
    pub fn init(path: &Path) -> Result<Vault> {
        Self::init_with(path, VaultOptions::default())
    }

    pub fn init_with(path: &Path, options: VaultOptions) -> Result<Vault> {
        Store::init(path)?;
        Self::open_with(path, options)
    }

    pub fn open(path: &Path) -> Result<Vault> {
        Self::open_with(path, VaultOptions::default())
    }

    pub fn open_with(path: &Path, options: VaultOptions) -> Result<Vault> {
        let store = Store::open(path)?;
        let log = Arc::new(OpLog::new(&store.metadata_dir()));
        let locks = LockManager::new(store.locks_dir()).with_timeout(options.lock_timeout);
        let finished_ops = log.clone();
        locks.set_orphan_check(Arc::new(move |op| finished_ops.is_completed(op).unwrap_or(false)));
        Ok(Vault {
            inner: Arc::new(Inner {
                store,
                locks,
                log,
                executors: RwLock::new(options.executors),
                types: RwLock::new(options.builder_types),
                jobs: Mutex::new(HashMap::new()),
                finished: Condvar::new(),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        self.inner.store.root()
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn locks(&self) -> &LockManager {
        &self.inner.locks
    }

    pub fn log(&self) -> &OpLog {
        &self.inner.log
    }

    pub fn register_executor(&self, kind: &str, executor: Arc<dyn Executor>) -> Result<()> {
        self.inner.executors.write().unwrap_or_else(|e| e.into_inner()).register(kind, executor)
    }

    pub fn register_builder_type(&self, t: BuilderType) -> Result<()> {
        Ok(self.inner.types.write().unwrap_or_else(|e| e.into_inner()).register(t)?)
    }

    // ----- mutating operations -----

    pub fn create_table(&self, config: TableConfig, user: &str) -> Result<OpId> {
        let target = OpTarget { table: config.name.clone(), instance: None };
        let args = serde_json::to_value(&config).expect("serializable");
        let v = &self.inner;
        v.run(OpType::CreateTable, target, user, args, |txn| {
            let name = config.name.clone();
            check_name(&name)?;
            txn.save(&[(name.clone(), None)])?;
            txn.lock(LockTarget::table(&name), LockMode::Exclusive)?;
            txn.locked(|| Ok(()))?;
            if v.store.table_exists(&name) {
                return Err(Error::TableExists(name));
            }
            txn.inputs(json!({}))?;
            txn.executing()?;
            v.store.create_table_dir(&name)?;
            v.store.write_table(&TableRecord {
                config: config.clone(),
                created_by: user.into(),
                created_at: Utc::now(),
                deleted_at: None,
            })
        })
        .map(|(op, ())| op)
    }

    /// Create an unexecuted instance, copying the builders of `origin` when given.
    pub fn create_instance(
        &self,
        table: &str,
        origin: Option<&str>,
        external_id: Option<&str>,
        user: &str,
    ) -> Result<(OpId, InstanceId)> {
        let target = OpTarget { table: table.into(), instance: external_id.map(String::from) };
        let args = json!({ "origin": origin, "external_id": external_id });
        let v = &self.inner;
        v.run(OpType::CreateInstance, target, user, args, |txn| {
            check_name(table)?;
            let mut id = InstanceId::now(external_id.map(String::from))?;
            txn.save(&[(table.into(), Some(id.clone()))])?;
            txn.lock(LockTarget::instance(table, &id), LockMode::Exclusive)?;
            let origin_id = match origin {
                Some(sel) => {
                    let o = v.store.resolve_instance(table, sel).map_err(|e| match e {
                        Error::NoSuchInstance { table, instance } => Error::NoSuchOrigin { table, instance },
                        e => e,
                    })?;
                    txn.lock(LockTarget::instance(table, &o), LockMode::Shared)?;
                    Some(o)
                }
                None => None,
            };
            txn.locked(|| Ok(()))?;
            if v.store.read_table(table)?.deleted_at.is_some() {
                return Err(Error::TableDeleted(table.into()));
            }
            txn.inputs(json!({ "instance": id, "origin": origin_id }))?;
            txn.executing()?;
            let builders = match &origin_id {
                Some(o) => v.store.builder_files(table, o)?,
                None => Vec::new(),
            };
            // Claiming the id and checking the external id happen in one
            // critical section so concurrent creations cannot both succeed.
            loop {
                let claimed = v.locks.critical(|| {
                    if let Some(ext) = id.external_id() {
                        if v.store.list_instances(table)?.iter().any(|i| i.external_id() == Some(ext)) {
                            return Err(Error::DuplicateExternalId(ext.into()));
                        }
                    }
                    if v.store.instance_dir(table, &id).exists() {
                        return Ok(false);
                    }
                    v.store.create_instance_dir(table, &id)?;
                    v.store.write_meta(&InstanceMeta::new(table, id.clone(), origin_id.clone(), user))?;
                    Ok(true)
                })?;
                if claimed {
                    break;
                }
                id = id.bumped();
                txn.lock(LockTarget::instance(table, &id), LockMode::Exclusive)?;
                txn.extend(table, Some(&id))?;
            }
            for (name, bytes) in builders {
                v.store.write_builder_file(table, &id, &name, &bytes)?;
            }
            Ok(id)
        })
    }

    /// Copy builder files (a directory's `.yaml` files, or one file) into an instance.
    pub fn copy_builders(&self, table: &str, instance: &str, src: &Path, user: &str) -> Result<OpId> {
        let target = OpTarget { table: table.into(), instance: Some(instance.into()) };
        let args = json!({ "src": src.display().to_string() });
        let v = &self.inner;
        v.run(OpType::CopyBuilders, target, user, args, |txn| {
            check_name(table)?;
            let id = v.store.resolve_instance(table, instance)?;
            txn.save(&[(table.into(), Some(id.clone()))])?;
            txn.lock(LockTarget::instance(table, &id), LockMode::Exclusive)?;
            txn.locked(|| Ok(()))?;
            let meta = v.store.read_meta(table, &id)?;
            if meta.phase != Phase::Created {
                return Err(Error::InstanceNotEditable {
                    table: table.into(),
                    instance: id.to_string(),
                    phase: meta.phase.to_string(),
                });
            }
            let files = read_builder_source(src)?;
            let types = v.types();
            for (name, bytes) in &files {
                let text = std::str::from_utf8(bytes)
                    .map_err(|_| Error::InvalidArgument(format!("builder {name} is not UTF-8")))?;
                types.parse(text, name)?;
            }
            let hashes: BTreeMap<&str, String> = files.iter().map(|(n, b)| (n.as_str(), sha256_hex(b))).collect();
            txn.inputs(json!({ "instance": id, "files": hashes }))?;
            txn.executing()?;
            for (name, bytes) in &files {
                v.store.write_builder_file(table, &id, name, bytes)?;
            }
            Ok(())
        })
        .map(|(op, ())| op)
    }

    /// Execute an instance's builders. With `background` the call returns
    /// once the operation is logged; use `wait` to block on it.
    pub fn generate(&self, table: &str, instance: &str, user: &str, background: bool) -> Result<OpId> {
        let pending = self.begin_generate(table, instance, user)?;
        let op = pending.op_id().clone();
        if background {
            pending.spawn();
        } else {
            pending.run()?;
        }
        Ok(op)
    }

    /// Log a generation without running it yet. The returned handle must be
    /// run or spawned.
    pub fn begin_generate(&self, table: &str, instance: &str, user: &str) -> Result<PendingGeneration> {
        check_user(user)?;
        let target = OpTarget { table: table.into(), instance: Some(instance.into()) };
        let op = self.inner.log.begin(OpType::Generate, target, user, json!({}))?;
        self.inner.register(&op);
        Ok(PendingGeneration { vault: self.clone(), op, table: table.into(), selector: instance.into() })
    }

    /// Remove an instance's dataframe and artifacts. Builders and metadata stay.
    pub fn delete_instance(&self, table: &str, instance: &str, user: &str) -> Result<OpId> {
        let target = OpTarget { table: table.into(), instance: Some(instance.into()) };
        let v = &self.inner;
        v.run(OpType::DeleteInstance, target, user, json!({}), |txn| {
            check_name(table)?;
            let id = v.store.resolve_instance(table, instance)?;
            v.ensure_not_busy(table, Some(&id), &txn.op)?;
            txn.save(&[(table.into(), Some(id.clone()))])?;
            txn.lock(LockTarget::instance(table, &id), LockMode::Exclusive)?;
            txn.locked(|| Ok(()))?;
            let mut meta = v.store.read_meta(table, &id)?;
            match meta.phase {
                Phase::Executing => return Err(Error::TargetBusy(format!("{table}/{id}"))),
                Phase::Deleted => {
                    return Err(Error::InstanceNotEditable {
                        table: table.into(),
                        instance: id.to_string(),
                        phase: meta.phase.to_string(),
                    })
                }
                Phase::Created | Phase::Materialized => {}
            }
            txn.inputs(json!({ "instance": id }))?;
            txn.executing()?;
            v.delete_contents(&mut meta)
        })
        .map(|(op, ())| op)
    }

    /// Delete every instance's data and mark the table deleted.
    pub fn delete_table(&self, table: &str, user: &str) -> Result<OpId> {
        let target = OpTarget { table: table.into(), instance: None };
        let v = &self.inner;
        v.run(OpType::DeleteTable, target, user, json!({}), |txn| {
            check_name(table)?;
            if !v.store.table_exists(table) {
                return Err(Error::NoSuchTable(table.into()));
            }
            v.ensure_not_busy(table, None, &txn.op)?;
            txn.save(&[(table.into(), None)])?;
            txn.lock(LockTarget::table(table), LockMode::Exclusive)?;
            txn.locked(|| Ok(()))?;
            let mut record = v.store.read_table(table)?;
            if record.deleted_at.is_some() {
                return Err(Error::TableDeleted(table.into()));
            }
            let mut metas = Vec::new();
            for id in v.store.list_instances(table)? {
                let meta = v.store.read_meta(table, &id)?;
                if meta.phase == Phase::Executing {
                    return Err(Error::TargetBusy(format!("{table}/{id}")));
                }
                metas.push(meta);
            }
            let ids: Vec<&InstanceId> = metas.iter().map(|m| &m.instance).collect();
            txn.inputs(json!({ "instances": ids }))?;
            txn.executing()?;
            for meta in &mut metas {
                if meta.phase != Phase::Deleted {
                    v.delete_contents(meta)?;
                }
            }
            record.deleted_at = Some(Utc::now());
            v.store.write_table(&record)
        })
        .map(|(op, ())| op)
    }

    // ----- control -----

    /// Ask an active operation to halt and wait until it has. An operation
    /// whose process is gone is rolled back directly.
    pub fn stop_op(&self, op: &str, mode: StopMode, user: &str) -> Result<()> {
        check_user(user)?;
        let op = parse_op(op)?;
        if let OpStatus::Finished(_) = self.inner.log.get(&op)? {
            return Err(Error::NoSuchOp(op.to_string()));
        }
        let request = StopRequest { mode, user: user.into() };
        let path = self.inner.stop_path(&op);
        let bytes = serde_json::to_vec(&request).expect("serializable");
        durable::write_atomic(site::STOP_REQUESTED, &path, &bytes).at(&path)?;
        if let Some(job) = self.inner.jobs.lock().unwrap_or_else(|e| e.into_inner()).get(&op) {
            *job.stop.lock().unwrap_or_else(|e| e.into_inner()) = Some(request.clone());
        }
        loop {
            match self.inner.log.get(&op)? {
                OpStatus::Finished(_) => return Ok(()),
                OpStatus::Active(rec) if !is_alive(&rec) => {
                    let info = ErrorInfo { code: "Stopped".into(), message: format!("stopped by {user}") };
                    return self.inner.roll_back_record(&rec, mode, info);
                }
                OpStatus::Active(_) => self.inner.pause(),
            }
        }
    }

    /// Resume an interrupted generation under its original id and locks.
    pub fn restart_op(&self, op: &str, user: &str) -> Result<()> {
        check_user(user)?;
        let op = parse_op(op)?;
        let rec = match self.inner.log.get(&op)? {
            OpStatus::Finished(_) => return Err(Error::NoSuchOp(op.to_string())),
            OpStatus::Active(rec) => rec,
        };
        if let Some(p) = rec.process.filter(|p| p.is_alive()) {
            return Err(Error::AlreadyRunning { op, pid: p.pid });
        }
        if rec.op_type != OpType::Generate || rec.state < OpState::InputsLogged {
            return Err(Error::NotResumable(op));
        }
        self.inner.resume(rec)
    }

    /// Recover after a crash: roll back interrupted operations, resume
    /// interrupted generations that had logged their inputs, and clear
    /// leftover locks, snapshots, stop requests and temp files.
    pub fn restart_vault(&self) -> Result<Vec<RecoveredOp>> {
        let v = &self.inner;
        let active = v.log.active_ops()?;
        if let Some(rec) = active.iter().find(|r| is_alive(r)) {
            let pid = rec.process.map(|p| p.pid).unwrap_or_default();
            return Err(Error::AlreadyRunning { op: rec.op_id.clone(), pid });
        }
        let ids: HashSet<OpId> = active.iter().map(|r| r.op_id.clone()).collect();
        v.locks.clear_where(|op| ids.contains(op) || lock::is_live_read_session(op))?;

        let (resumable, rest): (Vec<OpRecord>, Vec<OpRecord>) = active.into_iter().partition(|r| {
            r.op_type == OpType::Generate && r.state >= OpState::InputsLogged && v.stop_request(&r.op_id).is_none()
        });
        let mut out = Vec::new();
        for rec in rest {
            let (mode, info) = match v.stop_request(&rec.op_id) {
                Some(req) => {
                    (req.mode, ErrorInfo { code: "Stopped".into(), message: format!("stopped by {}", req.user) })
                }
                None => (StopMode::Rollback, ErrorInfo::from(&Error::Interrupted(rec.op_id.clone()))),
            };
            v.roll_back_record(&rec, mode, info.clone())?;
            out.push(RecoveredOp {
                op_id: rec.op_id,
                op_type: rec.op_type,
                action: Recovery::RolledBack,
                error: Some(info),
            });
        }
        for rec in resumable {
            let (op_id, op_type) = (rec.op_id.clone(), rec.op_type);
            let recovered = match v.resume(rec) {
                Ok(()) => RecoveredOp { op_id, op_type, action: Recovery::Resumed, error: None },
                Err(e) => {
                    RecoveredOp { op_id, op_type, action: Recovery::RolledBack, error: Some(ErrorInfo::from(&e)) }
                }
            };
            out.push(recovered);
        }

        let still_active: HashSet<OpId> = v.log.active_ops()?.into_iter().map(|r| r.op_id).collect();
        for op in v.store.snapshot_ops()? {
            if !still_active.contains(&op) {
                v.store.remove_snapshot_dir(&op)?;
            }
        }
        let stop_dir = v.store.stop_dir();
        for e in fs::read_dir(&stop_dir).at(&stop_dir)? {
            let path = e.at(&stop_dir)?.path();
            let op = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<OpId>().ok());
            if !op.is_some_and(|op| still_active.contains(&op)) {
                durable::remove_file(site::STOP_CLEARED, &path).at(&path)?;
            }
        }
        if still_active.is_empty() {
            v.store.remove_temp_files()?;
        }
        Ok(out)
    }

    /// Block until `op` has a terminal record.
    pub fn wait(&self, op: &OpId) -> Result<CompletedRecord> {
        loop {
            match self.inner.log.get(op)? {
                OpStatus::Finished(c) => return Ok(c),
                OpStatus::Active(rec) if !is_alive(&rec) => return Err(Error::Interrupted(op.clone())),
                OpStatus::Active(_) => self.inner.pause(),
            }
        }
    }

    // ----- reads -----

    /// The dataframe of an instance, or of the latest active materialized
    /// instance when `instance` is None. Holds a shared lock while reading.
    pub fn read_dataframe(&self, table: &str, instance: Option<&str>) -> Result<(InstanceId, ColumnTable)> {
        let v = &self.inner;
        check_name(table)?;
        if let Some(sel) = instance {
            let id = v.store.resolve_instance(table, sel)?;
            let data = v.with_read(&[LockTarget::instance(table, &id)], || v.load_materialized(table, &id))?;
            return Ok((id, data));
        }
        loop {
            let candidate = latest_active(&v.store, table)?
                .ok_or_else(|| Error::NotMaterialized { table: table.into(), instance: "latest".into() })?;
            // The latest instance may be superseded while the lock is awaited.
            let read = v.with_read(&[LockTarget::instance(table, &candidate)], || {
                if latest_active(&v.store, table)?.as_ref() != Some(&candidate) {
                    return Ok(None);
                }
                v.load_materialized(table, &candidate).map(Some)
            })?;
            if let Some(data) = read {
                return Ok((candidate, data));
            }
        }
    }

    /// The last checkpoint of an instance in any phase, e.g. one kept by a stop.
    pub fn read_partial(&self, table: &str, instance: &str) -> Result<ColumnTable> {
        let v = &self.inner;
        check_name(table)?;
        let id = v.store.resolve_instance(table, instance)?;
        v.with_read(&[LockTarget::instance(table, &id)], || {
            v.store.load_dataframe(table, &id)?.ok_or_else(|| Error::NoCheckpoint(format!("{table}/{id}")))
        })
    }

    /// Active instances of a table, read consistently under shared locks.
    pub fn active_instances(&self, table: &str) -> Result<Vec<InstanceId>> {
        let v = &self.inner;
        check_name(table)?;
        loop {
            let seen = v.active_ids(table, None)?;
            let targets: Vec<LockTarget> = seen.iter().map(|id| LockTarget::instance(table, id)).collect();
            if v.with_read(&targets, || Ok(v.active_ids(table, None)? == seen))? {
                return Ok(seen);
            }
        }
    }

    pub fn list_tables(&self) -> Result<Vec<TableRecord>> {
        let store = &self.inner.store;
        store.list_tables()?.iter().map(|t| store.read_table(t)).collect()
    }

    pub fn list_instances(&self, table: &str) -> Result<Vec<InstanceMeta>> {
        let store = &self.inner.store;
        check_name(table)?;
        store.list_instances(table)?.iter().map(|id| store.read_meta(table, id)).collect()
    }

    pub fn instance_meta(&self, table: &str, instance: &str) -> Result<InstanceMeta> {
        check_name(table)?;
        let id = self.inner.store.resolve_instance(table, instance)?;
        self.inner.store.read_meta(table, &id)
    }

    /// Bytes of an artifact cell, under a shared lock on the instance.
    pub fn fetch_artifact(&self, table: &str, instance: &str, cell: &str) -> Result<Vec<u8>> {
        let v = &self.inner;
        check_name(table)?;
        let id = v.store.resolve_instance(table, instance)?;
        v.with_read(&[LockTarget::instance(table, &id)], || v.store.fetch_artifact(table, &id, cell))
    }

    /// Pinned upstream instances, transitively.
    pub fn lineage(&self, table: &str, instance: &str) -> Result<LineageNode> {
        check_name(table)?;
        let id = self.inner.store.resolve_instance(table, instance)?;
        Ok(self.inner.lineage_node(table, &id, &mut Vec::new()))
    }

    /// Lineage index entries of generations that committed.
    pub fn lineage_records(&self) -> Result<Vec<LineageRecord>> {
        let store = &self.inner.store;
        Ok(store
            .read_lineage()?
            .into_iter()
            .filter(|r| {
                store.read_meta(&r.table, &r.instance).is_ok_and(|m| m.generation_op.as_ref() == Some(&r.op_id))
            })
            .collect())
    }

    pub fn active_ops(&self) -> Result<Vec<ActiveOp>> {
        Ok(self
            .inner
            .log
            .active_ops()?
            .into_iter()
            .map(|record| ActiveOp { alive: is_alive(&record), record })
            .collect())
    }

    pub fn completed_ops(&self) -> Result<Vec<CompletedRecord>> {
        self.inner.log.completed_ops()
    }

    pub fn op_status(&self, op: &str) -> Result<OpStatus> {
        self.inner.log.get(&parse_op(op)?)
    }
}

/// A logged generation that has not started executing.
pub struct PendingGeneration {
    vault: Vault,
    op: OpId,
    table: String,
    selector: String,
}

impl PendingGeneration {
    pub fn op_id(&self) -> &OpId {
        &self.op
    }

    /// Execute on the calling thread.
    pub fn run(self) -> Result<()> {
        let v = &self.vault.inner;
        let txn = Txn::new(v, self.op.clone(), OpState::ActiveLogged, None);
        v.finish(txn, |txn| v.generate_body(txn, &self.table, &self.selector))
    }

    /// Execute on a new thread.
    pub fn spawn(self) -> thread::JoinHandle<Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn read_builder_source(src: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let files = if src.is_dir() {
        read_yaml_files(src)?
    } else if src.is_file() {
        let name = src.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        if !(name.ends_with(".yaml") || name.ends_with(".yml")) {
            return Err(Error::InvalidArgument(format!("{} is not a .yaml file", src.display())));
        }
        vec![(name, fs::read(src).at(src)?)]
    } else {
        return Err(Error::InvalidArgument(format!("builder source {} does not exist", src.display())));
    };
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no builder files in {}", src.display())));
    }
    Ok(files)
}

/// One operation's progress through the lifecycle.
struct Txn<'a> {
    v: &'a Inner,
    op: OpId,
    stage: OpState,
    snap: Option<SnapshotRef>,
    /// Instance being generated, once known.
    generating: Option<(String, InstanceId)>,
}

impl<'a> Txn<'a> {
    fn new(v: &'a Inner, op: OpId, stage: OpState, snap: Option<SnapshotRef>) -> Self {
        Self { v, op, stage, snap, generating: None }
    }

    fn check_stop(&self) -> Result<()> {
        match self.v.stop_request(&self.op) {
            Some(req) => Err(Error::Stopped { op: self.op.clone(), keep_progress: req.mode == StopMode::KeepProgress }),
            None => Ok(()),
        }
    }

    fn advance(&mut self, state: OpState) -> Result<()> {
        self.v.log.advance(&self.op, state)?;
        self.stage = state;
        Ok(())
    }

    fn save(&mut self, targets: &[(String, Option<InstanceId>)]) -> Result<()> {
        self.check_stop()?;
        self.snap = Some(self.v.store.snapshot_state(&self.op, targets)?);
        self.advance(OpState::StateSaved)
    }

    fn lock(&self, target: LockTarget, mode: LockMode) -> Result<()> {
        self.v.locks.acquire(&self.op, &target, mode).map(drop)
    }

    fn extend(&mut self, table: &str, instance: Option<&InstanceId>) -> Result<()> {
        match &mut self.snap {
            Some(snap) => self.v.store.extend_snapshot(&self.v.locks, &self.op, snap, table, instance),
            None => Ok(()),
        }
    }

    /// Re-capture targets changed while locks were awaited, then log LOCKED
    /// in the same critical section as `check`.
    fn locked(&mut self, check: impl FnOnce() -> Result<()>) -> Result<()> {
        self.check_stop()?;
        if let Some(snap) = &mut self.snap {
            self.v.store.refresh_snapshot(&self.v.locks, &self.op, snap)?;
        }
        let (log, op) = (&self.v.log, &self.op);
        self.v.locks.critical(|| {
            check()?;
            log.advance(op, OpState::Locked)
        })?;
        self.stage = OpState::Locked;
        Ok(())
    }

    fn inputs(&mut self, inputs: Json) -> Result<()> {
        self.v.log.log_inputs(&self.op, inputs)?;
        self.stage = OpState::InputsLogged;
        Ok(())
    }

    fn executing(&mut self) -> Result<()> {
        self.check_stop()?;
        if self.stage < OpState::Executing {
            self.advance(OpState::Executing)?;
        }
        Ok(())
    }

    fn commit(self) -> Result<()> {
        self.v.log.mark_complete(&self.op)?;
        self.v.store.remove_snapshot_dir(&self.op)?;
        self.v.locks.release_all(&self.op)?;
        self.v.clear_stop(&self.op)
    }

    /// Roll back and return the error to report.
    fn abort(self, err: Error) -> Error {
        let (err, info) = match err {
            Error::Stopped { op, .. } => {
                let req = self.v.stop_request(&op);
                let keep = req.as_ref().is_some_and(|r| r.mode == StopMode::KeepProgress);
                let err = Error::Stopped { op, keep_progress: keep };
                let mut info = ErrorInfo::from(&err);
                if let Some(r) = req {
                    info.message = format!("{} by {}", info.message, r.user);
                }
                (err, info)
            }
            e => {
                let info = ErrorInfo::from(&e);
                (e, info)
            }
        };
        let keep = match (&err, &self.generating) {
            (Error::Stopped { keep_progress: true, .. }, Some((t, id))) => Some((t.as_str(), id)),
            _ => None,
        };
        // A failed rollback leaves the operation active for restart_vault.
        let _ = self.v.roll_back(&self.op, self.stage, self.snap.as_ref(), keep, info);
        err
    }
}

impl Inner {
    fn types(&self) -> BuilderTypes {
        self.types.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn executors(&self) -> ExecutorRegistry {
        self.executors.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn register(&self, op: &OpId) {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(op.clone(), Arc::new(Job::default()));
    }

    fn unregister(&self, op: &OpId) {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).remove(op);
        self.finished.notify_all();
    }

    /// Sleep until a local job finishes or the poll interval passes.
    fn pause(&self) {
        let jobs = self.jobs.lock().unwrap_or_else(|e| e.into_inner());
        let _ = self.finished.wait_timeout(jobs, POLL);
    }

    fn stop_path(&self, op: &OpId) -> PathBuf {
        self.store.stop_dir().join(op.as_str())
    }

    /// A pending stop request from this process or another.
    fn stop_request(&self, op: &OpId) -> Option<StopRequest> {
        let job = self.jobs.lock().unwrap_or_else(|e| e.into_inner()).get(op).cloned();
        if let Some(req) = job.and_then(|j| j.stop.lock().unwrap_or_else(|e| e.into_inner()).clone()) {
            return Some(req);
        }
        let bytes = fs::read(self.stop_path(op)).ok()?;
        Some(serde_json::from_slice(&bytes).unwrap_or(StopRequest { mode: StopMode::Rollback, user: "unknown".into() }))
    }

    fn clear_stop(&self, op: &OpId) -> Result<()> {
        let path = self.stop_path(op);
        if path.exists() {
            durable::remove_file(site::STOP_CLEARED, &path).at(&path)?;
        }
        Ok(())
    }

    fn run<T>(
        &self,
        op_type: OpType,
        target: OpTarget,
        user: &str,
        args: Json,
        body: impl FnOnce(&mut Txn<'_>) -> Result<T>,
    ) -> Result<(OpId, T)> {
        check_user(user)?;
        let op = self.log.begin(op_type, target, user, args)?;
        self.register(&op);
        let txn = Txn::new(self, op.clone(), OpState::ActiveLogged, None);
        self.finish(txn, body).map(|t| (op, t))
    }

    fn finish<T>(&self, mut txn: Txn<'_>, body: impl FnOnce(&mut Txn<'_>) -> Result<T>) -> Result<T> {
        let op = txn.op.clone();
        let out = match body(&mut txn) {
            Ok(t) => txn.commit().map(|()| t),
            Err(e) => Err(txn.abort(e)),
        };
        self.unregister(&op);
        out
    }

    /// Undo an operation and record it as rolled back. Targets are restored
    /// only once the operation held its locks; before that it changed nothing.
    fn roll_back(
        &self,
        op: &OpId,
        state: OpState,
        snap: Option<&SnapshotRef>,
        keep: Option<(&str, &InstanceId)>,
        info: ErrorInfo,
    ) -> Result<()> {
        if state >= OpState::Locked {
            let kept = match keep {
                Some((table, id)) => self.keep_partial(table, id, op)?,
                None => false,
            };
            if !kept {
                if let Some(snap) = snap {
                    self.store.restore_snapshot(snap)?;
                }
            }
        }
        self.log.mark_failed(op, Some(info))?;
        self.store.remove_snapshot_dir(op)?;
        self.locks.release_all(op)?;
        self.clear_stop(op)
    }

    /// Roll back an operation from its log record (its process is gone).
    fn roll_back_record(&self, rec: &OpRecord, mode: StopMode, info: ErrorInfo) -> Result<()> {
        let snap = self.store.load_snapshot(&rec.op_id)?;
        let target = generate_target(rec).filter(|_| mode == StopMode::KeepProgress);
        let keep = target.as_ref().map(|(t, id)| (t.as_str(), id));
        self.roll_back(&rec.op_id, rec.state, snap.as_ref(), keep, info)
    }

    /// Return a stopped generation's instance to CREATED with its last
    /// checkpoint in place. False if the generation had not started executing.
    fn keep_partial(&self, table: &str, id: &InstanceId, op: &OpId) -> Result<bool> {
        let mut meta = match self.store.read_meta(table, id) {
            Ok(m) => m,
            Err(Error::NoSuchInstance { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        if meta.phase != Phase::Executing || meta.generation_op.as_ref() != Some(op) {
            return Ok(false);
        }
        meta.phase = Phase::Created;
        meta.active = false;
        self.store.write_meta(&meta)?;
        Ok(true)
    }

    fn delete_contents(&self, meta: &mut InstanceMeta) -> Result<()> {
        self.store.remove_dataframe(&meta.table, &meta.instance)?;
        self.store.remove_all_artifacts(&meta.table, &meta.instance)?;
        meta.phase = Phase::Deleted;
        meta.active = false;
        meta.deleted_at = Some(Utc::now());
        meta.progress = None;
        self.store.write_meta(meta)
    }

    /// Fail fast instead of queueing behind a running generation.
    fn ensure_not_busy(&self, table: &str, instance: Option<&InstanceId>, own: &OpId) -> Result<()> {
        let ids = match instance {
            Some(id) => vec![id.clone()],
            None => self.store.list_instances(table)?,
        };
        for id in &ids {
            if self.store.read_meta(table, id)?.phase == Phase::Executing {
                return Err(Error::TargetBusy(format!("{table}/{id}")));
            }
        }
        for r in self.log.active_ops()? {
            if &r.op_id == own || r.op_type != OpType::Generate || r.target.table != table || r.state < OpState::Locked
            {
                continue;
            }
            let hits = match (instance, &r.target.instance) {
                (None, _) => true,
                (Some(id), Some(sel)) => id.matches(sel),
                (Some(_), None) => false,
            };
            if hits {
                return Err(Error::TargetBusy(r.target.instance.map_or(table.to_string(), |i| format!("{table}/{i}"))));
            }
        }
        Ok(())
    }

    fn active_ids(&self, table: &str, except: Option<&InstanceId>) -> Result<Vec<InstanceId>> {
        let mut out = Vec::new();
        for id in self.store.list_instances(table)? {
            if Some(&id) != except && self.store.read_meta(table, &id)?.active {
                out.push(id);
            }
        }
        Ok(out)
    }

    fn with_read<T>(&self, targets: &[LockTarget], f: impl FnOnce() -> Result<T>) -> Result<T> {
        let session = lock::read_session_id();
        let out = targets
            .iter()
            .try_for_each(|t| self.locks.acquire(&session, t, LockMode::Shared).map(drop))
            .and_then(|()| f());
        let released = self.locks.release_all(&session);
        let out = out?;
        released?;
        Ok(out)
    }

    fn load_materialized(&self, table: &str, id: &InstanceId) -> Result<ColumnTable> {
        let not_materialized = || Error::NotMaterialized { table: table.into(), instance: id.to_string() };
        if self.store.read_meta(table, id)?.phase != Phase::Materialized {
            return Err(not_materialized());
        }
        self.store.load_dataframe(table, id)?.ok_or_else(not_materialized)
    }

    fn lineage_node(&self, table: &str, id: &InstanceId, path: &mut Vec<(String, InstanceId)>) -> LineageNode {
        let meta = self.store.read_meta(table, id).ok();
        let mut upstream = Vec::new();
        let key = (table.to_string(), id.clone());
        if let Some(m) = &meta {
            if !path.contains(&key) {
                path.push(key);
                for (pin, dep) in &m.dependency_pins {
                    let dep_table = pin.split('(').next().unwrap_or(pin);
                    upstream.push(self.lineage_node(dep_table, dep, path));
                }
                path.pop();
            }
        }
        LineageNode {
            table: table.into(),
            instance: id.clone(),
            phase: meta.as_ref().map(|m| m.phase),
            fingerprints: meta.map(|m| m.fingerprints).unwrap_or_default(),
            upstream,
        }
    }

    // ----- generation -----

    fn generate_body(&self, txn: &mut Txn<'_>, table: &str, selector: &str) -> Result<()> {
        check_name(table)?;
        let id = self.store.resolve_instance(table, selector)?;
        txn.generating = Some((table.into(), id.clone()));
        txn.save(&[(table.into(), Some(id.clone()))])?;
        txn.lock(LockTarget::instance(table, &id), LockMode::Exclusive)?;
        // Read under the lock, so the same check wins whatever ran before.
        let config = self.store.read_table(table)?;
        if config.deleted_at.is_some() {
            return Err(Error::TableDeleted(table.into()));
        }
        let meta = self.store.read_meta(table, &id)?;
        if meta.phase != Phase::Created {
            return Err(Error::InstanceNotEditable {
                table: table.into(),
                instance: id.to_string(),
                phase: meta.phase.to_string(),
            });
        }
        let (set, hashes) = load_builders(&self.store, &self.types(), table, &id)?;
        for dep in dependency_tables(&set)? {
            check_name(&dep)?;
            txn.lock(LockTarget::table(&dep), LockMode::Shared)?;
        }
        // The previous instance can change until it is locked.
        let mut previous = previous_instance(&self.store, table, &meta)?;
        let mut held = BTreeSet::new();
        while let Some(p) = previous.clone().filter(|p| !held.contains(p)) {
            txn.lock(LockTarget::instance(table, &p), LockMode::Shared)?;
            held.insert(p);
            previous = previous_instance(&self.store, table, &meta)?;
        }
        let pins = pin_dependencies(&self.store, &set)?;
        let plan_inputs = PlanInputs { pins, previous, builder_hashes: hashes };
        let plan = plan_generation(&self.store, &self.executors(), table, &id, set, plan_inputs.clone())?;

        let exclusive = !config.config.allow_concurrent_exec;
        let op = txn.op.clone();
        txn.locked(|| {
            if !exclusive {
                return Ok(());
            }
            let running = self.log.active_ops()?.into_iter().any(|r| {
                r.op_id != op && r.op_type == OpType::Generate && r.target.table == table && r.state >= OpState::Locked
            });
            if running {
                return Err(Error::ConcurrentExecForbidden(table.into()));
            }
            Ok(())
        })?;
        let inputs = GenerateInputs { instance: id, plan: plan_inputs };
        txn.inputs(serde_json::to_value(&inputs).expect("serializable"))?;
        self.execute_generation(txn, &plan)
    }

    /// Resume a generation whose process died, from its logged inputs.
    fn resume(&self, rec: OpRecord) -> Result<()> {
        self.log.bind_process(&rec.op_id, ProcessId::current())?;
        self.register(&rec.op_id);
        let snap = match self.store.load_snapshot(&rec.op_id) {
            Ok(s) => s,
            Err(e) => {
                self.unregister(&rec.op_id);
                return Err(e);
            }
        };
        let txn = Txn::new(self, rec.op_id.clone(), rec.state, snap);
        self.finish(txn, |txn| {
            let inputs: GenerateInputs = rec
                .inputs
                .clone()
                .and_then(|i| serde_json::from_value(i).ok())
                .ok_or_else(|| Error::NotResumable(rec.op_id.clone()))?;
            let table = rec.target.table.as_str();
            txn.generating = Some((table.into(), inputs.instance.clone()));
            let (set, hashes) = load_builders(&self.store, &self.types(), table, &inputs.instance)?;
            if hashes != inputs.plan.builder_hashes {
                return Err(Error::NotResumable(rec.op_id.clone()));
            }
            let plan = plan_generation(&self.store, &self.executors(), table, &inputs.instance, set, inputs.plan)?;
            self.execute_generation(txn, &plan)
        })
    }

    fn execute_generation(&self, txn: &mut Txn<'_>, plan: &GenerationPlan) -> Result<()> {
        txn.executing()?;
        let (table, id) = (plan.table.as_str(), &plan.instance);
        let mut meta = self.store.read_meta(table, id)?;
        if meta.phase != Phase::Executing || meta.generation_op.as_ref() != Some(&txn.op) {
            meta.phase = Phase::Executing;
            meta.execution_started_at = Some(Utc::now());
            meta.generation_op = Some(txn.op.clone());
            self.store.write_meta(&meta)?;
        }
        let executors = self.executors();
        let op = txn.op.clone();
        let stop = || self.stop_request(&op).is_some();
        let ctx = EngineContext { store: &self.store, locks: &self.locks, op: &op, executors: &executors, stop: &stop };
        let out = run_generation(&ctx, plan)?;
        self.commit_generation(txn, plan, out)
    }

    /// Materialize the instance and, on single-active tables, deactivate the
    /// instances it supersedes while holding exclusive locks on all of them.
    fn commit_generation(&self, txn: &mut Txn<'_>, plan: &GenerationPlan, out: GenerationOutput) -> Result<()> {
        let (table, id) = (plan.table.as_str(), &plan.instance);
        let config = self.store.read_table(table)?.config;
        let mut superseded = Vec::new();
        if !config.multi_active {
            let mut locked = BTreeSet::new();
            loop {
                let active = self.active_ids(table, Some(id))?;
                let fresh: Vec<InstanceId> = active.iter().filter(|a| !locked.contains(*a)).cloned().collect();
                if fresh.is_empty() {
                    superseded = active;
                    break;
                }
                for o in fresh {
                    txn.lock(LockTarget::instance(table, &o), LockMode::Exclusive)?;
                    txn.extend(table, Some(&o))?;
                    locked.insert(o);
                }
            }
        }

        let executed_at = Utc::now();
        let mut meta = self.store.read_meta(table, id)?;
        meta.phase = Phase::Materialized;
        meta.active = true;
        meta.executed_at = Some(executed_at);
        meta.dependency_pins = plan.pinned_deps.clone();
        meta.builder_hashes = plan.builder_hashes.clone();
        meta.fingerprints = plan.fingerprints.clone();
        meta.column_owners = plan.builders.ownership();
        meta.generator_digest = Some(out.generator_digest);
        meta.cell_digests = out.cell_digests;
        meta.progress = None;
        // The new instance becomes active before the old ones stop being
        // active, so a table never shows zero active instances.
        self.store.write_meta(&meta)?;
        for o in &superseded {
            let mut m = self.store.read_meta(table, o)?;
            m.active = false;
            self.store.write_meta(&m)?;
        }

        let referenced: HashSet<&str> = out
            .data
            .columns()
            .iter()
            .filter(|c| c.dtype == Dtype::Artifact)
            .flat_map(|c| c.cells.iter())
            .filter_map(|cell| match cell {
                Cell::Artifact(p) => Some(p.as_str()),
                _ => None,
            })
            .collect();
        for f in self.store.artifact_files(table, id)? {
            if !referenced.contains(f.as_str()) {
                self.store.remove_artifact(table, id, &f)?;
            }
        }

        self.store.append_lineage(&LineageRecord {
            table: table.into(),
            instance: id.clone(),
            op_id: txn.op.clone(),
            executed_at,
            pins: plan.pinned_deps.clone(),
            fingerprints: plan.fingerprints.clone(),
        })
    }
}
