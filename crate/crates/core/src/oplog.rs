//! Write-ahead operation log.
//!
//! `active_ops.log` holds one JSON event per line (begin, bind, state,
//! inputs); an operation's record is the fold of its events.
//! `completed_ops.log` holds one terminal record per finished operation.
//! An operation is active while it has a begin event and no terminal record.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::crash::{self, site};
use crate::durable;
use crate::error::{Error, IoContext, Result};
use crate::ids::OpId;
use crate::process::ProcessId;
use crate::store::{ACTIVE_LOG, COMPLETED_LOG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    CreateTable,
    CreateInstance,
    CopyBuilders,
    Generate,
    DeleteInstance,
    DeleteTable,
}

impl OpType {
    pub fn as_str(self) -> &'static str {
        match self {
            OpType::CreateTable => "create_table",
            OpType::CreateInstance => "create_instance",
            OpType::CopyBuilders => "copy_builders",
            OpType::Generate => "generate",
            OpType::DeleteInstance => "delete_instance",
            OpType::DeleteTable => "delete_table",
        }
    }
}

/// Lifecycle stages before termination, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpState {
    ActiveLogged,
    StateSaved,
    Locked,
    InputsLogged,
    Executing,
}

impl OpState {
    pub fn as_str(self) -> &'static str {
        match self {
            OpState::ActiveLogged => "ACTIVE_LOGGED",
            OpState::StateSaved => "STATE_SAVED",
            OpState::Locked => "LOCKED",
            OpState::InputsLogged => "INPUTS_LOGGED",
            OpState::Executing => "EXECUTING",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Complete,
    RolledBack,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Complete => "COMPLETE",
            Outcome::RolledBack => "ROLLED_BACK",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

impl From<&Error> for ErrorInfo {
    fn from(e: &Error) -> Self {
        ErrorInfo { code: e.code().into(), message: e.to_string() }
    }
}

/// What an operation acts on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTarget {
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_id: OpId,
    pub op_type: OpType,
    pub target: OpTarget,
    pub user: String,
    pub started_at: DateTime<Utc>,
    /// Arguments as given by the caller.
    pub args: Json,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessId>,
    pub state: OpState,
    pub history: Vec<(OpState, DateTime<Utc>)>,
    /// Resolved inputs, present from INPUTS_LOGGED on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Json>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedRecord {
    #[serde(flatten)]
    pub record: OpRecord,
    pub outcome: Outcome,
    pub finished_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Begin {
        op_id: OpId,
        op_type: OpType,
        target: OpTarget,
        user: String,
        at: DateTime<Utc>,
        args: Json,
        process: ProcessId,
    },
    Bind {
        op_id: OpId,
        process: ProcessId,
    },
    State {
        op_id: OpId,
        state: OpState,
        at: DateTime<Utc>,
    },
    Inputs {
        op_id: OpId,
        inputs: Json,
        at: DateTime<Utc>,
    },
}

impl Event {
    fn op_id(&self) -> &OpId {
        match self {
            Event::Begin { op_id, .. }
            | Event::Bind { op_id, .. }
            | Event::State { op_id, .. }
            | Event::Inputs { op_id, .. } => op_id,
        }
    }
}

/// Either side of an operation's life.
#[derive(Clone, Debug, PartialEq)]
pub enum OpStatus {
    Active(OpRecord),
    Finished(CompletedRecord),
}

impl OpStatus {
    pub fn record(&self) -> &OpRecord {
        match self {
            OpStatus::Active(r) => r,
            OpStatus::Finished(c) => &c.record,
        }
    }
}

/// Ids read from `completed_ops.log` so far, and the byte offset reached.
#[derive(Default)]
struct CompletedCache {
    offset: u64,
    ids: HashSet<OpId>,
}

pub struct OpLog {
    active: PathBuf,
    completed: PathBuf,
    cache: Mutex<CompletedCache>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    // Lines torn by a crash mid-append do not parse and are skipped.
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

fn fold(events: Vec<Event>) -> BTreeMap<OpId, OpRecord> {
    let mut out: BTreeMap<OpId, OpRecord> = BTreeMap::new();
    for ev in events {
        match ev {
            Event::Begin { op_id, op_type, target, user, at, args, process } => {
                out.insert(
                    op_id.clone(),
                    OpRecord {
                        op_id,
                        op_type,
                        target,
                        user,
                        started_at: at,
                        args,
                        process: Some(process),
                        state: OpState::ActiveLogged,
                        history: vec![(OpState::ActiveLogged, at)],
                        inputs: None,
                    },
                );
            }
            Event::Bind { op_id, process } => {
                if let Some(r) = out.get_mut(&op_id) {
                    r.process = Some(process);
                }
            }
            Event::State { op_id, state, at } => {
                if let Some(r) = out.get_mut(&op_id) {
                    r.state = state;
                    r.history.push((state, at));
                }
            }
            Event::Inputs { op_id, inputs, at } => {
                if let Some(r) = out.get_mut(&op_id) {
                    r.inputs = Some(inputs);
                    r.state = OpState::InputsLogged;
                    r.history.push((OpState::InputsLogged, at));
                }
            }
        }
    }
    out
}

impl OpLog {
    pub fn new(metadata_dir: &Path) -> Self {
        Self {
            active: metadata_dir.join(ACTIVE_LOG),
            completed: metadata_dir.join(COMPLETED_LOG),
            cache: Mutex::new(CompletedCache::default()),
        }
    }

    fn append(&self, site: crash::Site, path: &Path, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("serializable");
        durable::append_line(site, path, &line).at(path)
    }

    /// Log a new operation in ACTIVE_LOGGED, bound to the calling process.
    pub fn begin(&self, op_type: OpType, target: OpTarget, user: &str, args: Json) -> Result<OpId> {
        let op_id = OpId::generate();
        crash::point(site::OPLOG_BEGIN_BEFORE);
        let ev = Event::Begin {
            op_id: op_id.clone(),
            op_type,
            target,
            user: user.into(),
            at: Utc::now(),
            args,
            process: ProcessId::current(),
        };
        self.append(site::OPLOG_BEGIN, &self.active, &ev)?;
        Ok(op_id)
    }

    /// Record the process now responsible for `op` (used when resuming).
    /// Fails with `AlreadyRunning` while the currently bound process is alive.
    pub fn bind_process(&self, op: &OpId, process: ProcessId) -> Result<()> {
        let rec = self.require_active(op)?;
        if let Some(p) = rec.process.filter(|p| *p != process && p.is_alive()) {
            return Err(Error::AlreadyRunning { op: op.clone(), pid: p.pid });
        }
        self.append(site::OPLOG_BIND, &self.active, &Event::Bind { op_id: op.clone(), process })
    }

    fn require_active(&self, op: &OpId) -> Result<OpRecord> {
        match self.get(op)? {
            OpStatus::Active(r) => Ok(r),
            OpStatus::Finished(_) => Err(Error::NoSuchOp(op.to_string())),
        }
    }

    /// Move `op` forward to `state`.
    pub fn advance(&self, op: &OpId, state: OpState) -> Result<()> {
        let rec = self.require_active(op)?;
        if state <= rec.state || state == OpState::InputsLogged {
            return Err(Error::WrongState {
                op: op.clone(),
                state: rec.state.as_str().into(),
                expected: format!("a state before {}", state.as_str()),
            });
        }
        self.append(site::OPLOG_STATE, &self.active, &Event::State { op_id: op.clone(), state, at: Utc::now() })
    }

    /// Persist the resolved inputs of a LOCKED operation, moving it to INPUTS_LOGGED.
    pub fn log_inputs(&self, op: &OpId, inputs: Json) -> Result<()> {
        let rec = self.require_active(op)?;
        if rec.state != OpState::Locked {
            return Err(Error::WrongState {
                op: op.clone(),
                state: rec.state.as_str().into(),
                expected: OpState::Locked.as_str().into(),
            });
        }
        self.append(site::OPLOG_INPUTS, &self.active, &Event::Inputs { op_id: op.clone(), inputs, at: Utc::now() })
    }

    fn finish(&self, op: &OpId, outcome: Outcome, error: Option<ErrorInfo>) -> Result<()> {
        let record = self.require_active(op)?;
        let done = CompletedRecord { record, outcome, finished_at: Utc::now(), error };
        self.append(site::OPLOG_COMPLETE, &self.completed, &done)
    }

    pub fn mark_complete(&self, op: &OpId) -> Result<()> {
        self.finish(op, Outcome::Complete, None)
    }

    pub fn mark_failed(&self, op: &OpId, error: Option<ErrorInfo>) -> Result<()> {
        self.finish(op, Outcome::RolledBack, error)
    }

    fn active_events(&self) -> Result<Vec<Event>> {
        read_lines(&self.active)
    }

    /// Non-terminated operations in begin order.
    pub fn active_ops(&self) -> Result<Vec<OpRecord>> {
        let events = self.active_events()?;
        let mut order: Vec<OpId> = Vec::new();
        for ev in &events {
            if matches!(ev, Event::Begin { .. }) {
                order.push(ev.op_id().clone());
            }
        }
        let mut recs = fold(events);
        let done = self.completed_ids()?;
        Ok(order.into_iter().filter(|id| !done.contains(id)).filter_map(|id| recs.remove(&id)).collect())
    }

    pub fn completed_ops(&self) -> Result<Vec<CompletedRecord>> {
        read_lines(&self.completed)
    }

    pub fn get(&self, op: &OpId) -> Result<OpStatus> {
        if self.is_completed(op)? {
            if let Some(c) = self.completed_ops()?.into_iter().rev().find(|c| &c.record.op_id == op) {
                return Ok(OpStatus::Finished(c));
            }
        }
        let events: Vec<Event> = self.active_events()?.into_iter().filter(|e| e.op_id() == op).collect();
        fold(events).remove(op).map(OpStatus::Active).ok_or_else(|| Error::NoSuchOp(op.to_string()))
    }

    /// True once `op` has a terminal record.
    pub fn is_completed(&self, op: &OpId) -> Result<bool> {
        self.refresh_cache()?;
        Ok(self.cache.lock().unwrap_or_else(|e| e.into_inner()).ids.contains(op))
    }

    fn completed_ids(&self) -> Result<HashSet<OpId>> {
        self.refresh_cache()?;
        Ok(self.cache.lock().unwrap_or_else(|e| e.into_inner()).ids.clone())
    }

    /// Read whatever has been appended to the completed log since the last call.
    fn refresh_cache(&self) -> Result<()> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = match fs::File::open(&self.completed) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&self.completed, e)),
        };
        let len = f.metadata().at(&self.completed)?.len();
        if len < cache.offset {
            *cache = CompletedCache::default();
        }
        if len == cache.offset {
            return Ok(());
        }
        f.seek(SeekFrom::Start(cache.offset)).at(&self.completed)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).at(&self.completed)?;
        // Only consume complete lines.
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else { return Ok(()) };
        #[derive(Deserialize)]
        struct IdOnly {
            op_id: OpId,
        }
        for line in buf[..end].split(|&b| b == b'\n') {
            if let Ok(r) = serde_json::from_slice::<IdOnly>(line) {
                cache.ids.insert(r.op_id);
            }
        }
        cache.offset += end as u64 + 1;
        Ok(())
    }

    /// Rewrite the active log keeping only events of non-terminated operations.
    pub fn compact(&self) -> Result<usize> {
        let events = self.active_events()?;
        let done = self.completed_ids()?;
        let before = events.len();
        let kept: Vec<&Event> = events.iter().filter(|e| !done.contains(e.op_id())).collect();
        if kept.len() == before {
            return Ok(0);
        }
        let mut text = String::new();
        for e in &kept {
            text.push_str(&serde_json::to_string(e).expect("serializable"));
            text.push('\n');
        }
        durable::write_atomic(site::RESTART_GC, &self.active, text.as_bytes()).at(&self.active)?;
        Ok(before - kept.len())
    }
}
