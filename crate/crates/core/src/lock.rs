//! Hierarchical shared/exclusive locks over vault → table → instance.
//!
//! Grants are durable marker files, `metadata/locks/<node_key>/<op_id>.<mode>`,
//! so locks held by an interrupted operation survive the process. A lock on
//! a node implies the same mode on every node below it; two requests
//! conflict when their nodes overlap (one is an ancestor of, or equal to,
//! the other), they belong to different operations, and either is exclusive.
//!
//! All registry reads and writes happen inside one critical section: an
//! in-process mutex plus an advisory file lock on `locks/.registry.lock`
//! for other processes. Waiters queue FIFO per overlapping node and run
//! wait-for cycle detection; the youngest operation in a cycle aborts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::crash::site;
use crate::durable;
use crate::error::{Error, IoContext, Result};
use crate::ids::{InstanceId, OpId};
use crate::process::ProcessId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const POLL: Duration = Duration::from_millis(5);
const WAITS_DIR: &str = ".waits";
const REGISTRY_LOCK: &str = ".registry.lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl LockMode {
    fn as_str(self) -> &'static str {
        match self {
            LockMode::Shared => "shared",
            LockMode::Exclusive => "exclusive",
        }
    }

    fn conflicts(self, other: LockMode) -> bool {
        self == LockMode::Exclusive || other == LockMode::Exclusive
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockLevel {
    Vault,
    Table,
    Instance,
}

/// A node in the lock hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LockTarget {
    Vault,
    Table(String),
    Instance(String, InstanceId),
}

impl LockTarget {
    pub fn table(name: &str) -> Self {
        LockTarget::Table(name.to_string())
    }

    pub fn instance(table: &str, id: &InstanceId) -> Self {
        LockTarget::Instance(table.to_string(), id.clone())
    }

    pub fn level(&self) -> LockLevel {
        match self {
            LockTarget::Vault => LockLevel::Vault,
            LockTarget::Table(_) => LockLevel::Table,
            LockTarget::Instance(..) => LockLevel::Instance,
        }
    }

    /// Directory name under `metadata/locks/`.
    pub fn node_key(&self) -> String {
        match self {
            LockTarget::Vault => "vault".into(),
            LockTarget::Table(t) => format!("table={t}"),
            LockTarget::Instance(t, i) => format!("table={t},instance={i}"),
        }
    }

    pub fn from_node_key(key: &str) -> Option<Self> {
        if key == "vault" {
            return Some(LockTarget::Vault);
        }
        let rest = key.strip_prefix("table=")?;
        match rest.split_once(",instance=") {
            Some((t, i)) => Some(LockTarget::Instance(t.into(), i.parse().ok()?)),
            None => Some(LockTarget::Table(rest.into())),
        }
    }

    /// True if `self` is `other` or one of its ancestors.
    pub fn covers(&self, other: &LockTarget) -> bool {
        match (self, other) {
            (LockTarget::Vault, _) => true,
            (LockTarget::Table(a), LockTarget::Table(b)) => a == b,
            (LockTarget::Table(a), LockTarget::Instance(b, _)) => a == b,
            (LockTarget::Instance(a, i), LockTarget::Instance(b, j)) => a == b && i == j,
            _ => false,
        }
    }

    pub fn overlaps(&self, other: &LockTarget) -> bool {
        self.covers(other) || other.covers(self)
    }
}

impl fmt::Display for LockTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.node_key())
    }
}

/// Evidence that `op_id` holds `mode` on `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockToken {
    pub op_id: OpId,
    pub target: LockTarget,
    pub mode: LockMode,
    pub acquired_at: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WaitRecord {
    target: LockTarget,
    mode: LockMode,
    since_nanos: u128,
    process: ProcessId,
}

/// Predicate telling the lock manager that an operation can no longer use
/// its locks (it finished, or its session died), so its tokens may be reclaimed.
pub type OrphanCheck = Arc<dyn Fn(&OpId) -> bool + Send + Sync>;

struct Local {
    released: HashSet<OpId>,
}

pub struct LockManager {
    dir: PathBuf,
    timeout: Duration,
    local: Mutex<Local>,
    changed: Condvar,
    orphan_check: Mutex<Option<OrphanCheck>>,
}

struct Section<'a> {
    local: MutexGuard<'a, Local>,
    _file: File,
}

impl LockManager {
    pub fn new(locks_dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: locks_dir.into(),
            timeout: DEFAULT_TIMEOUT,
            local: Mutex::new(Local { released: HashSet::new() }),
            changed: Condvar::new(),
            orphan_check: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_orphan_check(&self, check: OrphanCheck) {
        *self.orphan_check.lock().unwrap_or_else(|e| e.into_inner()) = Some(check);
    }

    fn section(&self) -> Result<Section<'_>> {
        let local = self.local.lock().unwrap_or_else(|e| e.into_inner());
        durable::ensure_dir(&self.dir).at(&self.dir)?;
        let path = self.dir.join(REGISTRY_LOCK);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).at(&path)?;
        file.lock().at(&path)?;
        Ok(Section { local, _file: file })
    }

    /// Run `f` inside the registry critical section, serialized against every
    /// lock operation in every process using this vault.
    pub fn critical<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let _section = self.section()?;
        f()
    }

    fn token_path(&self, target: &LockTarget, op: &OpId, mode: LockMode) -> PathBuf {
        self.dir.join(target.node_key()).join(format!("{op}.{mode}"))
    }

    fn wait_path(&self, op: &OpId) -> PathBuf {
        self.dir.join(WAITS_DIR).join(op.as_str())
    }

    fn scan_tokens(&self) -> Result<Vec<LockToken>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        for node in entries {
            let node = node.at(&self.dir)?;
            let name = node.file_name().to_string_lossy().to_string();
            if name.starts_with('.') || !node.path().is_dir() {
                continue;
            }
            let Some(target) = LockTarget::from_node_key(&name) else { continue };
            for tok in fs::read_dir(node.path()).at(node.path())? {
                let tok = tok.at(node.path())?;
                let fname = tok.file_name().to_string_lossy().to_string();
                let Some((op, mode)) = fname.rsplit_once('.') else { continue };
                let mode = match mode {
                    "shared" => LockMode::Shared,
                    "exclusive" => LockMode::Exclusive,
                    _ => continue,
                };
                let Ok(op_id) = op.parse::<OpId>() else { continue };
                let acquired_at =
                    tok.metadata().and_then(|m| m.modified()).map(DateTime::<Utc>::from).unwrap_or_else(|_| Utc::now());
                out.push(LockToken { op_id, target: target.clone(), mode, acquired_at });
            }
        }
        out.sort_by(|a, b| (&a.target, &a.op_id, a.mode).cmp(&(&b.target, &b.op_id, b.mode)));
        Ok(out)
    }

    fn scan_waits(&self) -> Result<BTreeMap<OpId, WaitRecord>> {
        let dir = self.dir.join(WAITS_DIR);
        let mut out = BTreeMap::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        for e in entries {
            let e = e.at(&dir)?;
            let Ok(op) = e.file_name().to_string_lossy().parse::<OpId>() else { continue };
            let Ok(text) = fs::read_to_string(e.path()) else { continue };
            if let Ok(rec) = serde_json::from_str::<WaitRecord>(&text) {
                if rec.process.is_alive() {
                    out.insert(op, rec);
                }
            }
        }
        Ok(out)
    }

    fn is_orphan(&self, op: &OpId) -> bool {
        if op.is_read_session() {
            if let Some(p) = read_session_process(op) {
                if !p.is_alive() {
                    return true;
                }
            }
        }
        let check = self.orphan_check.lock().unwrap_or_else(|e| e.into_inner()).clone();
        check.map(|c| c(op)).unwrap_or(false)
    }

    /// Acquire `mode` on `target` for `op`, blocking until compatible.
    pub fn acquire(&self, op: &OpId, target: &LockTarget, mode: LockMode) -> Result<LockToken> {
        self.acquire_within(op, target, mode, self.timeout)
    }

    /// Non-blocking variant: fails with `Timeout` immediately on conflict.
    pub fn try_acquire(&self, op: &OpId, target: &LockTarget, mode: LockMode) -> Result<LockToken> {
        self.acquire_within(op, target, mode, Duration::ZERO)
    }

    pub fn acquire_within(
        &self,
        op: &OpId,
        target: &LockTarget,
        mode: LockMode,
        timeout: Duration,
    ) -> Result<LockToken> {
        let start = Instant::now();
        let since_nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let mut waiting = false;
        loop {
            let section = self.section()?;
            if section.local.released.contains(op) {
                return Err(Error::ShrinkPhaseViolation(op.clone()));
            }
            let tokens = self.reclaim_orphans(op, target, mode, self.scan_tokens()?)?;
            if let Some(t) = tokens.iter().find(|t| &t.op_id == op && &t.target == target && t.mode >= mode) {
                let t = t.clone();
                if waiting {
                    durable::remove_file(site::LOCK_WAIT, &self.wait_path(op)).at(&self.dir)?;
                }
                return Ok(t);
            }
            let waits = self.scan_waits()?;
            let blockers = blockers_of(op, target, mode, since_nanos, &tokens, &waits);
            if blockers.is_empty() {
                let node_dir = self.dir.join(target.node_key());
                durable::ensure_dir(&node_dir).at(&node_dir)?;
                let path = self.token_path(target, op, mode);
                match durable::write_new(site::LOCK_GRANTED, &path, b"") {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
                    Err(e) => return Err(Error::io(&path, e)),
                }
                if mode == LockMode::Exclusive {
                    durable::remove_file(site::LOCK_RELEASED, &self.token_path(target, op, LockMode::Shared))
                        .at(&path)?;
                }
                if waiting {
                    durable::remove_file(site::LOCK_WAIT, &self.wait_path(op)).at(&path)?;
                }
                drop(section);
                self.changed.notify_all();
                return Ok(LockToken { op_id: op.clone(), target: target.clone(), mode, acquired_at: Utc::now() });
            }
            if !waiting && !timeout.is_zero() {
                let dir = self.dir.join(WAITS_DIR);
                durable::ensure_dir(&dir).at(&dir)?;
                let rec = WaitRecord { target: target.clone(), mode, since_nanos, process: ProcessId::current() };
                let path = self.wait_path(op);
                durable::write_atomic(site::LOCK_WAIT, &path, serde_json::to_string(&rec).unwrap().as_bytes())
                    .at(&path)?;
                waiting = true;
            }
            if waiting {
                let mut waits = waits;
                waits.insert(
                    op.clone(),
                    WaitRecord { target: target.clone(), mode, since_nanos, process: ProcessId::current() },
                );
                if let Some(cycle) = find_cycle(op, &tokens, &waits) {
                    let victim = cycle.iter().max_by(|a, b| a.age_key().cmp(b.age_key())).unwrap().clone();
                    if &victim == op {
                        durable::remove_file(site::LOCK_WAIT, &self.wait_path(op)).at(&self.dir)?;
                        let cycle = cycle.iter().map(|o| o.as_str()).collect::<Vec<_>>().join(" -> ");
                        return Err(Error::Deadlock { victim, cycle });
                    }
                }
            }
            if start.elapsed() >= timeout {
                if waiting {
                    durable::remove_file(site::LOCK_WAIT, &self.wait_path(op)).at(&self.dir)?;
                }
                return Err(Error::Timeout { op: op.clone(), target: target.to_string(), mode: mode.to_string() });
            }
            // Other processes must be able to enter while this one waits.
            let Section { local, _file } = section;
            drop(_file);
            let (guard, _) = self.changed.wait_timeout(local, POLL).unwrap_or_else(|e| e.into_inner());
            drop(guard);
        }
    }

    /// Drop tokens of orphaned operations among those conflicting with the request.
    fn reclaim_orphans(
        &self,
        op: &OpId,
        target: &LockTarget,
        mode: LockMode,
        tokens: Vec<LockToken>,
    ) -> Result<Vec<LockToken>> {
        let mut orphans: HashSet<OpId> = HashSet::new();
        let mut checked: HashSet<&OpId> = HashSet::new();
        for t in &tokens {
            if &t.op_id != op
                && t.target.overlaps(target)
                && t.mode.conflicts(mode)
                && checked.insert(&t.op_id)
                && self.is_orphan(&t.op_id)
            {
                orphans.insert(t.op_id.clone());
            }
        }
        if orphans.is_empty() {
            return Ok(tokens);
        }
        let mut kept = Vec::with_capacity(tokens.len());
        for t in tokens {
            if orphans.contains(&t.op_id) {
                durable::remove_file(site::LOCK_RELEASED, &self.token_path(&t.target, &t.op_id, t.mode))
                    .at(&self.dir)?;
            } else {
                kept.push(t);
            }
        }
        Ok(kept)
    }

    /// Release every token of `op`; afterwards `op` may not acquire again.
    pub fn release_all(&self, op: &OpId) -> Result<()> {
        let mut section = self.section()?;
        for t in self.scan_tokens()?.into_iter().filter(|t| &t.op_id == op) {
            let path = self.token_path(&t.target, op, t.mode);
            durable::remove_file(site::LOCK_RELEASED, &path).at(&path)?;
        }
        durable::remove_file(site::LOCK_WAIT, &self.wait_path(op)).at(&self.dir)?;
        section.local.released.insert(op.clone());
        drop(section);
        self.changed.notify_all();
        Ok(())
    }

    /// Durable registry contents for `op`.
    pub fn held_locks(&self, op: &OpId) -> Result<Vec<LockToken>> {
        let _section = self.section()?;
        Ok(self.scan_tokens()?.into_iter().filter(|t| &t.op_id == op).collect())
    }

    pub fn all_tokens(&self) -> Result<Vec<LockToken>> {
        let _section = self.section()?;
        self.scan_tokens()
    }

    /// Whether `op` holds a lock of at least `mode` on `target` or an ancestor.
    pub fn covers(&self, op: &OpId, target: &LockTarget, mode: LockMode) -> Result<bool> {
        Ok(self.held_locks(op)?.iter().any(|t| t.mode >= mode && t.target.covers(target)))
    }

    pub fn require(&self, op: &OpId, target: &LockTarget, mode: LockMode) -> Result<()> {
        if self.covers(op, target, mode)? {
            Ok(())
        } else {
            Err(Error::LockNotHeld { op: op.clone(), target: target.to_string() })
        }
    }

    /// Drop tokens and wait records of every operation for which `keep` returns false.
    pub fn clear_where(&self, keep: impl Fn(&OpId) -> bool) -> Result<Vec<OpId>> {
        let section = self.section()?;
        let mut cleared = Vec::new();
        for t in self.scan_tokens()? {
            if !keep(&t.op_id) {
                let path = self.token_path(&t.target, &t.op_id, t.mode);
                durable::remove_file(site::LOCK_RELEASED, &path).at(&path)?;
                if !cleared.contains(&t.op_id) {
                    cleared.push(t.op_id);
                }
            }
        }
        let waits = self.dir.join(WAITS_DIR);
        if let Ok(entries) = fs::read_dir(&waits) {
            for e in entries {
                let path = e.at(&waits)?.path();
                let op = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<OpId>().ok());
                if op.is_some_and(|op| !keep(&op)) {
                    durable::remove_file(site::LOCK_WAIT, &path).at(&path)?;
                }
            }
        }
        drop(section);
        self.changed.notify_all();
        Ok(cleared)
    }

    /// Registry invariant: no exclusive token shares an effective node with
    /// a token of another operation.
    pub fn check_safety(tokens: &[LockToken]) -> std::result::Result<(), String> {
        for (i, a) in tokens.iter().enumerate() {
            for b in &tokens[i + 1..] {
                if a.op_id != b.op_id && a.target.overlaps(&b.target) && a.mode.conflicts(b.mode) {
                    return Err(format!(
                        "{} {} on {} coexists with {} {} on {}",
                        a.op_id, a.mode, a.target, b.op_id, b.mode, b.target
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Read-session ids embed the owning process: `rd-<ts>-<hex>-p<pid>s<start>`.
pub(crate) fn read_session_id() -> OpId {
    let p = ProcessId::current();
    format!("{}-p{}s{}", OpId::read_session(), p.pid, p.start).parse().expect("valid op id")
}

/// True for a read session whose process is still running.
pub fn is_live_read_session(op: &OpId) -> bool {
    op.is_read_session() && read_session_process(op).is_some_and(|p| p.is_alive())
}

fn read_session_process(op: &OpId) -> Option<ProcessId> {
    let tail = op.as_str().rsplit('-').next()?.strip_prefix('p')?;
    let (pid, start) = tail.split_once('s')?;
    Some(ProcessId { pid: pid.parse().ok()?, start: start.parse().ok()? })
}

/// Operations `op` must wait for: conflicting holders plus conflicting
/// waiters queued earlier, except waiters that are themselves blocked by a
/// lock `op` already holds (queueing behind them could never succeed).
fn blockers_of(
    op: &OpId,
    target: &LockTarget,
    mode: LockMode,
    since: u128,
    tokens: &[LockToken],
    waits: &BTreeMap<OpId, WaitRecord>,
) -> Vec<OpId> {
    let mut out: Vec<OpId> = tokens
        .iter()
        .filter(|t| &t.op_id != op && t.target.overlaps(target) && t.mode.conflicts(mode))
        .map(|t| t.op_id.clone())
        .collect();
    for (other, w) in waits {
        if other != op
            && (w.since_nanos, other) < (since, op)
            && w.target.overlaps(target)
            && w.mode.conflicts(mode)
            && !tokens.iter().any(|t| &t.op_id == op && t.target.overlaps(&w.target) && t.mode.conflicts(w.mode))
        {
            out.push(other.clone());
        }
    }
    out.sort();
    out.dedup();
    out
}

/// A wait-for cycle through `me`, if any.
fn find_cycle(me: &OpId, tokens: &[LockToken], waits: &BTreeMap<OpId, WaitRecord>) -> Option<Vec<OpId>> {
    let edges = |op: &OpId| -> Vec<OpId> {
        match waits.get(op) {
            Some(w) => blockers_of(op, &w.target, w.mode, w.since_nanos, tokens, waits),
            None => Vec::new(),
        }
    };
    let mut path = vec![me.clone()];
    let mut visited = HashSet::new();
    fn dfs(
        node: &OpId,
        me: &OpId,
        edges: &dyn Fn(&OpId) -> Vec<OpId>,
        path: &mut Vec<OpId>,
        visited: &mut HashSet<OpId>,
    ) -> bool {
        for next in edges(node) {
            if &next == me {
                return true;
            }
            if visited.insert(next.clone()) {
                path.push(next.clone());
                if dfs(&next, me, edges, path, visited) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    if dfs(me, me, &edges, &mut path, &mut visited) {
        Some(path)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use std::sync::mpsc;
    use std::thread;

    fn mgr(dir: &Path) -> LockManager {
        LockManager::new(dir.join("locks")).with_timeout(Duration::from_millis(200))
    }

    fn inst(t: &str, n: u32) -> LockTarget {
        let id = InstanceId::new(DateTime::from_timestamp(1_700_000_000 + n as i64, 0).unwrap(), None).unwrap();
        LockTarget::instance(t, &id)
    }

    #[test]
    fn node_keys_round_trip() {
        for t in [LockTarget::Vault, LockTarget::table("docs"), inst("docs", 3)] {
            assert_eq!(LockTarget::from_node_key(&t.node_key()), Some(t));
        }
    }

    #[test]
    fn shared_holds_are_compatible() {
        let d = tempfile::tempdir().unwrap();
        let m = mgr(d.path());
        let (a, b) = (OpId::generate(), OpId::generate());
        m.acquire(&a, &inst("t", 1), LockMode::Shared).unwrap();
        m.acquire(&b, &inst("t", 1), LockMode::Shared).unwrap();
        assert_eq!(m.held_locks(&a).unwrap().len(), 1);
        assert_eq!(m.held_locks(&b).unwrap().len(), 1);
    }

    #[test]
    fn table_exclusive_blocks_instance_shared() {
        let d = tempfile::tempdir().unwrap();
        let m = mgr(d.path());
        let (a, b) = (OpId::generate(), OpId::generate());
        m.acquire(&a, &LockTarget::table("t"), LockMode::Exclusive).unwrap();
        let err = m.acquire(&b, &inst("t", 1), LockMode::Shared).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }), "{err}");
        m.acquire(&b, &inst("u", 1), LockMode::Exclusive).unwrap();
    }

    #[test]
    fn reacquire_is_idempotent_and_upgrade_works_for_sole_holder() {
        let d = tempfile::tempdir().unwrap();
        let m = mgr(d.path());
        let a = OpId::generate();
        m.acquire(&a, &LockTarget::table("t"), LockMode::Shared).unwrap();
        m.acquire(&a, &LockTarget::table("t"), LockMode::Shared).unwrap();
        m.acquire(&a, &LockTarget::table("t"), LockMode::Exclusive).unwrap();
        let held = m.held_locks(&a).unwrap();
        assert_eq!(held.len(), 1);
        assert_eq!(held[0].mode, LockMode::Exclusive);
        m.acquire(&a, &LockTarget::table("t"), LockMode::Shared).unwrap();
        assert_eq!(m.held_locks(&a).unwrap().len(), 1);
    }

    #[test]
    fn release_then_acquire_violates_two_phase() {
        let d = tempfile::tempdir().unwrap();
        let m = mgr(d.path());
        let a = OpId::generate();
        m.release_all(&a).unwrap();
        m.release_all(&a).unwrap();
        assert!(matches!(
            m.acquire(&a, &LockTarget::table("t"), LockMode::Shared),
            Err(Error::ShrinkPhaseViolation(_))
        ));
    }

    #[test]
    fn locks_survive_reopen() {
        let d = tempfile::tempdir().unwrap();
        let a = OpId::generate();
        {
            let m = mgr(d.path());
            m.acquire(&a, &LockTarget::table("t"), LockMode::Exclusive).unwrap();
            m.acquire(&a, &inst("u", 1), LockMode::Shared).unwrap();
        }
        let m = mgr(d.path());
        assert_eq!(m.held_locks(&a).unwrap().len(), 2);
        assert!(m.held_locks(&OpId::generate()).unwrap().is_empty());
        let err = m.acquire(&OpId::generate(), &inst("t", 9), LockMode::Shared).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }));
    }

    #[test]
    fn waiter_proceeds_after_release() {
        let d = tempfile::tempdir().unwrap();
        let m = Arc::new(LockManager::new(d.path().join("locks")));
        let (a, b) = (OpId::generate(), OpId::generate());
        m.acquire(&a, &LockTarget::table("t"), LockMode::Exclusive).unwrap();
        let (tx, rx) = mpsc::channel();
        let m2 = m.clone();
        let h = thread::spawn(move || {
            let r = m2.acquire(&b, &inst("t", 1), LockMode::Exclusive);
            tx.send(()).unwrap();
            r
        });
        assert!(rx.recv_timeout(Duration::from_millis(100)).is_err());
        m.release_all(&a).unwrap();
        h.join().unwrap().unwrap();
    }

    #[test]
    fn deadlock_aborts_youngest() {
        let d = tempfile::tempdir().unwrap();
        let m = Arc::new(LockManager::new(d.path().join("locks")));
        let a = OpId::generate();
        thread::sleep(Duration::from_millis(2));
        let b = OpId::generate();
        m.acquire(&a, &LockTarget::table("t1"), LockMode::Exclusive).unwrap();
        m.acquire(&b, &LockTarget::table("t2"), LockMode::Exclusive).unwrap();
        let (m1, a1) = (m.clone(), a.clone());
        let ha = thread::spawn(move || m1.acquire(&a1, &LockTarget::table("t2"), LockMode::Exclusive));
        thread::sleep(Duration::from_millis(20));
        let (m2, b2) = (m.clone(), b.clone());
        let hb = thread::spawn(move || {
            let r = m2.acquire(&b2, &LockTarget::table("t1"), LockMode::Exclusive);
            if r.is_err() {
                m2.release_all(&b2).unwrap();
            }
            r
        });
        let rb = hb.join().unwrap();
        let ra = ha.join().unwrap();
        assert!(matches!(rb, Err(Error::Deadlock { ref victim, .. }) if victim == &b), "{rb:?}");
        assert!(ra.is_ok());
    }

    #[test]
    fn fifo_queue_prevents_writer_starvation() {
        let d = tempfile::tempdir().unwrap();
        let m = Arc::new(LockManager::new(d.path().join("locks")));
        let (r1, w, r2) = (OpId::generate(), OpId::generate(), OpId::generate());
        m.acquire(&r1, &LockTarget::table("t"), LockMode::Shared).unwrap();
        let (mw, ww) = (m.clone(), w.clone());
        let hw = thread::spawn(move || mw.acquire(&ww, &LockTarget::table("t"), LockMode::Exclusive));
        thread::sleep(Duration::from_millis(30));
        // A later shared request queues behind the waiting writer.
        let err =
            m.acquire_within(&r2, &LockTarget::table("t"), LockMode::Shared, Duration::from_millis(50)).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }));
        m.release_all(&r1).unwrap();
        hw.join().unwrap().unwrap();
    }

    #[test]
    fn dead_read_sessions_are_reclaimed() {
        let d = tempfile::tempdir().unwrap();
        let m = mgr(d.path());
        let ghost: OpId = "rd-20200101T000000.000000-00-p999999999s1".parse().unwrap();
        m.acquire(&ghost, &LockTarget::table("t"), LockMode::Shared).unwrap();
        m.acquire(&OpId::generate(), &LockTarget::table("t"), LockMode::Exclusive).unwrap();
        assert!(m.held_locks(&ghost).unwrap().is_empty());
    }

    #[derive(Clone, Debug)]
    enum Step {
        Acquire(usize, usize, bool),
        Release(usize),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            4 => (0usize..4, 0usize..7, any::<bool>()).prop_map(|(o, n, x)| Step::Acquire(o, n, x)),
            1 => (0usize..4).prop_map(Step::Release),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn registry_never_holds_conflicting_tokens(steps in proptest::collection::vec(step(), 1..30)) {
            let d = tempfile::tempdir().unwrap();
            let m = mgr(d.path());
            let ops: Vec<OpId> = (0..4).map(|_| OpId::generate()).collect();
            let nodes = [
                LockTarget::Vault,
                LockTarget::table("a"),
                LockTarget::table("b"),
                inst("a", 1),
                inst("a", 2),
                inst("b", 1),
                inst("b", 2),
            ];
            let mut released = HashSet::new();
            let mut history: HashMap<usize, Vec<bool>> = HashMap::new();
            for s in steps {
                match s {
                    Step::Acquire(o, n, x) => {
                        let mode = if x { LockMode::Exclusive } else { LockMode::Shared };
                        let r = m.try_acquire(&ops[o], &nodes[n], mode);
                        if released.contains(&o) {
                            prop_assert!(matches!(r, Err(Error::ShrinkPhaseViolation(_))));
                        } else if r.is_ok() {
                            history.entry(o).or_default().push(true);
                        }
                    }
                    Step::Release(o) => {
                        m.release_all(&ops[o]).unwrap();
                        released.insert(o);
                        history.entry(o).or_default().push(false);
                    }
                }
                let tokens = m.all_tokens().unwrap();
                prop_assert!(LockManager::check_safety(&tokens).is_ok(), "{:?}", LockManager::check_safety(&tokens));
            }
            // Two-phase: no successful acquire after a release.
            for h in history.values() {
                if let Some(first_release) = h.iter().position(|x| !x) {
                    prop_assert!(h[first_release..].iter().all(|x| !x));
                }
            }
        }
    }
}
