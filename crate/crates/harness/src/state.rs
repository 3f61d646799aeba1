//! Logical vault state for oracle comparison.
//!
//! Timestamps, operation ids and instance ids vary between runs of the same
//! script, so instances are named by external id, else by creation order,
//! and times are dropped. Artifact paths derive from row keys and are kept.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value as Json;
use vault_core::ids::InstanceId;
use vault_core::lock::LockManager;
use vault_core::oplog::OpLog;
use vault_core::store::{sha256_hex, Store};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VaultState {
    /// False when nothing exists at the vault path.
    pub exists: bool,
    pub tables: BTreeMap<String, TableState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TableState {
    pub multi_active: bool,
    pub allow_concurrent_exec: bool,
    pub deleted: bool,
    pub instances: BTreeMap<String, InstanceState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstanceState {
    pub phase: String,
    pub active: bool,
    pub origin: Option<String>,
    /// Builder filename → sha256.
    pub builders: BTreeMap<String, String>,
    pub data: Option<Json>,
    /// Artifact path → sha256 of the bytes.
    pub artifacts: BTreeMap<String, String>,
    pub pins: BTreeMap<String, String>,
}

fn canonical_names(store: &Store, table: &str) -> Result<BTreeMap<InstanceId, String>> {
    Ok(store
        .list_instances(table)?
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let name = id.external_id().map_or_else(|| format!("#{i}"), str::to_string);
            (id, name)
        })
        .collect())
}

pub fn capture(root: &Path) -> Result<VaultState> {
    if !root.exists() {
        return Ok(VaultState { exists: false, tables: BTreeMap::new() });
    }
    let store = Store::open(root)?;
    let mut names = BTreeMap::new();
    for t in store.list_tables()? {
        names.insert(t.clone(), canonical_names(&store, &t)?);
    }
    let mut tables = BTreeMap::new();
    for (t, ids) in &names {
        let record = store.read_table(t)?;
        let mut instances = BTreeMap::new();
        for (id, name) in ids {
            let meta = store.read_meta(t, id)?;
            let builders = store.builder_files(t, id)?.into_iter().map(|(n, b)| (n, sha256_hex(&b))).collect();
            let data = store.load_dataframe(t, id)?.map(|d| d.to_json());
            let mut artifacts = BTreeMap::new();
            for rel in store.artifact_files(t, id)? {
                let bytes = store.fetch_artifact(t, id, &rel)?;
                artifacts.insert(rel, sha256_hex(&bytes));
            }
            let pins = meta
                .dependency_pins
                .iter()
                .map(|(key, pin)| {
                    let dep = key.split('(').next().unwrap_or(key);
                    let pinned = names.get(dep).and_then(|m| m.get(pin)).cloned().unwrap_or_else(|| pin.to_string());
                    (key.clone(), pinned)
                })
                .collect();
            instances.insert(
                name.clone(),
                InstanceState {
                    phase: meta.phase.to_string(),
                    active: meta.active,
                    origin: meta.origin.as_ref().map(|o| ids.get(o).cloned().unwrap_or_else(|| o.to_string())),
                    builders,
                    data,
                    artifacts,
                    pins,
                },
            );
        }
        tables.insert(
            t.clone(),
            TableState {
                multi_active: record.config.multi_active,
                allow_concurrent_exec: record.config.allow_concurrent_exec,
                deleted: record.deleted_at.is_some(),
                instances,
            },
        );
    }
    Ok(VaultState { exists: true, tables })
}

/// Residue that a recovered, idle vault must not contain.
pub fn residue(root: &Path) -> Result<Vec<String>> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let store = Store::open(root)?;
    let mut out = Vec::new();
    let log = OpLog::new(&store.metadata_dir());
    for r in log.active_ops()? {
        out.push(format!("active op {} ({})", r.op_id, r.op_type.as_str()));
    }
    for t in LockManager::new(store.locks_dir()).all_tokens()? {
        out.push(format!("lock token {t:?}"));
    }
    for op in store.snapshot_ops()? {
        out.push(format!("snapshot of {op}"));
    }
    let stop_dir = store.stop_dir();
    if let Ok(entries) = std::fs::read_dir(&stop_dir) {
        for e in entries.flatten() {
            out.push(format!("stop request {}", e.file_name().to_string_lossy()));
        }
    }
    // Directories without their record, and temp files anywhere.
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            let name = e.file_name().to_string_lossy().to_string();
            if name.starts_with('.') && name.contains(".tmp-") {
                out.push(format!("temp file {}", p.display()));
            }
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    for e in std::fs::read_dir(root).with_context(|| root.display().to_string())?.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if !e.path().is_dir() || name == "metadata" {
            continue;
        }
        if !e.path().join("config.yaml").is_file() {
            out.push(format!("table directory {name} without config"));
            continue;
        }
        for inst in std::fs::read_dir(e.path())?.flatten() {
            if inst.path().is_dir() && !inst.path().join("instance_meta.yaml").is_file() {
                out.push(format!("instance directory {name}/{} without metadata", inst.file_name().to_string_lossy()));
            }
        }
    }
    out.sort();
    Ok(out)
}
