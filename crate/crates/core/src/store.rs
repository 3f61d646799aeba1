//! On-disk vault layout, dataframe and artifact persistence, snapshots.
//!
//! ```text
//! <root>/metadata/{vault.yaml, active_ops.log, completed_ops.log, locks/,
//!                  snapshots/, stop_requests/, lineage.index}
//! <root>/<table>/config.yaml
//! <root>/<table>/<instance_id>/{builders/, dataframe.tv, artifacts/, instance_meta.yaml}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crash::site;
use crate::durable;
use crate::error::{Error, IoContext, Result};
use crate::ids::{is_valid_name, InstanceId, OpId};
use crate::lock::{LockManager, LockMode, LockTarget};
use crate::table::{ColumnTable, Dtype};

pub const METADATA_DIR: &str = "metadata";
pub const ACTIVE_LOG: &str = "active_ops.log";
pub const COMPLETED_LOG: &str = "completed_ops.log";
pub const LOCKS_DIR: &str = "locks";
pub const SNAPSHOTS_DIR: &str = "snapshots";
pub const STOP_DIR: &str = "stop_requests";
pub const LINEAGE_INDEX: &str = "lineage.index";
pub const VAULT_FILE: &str = "vault.yaml";
pub const CONFIG_FILE: &str = "config.yaml";
pub const BUILDERS_DIR: &str = "builders";
pub const DATAFRAME_FILE: &str = "dataframe.tv";
pub const ARTIFACTS_DIR: &str = "artifacts";
pub const META_FILE: &str = "instance_meta.yaml";
const MANIFEST_FILE: &str = "manifest.yaml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaultInfo {
    pub format: u32,
    pub created_at: DateTime<Utc>,
}

/// Table flags, fixed at creation.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableConfig {
    pub name: String,
    #[serde(default)]
    pub multi_active: bool,
    #[serde(default)]
    pub allow_concurrent_exec: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_effect_note: Option<String>,
}

impl TableConfig {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), ..Default::default() }
    }
}

/// Contents of `<table>/config.yaml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    #[serde(flatten)]
    pub config: TableConfig,
    pub created_by: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Created,
    Executing,
    Materialized,
    Deleted,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Created => "CREATED",
            Phase::Executing => "EXECUTING",
            Phase::Materialized => "MATERIALIZED",
            Phase::Deleted => "DELETED",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resume bookkeeping of an interrupted generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub op: OpId,
    /// Generator output has been joined and checkpointed.
    pub joined: bool,
    /// Builders whose carried-over cells have been checked.
    #[serde(default)]
    pub validated: Vec<String>,
}

/// Contents of `instance_meta.yaml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub table: String,
    pub instance: InstanceId,
    pub phase: Phase,
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<InstanceId>,
    pub created_by: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_op: Option<OpId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dependency_pins: BTreeMap<String, InstanceId>,
    /// Builder filename → sha256 of its bytes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub builder_hashes: BTreeMap<String, String>,
    /// Builder filename → hash of its bytes and the pins it depends on.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fingerprints: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub column_owners: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_digest: Option<String>,
    /// Builder filename → row key → digest of the inputs that produced the row.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cell_digests: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
}

impl InstanceMeta {
    pub fn new(table: &str, instance: InstanceId, origin: Option<InstanceId>, user: &str) -> Self {
        Self {
            table: table.into(),
            instance,
            phase: Phase::Created,
            active: false,
            origin,
            created_by: user.into(),
            created_at: Utc::now(),
            execution_started_at: None,
            executed_at: None,
            deleted_at: None,
            generation_op: None,
            dependency_pins: BTreeMap::new(),
            builder_hashes: BTreeMap::new(),
            fingerprints: BTreeMap::new(),
            column_owners: BTreeMap::new(),
            generator_digest: None,
            cell_digests: BTreeMap::new(),
            progress: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedTarget {
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceId>,
    pub existed: bool,
    /// Directory under the snapshot holding the copy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy: Option<String>,
    pub digest: String,
}

/// A saved pre-operation state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub op_id: OpId,
    /// Derived from the vault root on load, so a moved vault still recovers.
    #[serde(skip)]
    pub snapshot_path: PathBuf,
    pub captured_targets: Vec<CapturedTarget>,
}

/// One line of `lineage.index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub table: String,
    pub instance: InstanceId,
    pub op_id: OpId,
    pub executed_at: DateTime<Utc>,
    pub pins: BTreeMap<String, InstanceId>,
    pub fingerprints: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn yaml<T: Serialize>(v: &T) -> Vec<u8> {
    serde_yaml::to_string(v).expect("serializable").into_bytes()
}

fn read_yaml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_yaml::from_str(&text).map_err(|e| Error::corrupt(path, e))
}

fn is_temp_name(name: &str) -> bool {
    name.starts_with('.') && name.contains(".tmp-")
}

/// Hash of a file or directory tree: relative paths, kinds and file bytes.
/// Leftover temp files of interrupted atomic writes are ignored.
pub fn tree_digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    fn walk(h: &mut Sha256, base: &Path, rel: &Path) -> Result<()> {
        let full = base.join(rel);
        let meta = match fs::symlink_metadata(&full) {
            Ok(m) => m,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                h.update(b"absent\0");
                return Ok(());
            }
            Err(e) => return Err(Error::io(&full, e)),
        };
        if meta.is_dir() {
            h.update(format!("d {}\0", rel.display()).as_bytes());
            let mut names: Vec<_> = fs::read_dir(&full)
                .at(&full)?
                .map(|e| e.map(|e| e.file_name()))
                .collect::<std::io::Result<_>>()
                .at(&full)?;
            names.sort();
            for n in names {
                if is_temp_name(&n.to_string_lossy()) {
                    continue;
                }
                walk(h, base, &rel.join(n))?;
            }
        } else {
            let bytes = fs::read(&full).at(&full)?;
            h.update(format!("f {} {}\0", rel.display(), bytes.len()).as_bytes());
            h.update(&bytes);
        }
        Ok(())
    }
    walk(&mut h, path, Path::new(""))?;
    Ok(hex::encode(h.finalize()))
}

/// Handle on a vault directory.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
    created_at: DateTime<Utc>,
}

impl Store {
    /// Create a new vault at `path`, which must be absent or an empty directory.
    pub fn init(path: &Path) -> Result<Store> {
        if path.exists() {
            let mut entries = fs::read_dir(path).at(path)?;
            if entries.next().is_some() {
                return Err(Error::PathOccupied(path.to_path_buf()));
            }
        }
        // Built beside the target and moved in whole, so an interrupted
        // init leaves the path as it was.
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("vault path {}", path.display())))?
            .to_string_lossy()
            .to_string();
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        durable::ensure_dir(&parent).at(&parent)?;
        let staging = parent.join(format!(".{name}.tmp-{:08x}", rand::random::<u32>()));
        let meta = staging.join(METADATA_DIR);
        for d in [LOCKS_DIR, SNAPSHOTS_DIR, STOP_DIR] {
            durable::ensure_dir(&meta.join(d)).at(meta.join(d))?;
        }
        for f in [ACTIVE_LOG, COMPLETED_LOG, LINEAGE_INDEX] {
            let p = meta.join(f);
            durable::write_atomic(site::VAULT_INIT, &p, b"").at(&p)?;
        }
        let info = VaultInfo { format: 1, created_at: Utc::now() };
        let p = meta.join(VAULT_FILE);
        durable::write_atomic(site::VAULT_INIT, &p, &yaml(&info)).at(&p)?;
        if let Err(e) = durable::rename_dir(site::VAULT_INIT, &staging, path) {
            let _ = durable::remove_dir_all(site::VAULT_INIT, &staging);
            return Err(Error::io(path, e));
        }
        Store::open(path)
    }

    pub fn open(path: &Path) -> Result<Store> {
        let info_path = path.join(METADATA_DIR).join(VAULT_FILE);
        if !info_path.is_file() {
            return Err(Error::NotAVault(path.to_path_buf()));
        }
        let info: VaultInfo = read_yaml(&info_path)?;
        let root = path.canonicalize().at(path)?;
        Ok(Store { root, created_at: info.created_at })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn metadata_dir(&self) -> PathBuf {
        self.root.join(METADATA_DIR)
    }

    pub fn locks_dir(&self) -> PathBuf {
        self.metadata_dir().join(LOCKS_DIR)
    }

    pub fn snapshots_dir(&self) -> PathBuf {
        self.metadata_dir().join(SNAPSHOTS_DIR)
    }

    pub fn stop_dir(&self) -> PathBuf {
        self.metadata_dir().join(STOP_DIR)
    }

    pub fn table_dir(&self, table: &str) -> PathBuf {
        self.root.join(table)
    }

    pub fn instance_dir(&self, table: &str, id: &InstanceId) -> PathBuf {
        self.table_dir(table).join(id.to_string())
    }

    pub fn builders_dir(&self, table: &str, id: &InstanceId) -> PathBuf {
        self.instance_dir(table, id).join(BUILDERS_DIR)
    }

    pub fn dataframe_path(&self, table: &str, id: &InstanceId) -> PathBuf {
        self.instance_dir(table, id).join(DATAFRAME_FILE)
    }

    pub fn artifacts_dir(&self, table: &str, id: &InstanceId) -> PathBuf {
        self.instance_dir(table, id).join(ARTIFACTS_DIR)
    }

    fn meta_path(&self, table: &str, id: &InstanceId) -> PathBuf {
        self.instance_dir(table, id).join(META_FILE)
    }

    fn check_name(table: &str) -> Result<()> {
        if is_valid_name(table) && table != METADATA_DIR {
            Ok(())
        } else {
            Err(Error::InvalidName(format!("table name {table:?}")))
        }
    }

    // ----- tables -----

    pub fn list_tables(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.root).at(&self.root)? {
            let e = e.at(&self.root)?;
            let name = e.file_name().to_string_lossy().to_string();
            if name != METADATA_DIR && e.path().join(CONFIG_FILE).is_file() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn table_exists(&self, table: &str) -> bool {
        Self::check_name(table).is_ok() && self.table_dir(table).join(CONFIG_FILE).is_file()
    }

    pub fn read_table(&self, table: &str) -> Result<TableRecord> {
        if !self.table_exists(table) {
            return Err(Error::NoSuchTable(table.into()));
        }
        read_yaml(&self.table_dir(table).join(CONFIG_FILE))
    }

    pub fn create_table_dir(&self, table: &str) -> Result<()> {
        Self::check_name(table)?;
        let dir = self.table_dir(table);
        durable::create_dir_all(site::TABLE_DIR_CREATED, &dir).at(&dir)
    }

    pub fn write_table(&self, record: &TableRecord) -> Result<()> {
        Self::check_name(&record.config.name)?;
        let p = self.table_dir(&record.config.name).join(CONFIG_FILE);
        durable::write_atomic(site::TABLE_CONFIG_WRITTEN, &p, &yaml(record)).at(&p)
    }

    // ----- instances -----

    pub fn list_instances(&self, table: &str) -> Result<Vec<InstanceId>> {
        let dir = self.table_dir(table);
        if !self.table_exists(table) {
            return Err(Error::NoSuchTable(table.into()));
        }
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).at(&dir)? {
            let e = e.at(&dir)?;
            if let Ok(id) = e.file_name().to_string_lossy().parse::<InstanceId>() {
                if e.path().join(META_FILE).is_file() {
                    out.push(id);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Find an instance by canonical id or external id.
    pub fn resolve_instance(&self, table: &str, selector: &str) -> Result<InstanceId> {
        self.list_instances(table)?
            .into_iter()
            .find(|id| id.matches(selector))
            .ok_or_else(|| Error::NoSuchInstance { table: table.into(), instance: selector.into() })
    }

    pub fn instance_exists(&self, table: &str, id: &InstanceId) -> bool {
        self.meta_path(table, id).is_file()
    }

    pub fn read_meta(&self, table: &str, id: &InstanceId) -> Result<InstanceMeta> {
        let p = self.meta_path(table, id);
        if !p.is_file() {
            return Err(Error::NoSuchInstance { table: table.into(), instance: id.to_string() });
        }
        read_yaml(&p)
    }

    pub fn write_meta(&self, meta: &InstanceMeta) -> Result<()> {
        let p = self.meta_path(&meta.table, &meta.instance);
        durable::write_atomic(site::INSTANCE_META_WRITTEN, &p, &yaml(meta)).at(&p)
    }

    pub fn create_instance_dir(&self, table: &str, id: &InstanceId) -> Result<()> {
        let dir = self.instance_dir(table, id);
        durable::ensure_dir(&dir.join(ARTIFACTS_DIR)).at(&dir)?;
        durable::create_dir_all(site::INSTANCE_DIR_CREATED, &dir.join(BUILDERS_DIR)).at(&dir)
    }

    /// `(filename, bytes)` of every `.yaml`/`.yml` file in the instance's builders folder.
    pub fn builder_files(&self, table: &str, id: &InstanceId) -> Result<Vec<(String, Vec<u8>)>> {
        read_yaml_files(&self.builders_dir(table, id))
    }

    pub fn write_builder_file(&self, table: &str, id: &InstanceId, filename: &str, bytes: &[u8]) -> Result<()> {
        let p = self.builders_dir(table, id).join(filename);
        durable::write_atomic(site::BUILDER_COPIED, &p, bytes).at(&p)
    }

    // ----- dataframes -----

    /// The instance's dataframe file, if one has been written.
    pub fn load_dataframe(&self, table: &str, id: &InstanceId) -> Result<Option<ColumnTable>> {
        let p = self.dataframe_path(table, id);
        match fs::read(&p) {
            Ok(bytes) => ColumnTable::from_bytes(&p, &bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    }

    /// Atomically replace the instance's dataframe. `op` must hold an exclusive lock on it.
    pub fn write_checkpoint(
        &self,
        locks: &LockManager,
        op: &OpId,
        table: &str,
        id: &InstanceId,
        data: &ColumnTable,
    ) -> Result<()> {
        locks.require(op, &LockTarget::instance(table, id), LockMode::Exclusive)?;
        let p = self.dataframe_path(table, id);
        durable::write_atomic(site::CHECKPOINT_WRITTEN, &p, &data.to_bytes()).at(&p)
    }

    pub fn remove_dataframe(&self, table: &str, id: &InstanceId) -> Result<()> {
        let p = self.dataframe_path(table, id);
        durable::remove_file(site::DATAFRAME_REMOVED, &p).at(&p)
    }

    // ----- artifacts -----

    /// Relative artifact path for a cell: `artifacts/<column>/<key hash>/<filename>`.
    pub fn artifact_rel_path(column: &str, row_key: &str, filename: &str) -> Result<String> {
        let bad = filename.is_empty()
            || filename == "."
            || filename == ".."
            || filename.contains(['/', '\\', '\0'])
            || is_temp_name(filename);
        if bad {
            return Err(Error::InvalidArgument(format!("artifact filename {filename:?}")));
        }
        let key_hash = &sha256_hex(row_key.as_bytes())[..16];
        Ok(format!("{ARTIFACTS_DIR}/{column}/{key_hash}/{filename}"))
    }

    /// Write an artifact file and return the relative path to store in the cell.
    #[allow(clippy::too_many_arguments)]
    pub fn store_artifact(
        &self,
        locks: &LockManager,
        op: &OpId,
        table: &str,
        id: &InstanceId,
        column: &str,
        column_dtype: Dtype,
        row_key: &str,
        payload: &[u8],
        filename: &str,
    ) -> Result<String> {
        if column_dtype != Dtype::Artifact {
            return Err(Error::DtypeMismatch {
                column: column.into(),
                expected: Dtype::Artifact.to_string(),
                found: column_dtype.to_string(),
            });
        }
        locks.require(op, &LockTarget::instance(table, id), LockMode::Exclusive)?;
        let rel = Self::artifact_rel_path(column, row_key, filename)?;
        let path = self.instance_dir(table, id).join(&rel);
        match fs::read(&path) {
            Ok(existing) if existing == payload => return Ok(rel),
            Ok(_) => return Err(Error::DuplicateArtifact(rel)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        let parent = path.parent().expect("artifact path has a parent");
        durable::ensure_dir(parent).at(parent)?;
        durable::write_atomic(site::ARTIFACT_WRITTEN, &path, payload).at(&path)?;
        Ok(rel)
    }

    fn artifact_path(&self, table: &str, id: &InstanceId, cell: &str) -> Result<PathBuf> {
        let rel = Path::new(cell);
        let contained = !rel.is_absolute()
            && rel.components().all(|c| matches!(c, Component::Normal(_)))
            && rel.starts_with(ARTIFACTS_DIR)
            && rel.components().count() > 1;
        if !contained {
            return Err(Error::PathEscape(cell.into()));
        }
        Ok(self.instance_dir(table, id).join(rel))
    }

    pub fn fetch_artifact(&self, table: &str, id: &InstanceId, cell: &str) -> Result<Vec<u8>> {
        let path = self.artifact_path(table, id, cell)?;
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::IsADirectory) => {
                Err(Error::ArtifactMissing(cell.into()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Copy one artifact file from another instance of the same table.
    pub fn copy_artifact(&self, table: &str, from: &InstanceId, to: &InstanceId, cell: &str) -> Result<()> {
        let src = self.artifact_path(table, from, cell)?;
        let dst = self.artifact_path(table, to, cell)?;
        if dst.exists() {
            return Ok(());
        }
        if !src.is_file() {
            return Err(Error::ArtifactMissing(cell.into()));
        }
        let parent = dst.parent().expect("artifact path has a parent");
        durable::ensure_dir(parent).at(parent)?;
        durable::copy_file_atomic(site::ARTIFACT_WRITTEN, &src, &dst).at(&dst)
    }

    /// Relative paths of every artifact file of an instance.
    pub fn artifact_files(&self, table: &str, id: &InstanceId) -> Result<Vec<String>> {
        let base = self.instance_dir(table, id);
        let mut out = Vec::new();
        let mut stack = vec![base.join(ARTIFACTS_DIR)];
        while let Some(dir) = stack.pop() {
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(Error::io(&dir, e)),
            };
            for e in entries {
                let p = e.at(&dir)?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if !is_temp_name(&p.file_name().unwrap_or_default().to_string_lossy()) {
                    out.push(p.strip_prefix(&base).expect("under base").to_string_lossy().replace('\\', "/"));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Remove one artifact file and its now-empty key directory.
    pub fn remove_artifact(&self, table: &str, id: &InstanceId, cell: &str) -> Result<()> {
        let path = self.artifact_path(table, id, cell)?;
        durable::remove_file(site::ARTIFACT_REMOVED, &path).at(&path)?;
        if let Some(parent) = path.parent() {
            if fs::read_dir(parent).map(|mut d| d.next().is_none()).unwrap_or(false) {
                durable::remove_dir_all(site::ARTIFACT_REMOVED, parent).at(parent)?;
            }
        }
        Ok(())
    }

    /// Remove the artifact directory for one cell of `column`, whatever its filename.
    pub fn clear_artifact_slot(&self, table: &str, id: &InstanceId, column: &str, row_key: &str) -> Result<()> {
        let key_hash = &sha256_hex(row_key.as_bytes())[..16];
        let dir = self.artifacts_dir(table, id).join(column).join(key_hash);
        if dir.exists() {
            durable::remove_dir_all(site::ARTIFACT_REMOVED, &dir).at(&dir)?;
        }
        Ok(())
    }

    pub fn remove_all_artifacts(&self, table: &str, id: &InstanceId) -> Result<()> {
        let dir = self.artifacts_dir(table, id);
        if fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
            durable::remove_dir_all(site::ARTIFACT_REMOVED, &dir).at(&dir)?;
            durable::ensure_dir(&dir).at(&dir)?;
        }
        Ok(())
    }

    // ----- snapshots -----

    fn target_path(&self, table: &str, instance: Option<&InstanceId>) -> Result<PathBuf> {
        Self::check_name(table)?;
        Ok(match instance {
            Some(id) => self.instance_dir(table, id),
            None => self.table_dir(table),
        })
    }

    fn snapshot_dir(&self, op: &OpId) -> PathBuf {
        self.snapshots_dir().join(op.as_str())
    }

    fn capture(&self, dir: &Path, table: &str, instance: Option<&InstanceId>) -> Result<CapturedTarget> {
        let path = self.target_path(table, instance)?;
        let existed = path.exists();
        if !existed {
            let digest = tree_digest(&path)?;
            return Ok(CapturedTarget {
                table: table.into(),
                instance: instance.cloned(),
                existed,
                copy: None,
                digest,
            });
        }
        let name = format!("t-{:016x}", rand::random::<u64>());
        let dst = dir.join(&name);
        if let Err(e) = durable::copy_tree(site::SNAPSHOT_COPIED, &path, &dst) {
            let _ = durable::remove_dir_all(site::SNAPSHOT_DISCARDED, &dst);
            return Err(Error::io(&dst, e));
        }
        // The digest describes the copy, whatever happened to the source meanwhile.
        let digest = tree_digest(&dst)?;
        Ok(CapturedTarget { table: table.into(), instance: instance.cloned(), existed, copy: Some(name), digest })
    }

    fn write_manifest(&self, snap: &SnapshotRef) -> Result<()> {
        let p = snap.snapshot_path.join(MANIFEST_FILE);
        durable::write_atomic(site::SNAPSHOT_MANIFEST, &p, &yaml(snap)).at(&p)
    }

    /// Copy each target (a table directory, or an instance directory) into
    /// `metadata/snapshots/<op_id>/`. Targets that do not exist yet are
    /// recorded as absent, so restoring deletes them.
    pub fn snapshot_state(&self, op: &OpId, targets: &[(String, Option<InstanceId>)]) -> Result<SnapshotRef> {
        let dir = self.snapshot_dir(op);
        if dir.exists() {
            durable::remove_dir_all(site::SNAPSHOT_DISCARDED, &dir).at(&dir)?;
        }
        durable::ensure_dir(&dir).at(&dir)?;
        let mut captured = Vec::new();
        for (table, instance) in targets {
            let t = match self.capture(&dir, table, instance.as_ref()) {
                Ok(t) => t,
                // Targets are not locked yet and may change while copied. A
                // capture with no copy never matches, so the refresh after
                // locking takes it again.
                Err(Error::Io { .. }) => CapturedTarget {
                    table: table.clone(),
                    instance: instance.clone(),
                    existed: true,
                    copy: None,
                    digest: String::new(),
                },
                Err(e) => return Err(e),
            };
            captured.push(t);
        }
        let snap = SnapshotRef { op_id: op.clone(), snapshot_path: dir, captured_targets: captured };
        self.write_manifest(&snap)?;
        Ok(snap)
    }

    fn require_targets(&self, locks: &LockManager, op: &OpId, targets: &[CapturedTarget]) -> Result<()> {
        for t in targets {
            let target = match &t.instance {
                Some(id) => LockTarget::instance(&t.table, id),
                None => LockTarget::table(&t.table),
            };
            locks.require(op, &target, LockMode::Exclusive)?;
        }
        Ok(())
    }

    /// Re-capture any target that changed since the snapshot was taken.
    /// Requires exclusive locks on all targets. Returns true if anything changed.
    pub fn refresh_snapshot(&self, locks: &LockManager, op: &OpId, snap: &mut SnapshotRef) -> Result<bool> {
        self.require_targets(locks, op, &snap.captured_targets)?;
        let mut stale = Vec::new();
        for (i, t) in snap.captured_targets.iter().enumerate() {
            let path = self.target_path(&t.table, t.instance.as_ref())?;
            if tree_digest(&path)? != t.digest {
                stale.push(i);
            }
        }
        if stale.is_empty() {
            return Ok(false);
        }
        let mut updated = snap.clone();
        let mut old_copies = Vec::new();
        for &i in &stale {
            let t = &snap.captured_targets[i];
            updated.captured_targets[i] = self.capture(&snap.snapshot_path, &t.table, t.instance.as_ref())?;
            old_copies.extend(t.copy.clone());
        }
        self.write_manifest(&updated)?;
        for c in old_copies {
            let p = snap.snapshot_path.join(c);
            durable::remove_dir_all(site::SNAPSHOT_DISCARDED, &p).at(&p)?;
        }
        *snap = updated;
        Ok(true)
    }

    /// Add a target to an existing snapshot. Requires an exclusive lock on it.
    pub fn extend_snapshot(
        &self,
        locks: &LockManager,
        op: &OpId,
        snap: &mut SnapshotRef,
        table: &str,
        instance: Option<&InstanceId>,
    ) -> Result<()> {
        if snap.captured_targets.iter().any(|t| t.table == table && t.instance.as_ref() == instance) {
            return Ok(());
        }
        let t = self.capture(&snap.snapshot_path, table, instance)?;
        self.require_targets(locks, op, std::slice::from_ref(&t))?;
        let mut updated = snap.clone();
        updated.captured_targets.push(t);
        self.write_manifest(&updated)?;
        *snap = updated;
        Ok(())
    }

    pub fn load_snapshot(&self, op: &OpId) -> Result<Option<SnapshotRef>> {
        let p = self.snapshot_dir(op).join(MANIFEST_FILE);
        if !p.is_file() {
            return Ok(None);
        }
        let mut snap: SnapshotRef = read_yaml(&p)?;
        snap.snapshot_path = self.snapshot_dir(op);
        Ok(Some(snap))
    }

    /// Op ids that have a snapshot directory.
    pub fn snapshot_ops(&self) -> Result<Vec<OpId>> {
        let dir = self.snapshots_dir();
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).at(&dir)? {
            if let Ok(op) = e.at(&dir)?.file_name().to_string_lossy().parse() {
                out.push(op);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Put every captured target back; targets absent at capture time are deleted.
    pub fn restore_snapshot(&self, snap: &SnapshotRef) -> Result<()> {
        if !snap.snapshot_path.join(MANIFEST_FILE).is_file() {
            return Err(Error::SnapshotMissing(snap.op_id.clone()));
        }
        for t in &snap.captured_targets {
            let path = self.target_path(&t.table, t.instance.as_ref())?;
            if tree_digest(&path)? == t.digest {
                continue;
            }
            durable::remove_path(site::SNAPSHOT_RESTORE_REMOVED, &path).at(&path)?;
            if let Some(copy) = &t.copy {
                let src = snap.snapshot_path.join(copy);
                durable::copy_tree(site::SNAPSHOT_RESTORE_COPIED, &src, &path).at(&path)?;
            }
        }
        Ok(())
    }

    pub fn discard_snapshot(&self, snap: &SnapshotRef) -> Result<()> {
        if !snap.snapshot_path.exists() {
            return Err(Error::SnapshotMissing(snap.op_id.clone()));
        }
        durable::remove_dir_all(site::SNAPSHOT_DISCARDED, &snap.snapshot_path).at(&snap.snapshot_path)
    }

    /// Remove a snapshot directory by op id, if present.
    pub fn remove_snapshot_dir(&self, op: &OpId) -> Result<()> {
        let dir = self.snapshot_dir(op);
        durable::remove_dir_all(site::SNAPSHOT_DISCARDED, &dir).at(&dir)
    }

    // ----- lineage -----

    pub fn append_lineage(&self, rec: &LineageRecord) -> Result<()> {
        let p = self.metadata_dir().join(LINEAGE_INDEX);
        let line = serde_json::to_string(rec).expect("serializable");
        durable::append_line(site::LINEAGE_APPENDED, &p, &line).at(&p)
    }

    pub fn read_lineage(&self) -> Result<Vec<LineageRecord>> {
        let p = self.metadata_dir().join(LINEAGE_INDEX);
        let text = match fs::read_to_string(&p) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&p, e)),
        };
        // A torn final line (crash mid-append) is ignored.
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }

    /// Remove leftover temp files of interrupted atomic writes.
    pub fn remove_temp_files(&self) -> Result<usize> {
        let mut removed = 0;
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).at(&dir)? {
                let p = e.at(&dir)?.path();
                let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                if p.is_dir() {
                    stack.push(p);
                } else if is_temp_name(&name) {
                    durable::remove_file(site::RESTART_GC, &p).at(&p)?;
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }
}

/// `(filename, bytes)` of the `.yaml`/`.yml` files directly in `dir`, sorted.
pub fn read_yaml_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for e in entries {
        let p = e.at(dir)?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
        if p.is_file() && (name.ends_with(".yaml") || name.ends_with(".yml")) && !name.starts_with('.') {
            let bytes = fs::read(&p).at(&p)?;
            out.push((name, bytes));
        }
    }
    out.sort();
    Ok(out)
}
