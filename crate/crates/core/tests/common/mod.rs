#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use tempfile::TempDir;
use vault_core::engine::{ExecutorRegistry, MockExecutor};
use vault_core::ids::InstanceId;
use vault_core::ops::{Vault, VaultOptions};
use vault_core::store::TableConfig;

pub const USER: &str = "alice";

pub struct Fixture {
    pub dir: TempDir,
    pub vault: Vault,
    pub mock: Arc<MockExecutor>,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockExecutor::new());
        let options = VaultOptions {
            lock_timeout: Duration::from_secs(20),
            executors: ExecutorRegistry::with_mock(mock.clone()),
            ..VaultOptions::default()
        };
        let vault = Vault::init_with(&dir.path().join("vault"), options).unwrap();
        Fixture { dir, vault, mock }
    }

    pub fn root(&self) -> PathBuf {
        self.dir.path().join("vault")
    }

    /// Write builder files into a fresh source directory.
    pub fn builders(&self, name: &str, files: &[(&str, &str)]) -> PathBuf {
        let dir = self.dir.path().join("src").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for (f, text) in files {
            std::fs::write(dir.join(f), text).unwrap();
        }
        dir
    }

    pub fn table(&self, name: &str, multi_active: bool) {
        self.vault.create_table(config(name, multi_active, false), USER).unwrap();
    }

    /// Create an instance with the given builders and generate it.
    pub fn generated(&self, table: &str, origin: Option<&str>, files: &[(&str, &str)]) -> InstanceId {
        let id = self.instance(table, origin, files);
        self.vault.generate(table, &id.to_string(), USER, false).unwrap();
        id
    }

    pub fn instance(&self, table: &str, origin: Option<&str>, files: &[(&str, &str)]) -> InstanceId {
        let (_, id) = self.vault.create_instance(table, origin, None, USER).unwrap();
        if !files.is_empty() {
            let src = self.builders(&format!("{table}-{}", id), files);
            self.vault.copy_builders(table, &id.to_string(), &src, USER).unwrap();
        }
        id
    }
}

pub fn config(name: &str, multi_active: bool, allow_concurrent_exec: bool) -> TableConfig {
    TableConfig { name: name.into(), multi_active, allow_concurrent_exec, side_effect_note: None }
}

/// Generator producing integer keys 0..n.
pub fn range_gen(column: &str, n: usize) -> String {
    format!(
        "changed_columns: [{column}]\ncolumn_dtype: {{{column}: int}}\nfunction: {{executor: mock, entry: range}}\narguments: {{n: {n}}}\n"
    )
}

/// Row-wise builder computing `column` with a mock entry and arguments.
pub fn row_builder(column: &str, entry: &str, args: &str) -> String {
    format!("changed_columns: [{column}]\nfunction: {{executor: mock, entry: {entry}}}\narguments: {args}\n")
}

/// Digest of every file under `dir`, ignoring the op log and lock state.
pub fn tree_digest(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
        if rel.starts_with("metadata") {
            continue;
        }
        if p.is_dir() {
            out.insert(format!("{rel}/"), Vec::new());
            walk(root, &p, out);
        } else {
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}
