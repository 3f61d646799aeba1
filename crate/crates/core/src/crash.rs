//! Crash-point instrumentation.
//!
//! Every durable write in the crate goes through [`crate::durable`], which
//! takes a [`Site`] and calls [`point`] once the write is on disk. Child
//! processes started with `VAULT_CRASH_AT=<label>[#<hit>]` abort at that
//! site; `VAULT_CRASH_TRACE=<file>` appends one line per site hit.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

pub const CRASH_AT_ENV: &str = "VAULT_CRASH_AT";
pub const CRASH_TRACE_ENV: &str = "VAULT_CRASH_TRACE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Site(pub &'static str);

impl Site {
    pub fn label(self) -> &'static str {
        self.0
    }
}

pub mod site {
    use super::Site;

    pub const OPLOG_BEGIN_BEFORE: Site = Site("oplog.begin.before_append");
    pub const OPLOG_BEGIN: Site = Site("oplog.begin.appended");
    pub const OPLOG_BIND: Site = Site("oplog.bind.appended");
    pub const OPLOG_STATE: Site = Site("oplog.state.appended");
    pub const OPLOG_INPUTS: Site = Site("oplog.inputs.appended");
    pub const OPLOG_COMPLETE: Site = Site("oplog.complete.appended");

    pub const SNAPSHOT_COPIED: Site = Site("snapshot.target_copied");
    pub const SNAPSHOT_MANIFEST: Site = Site("snapshot.manifest_written");
    pub const SNAPSHOT_RESTORE_REMOVED: Site = Site("snapshot.restore.target_removed");
    pub const SNAPSHOT_RESTORE_COPIED: Site = Site("snapshot.restore.target_copied");
    pub const SNAPSHOT_DISCARDED: Site = Site("snapshot.discarded");

    pub const LOCK_GRANTED: Site = Site("lock.token_written");
    pub const LOCK_RELEASED: Site = Site("lock.token_removed");
    pub const LOCK_WAIT: Site = Site("lock.wait_recorded");

    pub const TABLE_DIR_CREATED: Site = Site("table.dir_created");
    pub const TABLE_CONFIG_WRITTEN: Site = Site("table.config_written");
    pub const INSTANCE_DIR_CREATED: Site = Site("instance.dir_created");
    pub const INSTANCE_META_WRITTEN: Site = Site("instance.meta_written");
    pub const BUILDER_COPIED: Site = Site("builders.file_copied");

    pub const CHECKPOINT_WRITTEN: Site = Site("checkpoint.renamed");
    pub const ARTIFACT_WRITTEN: Site = Site("artifact.written");
    pub const ARTIFACT_REMOVED: Site = Site("artifact.removed");
    pub const DATAFRAME_REMOVED: Site = Site("dataframe.removed");
    pub const LINEAGE_APPENDED: Site = Site("lineage.appended");

    pub const STOP_REQUESTED: Site = Site("stop.request_written");
    pub const STOP_CLEARED: Site = Site("stop.request_removed");

    pub const VAULT_INIT: Site = Site("vault.initialized");
    pub const RESTART_GC: Site = Site("restart.cleaned");
}

/// Every registered crash site.
pub const SITES: &[Site] = &[
    site::OPLOG_BEGIN_BEFORE,
    site::OPLOG_BEGIN,
    site::OPLOG_BIND,
    site::OPLOG_STATE,
    site::OPLOG_INPUTS,
    site::OPLOG_COMPLETE,
    site::SNAPSHOT_COPIED,
    site::SNAPSHOT_MANIFEST,
    site::SNAPSHOT_RESTORE_REMOVED,
    site::SNAPSHOT_RESTORE_COPIED,
    site::SNAPSHOT_DISCARDED,
    site::LOCK_GRANTED,
    site::LOCK_RELEASED,
    site::LOCK_WAIT,
    site::TABLE_DIR_CREATED,
    site::TABLE_CONFIG_WRITTEN,
    site::INSTANCE_DIR_CREATED,
    site::INSTANCE_META_WRITTEN,
    site::BUILDER_COPIED,
    site::CHECKPOINT_WRITTEN,
    site::ARTIFACT_WRITTEN,
    site::ARTIFACT_REMOVED,
    site::DATAFRAME_REMOVED,
    site::LINEAGE_APPENDED,
    site::STOP_REQUESTED,
    site::STOP_CLEARED,
    site::VAULT_INIT,
    site::RESTART_GC,
];

struct Config {
    crash_at: Option<(String, u64)>,
    trace: Option<String>,
}

fn config() -> &'static Config {
    static CONFIG: OnceLock<Config> = OnceLock::new();
    CONFIG.get_or_init(|| {
        let crash_at = std::env::var(CRASH_AT_ENV).ok().map(|spec| match spec.split_once('#') {
            Some((label, n)) => (label.to_string(), n.parse().unwrap_or(1)),
            None => (spec, 1),
        });
        Config { crash_at, trace: std::env::var(CRASH_TRACE_ENV).ok() }
    })
}

fn hits() -> &'static Mutex<HashMap<&'static str, u64>> {
    static HITS: OnceLock<Mutex<HashMap<&'static str, u64>>> = OnceLock::new();
    HITS.get_or_init(Default::default)
}

/// Record a hit of `site`, aborting the process if it is the configured crash point.
pub fn point(site: Site) {
    let cfg = config();
    if cfg.crash_at.is_none() && cfg.trace.is_none() {
        return;
    }
    let n = {
        let mut hits = hits().lock().unwrap_or_else(|e| e.into_inner());
        let n = hits.entry(site.0).or_insert(0);
        *n += 1;
        *n
    };
    if let Some(path) = &cfg.trace {
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{}", site.0);
        }
    }
    if let Some((label, at)) = &cfg.crash_at {
        if label == site.0 && *at == n {
            std::process::abort();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn labels_are_unique() {
        let labels: HashSet<_> = SITES.iter().map(|s| s.0).collect();
        assert_eq!(labels.len(), SITES.len());
    }

    /// Every registered site is referenced by the engine, every `site::` constant
    /// used by the engine is registered, and no module bypasses `durable` for
    /// filesystem mutation.
    #[test]
    fn coverage_of_durable_writes() {
        let src_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
        let mut sources = String::new();
        let mut stack = vec![src_dir];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let text = std::fs::read_to_string(&path).unwrap();
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                let body = text.split("#[cfg(test)]").next().unwrap_or("");
                if name != "durable.rs" && name != "crash.rs" {
                    for forbidden in [
                        "fs::write(",
                        "fs::remove_file(",
                        "fs::remove_dir_all(",
                        "fs::rename(",
                        "fs::create_dir(",
                        "fs::create_dir_all(",
                        "fs::copy(",
                    ] {
                        assert!(!body.contains(forbidden), "{name} calls {forbidden} outside the durable module");
                    }
                }
                if name != "crash.rs" {
                    sources.push_str(body);
                }
            }
        }
        for s in SITES {
            let constant = SITE_NAMES.iter().find(|(_, site)| site == s).unwrap().0;
            assert!(
                sources.contains(&format!("site::{constant}")),
                "registered site {} ({constant}) is never hit",
                s.0
            );
        }
    }

    const SITE_NAMES: &[(&str, Site)] = &[
        ("OPLOG_BEGIN_BEFORE", site::OPLOG_BEGIN_BEFORE),
        ("OPLOG_BEGIN", site::OPLOG_BEGIN),
        ("OPLOG_BIND", site::OPLOG_BIND),
        ("OPLOG_STATE", site::OPLOG_STATE),
        ("OPLOG_INPUTS", site::OPLOG_INPUTS),
        ("OPLOG_COMPLETE", site::OPLOG_COMPLETE),
        ("SNAPSHOT_COPIED", site::SNAPSHOT_COPIED),
        ("SNAPSHOT_MANIFEST", site::SNAPSHOT_MANIFEST),
        ("SNAPSHOT_RESTORE_REMOVED", site::SNAPSHOT_RESTORE_REMOVED),
        ("SNAPSHOT_RESTORE_COPIED", site::SNAPSHOT_RESTORE_COPIED),
        ("SNAPSHOT_DISCARDED", site::SNAPSHOT_DISCARDED),
        ("LOCK_GRANTED", site::LOCK_GRANTED),
        ("LOCK_RELEASED", site::LOCK_RELEASED),
        ("LOCK_WAIT", site::LOCK_WAIT),
        ("TABLE_DIR_CREATED", site::TABLE_DIR_CREATED),
        ("TABLE_CONFIG_WRITTEN", site::TABLE_CONFIG_WRITTEN),
        ("INSTANCE_DIR_CREATED", site::INSTANCE_DIR_CREATED),
        ("INSTANCE_META_WRITTEN", site::INSTANCE_META_WRITTEN),
        ("BUILDER_COPIED", site::BUILDER_COPIED),
        ("CHECKPOINT_WRITTEN", site::CHECKPOINT_WRITTEN),
        ("ARTIFACT_WRITTEN", site::ARTIFACT_WRITTEN),
        ("ARTIFACT_REMOVED", site::ARTIFACT_REMOVED),
        ("DATAFRAME_REMOVED", site::DATAFRAME_REMOVED),
        ("LINEAGE_APPENDED", site::LINEAGE_APPENDED),
        ("STOP_REQUESTED", site::STOP_REQUESTED),
        ("STOP_CLEARED", site::STOP_CLEARED),
        ("VAULT_INIT", site::VAULT_INIT),
        ("RESTART_GC", site::RESTART_GC),
    ];

    #[test]
    fn name_table_matches_registry() {
        assert_eq!(SITE_NAMES.len(), SITES.len());
    }
}
