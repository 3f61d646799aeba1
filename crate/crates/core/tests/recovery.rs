//! Crash and restart through child processes. The test binary re-runs its
//! own `child` test with `VAULT_TEST_CHILD` set; `VAULT_CRASH_AT` makes the
//! child abort at a site.

mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use vault_core::crash::CRASH_AT_ENV;
use vault_core::oplog::{OpType, Outcome};
use vault_core::ops::{Recovery, StopMode, Vault};
use vault_core::store::Phase;
use vault_core::table::ColumnTable;
use vault_core::Error;

const CHILD_ENV: &str = "VAULT_TEST_CHILD";
const ROOT_ENV: &str = "VAULT_TEST_ROOT";
const ARG_ENV: &str = "VAULT_TEST_ARG";

#[test]
fn child() {
    let Ok(role) = std::env::var(CHILD_ENV) else { return };
    let vault = Vault::open(Path::new(&std::env::var(ROOT_ENV).unwrap())).unwrap();
    let arg = std::env::var(ARG_ENV).unwrap_or_default();
    match role.as_str() {
        "create_table" => drop(vault.create_table(config(&arg, false, false), USER)),
        "generate" => drop(vault.generate("stories", &arg, USER, false)),
        "delete_instance" => drop(vault.delete_instance("stories", &arg, USER)),
        other => panic!("unknown role {other}"),
    }
    std::process::exit(0);
}

/// Run one operation in a child; true if it crashed.
fn in_child(root: &Path, role: &str, arg: &str, crash_at: &str) -> bool {
    let status = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "child", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, role)
        .env(ROOT_ENV, root)
        .env(ARG_ENV, arg)
        .env(CRASH_AT_ENV, crash_at)
        .output()
        .unwrap()
        .status;
    !status.success()
}

fn stories(n: usize) -> [(&'static str, String); 2] {
    [
        ("gen_ids.yaml", range_gen("id", n)),
        ("title.yaml", row_builder("title", "format", "{template: \"story {index}\"}")),
    ]
}

fn with_stories(n: usize) -> (Fixture, String) {
    let f = Fixture::new();
    f.table("stories", false);
    let b = stories(n);
    let id = f.instance("stories", None, &[(b[0].0, &b[0].1), (b[1].0, &b[1].1)]);
    (f, id.to_string())
}

fn computed(df: &ColumnTable, column: &str) -> usize {
    (0..df.nrows()).filter(|&r| !df.get(r, column).unwrap().is_empty()).count()
}

fn values(df: &ColumnTable) -> serde_json::Value {
    df.to_json()
}

#[test]
fn restart_op_recomputes_only_missing_rows() {
    let (oracle, oracle_id) = with_stories(10);
    oracle.vault.generate("stories", &oracle_id, USER, false).unwrap();
    let expected = values(&oracle.vault.read_dataframe("stories", None).unwrap().1);

    let (f, id) = with_stories(10);
    // One checkpoint for the generator, then one per row.
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#6"));
    let ps = f.vault.active_ops().unwrap();
    assert_eq!(ps.len(), 1);
    assert!(!ps[0].alive);
    let op = ps[0].record.op_id.clone();
    // The dead op still holds its exclusive lock, so read the checkpoint directly.
    let iid = f.vault.instance_meta("stories", &id).unwrap().instance;
    let partial = f.vault.store().load_dataframe("stories", &iid).unwrap().unwrap();
    assert_eq!(computed(&partial, "title"), 5);
    assert!(matches!(f.vault.read_dataframe("stories", None), Err(Error::NotMaterialized { .. })));

    f.vault.restart_op(op.as_str(), USER).unwrap();
    assert_eq!(f.mock.calls_for("title.yaml"), 5);
    assert_eq!(f.mock.calls_for("gen_ids.yaml"), 0);
    let done = f.vault.wait(&op).unwrap();
    assert_eq!(done.outcome, Outcome::Complete);
    assert_eq!(values(&f.vault.read_dataframe("stories", None).unwrap().1), expected);
    assert!(f.vault.locks().all_tokens().unwrap().is_empty());
}

#[test]
fn restart_vault_resumes_interrupted_generations() {
    let (f, id) = with_stories(6);
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#3"));
    let recovered = f.vault.restart_vault().unwrap();
    assert_eq!(recovered.len(), 1);
    assert_eq!(recovered[0].action, Recovery::Resumed);
    assert_eq!(f.mock.calls_for("title.yaml"), 4);
    assert_eq!(f.vault.read_dataframe("stories", None).unwrap().1.nrows(), 6);
    assert!(f.vault.active_ops().unwrap().is_empty());
    assert!(f.vault.store().snapshot_ops().unwrap().is_empty());
}

#[test]
fn edited_builders_make_a_generation_unresumable() {
    let (f, id) = with_stories(6);
    let before = tree_digest(&f.root());
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#3"));
    let op = f.vault.active_ops().unwrap()[0].record.op_id.clone();
    let builder = f.root().join(format!("stories/{id}/builders/title.yaml"));
    let text = std::fs::read_to_string(&builder).unwrap();
    std::fs::write(&builder, text.replace("story", "tale")).unwrap();
    assert!(matches!(f.vault.restart_op(op.as_str(), USER), Err(Error::NotResumable(_))));
    // Rolled back: only the hand edit differs from the pre-op state.
    std::fs::write(&builder, text).unwrap();
    assert_eq!(tree_digest(&f.root()), before);
    assert_eq!(f.vault.wait(&op).unwrap().outcome, Outcome::RolledBack);
}

#[test]
fn unresumable_operations_roll_back_on_restart() {
    let f = Fixture::new();
    let before = tree_digest(&f.root());
    for site in ["lock.token_written#1", "table.dir_created", "table.config_written"] {
        assert!(in_child(&f.root(), "create_table", "stories", site), "{site}");
        let op = f.vault.active_ops().unwrap()[0].record.clone();
        assert_eq!(op.op_type, OpType::CreateTable);
        assert!(matches!(f.vault.restart_op(op.op_id.as_str(), USER), Err(Error::NotResumable(_))));
        let recovered = f.vault.restart_vault().unwrap();
        assert_eq!(recovered.len(), 1, "{site}");
        assert_eq!(recovered[0].action, Recovery::RolledBack);
        assert_eq!(recovered[0].error.as_ref().unwrap().code, "Interrupted");
        assert_eq!(tree_digest(&f.root()), before, "{site}");
        assert!(f.vault.locks().all_tokens().unwrap().is_empty());
    }
    // Crashing after the completion record keeps the table.
    assert!(in_child(&f.root(), "create_table", "stories", "oplog.complete.appended"));
    assert!(f.vault.restart_vault().unwrap().is_empty());
    assert!(f.vault.list_tables().unwrap().iter().any(|t| t.config.name == "stories"));
    assert!(f.vault.locks().all_tokens().unwrap().is_empty());
    assert!(f.vault.store().snapshot_ops().unwrap().is_empty());
}

#[test]
fn a_crash_during_rollback_is_rolled_back_again() {
    let (f, id) = with_stories(4);
    f.vault.generate("stories", &id, USER, false).unwrap();
    let before = tree_digest(&f.root());
    assert!(in_child(&f.root(), "delete_instance", &id, "dataframe.removed"));
    // Restart in a child that dies halfway through restoring.
    let status = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "restart_child", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, "restart")
        .env(ROOT_ENV, f.root())
        .env(CRASH_AT_ENV, "snapshot.restore.target_removed")
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
    f.vault.restart_vault().unwrap();
    assert_eq!(tree_digest(&f.root()), before);
    assert_eq!(f.vault.instance_meta("stories", &id).unwrap().phase, Phase::Materialized);
}

#[test]
fn restart_child() {
    if std::env::var(CHILD_ENV).as_deref() != Ok("restart") {
        return;
    }
    let vault = Vault::open(Path::new(&std::env::var(ROOT_ENV).unwrap())).unwrap();
    let _ = vault.restart_vault();
    std::process::exit(0);
}

#[test]
fn stopping_a_dead_operation_rolls_it_back() {
    let (f, id) = with_stories(6);
    let before = tree_digest(&f.root());
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#3"));
    let op = f.vault.active_ops().unwrap()[0].record.op_id.clone();
    f.vault.stop_op(op.as_str(), StopMode::Rollback, USER).unwrap();
    assert_eq!(tree_digest(&f.root()), before);
    let rec = f.vault.wait(&op).unwrap();
    assert_eq!((rec.outcome, rec.error.unwrap().code.as_str()), (Outcome::RolledBack, "Stopped"));
    assert!(f.vault.restart_vault().unwrap().is_empty());
}

#[test]
fn stopping_a_dead_generation_can_keep_its_rows() {
    let (f, id) = with_stories(6);
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#3"));
    let op = f.vault.active_ops().unwrap()[0].record.op_id.clone();
    f.vault.stop_op(op.as_str(), StopMode::KeepProgress, USER).unwrap();
    assert_eq!(f.vault.instance_meta("stories", &id).unwrap().phase, Phase::Created);
    assert_eq!(computed(&f.vault.read_partial("stories", &id).unwrap(), "title"), 2);
}

#[test]
fn waiting_on_a_dead_operation_reports_the_interruption() {
    let (f, id) = with_stories(4);
    assert!(in_child(&f.root(), "generate", &id, "checkpoint.renamed#2"));
    let op = f.vault.active_ops().unwrap()[0].record.op_id.clone();
    assert!(matches!(f.vault.wait(&op), Err(Error::Interrupted(_))));
    // Other work is blocked on the dead op's locks until restart.
    assert!(matches!(f.vault.delete_instance("stories", &id, USER), Err(Error::TargetBusy(_))));
    f.vault.restart_vault().unwrap();
    f.vault.delete_instance("stories", &id, USER).unwrap();
}
