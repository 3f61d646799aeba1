mod common;

use std::time::{Duration, Instant};

use common::*;
use vault_core::oplog::{OpState, OpType, Outcome};
use vault_core::ops::{StopMode, Vault};
use vault_core::store::Phase;
use vault_core::table::Cell;
use vault_core::Error;

const SLOW: Duration = Duration::from_millis(40);

fn until(what: &str, mut f: impl FnMut() -> bool) {
    let start = Instant::now();
    while !f() {
        assert!(start.elapsed() < Duration::from_secs(30), "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn executing(v: &Vault) -> bool {
    v.active_ops().unwrap().iter().any(|a| a.record.state == OpState::Executing)
}

fn story_builders() -> Vec<(&'static str, String)> {
    vec![
        ("gen_ids.yaml", range_gen("id", 10)),
        ("title.yaml", row_builder("title", "format", "{template: \"story {index}\"}")),
    ]
}

fn as_refs<'a>(v: &'a [(&'static str, String)]) -> Vec<(&'static str, &'a str)> {
    v.iter().map(|(n, t)| (*n, t.as_str())).collect()
}

#[test]
fn create_table_and_duplicate_rolls_back() {
    let f = Fixture::new();
    f.table("stories", false);
    assert!(f.root().join("stories/config.yaml").is_file());
    let err = f.vault.create_table(config("stories", true, true), USER).unwrap_err();
    assert!(matches!(err, Error::TableExists(_)), "{err:?}");
    let done = f.vault.completed_ops().unwrap();
    assert_eq!(done.len(), 2);
    assert_eq!(done[1].outcome, Outcome::RolledBack);
    assert_eq!(done[1].error.as_ref().unwrap().code, "TableExists");
    // The original config is untouched.
    assert!(!f.vault.list_tables().unwrap()[0].config.multi_active);
}

#[test]
fn completed_ops_record_every_stage_in_order() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    f.generated("stories", None, &as_refs(&b));
    let done = f.vault.completed_ops().unwrap();
    assert_eq!(done.len(), 4);
    for c in &done {
        assert_eq!(c.outcome, Outcome::Complete);
        let states: Vec<OpState> = c.record.history.iter().map(|h| h.0).collect();
        assert_eq!(
            states,
            [OpState::ActiveLogged, OpState::StateSaved, OpState::Locked, OpState::InputsLogged, OpState::Executing]
        );
        assert_eq!(c.record.user, USER);
    }
    assert!(f.vault.active_ops().unwrap().is_empty());
    assert!(f.vault.locks().all_tokens().unwrap().is_empty());
}

#[test]
fn empty_user_is_rejected() {
    let f = Fixture::new();
    assert!(matches!(f.vault.create_table(config("t", false, false), " "), Err(Error::InvalidArgument(_))));
    assert!(f.vault.completed_ops().unwrap().is_empty());
}

#[test]
fn instances_copy_builders_from_their_origin() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let v1 = f.generated("stories", None, &as_refs(&b));
    let (_, v2) = f.vault.create_instance("stories", Some(&v1.to_string()), None, USER).unwrap();
    for name in ["gen_ids.yaml", "title.yaml"] {
        let a = std::fs::read(f.root().join(format!("stories/{v1}/builders/{name}"))).unwrap();
        let b = std::fs::read(f.root().join(format!("stories/{v2}/builders/{name}"))).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(f.vault.instance_meta("stories", &v2.to_string()).unwrap().origin, Some(v1));

    let (_, v3) = f.vault.create_instance("stories", None, Some("draft"), USER).unwrap();
    assert_eq!(std::fs::read_dir(f.root().join(format!("stories/{v3}/builders"))).unwrap().count(), 0);
    assert!(matches!(
        f.vault.create_instance("stories", None, Some("draft"), USER),
        Err(Error::DuplicateExternalId(_))
    ));
    assert!(matches!(f.vault.create_instance("stories", Some("nope"), None, USER), Err(Error::NoSuchOrigin { .. })));
    assert!(matches!(f.vault.create_instance("missing", None, None, USER), Err(Error::NoSuchTable(_))));
    // The external id works as a selector.
    assert_eq!(f.vault.instance_meta("stories", "draft").unwrap().instance, v3);
}

#[test]
fn concurrent_creations_with_one_external_id_admit_one() {
    let f = Fixture::new();
    f.table("t", true);
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4).map(|_| s.spawn(|| f.vault.create_instance("t", None, Some("x"), USER))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
    assert_eq!(f.vault.list_instances("t").unwrap().len(), 1);
}

#[test]
fn copy_builders_is_all_or_nothing() {
    let f = Fixture::new();
    f.table("stories", false);
    let id = f.instance("stories", None, &[]);
    let src = f.builders("bad", &[("gen_ids.yaml", &range_gen("id", 3)), ("broken.yaml", "changed_columns: [x\n")]);
    let err = f.vault.copy_builders("stories", &id.to_string(), &src, USER).unwrap_err();
    assert!(matches!(err, Error::Builder(_)), "{err:?}");
    assert!(err.to_string().contains("broken.yaml"), "{err}");
    assert_eq!(std::fs::read_dir(f.root().join(format!("stories/{id}/builders"))).unwrap().count(), 0);

    let empty = f.builders("empty", &[]);
    assert!(matches!(f.vault.copy_builders("stories", &id.to_string(), &empty, USER), Err(Error::InvalidArgument(_))));

    let good = f.builders("good", &[("gen_ids.yaml", &range_gen("id", 3))]);
    f.vault.copy_builders("stories", &id.to_string(), &good.join("gen_ids.yaml"), USER).unwrap();
    f.vault.generate("stories", &id.to_string(), USER, false).unwrap();
    let err = f.vault.copy_builders("stories", &id.to_string(), &good, USER).unwrap_err();
    assert!(matches!(err, Error::InstanceNotEditable { .. }), "{err:?}");
}

#[test]
fn generation_supersedes_the_active_instance() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let v1 = f.generated("stories", None, &as_refs(&b));
    let (id, df) = f.vault.read_dataframe("stories", None).unwrap();
    assert_eq!(id, v1);
    assert_eq!(df.nrows(), 10);
    assert_eq!(df.get(3, "title"), Some(&Cell::Str("story 3".into())));

    let v2 = f.generated("stories", Some(&v1.to_string()), &[]);
    assert_eq!(f.vault.active_instances("stories").unwrap(), vec![v2.clone()]);
    let m1 = f.vault.instance_meta("stories", &v1.to_string()).unwrap();
    assert!(!m1.active && m1.phase == Phase::Materialized);
    // The superseded instance stays readable by id.
    assert_eq!(f.vault.read_dataframe("stories", Some(&v1.to_string())).unwrap().1, df);
    assert_eq!(f.vault.read_dataframe("stories", None).unwrap().0, v2);

    f.table("multi", true);
    let a = f.generated("multi", None, &as_refs(&b));
    let c = f.generated("multi", None, &as_refs(&b));
    assert_eq!(f.vault.active_instances("multi").unwrap(), vec![a, c]);
}

#[test]
fn generate_requires_a_created_instance_with_builders() {
    let f = Fixture::new();
    f.table("stories", false);
    let id = f.instance("stories", None, &[]);
    let err = f.vault.generate("stories", &id.to_string(), USER, false).unwrap_err();
    assert!(matches!(err, Error::Builder(_)), "{err:?}");
    let meta = f.vault.instance_meta("stories", &id.to_string()).unwrap();
    assert_eq!(meta.phase, Phase::Created);

    let failing = row_builder("title", "fail_at", "{row: 4}");
    let id = f.instance("stories", None, &[("gen_ids.yaml", &range_gen("id", 10)), ("title.yaml", &failing)]);
    let before = tree_digest(&f.root());
    let err = f.vault.generate("stories", &id.to_string(), USER, false).unwrap_err();
    assert!(matches!(err, Error::ExecutorFailure { row: Some(4), .. }), "{err:?}");
    assert_eq!(tree_digest(&f.root()), before);
    assert!(matches!(f.vault.read_dataframe("stories", None), Err(Error::NotMaterialized { .. })));
}

#[test]
fn concurrent_generation_is_refused_unless_allowed() {
    for allowed in [false, true] {
        let f = Fixture::new();
        f.vault.create_table(config("t", true, allowed), USER).unwrap();
        let b = story_builders();
        let a = f.instance("t", None, &as_refs(&b));
        let c = f.instance("t", None, &as_refs(&b));
        f.mock.set_delay(Some(SLOW));
        let op = f.vault.generate("t", &a.to_string(), USER, true).unwrap();
        until("first generation to execute", || executing(&f.vault));
        f.mock.set_delay(None);
        let second = f.vault.generate("t", &c.to_string(), USER, false);
        if allowed {
            second.unwrap();
        } else {
            assert!(matches!(second, Err(Error::ConcurrentExecForbidden(_))), "{second:?}");
        }
        assert_eq!(f.vault.wait(&op).unwrap().outcome, Outcome::Complete);
    }
}

#[test]
fn deletion_keeps_builders_and_execution_times() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let id = f.generated("stories", None, &as_refs(&b));
    let executed_at = f.vault.instance_meta("stories", &id.to_string()).unwrap().executed_at;
    f.vault.delete_instance("stories", &id.to_string(), USER).unwrap();
    let meta = f.vault.instance_meta("stories", &id.to_string()).unwrap();
    assert_eq!((meta.phase, meta.active, meta.executed_at), (Phase::Deleted, false, executed_at));
    assert!(f.root().join(format!("stories/{id}/builders/gen_ids.yaml")).is_file());
    assert!(!f.root().join(format!("stories/{id}/dataframe.tv")).exists());
    assert!(matches!(f.vault.read_dataframe("stories", Some(&id.to_string())), Err(Error::NotMaterialized { .. })));
    assert!(matches!(f.vault.read_dataframe("stories", None), Err(Error::NotMaterialized { .. })));
    assert!(matches!(
        f.vault.delete_instance("stories", &id.to_string(), USER),
        Err(Error::InstanceNotEditable { .. })
    ));
    assert_eq!(f.vault.lineage_records().unwrap().len(), 1);

    f.vault.delete_table("stories", USER).unwrap();
    assert!(f.vault.list_tables().unwrap()[0].deleted_at.is_some());
    assert!(matches!(f.vault.create_instance("stories", None, None, USER), Err(Error::TableDeleted(_))));
    assert!(matches!(f.vault.delete_table("stories", USER), Err(Error::TableDeleted(_))));
    assert!(matches!(f.vault.delete_table("nothing", USER), Err(Error::NoSuchTable(_))));
}

#[test]
fn deleting_an_executing_target_is_busy() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let id = f.instance("stories", None, &as_refs(&b));
    f.mock.set_delay(Some(SLOW));
    let op = f.vault.generate("stories", &id.to_string(), USER, true).unwrap();
    until("generation to execute", || executing(&f.vault));
    assert!(matches!(f.vault.delete_table("stories", USER), Err(Error::TargetBusy(_))));
    assert!(matches!(f.vault.delete_instance("stories", &id.to_string(), USER), Err(Error::TargetBusy(_))));
    f.mock.set_delay(None);
    f.vault.wait(&op).unwrap();
    f.vault.delete_table("stories", USER).unwrap();
}

#[test]
fn stop_rolls_back_to_the_exact_prior_bytes() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let id = f.instance("stories", None, &as_refs(&b));
    let before = tree_digest(&f.root());
    f.mock.set_delay(Some(SLOW));
    let op = f.vault.generate("stories", &id.to_string(), USER, true).unwrap();
    until("a few rows", || f.mock.calls_for("title.yaml") >= 3);
    f.vault.stop_op(op.as_str(), StopMode::Rollback, "bob").unwrap();
    let rec = f.vault.wait(&op).unwrap();
    assert_eq!(rec.outcome, Outcome::RolledBack);
    let err = rec.error.unwrap();
    assert_eq!(err.code, "Stopped");
    assert!(err.message.contains("bob"), "{}", err.message);
    assert_eq!(tree_digest(&f.root()), before);
    assert!(matches!(f.vault.stop_op(op.as_str(), StopMode::Rollback, USER), Err(Error::NoSuchOp(_))));
    assert!(matches!(f.vault.stop_op("not-an-op", StopMode::Rollback, USER), Err(Error::NoSuchOp(_))));
    assert!(f.vault.active_ops().unwrap().is_empty());
}

#[test]
fn stop_with_keep_progress_leaves_a_partial_instance() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let id = f.instance("stories", None, &as_refs(&b));
    f.mock.set_delay(Some(SLOW));
    let op = f.vault.generate("stories", &id.to_string(), USER, true).unwrap();
    until("a few rows", || f.mock.calls_for("title.yaml") >= 3);
    f.vault.stop_op(op.as_str(), StopMode::KeepProgress, USER).unwrap();
    assert_eq!(f.vault.wait(&op).unwrap().outcome, Outcome::RolledBack);
    f.mock.set_delay(None);

    let meta = f.vault.instance_meta("stories", &id.to_string()).unwrap();
    assert_eq!((meta.phase, meta.active), (Phase::Created, false));
    assert!(matches!(f.vault.read_dataframe("stories", Some(&id.to_string())), Err(Error::NotMaterialized { .. })));
    let partial = f.vault.read_partial("stories", &id.to_string()).unwrap();
    assert_eq!(partial.nrows(), 10);
    let done = (0..10).filter(|&r| !partial.get(r, "title").unwrap().is_empty()).count();
    assert!((1..10).contains(&done), "{done} rows computed");

    // The instance can still be generated to completion.
    f.vault.generate("stories", &id.to_string(), USER, false).unwrap();
    assert_eq!(f.vault.read_dataframe("stories", None).unwrap().1.nrows(), 10);
}

#[test]
fn live_operations_cannot_be_restarted() {
    let f = Fixture::new();
    f.table("stories", false);
    let b = story_builders();
    let id = f.instance("stories", None, &as_refs(&b));
    f.mock.set_delay(Some(SLOW));
    let op = f.vault.generate("stories", &id.to_string(), USER, true).unwrap();
    until("generation to execute", || executing(&f.vault));
    assert!(matches!(f.vault.restart_op(op.as_str(), USER), Err(Error::AlreadyRunning { .. })));
    assert!(matches!(f.vault.restart_vault(), Err(Error::AlreadyRunning { .. })));
    let ps = f.vault.active_ops().unwrap();
    assert_eq!(ps.len(), 1);
    assert!(ps[0].alive && ps[0].record.op_type == OpType::Generate);
    f.mock.set_delay(None);
    f.vault.wait(&op).unwrap();
    assert!(matches!(f.vault.restart_op(op.as_str(), USER), Err(Error::NoSuchOp(_))));
}

fn chain(f: &Fixture) {
    f.table("docs", false);
    f.table("summaries", false);
    f.generated(
        "docs",
        None,
        &[
            ("gen_docs.yaml", &range_gen("doc_id", 4)),
            ("text.yaml", &row_builder("text", "format", "{template: \"document {key}\"}")),
        ],
    );
    f.generated(
        "summaries",
        None,
        &[
            ("gen_sum.yaml", "changed_columns: [doc_id]\ncolumn_dtype: {doc_id: int}\nfunction: {executor: mock, entry: echo}\narguments: {doc_id: \"<<docs.doc_id>>\"}\n"),
            ("summary.yaml", &row_builder("summary", "upper", "{value: \"<<docs.text[INDEX :: SELF.INDEX]>>\"}")),
        ],
    );
}

#[test]
fn generations_pin_and_trace_their_inputs() {
    let f = Fixture::new();
    chain(&f);
    let (_, df) = f.vault.read_dataframe("summaries", None).unwrap();
    assert_eq!(df.nrows(), 4);
    assert_eq!(df.get(2, "summary"), Some(&Cell::Str("DOCUMENT 2".into())));

    let docs = f.vault.active_instances("docs").unwrap()[0].clone();
    let sums = f.vault.active_instances("summaries").unwrap()[0].clone();
    let node = f.vault.lineage("summaries", &sums.to_string()).unwrap();
    assert_eq!(node.upstream.len(), 1);
    assert_eq!((node.upstream[0].table.as_str(), &node.upstream[0].instance), ("docs", &docs));
    assert!(node.upstream[0].upstream.is_empty());
    assert_eq!(f.vault.instance_meta("summaries", &sums.to_string()).unwrap().dependency_pins["docs"], docs);
    let records = f.vault.lineage_records().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1].pins["docs"], docs);
}

#[test]
fn unchanged_regeneration_makes_no_calls() {
    let f = Fixture::new();
    chain(&f);
    let sums = f.vault.active_instances("summaries").unwrap()[0].to_string();
    let before = f.vault.read_dataframe("summaries", None).unwrap().1;
    f.mock.reset();
    f.generated("summaries", Some(&sums), &[]);
    assert_eq!(f.mock.call_count(), 0);
    assert_eq!(f.vault.read_dataframe("summaries", None).unwrap().1, before);
}

#[test]
fn artifacts_are_served_under_lock() {
    let f = Fixture::new();
    f.table("files", false);
    let art = "changed_columns: [doc]\ncolumn_dtype: {doc: artifact}\nfunction: {executor: mock, entry: artifact}\narguments: {content: \"body <<SELF.id[INDEX :: SELF.INDEX]>>\"}\n";
    let id = f.generated("files", None, &[("gen_ids.yaml", &range_gen("id", 3)), ("doc.yaml", art)]);
    let (_, df) = f.vault.read_dataframe("files", None).unwrap();
    let Some(Cell::Artifact(path)) = df.get(1, "doc") else { panic!("{:?}", df.get(1, "doc")) };
    let bytes = f.vault.fetch_artifact("files", &id.to_string(), path).unwrap();
    assert_eq!(bytes, b"body 1");
    assert!(matches!(f.vault.fetch_artifact("files", &id.to_string(), "../config.yaml"), Err(Error::PathEscape(_))));
}

#[test]
fn parallel_generations_on_disjoint_tables() {
    let f = Fixture::new();
    let b = story_builders();
    let ids: Vec<_> = (0..4)
        .map(|i| {
            let t = format!("t{i}");
            f.table(&t, false);
            (t.clone(), f.instance(&t, None, &as_refs(&b)))
        })
        .collect();
    let ops: Vec<_> = ids.iter().map(|(t, id)| f.vault.generate(t, &id.to_string(), USER, true).unwrap()).collect();
    for op in ops {
        assert_eq!(f.vault.wait(&op).unwrap().outcome, Outcome::Complete);
    }
    for (t, id) in ids {
        assert_eq!(f.vault.read_dataframe(&t, None).unwrap().0, id);
    }
}
