use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use serde_json::Value as Json;
use vault_core::ops::Vault;
use vault_core::store::TableConfig;

const BIN: &str = env!("CARGO_BIN_EXE_vault");

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Env { dir: tempfile::tempdir().unwrap() };
        assert!(env.run(&["init", env.vault().to_str().unwrap()]).status.success());
        env
    }

    fn vault(&self) -> PathBuf {
        self.dir.path().join("v")
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(BIN);
        c.env("VAULT_PATH", self.vault()).env("VAULT_USER", "carol").env_remove("VAULT_MOCK_DELAY_MS");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    /// Run and return stdout, asserting success.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    }

    fn json(&self, args: &[&str]) -> (i32, Json) {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let out = self.run(&full);
        let text = String::from_utf8(out.stdout).unwrap();
        let doc: Json = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{args:?}: {e}: {text:?}"));
        assert_eq!(text.trim().lines().count(), 1, "{args:?}");
        (out.status.code().unwrap(), doc)
    }

    fn builders(&self, name: &str, files: &[(&str, String)]) -> PathBuf {
        let dir = self.dir.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for (f, text) in files {
            std::fs::write(dir.join(f), text).unwrap();
        }
        dir
    }
}

fn story_builder(n: usize) -> String {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/story.py");
    format!(
        "changed_columns: [story_id, story]\ncolumn_dtype: {{story_id: int, story: string}}\nfunction: {{executor: process, entry: \"python3 {}\"}}\narguments: {{n: {n}, topic: a key}}\n",
        script.display()
    )
}

fn mock_builders(n: usize) -> Vec<(&'static str, String)> {
    vec![
        ("gen_k.yaml", format!("changed_columns: [k]\ncolumn_dtype: {{k: int}}\nfunction: {{executor: mock, entry: range}}\narguments: {{n: {n}}}\n")),
        ("t.yaml", "changed_columns: [t]\nfunction: {executor: mock, entry: format}\narguments: {template: \"row {index}\"}\n".into()),
    ]
}

#[test]
fn create_copy_generate_read() {
    let env = Env::new();
    env.ok(&["table", "create", "stories"]);
    let id = env.ok(&["instance", "create", "stories"]);
    let src = env.builders("test_data", &[("gen_stories.yaml", story_builder(5))]);
    env.ok(&["builders", "copy", "stories", &id, src.to_str().unwrap()]);
    env.ok(&["instance", "generate", "stories", &id]);
    let (code, doc) = env.json(&["df", "get", "stories"]);
    assert_eq!(code, 0);
    assert_eq!(doc["result"]["instance"], id.as_str());
    let stories = doc["result"]["data"]["story"].as_array().unwrap();
    assert_eq!(stories.len(), 5);
    assert!(stories[0].as_str().unwrap().starts_with("Once, a fox"));
    assert!(env.ok(&["df", "get", "stories", &id]).lines().count() == 6);
}

#[test]
fn idle_ps_and_empty_log() {
    let env = Env::new();
    assert_eq!(env.ok(&["ps"]), "no active operations");
    let (code, doc) = env.json(&["ps"]);
    assert_eq!((code, doc["ok"].as_bool(), doc["result"].as_array().map(Vec::len)), (0, Some(true), Some(0)));
    assert_eq!(env.json(&["log"]).1["result"], Json::Array(vec![]));
}

#[test]
fn exit_codes() {
    let env = Env::new();
    assert_eq!(env.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(env.run(&["table"]).status.code(), Some(2));
    let no_vault = Command::new(BIN).env_remove("VAULT_PATH").args(["ps"]).output().unwrap();
    assert_eq!(no_vault.status.code(), Some(2));
    env.ok(&["table", "create", "t"]);
    let dup = env.run(&["table", "create", "t"]);
    assert_eq!(dup.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&dup.stderr).contains("TableExists"));
    let (code, doc) = env.json(&["instance", "delete", "t", "nope"]);
    assert_eq!((code, doc["error"]["code"].as_str()), (1, Some("NoSuchInstance")));
    assert_eq!(env.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn every_subcommand_emits_one_document() {
    let env = Env::new();
    let src = env.builders("b", &mock_builders(3));
    let src = src.to_str().unwrap();
    let (_, created) = env.json(&["table", "create", "t", "--multi-active"]);
    assert!(created["result"]["op_id"].as_str().unwrap().starts_with("op-"));
    let (_, inst) = env.json(&["instance", "create", "t", "--external-id", "first"]);
    assert_eq!(inst["result"]["instance"].as_str().unwrap().split('_').nth(1), Some("first"));
    let art = env.builders("a", &[("a.yaml", "changed_columns: [a]\ncolumn_dtype: {a: artifact}\nfunction: {executor: mock, entry: artifact}\narguments: {content: hello}\n".into())]);
    env.ok(&["builders", "copy", "t", "first", src]);
    env.ok(&["builders", "copy", "t", "first", art.to_str().unwrap()]);
    env.ok(&["instance", "generate", "t", "first"]);
    let (_, df) = env.json(&["df", "get", "t", "first"]);
    let cell = df["result"]["data"]["a"][0].as_str().unwrap().to_string();

    let cases: Vec<Vec<&str>> = vec![
        vec!["table", "list"],
        vec!["instance", "list", "t"],
        vec!["ps"],
        vec!["log", "--limit", "2"],
        vec!["df", "get", "t"],
        vec!["df", "get", "t", "first", "--partial"],
        vec!["artifact", "get", "t", "first", &cell],
        vec!["lineage", "show", "t", "first"],
        vec!["restart-vault"],
        vec!["instance", "create", "t", "--origin", "first"],
        vec!["stop", "op-20200101T000000.000000-0000000000000000"],
        vec!["restart-op", "op-20200101T000000.000000-0000000000000000"],
        vec!["wait", "nonsense"],
        vec!["df", "get", "missing"],
        vec!["instance", "delete", "t", "first"],
        vec!["table", "delete", "t"],
    ];
    for args in cases {
        let (code, doc) = env.json(&args);
        assert_eq!(doc["ok"].as_bool() == Some(true), code == 0, "{args:?}: {doc}");
        assert!(doc.get("result").is_some() || doc["error"]["code"].is_string(), "{args:?}: {doc}");
    }
    let (_, art_doc) = env.json(&["artifact", "get", "t", "first", &cell]);
    assert_eq!(art_doc["error"]["code"], "ArtifactMissing");
}

#[test]
fn artifact_bytes_go_to_stdout_or_a_file() {
    let env = Env::new();
    env.ok(&["table", "create", "t"]);
    let id = env.ok(&["instance", "create", "t"]);
    let src = env.builders("b", &[
        ("gen_k.yaml", mock_builders(2)[0].1.clone()),
        ("a.yaml", "changed_columns: [a]\ncolumn_dtype: {a: artifact}\nfunction: {executor: mock, entry: artifact}\narguments: {content: \"hello <<SELF.k[INDEX :: SELF.INDEX]>>\"}\n".into()),
    ]);
    env.ok(&["builders", "copy", "t", &id, src.to_str().unwrap()]);
    env.ok(&["instance", "generate", "t", &id]);
    let cell = env.json(&["df", "get", "t"]).1["result"]["data"]["a"][1].as_str().unwrap().to_string();
    assert_eq!(env.ok(&["artifact", "get", "t", &id, &cell]), "hello 1");
    let out = env.dir.path().join("out.txt");
    env.ok(&["artifact", "get", "t", &id, &cell, "-o", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(out).unwrap(), b"hello 1");
}

#[test]
fn background_generation_can_be_stopped() {
    let env = Env::new();
    env.ok(&["table", "create", "t"]);
    let id = env.ok(&["instance", "create", "t"]);
    let src = env.builders("b", &mock_builders(40));
    env.ok(&["builders", "copy", "t", &id, src.to_str().unwrap()]);
    let out = env
        .cmd()
        .env("VAULT_MOCK_DELAY_MS", "100")
        .args(["instance", "generate", "t", &id, "--background"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let op = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let start = std::time::Instant::now();
    loop {
        let (_, ps) = env.json(&["ps"]);
        let states: Vec<&str> = ps["result"].as_array().unwrap().iter().filter_map(|r| r["state"].as_str()).collect();
        if states == ["EXECUTING"] {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "{ps}");
        std::thread::sleep(Duration::from_millis(20));
    }
    env.ok(&["stop", &op]);
    let (code, doc) = env.json(&["wait", &op]);
    assert_eq!((code, doc["error"]["code"].as_str()), (1, Some("Stopped")));
    let (_, log) = env.json(&["log"]);
    let last = log["result"].as_array().unwrap().last().unwrap().clone();
    assert_eq!((last["op_id"].as_str(), last["outcome"].as_str()), (Some(op.as_str()), Some("ROLLED_BACK")));
    assert_eq!(env.ok(&["ps"]), "no active operations");
    let (_, listed) = env.json(&["instance", "list", "t"]);
    assert_eq!(listed["result"][0]["phase"], "CREATED");
}

#[test]
fn lineage_tree_keeps_deleted_upstream() {
    let env = Env::new();
    env.ok(&["table", "create", "docs"]);
    env.ok(&["table", "create", "summaries"]);
    let docs = env.ok(&["instance", "create", "docs"]);
    env.ok(&["builders", "copy", "docs", &docs, env.builders("d", &mock_builders(2)).to_str().unwrap()]);
    env.ok(&["instance", "generate", "docs", &docs]);
    let sums = env.ok(&["instance", "create", "summaries"]);
    let src = env.builders("s", &[
        ("gen_s.yaml", "changed_columns: [k]\ncolumn_dtype: {k: int}\nfunction: {executor: mock, entry: echo}\narguments: {k: \"<<docs.k>>\"}\n".into()),
        ("s.yaml", "changed_columns: [s]\nfunction: {executor: mock, entry: upper}\narguments: {value: \"<<docs.t[INDEX :: SELF.INDEX]>>\"}\n".into()),
    ]);
    env.ok(&["builders", "copy", "summaries", &sums, src.to_str().unwrap()]);
    env.ok(&["instance", "generate", "summaries", &sums]);
    let tree = env.ok(&["lineage", "show", "summaries", &sums]);
    let heads: Vec<&str> = tree.lines().filter(|l| !l.trim_start().contains(".yaml")).collect();
    assert_eq!(heads, [format!("summaries({sums})  MATERIALIZED"), format!("    <- docs({docs})  MATERIALIZED")]);
    assert_eq!(env.ok(&["lineage", "show", "docs", &docs]).lines().filter(|l| !l.contains(".yaml")).count(), 1);

    env.ok(&["instance", "delete", "docs", &docs]);
    let tree = env.ok(&["lineage", "show", "summaries", &sums]);
    assert!(tree.contains(&format!("<- docs({docs})  DELETED")), "{tree}");
}

#[test]
fn cli_and_library_record_the_same_operation() {
    let env = Env::new();
    env.ok(&["table", "create", "t", "--allow-concurrent-exec", "--side-effect-note", "uploads"]);
    let lib_dir = tempfile::tempdir().unwrap();
    let lib = Vault::init(&lib_dir.path().join("v")).unwrap();
    let config = TableConfig {
        name: "t".into(),
        multi_active: false,
        allow_concurrent_exec: true,
        side_effect_note: Some("uploads".into()),
    };
    lib.create_table(config, "carol").unwrap();

    let strip = |mut v: Json| {
        let o = v.as_object_mut().unwrap();
        for k in ["op_id", "started_at", "finished_at", "history", "process"] {
            o.remove(k);
        }
        v
    };
    let via_cli = strip(env.json(&["log"]).1["result"][0].clone());
    let via_lib = strip(serde_json::to_value(&lib.completed_ops().unwrap()[0]).unwrap());
    assert_eq!(via_cli, via_lib);
    let read = |root: &Path| std::fs::read_to_string(root.join("t/config.yaml")).unwrap();
    let (a, b) = (read(&env.vault()), read(&lib_dir.path().join("v")));
    let drop_time = |s: String| s.lines().filter(|l| !l.starts_with("created_at")).collect::<Vec<_>>().join("\n");
    assert_eq!(drop_time(a), drop_time(b));
}
