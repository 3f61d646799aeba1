//! Runs the `vault` binary against a vault directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use anyhow::{bail, Context, Result};
use serde_json::Value as Json;
use vault_core::oplog::OpLog;
use vault_core::store::Store;

use crate::scenario::{Line, Scenario};

pub const USER: &str = "harness";

/// How one invocation ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ended {
    /// `Ok` or the error code of the JSON document.
    Exited(std::result::Result<(), String>),
    /// Killed by a signal or aborted without a document.
    Died,
}

#[derive(Clone, Debug)]
pub struct Runner {
    bin: PathBuf,
}

impl Runner {
    pub fn new(bin: impl Into<PathBuf>) -> Self {
        Runner { bin: bin.into() }
    }

    pub fn command(&self, vault: &Path, line: &Line) -> Command {
        let mut cmd = Command::new(&self.bin);
        cmd.arg("--json")
            .args(&line.args)
            .env("VAULT_PATH", vault)
            .env("VAULT_USER", USER)
            .env_remove(vault_core::crash::CRASH_AT_ENV)
            .env_remove(vault_core::crash::CRASH_TRACE_ENV)
            .env_remove("VAULT_BACKGROUND_CHILD")
            .stdin(Stdio::null());
        for (k, v) in &line.env {
            cmd.env(k, v);
        }
        cmd
    }

    pub fn run(&self, vault: &Path, line: &Line) -> Result<Ended> {
        let out = self.command(vault, line).output().with_context(|| self.bin.display().to_string())?;
        Ok(ended(&out))
    }

    pub fn spawn(&self, vault: &Path, line: &Line) -> Result<Child> {
        self.command(vault, line)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .with_context(|| self.bin.display().to_string())
    }

    /// Create a vault under `dir/vault`, write the scenario files under
    /// `dir/data` and run the setup lines. Returns the vault path.
    pub fn prepare(&self, scenario: &Scenario, dir: &Path) -> Result<PathBuf> {
        let vault = dir.join("vault");
        let data = dir.join("data");
        std::fs::create_dir_all(&data)?;
        scenario.write_files(&data)?;
        let vars = vars(&data);
        if scenario.init {
            let init = Line { env: vec![], args: vec!["init".into()] };
            if self.run(&vault, &init)? != Ended::Exited(Ok(())) {
                bail!("{}: init failed", scenario.name);
            }
        }
        for text in &scenario.setup {
            let line = Line::parse(text, &vars)?;
            let ended = self.run(&vault, &line)?;
            match (line.expects_crash(), &ended) {
                (false, Ended::Exited(Ok(()))) | (true, Ended::Died) => {}
                _ => bail!("{}: setup line {text:?} ended with {ended:?}", scenario.name),
            }
        }
        scenario.write_vault_files(&vault)?;
        Ok(vault)
    }

    /// Parse a scenario line for a prepared vault and its data directory.
    pub fn line(&self, text: &str, vault: &Path, data: &Path) -> Result<Line> {
        let mut vars = vars(data);
        if text.contains("{active_op}") {
            let store = Store::open(vault)?;
            let active = OpLog::new(&store.metadata_dir()).active_ops()?;
            match active.as_slice() {
                [one] => vars.insert("active_op", one.op_id.to_string()),
                _ => bail!("{{active_op}} needs exactly one active operation, found {}", active.len()),
            };
        }
        Line::parse(text, &vars)
    }
}

fn vars(data: &Path) -> BTreeMap<&'static str, String> {
    BTreeMap::from([("data", data.display().to_string())])
}

pub fn ended(out: &Output) -> Ended {
    let doc = String::from_utf8_lossy(&out.stdout).lines().rev().find_map(|l| serde_json::from_str::<Json>(l).ok());
    match (out.status.code(), doc) {
        (Some(_), Some(doc)) if doc["ok"] == Json::Bool(true) => Ended::Exited(Ok(())),
        (Some(_), Some(doc)) => Ended::Exited(Err(doc["error"]["code"].as_str().unwrap_or("Unknown").to_string())),
        _ => Ended::Died,
    }
}

/// Recursive copy of a vault directory. An absent source copies nothing.
pub fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    if !src.exists() {
        return Ok(());
    }
    std::fs::create_dir_all(dst)?;
    for e in std::fs::read_dir(src).with_context(|| src.display().to_string())? {
        let e = e?;
        let to = dst.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_tree(&e.path(), &to)?;
        } else {
            std::fs::copy(e.path(), &to).with_context(|| e.path().display().to_string())?;
        }
    }
    Ok(())
}
