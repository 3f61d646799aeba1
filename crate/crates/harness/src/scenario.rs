//! Scenario files.
//!
//! ```yaml
//! name: generate_rows
//! files:                      # written under {data}
//!   builders/gen_ids.yaml: |
//!     ...
//! init: true                  # start from an empty vault (default)
//! setup:                      # CLI lines run once, in order
//!   - table create stories
//!   - instance create stories --external-id v1
//!   - builders copy stories v1 {data}/builders
//! vault_files:                # written into the vault after setup
//!   stories/.config.yaml.tmp-00000000: partial
//! op: instance generate stories v1      # crash matrix
//! ops: [...]                            # interleaving, up to four lines
//! ```
//!
//! A line may start with `NAME=value` words, which become environment
//! variables of that invocation. A setup line that sets `VAULT_CRASH_AT` is
//! expected to die. `{active_op}` in `op` names the single active operation
//! left by the setup.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    #[serde(default = "yes")]
    pub init: bool,
    #[serde(default)]
    pub setup: Vec<String>,
    #[serde(default)]
    pub vault_files: BTreeMap<String, String>,
    #[serde(default)]
    pub op: Option<String>,
    #[serde(default)]
    pub ops: Vec<String>,
}

/// One parsed CLI line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub env: Vec<(String, String)>,
    pub args: Vec<String>,
}

impl Line {
    pub fn parse(text: &str, vars: &BTreeMap<&str, String>) -> Result<Line> {
        let mut text = text.to_string();
        for (k, v) in vars {
            text = text.replace(&format!("{{{k}}}"), v);
        }
        let words = shell_words::split(&text).with_context(|| format!("line {text:?}"))?;
        let split = words.iter().take_while(|w| is_assignment(w)).count();
        let env = words[..split]
            .iter()
            .map(|w| {
                let (k, v) = w.split_once('=').expect("checked");
                (k.to_string(), v.to_string())
            })
            .collect();
        let args = words[split..].to_vec();
        if args.is_empty() {
            bail!("line {text:?} has no command");
        }
        Ok(Line { env, args })
    }

    pub fn expects_crash(&self) -> bool {
        self.env.iter().any(|(k, _)| k == vault_core::crash::CRASH_AT_ENV)
    }
}

fn yes() -> bool {
    true
}

fn is_assignment(word: &str) -> bool {
    match word.split_once('=') {
        Some((k, _)) => !k.is_empty() && k.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_'),
        None => false,
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        serde_yaml::from_str(&text).with_context(|| path.display().to_string())
    }

    /// Every `.yaml` file of `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Scenario>> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .with_context(|| dir.display().to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "yaml" || x == "yml"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Scenario::load(p)).collect()
    }

    /// Write `files` under `data`.
    pub fn write_files(&self, data: &Path) -> Result<()> {
        write_all(&self.files, data)
    }

    /// Write `vault_files` under the vault root.
    pub fn write_vault_files(&self, vault: &Path) -> Result<()> {
        write_all(&self.vault_files, vault)
    }
}

fn write_all(files: &BTreeMap<String, String>, base: &Path) -> Result<()> {
    for (rel, body) in files {
        let path = base.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, body).with_context(|| path.display().to_string())?;
    }
    Ok(())
}
