//! Crash injection at every durable-write site an operation reaches.
//!
//! For each scenario the operation first runs once with a site trace. Each
//! traced hit `label#n` is then replayed on a fresh copy of the prepared
//! vault with `VAULT_CRASH_AT=label#n`, followed by `vault restart-vault`.
//! The recovered vault must equal one of two references, and the records
//! it appended to the completed log, ignoring rollbacks, must agree with
//! the same reference:
//!
//! * before: the prepared vault after `restart-vault` alone;
//! * after: the vault after the uncrashed operation and `restart-vault`.
//!
//! It must also carry no residue (see [`crate::state::residue`]).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vault_core::crash::{CRASH_AT_ENV, CRASH_TRACE_ENV};
use vault_core::ids::OpId;
use vault_core::oplog::OpLog;
use vault_core::store::Store;

use crate::runner::{copy_tree, Ended, Runner};
use crate::scenario::{Line, Scenario};
use crate::state::{capture, residue, VaultState};

/// `(op type, outcome)` of each record a run appended to the completed log.
type Appended = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Recovered to the state before the operation.
    Before,
    /// Recovered to the state after the operation.
    After,
    /// The process finished without reaching the site.
    NotReached,
    Violation(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct Case {
    pub scenario: String,
    /// `label#n`, the value of `VAULT_CRASH_AT` that reproduces the case.
    pub crash_at: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub scenarios: usize,
    pub cases: Vec<Case>,
    /// Labels at which at least one crash was injected and recovered.
    pub sites: BTreeSet<String>,
    pub elapsed: Duration,
}

impl Report {
    pub fn violations(&self) -> Vec<&Case> {
        self.cases.iter().filter(|c| matches!(c.verdict, Verdict::Violation(_))).collect()
    }

    pub fn summary(&self) -> String {
        let count = |v: fn(&Verdict) -> bool| self.cases.iter().filter(|c| v(&c.verdict)).count();
        format!(
            "{} scenarios, {} sites, {} crashes: {} before, {} after, {} not reached, {} violations, {:.1}s",
            self.scenarios,
            self.sites.len(),
            self.cases.len(),
            count(|v| *v == Verdict::Before),
            count(|v| *v == Verdict::After),
            count(|v| *v == Verdict::NotReached),
            count(|v| matches!(v, Verdict::Violation(_))),
            self.elapsed.as_secs_f64(),
        )
    }
}

/// One recovered vault, reduced to what the oracle compares.
#[derive(Debug, PartialEq)]
struct Outcome {
    state: VaultState,
    appended: Appended,
}

impl Outcome {
    /// An interrupted operation that was rolled back leaves only a record.
    fn matches(&self, reference: &Outcome) -> bool {
        let kept = |a: &Appended| a.iter().filter(|(_, o)| o != "ROLLED_BACK").cloned().collect::<Vec<_>>();
        self.state == reference.state && kept(&self.appended) == kept(&reference.appended)
    }
}

fn completed_ids(vault: &Path) -> Result<HashSet<OpId>> {
    if !vault.exists() {
        return Ok(HashSet::new());
    }
    let store = Store::open(vault)?;
    Ok(OpLog::new(&store.metadata_dir()).completed_ops()?.into_iter().map(|c| c.record.op_id).collect())
}

fn observe(vault: &Path, known: &HashSet<OpId>) -> Result<Outcome> {
    if !vault.exists() {
        return Ok(Outcome { state: capture(vault)?, appended: Vec::new() });
    }
    let store = Store::open(vault)?;
    let mut appended: Appended = OpLog::new(&store.metadata_dir())
        .completed_ops()?
        .into_iter()
        .filter(|c| !known.contains(&c.record.op_id))
        .map(|c| (c.record.op_type.as_str().to_string(), c.outcome.as_str().to_string()))
        .collect();
    appended.sort();
    Ok(Outcome { state: capture(vault)?, appended })
}

/// Recover a vault; a path that was never created needs nothing.
fn restart(runner: &Runner, vault: &Path) -> Result<()> {
    if !vault.exists() {
        return Ok(());
    }
    let line = Line { env: vec![], args: vec!["restart-vault".into()] };
    match runner.run(vault, &line)? {
        Ended::Exited(Ok(())) => Ok(()),
        other => bail!("restart-vault ended with {other:?}"),
    }
}

/// `label#n` for every hit in a trace file, in order.
pub fn hits(trace: &str) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    trace
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let n = seen.entry(l).or_insert(0);
            *n += 1;
            format!("{l}#{n}")
        })
        .collect()
}

struct Prepared {
    dir: tempfile::TempDir,
    vault: PathBuf,
    line: Line,
    known: HashSet<OpId>,
    before: Outcome,
    after: Outcome,
    hits: Vec<String>,
}

fn prepare(runner: &Runner, scenario: &Scenario) -> Result<Prepared> {
    let Some(op) = &scenario.op else { bail!("{}: no op", scenario.name) };
    let dir = tempfile::tempdir()?;
    let vault = runner.prepare(scenario, dir.path())?;
    let line = runner.line(op, &vault, &dir.path().join("data"))?;
    let known = completed_ids(&vault)?;

    let before_vault = dir.path().join("before");
    copy_tree(&vault, &before_vault)?;
    restart(runner, &before_vault)?;
    let before = observe(&before_vault, &known)?;

    let after_vault = dir.path().join("after");
    copy_tree(&vault, &after_vault)?;
    let trace = dir.path().join("trace");
    let mut traced = line.clone();
    traced.env.push((CRASH_TRACE_ENV.into(), trace.display().to_string()));
    if let Ended::Died = runner.run(&after_vault, &traced)? {
        bail!("{}: the uncrashed operation died", scenario.name);
    }
    restart(runner, &after_vault)?;
    let after = observe(&after_vault, &known)?;
    let hits = hits(&std::fs::read_to_string(&trace).unwrap_or_default());
    Ok(Prepared { dir, vault, line, known, before, after, hits })
}

fn crash_case(runner: &Runner, p: &Prepared, index: usize, crash_at: &str) -> Result<Verdict> {
    let vault = p.dir.path().join(format!("case-{index}"));
    copy_tree(&p.vault, &vault)?;
    let mut line = p.line.clone();
    line.env.push((CRASH_AT_ENV.into(), crash_at.into()));
    let ended = runner.run(&vault, &line)?;
    let verdict = if ended != Ended::Died {
        Verdict::NotReached
    } else if let Err(e) = restart(runner, &vault) {
        Verdict::Violation(format!("recovery failed: {e:#}"))
    } else {
        match observe(&vault, &p.known).and_then(|got| Ok((got, residue(&vault)?))) {
            Err(e) => Verdict::Violation(format!("unreadable after recovery: {e:#}")),
            Ok((got, left)) => judge(p, got, left),
        }
    };
    if vault.exists() {
        std::fs::remove_dir_all(&vault).with_context(|| vault.display().to_string())?;
    }
    Ok(verdict)
}

fn judge(p: &Prepared, got: Outcome, left: Vec<String>) -> Verdict {
    if !left.is_empty() {
        Verdict::Violation(format!("residue after recovery: {}", left.join("; ")))
    } else if got.matches(&p.after) {
        Verdict::After
    } else if got.matches(&p.before) {
        Verdict::Before
    } else if got.state == p.after.state || got.state == p.before.state {
        Verdict::Violation(format!(
            "state matches a reference but the log does not: got {:?}, before {:?}, after {:?}",
            got.appended, p.before.appended, p.after.appended
        ))
    } else {
        Verdict::Violation(format!("recovered state is neither before nor after: {}", diff(&got.state, p)))
    }
}

fn diff(got: &VaultState, p: &Prepared) -> String {
    let show = |s: &VaultState| serde_json::to_string(s).unwrap_or_default();
    format!("got {}, before {}, after {}", show(got), show(&p.before.state), show(&p.after.state))
}

pub fn run_scenario(runner: &Runner, scenario: &Scenario) -> Result<Vec<Case>> {
    let p = prepare(runner, scenario)?;
    let mut cases = Vec::new();
    for (i, crash_at) in p.hits.iter().enumerate() {
        let verdict = crash_case(runner, &p, i, crash_at)?;
        cases.push(Case { scenario: scenario.name.clone(), crash_at: crash_at.clone(), verdict });
    }
    Ok(cases)
}

pub fn run(runner: &Runner, scenarios: &[Scenario]) -> Result<Report> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for s in scenarios {
        cases.extend(run_scenario(runner, s).with_context(|| format!("scenario {}", s.name))?);
    }
    let sites = cases
        .iter()
        .filter(|c| matches!(c.verdict, Verdict::Before | Verdict::After))
        .map(|c| c.crash_at.split('#').next().unwrap_or_default().to_string())
        .collect();
    Ok(Report { scenarios: scenarios.len(), cases, sites, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_are_numbered_per_label() {
        let t = "a\nb\na\n\na\n";
        assert_eq!(hits(t), vec!["a#1", "b#1", "a#2", "a#3"]);
    }
}
