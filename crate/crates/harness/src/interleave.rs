//! Concurrent CLI operations checked against serial executions.
//!
//! A trial starts every operation of a mix in its own process, each after a
//! seeded delay and with a seeded executor delay. Operations refused by
//! concurrency control (busy target, concurrent generation, lock timeout,
//! deadlock) count as not submitted. The trial passes when the final state
//! and the outcome of every other operation equal those of some serial
//! order of the same operations, run one after another on a copy of the
//! prepared vault.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use itertools::Itertools;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use vault_core::engine::MOCK_DELAY_ENV;

use crate::runner::{copy_tree, Ended, Runner};
use crate::scenario::{Line, Scenario};
use crate::state::{capture, residue, VaultState};

/// Error codes of operations refused because of another operation.
pub const CONCURRENCY_ABORTS: &[&str] = &["TargetBusy", "ConcurrentExecForbidden", "Timeout", "Deadlock"];

pub const MAX_OPS: usize = 4;
/// Upper bound of the start delay of each operation.
const START_JITTER_MS: u64 = 40;
/// Upper bound of the per-call executor delay of each operation.
const MOCK_JITTER_MS: u64 = 4;

#[derive(Clone, Debug, Serialize)]
pub struct Trial {
    pub mix: String,
    pub seed: u64,
    /// `ok` or the error code of each operation, in mix order.
    pub outcomes: Vec<String>,
    /// Indices of the serial order the trial matched.
    pub serial: Option<Vec<usize>>,
    pub violation: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub trials: Vec<Trial>,
    pub elapsed: Duration,
}

impl Report {
    pub fn violations(&self) -> Vec<&Trial> {
        self.trials.iter().filter(|t| t.violation.is_some()).collect()
    }

    /// Trials in which at least one operation was refused.
    pub fn contended(&self) -> usize {
        self.trials.iter().filter(|t| t.outcomes.iter().any(|o| CONCURRENCY_ABORTS.contains(&o.as_str()))).count()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} trials, {} with refusals, {} violations, {:.1}s",
            self.trials.len(),
            self.contended(),
            self.violations().len(),
            self.elapsed.as_secs_f64()
        )
    }
}

fn label(e: &Ended) -> String {
    match e {
        Ended::Exited(Ok(())) => "ok".into(),
        Ended::Exited(Err(code)) => code.clone(),
        Ended::Died => "died".into(),
    }
}

/// A prepared mix and its memoized serial executions.
pub struct Mix<'a> {
    runner: &'a Runner,
    scenario: &'a Scenario,
    dir: tempfile::TempDir,
    vault: PathBuf,
    lines: Vec<Line>,
    serial: HashMap<Vec<usize>, (VaultState, Vec<String>)>,
    runs: usize,
}

impl<'a> Mix<'a> {
    pub fn prepare(runner: &'a Runner, scenario: &'a Scenario) -> Result<Mix<'a>> {
        if scenario.ops.is_empty() || scenario.ops.len() > MAX_OPS {
            bail!("{}: a mix has 1 to {MAX_OPS} ops", scenario.name);
        }
        let dir = tempfile::tempdir()?;
        let vault = runner.prepare(scenario, dir.path())?;
        let data = dir.path().join("data");
        let lines = scenario.ops.iter().map(|o| runner.line(o, &vault, &data)).collect::<Result<_>>()?;
        Ok(Mix { runner, scenario, dir, vault, lines, serial: HashMap::new(), runs: 0 })
    }

    fn fresh_copy(&mut self) -> Result<PathBuf> {
        self.runs += 1;
        let dst = self.dir.path().join(format!("run-{}", self.runs));
        copy_tree(&self.vault, &dst)?;
        Ok(dst)
    }

    fn serial(&mut self, order: &[usize]) -> Result<&(VaultState, Vec<String>)> {
        if !self.serial.contains_key(order) {
            let vault = self.fresh_copy()?;
            let mut outcomes = Vec::new();
            for &i in order {
                outcomes.push(label(&self.runner.run(&vault, &self.lines[i])?));
            }
            let state = capture(&vault)?;
            std::fs::remove_dir_all(&vault)?;
            self.serial.insert(order.to_vec(), (state, outcomes));
        }
        Ok(&self.serial[order])
    }

    fn concurrent(&mut self, seed: u64) -> Result<(PathBuf, Vec<String>)> {
        let vault = self.fresh_copy()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let plan: Vec<(Duration, Line)> = self
            .lines
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.env.push((MOCK_DELAY_ENV.into(), rng.random_range(0..=MOCK_JITTER_MS).to_string()));
                (Duration::from_millis(rng.random_range(0..=START_JITTER_MS)), l)
            })
            .collect();
        let runner = self.runner;
        let outcomes = std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .iter()
                .map(|(delay, line)| {
                    let vault = &vault;
                    s.spawn(move || {
                        std::thread::sleep(*delay);
                        runner.run(vault, line)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("runner thread").map(|e| label(&e))).collect::<Result<Vec<_>>>()
        })?;
        Ok((vault, outcomes))
    }

    pub fn trial(&mut self, seed: u64) -> Result<Trial> {
        let (vault, outcomes) = self.concurrent(seed)?;
        let mut trial =
            Trial { mix: self.scenario.name.clone(), seed, outcomes: outcomes.clone(), serial: None, violation: None };
        let left = residue(&vault)?;
        if outcomes.iter().any(|o| o == "died") {
            trial.violation = Some("an operation died".into());
        } else if !left.is_empty() {
            trial.violation = Some(format!("residue: {}", left.join("; ")));
        } else {
            let state = capture(&vault)?;
            let submitted: Vec<usize> =
                (0..outcomes.len()).filter(|&i| !CONCURRENCY_ABORTS.contains(&outcomes[i].as_str())).collect();
            for order in submitted.iter().copied().permutations(submitted.len()) {
                let (serial_state, serial_outcomes) = self.serial(&order)?;
                let same_outcomes = order.iter().zip(serial_outcomes).all(|(&i, o)| &outcomes[i] == o);
                if same_outcomes && *serial_state == state {
                    trial.serial = Some(order);
                    break;
                }
            }
            if trial.serial.is_none() {
                trial.violation = Some(format!(
                    "no serial order of {submitted:?} yields outcomes {outcomes:?} and the final state {}",
                    serde_json::to_string(&state).unwrap_or_default()
                ));
            }
        }
        std::fs::remove_dir_all(&vault).with_context(|| vault.display().to_string())?;
        Ok(trial)
    }
}

/// Run `seeds` trials, spread round-robin over the mixes.
pub fn run(runner: &Runner, mixes: &[Scenario], seeds: u64) -> Result<Report> {
    let start = Instant::now();
    let mut prepared = mixes.iter().map(|m| Mix::prepare(runner, m)).collect::<Result<Vec<_>>>()?;
    if prepared.is_empty() {
        bail!("no mixes");
    }
    let mut trials = Vec::new();
    for seed in 0..seeds {
        let n = prepared.len();
        let mix = &mut prepared[(seed % n as u64) as usize];
        trials.push(mix.trial(seed).with_context(|| format!("seed {seed}"))?);
    }
    Ok(Report { trials, elapsed: start.elapsed() })
}
