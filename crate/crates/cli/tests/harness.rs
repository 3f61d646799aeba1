//! The harness oracles against the real binary and against broken wrappers.

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use vault_harness::runner::Runner;
use vault_harness::scenario::Scenario;
use vault_harness::{crash_matrix, interleave, scenarios_dir};

const BIN: &str = env!("CARGO_BIN_EXE_vault");

fn scenario(kind: &str, name: &str) -> Scenario {
    Scenario::load_dir(&scenarios_dir(kind))
        .unwrap()
        .into_iter()
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("no {kind} scenario {name}"))
}

/// A shell script that runs `body`, with `$VAULT` naming the real binary.
fn wrapper(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("vault-wrapper");
    std::fs::write(&path, format!("#!/bin/sh\nVAULT='{BIN}'\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn crash_matrix_passes_on_one_scenario() {
    let report = crash_matrix::run(&Runner::new(BIN), &[scenario("crash", "generate_rows")]).unwrap();
    assert!(report.violations().is_empty(), "{:?}", report.violations());
    assert!(report.cases.len() > 10, "{}", report.summary());
}

#[test]
fn crash_matrix_flags_a_recovery_that_does_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bin = wrapper(
        dir.path(),
        r#"for a in "$@"; do
  if [ "$a" = restart-vault ]; then echo '{"ok":true,"result":[]}'; exit 0; fi
done
exec "$VAULT" "$@""#,
    );
    let report = crash_matrix::run(&Runner::new(bin), &[scenario("crash", "generate_rows")]).unwrap();
    assert!(!report.violations().is_empty(), "{}", report.summary());
}

#[test]
fn interleaving_passes_on_one_mix() {
    let report = interleave::run(&Runner::new(BIN), &[scenario("interleave", "supersede_and_delete")], 6).unwrap();
    assert!(report.violations().is_empty(), "{:?}", report.violations());
}

#[test]
fn interleaving_flags_a_write_no_serial_order_makes() {
    let dir = tempfile::tempdir().unwrap();
    // Only concurrent runs set the executor delay.
    let bin = wrapper(
        dir.path(),
        r#""$VAULT" "$@"
status=$?
if [ -n "$VAULT_MOCK_DELAY_MS" ] && [ "$2" = table ] && [ "$3" = create ]; then
  "$VAULT" table create shadow >/dev/null 2>&1
fi
exit $status"#,
    );
    let report = interleave::run(&Runner::new(bin), &[scenario("interleave", "supersede_and_delete")], 3).unwrap();
    assert_eq!(report.violations().len(), 3, "{}", report.summary());
}
