//! Crash-injection matrix and interleaving search for a vault, driven
//! through the `vault` binary.

pub mod crash_matrix;
pub mod interleave;
pub mod runner;
pub mod scenario;
pub mod state;

use std::path::{Path, PathBuf};

/// Scenario directories shipped with this crate.
pub fn scenarios_dir(kind: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(kind)
}
