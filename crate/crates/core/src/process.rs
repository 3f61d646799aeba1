//! Process identity with start-time to defeat pid reuse.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessId {
    pub pid: u32,
    /// Process start time in clock ticks since boot (0 when unavailable).
    pub start: u64,
}

impl ProcessId {
    pub fn current() -> Self {
        let pid = std::process::id();
        Self { pid, start: stat(pid).map(|s| s.1).unwrap_or(0) }
    }

    pub fn is_current(&self) -> bool {
        *self == Self::current()
    }

    /// True if a process with this pid exists, is not a zombie, and started
    /// at the recorded time.
    pub fn is_alive(&self) -> bool {
        match stat(self.pid) {
            Some((state, start)) => !matches!(state, 'Z' | 'X' | 'x') && (self.start == 0 || start == self.start),
            None => false,
        }
    }
}

/// `(state, starttime)` from `/proc/<pid>/stat`.
fn stat(pid: u32) -> Option<(char, u64)> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name may contain spaces or parens; fields resume after the last ')'.
    let rest = &text[text.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let state = fields.first()?.chars().next()?;
    let start = fields.get(19)?.parse().ok()?;
    Some((state, start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn current_process_is_alive() {
        let me = ProcessId::current();
        assert!(me.is_alive());
        assert!(me.is_current());
    }

    #[test]
    fn reused_pid_with_other_start_is_dead() {
        let mut me = ProcessId::current();
        me.start += 1;
        assert!(!me.is_alive());
    }

    #[test]
    fn exited_child_is_dead() {
        let mut child = std::process::Command::new("true").spawn().unwrap();
        let id = child.id();
        child.wait().unwrap();
        assert!(!ProcessId { pid: id, start: 0 }.is_alive());
    }
}
