use std::io::Write;
use std::process::{Command, Stdio};

use super::executor::{CallContext, Executor, Request, Response};

/// Runs `entry` (split shell-style) in the builders folder, writes the
/// request as JSON to its stdin and reads a JSON response from its stdout.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProcessExecutor;

impl Executor for ProcessExecutor {
    fn call(&self, ctx: &CallContext, req: &Request) -> Result<Response, String> {
        let argv = shell_words::split(&req.entry).map_err(|e| format!("bad entry {:?}: {e}", req.entry))?;
        let (program, rest) = argv.split_first().ok_or("empty entry")?;
        let mut child = Command::new(program)
            .args(rest)
            .current_dir(&ctx.builders_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn {program}: {e}"))?;
        let body = serde_json::to_vec(req).expect("request serializes");
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&body);
        });
        let out = child.wait_with_output().map_err(|e| format!("wait {program}: {e}"))?;
        let _ = writer.join();
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr.trim().chars().rev().take(500).collect::<Vec<_>>().into_iter().rev().collect();
            return Err(format!("{program} exited with {}: {tail}", out.status));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| format!("{program}: bad response: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ctx() -> CallContext {
        CallContext { table: "t".into(), builder: "b.yaml".into(), builders_dir: std::env::temp_dir() }
    }

    fn req(entry: &str) -> Request {
        Request {
            entry: entry.into(),
            args: json!({"x": "hello world"}).as_object().unwrap().clone(),
            columns: vec!["c".into()],
            row_key: None,
            row_index: Some(3),
            row_keys: None,
        }
    }

    #[test]
    fn identity_script_round_trips_args() {
        let script = r#"python3 -c 'import json,sys; r=json.load(sys.stdin); print(json.dumps({"cells": {"c": r["args"]["x"]}}))'"#;
        let resp = ProcessExecutor.call(&ctx(), &req(script)).unwrap();
        assert_eq!(resp.cells["c"], json!("hello world"));
    }

    #[test]
    fn nonzero_exit_is_a_failure() {
        let err = ProcessExecutor.call(&ctx(), &req("sh -c 'echo broken >&2; exit 3'")).unwrap_err();
        assert!(err.contains("broken"), "{err}");
        assert!(ProcessExecutor.call(&ctx(), &req("/no/such/program")).is_err());
        assert!(ProcessExecutor.call(&ctx(), &req("echo not-json")).is_err());
    }
}
