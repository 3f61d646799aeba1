//! The `vault` command. Each subcommand maps onto one library call.
//!
//! Exit codes: 0 when the operation completed, 1 when it failed or was
//! rolled back, 2 for usage errors. With `--json` every invocation prints
//! exactly one document: `{"ok": true, "result": ...}` or
//! `{"ok": false, "error": {"code": ..., "message": ...}}`.

mod args;
mod render;

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};

use clap::Parser;
use serde_json::{json, Value as Json};
use vault_core::ids::OpId;
use vault_core::oplog::Outcome;
use vault_core::ops::{StopMode, Vault, VaultOptions};
use vault_core::store::TableConfig;

pub use args::Cli;
use args::*;

/// Set in the detached child that runs a `--background` generation.
const BACKGROUND_ENV: &str = "VAULT_BACKGROUND_CHILD";
/// Truncation width for cell text in human dataframe output.
const CELL_WIDTH: usize = 80;

struct Failure {
    code: String,
    message: String,
    exit: i32,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: "Usage".into(), message: message.into(), exit: 2 }
    }
}

impl From<vault_core::Error> for Failure {
    fn from(e: vault_core::Error) -> Self {
        Failure { code: e.code().into(), message: e.to_string(), exit: 1 }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: "IoFailure".into(), message: e.to_string(), exit: 1 }
    }
}

/// What a successful command prints.
struct Reply {
    json: Json,
    text: String,
}

impl Reply {
    fn new(json: Json, text: impl Into<String>) -> Self {
        Reply { json, text: text.into() }
    }

    fn op(op: &OpId) -> Self {
        Reply::new(json!({ "op_id": op }), op.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `argv` (including the program name), run it, print the result and
/// return the exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let json_mode = argv.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) if json_mode => return emit_failure(true, &Failure::usage(e.to_string().trim())),
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let json_mode = cli.json;
    let result = dispatch(cli);
    if std::env::var_os(BACKGROUND_ENV).is_some() {
        // The parent stopped reading after the op id.
        return result.map_or_else(|f| f.exit, |_| 0);
    }
    match result {
        Ok(Some(reply)) => {
            let mut out = std::io::stdout().lock();
            if json_mode {
                let _ = writeln!(out, "{}", json!({ "ok": true, "result": reply.json }));
            } else if !reply.text.is_empty() {
                let _ = writeln!(out, "{}", reply.text.trim_end_matches('\n'));
            }
            0
        }
        Ok(None) => 0,
        Err(f) => emit_failure(json_mode, &f),
    }
}

fn emit_failure(json_mode: bool, f: &Failure) -> i32 {
    if json_mode {
        println!("{}", json!({ "ok": false, "error": { "code": f.code, "message": f.message } }));
    } else {
        eprintln!("error[{}]: {}", f.code, f.message);
    }
    f.exit
}

fn vault_path(cli_path: &Option<PathBuf>) -> CliResult<PathBuf> {
    cli_path.clone().ok_or_else(|| Failure::usage("no vault path: pass --vault or set VAULT_PATH"))
}

fn user(cli_user: &Option<String>) -> CliResult<String> {
    cli_user
        .clone()
        .or_else(|| std::env::var("USER").ok())
        .or_else(|| std::env::var("USERNAME").ok())
        .filter(|u| !u.trim().is_empty())
        .ok_or_else(|| Failure::usage("no user: pass --user or set VAULT_USER"))
}

fn dispatch(cli: Cli) -> CliResult<Option<Reply>> {
    if let Command::Init { path } = &cli.command {
        let path = path.clone().map_or_else(|| vault_path(&cli.vault), Ok)?;
        Vault::init(&path)?;
        let shown = path.display().to_string();
        return Ok(Some(Reply::new(json!({ "path": shown }), format!("initialized vault at {shown}"))));
    }
    let mut options = VaultOptions::default();
    if let Some(ms) = cli.lock_timeout_ms {
        options.lock_timeout = std::time::Duration::from_millis(ms);
    }
    let vault = Vault::open_with(&vault_path(&cli.vault)?, options)?;
    let reply = match cli.command {
        Command::Init { .. } => unreachable!("handled above"),
        Command::Table(cmd) => table(&vault, &cli.user, cmd)?,
        Command::Instance(InstanceCmd::Generate(args)) => return generate(&vault, &cli.user, args),
        Command::Instance(cmd) => instance(&vault, &cli.user, cmd)?,
        Command::Builders(BuildersCmd::Copy { table, instance, src }) => {
            Reply::op(&vault.copy_builders(&table, &instance, &src, &user(&cli.user)?)?)
        }
        Command::Ps => {
            let ops = vault.active_ops()?;
            Reply::new(serde_json::to_value(&ops).expect("serializable"), render::active_ops(&ops))
        }
        Command::Log { limit } => {
            let mut done = vault.completed_ops()?;
            if let Some(n) = limit {
                done.drain(..done.len().saturating_sub(n));
            }
            Reply::new(serde_json::to_value(&done).expect("serializable"), render::completed_ops(&done))
        }
        Command::Stop { op_id, keep_progress } => {
            let mode = if keep_progress { StopMode::KeepProgress } else { StopMode::Rollback };
            vault.stop_op(&op_id, mode, &user(&cli.user)?)?;
            Reply::new(json!({ "op_id": op_id, "stopped": true }), format!("stopped {op_id}"))
        }
        Command::RestartOp { op_id } => {
            vault.restart_op(&op_id, &user(&cli.user)?)?;
            Reply::new(json!({ "op_id": op_id }), op_id)
        }
        Command::RestartVault => {
            let done = vault.restart_vault()?;
            Reply::new(serde_json::to_value(&done).expect("serializable"), render::recovered(&done))
        }
        Command::Wait { op_id } => {
            let op: OpId = op_id.parse().map_err(|_| vault_core::Error::NoSuchOp(op_id.clone()))?;
            let rec = vault.wait(&op)?;
            if rec.outcome != Outcome::Complete {
                let (code, reason) = rec.error.map_or(("RolledBack".into(), String::new()), |e| (e.code, e.message));
                return Err(Failure { code, message: format!("operation {op} was rolled back: {reason}"), exit: 1 });
            }
            Reply::new(serde_json::to_value(&rec).expect("serializable"), format!("{op} {}", rec.outcome.as_str()))
        }
        Command::Df(DfCmd::Get { table, instance, full, partial }) => {
            let width = if full { None } else { Some(CELL_WIDTH) };
            let (id, data) = if partial {
                let sel = instance.expect("clap requires instance with --partial");
                let data = vault.read_partial(&table, &sel)?;
                (vault.instance_meta(&table, &sel)?.instance, data)
            } else {
                vault.read_dataframe(&table, instance.as_deref())?
            };
            let doc = json!({ "table": table, "instance": id, "data": data.to_json() });
            Reply::new(doc, data.render(width))
        }
        Command::Artifact(ArtifactCmd::Get { table, instance, cell, output }) => {
            let bytes = vault.fetch_artifact(&table, &instance, &cell)?;
            return artifact(bytes, output.as_deref(), cli.json).map(Some);
        }
        Command::Lineage(LineageCmd::Show { table, instance }) => {
            let node = vault.lineage(&table, &instance)?;
            Reply::new(serde_json::to_value(&node).expect("serializable"), render::lineage(&node))
        }
    };
    Ok(Some(reply))
}

fn table(vault: &Vault, cli_user: &Option<String>, cmd: TableCmd) -> CliResult<Reply> {
    Ok(match cmd {
        TableCmd::Create { name, multi_active, allow_concurrent_exec, side_effect_note } => {
            let config = TableConfig { name, multi_active, allow_concurrent_exec, side_effect_note };
            Reply::op(&vault.create_table(config, &user(cli_user)?)?)
        }
        TableCmd::Delete { name } => Reply::op(&vault.delete_table(&name, &user(cli_user)?)?),
        TableCmd::List => {
            let tables = vault.list_tables()?;
            Reply::new(serde_json::to_value(&tables).expect("serializable"), render::tables(&tables))
        }
    })
}

fn instance(vault: &Vault, cli_user: &Option<String>, cmd: InstanceCmd) -> CliResult<Reply> {
    Ok(match cmd {
        InstanceCmd::Create { table, origin, external_id } => {
            let (op, id) =
                vault.create_instance(&table, origin.as_deref(), external_id.as_deref(), &user(cli_user)?)?;
            Reply::new(json!({ "op_id": op, "instance": id }), id.to_string())
        }
        InstanceCmd::Delete { table, instance } => {
            Reply::op(&vault.delete_instance(&table, &instance, &user(cli_user)?)?)
        }
        InstanceCmd::List { table } => {
            let metas = vault.list_instances(&table)?;
            Reply::new(serde_json::to_value(&metas).expect("serializable"), render::instances(&metas))
        }
        InstanceCmd::Generate(_) => unreachable!("dispatched separately"),
    })
}

fn generate(vault: &Vault, cli_user: &Option<String>, args: GenerateArgs) -> CliResult<Option<Reply>> {
    let user = user(cli_user)?;
    if std::env::var_os(BACKGROUND_ENV).is_some() {
        // Detached child: report the op id to the parent, then run.
        let mut out = std::io::stdout();
        let pending = match vault.begin_generate(&args.table, &args.instance, &user) {
            Ok(p) => p,
            Err(e) => {
                let f = Failure::from(e);
                let _ = writeln!(out, "err {}", json!({ "code": f.code, "message": f.message }));
                return Err(f);
            }
        };
        let _ = writeln!(out, "op {}", pending.op_id());
        let _ = out.flush();
        pending.run()?;
        return Ok(None);
    }
    if args.background {
        let op = spawn_background()?;
        return Ok(Some(Reply::new(json!({ "op_id": op, "background": true }), op)));
    }
    Ok(Some(Reply::op(&vault.generate(&args.table, &args.instance, &user, false)?)))
}

/// Re-run this command detached and return the op id it reports.
fn spawn_background() -> CliResult<String> {
    use std::os::unix::process::CommandExt;
    let exe = std::env::current_exe()?;
    let mut child = Process::new(exe)
        .args(std::env::args_os().skip(1))
        .env(BACKGROUND_ENV, "1")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .process_group(0)
        .spawn()?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    let line = line.trim_end();
    if let Some(op) = line.strip_prefix("op ") {
        return Ok(op.to_string());
    }
    if let Some(Ok(err)) = line.strip_prefix("err ").map(serde_json::from_str::<Json>) {
        return Err(Failure {
            code: err["code"].as_str().unwrap_or("Unknown").into(),
            message: err["message"].as_str().unwrap_or_default().into(),
            exit: 1,
        });
    }
    let status = child.wait()?;
    Err(Failure {
        code: "BackgroundFailed".into(),
        message: format!("background worker exited with {status}"),
        exit: 1,
    })
}

fn artifact(bytes: Vec<u8>, output: Option<&Path>, json_mode: bool) -> CliResult<Reply> {
    match output {
        Some(path) => {
            std::fs::write(path, &bytes)?;
            let shown = path.display().to_string();
            Ok(Reply::new(
                json!({ "output": shown, "bytes": bytes.len() }),
                format!("wrote {} bytes to {shown}", bytes.len()),
            ))
        }
        None if json_mode => {
            let text = String::from_utf8(bytes).map_err(|_| Failure {
                code: "BinaryArtifact".into(),
                message: "artifact is not UTF-8; use --output".into(),
                exit: 1,
            })?;
            Ok(Reply::new(json!({ "content": text }), String::new()))
        }
        None => {
            std::io::stdout().write_all(&bytes)?;
            Ok(Reply::new(Json::Null, String::new()))
        }
    }
}
