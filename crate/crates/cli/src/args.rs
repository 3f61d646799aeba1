use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vault", version, about = "Versioned, builder-generated tables in a local vault")]
pub struct Cli {
    /// Vault directory.
    #[arg(long, global = true, env = "VAULT_PATH")]
    pub vault: Option<PathBuf>,
    /// User recorded on write operations. Defaults to the OS user.
    #[arg(long, global = true, env = "VAULT_USER")]
    pub user: Option<String>,
    /// How long to wait for a lock before failing with Timeout.
    #[arg(long, global = true, env = "VAULT_LOCK_TIMEOUT_MS", value_name = "MS")]
    pub lock_timeout_ms: Option<u64>,
    /// Print one JSON document instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create an empty vault.
    Init {
        /// Directory to create; defaults to --vault.
        path: Option<PathBuf>,
    },
    #[command(subcommand)]
    Table(TableCmd),
    #[command(subcommand)]
    Instance(InstanceCmd),
    #[command(subcommand)]
    Builders(BuildersCmd),
    /// List active operations.
    Ps,
    /// List finished operations.
    Log {
        /// Only the last N records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Stop an active operation.
    Stop {
        op_id: String,
        /// Keep the last checkpoint of a generation instead of rolling back.
        #[arg(long)]
        keep_progress: bool,
    },
    /// Resume an interrupted generation.
    RestartOp { op_id: String },
    /// Recover every interrupted operation.
    RestartVault,
    /// Block until an operation finishes.
    Wait { op_id: String },
    #[command(subcommand)]
    Df(DfCmd),
    #[command(subcommand)]
    Artifact(ArtifactCmd),
    #[command(subcommand)]
    Lineage(LineageCmd),
}

#[derive(Subcommand, Debug)]
pub enum TableCmd {
    Create {
        name: String,
        /// Allow several active instances.
        #[arg(long)]
        multi_active: bool,
        /// Allow generations of different instances to overlap.
        #[arg(long)]
        allow_concurrent_exec: bool,
        /// Free-text note about external state this table depends on.
        #[arg(long)]
        side_effect_note: Option<String>,
    },
    Delete {
        name: String,
    },
    List,
}

#[derive(Subcommand, Debug)]
pub enum InstanceCmd {
    Create {
        table: String,
        /// Instance whose builders are copied.
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        external_id: Option<String>,
    },
    Delete {
        table: String,
        instance: String,
    },
    Generate(GenerateArgs),
    List {
        table: String,
    },
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    pub table: String,
    pub instance: String,
    /// Return the operation id immediately and run detached.
    #[arg(long, conflicts_with = "wait")]
    pub background: bool,
    /// Block until the generation finishes (the default).
    #[arg(long)]
    pub wait: bool,
}

#[derive(Subcommand, Debug)]
pub enum BuildersCmd {
    /// Copy `.yaml` builders from a directory or a single file.
    Copy { table: String, instance: String, src: PathBuf },
}

#[derive(Subcommand, Debug)]
pub enum DfCmd {
    /// Print a dataframe; the latest active instance when none is given.
    Get {
        table: String,
        instance: Option<String>,
        /// Do not truncate cell text.
        #[arg(long)]
        full: bool,
        /// Read the last checkpoint of an unmaterialized instance.
        #[arg(long, requires = "instance")]
        partial: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum ArtifactCmd {
    /// Write an artifact's bytes to stdout or a file.
    Get {
        table: String,
        instance: String,
        /// Cell value, e.g. `artifacts/doc/<digest>/doc.txt`.
        cell: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum LineageCmd {
    Show { table: String, instance: String },
}
