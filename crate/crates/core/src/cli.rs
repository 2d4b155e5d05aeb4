//! `vault` command line.
//!
//! Settings resolve as: command-line flag, then environment variable, then
//! the `--config` file (`KEY=VALUE` lines using the environment variable
//! names), then the built-in default.
//!
//! Exit codes: 0 success, 1 domain failure, 2 environment failure.

use std::collections::HashMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;

use crate::access::{issue_token, Principal, Role};
use crate::auditor::{Auditor, ProbeTarget, DEFAULT_EARLY_STOP, DEFAULT_MAX_SEQUENTIAL};
use crate::metadata::{consistency_sweep, DocId, MetadataStore, StoreError};
use crate::placement::{materialize_layout, verify_layout, PlacementError, PlacementPolicy};
use crate::service::config::{DEFAULT_BIND, DEFAULT_MAX_UPLOAD};
use crate::service::{http, ServiceConfig, Vault, VaultError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_ENVIRONMENT: i32 = 2;

const CONFIG_KEYS: &[&str] = &[
    "VAULT_BIND",
    "VAULT_WEBROOT",
    "VAULT_DIR",
    "VAULT_POLICY",
    "VAULT_KEY_FILE",
    "VAULT_STORE",
    "VAULT_MAX_UPLOAD",
];

#[derive(Debug, Parser)]
#[command(name = "vault", version, about = "Protected document vault and exposure auditor")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// KEY=VALUE file using the VAULT_* variable names
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "VAULT_BIND")]
    pub bind: Option<String>,
    #[arg(long, global = true, env = "VAULT_WEBROOT")]
    pub webroot: Option<PathBuf>,
    #[arg(long, global = true, env = "VAULT_DIR")]
    pub vault_dir: Option<PathBuf>,
    /// outside-webroot, denied-subdir or obscured-subdir
    #[arg(long, global = true, env = "VAULT_POLICY")]
    pub policy: Option<String>,
    #[arg(long, global = true, env = "VAULT_KEY_FILE")]
    pub key_file: Option<PathBuf>,
    #[arg(long, global = true, env = "VAULT_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, env = "VAULT_MAX_UPLOAD")]
    pub max_upload: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the vault directory and its protection files
    Init {
        /// Overwrite protection files whose content differs
        #[arg(long)]
        force: bool,
    },
    /// Run the HTTP service
    Serve,
    /// Store a local file
    Ingest {
        file: PathBuf,
        #[arg(long)]
        owner: String,
        /// Original filename to record (defaults to the file's name)
        #[arg(long)]
        name: Option<String>,
    },
    /// List documents
    Ls {
        #[arg(long)]
        owner: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write a document's content to a file or stdout
    Get {
        doc_id: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Delete a document
    Rm { doc_id: String },
    /// Manage API tokens
    Token {
        #[command(subcommand)]
        action: TokenAction,
    },
    /// Probe a web-exposed directory for protection gaps
    Audit(AuditArgs),
    /// Cross-check records, blobs and protection files
    Fsck {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenAction {
    Create {
        #[arg(long)]
        user: String,
        #[arg(long, default_value = "user")]
        role: Role,
    },
    Revoke { token_id: String },
    List,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    pub base_url: String,
    /// Comma-separated extensions for the sequential probe
    #[arg(long, value_delimiter = ',', default_value = "pdf")]
    pub ext: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_SEQUENTIAL)]
    pub max_seq: u32,
    #[arg(long, default_value_t = DEFAULT_EARLY_STOP)]
    pub early_stop: u32,
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
    /// File with one known document name per line
    #[arg(long)]
    pub known_names: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

/// A failed command: message for stderr plus exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    fn environment(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_ENVIRONMENT,
            message: message.into(),
        }
    }
}

impl From<VaultError> for CliError {
    fn from(e: VaultError) -> Self {
        match e {
            VaultError::TooLarge { .. }
            | VaultError::DuplicateOpaqueName
            | VaultError::NotFound
            | VaultError::BlobMissing
            | VaultError::RangeNotSatisfiable { .. }
            | VaultError::Invalid(_) => CliError::failure(e.to_string()),
            _ => CliError::environment(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::environment(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::environment(e.to_string())
    }
}

pub fn parse_config_file(text: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected KEY=VALUE", i + 1))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(format!("line {}: unknown key {key}", i + 1));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.insert(key.to_string(), value.to_string());
    }
    Ok(out)
}

fn absolute(path: PathBuf) -> Result<PathBuf, CliError> {
    std::path::absolute(&path)
        .map_err(|e| CliError::environment(format!("{}: {e}", path.display())))
}

impl GlobalArgs {
    /// Resolves the service configuration from flags, environment and the
    /// config file.
    pub fn resolve(&self) -> Result<ServiceConfig, CliError> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::environment(format!("{}: {e}", path.display())))?;
                parse_config_file(&text).map_err(CliError::environment)?
            }
            None => HashMap::new(),
        };
        let from_file = |key: &str| file.get(key).cloned();
        let required_path = |flag: &Option<PathBuf>, key: &str| -> Result<PathBuf, CliError> {
            let path = flag
                .clone()
                .or_else(|| from_file(key).map(PathBuf::from))
                .ok_or_else(|| CliError::environment(format!("{key} is not set")))?;
            absolute(path)
        };

        let policy = match self.policy.clone().or_else(|| from_file("VAULT_POLICY")) {
            Some(p) => p
                .parse::<PlacementPolicy>()
                .map_err(|e| CliError::environment(e.to_string()))?,
            None => PlacementPolicy::OutsideWebRoot,
        };
        let max_upload_bytes = match self.max_upload {
            Some(n) => n,
            None => match from_file("VAULT_MAX_UPLOAD") {
                Some(v) => v
                    .parse()
                    .map_err(|_| CliError::environment("VAULT_MAX_UPLOAD must be an integer"))?,
                None => DEFAULT_MAX_UPLOAD,
            },
        };
        let key_file = match self
            .key_file
            .clone()
            .or_else(|| from_file("VAULT_KEY_FILE").map(PathBuf::from))
        {
            Some(p) => Some(absolute(p)?),
            None => None,
        };

        let config = ServiceConfig {
            bind_address: self
                .bind
                .clone()
                .or_else(|| from_file("VAULT_BIND"))
                .unwrap_or_else(|| DEFAULT_BIND.to_string()),
            webroot: required_path(&self.webroot, "VAULT_WEBROOT")?,
            vault_dir: required_path(&self.vault_dir, "VAULT_DIR")?,
            policy,
            key_file,
            store_path: required_path(&self.store, "VAULT_STORE")?,
            max_upload_bytes,
        };
        config
            .validate()
            .map_err(|e| CliError::environment(e.to_string()))?;
        Ok(config)
    }
}

fn operator() -> Principal {
    Principal::new("operator", Role::Admin).expect("static principal is valid")
}

fn parse_doc_id(raw: &str) -> Result<DocId, CliError> {
    raw.parse()
        .map_err(|_| CliError::failure(format!("malformed document id {raw:?}")))
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let filter = match cli.command {
        Command::Serve => "info",
        _ => "warn",
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(io::stderr)
        .try_init();

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ENVIRONMENT;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match runtime.block_on(run(cli, &mut out)) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub async fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Audit(args) => cmd_audit(args, out).await,
        Command::Init { force } => cmd_init(&cli.global.resolve()?, force, out),
        Command::Fsck { json } => cmd_fsck(&cli.global.resolve()?, json, out),
        Command::Token { action } => cmd_token(&cli.global.resolve()?, action, out),
        Command::Serve => cmd_serve(&cli.global.resolve()?, out).await,
        Command::Ingest { file, owner, name } => {
            let vault = Vault::open(&cli.global.resolve()?)?;
            let principal = Principal::new(owner, Role::User).map_err(CliError::failure)?;
            let original = match name {
                Some(n) => n,
                None => file
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| CliError::failure("cannot derive a filename; pass --name"))?,
            };
            let source = tokio::fs::File::open(&file)
                .await
                .map_err(|e| CliError::failure(format!("{}: {e}", file.display())))?;
            let record = vault.upload(&principal, &original, source).await?;
            writeln!(out, "{}", record.doc_id)?;
            Ok(EXIT_OK)
        }
        Command::Ls { owner, json } => {
            let vault = Vault::open(&cli.global.resolve()?)?;
            let records = match &owner {
                Some(o) => vault.store().list_by_owner(Some(o), None, usize::MAX).records,
                None => vault.store().all_records(),
            };
            if json {
                let views: Vec<http::DocumentView> = records.iter().map(Into::into).collect();
                serde_json::to_writer_pretty(&mut *out, &views)
                    .map_err(|e| CliError::environment(e.to_string()))?;
                writeln!(out)?;
            } else {
                for r in &records {
                    writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}\t{}",
                        r.doc_id, r.owner, r.size_bytes, r.upload_timestamp, r.media_type, r.original_filename
                    )?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Get { doc_id, output } => {
            let vault = Vault::open(&cli.global.resolve()?)?;
            let doc_id = parse_doc_id(&doc_id)?;
            let mut stream = vault.download(&operator(), &doc_id, None).await?.body;
            match output {
                Some(path) => {
                    let mut file = std::fs::File::create(&path)?;
                    while let Some(chunk) = stream.next().await {
                        file.write_all(&chunk?)?;
                    }
                    file.sync_all()?;
                }
                None => {
                    while let Some(chunk) = stream.next().await {
                        out.write_all(&chunk?)?;
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Rm { doc_id } => {
            let vault = Vault::open(&cli.global.resolve()?)?;
            let doc_id = parse_doc_id(&doc_id)?;
            vault.delete_document(&operator(), &doc_id).await?;
            writeln!(out, "deleted {doc_id}")?;
            Ok(EXIT_OK)
        }
    }
}

pub fn cmd_init(config: &ServiceConfig, force: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let layout = config
        .validate()
        .map_err(|e| CliError::environment(e.to_string()))?;
    let result = match materialize_layout(&layout, force) {
        Ok(r) => r,
        Err(e @ (PlacementError::ArtifactConflict { .. } | PlacementError::IoFailure { .. })) => {
            return Err(CliError::failure(e.to_string()))
        }
        Err(e) => return Err(CliError::environment(e.to_string())),
    };
    MetadataStore::open(&config.store_path)?;
    writeln!(out, "policy: {}", layout.policy())?;
    for action in &result.actions {
        writeln!(out, "{action}")?;
    }
    if result.already_compliant() {
        writeln!(out, "already compliant")?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_fsck(config: &ServiceConfig, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let layout = config
        .validate()
        .map_err(|e| CliError::environment(e.to_string()))?;
    let store = MetadataStore::open(&config.store_path)?;
    let report = consistency_sweep(&store, layout.vault_dir(), layout.artifact_names())?;
    let violations = verify_layout(&layout).map_err(|e| CliError::environment(e.to_string()))?;
    let clean = report.is_clean() && violations.is_empty();

    if json {
        let value = serde_json::json!({
            "clean": clean,
            "records": store.len(),
            "sweep": report,
            "layout_violations": violations.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        });
        serde_json::to_writer_pretty(&mut *out, &value)
            .map_err(|e| CliError::environment(e.to_string()))?;
        writeln!(out)?;
    } else {
        writeln!(out, "records: {}", store.len())?;
        for id in &report.dangling_records {
            writeln!(out, "dangling record: {id} (blob missing)")?;
        }
        for id in &report.size_mismatches {
            writeln!(out, "size mismatch: {id}")?;
        }
        for m in &report.checksum_mismatches {
            writeln!(
                out,
                "checksum mismatch: {} (expected sha256 {}, found {})",
                m.doc_id, m.expected, m.actual
            )?;
        }
        for name in &report.orphan_blobs {
            writeln!(out, "orphan blob: {name}")?;
        }
        for name in &report.stale_temp_files {
            writeln!(out, "stale upload temp file: {name}")?;
        }
        for v in &violations {
            writeln!(out, "layout violation: {v}")?;
        }
        writeln!(out, "{}", if clean { "clean" } else { "inconsistent" })?;
    }
    Ok(if clean { EXIT_OK } else { EXIT_FAILURE })
}

pub fn cmd_token(config: &ServiceConfig, action: TokenAction, out: &mut dyn Write) -> Result<i32, CliError> {
    let store = MetadataStore::open(&config.store_path)?;
    match action {
        TokenAction::Create { user, role } => {
            let principal = Principal::new(user, role).map_err(CliError::failure)?;
            let issued = issue_token(&store, principal)?;
            writeln!(out, "token_id: {}", issued.token_id)?;
            writeln!(out, "token: {}", issued.plaintext)?;
            Ok(EXIT_OK)
        }
        TokenAction::Revoke { token_id } => {
            if store.revoke_token(&token_id)? {
                writeln!(out, "revoked {token_id}")?;
                Ok(EXIT_OK)
            } else {
                Err(CliError::failure(format!("unknown token {token_id}")))
            }
        }
        TokenAction::List => {
            for t in store.tokens() {
                writeln!(out, "{}\t{}\t{}", t.token_id, t.principal.username(), t.principal.role())?;
            }
            Ok(EXIT_OK)
        }
    }
}

async fn cmd_serve(config: &ServiceConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let vault = Arc::new(Vault::open(config)?);
    for v in vault.verify_layout()? {
        tracing::warn!("layout violation: {v}");
    }
    let listener = tokio::net::TcpListener::bind(&config.bind_address)
        .await
        .map_err(|e| CliError::environment(format!("bind {}: {e}", config.bind_address)))?;
    writeln!(out, "listening on {}", listener.local_addr()?)?;
    out.flush()?;
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    http::serve(listener, vault, shutdown).await?;
    Ok(EXIT_OK)
}

fn read_known_names(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::environment(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

async fn cmd_audit(args: AuditArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let invalid = |e: crate::auditor::AuditError| CliError::environment(e.to_string());
    let target = ProbeTarget::new(&args.base_url)
        .map_err(invalid)?
        .extensions(&args.ext)
        .map_err(invalid)?
        .max_sequential(args.max_seq)
        .map_err(invalid)?
        .early_stop(args.early_stop)
        .request_delay(Duration::from_millis(args.delay_ms));
    let known = match &args.known_names {
        Some(p) => read_known_names(p)?,
        None => Vec::new(),
    };
    let report = Auditor::new().run_audit(&target, &known).await;
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &report)
            .map_err(|e| CliError::environment(e.to_string()))?;
        writeln!(out)?;
    } else {
        writeln!(out, "{report}")?;
    }
    Ok(report.exit_code())
}
