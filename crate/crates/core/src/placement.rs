//! Vault placement relative to the web server's document root.
//!
//! Three placements are supported, strongest first:
//!
//! * [`PlacementPolicy::OutsideWebRoot`]: blobs live where the web server
//!   cannot map any URL onto them.
//! * [`PlacementPolicy::DeniedSubdir`]: blobs live under the web root in a
//!   directory carrying a `.htaccess` that denies all HTTP access.
//! * [`PlacementPolicy::ObscuredSubdir`]: blobs live under the web root,
//!   shielded only by an `index.html` placeholder (no listing) and by their
//!   opaque names.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const DENY_CONFIG_FILE: &str = ".htaccess";
pub const INDEX_PLACEHOLDER_FILE: &str = "index.html";
pub const DEFAULT_PLACEHOLDER_MESSAGE: &str = "Access to this directory is forbidden";

const DENY_CONFIG: &[u8] = b"Order Deny,Allow\nDeny from all\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementPolicy {
    OutsideWebRoot,
    DeniedSubdir,
    ObscuredSubdir,
}

impl PlacementPolicy {
    pub const ALL: [PlacementPolicy; 3] = [
        PlacementPolicy::OutsideWebRoot,
        PlacementPolicy::DeniedSubdir,
        PlacementPolicy::ObscuredSubdir,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlacementPolicy::OutsideWebRoot => "outside-webroot",
            PlacementPolicy::DeniedSubdir => "denied-subdir",
            PlacementPolicy::ObscuredSubdir => "obscured-subdir",
        }
    }

    fn rule(self) -> Rule {
        match self {
            PlacementPolicy::OutsideWebRoot => Rule::R1a,
            PlacementPolicy::DeniedSubdir => Rule::R1b,
            PlacementPolicy::ObscuredSubdir => Rule::R2,
        }
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementPolicy {
    type Err = PlacementError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "outside-webroot" | "outside-web-root" | "outsidewebroot" => Ok(PlacementPolicy::OutsideWebRoot),
            "denied-subdir" | "deniedsubdir" => Ok(PlacementPolicy::DeniedSubdir),
            "obscured-subdir" | "obscuredsubdir" => Ok(PlacementPolicy::ObscuredSubdir),
            _ => Err(PlacementError::UnknownPolicy(s.to_string())),
        }
    }
}

/// Protection rule a placement or violation relates to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    /// Vault outside the web root.
    R1a,
    /// Deny configuration on the vault directory.
    R1b,
    /// Index placeholder suppressing listings.
    R2,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::R1a => "1(a)",
            Rule::R1b => "1(b)",
            Rule::R2 => "2",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlacementError {
    #[error("path {0} is not absolute")]
    RelativePath(PathBuf),
    #[error("policy {policy} requires the vault {expected} the web root")]
    PolicyPathMismatch {
        policy: PlacementPolicy,
        expected: &'static str,
    },
    #[error("unknown placement policy {0:?}")]
    UnknownPolicy(String),
    #[error("i/o failure on {path}: {cause}")]
    IoFailure { path: PathBuf, cause: io::Error },
    #[error("{path} exists with different content (use --force to overwrite)")]
    ArtifactConflict { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PlacementError + '_ {
    move |cause| PlacementError::IoFailure {
        path: path.to_path_buf(),
        cause,
    }
}

/// A protection file to be written, relative to the web root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub rel_path: PathBuf,
    pub content: Vec<u8>,
}

impl Artifact {
    fn rule(&self) -> Rule {
        if self.rel_path.file_name() == Some(DENY_CONFIG_FILE.as_ref()) {
            Rule::R1b
        } else {
            Rule::R2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaultLayout {
    policy: PlacementPolicy,
    webroot: PathBuf,
    vault_dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl VaultLayout {
    pub fn policy(&self) -> PlacementPolicy {
        self.policy
    }

    pub fn webroot(&self) -> &Path {
        &self.webroot
    }

    pub fn vault_dir(&self) -> &Path {
        &self.vault_dir
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    /// Filenames inside the vault directory that are protection artifacts
    /// rather than blobs.
    pub fn artifact_names(&self) -> impl Iterator<Item = &str> {
        self.artifacts
            .iter()
            .filter_map(|a| a.rel_path.file_name().and_then(|n| n.to_str()))
    }
}

/// Resolves `.` and `..` without touching the filesystem. `..` at the root
/// stays at the root.
pub fn normalize_lexically(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Component-wise containment: `/srv/www/html-evil` is not inside
/// `/srv/www/html`.
pub fn is_within(path: &Path, root: &Path) -> bool {
    normalize_lexically(path).starts_with(normalize_lexically(root))
}

pub fn plan_layout(
    policy: PlacementPolicy,
    webroot: &Path,
    vault_dir: &Path,
) -> Result<VaultLayout, PlacementError> {
    for p in [webroot, vault_dir] {
        if !p.is_absolute() {
            return Err(PlacementError::RelativePath(p.to_path_buf()));
        }
    }
    let webroot = normalize_lexically(webroot);
    let vault_dir = normalize_lexically(vault_dir);
    let inside = vault_dir.starts_with(&webroot);

    let artifacts = match policy {
        PlacementPolicy::OutsideWebRoot => {
            if inside {
                return Err(PlacementError::PolicyPathMismatch {
                    policy,
                    expected: "outside",
                });
            }
            Vec::new()
        }
        PlacementPolicy::DeniedSubdir | PlacementPolicy::ObscuredSubdir => {
            if !inside || vault_dir == webroot {
                return Err(PlacementError::PolicyPathMismatch {
                    policy,
                    expected: "in a subdirectory of",
                });
            }
            let rel = vault_dir
                .strip_prefix(&webroot)
                .expect("containment checked above")
                .to_path_buf();
            let mut artifacts = Vec::new();
            if policy == PlacementPolicy::DeniedSubdir {
                artifacts.push(Artifact {
                    rel_path: rel.join(DENY_CONFIG_FILE),
                    content: emit_deny_config(),
                });
            }
            artifacts.push(Artifact {
                rel_path: rel.join(INDEX_PLACEHOLDER_FILE),
                content: emit_index_placeholder(Some(DEFAULT_PLACEHOLDER_MESSAGE)),
            });
            artifacts
        }
    };

    Ok(VaultLayout {
        policy,
        webroot,
        vault_dir,
        artifacts,
    })
}

/// Directory-level deny configuration in the `.htaccess` dialect.
pub fn emit_deny_config() -> Vec<u8> {
    DENY_CONFIG.to_vec()
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Minimal HTML page used to suppress directory listings.
pub fn emit_index_placeholder(message: Option<&str>) -> Vec<u8> {
    let body = message.map(escape_html).unwrap_or_default();
    format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title></title></head>\n<body>{body}</body>\n</html>\n"
    )
    .into_bytes()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    CreatedDir(PathBuf),
    RestrictedPermissions(PathBuf),
    WroteArtifact(PathBuf),
    ArtifactUnchanged(PathBuf),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::CreatedDir(p) => write!(f, "created {}", p.display()),
            Action::RestrictedPermissions(p) => write!(f, "restricted permissions on {}", p.display()),
            Action::WroteArtifact(p) => write!(f, "wrote {}", p.display()),
            Action::ArtifactUnchanged(p) => write!(f, "unchanged {}", p.display()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaterializeResult {
    pub actions: Vec<Action>,
}

impl MaterializeResult {
    pub fn already_compliant(&self) -> bool {
        self.actions
            .iter()
            .all(|a| matches!(a, Action::ArtifactUnchanged(_)))
    }
}

#[cfg(unix)]
fn dir_mode(path: &Path) -> io::Result<u32> {
    use std::os::unix::fs::PermissionsExt;
    Ok(fs::metadata(path)?.permissions().mode() & 0o777)
}

#[cfg(unix)]
fn restrict_dir(path: &Path) -> io::Result<bool> {
    use std::os::unix::fs::PermissionsExt;
    if dir_mode(path)? == 0o700 {
        return Ok(false);
    }
    fs::set_permissions(path, fs::Permissions::from_mode(0o700))?;
    Ok(true)
}

#[cfg(not(unix))]
fn restrict_dir(_path: &Path) -> io::Result<bool> {
    Ok(false)
}

/// Creates the vault directory (mode 0700) and writes every artifact.
///
/// Idempotent. An artifact already present with different bytes is a
/// conflict unless `force` is set.
pub fn materialize_layout(
    layout: &VaultLayout,
    force: bool,
) -> Result<MaterializeResult, PlacementError> {
    let mut result = MaterializeResult::default();
    let vault = layout.vault_dir();

    if !vault.is_dir() {
        fs::create_dir_all(vault).map_err(io_err(vault))?;
        result.actions.push(Action::CreatedDir(vault.to_path_buf()));
    }
    if restrict_dir(vault).map_err(io_err(vault))? {
        result
            .actions
            .push(Action::RestrictedPermissions(vault.to_path_buf()));
    }

    // Check everything before writing anything so a conflict leaves no
    // partial result.
    let mut pending = Vec::new();
    for artifact in layout.artifacts() {
        let path = layout.webroot().join(&artifact.rel_path);
        match fs::read(&path) {
            Ok(existing) if existing == artifact.content => {
                result.actions.push(Action::ArtifactUnchanged(path));
            }
            Ok(_) if !force => return Err(PlacementError::ArtifactConflict { path }),
            Ok(_) => pending.push((path, artifact)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => pending.push((path, artifact)),
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    for (path, artifact) in pending {
        write_atomically(&path, &artifact.content).map_err(io_err(&path))?;
        result.actions.push(Action::WroteArtifact(path));
    }
    Ok(result)
}

fn write_atomically(path: &Path, content: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(".tmp-artifact-{}", uuid::Uuid::new_v4().simple()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(content)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    VaultMissing,
    InsideWebRoot,
    OutsideWebRoot,
    /// Group or other permission bits set on the vault directory.
    Permissions { mode: u32 },
    ArtifactMissing(PathBuf),
    ArtifactModified(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutViolation {
    pub rule: Rule,
    pub kind: ViolationKind,
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule {}: ", self.rule)?;
        match &self.kind {
            ViolationKind::VaultMissing => f.write_str("vault directory missing"),
            ViolationKind::InsideWebRoot => f.write_str("vault directory lies inside the web root"),
            ViolationKind::OutsideWebRoot => f.write_str("vault directory lies outside the web root"),
            ViolationKind::Permissions { mode } => {
                write!(f, "vault directory mode {mode:03o} grants group/other access")
            }
            ViolationKind::ArtifactMissing(p) => write!(f, "{} missing", p.display()),
            ViolationKind::ArtifactModified(p) => write!(f, "{} has unexpected content", p.display()),
        }
    }
}

/// Checks the on-disk state against `layout`. Empty result means compliant.
pub fn verify_layout(layout: &VaultLayout) -> Result<Vec<LayoutViolation>, PlacementError> {
    let mut violations = Vec::new();
    let rule = layout.policy.rule();
    let vault = layout.vault_dir();

    let inside = is_within(vault, layout.webroot());
    match layout.policy {
        PlacementPolicy::OutsideWebRoot if inside => violations.push(LayoutViolation {
            rule,
            kind: ViolationKind::InsideWebRoot,
        }),
        PlacementPolicy::DeniedSubdir | PlacementPolicy::ObscuredSubdir if !inside => {
            violations.push(LayoutViolation {
                rule,
                kind: ViolationKind::OutsideWebRoot,
            })
        }
        _ => {}
    }

    match fs::metadata(vault) {
        Ok(m) if m.is_dir() => {
            #[cfg(unix)]
            {
                let mode = dir_mode(vault).map_err(io_err(vault))?;
                if mode & 0o077 != 0 {
                    violations.push(LayoutViolation {
                        rule,
                        kind: ViolationKind::Permissions { mode },
                    });
                }
            }
        }
        Ok(_) => violations.push(LayoutViolation {
            rule,
            kind: ViolationKind::VaultMissing,
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => violations.push(LayoutViolation {
            rule,
            kind: ViolationKind::VaultMissing,
        }),
        Err(e) => return Err(io_err(vault)(e)),
    }

    for artifact in layout.artifacts() {
        let path = layout.webroot().join(&artifact.rel_path);
        match fs::read(&path) {
            Ok(bytes) if bytes == artifact.content => {}
            Ok(_) => violations.push(LayoutViolation {
                rule: artifact.rule(),
                kind: ViolationKind::ArtifactModified(path),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => violations.push(LayoutViolation {
                rule: artifact.rule(),
                kind: ViolationKind::ArtifactMissing(path),
            }),
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    Ok(violations)
}
