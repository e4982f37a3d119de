//! Module registry and subprocess invocation.
//!
//! A module is an executable entry point described by a JSON manifest. To run
//! it the host writes `invocation.json` into a fresh work directory and
//! launches the entry point with that path as its only argument. The module
//! reads its input CSVs, writes outputs inside the work directory and lists
//! them in `result.json` (a stream bundle). Exit status 0 means success.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::table::{self, load_concatenated, StreamBundle, TableError};
use crate::util::now_ms;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
pub const INVOCATION_FILE: &str = "invocation.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Error)]
pub enum HostError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("module {name} {version} is already registered with different content")]
    Conflict { name: String, version: String },
    #[error("entry point {0} does not exist or is not executable")]
    MissingEntryPoint(PathBuf),
    #[error("module {name} {version} is not registered")]
    UnknownModule { name: String, version: String },
    #[error("parameter error: {0}")]
    Params(String),
    #[error("input {0} does not exist")]
    MissingInput(PathBuf),
    #[error("module {module} is not record-wise and cannot run on partitions")]
    NotRecordWise { module: String },
    #[error("no partitions to run")]
    NoPartitions,
    #[error("module {module} failed: {failure}")]
    Failed {
        module: String,
        failure: InvocationFailure,
    },
    #[error(transparent)]
    Table(#[from] TableError),
}

pub type Result<T, E = HostError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Text,
    Number,
    Boolean,
    Path,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleManifest {
    pub name: String,
    pub version: String,
    pub entry_point: PathBuf,
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub record_wise: bool,
    #[serde(default)]
    pub deterministic: bool,
}

pub type ParamValues = BTreeMap<String, serde_json::Value>;

impl ModuleManifest {
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    /// Checks that `params` binds every required parameter with a value of the declared kind.
    pub fn check_params(&self, params: &ParamValues) -> Result<()> {
        for name in params.keys() {
            if !self.params.iter().any(|p| &p.name == name) {
                return Err(HostError::Params(format!(
                    "{} has no parameter `{name}`",
                    self.id()
                )));
            }
        }
        for spec in &self.params {
            match params.get(&spec.name) {
                None | Some(serde_json::Value::Null) if spec.required => {
                    return Err(HostError::Params(format!(
                        "{} requires parameter `{}`",
                        self.id(),
                        spec.name
                    )))
                }
                None | Some(serde_json::Value::Null) => {}
                Some(v) => {
                    let ok = match spec.kind {
                        ParamKind::Text | ParamKind::Path => v.is_string(),
                        ParamKind::Number => v.is_number(),
                        ParamKind::Boolean => v.is_boolean(),
                    };
                    if !ok {
                        return Err(HostError::Params(format!(
                            "{}: parameter `{}` must be {:?}, got {v}",
                            self.id(),
                            spec.name,
                            spec.kind
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| HostError::BadManifest {
            path: path.to_path_buf(),
            message,
        };
        if self.name.is_empty() || self.version.is_empty() {
            return Err(bad("name and version must be nonempty".into()));
        }
        for (i, p) in self.params.iter().enumerate() {
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(bad(format!("duplicate parameter `{}`", p.name)));
            }
        }
        if !is_executable(&self.entry_point) {
            return Err(HostError::MissingEntryPoint(self.entry_point.clone()));
        }
        Ok(())
    }

    fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("manifest serializes"),
        ))
    }
}

#[cfg(unix)]
fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(p)
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

#[cfg(not(unix))]
fn is_executable(p: &Path) -> bool {
    p.is_file()
}

/// Registered modules keyed by name and version.
#[derive(Debug, Default)]
pub struct Registry {
    modules: RwLock<IndexMap<(String, String), (Arc<ModuleManifest>, String)>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a manifest file and registers it. A relative entry point is
    /// resolved against the manifest's directory.
    pub fn register_module(&self, manifest_path: impl AsRef<Path>) -> Result<Arc<ModuleManifest>> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HostError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: ModuleManifest =
            serde_json::from_str(&text).map_err(|e| HostError::BadManifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if manifest.entry_point.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            manifest.entry_point = base.join(&manifest.entry_point);
        }
        manifest.validate(path)?;
        self.insert(manifest)
    }

    /// Registers an in-memory manifest.
    pub fn register(&self, manifest: ModuleManifest) -> Result<Arc<ModuleManifest>> {
        manifest.validate(Path::new("<memory>"))?;
        self.insert(manifest)
    }

    fn insert(&self, manifest: ModuleManifest) -> Result<Arc<ModuleManifest>> {
        let digest = manifest.digest();
        let key = (manifest.name.clone(), manifest.version.clone());
        let mut modules = self.modules.write().unwrap();
        if let Some((existing, d)) = modules.get(&key) {
            return if *d == digest {
                Ok(existing.clone())
            } else {
                Err(HostError::Conflict {
                    name: key.0,
                    version: key.1,
                })
            };
        }
        let m = Arc::new(manifest);
        modules.insert(key, (m.clone(), digest));
        Ok(m)
    }

    pub fn get(&self, name: &str, version: &str) -> Option<Arc<ModuleManifest>> {
        self.modules
            .read()
            .unwrap()
            .get(&(name.to_string(), version.to_string()))
            .map(|(m, _)| m.clone())
    }

    pub fn require(&self, name: &str, version: &str) -> Result<Arc<ModuleManifest>> {
        self.get(name, version).ok_or_else(|| HostError::UnknownModule {
            name: name.to_string(),
            version: version.to_string(),
        })
    }

    pub fn list(&self) -> Vec<Arc<ModuleManifest>> {
        self.modules
            .read()
            .unwrap()
            .values()
            .map(|(m, _)| m.clone())
            .collect()
    }
}

/// The document handed to a module process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRequest {
    pub module: String,
    pub version: String,
    pub params: ParamValues,
    pub inputs: Vec<PathBuf>,
    pub workdir: PathBuf,
}

impl InvocationRequest {
    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn param_str(&self, name: &str) -> Option<&str> {
        self.params.get(name).and_then(|v| v.as_str())
    }

    pub fn param_f64(&self, name: &str) -> Option<f64> {
        self.params.get(name).and_then(|v| v.as_f64())
    }

    pub fn param_bool(&self, name: &str) -> Option<bool> {
        self.params.get(name).and_then(|v| v.as_bool())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvocationFailure {
    #[error("exited with status {code}")]
    NonZeroExit { code: i32 },
    #[error("terminated by signal")]
    Signalled,
    #[error("timed out after {secs:.1} s")]
    Timeout { secs: f64 },
    #[error("cancelled")]
    Cancelled,
    #[error("could not start: {message}")]
    Spawn { message: String },
    #[error("bad result.json: {message}")]
    BadResult { message: String },
    #[error("result lists {path}, outside the work directory")]
    Sandbox { path: PathBuf },
}

/// One finished module execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Invocation {
    pub module: String,
    pub version: String,
    pub params: ParamValues,
    pub inputs: Vec<PathBuf>,
    pub work_dir: PathBuf,
    pub started_ms: u64,
    pub finished_ms: u64,
    /// Raw process exit code; `None` if the process never exited on its own.
    pub exit_status: Option<i32>,
    /// Present iff the invocation succeeded.
    pub bundle: Option<StreamBundle>,
    pub failure: Option<InvocationFailure>,
}

impl Invocation {
    pub fn succeeded(&self) -> bool {
        self.bundle.is_some()
    }

    /// The bundle, or the failure as an error.
    pub fn outcome(&self) -> Result<&StreamBundle> {
        match (&self.bundle, &self.failure) {
            (Some(b), _) => Ok(b),
            (None, Some(f)) => Err(HostError::Failed {
                module: format!("{}@{}", self.module, self.version),
                failure: f.clone(),
            }),
            (None, None) => unreachable!("invocation has neither bundle nor failure"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InvokeOptions {
    pub timeout: Duration,
    /// Setting this flag terminates the running process.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for InvokeOptions {
    fn default() -> Self {
        InvokeOptions {
            timeout: DEFAULT_TIMEOUT,
            cancel: None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HostError + '_ {
    move |source| HostError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lexical normalization: resolves `.` and `..` without touching the filesystem.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

fn inside(path: &Path, root: &Path) -> bool {
    let resolved = path.canonicalize().unwrap_or_else(|_| normalize(path));
    resolved.starts_with(root)
}

fn read_result(work_dir: &Path) -> std::result::Result<StreamBundle, InvocationFailure> {
    let result = work_dir.join(RESULT_FILE);
    let bad = |message: String| InvocationFailure::BadResult { message };
    let text = fs::read_to_string(&result).map_err(|e| bad(format!("{}: {e}", result.display())))?;
    let bundle: StreamBundle = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let bundle = bundle.resolved(work_dir);
    let root = work_dir
        .canonicalize()
        .map_err(|e| bad(format!("{}: {e}", work_dir.display())))?;
    for p in bundle.output.iter().chain(&bundle.metadata) {
        if !inside(p, &root) {
            return Err(InvocationFailure::Sandbox { path: p.clone() });
        }
    }
    table::parse_stream_bundle(&result).map_err(|e| bad(e.to_string()))
}

#[cfg(unix)]
fn kill_tree(child: &mut Child) {
    // the child leads its own process group, so helpers it spawned die too
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut Child) {
    let _ = child.kill();
}

fn spawn(entry: &Path, inv_path: &Path, work_dir: &Path) -> std::io::Result<Child> {
    let stdout = fs::File::create(work_dir.join("stdout.log"))?;
    let stderr = fs::File::create(work_dir.join("stderr.log"))?;
    let mut cmd = Command::new(entry);
    cmd.arg(inv_path)
        .current_dir(work_dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    cmd.spawn()
}

/// Runs one module invocation to completion.
///
/// Precondition failures (unbound parameters, absent inputs, an unwritable
/// work directory) are errors. Anything that goes wrong once the process is
/// launched is reported inside the returned [`Invocation`].
pub fn invoke_module(
    m: &ModuleManifest,
    params: &ParamValues,
    inputs: &[PathBuf],
    work_dir: &Path,
    opts: &InvokeOptions,
) -> Result<Invocation> {
    m.check_params(params)?;
    for i in inputs {
        if !i.is_file() {
            return Err(HostError::MissingInput(i.clone()));
        }
    }
    fs::create_dir_all(work_dir).map_err(io_err(work_dir))?;
    let work_dir = work_dir.canonicalize().map_err(io_err(work_dir))?;
    let inputs: Vec<PathBuf> = inputs
        .iter()
        .map(|p| p.canonicalize().map_err(io_err(p)))
        .collect::<Result<_>>()?;
    let request = InvocationRequest {
        module: m.name.clone(),
        version: m.version.clone(),
        params: params.clone(),
        inputs: inputs.clone(),
        workdir: work_dir.clone(),
    };
    let inv_path = work_dir.join(INVOCATION_FILE);
    fs::write(
        &inv_path,
        serde_json::to_vec_pretty(&request).expect("request serializes"),
    )
    .map_err(io_err(&inv_path))?;
    let _ = fs::remove_file(work_dir.join(RESULT_FILE));

    let started_ms = now_ms();
    let started = Instant::now();
    let (exit_status, outcome) = match spawn(&m.entry_point, &inv_path, &work_dir) {
        Err(e) => (
            None,
            Err(InvocationFailure::Spawn {
                message: e.to_string(),
            }),
        ),
        Ok(mut child) => wait_child(&mut child, started, opts),
    };
    let outcome = outcome.and_then(|()| read_result(&work_dir));
    let (bundle, failure) = match outcome {
        Ok(b) => (Some(b), None),
        Err(f) => (None, Some(f)),
    };
    Ok(Invocation {
        module: m.name.clone(),
        version: m.version.clone(),
        params: params.clone(),
        inputs,
        work_dir,
        started_ms,
        finished_ms: now_ms(),
        exit_status,
        bundle,
        failure,
    })
}

fn wait_child(
    child: &mut Child,
    started: Instant,
    opts: &InvokeOptions,
) -> (Option<i32>, std::result::Result<(), InvocationFailure>) {
    let mut poll = Duration::from_millis(1);
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return match status.code() {
                    Some(0) => (Some(0), Ok(())),
                    Some(code) => (Some(code), Err(InvocationFailure::NonZeroExit { code })),
                    None => (None, Err(InvocationFailure::Signalled)),
                }
            }
            Ok(None) => {}
            Err(e) => {
                kill_tree(child);
                return (
                    None,
                    Err(InvocationFailure::Spawn {
                        message: e.to_string(),
                    }),
                );
            }
        }
        if opts
            .cancel
            .as_ref()
            .is_some_and(|c| c.load(Ordering::SeqCst))
        {
            kill_tree(child);
            let _ = child.wait();
            return (None, Err(InvocationFailure::Cancelled));
        }
        if started.elapsed() >= opts.timeout {
            kill_tree(child);
            let _ = child.wait();
            return (
                None,
                Err(InvocationFailure::Timeout {
                    secs: opts.timeout.as_secs_f64(),
                }),
            );
        }
        thread::sleep(poll);
        poll = (poll * 2).min(Duration::from_millis(20));
    }
}

/// Runs a record-wise module once per partition, sequentially, each in its
/// own `part-NNNN` subdirectory of `work_dir`. After every successful
/// partition the cumulative outputs are written to `work_dir/cumulative/`.
/// The first failing partition stops the sequence; it is the last element of
/// the returned list.
pub fn invoke_partitioned(
    m: &ModuleManifest,
    params: &ParamValues,
    partitions: &[PathBuf],
    work_dir: &Path,
    opts: &InvokeOptions,
) -> Result<Vec<Invocation>> {
    if !m.record_wise {
        return Err(HostError::NotRecordWise { module: m.id() });
    }
    if partitions.is_empty() {
        return Err(HostError::NoPartitions);
    }
    let cumulative_dir = work_dir.join("cumulative");
    fs::create_dir_all(&cumulative_dir).map_err(io_err(&cumulative_dir))?;
    let mut done: Vec<Invocation> = Vec::new();
    for (k, part) in partitions.iter().enumerate() {
        let inv = invoke_module(
            m,
            params,
            std::slice::from_ref(part),
            &work_dir.join(format!("part-{k:04}")),
            opts,
        )?;
        let ok = inv.succeeded();
        done.push(inv);
        if !ok {
            break;
        }
        write_cumulative(&done, &cumulative_dir)?;
    }
    Ok(done)
}

/// Concatenates output `i` of every invocation into `dir/output-i.csv`.
pub fn write_cumulative(done: &[Invocation], dir: &Path) -> Result<Vec<PathBuf>> {
    let bundles: Vec<&StreamBundle> = done.iter().filter_map(|i| i.bundle.as_ref()).collect();
    let width = bundles.first().map_or(0, |b| b.output.len());
    if bundles.iter().any(|b| b.output.len() != width) {
        return Err(HostError::Table(TableError::SchemaMismatch(
            "partitions produced different numbers of output tables".into(),
        )));
    }
    (0..width)
        .map(|i| {
            let paths: Vec<PathBuf> = bundles.iter().map(|b| b.output[i].clone()).collect();
            let t = load_concatenated(&paths)?;
            Ok(table::write_table(&t, dir.join(format!("output-{i}.csv")))?)
        })
        .collect()
}
