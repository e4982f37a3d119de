//! The home directory: engine state plus the list of registered manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use pipewright::engine::{Engine, EngineConfig};
use pipewright::host::{ModuleManifest, Registry};
use pipewright::prep::builtin::install_builtins;

const MODULES_FILE: &str = "modules.json";

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub max_parallel: Option<usize>,
    pub timeout_secs: Option<f64>,
}

/// Opens the engine at `home`, installing the built-in modules and
/// re-registering every manifest recorded by earlier `register` calls.
pub fn open(home: &Path, opts: &Options) -> Result<Engine> {
    fs::create_dir_all(home).with_context(|| format!("creating {}", home.display()))?;
    let registry = Arc::new(Registry::new());
    let exe = std::env::current_exe().context("locating the pipewright executable")?;
    install_builtins(&registry, &home.join("builtin"), &[exe, PathBuf::from("exec-module")])
        .context("installing built-in modules")?;
    for path in manifest_paths(home)? {
        registry
            .register_module(&path)
            .with_context(|| format!("re-registering {}", path.display()))?;
    }
    let mut config = EngineConfig::default();
    if let Some(n) = opts.max_parallel {
        config.max_parallel = n.max(1);
    }
    if let Some(s) = opts.timeout_secs {
        config.timeout = Duration::from_secs_f64(s);
    }
    Ok(Engine::open(home, registry)?.with_config(config))
}

fn manifest_paths(home: &Path) -> Result<Vec<PathBuf>> {
    let path = home.join(MODULES_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("reading {}", path.display())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Registers a manifest file and remembers it for later sessions.
pub fn register_file(engine: &Engine, manifest: &Path) -> Result<Arc<ModuleManifest>> {
    let manifest = manifest
        .canonicalize()
        .with_context(|| format!("no manifest at {}", manifest.display()))?;
    let m = engine.registry().register_module(&manifest)?;
    let mut paths = manifest_paths(engine.home())?;
    if !paths.contains(&manifest) {
        paths.push(manifest);
        fs::write(engine.home().join(MODULES_FILE), serde_json::to_vec_pretty(&paths)?)?;
    }
    Ok(m)
}

/// Registers an in-line manifest by storing it under the home directory first.
pub fn register_manifest(engine: &Engine, manifest: &ModuleManifest) -> Result<Arc<ModuleManifest>> {
    let safe = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    anyhow::ensure!(
        safe(&manifest.name) && safe(&manifest.version) && !manifest.name.starts_with('.'),
        "module name and version may only use letters, digits, `.`, `_` and `-`"
    );
    let m = engine.registry().register(manifest.clone())?;
    let dir = engine.home().join("modules");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}@{}.json", manifest.name, manifest.version));
    if !path.exists() {
        fs::write(&path, serde_json::to_vec_pretty(manifest)?)?;
    }
    register_file(engine, &path)?;
    Ok(m)
}
