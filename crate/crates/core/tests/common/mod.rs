#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use pipewright::engine::{Engine, Run, RunSnapshot, RunStatus, WorkflowSpec};
use pipewright::host::{ModuleManifest, Registry};
use pipewright::prep::builtin::install_builtins;
use pipewright::util::write_script;

pub const LONG: Duration = Duration::from_secs(60);

pub struct Env {
    pub dir: tempfile::TempDir,
    pub engine: Engine,
}

pub fn runner() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pipewright-modules"))
}

pub fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let registry = Arc::new(Registry::new());
    install_builtins(&registry, &dir.path().join("builtin"), &[runner()]).unwrap();
    let engine = Engine::open(dir.path().join("home"), registry).unwrap();
    Env { dir, engine }
}

impl Env {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn csv(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    /// Registers a shell-script module.
    pub fn script_module(&self, name: &str, record_wise: bool, body: &str) {
        let dir = self.path().join("modules").join(name);
        fs::create_dir_all(&dir).unwrap();
        let entry = dir.join("run.sh");
        write_script(&entry, body).unwrap();
        self.engine
            .registry()
            .register(ModuleManifest {
                name: name.into(),
                version: "1".into(),
                entry_point: entry,
                params: vec![],
                record_wise,
                deterministic: true,
            })
            .unwrap();
    }

    /// A module that runs built-in identity and then `extra` shell lines in its
    /// work directory, listing `metadata` files in result.json.
    pub fn wrapped_identity(&self, name: &str, extra: &str, metadata: &[&str]) {
        let meta: Vec<String> = metadata.iter().map(|m| format!("\"{m}\"")).collect();
        let body = format!(
            "#!/bin/sh\nset -e\n'{}' identity \"$1\"\n{extra}\nprintf '%s' '{{\"output\":[\"output-0.csv\"],\"metadata\":[{}]}}' > result.json\n",
            runner().display(),
            meta.join(",")
        );
        self.script_module(name, true, &body);
    }
}

pub fn spec(v: serde_json::Value) -> WorkflowSpec {
    serde_json::from_value(v).unwrap()
}

/// Resumes every pause until the run ends. Returns the final snapshot and the
/// number of pauses observed.
pub fn drive(run: &Arc<Run>) -> (RunSnapshot, usize) {
    let mut pauses = 0;
    loop {
        let s = run.wait_settled(LONG);
        match s.status {
            RunStatus::Paused => {
                pauses += 1;
                run.resume().unwrap();
            }
            st if st.is_terminal() => return (s, pauses),
            other => panic!("run neither paused nor finished: {other}"),
        }
    }
}

pub fn cities_csv(n: usize) -> String {
    let cities = ["Chicago", "New York", "Boston", "Chicago", "Denver"];
    let mut s = String::from("id,city,score\n");
    for i in 0..n {
        s.push_str(&format!("{},{},{}\n", i, cities[(i * 7 + 3) % cities.len()], (i * 37) % 101));
    }
    s
}
