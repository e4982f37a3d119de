#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pipewright"))
}

/// A scratch directory with its own pipewright home.
pub struct Sandbox {
    pub dir: tempfile::TempDir,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new()
    }
}

impl Sandbox {
    pub fn new() -> Self {
        Sandbox {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn home(&self) -> PathBuf {
        self.path("home")
    }

    pub fn write(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(&p, body).unwrap();
        p
    }

    pub fn workflow(&self, name: &str, v: &Value) -> PathBuf {
        self.write(name, &serde_json::to_string_pretty(v).unwrap())
    }

    fn command(&self, args: &[&str]) -> Command {
        let mut c = Command::new(exe());
        c.args(args).env("PIPEWRIGHT_HOME", self.home()).current_dir(self.dir.path());
        c
    }

    pub fn pw(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    pub fn pw_stdin(&self, args: &[&str], input: &str) -> Output {
        let mut child = self
            .command(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }

    /// Stdout of a successful invocation.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.pw(args);
        assert!(
            out.status.success(),
            "pipewright {args:?} failed ({}):\n{}\n{}",
            out.status,
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn json(&self, args: &[&str]) -> Value {
        let s = self.ok(args);
        serde_json::from_str(&s).unwrap_or_else(|e| panic!("{e}: {s}"))
    }

    /// Like [`Sandbox::json`] but tolerates a nonzero exit.
    pub fn json_any(&self, args: &[&str]) -> (i32, Value) {
        let out = self.pw(args);
        let s = String::from_utf8_lossy(&out.stdout);
        let v = serde_json::from_str(&s)
            .unwrap_or_else(|e| panic!("{e}: {s}\n{}", String::from_utf8_lossy(&out.stderr)));
        (out.status.code().unwrap_or(-1), v)
    }

    /// Registers a shell-script module. `body` runs in the module's work
    /// directory with the invocation file as `$1`.
    pub fn script_module(&self, name: &str, record_wise: bool, params: Value, body: &str) -> PathBuf {
        let dir = self.path(&format!("modules/{name}"));
        fs::create_dir_all(&dir).unwrap();
        let entry = dir.join("run.sh");
        fs::write(&entry, body).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&entry, fs::Permissions::from_mode(0o755)).unwrap();
        }
        let manifest = dir.join("manifest.json");
        fs::write(
            &manifest,
            serde_json::to_string_pretty(&json!({
                "name": name,
                "version": "1",
                "entry_point": "run.sh",
                "params": params,
                "record_wise": record_wise,
                "deterministic": true
            }))
            .unwrap(),
        )
        .unwrap();
        self.ok(&["register", manifest.to_str().unwrap()]);
        manifest
    }

    /// A module running built-in identity, then `extra` shell lines, listing
    /// `metadata` files in its result.
    pub fn wrapped_identity(&self, name: &str, extra: &str, metadata: &[&str]) {
        let meta: Vec<String> = metadata.iter().map(|m| format!("\"{m}\"")).collect();
        let body = format!(
            "#!/bin/sh\nset -e\n'{}' exec-module identity \"$1\"\n{extra}\nprintf '%s' '{{\"output\":[\"output-0.csv\"],\"metadata\":[{}]}}' > result.json\n",
            exe().display(),
            meta.join(",")
        );
        self.script_module(name, true, json!([]), &body);
    }
}

pub fn node(id: &str, module: &str, params: Value) -> Value {
    json!({"id": id, "module": module, "version": if BUILTINS.contains(&module) { "1.0.0" } else { "1" }, "params": params})
}

pub const BUILTINS: &[&str] = &[
    "identity",
    "uppercase",
    "drop_where",
    "standardize",
    "detect_dmv",
    "impute",
    "abbrev_map",
    "dedup",
    "golden",
];

/// A linear workflow `src -> n1 -> n2 -> ...`.
pub fn chain(source: &Path, nodes: &[Value], key: Option<&str>) -> Value {
    let mut edges = vec![json!({"from": "src", "to": nodes[0]["id"]})];
    for w in nodes.windows(2) {
        edges.push(json!({"from": w[0]["id"], "to": w[1]["id"]}));
    }
    let mut v = json!({
        "name": "chain",
        "nodes": nodes,
        "edges": edges,
        "sources": [{"id": "src", "path": source}],
    });
    if let Some(k) = key {
        v["key_column"] = json!(k);
    }
    v
}

pub fn cities_csv(n: usize) -> String {
    let cities = ["Chicago", "New York", "Boston", "Chicago", "Denver"];
    let mut s = String::from("id,City,score\n");
    for i in 0..n {
        s.push_str(&format!("{},{},{}\n", i, cities[(i * 7 + 3) % cities.len()], (i * 37) % 101));
    }
    s
}

/// A running `pipewright serve`.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn start(sb: &Sandbox, extra: &[&str]) -> Server {
        let mut args = vec!["serve", "--port", "0"];
        args.extend_from_slice(extra);
        let mut child = sb.command(&args).stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server banner `{line}`"))
            .to_string();
        Server { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
