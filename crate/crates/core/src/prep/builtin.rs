//! Built-in modules and their process entry point.
//!
//! Every built-in is installed as an ordinary manifest whose entry point is a
//! small shell wrapper around a runner executable, so built-ins go through
//! the same subprocess protocol as user modules.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::abbrev::{build_abbrev_map, standardize, AbbrevMap};
use super::dedup::{dedup, golden_by_column, DedupConfig};
use super::dmv::{detect_dmv, DmvConfig};
use super::impute::{impute_missing, parse_strategies};
use super::PrepError;
use crate::filter::parse_predicate;
use crate::host::{
    HostError, InvocationRequest, ModuleManifest, ParamKind, ParamSpec, Registry, RESULT_FILE,
};
use crate::table::{load_table, load_text_table, write_table, StreamBundle, Table, Value};
use crate::util::{replace_file, write_script};

pub const BUILTIN_VERSION: &str = "1.0.0";

fn p(name: &str, kind: ParamKind, required: bool) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind,
        required,
    }
}

/// (name, params, record_wise) of every built-in. All are deterministic.
pub fn builtin_specs() -> Vec<(&'static str, Vec<ParamSpec>, bool)> {
    use ParamKind::*;
    vec![
        ("identity", vec![], true),
        ("uppercase", vec![p("columns", Text, false)], true),
        ("drop_where", vec![p("predicate", Text, true)], true),
        ("standardize", vec![p("column", Text, true), p("map", Path, false)], true),
        (
            "detect_dmv",
            vec![p("freq_threshold", Number, false), p("k", Number, false), p("extra_tokens", Text, false)],
            false,
        ),
        ("impute", vec![p("strategies", Text, true)], false),
        ("abbrev_map", vec![p("column", Text, true), p("full_column", Text, false)], false),
        (
            "dedup",
            vec![
                p("threshold", Number, false),
                p("blocking", Text, false),
                p("columns", Text, false),
                p("map", Path, false),
            ],
            false,
        ),
        ("golden", vec![p("cluster_column", Text, true), p("map", Path, false)], false),
    ]
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Writes a manifest and wrapper script per built-in under `dir` and registers
/// them. `command` is the runner invocation; the module name and the
/// invocation path are appended to it.
pub fn install_builtins(
    registry: &Registry,
    dir: &Path,
    command: &[PathBuf],
) -> Result<Vec<Arc<ModuleManifest>>, HostError> {
    let prefix: Vec<String> = command.iter().map(|c| shell_quote(&c.to_string_lossy())).collect();
    let mut out = Vec::new();
    for (name, params, record_wise) in builtin_specs() {
        let mdir = dir.join(name);
        let io = |source| HostError::Io {
            path: mdir.clone(),
            source,
        };
        fs::create_dir_all(&mdir).map_err(io)?;
        let entry = mdir.join("run.sh");
        write_script(
            &entry,
            &format!("#!/bin/sh\nexec {} {name} \"$1\"\n", prefix.join(" ")),
        )
        .map_err(io)?;
        let manifest = ModuleManifest {
            name: name.into(),
            version: BUILTIN_VERSION.into(),
            entry_point: entry,
            params,
            record_wise,
            deterministic: true,
        };
        let path = mdir.join("manifest.json");
        replace_file(&path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"), None).map_err(io)?;
        out.push(registry.register_module(&path)?);
    }
    Ok(out)
}

struct Ctx {
    req: InvocationRequest,
    bundle: StreamBundle,
}

impl Ctx {
    fn input(&self, i: usize) -> Result<Table, PrepError> {
        let path = self
            .req
            .inputs
            .get(i)
            .ok_or_else(|| PrepError::InvalidParameter(format!("module expects input {i}")))?;
        Ok(load_table(path, None)?)
    }

    /// Record-wise built-ins see every cell as its exact text, so a record's
    /// result never depends on which other records share its input.
    fn text_input(&self, i: usize) -> Result<Table, PrepError> {
        let path = self
            .req
            .inputs
            .get(i)
            .ok_or_else(|| PrepError::InvalidParameter(format!("module expects input {i}")))?;
        Ok(load_text_table(path)?)
    }

    fn required(&self, name: &str) -> Result<&str, PrepError> {
        self.req
            .param_str(name)
            .ok_or_else(|| PrepError::InvalidParameter(format!("missing parameter `{name}`")))
    }

    fn output(&mut self, t: &Table) -> Result<(), PrepError> {
        let name = format!("output-{}.csv", self.bundle.output.len());
        write_table(t, self.req.workdir.join(&name))?;
        self.bundle.output.push(name.into());
        Ok(())
    }

    fn metadata(&mut self, name: &str, value: &impl Serialize) -> Result<(), PrepError> {
        let bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        fs::write(self.req.workdir.join(name), bytes)?;
        self.bundle.metadata.push(name.into());
        Ok(())
    }

    fn map(&self) -> Result<Option<AbbrevMap>, PrepError> {
        if self.req.inputs.len() > 1 {
            return Ok(Some(AbbrevMap::load(&self.req.inputs[1])?));
        }
        self.req.param_str("map").map(|m| AbbrevMap::load(Path::new(m))).transpose()
    }
}

fn csv_list(s: Option<&str>) -> Option<Vec<String>> {
    s.map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(str::to_string)
            .collect()
    })
}

fn uppercase(t: &Table, columns: Option<Vec<String>>) -> Result<Table, PrepError> {
    let targets: Vec<usize> = match columns {
        Some(cs) => cs
            .iter()
            .map(|c| t.schema().index_of(c).ok_or_else(|| PrepError::UnknownColumn(c.clone())))
            .collect::<Result<_, _>>()?,
        None => (0..t.schema().len()).collect(),
    };
    let rows = t
        .rows()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for &i in &targets {
                if let Value::Text(s) = &r.cells[i] {
                    r.cells[i] = Value::Text(s.to_uppercase());
                }
            }
            r
        })
        .collect();
    Ok(t.with_rows(rows))
}

/// Runs built-in `name` on the invocation document at `invocation`.
pub fn run_builtin(name: &str, invocation: &Path) -> Result<(), PrepError> {
    let req = InvocationRequest::read(invocation)?;
    let mut cx = Ctx {
        req,
        bundle: StreamBundle::default(),
    };
    match name {
        "identity" => {
            for i in 0..cx.req.inputs.len() {
                let t = cx.text_input(i)?;
                cx.output(&t)?;
            }
        }
        "uppercase" => {
            let t = uppercase(&cx.text_input(0)?, csv_list(cx.req.param_str("columns")))?;
            cx.output(&t)?;
        }
        "drop_where" => {
            let t = cx.text_input(0)?;
            let pred = parse_predicate(cx.required("predicate")?)?.bind_untyped(t.schema())?;
            let kept = t.rows().iter().filter(|r| !pred.eval(r)).cloned().collect();
            cx.output(&t.with_rows(kept))?;
        }
        "standardize" => {
            let t = cx.text_input(0)?;
            let map = cx.map()?.unwrap_or_default();
            let out = standardize(&t, cx.required("column")?, &map)?;
            cx.output(&out)?;
        }
        "detect_dmv" => {
            let defaults = DmvConfig::default();
            let cfg = DmvConfig {
                freq_threshold: cx.req.param_f64("freq_threshold").unwrap_or(defaults.freq_threshold),
                k: cx.req.param_f64("k").unwrap_or(defaults.k),
                extra_tokens: csv_list(cx.req.param_str("extra_tokens")).unwrap_or_default(),
            };
            let (cleaned, report) = detect_dmv(&cx.input(0)?, &cfg)?;
            cx.output(&cleaned)?;
            cx.metadata("dmv_report.json", &report)?;
        }
        "impute" => {
            let strategies = parse_strategies(cx.required("strategies")?)?;
            let out = impute_missing(&cx.input(0)?, &strategies)?;
            cx.output(&out)?;
        }
        "abbrev_map" => {
            let t = cx.input(0)?;
            let column = cx.required("column")?;
            let full = cx.req.param_str("full_column").unwrap_or(column);
            let map = build_abbrev_map((&t, column), (&t, full))?;
            cx.output(&map.to_table())?;
            cx.metadata("abbrev_map.json", &map)?;
        }
        "dedup" => {
            let cfg = DedupConfig {
                threshold: cx.req.param_f64("threshold").unwrap_or(0.8),
                blocking: cx.req.param_str("blocking").map(parse_predicate).transpose()?,
                columns: csv_list(cx.req.param_str("columns")),
                map: cx.map()?,
            };
            let (clusters, out) = dedup(&cx.input(0)?, &cfg)?;
            cx.output(&out)?;
            cx.metadata("clusters.json", &clusters)?;
        }
        "golden" => {
            let map = cx.map()?;
            let out = golden_by_column(&cx.input(0)?, cx.required("cluster_column")?, map.as_ref())?;
            cx.output(&out)?;
        }
        other => {
            return Err(PrepError::InvalidParameter(format!("no built-in module named `{other}`")));
        }
    }
    let bytes = serde_json::to_vec_pretty(&cx.bundle).map_err(std::io::Error::other)?;
    fs::write(cx.req.workdir.join(RESULT_FILE), bytes)?;
    Ok(())
}

/// Process entry point: `<runner> <module> <invocation.json>`. Returns the exit code.
pub fn builtin_main(args: &[String]) -> i32 {
    let [name, invocation] = args else {
        eprintln!("usage: <module> <invocation.json>");
        return 2;
    };
    match run_builtin(name, Path::new(invocation)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{name}: {e}");
            1
        }
    }
}
