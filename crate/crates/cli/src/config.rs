//! Debug flags to a [`DebugConfig`].

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::Args;
use pipewright::debugger::{BreakpointSpec, DebugConfig, FilterSpec, PartitionMode, PartitionSpec, Scope};
use pipewright::filter::{parse_predicate, Predicate};

#[derive(Debug, Clone, Args)]
pub struct DebugArgs {
    /// Input filter, `<node-or-source>:<predicate>`. Repeatable.
    #[arg(long = "filter", value_name = "TARGET:PREDICATE")]
    pub filters: Vec<String>,
    /// Breakpoint on a node's input records, `<node>:<predicate>`. Repeatable.
    #[arg(long = "break", value_name = "NODE:PREDICATE")]
    pub breaks: Vec<String>,
    /// Breakpoint on a node's output records, `<node>:<predicate>`. Repeatable.
    #[arg(long = "break-output", value_name = "NODE:PREDICATE")]
    pub break_outputs: Vec<String>,
    /// Record tracking predicate; writes tracking.jsonl in the run directory.
    #[arg(long, value_name = "PREDICATE")]
    pub track: Option<String>,
    /// Automatic breakpoints, `<node>:<p>` or `<node>:<attr> = *`. Repeatable.
    #[arg(long = "partitions", value_name = "NODE:MODE")]
    pub partitions: Vec<String>,
    /// Pause the run this many milliseconds after it starts.
    #[arg(long, value_name = "MS")]
    pub pause_after_ms: Option<u64>,
    /// A JSON debug configuration, merged with the flags above.
    #[arg(long, value_name = "FILE")]
    pub debug_config: Option<PathBuf>,
}

fn split_target(flag: &str, s: &str) -> Result<(String, String)> {
    let (target, rest) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("--{flag} expects `<node>:<value>`, got `{s}`"))?;
    let target = target.trim();
    anyhow::ensure!(!target.is_empty(), "--{flag} `{s}` names no node");
    Ok((target.to_string(), rest.trim().to_string()))
}

fn predicate(flag: &str, s: &str) -> Result<Predicate> {
    parse_predicate(s).with_context(|| format!("--{flag}: bad predicate `{s}`"))
}

impl DebugArgs {
    pub fn to_config(&self) -> Result<DebugConfig> {
        let mut cfg = match &self.debug_config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => DebugConfig::default(),
        };
        for f in &self.filters {
            let (target, p) = split_target("filter", f)?;
            cfg.filters.push(FilterSpec {
                target,
                predicate: predicate("filter", &p)?,
            });
        }
        for (flag, list, scope) in [
            ("break", &self.breaks, Scope::Input),
            ("break-output", &self.break_outputs, Scope::Output),
        ] {
            for b in list {
                let (node, p) = split_target(flag, b)?;
                cfg.breakpoints.push(BreakpointSpec {
                    node,
                    predicate: predicate(flag, &p)?,
                    scope,
                    enabled: true,
                });
            }
        }
        if let Some(t) = &self.track {
            cfg.track = Some(predicate("track", t)?);
        }
        for p in &self.partitions {
            let (node, mode) = split_target("partitions", p)?;
            let mode = PartitionMode::parse(&mode).map_err(|e| anyhow!("--partitions `{p}`: {e}"))?;
            cfg.partitions.push(PartitionSpec { node, mode });
        }
        if self.pause_after_ms.is_some() {
            cfg.pause_after_ms = self.pause_after_ms;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> DebugArgs {
        DebugArgs {
            filters: vec![],
            breaks: vec![],
            break_outputs: vec![],
            track: None,
            partitions: vec![],
            pause_after_ms: None,
            debug_config: None,
        }
    }

    #[test]
    fn flags_parse() {
        let mut a = args();
        a.filters.push("clean: City = 'Chicago'".into());
        a.breaks.push("clean:note = 'a:b'".into());
        a.partitions.push("clean:10".into());
        a.partitions.push("clean:City = *".into());
        a.track = Some("id < 5".into());
        let c = a.to_config().unwrap();
        assert_eq!(c.filters[0].target, "clean");
        assert_eq!(c.filters[0].predicate.to_string(), "City = 'Chicago'");
        assert_eq!(c.breakpoints[0].predicate.to_string(), "note = 'a:b'");
        assert_eq!(c.partitions[0].mode, PartitionMode::Fraction(10));
        assert!(matches!(c.partitions[1].mode, PartitionMode::Blocking(_)));
        assert!(c.track.is_some());
    }

    #[test]
    fn bad_flags() {
        for (f, v) in [("filter", "nocolon"), ("filter", ":x = 1"), ("filter", "n:x ="), ("partitions", "n:1")] {
            let mut a = args();
            match f {
                "filter" => a.filters.push(v.into()),
                _ => a.partitions.push(v.into()),
            }
            assert!(a.to_config().is_err(), "{v}");
        }
    }
}
