//! Converter from the public scout execution-history repository layout into
//! the canonical history CSV.
//!
//! Each experiment is a directory whose name encodes the run, e.g.
//! `spark_kmeans_bigdata_m4.xlarge_12` (token order is not significant),
//! holding a `report.json` with the measured runtime in seconds. Conversion
//! rules:
//!
//! * the token naming a catalog machine type is the machine; the numeric
//!   token right after it (else the last numeric token) is the node count;
//! * `spark`/`hadoop` tokens give the framework;
//! * a known dataset size token (`tiny`, `small`, `large`, `huge`,
//!   `gigantic`, `bigdata`) gives the dataset label;
//! * remaining tokens before the machine, joined by `_`, give the job name;
//! * runtime is read from the first of `elapsed_time`, `runtime`,
//!   `duration`, `execution_time` present in `report.json`;
//! * reports with `"completed": false` and directories that do not parse are
//!   skipped and listed; cost is left empty so it is derived from the
//!   catalog price; all other report fields are dropped.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Catalog, ClusterConfig, ExecutionRecord, Framework};

const DATASET_LABELS: [&str; 6] = ["tiny", "small", "large", "huge", "gigantic", "bigdata"];
const RUNTIME_KEYS: [&str; 4] = ["elapsed_time", "runtime", "duration", "execution_time"];
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Default)]
pub struct Conversion {
    pub records: Vec<ExecutionRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Parse an experiment directory name into everything but the runtime.
pub fn parse_experiment_name(
    name: &str,
    catalog: &Catalog,
) -> std::result::Result<(String, Framework, String, ClusterConfig), String> {
    let tokens: Vec<&str> = name.split('_').collect();
    let machine_idx = tokens
        .iter()
        .position(|t| catalog.get(t).is_some())
        .ok_or("no catalog machine type in name")?;
    let machine = catalog.get(tokens[machine_idx]).expect("found above");
    let nodes: u32 = tokens
        .get(machine_idx + 1)
        .and_then(|t| t.parse().ok())
        .or_else(|| tokens.iter().rev().find_map(|t| t.parse().ok()))
        .ok_or("no node count in name")?;
    if nodes == 0 {
        return Err("node count is zero".into());
    }
    let mut framework = None;
    let mut label = None;
    let mut job = Vec::new();
    for t in &tokens[..machine_idx] {
        let lower = t.to_ascii_lowercase();
        match lower.as_str() {
            "spark" => framework = Some(Framework::Spark),
            "hadoop" => framework = Some(Framework::Hadoop),
            l if DATASET_LABELS.contains(&l) => label = Some(lower.clone()),
            _ => job.push(lower),
        }
    }
    let framework = framework.ok_or("no framework token")?;
    let label = label.ok_or("no dataset size token")?;
    if job.is_empty() {
        return Err("no job name".into());
    }
    Ok((
        job.join("_"),
        framework,
        label,
        ClusterConfig {
            machine_type: machine.clone(),
            node_count: nodes,
        },
    ))
}

fn runtime_from_report(text: &str) -> std::result::Result<f64, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("bad report json: {e}"))?;
    if value.get("completed").and_then(|v| v.as_bool()) == Some(false) {
        return Err("run did not complete".into());
    }
    let runtime = RUNTIME_KEYS
        .iter()
        .find_map(|k| {
            let v = value.get(*k)?;
            v.as_f64().or_else(|| v.as_str()?.trim().parse().ok())
        })
        .ok_or("no runtime field in report")?;
    if runtime > 0.0 && runtime.is_finite() {
        Ok(runtime)
    } else {
        Err(format!("non-positive runtime {runtime}"))
    }
}

fn collect_experiment_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for p in entries {
        if p.join(REPORT_FILE).is_file() {
            out.push(p);
        } else {
            collect_experiment_dirs(&p, out)?;
        }
    }
    Ok(())
}

/// Walk `root` and convert every experiment directory found.
pub fn convert_dir(root: &Path, catalog: &Catalog) -> Result<Conversion> {
    let mut dirs = Vec::new();
    collect_experiment_dirs(root, &mut dirs)?;
    let mut conv = Conversion::default();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parsed = parse_experiment_name(&name, catalog).and_then(|parts| {
            let report = dir.join(REPORT_FILE);
            let text = std::fs::read_to_string(&report).map_err(|e| e.to_string())?;
            Ok((parts, runtime_from_report(&text)?))
        });
        match parsed {
            Ok(((job_name, framework, dataset_label, config), runtime_seconds)) => {
                conv.records.push(ExecutionRecord {
                    job_name,
                    framework,
                    dataset_label,
                    dataset_bytes: None,
                    config,
                    runtime_seconds,
                    cost: None,
                })
            }
            Err(why) => conv.skipped.push((dir, why)),
        }
    }
    Ok(conv)
}
