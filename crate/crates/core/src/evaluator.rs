//! Offline comparison of selection strategies over an execution history.
//!
//! Costs are normalized per (job, dataset size) group so that the cheapest
//! configuration of every group scores exactly 1.0. Each group is then scored
//! under four strategies:
//!
//! * Random: mean normalized cost of the group.
//! * Medium: a fixed "medium" configuration.
//! * BFA: best mean normalized cost over all *other* jobs of the framework.
//! * Crispy: BFA restricted to configurations meeting the job's extrapolated
//!   memory requirement. Without a linear model this is identical to BFA.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memmodel::RequirementParams;
use crate::model::{
    Catalog, ClusterConfig, ConfigKey, ExecutionRecord, Framework, MemoryModel,
};
use crate::selector::{bfa_rank, select_where, RankedConfig};

pub const HISTORY_COLUMNS: [&str; 8] = [
    "job",
    "framework",
    "dataset_label",
    "machine_type",
    "node_count",
    "runtime_seconds",
    "cost",
    "dataset_bytes",
];

#[derive(Debug, Deserialize)]
struct HistoryRow {
    job: String,
    framework: String,
    dataset_label: String,
    machine_type: String,
    node_count: String,
    runtime_seconds: String,
    #[serde(default)]
    cost: Option<String>,
    #[serde(default)]
    dataset_bytes: Option<String>,
}

fn parse_history_row(row: HistoryRow, catalog: &Catalog) -> Result<ExecutionRecord, String> {
    let job = row.job.trim();
    let label = row.dataset_label.trim();
    if job.is_empty() {
        return Err("empty job name".into());
    }
    if label.is_empty() {
        return Err("empty dataset_label".into());
    }
    let framework: Framework = row.framework.parse().map_err(|e: Error| e.to_string())?;
    let node_count: u32 = row
        .node_count
        .trim()
        .parse()
        .map_err(|_| format!("bad node_count `{}`", row.node_count))?;
    if node_count == 0 {
        return Err("node_count must be >= 1".into());
    }
    let runtime_seconds: f64 = row
        .runtime_seconds
        .trim()
        .parse()
        .map_err(|_| format!("bad runtime_seconds `{}`", row.runtime_seconds))?;
    if !(runtime_seconds > 0.0) || !runtime_seconds.is_finite() {
        return Err(format!("runtime_seconds must be positive, got {runtime_seconds}"));
    }
    let cost = match row.cost.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(c) => {
            let c: f64 = c.parse().map_err(|_| format!("bad cost `{c}`"))?;
            if !(c > 0.0) || !c.is_finite() {
                return Err(format!("cost must be positive, got {c}"));
            }
            Some(c)
        }
    };
    let dataset_bytes = match row.dataset_bytes.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(b) => Some(b.parse().map_err(|_| format!("bad dataset_bytes `{b}`"))?),
    };
    let machine = catalog
        .get(row.machine_type.trim())
        .ok_or_else(|| String::from("unknown machine type"))?;
    Ok(ExecutionRecord {
        job_name: job.to_string(),
        framework,
        dataset_label: label.to_string(),
        dataset_bytes,
        config: ClusterConfig {
            machine_type: machine.clone(),
            node_count,
        },
        runtime_seconds,
        cost,
    })
}

/// Read a history CSV, resolving machine types against `catalog`.
pub fn load_history(path: &Path, catalog: &Catalog) -> Result<Vec<ExecutionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_history(file, path, catalog)
}

pub fn read_history<R: std::io::Read>(
    reader: R,
    path: &Path,
    catalog: &Catalog,
) -> Result<Vec<ExecutionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .comment(Some(b'#'))
        .from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    for required in &HISTORY_COLUMNS[..6] {
        if !headers.iter().any(|h| h == *required) {
            return Err(parse_err(1, format!("missing column `{required}`")));
        }
    }

    let mut records = Vec::new();
    let mut unknown = BTreeSet::new();
    for result in rdr.records() {
        let raw = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let row: HistoryRow = raw
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let machine = row.machine_type.trim().to_string();
        if catalog.get(&machine).is_none() {
            unknown.insert(machine);
            continue;
        }
        records.push(parse_history_row(row, catalog).map_err(|m| parse_err(line, m))?);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownMachineTypes(unknown.into_iter().collect()));
    }
    Ok(records)
}

/// Write records in the canonical history CSV layout.
pub fn write_history<W: std::io::Write>(records: &[ExecutionRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Serde(format!("history csv: {e}"));
    w.write_record(HISTORY_COLUMNS).map_err(io)?;
    for r in records {
        w.write_record([
            r.job_name.clone(),
            r.framework.to_string(),
            r.dataset_label.clone(),
            r.config.machine_type.name.clone(),
            r.config.node_count.to_string(),
            format!("{}", r.runtime_seconds),
            r.cost.map(|c| format!("{c}")).unwrap_or_default(),
            r.dataset_bytes.map(|b| b.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Serde(format!("history csv: {e}")))?;
    Ok(())
}

/// Divide every configuration's cost by the cheapest one in the group.
/// Repeated runs of the same configuration are averaged first.
pub fn normalize_costs(group: &[&ExecutionRecord]) -> Result<BTreeMap<ConfigKey, f64>> {
    if group.is_empty() {
        return Err(Error::invalid("cannot normalize an empty group"));
    }
    let mut sums: BTreeMap<ConfigKey, (f64, u32)> = BTreeMap::new();
    for r in group {
        let cost = r.effective_cost();
        if !(cost > 0.0) || !cost.is_finite() {
            return Err(Error::invalid(format!(
                "non-positive cost {cost} for {} on {}",
                r.job_name,
                r.config.key()
            )));
        }
        let e = sums.entry(r.config.key()).or_insert((0.0, 0));
        e.0 += cost;
        e.1 += 1;
    }
    let costs: BTreeMap<ConfigKey, f64> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / f64::from(n)))
        .collect();
    let min = costs.values().copied().fold(f64::INFINITY, f64::min);
    Ok(costs.into_iter().map(|(k, c)| (k, c / min)).collect())
}

pub fn baseline_random(normalized: &BTreeMap<ConfigKey, f64>) -> Result<f64> {
    if normalized.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    Ok(normalized.values().sum::<f64>() / normalized.len() as f64)
}

pub fn baseline_medium(normalized: &BTreeMap<ConfigKey, f64>, medium: &ConfigKey) -> Option<f64> {
    normalized.get(medium).copied()
}

fn group_of<'a>(
    history: &'a [ExecutionRecord],
    framework: Framework,
    job_name: &str,
    dataset_label: &str,
) -> Vec<&'a ExecutionRecord> {
    history
        .iter()
        .filter(|r| {
            r.framework == framework && r.job_name == job_name && r.dataset_label == dataset_label
        })
        .collect()
}

fn first_present(ranking: &[RankedConfig], normalized: &BTreeMap<ConfigKey, f64>) -> Result<f64> {
    ranking
        .iter()
        .find_map(|r| normalized.get(&r.config.key()).copied())
        .ok_or_else(|| Error::invalid("no ranked configuration was run for this job"))
}

/// Normalized cost, within the job's group, of the best-for-all choice made
/// without the job's own records.
pub fn baseline_bfa(
    history: &[ExecutionRecord],
    framework: Framework,
    job_name: &str,
    dataset_label: &str,
) -> Result<f64> {
    let group = group_of(history, framework, job_name, dataset_label);
    let normalized = normalize_costs(&group)?;
    let ranking = bfa_rank(history, framework, Some(job_name))?;
    first_present(&ranking, &normalized)
}

/// Normalized cost, within the job's group, of the memory-constrained choice.
pub fn evaluate_crispy(
    history: &[ExecutionRecord],
    framework: Framework,
    job_name: &str,
    dataset_label: &str,
    model: Option<&MemoryModel>,
    full_dataset_bytes: u64,
    params: &RequirementParams,
) -> Result<f64> {
    let group = group_of(history, framework, job_name, dataset_label);
    let normalized = normalize_costs(&group)?;
    let ranking = bfa_rank(history, framework, Some(job_name))?;
    crispy_cell(&ranking, &normalized, model, full_dataset_bytes, params)
}

fn crispy_cell(
    ranking: &[RankedConfig],
    normalized: &BTreeMap<ConfigKey, f64>,
    model: Option<&MemoryModel>,
    full_dataset_bytes: u64,
    params: &RequirementParams,
) -> Result<f64> {
    let rec = select_where(ranking, model, full_dataset_bytes, params, |k| {
        normalized.contains_key(k)
    })?;
    Ok(normalized[&rec.config.key()])
}

/// A memory model for one job, as stored in a models directory.
///
/// `framework` and `dataset_label` are optional; when absent the record
/// applies to every matching group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub job_name: String,
    #[serde(default)]
    pub framework: Option<Framework>,
    #[serde(default)]
    pub dataset_label: Option<String>,
    pub full_dataset_bytes: u64,
    pub model: MemoryModel,
}

impl ModelRecord {
    fn matches(&self, framework: Framework, job: &str, label: &str) -> bool {
        self.job_name == job
            && self.framework.is_none_or(|f| f == framework)
            && self.dataset_label.as_deref().is_none_or(|l| l == label)
    }

    fn specificity(&self) -> u8 {
        u8::from(self.framework.is_some()) + u8::from(self.dataset_label.is_some())
    }
}

/// Load every `*.json` file in `dir` as a [`ModelRecord`], in file name order.
pub fn load_models_dir(dir: &Path) -> Result<Vec<ModelRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Serde(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn find_model<'a>(
    models: &'a [ModelRecord],
    framework: Framework,
    job: &str,
    label: &str,
) -> Option<&'a ModelRecord> {
    models
        .iter()
        .filter(|m| m.matches(framework, job, label))
        .max_by_key(|m| m.specificity())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub job_name: String,
    pub framework: Framework,
    pub dataset_label: String,
    pub random_cost: Option<f64>,
    pub medium_cost: Option<f64>,
    pub bfa_cost: Option<f64>,
    pub crispy_cost: Option<f64>,
}

/// Score every (framework, job, dataset) group in `history`.
///
/// A cell is missing when the strategy cannot be evaluated for that group,
/// e.g. the medium configuration was never run or no other job of the same
/// framework exists to rank against.
pub fn evaluate(
    history: &[ExecutionRecord],
    medium: Option<&ConfigKey>,
    models: &[ModelRecord],
    params: &RequirementParams,
) -> Result<Vec<EvaluationRow>> {
    let mut groups: BTreeMap<(Framework, String, String), Vec<&ExecutionRecord>> = BTreeMap::new();
    for r in history {
        groups
            .entry((r.framework, r.job_name.clone(), r.dataset_label.clone()))
            .or_default()
            .push(r);
    }
    let mut rankings: BTreeMap<(Framework, String), Option<Vec<RankedConfig>>> = BTreeMap::new();

    let mut rows = Vec::with_capacity(groups.len());
    for ((framework, job, label), group) in &groups {
        let normalized = normalize_costs(group)?;
        let ranking = rankings
            .entry((*framework, job.clone()))
            .or_insert_with(|| bfa_rank(history, *framework, Some(job)).ok());
        let (bfa_cost, crispy_cost) = match ranking {
            Some(ranking) => {
                let bfa = first_present(ranking, &normalized).ok();
                let crispy = match find_model(models, *framework, job, label) {
                    Some(m) => crispy_cell(
                        ranking,
                        &normalized,
                        Some(&m.model),
                        m.full_dataset_bytes,
                        params,
                    )
                    .ok(),
                    None => bfa,
                };
                (bfa, crispy)
            }
            None => (None, None),
        };
        rows.push(EvaluationRow {
            job_name: job.clone(),
            framework: *framework,
            dataset_label: label.clone(),
            random_cost: Some(baseline_random(&normalized)?),
            medium_cost: medium.and_then(|m| baseline_medium(&normalized, m)),
            bfa_cost,
            crispy_cost,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeans {
    pub random: Option<f64>,
    pub medium: Option<f64>,
    pub bfa: Option<f64>,
    pub crispy: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Column means with missing cells left out.
pub fn column_means(rows: &[EvaluationRow]) -> ColumnMeans {
    ColumnMeans {
        random: mean_present(rows.iter().map(|r| r.random_cost)),
        medium: mean_present(rows.iter().map(|r| r.medium_cost)),
        bfa: mean_present(rows.iter().map(|r| r.bfa_cost)),
        crispy: mean_present(rows.iter().map(|r| r.crispy_cost)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingTime {
    pub job_name: String,
    pub framework: Framework,
    pub dataset_label: String,
    pub seconds: f64,
}

pub fn load_profiling_times(path: &Path) -> Result<Vec<ProfilingTime>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ProfilingTime>().enumerate() {
        out.push(row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const MISSING_CELL: &str = "-*";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => MISSING_CELL.to_string(),
    }
}

/// Render the cost comparison table and, if given, the profiling-time table.
pub fn report(rows: &[EvaluationRow], profiling_times: Option<&[ProfilingTime]>) -> String {
    let mut out = String::new();
    let job_w = rows
        .iter()
        .map(|r| r.job_name.len())
        .chain(std::iter::once(4))
        .max()
        .unwrap_or(4)
        + 2;
    let label_w = rows
        .iter()
        .map(|r| r.dataset_label.len())
        .chain(std::iter::once(7))
        .max()
        .unwrap_or(7)
        + 2;

    let _ = writeln!(out, "Normalized job execution cost by selection method");
    let _ = writeln!(
        out,
        "{:<job_w$}{:<11}{:<label_w$}{:>9}{:>9}{:>9}{:>9}",
        "job", "framework", "dataset", "Random", "Medium", "BFA", "Crispy"
    );
    let width = job_w + 11 + label_w + 36;
    let _ = writeln!(out, "{}", "-".repeat(width));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<job_w$}{:<11}{:<label_w$}{:>9}{:>9}{:>9}{:>9}",
            r.job_name,
            r.framework.to_string(),
            r.dataset_label,
            cell(r.random_cost),
            cell(r.medium_cost),
            cell(r.bfa_cost),
            cell(r.crispy_cost),
        );
    }
    let means = column_means(rows);
    let _ = writeln!(out, "{}", "=".repeat(width));
    let _ = writeln!(
        out,
        "{:<pad$}{:>9}{:>9}{:>9}{:>9}",
        "Mean",
        cell(means.random),
        cell(means.medium),
        cell(means.bfa),
        cell(means.crispy),
        pad = job_w + 11 + label_w,
    );
    if rows
        .iter()
        .any(|r| [r.random_cost, r.medium_cost, r.bfa_cost, r.crispy_cost].contains(&None))
    {
        let _ = writeln!(out, "{MISSING_CELL}: value missing from the history");
    }

    if let Some(times) = profiling_times {
        let _ = writeln!(out);
        let _ = writeln!(out, "Profiling time per job");
        let _ = writeln!(
            out,
            "{:<job_w$}{:<11}{:<label_w$}{:>9}",
            "job", "framework", "dataset", "Time (s)"
        );
        let width = job_w + 11 + label_w + 9;
        let _ = writeln!(out, "{}", "-".repeat(width));
        for t in times {
            let _ = writeln!(
                out,
                "{:<job_w$}{:<11}{:<label_w$}{:>9.0}",
                t.job_name,
                t.framework.to_string(),
                t.dataset_label,
                t.seconds
            );
        }
        let _ = writeln!(out, "{}", "=".repeat(width));
        if !times.is_empty() {
            let mean = times.iter().map(|t| t.seconds).sum::<f64>() / times.len() as f64;
            let _ = writeln!(out, "{:<pad$}{:>9.0}", "Mean", mean, pad = job_w + 11 + label_w);
        }
    }
    out
}

/// Machine-readable evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResults {
    pub rows: Vec<EvaluationRow>,
    pub means: ColumnMeans,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiling_times: Option<Vec<ProfilingTime>>,
}
