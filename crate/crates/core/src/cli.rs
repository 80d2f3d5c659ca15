//! Command-line front end. Stages communicate through `manifest.json` in the
//! working directory, so modeling and selection can be repeated without
//! profiling again.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::evaluator::{
    column_means, evaluate, load_history, load_models_dir, load_profiling_times, report,
    EvaluationResults, ModelRecord,
};
use crate::memmodel::RequirementParams;
use crate::model::{Catalog, ConfigKey, Framework, MemoryModel, Recommendation};
use crate::profiler::{
    profile_job, read_trace, write_trace, JobSpec, MonitorConfig, ProcMeminfo, ProfileOptions,
};
use crate::sampler::{RuntimeTarget, SampleFile, SampleFormat, SamplePlan};
use crate::selector::{bfa_rank, select};
use crate::{scout, GIB};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_WORK_DIR: &str = "memscale-run";

/// Parse a byte count such as `1048576`, `512MiB`, `10GB` or `1.5GiB`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad size `{s}`"))?;
    let scale: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        "tb" => 1e12,
        "kib" => 1024.0,
        "mib" => 1024f64.powi(2),
        "gib" => 1024f64.powi(3),
        "tib" => 1024f64.powi(4),
        u => return Err(format!("unknown unit `{u}`")),
    };
    let bytes = (value * scale).round();
    if !(bytes > 0.0) || bytes > u64::MAX as f64 {
        return Err(format!("size must be positive, got `{s}`"));
    }
    Ok(bytes as u64)
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("bad fraction `{s}`"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction must be in (0, 1], got {f}"))
    }
}

fn parse_poll_ms(s: &str) -> Result<u64, String> {
    let v: u64 = s.parse().map_err(|_| format!("bad interval `{s}`"))?;
    if v >= 50 {
        Ok(v)
    } else {
        Err(format!("poll interval must be >= 50 ms, got {v}"))
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad number `{s}`"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn parse_env(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Debug, Parser)]
#[command(name = "memscale", version, about = "Profile a job's memory use and pick a cluster configuration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the job on five dataset samples and record memory traces
    Profile(ProfileArgs),
    /// Fit peak memory against sample size from recorded traces
    Model(ModelArgs),
    /// Recommend a cluster configuration from history and the memory model
    Recommend(RecommendArgs),
    /// Compare selection strategies over an execution history
    Evaluate(EvaluateArgs),
    /// Convert a scout-layout experiment directory into a history CSV
    ConvertScout(ConvertArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Lines,
    Raw,
}

impl From<FormatArg> for SampleFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Lines => SampleFormat::LineDelimited,
            FormatArg::Raw => SampleFormat::RawBytes,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Shell command with a `{sample}` placeholder (and optionally `{runtime_args}`)
    #[arg(long)]
    pub job_cmd: String,
    /// Local dataset file to draw samples from
    #[arg(long)]
    pub dataset: PathBuf,
    /// Size of the full dataset the job will run on, e.g. `250GiB`
    #[arg(long, value_parser = parse_bytes)]
    pub full_size: u64,
    #[arg(long, default_value_t = 0.01, value_parser = parse_fraction)]
    pub base_fraction: f64,
    #[arg(long, default_value_t = 500, value_parser = parse_poll_ms)]
    pub poll_ms: u64,
    #[arg(long, default_value_t = 5000)]
    pub baseline_ms: u64,
    /// Longest wait for memory to stop drifting before each baseline
    #[arg(long, default_value_t = 60.0, value_parser = parse_non_negative)]
    pub settle_secs: f64,
    /// Pass-through argument for the job's runtime (repeatable)
    #[arg(long = "runtime-args", allow_hyphen_values = true)]
    pub runtime_args: Vec<String>,
    /// Extra environment variable for the job, KEY=VALUE (repeatable)
    #[arg(long = "env", value_parser = parse_env)]
    pub env: Vec<(String, String)>,
    #[arg(long, default_value = DEFAULT_WORK_DIR)]
    pub work_dir: PathBuf,
    /// Name recorded in the manifest; defaults to the dataset file stem
    #[arg(long)]
    pub job_name: Option<String>,
    #[arg(long, default_value_t = 3600.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 30.0)]
    pub min_runtime: f64,
    #[arg(long, default_value_t = 180.0)]
    pub max_runtime: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Lines)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "memscale-run/manifest.json")]
    pub manifest: PathBuf,
    /// Also write the model as a models-dir record for `evaluate`
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub framework: Framework,
    /// Job whose history is excluded from the ranking; defaults to the manifest's job
    #[arg(long)]
    pub job: Option<String>,
    /// Override the manifest's full dataset size
    #[arg(long, value_parser = parse_bytes)]
    pub full_size: Option<u64>,
    /// Ignore any memory model and use the best-for-all ranking
    #[arg(long)]
    pub no_model: bool,
    #[arg(long, default_value_t = 2.0, value_parser = parse_non_negative)]
    pub overhead_gib: f64,
    #[arg(long, default_value_t = 0.10, value_parser = parse_non_negative)]
    pub leeway: f64,
    /// Print the recommendation as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    /// `machine:count`; defaults to the catalog's medium machine with 12 nodes
    #[arg(long)]
    pub medium_config: Option<ConfigKey>,
    /// CSV with job_name,framework,dataset_label,seconds
    #[arg(long)]
    pub profiling_times: Option<PathBuf>,
    /// Machine-readable results file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0, value_parser = parse_non_negative)]
    pub overhead_gib: f64,
    #[arg(long, default_value_t = 0.10, value_parser = parse_non_negative)]
    pub leeway: f64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// One profiled sample as listed in the manifest. Paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub sample_path: PathBuf,
    pub trace_path: PathBuf,
    pub sample_bytes: u64,
    pub peak_job_bytes: u64,
    pub duration_seconds: f64,
    pub exit_status: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub job_name: String,
    pub dataset_path: PathBuf,
    pub full_dataset_bytes: u64,
    pub plan: SamplePlan,
    pub samples: Vec<SampleFile>,
    pub runs: Vec<RunEntry>,
    #[serde(default)]
    pub discarded_traces: Vec<PathBuf>,
    pub profiling_seconds: f64,
    #[serde(default)]
    pub model: Option<MemoryModel>,
    #[serde(default)]
    pub recommendation: Option<Recommendation>,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Outcome that maps to a non-error exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A recommendation was made but no configuration met the memory requirement.
    ConstraintUnsatisfied,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::ConstraintUnsatisfied => 3,
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Profile(args) => cmd_profile(args, out),
        Command::Model(args) => cmd_model(args, out),
        Command::Recommend(args) => cmd_recommend(args, out),
        Command::Evaluate(args) => cmd_evaluate(args, out),
        Command::ConvertScout(args) => cmd_convert(args, out),
    }
}

pub fn cmd_profile(args: ProfileArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    if !args.dataset.is_file() {
        bail!("dataset {} is not a readable file", args.dataset.display());
    }
    std::fs::create_dir_all(&args.work_dir)
        .with_context(|| format!("creating {}", args.work_dir.display()))?;
    let work_dir = args.work_dir.canonicalize()?;
    let dataset = args.dataset.canonicalize()?;
    let job_name = args.job_name.clone().unwrap_or_else(|| {
        dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "job".into())
    });

    let mut job = JobSpec::new(args.job_cmd.clone(), std::env::current_dir()?);
    job.runtime_tuning_args = args.runtime_args.clone();
    job.environment = args.env.iter().cloned().collect::<BTreeMap<_, _>>();
    job.timeout_seconds = args.timeout_secs;
    job.output_log = Some(work_dir.join("job.log"));
    let monitor = MonitorConfig {
        poll_interval_ms: args.poll_ms,
        baseline_window_ms: args.baseline_ms,
        settle_max_ms: (args.settle_secs * 1000.0) as u64,
        ..MonitorConfig::default()
    };
    let options = ProfileOptions {
        work_dir: work_dir.clone(),
        target: RuntimeTarget::new(args.min_runtime, args.max_runtime)?,
        format: args.format.into(),
    };

    let started = Instant::now();
    let outcome = profile_job(
        &job,
        &dataset,
        args.full_size,
        args.base_fraction,
        &monitor,
        &options,
        &mut ProcMeminfo::default(),
    )?;
    let profiling_seconds = started.elapsed().as_secs_f64();

    let mut runs = Vec::new();
    for (i, (run, sample)) in outcome.runs.iter().zip(&outcome.samples).enumerate() {
        let trace = format!("trace-{}.jsonl", i + 1);
        write_trace(run, &sample.path, &work_dir.join(&trace))?;
        runs.push(RunEntry {
            sample_path: sample.path.file_name().map(PathBuf::from).unwrap_or_default(),
            trace_path: PathBuf::from(trace),
            sample_bytes: run.sample_bytes,
            peak_job_bytes: run.peak_job_bytes,
            duration_seconds: run.duration_seconds,
            exit_status: run.exit_status,
        });
    }
    let mut discarded_traces = Vec::new();
    for (i, run) in outcome.discarded.iter().enumerate() {
        let trace = PathBuf::from(format!("discarded-{}.jsonl", i + 1));
        write_trace(run, Path::new(""), &work_dir.join(&trace))?;
        discarded_traces.push(trace);
    }

    let manifest = RunManifest {
        job_name,
        dataset_path: dataset,
        full_dataset_bytes: args.full_size,
        plan: outcome.plan,
        samples: outcome.samples,
        runs,
        discarded_traces,
        profiling_seconds,
        model: None,
        recommendation: None,
    };
    let manifest_path = work_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    writeln!(out, "profiled {} samples in {:.0} s", manifest.runs.len(), profiling_seconds)?;
    for r in &manifest.runs {
        writeln!(
            out,
            "  {:>14} bytes  peak {:>14} bytes  {:>8.1} s",
            r.sample_bytes, r.peak_job_bytes, r.duration_seconds
        )?;
    }
    writeln!(out, "manifest: {}", manifest_path.display())?;
    Ok(Outcome::Success)
}

/// Fit the model from the traces a manifest points to.
pub fn model_from_manifest(manifest: &RunManifest, manifest_path: &Path) -> anyhow::Result<MemoryModel> {
    let dir = manifest_dir(manifest_path);
    let mut runs = Vec::new();
    for entry in &manifest.runs {
        let (_, run) = read_trace(&dir.join(&entry.trace_path))?;
        if run.is_success() {
            runs.push(run);
        }
    }
    if runs.len() < 2 {
        bail!(
            "need at least 2 successful profiling runs to fit a model, manifest has {}",
            runs.len()
        );
    }
    Ok(MemoryModel::fit_runs(&runs)?)
}

pub fn cmd_model(args: ModelArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let mut manifest = RunManifest::load(&args.manifest)?;
    let model = model_from_manifest(&manifest, &args.manifest)?;
    write!(out, "{}", model.summary())?;
    manifest.model = Some(model);
    manifest.save(&args.manifest)?;
    if let Some(path) = &args.export {
        let record = ModelRecord {
            job_name: manifest.job_name.clone(),
            framework: None,
            dataset_label: None,
            full_dataset_bytes: manifest.full_dataset_bytes,
            model,
        };
        std::fs::write(path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome::Success)
}

fn requirement_params(overhead_gib: f64, leeway: f64) -> RequirementParams {
    RequirementParams {
        per_node_overhead_bytes: (overhead_gib * GIB as f64).round() as u64,
        leeway_factor: leeway,
    }
}

pub fn cmd_recommend(args: RecommendArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let catalog = Catalog::load(&args.catalog)?;
    let history = load_history(&args.history, &catalog)?;
    let mut manifest = match &args.manifest {
        Some(p) => Some(RunManifest::load(p)?),
        None if args.no_model => None,
        None => bail!("--manifest is required unless --no-model is given"),
    };
    let job = args
        .job
        .clone()
        .or_else(|| manifest.as_ref().map(|m| m.job_name.clone()));
    let model = if args.no_model {
        None
    } else {
        let m = manifest.as_ref().expect("checked above");
        Some(m.model.ok_or_else(|| {
            anyhow!("manifest has no model; run `memscale model` first or pass --no-model")
        })?)
    };
    let full_size = args
        .full_size
        .or_else(|| manifest.as_ref().map(|m| m.full_dataset_bytes))
        .unwrap_or(1);
    let params = requirement_params(args.overhead_gib, args.leeway);

    let ranking = bfa_rank(&history, args.framework, job.as_deref())?;
    let rec = select(&ranking, model.as_ref(), full_size, &params)?;

    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&rec)?)?;
    } else {
        writeln!(out, "configuration: {}", rec.config.key())?;
        writeln!(out, "strategy: {}", rec.strategy)?;
        writeln!(out, "job_memory_bytes: {}", rec.job_memory_bytes)?;
        writeln!(out, "required_total_bytes: {}", rec.required_total_bytes)?;
        writeln!(
            out,
            "total_cluster_memory_bytes: {}",
            crate::model::total_cluster_memory(&rec.config)
        )?;
        writeln!(out, "satisfied_memory_constraint: {}", rec.satisfied_memory_constraint)?;
        writeln!(out, "rationale: {}", rec.rationale)?;
    }
    let outcome = if rec.satisfied_memory_constraint {
        Outcome::Success
    } else {
        eprintln!("warning: {}", rec.rationale);
        Outcome::ConstraintUnsatisfied
    };
    if let (Some(m), Some(path)) = (manifest.as_mut(), &args.manifest) {
        m.recommendation = Some(rec);
        m.save(path)?;
    }
    Ok(outcome)
}

pub fn cmd_evaluate(args: EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let catalog = Catalog::load(&args.catalog)?;
    let history = load_history(&args.history, &catalog)?;
    let models = match &args.models_dir {
        Some(dir) => load_models_dir(dir)?,
        None => Vec::new(),
    };
    let medium = match args.medium_config.clone() {
        Some(k) => Some(k),
        None => catalog.medium().map(|m| ConfigKey {
            machine: m.name.clone(),
            nodes: 12,
        }),
    };
    let times = match &args.profiling_times {
        Some(p) => Some(load_profiling_times(p)?),
        None => None,
    };
    let params = requirement_params(args.overhead_gib, args.leeway);
    let rows = evaluate(&history, medium.as_ref(), &models, &params)?;
    if rows.is_empty() {
        bail!("history {} has no records", args.history.display());
    }
    write!(out, "{}", report(&rows, times.as_deref()))?;
    if let Some(path) = &args.out {
        let results = EvaluationResults {
            means: column_means(&rows),
            rows,
            profiling_times: times,
        };
        std::fs::write(path, serde_json::to_string_pretty(&results)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome::Success)
}

pub fn cmd_convert(args: ConvertArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let catalog = Catalog::load(&args.catalog)?;
    let conv = scout::convert_dir(&args.input, &catalog)?;
    let file = std::fs::File::create(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    crate::evaluator::write_history(&conv.records, file)?;
    writeln!(out, "converted {} executions", conv.records.len())?;
    for (dir, why) in &conv.skipped {
        writeln!(out, "skipped {}: {why}", dir.display())?;
    }
    Ok(Outcome::Success)
}
