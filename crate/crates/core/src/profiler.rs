//! Running a job on dataset samples while polling system memory.
//!
//! Memory is read at the OS level as `MemTotal - MemAvailable` from
//! `/proc/meminfo`, minus pages parked on the kernel's per-CPU free lists
//! (`/proc/zoneinfo`), which are free but not counted in `MemFree`. Without
//! that correction a job that draws its first pages from those lists looks
//! tens of MiB smaller than it is. Before each launch the profiler waits for the counter to
//! stop drifting (memory released by a previous run can take a while to show
//! up as available, notably under balloon drivers in virtual machines), then
//! averages a baseline over a short window and subtracts it from every
//! reading taken while the job runs.
//!
//! The job runs under `sh -c` in its own process group so that it and any
//! processes it forks can be killed together on timeout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MemorySample, ProfilingRun, RunStatus};
use crate::sampler::{
    materialize_sample, plan_samples, Adjustment, RuntimeTarget, SampleFile, SampleFormat,
    SamplePlan, MAX_ADJUSTMENTS,
};

pub const SAMPLE_PLACEHOLDER: &str = "{sample}";
pub const RUNTIME_ARGS_PLACEHOLDER: &str = "{runtime_args}";
/// Runtime tuning args are also exported to the child under this name.
pub const RUNTIME_ARGS_ENV: &str = "MEMSCALE_RUNTIME_ARGS";

/// Source of system-wide "used memory" readings in bytes.
pub trait MemoryReader: Send {
    fn used_bytes(&mut self) -> Result<u64>;
}

impl<R: MemoryReader + ?Sized> MemoryReader for &mut R {
    fn used_bytes(&mut self) -> Result<u64> {
        (**self).used_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCounters {
    pub total_bytes: u64,
    pub available_bytes: u64,
}

impl MemoryCounters {
    pub fn used_bytes(&self) -> Result<u64> {
        self.total_bytes
            .checked_sub(self.available_bytes)
            .ok_or_else(|| {
                Error::MemoryCounters(format!(
                    "available ({}) exceeds total ({})",
                    self.available_bytes, self.total_bytes
                ))
            })
    }
}

/// Parse `MemTotal` and `MemAvailable` out of `/proc/meminfo` text.
pub fn parse_meminfo(text: &str) -> Result<MemoryCounters> {
    let mut total = None;
    let mut available = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let slot = match key.trim() {
            "MemTotal" => &mut total,
            "MemAvailable" => &mut available,
            _ => continue,
        };
        let mut parts = rest.split_whitespace();
        let value: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MemoryCounters(format!("unparsable line `{line}`")))?;
        let scale = match parts.next() {
            Some("kB") | Some("KB") => 1024,
            None => 1,
            Some(unit) => {
                return Err(Error::MemoryCounters(format!("unknown unit `{unit}`")));
            }
        };
        *slot = Some(value * scale);
    }
    match (total, available) {
        (Some(total_bytes), Some(available_bytes)) => Ok(MemoryCounters {
            total_bytes,
            available_bytes,
        }),
        _ => Err(Error::MemoryCounters(
            "MemTotal or MemAvailable missing".into(),
        )),
    }
}

/// Sum of the per-CPU pageset `count:` fields in `/proc/zoneinfo` text.
pub fn parse_pcp_pages(text: &str) -> u64 {
    text.lines()
        .filter_map(|l| l.trim_start().strip_prefix("count:"))
        .filter_map(|v| v.trim().parse::<u64>().ok())
        .sum()
}

/// Reads `/proc/meminfo` (or a file with the same layout), optionally
/// corrected by the per-CPU free pages listed in a zoneinfo file.
#[derive(Debug, Clone)]
pub struct ProcMeminfo {
    path: PathBuf,
    zoneinfo: Option<PathBuf>,
    page_bytes: u64,
}

impl Default for ProcMeminfo {
    fn default() -> Self {
        ProcMeminfo::at("/proc/meminfo").with_zoneinfo("/proc/zoneinfo")
    }
}

impl ProcMeminfo {
    /// Meminfo only, no per-CPU correction.
    pub fn at(path: impl Into<PathBuf>) -> Self {
        // SAFETY: sysconf has no preconditions.
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        ProcMeminfo {
            path: path.into(),
            zoneinfo: None,
            page_bytes: u64::try_from(page).unwrap_or(4096),
        }
    }

    pub fn with_zoneinfo(mut self, path: impl Into<PathBuf>) -> Self {
        self.zoneinfo = Some(path.into());
        self
    }

    /// Bytes on per-CPU free lists; 0 when no zoneinfo is configured or it
    /// cannot be read.
    pub fn pcp_free_bytes(&self) -> u64 {
        self.zoneinfo
            .as_ref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .map_or(0, |t| parse_pcp_pages(&t) * self.page_bytes)
    }

    pub fn counters(&self) -> Result<MemoryCounters> {
        let text = std::fs::read_to_string(&self.path)
            .map_err(|e| Error::MemoryCounters(format!("{}: {e}", self.path.display())))?;
        parse_meminfo(&text)
    }
}

impl MemoryReader for ProcMeminfo {
    fn used_bytes(&mut self) -> Result<u64> {
        let used = self.counters()?.used_bytes()?;
        Ok(used.saturating_sub(self.pcp_free_bytes()))
    }
}

/// System memory in use right now.
pub fn read_system_memory() -> Result<u64> {
    ProcMeminfo::default().used_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub poll_interval_ms: u64,
    pub baseline_window_ms: u64,
    /// Longest wait for used memory to become steady before the baseline;
    /// 0 skips the wait.
    #[serde(default = "default_settle_max_ms")]
    pub settle_max_ms: u64,
    /// Memory counts as steady once readings over the last
    /// [`SETTLE_WINDOW_MS`] span at most this many bytes.
    #[serde(default = "default_settle_tolerance")]
    pub settle_tolerance_bytes: u64,
}

pub const SETTLE_WINDOW_MS: u64 = 3000;

fn default_settle_max_ms() -> u64 {
    60_000
}

fn default_settle_tolerance() -> u64 {
    4 << 20
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            poll_interval_ms: 500,
            baseline_window_ms: 5000,
            settle_max_ms: default_settle_max_ms(),
            settle_tolerance_bytes: default_settle_tolerance(),
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.poll_interval_ms < 50 {
            return Err(Error::invalid(format!(
                "poll interval must be >= 50 ms, got {}",
                self.poll_interval_ms
            )));
        }
        if self.baseline_window_ms < self.poll_interval_ms {
            return Err(Error::invalid(
                "baseline window must be at least one poll interval",
            ));
        }
        Ok(())
    }

    fn interval(&self) -> Duration {
        Duration::from_millis(self.poll_interval_ms)
    }

    fn baseline_readings(&self) -> u64 {
        (self.baseline_window_ms / self.poll_interval_ms).max(1)
    }
}

/// Poll until used memory varies by at most the tolerance over the settle
/// window, or the maximum wait runs out. Returns the time spent waiting.
pub fn wait_for_steady_memory<R: MemoryReader + ?Sized>(
    reader: &mut R,
    monitor: &MonitorConfig,
) -> Result<Duration> {
    let start = Instant::now();
    if monitor.settle_max_ms == 0 {
        return Ok(start.elapsed());
    }
    let max_wait = Duration::from_millis(monitor.settle_max_ms);
    let needed = (SETTLE_WINDOW_MS / monitor.poll_interval_ms).max(1) as usize + 1;
    let mut recent = std::collections::VecDeque::with_capacity(needed);
    loop {
        if recent.len() == needed {
            recent.pop_front();
        }
        recent.push_back(reader.used_bytes()?);
        if recent.len() == needed {
            let lo = recent.iter().min().copied().unwrap_or(0);
            let hi = recent.iter().max().copied().unwrap_or(0);
            if hi - lo <= monitor.settle_tolerance_bytes {
                return Ok(start.elapsed());
            }
        }
        if start.elapsed() >= max_wait {
            return Ok(start.elapsed());
        }
        std::thread::sleep(monitor.interval());
    }
}

/// Mean used memory over the baseline window, one reading per poll interval.
pub fn capture_baseline<R: MemoryReader + ?Sized>(
    reader: &mut R,
    monitor: &MonitorConfig,
) -> Result<u64> {
    monitor.validate()?;
    let n = monitor.baseline_readings();
    let mut sum: u128 = 0;
    for i in 0..n {
        if i > 0 {
            std::thread::sleep(monitor.interval());
        }
        sum += u128::from(reader.used_bytes()?);
    }
    Ok((sum / u128::from(n)) as u64)
}

/// How to launch the job under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Shell command containing exactly one `{sample}` placeholder and
    /// optionally one `{runtime_args}` placeholder.
    pub command_template: String,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    /// Opaque arguments for the job's runtime, e.g. garbage collector flags.
    #[serde(default)]
    pub runtime_tuning_args: Vec<String>,
    pub working_dir: PathBuf,
    pub timeout_seconds: f64,
    /// Where to append the job's stdout and stderr. Discarded when unset.
    #[serde(default)]
    pub output_log: Option<PathBuf>,
}

pub(crate) fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-_./=:,+@%".contains(&b))
    {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

impl JobSpec {
    pub fn new(command_template: impl Into<String>, working_dir: impl Into<PathBuf>) -> Self {
        JobSpec {
            command_template: command_template.into(),
            environment: BTreeMap::new(),
            runtime_tuning_args: Vec::new(),
            working_dir: working_dir.into(),
            timeout_seconds: 3600.0,
            output_log: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.command_template.matches(SAMPLE_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::invalid(format!(
                "command template must contain exactly one {SAMPLE_PLACEHOLDER}, found {n}"
            )));
        }
        if self.command_template.matches(RUNTIME_ARGS_PLACEHOLDER).count() > 1 {
            return Err(Error::invalid(format!(
                "command template may contain at most one {RUNTIME_ARGS_PLACEHOLDER}"
            )));
        }
        if !(self.timeout_seconds > 0.0) {
            return Err(Error::invalid("timeout must be positive"));
        }
        Ok(())
    }

    /// The shell command for one sample.
    pub fn render(&self, sample_path: &Path) -> String {
        let args = self
            .runtime_tuning_args
            .iter()
            .map(|a| shell_quote(a))
            .collect::<Vec<_>>()
            .join(" ");
        self.command_template
            .replace(RUNTIME_ARGS_PLACEHOLDER, &args)
            .replace(
                SAMPLE_PLACEHOLDER,
                &shell_quote(&sample_path.to_string_lossy()),
            )
    }
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; ESRCH when the group is already gone is fine.
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Polls `reader` until told to stop. Readings are kept only when their
/// timestamp advances.
fn monitor_loop<R: MemoryReader + ?Sized>(
    reader: &mut R,
    interval: Duration,
    start: Instant,
    stop: mpsc::Receiver<()>,
) -> Result<Vec<MemorySample>> {
    let mut samples: Vec<MemorySample> = Vec::new();
    loop {
        let used_bytes = reader.used_bytes()?;
        let elapsed_ms = start.elapsed().as_millis() as u64;
        if samples.last().is_none_or(|s| elapsed_ms > s.elapsed_ms) {
            samples.push(MemorySample {
                elapsed_ms,
                used_bytes,
            });
        }
        match stop.recv_timeout(interval) {
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            _ => return Ok(samples),
        }
    }
}

/// Run `job` once on `sample_path`, sampling memory concurrently.
///
/// Non-zero exits and timeouts still return a [`ProfilingRun`] (with
/// `status` set accordingly) so that the readings can be inspected; only
/// spawn and counter failures are errors.
pub fn run_profiled<R: MemoryReader + ?Sized>(
    job: &JobSpec,
    sample_path: &Path,
    sample_bytes: u64,
    monitor: &MonitorConfig,
    reader: &mut R,
) -> Result<ProfilingRun> {
    job.validate()?;
    monitor.validate()?;
    wait_for_steady_memory(reader, monitor)?;
    let baseline = capture_baseline(reader, monitor)?;

    let command = job.render(sample_path);
    let (stdout, stderr) = match &job.output_log {
        Some(path) => {
            let f = File::options()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let f2 = f.try_clone().map_err(|e| Error::io(path, e))?;
            (Stdio::from(f), Stdio::from(f2))
        }
        None => (Stdio::null(), Stdio::null()),
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .current_dir(&job.working_dir)
        .envs(&job.environment)
        .env(RUNTIME_ARGS_ENV, job.runtime_tuning_args.join(" "))
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .spawn()
        .map_err(|source| Error::Spawn {
            command: command.clone(),
            source,
        })?;
    let pgid = child.id();
    let start = Instant::now();
    let timeout = Duration::from_secs_f64(job.timeout_seconds);

    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let (outcome, samples) = std::thread::scope(|scope| {
        let monitor_handle =
            scope.spawn(|| monitor_loop(reader, monitor.interval(), start, stop_rx));
        let outcome = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Ok((status, start.elapsed(), false)),
                Ok(None) => {}
                Err(e) => break Err(Error::Profiling(format!("waiting for job: {e}"))),
            }
            if start.elapsed() > timeout {
                kill_group(pgid);
                let elapsed = start.elapsed();
                break child
                    .wait()
                    .map(|status| (status, elapsed, true))
                    .map_err(|e| Error::Profiling(format!("waiting for killed job: {e}")));
            }
            if monitor_handle.is_finished() {
                // the reader failed; stop the job and surface the error below
                kill_group(pgid);
                let _ = child.wait();
                break Err(Error::Profiling("memory monitor stopped".into()));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        // reap anything the job left running in its group
        kill_group(pgid);
        let _ = stop_tx.send(());
        let samples = monitor_handle.join().expect("monitor thread panicked");
        (outcome, samples)
    });
    let samples = samples?;
    let (status, elapsed, timed_out) = outcome?;

    let run_status = if timed_out {
        RunStatus::TimedOut
    } else if status.success() {
        RunStatus::Success
    } else {
        RunStatus::Failed
    };
    Ok(ProfilingRun::from_samples(
        sample_bytes,
        baseline,
        samples,
        elapsed.as_secs_f64().max(1e-6),
        exit_code(status),
        run_status,
    ))
}

/// Settings for the full five-sample procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    pub work_dir: PathBuf,
    pub target: RuntimeTarget,
    pub format: SampleFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOutcome {
    pub plan: SamplePlan,
    pub samples: Vec<SampleFile>,
    /// Five successful runs ordered by sample size.
    pub runs: Vec<ProfilingRun>,
    /// Runs thrown away during calibration or retried after failing.
    pub discarded: Vec<ProfilingRun>,
}

fn sample_path(work_dir: &Path, index: usize) -> PathBuf {
    work_dir.join(format!("sample-{index}.dat"))
}

fn run_with_retry<R: MemoryReader + ?Sized>(
    job: &JobSpec,
    path: &Path,
    bytes: u64,
    monitor: &MonitorConfig,
    reader: &mut R,
    discarded: &mut Vec<ProfilingRun>,
) -> Result<ProfilingRun> {
    let first = run_profiled(job, path, bytes, monitor, reader)?;
    if first.is_success() {
        return Ok(first);
    }
    discarded.push(first);
    let second = run_profiled(job, path, bytes, monitor, reader)?;
    if second.is_success() {
        return Ok(second);
    }
    let msg = format!(
        "job failed twice on {} ({:?}, exit status {})",
        path.display(),
        second.status,
        second.exit_status
    );
    discarded.push(second);
    Err(Error::Profiling(msg))
}

/// Calibrate the base sample to the runtime target, then profile all five
/// sample sizes.
///
/// The base-sample run is cancelled once it exceeds the target's maximum and
/// the fraction is halved. Each sample run that fails is retried once.
pub fn profile_job<R: MemoryReader + ?Sized>(
    job: &JobSpec,
    dataset_path: &Path,
    full_dataset_bytes: u64,
    base_fraction: f64,
    monitor: &MonitorConfig,
    options: &ProfileOptions,
    reader: &mut R,
) -> Result<ProfileOutcome> {
    job.validate()?;
    monitor.validate()?;
    std::fs::create_dir_all(&options.work_dir).map_err(|e| Error::io(&options.work_dir, e))?;

    let capped = options.target.max_seconds < job.timeout_seconds;
    let calibration_job = JobSpec {
        timeout_seconds: job.timeout_seconds.min(options.target.max_seconds),
        ..job.clone()
    };

    let mut discarded = Vec::new();
    let mut fraction = base_fraction;
    let mut accepted = None;
    for _ in 0..MAX_ADJUSTMENTS {
        let plan = plan_samples(full_dataset_bytes, fraction)?;
        let path = sample_path(&options.work_dir, plan.sizes.len());
        let actual = materialize_sample(dataset_path, plan.base_size(), &path, options.format)?;
        let sample = SampleFile {
            target_bytes: plan.base_size(),
            actual_bytes: actual,
            path: path.clone(),
        };

        let mut run = run_profiled(&calibration_job, &path, actual, monitor, reader)?;
        let over_budget = run.status == RunStatus::TimedOut && capped;
        if !run.is_success() && !over_budget {
            discarded.push(run);
            run = run_with_retry(&calibration_job, &path, actual, monitor, reader, &mut discarded)?;
        }
        // a cancelled run's duration is already past the cap
        match options.target.adjust(run.duration_seconds, fraction)? {
            Adjustment::Accept => {
                accepted = Some((plan, sample, run));
                break;
            }
            // already the whole dataset and still too short: nothing more to grow
            Adjustment::Retry(next) if next == fraction && !over_budget => {
                accepted = Some((plan, sample, run));
                break;
            }
            Adjustment::Retry(next) => {
                discarded.push(run);
                fraction = next;
            }
        }
    }
    let (plan, base_sample, base_run) = accepted.ok_or_else(|| {
        Error::Profiling(format!(
            "runtime did not reach the [{}, {}] s target within {MAX_ADJUSTMENTS} attempts",
            options.target.min_seconds, options.target.max_seconds
        ))
    })?;

    let mut samples = Vec::with_capacity(plan.sizes.len());
    let mut runs = Vec::with_capacity(plan.sizes.len());
    for (i, &size) in plan.sizes[..plan.sizes.len() - 1].iter().enumerate() {
        let path = sample_path(&options.work_dir, i + 1);
        let actual = materialize_sample(dataset_path, size, &path, options.format)?;
        let run = run_with_retry(job, &path, actual, monitor, reader, &mut discarded)?;
        samples.push(SampleFile {
            target_bytes: size,
            actual_bytes: actual,
            path,
        });
        runs.push(run);
    }
    samples.push(base_sample);
    runs.push(base_run);
    runs.sort_by_key(|r| r.sample_bytes);
    samples.sort_by_key(|s| s.actual_bytes);

    Ok(ProfileOutcome {
        plan,
        samples,
        runs,
        discarded,
    })
}

/// First line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub sample_path: PathBuf,
    pub sample_bytes: u64,
    pub baseline_bytes: u64,
    pub peak_job_bytes: u64,
    pub mean_job_bytes: u64,
    pub duration_seconds: f64,
    pub exit_status: i32,
    pub status: RunStatus,
    pub recorded_at_unix_ms: u64,
}

/// Write a run as JSON lines: one header, then one line per memory sample.
pub fn write_trace(run: &ProfilingRun, sample_path: &Path, path: &Path) -> Result<()> {
    let header = TraceHeader {
        sample_path: sample_path.to_path_buf(),
        sample_bytes: run.sample_bytes,
        baseline_bytes: run.baseline_bytes,
        peak_job_bytes: run.peak_job_bytes,
        mean_job_bytes: run.mean_job_bytes,
        duration_seconds: run.duration_seconds,
        exit_status: run.exit_status,
        status: run.status,
        recorded_at_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let ser = |e: serde_json::Error| Error::Serde(e.to_string());
    serde_json::to_writer(&mut w, &header).map_err(ser)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    for s in &run.samples {
        serde_json::to_writer(&mut w, s).map_err(ser)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a trace; peak and mean are recomputed from the samples.
pub fn read_trace(path: &Path) -> Result<(TraceHeader, ProfilingRun)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty trace".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: TraceHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MemorySample =
            serde_json::from_str(&line).map_err(|e| parse_err(i as u64 + 2, e.to_string()))?;
        samples.push(s);
    }
    let run = ProfilingRun::from_samples(
        header.sample_bytes,
        header.baseline_bytes,
        samples,
        header.duration_seconds,
        header.exit_status,
        header.status,
    );
    Ok((header, run))
}
