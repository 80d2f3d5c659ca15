//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use memscale::{
    Catalog, ClusterConfig, ConfigKey, ExecutionRecord, Family, Framework, MachineType,
    MemorySample, ProfilingRun, RunStatus, GIB,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn catalog_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("catalogs/aws-c4-m4-r4.toml")
}

pub fn aws_catalog() -> Catalog {
    Catalog::load(&catalog_path()).expect("shipped catalog loads")
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn record(
    job: &str,
    framework: Framework,
    label: &str,
    machine: &MachineType,
    nodes: u32,
    cost: f64,
) -> ExecutionRecord {
    ExecutionRecord {
        job_name: job.to_string(),
        framework,
        dataset_label: label.to_string(),
        dataset_bytes: None,
        config: ClusterConfig::new(machine.clone(), nodes).unwrap(),
        runtime_seconds: 100.0,
        cost: Some(cost),
    }
}

pub fn machine(name: &str, mem_gib: u64, price: f64) -> MachineType {
    MachineType {
        name: name.to_string(),
        family: Family::Other,
        cores: 4,
        memory_bytes: mem_gib * GIB,
        price_per_hour: price,
        medium: false,
    }
}

// ---------------------------------------------------------------- oracles

/// Brute-force best-for-all ranking: for every configuration, walk every
/// (job, dataset) group of the framework except `exclude`, find the group
/// minimum by scanning, and average cost/minimum over groups containing the
/// configuration. Returns (config, mean) sorted by mean only; callers compare
/// means, and the head when it is unique.
pub fn bfa_oracle(
    history: &[ExecutionRecord],
    framework: Framework,
    exclude: Option<&str>,
) -> Vec<(ConfigKey, f64)> {
    let relevant: Vec<&ExecutionRecord> = history
        .iter()
        .filter(|r| r.framework == framework && Some(r.job_name.as_str()) != exclude)
        .collect();
    let mut group_keys: Vec<(String, String)> = relevant
        .iter()
        .map(|r| (r.job_name.clone(), r.dataset_label.clone()))
        .collect();
    group_keys.sort();
    group_keys.dedup();
    let mut configs: Vec<ConfigKey> = relevant.iter().map(|r| r.config.key()).collect();
    configs.sort();
    configs.dedup();

    let cost_of = |job: &str, label: &str, cfg: &ConfigKey| -> Option<f64> {
        let matching: Vec<f64> = relevant
            .iter()
            .filter(|r| r.job_name == job && r.dataset_label == label && &r.config.key() == cfg)
            .map(|r| r.effective_cost())
            .collect();
        if matching.is_empty() {
            None
        } else {
            Some(matching.iter().sum::<f64>() / matching.len() as f64)
        }
    };

    let mut out = Vec::new();
    for cfg in &configs {
        let mut total = 0.0;
        let mut n = 0;
        for (job, label) in &group_keys {
            let Some(c) = cost_of(job, label, cfg) else {
                continue;
            };
            let mut min = f64::INFINITY;
            for other in &configs {
                if let Some(o) = cost_of(job, label, other) {
                    if o < min {
                        min = o;
                    }
                }
            }
            total += c / min;
            n += 1;
        }
        out.push((cfg.clone(), total / n as f64));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

pub fn sse(points: &[(f64, f64)], slope: f64, intercept: f64) -> f64 {
    points
        .iter()
        .map(|&(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum()
}

/// Least squares by zooming grid search over (slope, intercept). No closed
/// form is used: each round evaluates the squared error on a 41x41 grid,
/// recentres on the best point and halves the window.
pub fn grid_search_fit(points: &[(f64, f64)], start: (f64, f64), half_width: (f64, f64)) -> (f64, f64) {
    const STEPS: i32 = 20;
    let (mut cs, mut ci) = start;
    let (mut ws, mut wi) = half_width;
    for _ in 0..80 {
        let mut best = (f64::INFINITY, cs, ci);
        for a in -STEPS..=STEPS {
            let s = cs + ws * f64::from(a) / f64::from(STEPS);
            for b in -STEPS..=STEPS {
                let i = ci + wi * f64::from(b) / f64::from(STEPS);
                let e = sse(points, s, i);
                if e < best.0 {
                    best = (e, s, i);
                }
            }
        }
        cs = best.1;
        ci = best.2;
        ws /= 2.0;
        wi /= 2.0;
    }
    (cs, ci)
}

// ------------------------------------------------------------- generators

/// Random history over a random catalog with missing cells and two
/// frameworks. Every group has at least one record.
pub fn random_history(rng: &mut StdRng) -> Vec<ExecutionRecord> {
    let n_machines = rng.gen_range(2..6);
    let machines: Vec<MachineType> = (0..n_machines)
        .map(|i| {
            machine(
                &format!("t{i}.size"),
                rng.gen_range(2..64),
                rng.gen_range(0.05..1.0),
            )
        })
        .collect();
    let scaleouts = [2u32, 4, 8, 12, 16];
    let mut configs = Vec::new();
    for m in &machines {
        for &n in &scaleouts {
            if rng.gen_bool(0.6) {
                configs.push((m.clone(), n));
            }
        }
    }
    if configs.is_empty() {
        configs.push((machines[0].clone(), 4));
    }
    let mut history = Vec::new();
    let n_jobs = rng.gen_range(2..8);
    for j in 0..n_jobs {
        let framework = if rng.gen_bool(0.7) {
            Framework::Spark
        } else {
            Framework::Hadoop
        };
        for label in ["huge", "bigdata"] {
            let mut chosen: Vec<&(MachineType, u32)> =
                configs.iter().filter(|_| rng.gen_bool(0.8)).collect();
            if chosen.is_empty() {
                chosen.push(&configs[rng.gen_range(0..configs.len())]);
            }
            for (m, n) in chosen {
                let cost = rng.gen_range(0.5..20.0);
                history.push(record(&format!("job{j}"), framework, label, m, *n, cost));
            }
        }
    }
    history
}

/// Synthetic profiling run whose peak is `peak_bytes` above `baseline`.
pub fn synthetic_run(sample_bytes: u64, peak_bytes: u64, baseline: u64) -> ProfilingRun {
    let ramp: Vec<MemorySample> = (0..12u64)
        .map(|i| {
            let level = match i {
                0..=5 => peak_bytes * i / 5,
                6..=8 => peak_bytes,
                _ => peak_bytes / 3,
            };
            MemorySample {
                elapsed_ms: i * 500,
                used_bytes: baseline + level,
            }
        })
        .collect();
    ProfilingRun::from_samples(sample_bytes, baseline, ramp, 6.0, 0, RunStatus::Success)
}

/// A job in the synthetic memory-bottleneck suite.
#[derive(Debug, Clone)]
pub struct SuiteJob {
    pub name: String,
    pub label: String,
    pub full_dataset_bytes: u64,
    /// Total job memory needed on the full dataset; 0 for jobs that are not
    /// memory-bound.
    pub need_bytes: u64,
    /// Whether profiling shows a linear memory relation.
    pub linear: bool,
    pub intercept_bytes: u64,
}

impl SuiteJob {
    /// Five profiling runs at 1/5..5/5 of a 1% sample.
    pub fn traces(&self, rng: &mut StdRng) -> Vec<ProfilingRun> {
        let base = self.full_dataset_bytes / 100;
        let baseline = 3 * GIB;
        (1..=5u64)
            .map(|i| {
                let s = base * i / 5;
                let peak = if self.linear {
                    let slope = (self.need_bytes - self.intercept_bytes) as f64
                        / self.full_dataset_bytes as f64;
                    let exact = slope * s as f64 + self.intercept_bytes as f64;
                    exact * (1.0 + rng.gen_range(-0.002..0.002))
                } else {
                    // readings dominated by noise, unrelated to size
                    2.0 * GIB as f64 * (1.0 + rng.gen_range(-0.3..0.3))
                };
                synthetic_run(s, peak as u64, baseline)
            })
            .collect()
    }
}

pub const PER_NODE_OVERHEAD: u64 = 2 * GIB;

/// Cost of running a job on a configuration: work spread over all cores,
/// a per-node coordination overhead, and a 4x slowdown when total memory
/// cannot hold the job's working set plus per-node overhead.
fn suite_cost(
    work: f64,
    need_bytes: u64,
    m: &MachineType,
    nodes: u32,
    noise: f64,
) -> (f64, f64) {
    let n = f64::from(nodes);
    let mut runtime = work / (n * f64::from(m.cores)) * (1.0 + 0.08 * n) * noise;
    let total = u64::from(nodes) * m.memory_bytes;
    if need_bytes > 0 && total < need_bytes + u64::from(nodes) * PER_NODE_OVERHEAD {
        runtime *= 4.0;
    }
    (runtime, runtime * n * m.price_per_hour / 3600.0)
}

pub struct Suite {
    pub history: Vec<ExecutionRecord>,
    pub jobs: Vec<SuiteJob>,
}

/// Ten suite jobs (seven memory-bound with linear memory, three without)
/// among thirty background jobs that are not memory-bound.
pub fn memory_suite(catalog: &Catalog, seed: u64) -> Suite {
    let mut rng = rng(seed);
    let scaleouts = [4u32, 8, 12, 16, 24, 32, 48];
    let mut history = Vec::new();
    let mut jobs = Vec::new();

    let add_job = |name: String, need: u64, rng: &mut StdRng, history: &mut Vec<ExecutionRecord>| {
        let work = rng.gen_range(20_000.0..200_000.0);
        for m in &catalog.machines {
            for &n in &scaleouts {
                if rng.gen_bool(0.05) {
                    continue;
                }
                let (runtime, cost) = suite_cost(work, need, m, n, rng.gen_range(0.97..1.03));
                history.push(ExecutionRecord {
                    job_name: name.clone(),
                    framework: Framework::Spark,
                    dataset_label: "bigdata".into(),
                    dataset_bytes: None,
                    config: ClusterConfig::new(m.clone(), n).unwrap(),
                    runtime_seconds: runtime,
                    cost: Some(cost),
                });
            }
        }
    };

    for b in 0..30 {
        add_job(format!("background{b:02}"), 0, &mut rng, &mut history);
    }
    for j in 0..10 {
        let linear = j < 7;
        let need = if linear {
            rng.gen_range(100..400) * GIB
        } else {
            0
        };
        let name = format!("suite{j}");
        add_job(name.clone(), need, &mut rng, &mut history);
        jobs.push(SuiteJob {
            name,
            label: "bigdata".into(),
            full_dataset_bytes: rng.gen_range(200..800) * 1_000_000_000,
            need_bytes: need,
            linear,
            intercept_bytes: GIB,
        });
    }
    Suite { history, jobs }
}

pub fn normalized_by_key(group: &[&ExecutionRecord]) -> BTreeMap<ConfigKey, f64> {
    memscale::evaluator::normalize_costs(group).unwrap()
}
