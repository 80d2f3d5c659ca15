//! Domain types shared across the pipeline.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Machine family. `c` has the least memory per core, `r` the most.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    C,
    M,
    R,
    Other,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" => Ok(Family::C),
            "m" => Ok(Family::M),
            "r" => Ok(Family::R),
            "other" => Ok(Family::Other),
            other => Err(Error::invalid(format!("unknown machine family `{other}`"))),
        }
    }
}

/// A purchasable node type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineType {
    pub name: String,
    pub family: Family,
    pub cores: u32,
    pub memory_bytes: u64,
    pub price_per_hour: f64,
    /// Marks the catalog's default "medium" node type for the evaluator.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub medium: bool,
}

impl MachineType {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("machine type name is empty"));
        }
        if self.memory_bytes == 0 {
            return Err(Error::invalid(format!("{}: memory_bytes must be > 0", self.name)));
        }
        if self.cores == 0 {
            return Err(Error::invalid(format!("{}: cores must be >= 1", self.name)));
        }
        if !(self.price_per_hour >= 0.0) || !self.price_per_hour.is_finite() {
            return Err(Error::invalid(format!(
                "{}: price_per_hour must be a finite non-negative number",
                self.name
            )));
        }
        Ok(())
    }
}

/// The set of node types a recommendation may choose from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(rename = "machine", default)]
    pub machines: Vec<MachineType>,
}

impl Catalog {
    pub fn new(machines: Vec<MachineType>) -> Result<Self> {
        let catalog = Catalog { machines };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let catalog: Catalog =
            toml::from_str(text).map_err(|e| Error::Serde(format!("catalog: {e}")))?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Serde(msg) => Error::Serde(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for m in &self.machines {
            m.validate()?;
            if !seen.insert(m.name.as_str()) {
                return Err(Error::invalid(format!("duplicate machine type `{}`", m.name)));
            }
        }
        if self.machines.iter().filter(|m| m.medium).count() > 1 {
            return Err(Error::invalid("more than one machine type is flagged medium"));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MachineType> {
        self.machines.iter().find(|m| m.name == name)
    }

    pub fn medium(&self) -> Option<&MachineType> {
        self.machines.iter().find(|m| m.medium)
    }
}

/// A node type together with a scale-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub machine_type: MachineType,
    pub node_count: u32,
}

impl ClusterConfig {
    pub fn new(machine_type: MachineType, node_count: u32) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::invalid("node_count must be >= 1"));
        }
        Ok(ClusterConfig {
            machine_type,
            node_count,
        })
    }

    pub fn key(&self) -> ConfigKey {
        ConfigKey {
            machine: self.machine_type.name.clone(),
            nodes: self.node_count,
        }
    }
}

impl fmt::Display for ClusterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x {}", self.node_count, self.machine_type.name)
    }
}

/// Identity of a configuration: machine type name plus node count.
///
/// Parses from and prints as `name:count`, e.g. `m4.xlarge:12`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigKey {
    pub machine: String,
    pub nodes: u32,
}

impl fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.machine, self.nodes)
    }
}

impl FromStr for ConfigKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (machine, nodes) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::invalid(format!("expected `machine:count`, got `{s}`")))?;
        let nodes: u32 = nodes
            .parse()
            .map_err(|_| Error::invalid(format!("bad node count in `{s}`")))?;
        if machine.is_empty() || nodes == 0 {
            return Err(Error::invalid(format!("bad configuration `{s}`")));
        }
        Ok(ConfigKey {
            machine: machine.to_string(),
            nodes,
        })
    }
}

/// Total memory across all nodes of a configuration.
pub fn total_cluster_memory(config: &ClusterConfig) -> u64 {
    u64::from(config.node_count) * config.machine_type.memory_bytes
}

/// Cost of running a configuration for `runtime_seconds`, billed per second.
pub fn execution_cost(runtime_seconds: f64, config: &ClusterConfig) -> Result<f64> {
    if !(runtime_seconds > 0.0) || !runtime_seconds.is_finite() {
        return Err(Error::invalid(format!(
            "runtime must be positive, got {runtime_seconds}"
        )));
    }
    Ok(runtime_seconds * f64::from(config.node_count) * config.machine_type.price_per_hour / 3600.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Spark,
    Hadoop,
    Other,
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spark" => Ok(Framework::Spark),
            "hadoop" => Ok(Framework::Hadoop),
            "other" => Ok(Framework::Other),
            other => Err(Error::invalid(format!("unknown framework `{other}`"))),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Spark => "spark",
            Framework::Hadoop => "hadoop",
            Framework::Other => "other",
        })
    }
}

/// One historical job execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub job_name: String,
    pub framework: Framework,
    pub dataset_label: String,
    #[serde(default)]
    pub dataset_bytes: Option<u64>,
    pub config: ClusterConfig,
    pub runtime_seconds: f64,
    #[serde(default)]
    pub cost: Option<f64>,
}

impl ExecutionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.node_count() == 0 {
            return Err(Error::invalid("node_count must be >= 1"));
        }
        if !(self.runtime_seconds > 0.0) || !self.runtime_seconds.is_finite() {
            return Err(Error::invalid("runtime_seconds must be positive"));
        }
        if let Some(cost) = self.cost {
            if !cost.is_finite() || cost < 0.0 {
                return Err(Error::invalid("cost must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    fn node_count(&self) -> u32 {
        self.config.node_count
    }

    /// The recorded cost, or the per-second cost derived from runtime and price.
    pub fn effective_cost(&self) -> f64 {
        match self.cost {
            Some(c) => c,
            None => {
                self.runtime_seconds
                    * f64::from(self.config.node_count)
                    * self.config.machine_type.price_per_hour
                    / 3600.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySample {
    pub elapsed_ms: u64,
    pub used_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failed,
    TimedOut,
}

/// A single profiled execution on one dataset sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingRun {
    pub sample_bytes: u64,
    pub baseline_bytes: u64,
    pub samples: Vec<MemorySample>,
    pub peak_job_bytes: u64,
    /// Mean baseline-corrected usage; recorded for diagnostics, not modeled.
    pub mean_job_bytes: u64,
    pub duration_seconds: f64,
    pub exit_status: i32,
    pub status: RunStatus,
}

impl ProfilingRun {
    pub fn from_samples(
        sample_bytes: u64,
        baseline_bytes: u64,
        samples: Vec<MemorySample>,
        duration_seconds: f64,
        exit_status: i32,
        status: RunStatus,
    ) -> Self {
        let peak_job_bytes = peak_job_bytes(&samples, baseline_bytes);
        let mean_job_bytes = if samples.is_empty() {
            0
        } else {
            let total: u128 = samples
                .iter()
                .map(|s| u128::from(s.used_bytes.saturating_sub(baseline_bytes)))
                .sum();
            (total / samples.len() as u128) as u64
        };
        ProfilingRun {
            sample_bytes,
            baseline_bytes,
            samples,
            peak_job_bytes,
            mean_job_bytes,
            duration_seconds,
            exit_status,
            status,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Success
    }
}

/// Largest baseline-corrected reading, clamped at zero.
pub fn peak_job_bytes(samples: &[MemorySample], baseline_bytes: u64) -> u64 {
    samples
        .iter()
        .map(|s| s.used_bytes.saturating_sub(baseline_bytes))
        .max()
        .unwrap_or(0)
}

/// Linear fit of peak memory against input size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Bytes of memory per byte of input.
    pub slope: f64,
    /// Bytes.
    pub intercept: f64,
    pub r2: f64,
    pub is_linear: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Crispy,
    BfaFallback,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Crispy => "crispy",
            Strategy::BfaFallback => "bfa_fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub config: ClusterConfig,
    /// Extrapolated job memory for the full dataset, before leeway and
    /// per-node overhead. Zero for the fallback strategy.
    pub job_memory_bytes: u64,
    /// Requirement (job memory with leeway plus per-node overhead) evaluated
    /// for the chosen configuration's node count. Zero for the fallback.
    pub required_total_bytes: u64,
    pub strategy: Strategy,
    pub satisfied_memory_constraint: bool,
    pub rationale: String,
}
