//! Linear memory model: peak job memory as a function of input size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MemoryModel, ProfilingRun};
use crate::GIB;

/// Training R² must be strictly above this for the model to be trusted.
pub const LINEARITY_THRESHOLD: f64 = 0.99;

/// Ordinary least squares on `(input_bytes, peak_bytes)` points.
/// Returns `(slope, intercept)`.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Degenerate("non-finite coordinate".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("all input sizes are equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Coefficient of determination of a given line over `points`.
///
/// With zero total variance the score is 1.0 for a perfect fit and 0.0
/// otherwise.
pub fn r2_score(points: &[(f64, f64)], slope: f64, intercept: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Degenerate("no points to score".into()));
    }
    let n = points.len() as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &(x, y) in points {
        let r = y - (slope * x + intercept);
        ss_res += r * r;
        let d = y - mean_y;
        ss_tot += d * d;
    }
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn decide_linearity(r2: f64) -> bool {
    r2 > LINEARITY_THRESHOLD
}

impl MemoryModel {
    /// Fit, score on the training points, and apply the linearity gate.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        let (slope, intercept) = fit_linear(points)?;
        let r2 = r2_score(points, slope, intercept)?;
        Ok(MemoryModel {
            slope,
            intercept,
            r2,
            is_linear: decide_linearity(r2),
        })
    }

    /// Fit on successful runs, using each run's sample size and peak.
    pub fn fit_runs(runs: &[ProfilingRun]) -> Result<Self> {
        let points: Vec<(f64, f64)> = runs
            .iter()
            .filter(|r| r.is_success())
            .map(|r| (r.sample_bytes as f64, r.peak_job_bytes as f64))
            .collect();
        Self::fit(&points)
    }

    pub fn predict(&self, input_bytes: u64) -> f64 {
        self.slope * input_bytes as f64 + self.intercept
    }

    /// Plain-text `key: value` summary.
    pub fn summary(&self) -> String {
        format!(
            "slope: {:.6}\nintercept_bytes: {:.0}\nr2: {:.6}\nverdict: {}\n",
            self.slope,
            self.intercept,
            self.r2,
            if self.is_linear { "linear" } else { "not_linear" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequirementParams {
    /// Memory reserved on each node for the OS and framework.
    pub per_node_overhead_bytes: u64,
    /// Multiplicative safety margin on extrapolated job memory.
    pub leeway_factor: f64,
}

impl Default for RequirementParams {
    fn default() -> Self {
        RequirementParams {
            per_node_overhead_bytes: 2 * GIB,
            leeway_factor: 0.10,
        }
    }
}

impl RequirementParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.leeway_factor >= 0.0) || !self.leeway_factor.is_finite() {
            return Err(Error::invalid(format!(
                "leeway factor must be >= 0, got {}",
                self.leeway_factor
            )));
        }
        Ok(())
    }
}

/// Predicted job memory on the full dataset, clamped at zero and rounded up.
pub fn extrapolate_job_bytes(model: &MemoryModel, full_dataset_bytes: u64) -> u64 {
    let predicted = model.predict(full_dataset_bytes);
    if predicted > 0.0 {
        predicted.ceil() as u64
    } else {
        0
    }
}

/// Total cluster memory needed to run on the full dataset with `node_count` nodes.
pub fn estimate_requirement(
    model: &MemoryModel,
    full_dataset_bytes: u64,
    node_count: u32,
    params: &RequirementParams,
) -> Result<u64> {
    if !model.is_linear {
        return Err(Error::NonLinearModel { r2: model.r2 });
    }
    if full_dataset_bytes == 0 {
        return Err(Error::invalid("full dataset size must be > 0"));
    }
    if node_count == 0 {
        return Err(Error::invalid("node_count must be >= 1"));
    }
    params.validate()?;
    let job = extrapolate_job_bytes(model, full_dataset_bytes) as f64;
    let with_leeway = (job * (1.0 + params.leeway_factor)).ceil() as u64;
    Ok(with_leeway + u64::from(node_count) * params.per_node_overhead_bytes)
}
