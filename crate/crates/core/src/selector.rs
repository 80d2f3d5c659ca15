//! Ranking configurations by historical cost-efficiency and picking the best
//! one that satisfies a memory requirement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::normalize_costs;
use crate::memmodel::{estimate_requirement, extrapolate_job_bytes, RequirementParams};
use crate::model::{
    total_cluster_memory, ClusterConfig, ConfigKey, ExecutionRecord, Framework, MemoryModel,
    Recommendation, Strategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub config: ClusterConfig,
    /// Mean over job groups of the per-group min-normalized cost.
    pub mean_normalized_cost: f64,
    /// Number of job groups the configuration appears in.
    pub support_count: usize,
}

/// Group key for normalization: one job on one dataset size.
pub(crate) type GroupKey = (String, String);

pub(crate) fn group_records<'a>(
    records: impl IntoIterator<Item = &'a ExecutionRecord>,
) -> BTreeMap<GroupKey, Vec<&'a ExecutionRecord>> {
    let mut groups: BTreeMap<GroupKey, Vec<&ExecutionRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.job_name.clone(), r.dataset_label.clone()))
            .or_default()
            .push(r);
    }
    groups
}

/// Rank configurations by mean normalized cost over all jobs of `framework`
/// other than `exclude_job`.
///
/// Ties go to the smaller total cluster memory, then machine type name,
/// then the smaller node count.
pub fn bfa_rank(
    history: &[ExecutionRecord],
    framework: Framework,
    exclude_job: Option<&str>,
) -> Result<Vec<RankedConfig>> {
    let filtered = history
        .iter()
        .filter(|r| r.framework == framework && Some(r.job_name.as_str()) != exclude_job);
    let groups = group_records(filtered);
    if groups.is_empty() {
        return Err(Error::EmptyHistory(format!(
            "no {framework} records{}",
            exclude_job
                .map(|j| format!(" besides job `{j}`"))
                .unwrap_or_default()
        )));
    }

    let mut configs: BTreeMap<ConfigKey, ClusterConfig> = BTreeMap::new();
    let mut sums: BTreeMap<ConfigKey, (f64, usize)> = BTreeMap::new();
    for records in groups.values() {
        for r in records {
            configs
                .entry(r.config.key())
                .or_insert_with(|| r.config.clone());
        }
        for (key, norm) in normalize_costs(records)? {
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += norm;
            e.1 += 1;
        }
    }

    let mut ranking: Vec<RankedConfig> = sums
        .into_iter()
        .map(|(key, (sum, count))| RankedConfig {
            config: configs.remove(&key).expect("config seen"),
            mean_normalized_cost: sum / count as f64,
            support_count: count,
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.mean_normalized_cost
            .total_cmp(&b.mean_normalized_cost)
            .then_with(|| total_cluster_memory(&a.config).cmp(&total_cluster_memory(&b.config)))
            .then_with(|| a.config.machine_type.name.cmp(&b.config.machine_type.name))
            .then_with(|| a.config.node_count.cmp(&b.config.node_count))
    });
    Ok(ranking)
}

/// Pick a configuration from `ranking`. See [`select_where`].
pub fn select(
    ranking: &[RankedConfig],
    model: Option<&MemoryModel>,
    full_dataset_bytes: u64,
    params: &RequirementParams,
) -> Result<Recommendation> {
    select_where(ranking, model, full_dataset_bytes, params, |_| true)
}

/// Like [`select`], but only configurations for which `eligible` holds are
/// considered. The evaluator uses this to skip configurations that were
/// never run for the job being scored.
///
/// Without a linear model this returns the first eligible ranked config.
/// With one, it returns the first eligible config whose total memory covers
/// the requirement for its node count; if none does, the eligible config
/// with the most total memory is returned with the constraint marked unmet.
pub fn select_where(
    ranking: &[RankedConfig],
    model: Option<&MemoryModel>,
    full_dataset_bytes: u64,
    params: &RequirementParams,
    eligible: impl Fn(&ConfigKey) -> bool,
) -> Result<Recommendation> {
    let candidates: Vec<&RankedConfig> =
        ranking.iter().filter(|r| eligible(&r.config.key())).collect();
    let head = *candidates
        .first()
        .ok_or_else(|| Error::invalid("ranking has no eligible configurations"))?;

    let fallback = |why: String| Recommendation {
        config: head.config.clone(),
        job_memory_bytes: 0,
        required_total_bytes: 0,
        strategy: Strategy::BfaFallback,
        satisfied_memory_constraint: true,
        rationale: format!(
            "{why}; using the best-for-all configuration (mean normalized cost {:.4})",
            head.mean_normalized_cost
        ),
    };

    let model = match model {
        None => return Ok(fallback("no memory model".into())),
        Some(m) if !m.is_linear => {
            return Ok(fallback(format!(
                "memory use is not linear in input size (r2 = {:.4})",
                m.r2
            )))
        }
        Some(m) => m,
    };
    let job_bytes = extrapolate_job_bytes(model, full_dataset_bytes);
    if job_bytes == 0 {
        return Ok(fallback("extrapolated job memory is zero".into()));
    }

    for (rank, candidate) in candidates.iter().enumerate() {
        let required =
            estimate_requirement(model, full_dataset_bytes, candidate.config.node_count, params)?;
        let total = total_cluster_memory(&candidate.config);
        if total >= required {
            return Ok(Recommendation {
                config: candidate.config.clone(),
                job_memory_bytes: job_bytes,
                required_total_bytes: required,
                strategy: Strategy::Crispy,
                satisfied_memory_constraint: true,
                rationale: format!(
                    "eligible rank {} of {}: {} bytes total memory covers the {} byte requirement",
                    rank + 1,
                    candidates.len(),
                    total,
                    required
                ),
            });
        }
    }

    let biggest = candidates
        .iter()
        .max_by(|a, b| {
            total_cluster_memory(&a.config)
                .cmp(&total_cluster_memory(&b.config))
                // prefer the better-ranked one among equals
                .then_with(|| b.mean_normalized_cost.total_cmp(&a.mean_normalized_cost))
        })
        .expect("non-empty");
    let required =
        estimate_requirement(model, full_dataset_bytes, biggest.config.node_count, params)?;
    Ok(Recommendation {
        config: biggest.config.clone(),
        job_memory_bytes: job_bytes,
        required_total_bytes: required,
        strategy: Strategy::Crispy,
        satisfied_memory_constraint: false,
        rationale: format!(
            "WARNING: no configuration has enough memory; chose the largest ({} bytes) against a {} byte requirement",
            total_cluster_memory(&biggest.config),
            required
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, MachineType};
    use crate::GIB;

    fn machine(name: &str, mem_gib: u64) -> MachineType {
        MachineType {
            name: name.into(),
            family: Family::M,
            cores: 4,
            memory_bytes: mem_gib * GIB,
            price_per_hour: 1.0,
            medium: false,
        }
    }

    fn rec(job: &str, m: &MachineType, nodes: u32, cost: f64) -> ExecutionRecord {
        ExecutionRecord {
            job_name: job.into(),
            framework: Framework::Spark,
            dataset_label: "huge".into(),
            dataset_bytes: None,
            config: ClusterConfig::new(m.clone(), nodes).unwrap(),
            runtime_seconds: 100.0,
            cost: Some(cost),
        }
    }

    #[test]
    fn singleton_history() {
        let a = machine("a", 8);
        let ranking = bfa_rank(&[rec("j", &a, 4, 3.0)], Framework::Spark, None).unwrap();
        assert_eq!(ranking.len(), 1);
        assert_eq!(ranking[0].mean_normalized_cost, 1.0);
        assert_eq!(ranking[0].support_count, 1);
    }

    #[test]
    fn excluding_the_only_job_errors() {
        let a = machine("a", 8);
        let r = bfa_rank(&[rec("j", &a, 4, 3.0)], Framework::Spark, Some("j"));
        assert!(matches!(r, Err(Error::EmptyHistory(_))));
        let r = bfa_rank(&[rec("j", &a, 4, 3.0)], Framework::Hadoop, None);
        assert!(matches!(r, Err(Error::EmptyHistory(_))));
    }

    #[test]
    fn ties_break_on_memory_then_name_then_nodes() {
        let small = machine("b", 4);
        let big = machine("a", 16);
        let history = vec![
            rec("j", &big, 2, 1.0),
            rec("j", &small, 4, 1.0),
            rec("j", &small, 2, 1.0),
        ];
        let ranking = bfa_rank(&history, Framework::Spark, None).unwrap();
        let keys: Vec<String> = ranking.iter().map(|r| r.config.key().to_string()).collect();
        assert_eq!(keys, vec!["b:2", "b:4", "a:2"]);

        let same_mem_a = machine("a", 8);
        let same_mem_b = machine("b", 8);
        let history = vec![rec("j", &same_mem_b, 2, 1.0), rec("j", &same_mem_a, 2, 1.0)];
        let ranking = bfa_rank(&history, Framework::Spark, None).unwrap();
        assert_eq!(ranking[0].config.machine_type.name, "a");
    }

    fn ranked(m: &MachineType, nodes: u32, mean: f64) -> RankedConfig {
        RankedConfig {
            config: ClusterConfig::new(m.clone(), nodes).unwrap(),
            mean_normalized_cost: mean,
            support_count: 1,
        }
    }

    fn lin(slope: f64, intercept: f64) -> MemoryModel {
        MemoryModel {
            slope,
            intercept,
            r2: 1.0,
            is_linear: true,
        }
    }

    #[test]
    fn nonlinear_model_falls_back_to_head() {
        let ranking = vec![ranked(&machine("x", 4), 4, 1.1), ranked(&machine("y", 64), 8, 1.5)];
        let mut m = lin(10.0, 0.0);
        m.is_linear = false;
        m.r2 = 0.8;
        let rec = select(&ranking, Some(&m), 100 * GIB, &RequirementParams::default()).unwrap();
        assert_eq!(rec.strategy, Strategy::BfaFallback);
        assert_eq!(rec.job_memory_bytes, 0);
        assert_eq!(rec.config.machine_type.name, "x");
        let rec = select(&ranking, None, 100 * GIB, &RequirementParams::default()).unwrap();
        assert_eq!(rec.config.machine_type.name, "x");
    }

    #[test]
    fn requirement_skips_underprovisioned_configs() {
        // totals: 16, 32, 96 GiB; requirement with 0.5 slope on 100 GiB,
        // 2 GiB/node overhead, no leeway: 50 + 2n GiB.
        let ranking = vec![
            ranked(&machine("x", 4), 4, 1.1),
            ranked(&machine("y", 8), 4, 1.2),
            ranked(&machine("z", 24), 4, 1.3),
        ];
        let params = RequirementParams {
            per_node_overhead_bytes: 2 * GIB,
            leeway_factor: 0.0,
        };
        let rec = select(&ranking, Some(&lin(0.5, 0.0)), 100 * GIB, &params).unwrap();
        assert_eq!(rec.strategy, Strategy::Crispy);
        assert!(rec.satisfied_memory_constraint);
        assert_eq!(rec.config.machine_type.name, "z");
        assert_eq!(rec.required_total_bytes, 58 * GIB);
        assert_eq!(rec.job_memory_bytes, 50 * GIB);
    }

    #[test]
    fn zero_requirement_matches_fallback() {
        let ranking = vec![ranked(&machine("x", 4), 4, 1.1), ranked(&machine("y", 64), 8, 1.5)];
        let params = RequirementParams {
            per_node_overhead_bytes: 0,
            leeway_factor: 0.0,
        };
        let rec = select(&ranking, Some(&lin(0.0, 0.0)), 100 * GIB, &params).unwrap();
        let fb = select(&ranking, None, 100 * GIB, &params).unwrap();
        assert_eq!(rec.config, fb.config);
    }

    #[test]
    fn unsatisfiable_picks_largest_and_warns() {
        let ranking = vec![
            ranked(&machine("x", 4), 4, 1.1),
            ranked(&machine("y", 64), 2, 1.5),
            ranked(&machine("z", 8), 8, 1.2),
        ];
        let rec =
            select(&ranking, Some(&lin(10.0, 0.0)), 100 * GIB, &RequirementParams::default())
                .unwrap();
        assert!(!rec.satisfied_memory_constraint);
        assert_eq!(rec.config.machine_type.name, "y");
        assert!(rec.rationale.contains("WARNING"));
    }

    #[test]
    fn empty_ranking_errors() {
        assert!(select(&[], None, GIB, &RequirementParams::default()).is_err());
    }
}
