//! Run-level metrics with percentile-bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::mcsp::{Outcome, StepRecord};

/// Mean with a two-sided 90% (5%/95%) percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl Estimate {
    pub fn missing() -> Self {
        Self {
            mean: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            n: 0,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sorted bootstrap means of `values`.
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// NaN entries (undefined for that realization) are skipped.
pub fn estimate(values: &[f64], resamples: usize, seed: u64) -> Estimate {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return Estimate::missing();
    }
    let boot = bootstrap_means(&v, resamples, seed);
    Estimate {
        mean: mean(&v),
        ci_low: quantile(&boot, 0.05),
        ci_high: quantile(&boot, 0.95),
        n: v.len(),
    }
}

/// One-sided lower confidence bound on the mean at `level` (e.g. 0.9).
pub fn lower_confidence_bound(values: &[f64], level: f64, resamples: usize, seed: u64) -> f64 {
    quantile(&bootstrap_means(values, resamples, seed), 1.0 - level)
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt() / m
}

/// Metrics of a single realization (one validation episode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationMetrics {
    pub weighted_completed: f64,
    pub completed: u64,
    pub proposals: u64,
    pub collisions: u64,
    pub collision_ratio: f64,
    pub per_type: Vec<u64>,
    pub energy_spent: f64,
    /// NaN when nothing was completed.
    pub energy_per_completed: f64,
    /// Per step: mean payment over the MUs active in that step.
    pub reward_series: Vec<f64>,
}

pub fn realization_metrics(records: &[StepRecord], num_types: usize) -> Result<RealizationMetrics> {
    if records.is_empty() {
        return Err(Error::Dataset(DatasetError::Empty));
    }
    let mut m = RealizationMetrics {
        weighted_completed: 0.0,
        completed: 0,
        proposals: 0,
        collisions: 0,
        collision_ratio: 0.0,
        per_type: vec![0; num_types],
        energy_spent: 0.0,
        energy_per_completed: f64::NAN,
        reward_series: Vec::with_capacity(records.len()),
    };
    for r in records {
        m.weighted_completed += r.weighted_completed();
        m.proposals += r.proposals.len() as u64;
        m.collisions += r.decision.total_collisions() as u64;
        for &n in &r.completed {
            let task = r.tasks.iter().find(|t| t.index == n).ok_or_else(|| {
                Error::Other(format!(
                    "step {}: completed task {n} was never published",
                    r.step
                ))
            })?;
            let slot = m.per_type.get_mut(task.task_type).ok_or_else(|| {
                Error::Other(format!(
                    "task type {} outside 0..{num_types}",
                    task.task_type
                ))
            })?;
            *slot += 1;
            m.completed += 1;
        }
        m.energy_spent += r.energy.iter().map(|l| l.spent).sum::<f64>();
        let paid: f64 = r
            .active_mus
            .iter()
            .map(|k| r.payments.get(k).copied().unwrap_or(0.0))
            .sum();
        m.reward_series.push(if r.active_mus.is_empty() {
            0.0
        } else {
            paid / r.active_mus.len() as f64
        });
    }
    if m.proposals > 0 {
        m.collision_ratio = m.collisions as f64 / m.proposals as f64;
    }
    if m.completed > 0 {
        m.energy_per_completed = m.energy_spent / m.completed as f64;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub realizations: usize,
    pub weighted_completed: Estimate,
    pub collision_ratio: Estimate,
    pub per_type_completions: Vec<Estimate>,
    pub energy_per_completed_task: Estimate,
    /// Coefficient of variation of the per-type completion totals.
    pub per_type_cv: f64,
    /// Per-step mean reward per active MU, averaged over realizations.
    pub reward_series: Vec<f64>,
}

pub fn summarize(
    per_realization: &[RealizationMetrics],
    resamples: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if per_realization.is_empty() {
        return Err(Error::Dataset(DatasetError::Empty));
    }
    let col = |f: &dyn Fn(&RealizationMetrics) -> f64| {
        per_realization.iter().map(f).collect::<Vec<f64>>()
    };
    let num_types = per_realization[0].per_type.len();
    let per_type_completions = (0..num_types)
        .map(|c| estimate(&col(&|m| m.per_type[c] as f64), resamples, seed))
        .collect();
    let totals: Vec<f64> = (0..num_types)
        .map(|c| per_realization.iter().map(|m| m.per_type[c] as f64).sum())
        .collect();
    let steps = per_realization
        .iter()
        .map(|m| m.reward_series.len())
        .max()
        .unwrap_or(0);
    let reward_series = (0..steps)
        .map(|t| {
            let v: Vec<f64> = per_realization
                .iter()
                .filter_map(|m| m.reward_series.get(t).copied())
                .collect();
            mean(&v)
        })
        .collect();
    Ok(MetricsReport {
        realizations: per_realization.len(),
        weighted_completed: estimate(&col(&|m| m.weighted_completed), resamples, seed),
        collision_ratio: estimate(&col(&|m| m.collision_ratio), resamples, seed),
        per_type_completions,
        energy_per_completed_task: estimate(&col(&|m| m.energy_per_completed), resamples, seed),
        per_type_cv: coefficient_of_variation(&totals),
        reward_series,
    })
}

/// Metrics over several realizations, each a complete record stream.
pub fn compute_metrics(
    realizations: &[Vec<StepRecord>],
    num_types: usize,
    resamples: usize,
) -> Result<MetricsReport> {
    let per: Vec<RealizationMetrics> = realizations
        .iter()
        .map(|r| realization_metrics(r, num_types))
        .collect::<Result<_>>()?;
    summarize(&per, resamples, 0)
}

/// Whether any attempt in the records failed for lack of energy.
pub fn has_shortfall(records: &[StepRecord]) -> bool {
    records
        .iter()
        .flat_map(|r| &r.attempts)
        .any(|a| a.outcome == Outcome::EnergyShortfall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::EnergyLedger;
    use crate::mcsp::{AssignmentDecision, Attempt, Proposal, TaskSummary};
    use crate::model::{EffortBreakdown, ResourceChoice};
    use std::collections::BTreeMap;

    fn record(step: usize, completed: Vec<usize>) -> StepRecord {
        let choice = ResourceChoice {
            compute_rate: 1e8,
            transmit_power: 0.1,
        };
        let proposals = vec![Proposal {
            mu: 0,
            task: 0,
            payment: 2.0,
            choice,
        }];
        let attempts = vec![Attempt {
            mu: 0,
            task: 0,
            outcome: if completed.is_empty() {
                Outcome::DeadlineMiss
            } else {
                Outcome::Success
            },
            spent: EffortBreakdown {
                e_sense: 0.5,
                ..Default::default()
            },
        }];
        let mut payments = BTreeMap::new();
        payments.insert(0, if completed.is_empty() { 0.0 } else { 2.0 });
        StepRecord {
            step,
            active_mus: vec![0, 1],
            tasks: vec![TaskSummary {
                index: 0,
                task_type: 3,
                difficulty: 1.2,
                budget: 12.0,
            }],
            proposals,
            decision: AssignmentDecision {
                accepted: vec![(0, 0)],
                rejected: vec![],
                collisions: BTreeMap::new(),
            },
            attempts,
            payments,
            energy: vec![EnergyLedger {
                mu: 0,
                battery_before: 8.0,
                spent: 0.5,
                harvested: 0.0,
                overflow: 0.0,
                battery_after: 7.5,
            }],
            completed,
        }
    }

    #[test]
    fn single_completion_report() {
        let m = realization_metrics(&[record(0, vec![0])], 10).unwrap();
        assert_eq!(m.weighted_completed, 1.2);
        assert_eq!(m.per_type, vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(m.collision_ratio, 0.0);
        assert_eq!(m.energy_per_completed, 0.5);
        assert_eq!(m.reward_series, vec![1.0]);
    }

    #[test]
    fn empty_records_error() {
        assert!(realization_metrics(&[], 10).is_err());
        assert!(summarize(&[], 10, 0).is_err());
    }

    #[test]
    fn constant_sample_ci_is_degenerate() {
        let e = estimate(&[2.0; 8], 200, 1);
        assert_eq!((e.mean, e.ci_low, e.ci_high, e.n), (2.0, 2.0, 2.0, 8));
        assert!(estimate(&[f64::NAN], 10, 1).mean.is_nan());
    }

    #[test]
    fn ci_brackets_mean() {
        let v: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
        let e = estimate(&v, 2000, 3);
        assert!(e.ci_low < e.mean && e.mean < e.ci_high);
        assert!(lower_confidence_bound(&v, 0.9, 2000, 3) < e.mean);
    }

    #[test]
    fn cv_of_uniform_is_zero() {
        assert_eq!(coefficient_of_variation(&[3.0, 3.0, 3.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }
}
