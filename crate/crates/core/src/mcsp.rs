//! The crowdsensing platform: budgeted cheapest-first selection, execution
//! adjudication and settlement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::environment::EnergyLedger;
use crate::error::ModelError;
use crate::model::{
    phase_energy, total_effort, EffortBreakdown, MuProfile, ResourceChoice, ScenarioParams,
    SensingDraw, TaskSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub mu: usize,
    pub task: usize,
    pub payment: f64,
    pub choice: ResourceChoice,
}

/// What the platform tells a single MU. Nothing else leaks back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    NoProposal,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDecision {
    /// `(mu, task)` pairs with `x = 1`, ordered by task then by selection.
    pub accepted: Vec<(usize, usize)>,
    pub rejected: Vec<(usize, usize)>,
    pub collisions: BTreeMap<usize, usize>,
}

impl AssignmentDecision {
    pub fn verdict(&self, mu: usize) -> Verdict {
        if self.accepted.iter().any(|&(k, _)| k == mu) {
            Verdict::Accepted
        } else if self.rejected.iter().any(|&(k, _)| k == mu) {
            Verdict::Rejected
        } else {
            Verdict::NoProposal
        }
    }

    pub fn total_collisions(&self) -> usize {
        self.collisions.values().sum()
    }
}

/// Per task, accepts the cheapest proposals (ties by lower MU index) while
/// the running sum of requested payments stays within the budget.
pub fn select_mus(proposals: &[Proposal], tasks: &[TaskSpec]) -> AssignmentDecision {
    let mut by_task: BTreeMap<usize, Vec<&Proposal>> = BTreeMap::new();
    for p in proposals {
        by_task.entry(p.task).or_default().push(p);
    }
    let mut decision = AssignmentDecision::default();
    for (task, mut group) in by_task {
        group.sort_by(|a, b| a.payment.total_cmp(&b.payment).then(a.mu.cmp(&b.mu)));
        let budget = tasks
            .iter()
            .find(|t| t.index == task)
            .map_or(0.0, |t| t.budget);
        let mut spent = 0.0;
        let mut open = true;
        for p in &group {
            if open && spent + p.payment <= budget {
                spent += p.payment;
                decision.accepted.push((p.mu, task));
            } else {
                open = false;
                decision.rejected.push((p.mu, task));
            }
        }
        decision.collisions.insert(
            task,
            group.len() - decision.accepted.iter().filter(|a| a.1 == task).count(),
        );
    }
    decision
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    DeadlineMiss,
    EnergyShortfall,
    NotAssigned,
}

/// Runs one accepted assignment against the realized channel and sensing
/// draw. Phases (sense, compute, upload) run in order until the deadline
/// passes or the battery is empty; whatever ran is spent.
///
/// `battery` is the charge before the proposal was sent. The returned
/// breakdown holds the energy actually drawn and the time actually used.
pub fn execute_attempt(
    task: &TaskSpec,
    profile: &MuProfile,
    choice: &ResourceChoice,
    gain: f64,
    sensing: SensingDraw,
    battery: f64,
    params: &ScenarioParams,
) -> Result<(Outcome, EffortBreakdown), ModelError> {
    let full = total_effort(task, profile, choice, gain, sensing, params)?;
    if full.e_proposal > battery {
        return Ok((
            Outcome::EnergyShortfall,
            EffortBreakdown::proposal_only(battery),
        ));
    }
    let mut spent = EffortBreakdown::proposal_only(full.e_proposal);
    let mut energy_left = battery - full.e_proposal;
    let mut time_left = task.deadline;
    let phases = [
        (full.t_sense, full.e_sense),
        (full.t_compute, full.e_compute),
        (full.t_transmit, full.e_transmit),
    ];
    for (idx, (duration, energy)) in phases.into_iter().enumerate() {
        let power = if duration > 0.0 && duration.is_finite() {
            energy / duration
        } else {
            0.0
        };
        let power = if idx == 2 {
            choice.transmit_power
        } else {
            power
        };
        let (ran, used, outcome) = if duration <= time_left && energy <= energy_left {
            (duration, energy, None)
        } else {
            let t_empty = if power > 0.0 {
                energy_left / power
            } else {
                f64::INFINITY
            };
            if t_empty < time_left.min(duration) {
                (t_empty, energy_left, Some(Outcome::EnergyShortfall))
            } else {
                (
                    time_left,
                    phase_energy(power, time_left),
                    Some(Outcome::DeadlineMiss),
                )
            }
        };
        let used = used.min(energy_left);
        match idx {
            0 => {
                spent.t_sense = ran;
                spent.e_sense = used;
            }
            1 => {
                spent.t_compute = ran;
                spent.e_compute = used;
            }
            _ => {
                spent.t_transmit = ran;
                spent.e_transmit = used;
            }
        }
        energy_left = (energy_left - used).max(0.0);
        time_left -= ran;
        if let Some(outcome) = outcome {
            fit_to_battery(&mut spent, battery);
            return Ok((outcome, spent));
        }
    }
    fit_to_battery(&mut spent, battery);
    Ok((Outcome::Success, spent))
}

/// Trims round-off so the summed breakdown never exceeds the charge: the
/// last phase that drew energy absorbs the excess.
fn fit_to_battery(spent: &mut EffortBreakdown, battery: f64) {
    for _ in 0..16 {
        let excess = spent.total_energy() - battery;
        if excess <= 0.0 {
            return;
        }
        let last = [
            &mut spent.e_transmit,
            &mut spent.e_compute,
            &mut spent.e_sense,
            &mut spent.e_proposal,
        ]
        .into_iter()
        .find(|e| **e > 0.0);
        match last {
            Some(e) => {
                let trimmed = (*e - excess).max(0.0);
                *e = if trimmed < *e {
                    trimmed
                } else {
                    e.next_down().max(0.0)
                };
            }
            None => return,
        }
    }
}

/// Context the platform needs about one MU to adjudicate its attempt.
#[derive(Debug, Clone, Copy)]
pub struct MuRealization<'a> {
    pub profile: &'a MuProfile,
    pub gain: f64,
    pub sensing: SensingDraw,
    pub battery: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub mu: usize,
    pub task: usize,
    pub outcome: Outcome,
    pub spent: EffortBreakdown,
}

/// Outcomes for every proposal. Rejected proposers only pay for sending
/// their proposal.
pub fn adjudicate<'a>(
    proposals: &[Proposal],
    decision: &AssignmentDecision,
    tasks: &[TaskSpec],
    realization: impl Fn(usize) -> MuRealization<'a>,
    params: &ScenarioParams,
) -> Result<Vec<Attempt>, ModelError> {
    let mut attempts = Vec::with_capacity(proposals.len());
    for p in proposals {
        let r = realization(p.mu);
        let task = tasks
            .iter()
            .find(|t| t.index == p.task)
            .ok_or_else(|| ModelError::Domain(format!("proposal for unknown task {}", p.task)))?;
        if decision.accepted.contains(&(p.mu, p.task)) {
            let (outcome, spent) = execute_attempt(
                task, r.profile, &p.choice, r.gain, r.sensing, r.battery, params,
            )?;
            attempts.push(Attempt {
                mu: p.mu,
                task: p.task,
                outcome,
                spent,
            });
        } else {
            let full = total_effort(task, r.profile, &p.choice, r.gain, r.sensing, params)?;
            let spent = EffortBreakdown::proposal_only(full.e_proposal.min(r.battery));
            attempts.push(Attempt {
                mu: p.mu,
                task: p.task,
                outcome: Outcome::NotAssigned,
                spent,
            });
        }
    }
    Ok(attempts)
}

/// Pays the requested amount for every successful attempt.
pub fn settle(proposals: &[Proposal], attempts: &[Attempt]) -> BTreeMap<usize, f64> {
    let mut payments = BTreeMap::new();
    for a in attempts {
        let amount = if a.outcome == Outcome::Success {
            proposals
                .iter()
                .find(|p| p.mu == a.mu && p.task == a.task)
                .map_or(0.0, |p| p.payment)
        } else {
            0.0
        };
        *payments.entry(a.mu).or_insert(0.0) += amount;
    }
    payments
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub index: usize,
    pub task_type: usize,
    pub difficulty: f64,
    pub budget: f64,
}

/// Everything that happened in one step, serializable as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub active_mus: Vec<usize>,
    pub tasks: Vec<TaskSummary>,
    pub proposals: Vec<Proposal>,
    pub decision: AssignmentDecision,
    pub attempts: Vec<Attempt>,
    pub payments: BTreeMap<usize, f64>,
    pub energy: Vec<EnergyLedger>,
    pub completed: Vec<usize>,
}

impl StepRecord {
    pub fn weighted_completed(&self) -> f64 {
        self.completed
            .iter()
            .filter_map(|&n| self.tasks.iter().find(|t| t.index == n))
            .map(|t| t.difficulty)
            .sum()
    }

    /// Checks the one-task-per-MU, per-task budget, energy causality and
    /// battery cap constraints, and the collision bookkeeping.
    pub fn check_constraints(&self, capacity: f64) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.proposals {
            if !seen.insert(p.mu) {
                return Err(format!("MU {} proposed twice", p.mu));
            }
        }
        let mut accepted_mus = std::collections::BTreeSet::new();
        for &(k, _) in &self.decision.accepted {
            if !accepted_mus.insert(k) {
                return Err(format!("MU {k} accepted for two tasks"));
            }
        }
        for t in &self.tasks {
            let total: f64 = self
                .decision
                .accepted
                .iter()
                .filter(|a| a.1 == t.index)
                .filter_map(|&(k, n)| self.proposals.iter().find(|p| p.mu == k && p.task == n))
                .map(|p| p.payment)
                .sum();
            if total > t.budget {
                return Err(format!(
                    "task {} paid {total} over budget {}",
                    t.index, t.budget
                ));
            }
            let proposed = self.proposals.iter().filter(|p| p.task == t.index).count();
            let accepted = self
                .decision
                .accepted
                .iter()
                .filter(|a| a.1 == t.index)
                .count();
            let collisions = self.decision.collisions.get(&t.index).copied().unwrap_or(0);
            if collisions + accepted != proposed {
                return Err(format!(
                    "task {}: {collisions} collisions + {accepted} accepted != {proposed}",
                    t.index
                ));
            }
        }
        for a in &self.attempts {
            let paid = self.payments.get(&a.mu).copied().unwrap_or(0.0);
            if a.outcome != Outcome::Success && paid > 0.0 {
                return Err(format!("MU {} paid without success", a.mu));
            }
        }
        for l in &self.energy {
            if l.spent > l.battery_before {
                return Err(format!(
                    "MU {} spent {} with {} stored",
                    l.mu, l.spent, l.battery_before
                ));
            }
            if l.battery_after > capacity || l.battery_after < 0.0 {
                return Err(format!(
                    "MU {} battery {} outside [0, {capacity}]",
                    l.mu, l.battery_after
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Region;

    fn task(index: usize, budget: f64) -> TaskSpec {
        TaskSpec {
            index,
            step: 0,
            result_size: 2e6,
            raw_size: 2.6e6,
            deadline: 8.0,
            roi: Region::WholeArea,
            task_type: 1,
            complexity: 250.0,
            difficulty: budget / 10.0,
            budget,
        }
    }

    fn proposal(mu: usize, task: usize, payment: f64) -> Proposal {
        Proposal {
            mu,
            task,
            payment,
            choice: ResourceChoice {
                compute_rate: 2e8,
                transmit_power: 0.1,
            },
        }
    }

    #[test]
    fn cheapest_within_budget() {
        let tasks = [task(0, 10.0)];
        let d = select_mus(
            &[
                proposal(2, 0, 5.0),
                proposal(0, 0, 3.0),
                proposal(1, 0, 4.0),
            ],
            &tasks,
        );
        assert_eq!(d.accepted, vec![(0, 0), (1, 0)]);
        assert_eq!(d.rejected, vec![(2, 0)]);
        assert_eq!(d.collisions[&0], 1);
    }

    #[test]
    fn single_over_budget_is_collision() {
        let d = select_mus(&[proposal(0, 0, 11.0)], &[task(0, 10.0)]);
        assert!(d.accepted.is_empty());
        assert_eq!(d.collisions[&0], 1);
        assert_eq!(d.verdict(0), Verdict::Rejected);
        assert_eq!(d.verdict(1), Verdict::NoProposal);
    }

    #[test]
    fn no_proposals_no_decision() {
        let d = select_mus(&[], &[task(0, 10.0)]);
        assert!(d.accepted.is_empty() && d.rejected.is_empty() && d.collisions.is_empty());
    }

    #[test]
    fn ties_broken_by_mu_index() {
        let d = select_mus(
            &[
                proposal(3, 0, 4.0),
                proposal(1, 0, 4.0),
                proposal(2, 0, 4.0),
            ],
            &[task(0, 8.0)],
        );
        assert_eq!(d.accepted, vec![(1, 0), (2, 0)]);
        assert_eq!(d.rejected, vec![(3, 0)]);
    }

    fn realize(p: &ScenarioParams) -> (MuProfile, SensingDraw) {
        (
            p.profile(0, 3e8),
            SensingDraw {
                time: 0.5,
                power: 0.1,
            },
        )
    }

    #[test]
    fn planned_equals_realized_succeeds() {
        let p = ScenarioParams::default();
        let (profile, sensing) = realize(&p);
        let t = task(0, 10.0);
        let choice = ResourceChoice {
            compute_rate: 2e8,
            transmit_power: 0.1,
        };
        let plan = total_effort(&t, &profile, &choice, 1e-9, sensing, &p).unwrap();
        assert!(plan.total_time() <= t.deadline);
        let (o, spent) = execute_attempt(&t, &profile, &choice, 1e-9, sensing, 8.0, &p).unwrap();
        assert_eq!(o, Outcome::Success);
        assert!((spent.total_energy() - plan.total_energy()).abs() < 1e-15);
    }

    #[test]
    fn weak_channel_misses_deadline() {
        let p = ScenarioParams::default();
        let (profile, sensing) = realize(&p);
        let t = task(0, 10.0);
        let choice = ResourceChoice {
            compute_rate: 2e8,
            transmit_power: 0.1,
        };
        let (o, spent) = execute_attempt(&t, &profile, &choice, 1e-16, sensing, 8.0, &p).unwrap();
        assert_eq!(o, Outcome::DeadlineMiss);
        // Sensing and compute ran in full; the upload burned the rest of the
        // deadline.
        let full = total_effort(&t, &profile, &choice, 1e-16, sensing, &p).unwrap();
        assert_eq!(spent.e_compute, full.e_compute);
        let remaining = t.deadline - full.t_sense - full.t_compute;
        assert!((spent.e_transmit - 0.1 * remaining).abs() < 1e-12);
    }

    #[test]
    fn low_battery_is_shortfall() {
        let p = ScenarioParams::default();
        let (profile, sensing) = realize(&p);
        let t = task(0, 10.0);
        let choice = ResourceChoice {
            compute_rate: 2e8,
            transmit_power: 0.1,
        };
        let (o, spent) = execute_attempt(&t, &profile, &choice, 1e-9, sensing, 0.03, &p).unwrap();
        assert_eq!(o, Outcome::EnergyShortfall);
        assert!(spent.total_energy() <= 0.03 + 1e-15);
        assert_eq!(spent.e_compute, 0.0);
    }

    #[test]
    fn settlement_pays_only_success() {
        let props = [proposal(0, 0, 3.0), proposal(1, 0, 4.0)];
        let none = EffortBreakdown::default();
        let attempts = [
            Attempt {
                mu: 0,
                task: 0,
                outcome: Outcome::DeadlineMiss,
                spent: none,
            },
            Attempt {
                mu: 1,
                task: 0,
                outcome: Outcome::Success,
                spent: none,
            },
        ];
        let pay = settle(&props, &attempts);
        assert_eq!(pay[&0], 0.0);
        assert_eq!(pay[&1], 4.0);
        let failed = [
            Attempt {
                mu: 0,
                task: 0,
                outcome: Outcome::DeadlineMiss,
                spent: none,
            },
            Attempt {
                mu: 1,
                task: 0,
                outcome: Outcome::EnergyShortfall,
                spent: none,
            },
        ];
        assert!(settle(&props, &failed).values().all(|&v| v == 0.0));
    }

    #[test]
    fn rejected_pay_only_proposal() {
        let p = ScenarioParams::default();
        let (profile, sensing) = realize(&p);
        let tasks = [task(0, 5.0)];
        let props = [proposal(0, 0, 3.0), proposal(1, 0, 4.0)];
        let decision = select_mus(&props, &tasks);
        let attempts = adjudicate(
            &props,
            &decision,
            &tasks,
            |_| MuRealization {
                profile: &profile,
                gain: 1e-9,
                sensing,
                battery: 8.0,
            },
            &p,
        )
        .unwrap();
        assert_eq!(attempts[1].outcome, Outcome::NotAssigned);
        assert_eq!(attempts[1].spent.e_compute, 0.0);
        assert!(attempts[1].spent.e_proposal > 0.0);
        assert_eq!(attempts[0].outcome, Outcome::Success);
    }
}
