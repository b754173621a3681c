//! Reference policies (random and myopic participation), the minimum-energy
//! resource allocation, and the exhaustive offline optimum on tiny
//! instances together with a replay harness for causal policies.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{
    draw_gain, generate_tasks, harvest_energy, MuEntity, Process, RngStreams,
};
use crate::error::{ModelError, OtaError};
use crate::mcsp::{adjudicate, execute_attempt, select_mus, MuRealization, Outcome, Proposal};
use crate::model::{
    battery_update, is_eligible, payment_request, total_effort, Cell, MuProfile, MuState,
    ResourceChoice, ScenarioParams, SensingDraw, TaskSpec,
};

/// Uniform over the eligible tasks and abstaining; resources uniform in
/// `(0, f_max] × (0, p_max]`.
pub fn rtps_policy<R: Rng + ?Sized>(
    eligible: &[usize],
    profile: &MuProfile,
    rng: &mut R,
) -> Option<(usize, ResourceChoice)> {
    let pick = rng.random_range(0..=eligible.len());
    let task = *eligible.get(pick)?;
    let f = profile.max_compute_rate * (1.0 - rng.random::<f64>());
    let p = profile.max_transmit_power * (1.0 - rng.random::<f64>());
    Some((
        task,
        ResourceChoice {
            compute_rate: f,
            transmit_power: p,
        },
    ))
}

/// Smallest transmit power that moves `bits` within `time` seconds, if any.
fn power_for(bits: f64, time: f64, gain: f64, params: &ScenarioParams) -> f64 {
    if time <= 0.0 {
        return f64::INFINITY;
    }
    let snr = (bits / (params.bandwidth * time) * std::f64::consts::LN_2).exp_m1();
    snr * params.noise_power / gain
}

/// Compute plus upload energy when `split` seconds go to computing and the
/// rest of `budget` to uploading.
fn split_energy(
    task: &TaskSpec,
    profile: &MuProfile,
    gain: f64,
    budget: f64,
    split: f64,
    params: &ScenarioParams,
) -> f64 {
    let cycles = task.workload_cycles();
    let f = cycles / split;
    let p = power_for(task.result_size, budget - split, gain, params);
    cycles * profile.compute_energy_coeff * f * f + p * (budget - split)
}

/// Minimum compute-plus-upload energy plan finishing both phases within
/// `time_budget`, or `None` when even full resources are too slow.
pub fn min_energy_allocation(
    task: &TaskSpec,
    profile: &MuProfile,
    gain: f64,
    time_budget: f64,
    params: &ScenarioParams,
) -> Option<ResourceChoice> {
    if !(time_budget > 0.0) || !(gain > 0.0) {
        return None;
    }
    let cycles = task.workload_cycles();
    let lo = cycles / profile.max_compute_rate;
    let rate_max = params.bandwidth
        * (profile.max_transmit_power * gain / params.noise_power).ln_1p()
        / std::f64::consts::LN_2;
    let hi = time_budget - task.result_size / rate_max;
    if !(lo <= hi) {
        return None;
    }
    // E(split) is convex: a golden-section search over the split suffices.
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let energy = |s: f64| split_energy(task, profile, gain, time_budget, s, params);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (energy(c), energy(d));
    while b - a > 1e-6 * b.abs().max(1e-12) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = energy(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = energy(d);
        }
    }
    // Take the endpoint of the final bracket that keeps both box limits.
    let split = ((a + b) / 2.0).clamp(lo, hi);
    let f = (cycles / split).min(profile.max_compute_rate);
    let p = power_for(task.result_size, time_budget - split, gain, params)
        .clamp(0.0, profile.max_transmit_power);
    Some(ResourceChoice {
        compute_rate: f,
        transmit_power: p,
    })
}

/// Myopic income maximizer: for every eligible task, plan the cheapest
/// allocation that fits the deadline minus the expected sensing time under
/// the current channel, and propose to the affordable, within-budget task
/// with the highest requested payment.
pub fn motp_policy(
    eligible: &[&TaskSpec],
    profile: &MuProfile,
    gain: f64,
    battery: f64,
    params: &ScenarioParams,
) -> Option<(usize, ResourceChoice, f64)> {
    let expected = SensingDraw {
        time: profile.mean_sensing_time,
        power: profile.mean_sensing_power,
    };
    let mut best: Option<(usize, ResourceChoice, f64)> = None;
    for task in eligible {
        let Some(choice) =
            min_energy_allocation(task, profile, gain, task.deadline - expected.time, params)
        else {
            continue;
        };
        let Ok(effort) = total_effort(task, profile, &choice, gain, expected, params) else {
            continue;
        };
        let energy = effort.total_energy();
        let payment = payment_request(&effort, params.payment_coeff);
        if energy <= battery && payment <= task.budget && best.is_none_or(|b| payment > b.2) {
            best = Some((task.index, choice, payment));
        }
    }
    best
}

/// Largest instance the exhaustive optimum accepts.
pub const OTA_MAX_MUS: usize = 3;
pub const OTA_MAX_TASKS: usize = 3;
pub const OTA_MAX_STEPS: usize = 4;
pub const OTA_MAX_LEVELS: usize = 4;

/// A fully revealed tiny scenario. Channels are constant per MU and
/// sensing sits at its mean, so planned and realized effort coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtaInstance {
    pub params: ScenarioParams,
    pub profiles: Vec<MuProfile>,
    pub initial_battery: Vec<f64>,
    pub gains: Vec<f64>,
    pub sensing: Vec<SensingDraw>,
    /// `locations[t][k]`.
    pub locations: Vec<Vec<Cell>>,
    /// `harvest[t][k]`, credited at the end of step `t`.
    pub harvest: Vec<Vec<f64>>,
    /// `tasks[t]`.
    pub tasks: Vec<Vec<TaskSpec>>,
    /// Number of (compute, power) levels.
    pub levels: (usize, usize),
}

impl OtaInstance {
    pub fn num_mus(&self) -> usize {
        self.profiles.len()
    }

    pub fn horizon(&self) -> usize {
        self.tasks.len()
    }

    /// Random instance with `k` MUs, `n` tasks per step and `t` steps.
    /// Batteries start low so energy is usually the binding constraint.
    pub fn random(base: &ScenarioParams, k: usize, n: usize, t: usize, seed: u64) -> Self {
        let params = ScenarioParams {
            num_mus: k,
            tasks_per_step: n,
            horizon: t,
            ..base.clone()
        };
        let streams = RngStreams::new(seed);
        let mut task_rng = streams.stream(Process::Tasks, 0);
        let tasks = (0..t)
            .map(|s| generate_tasks(s, &params, &mut task_rng))
            .collect();
        let mut profiles = Vec::new();
        let mut initial_battery = Vec::new();
        let mut gains = Vec::new();
        let mut sensing = Vec::new();
        for id in 0..k {
            let mut r = streams.stream(Process::Profile, id as u64);
            let (f_lo, f_hi) = params.compute_rate_range;
            let profile = params.profile(id, f_lo + (f_hi - f_lo) * r.random::<f64>());
            let d = params.min_distance_m
                + (params.max_distance_m - params.min_distance_m) * r.random::<f64>();
            gains.push(draw_gain(d, &params, &mut r));
            initial_battery.push(profile.battery_capacity * (0.05 + 0.45 * r.random::<f64>()));
            sensing.push(SensingDraw {
                time: profile.mean_sensing_time,
                power: profile.mean_sensing_power,
            });
            profiles.push(profile);
        }
        let mut place = streams.stream(Process::Placement, 0);
        let side = params.grid_side;
        let locations = (0..t)
            .map(|_| {
                (0..k)
                    .map(|_| Cell::new(place.random_range(0..side), place.random_range(0..side)))
                    .collect()
            })
            .collect();
        let mut harvest_rng = streams.stream(Process::Harvest, 0);
        let harvest = (0..t)
            .map(|_| {
                (0..k)
                    .map(|_| harvest_energy(&params, &mut harvest_rng))
                    .collect()
            })
            .collect();
        Self {
            params,
            profiles,
            initial_battery,
            gains,
            sensing,
            locations,
            harvest,
            tasks,
            levels: (4, 4),
        }
    }

    pub fn validate(&self) -> Result<(), OtaError> {
        let (k, t) = (self.num_mus(), self.horizon());
        let n = self.tasks.iter().map(Vec::len).max().unwrap_or(0);
        if k > OTA_MAX_MUS || n > OTA_MAX_TASKS || t > OTA_MAX_STEPS {
            return Err(OtaError::TooLarge(format!(
                "K={k}, N={n}, T={t} (limits {OTA_MAX_MUS}, {OTA_MAX_TASKS}, {OTA_MAX_STEPS})"
            )));
        }
        let (gf, gp) = self.levels;
        if gf == 0 || gp == 0 || gf > OTA_MAX_LEVELS || gp > OTA_MAX_LEVELS {
            return Err(OtaError::TooLarge(format!(
                "{gf}x{gp} resource grid (limit {OTA_MAX_LEVELS} per axis)"
            )));
        }
        let consistent = self.initial_battery.len() == k
            && self.gains.len() == k
            && self.sensing.len() == k
            && self.locations.len() == t
            && self.harvest.len() == t
            && self.locations.iter().all(|l| l.len() == k)
            && self.harvest.iter().all(|h| h.len() == k);
        if !consistent {
            return Err(OtaError::Model(ModelError::Domain(
                "instance arrays disagree on K or T".into(),
            )));
        }
        Ok(())
    }

    /// Resource choice at grid levels `(lf, lp)`.
    pub fn level_choice(&self, mu: usize, lf: usize, lp: usize) -> ResourceChoice {
        let p = &self.profiles[mu];
        ResourceChoice {
            compute_rate: p.max_compute_rate * (lf + 1) as f64 / self.levels.0 as f64,
            transmit_power: p.max_transmit_power * (lp + 1) as f64 / self.levels.1 as f64,
        }
    }

    /// Smallest grid choice at or above `choice` in both coordinates.
    pub fn snap_up(&self, mu: usize, choice: &ResourceChoice) -> ResourceChoice {
        let p = &self.profiles[mu];
        let level = |x: f64, max: f64, count: usize| -> usize {
            (0..count)
                .find(|&l| max * (l + 1) as f64 / count as f64 >= x)
                .unwrap_or(count - 1)
        };
        let lf = level(choice.compute_rate, p.max_compute_rate, self.levels.0);
        let lp = level(choice.transmit_power, p.max_transmit_power, self.levels.1);
        self.level_choice(mu, lf, lp)
    }

    /// A detached MU carrying the state the MU would observe at step `t`.
    pub fn mu_view(&self, mu: usize, t: usize, battery: f64) -> MuEntity {
        let g = self.gains[mu];
        let window = self.params.channel_window;
        let state = MuState {
            battery,
            position: (0.0, 0.0),
            location: self.locations[t][mu],
            waypoint: (0.0, 0.0),
            channel_history: vec![g; window],
            avg_channel: g,
        };
        MuEntity::detached(mu, self.profiles[mu].clone(), state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtaAssignment {
    pub mu: usize,
    pub task: usize,
    pub compute_level: usize,
    pub power_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtaSolution {
    pub objective: f64,
    /// `plan[t]`: the assignments carried out at step `t`.
    pub plan: Vec<Vec<OtaAssignment>>,
}

/// Cheapest grid option for one (MU, task) pair.
#[derive(Debug, Clone, Copy)]
struct LevelOption {
    lf: usize,
    lp: usize,
    choice: ResourceChoice,
    energy: f64,
}

struct Solver<'a> {
    inst: &'a OtaInstance,
    /// `options[t][k][n]`.
    options: Vec<Vec<Vec<Option<LevelOption>>>>,
    /// Σ over steps ≥ t of the difficulty of tasks someone could do.
    suffix_bound: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(inst: &'a OtaInstance) -> Result<Self, OtaError> {
        let mut options = Vec::with_capacity(inst.horizon());
        for t in 0..inst.horizon() {
            let mut per_mu = Vec::with_capacity(inst.num_mus());
            for k in 0..inst.num_mus() {
                let mut per_task = Vec::with_capacity(inst.tasks[t].len());
                for task in &inst.tasks[t] {
                    per_task.push(cheapest_option(inst, t, k, task)?);
                }
                per_mu.push(per_task);
            }
            options.push(per_mu);
        }
        let mut suffix_bound = vec![0.0; inst.horizon() + 1];
        for t in (0..inst.horizon()).rev() {
            let doable: f64 = inst.tasks[t]
                .iter()
                .enumerate()
                .filter(|(n, _)| options[t].iter().any(|per_task| per_task[*n].is_some()))
                .map(|(_, task)| task.difficulty)
                .sum();
            suffix_bound[t] = suffix_bound[t + 1] + doable;
        }
        Ok(Self {
            inst,
            options,
            suffix_bound,
        })
    }

    /// All one-task-per-MU, one-MU-per-task assignments at step `t`.
    fn matchings(&self, t: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut used = vec![false; self.inst.tasks[t].len()];
        let mut current = Vec::new();
        self.matchings_rec(t, 0, &mut used, &mut current, &mut out);
        out
    }

    fn matchings_rec(
        &self,
        t: usize,
        k: usize,
        used: &mut [bool],
        current: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if k == self.inst.num_mus() {
            out.push(current.clone());
            return;
        }
        self.matchings_rec(t, k + 1, used, current, out);
        for n in 0..used.len() {
            if !used[n] && self.options[t][k][n].is_some() {
                used[n] = true;
                current.push((k, n));
                self.matchings_rec(t, k + 1, used, current, out);
                current.pop();
                used[n] = false;
            }
        }
    }

    /// Executes `matching` at step `t`. Returns the value gained and the
    /// batteries after harvest, or `None` if some attempt would fail.
    fn apply(
        &self,
        t: usize,
        matching: &[(usize, usize)],
        batteries: &[f64],
    ) -> Result<Option<(f64, Vec<f64>)>, OtaError> {
        let inst = self.inst;
        let mut spent = vec![0.0; inst.num_mus()];
        let mut value = 0.0;
        for &(k, n) in matching {
            let opt = self.options[t][k][n].expect("matchings only use feasible pairs");
            let task = &inst.tasks[t][n];
            let (outcome, effort) = execute_attempt(
                task,
                &inst.profiles[k],
                &opt.choice,
                inst.gains[k],
                inst.sensing[k],
                batteries[k],
                &inst.params,
            )?;
            if outcome != Outcome::Success {
                return Ok(None);
            }
            spent[k] = effort.total_energy();
            value += task.difficulty;
        }
        let mut next = Vec::with_capacity(batteries.len());
        for k in 0..inst.num_mus() {
            next.push(battery_update(
                batteries[k],
                spent[k],
                inst.harvest[t][k],
                inst.profiles[k].battery_capacity,
            )?);
        }
        Ok(Some((value, next)))
    }

    fn search(
        &self,
        t: usize,
        batteries: &[f64],
        value: f64,
        plan: &mut Vec<Vec<(usize, usize)>>,
        best: &mut (f64, Vec<Vec<(usize, usize)>>),
    ) -> Result<(), OtaError> {
        if t == self.inst.horizon() {
            if value > best.0 {
                *best = (value, plan.clone());
            }
            return Ok(());
        }
        if value + self.suffix_bound[t] <= best.0 {
            return Ok(());
        }
        for m in self.matchings(t) {
            if let Some((gain, next)) = self.apply(t, &m, batteries)? {
                plan.push(m);
                self.search(t + 1, &next, value + gain, plan, best)?;
                plan.pop();
            }
        }
        Ok(())
    }
}

fn cheapest_option(
    inst: &OtaInstance,
    t: usize,
    k: usize,
    task: &TaskSpec,
) -> Result<Option<LevelOption>, OtaError> {
    if !is_eligible(inst.locations[t][k], &task.roi) {
        return Ok(None);
    }
    let mut best: Option<LevelOption> = None;
    for lf in 0..inst.levels.0 {
        for lp in 0..inst.levels.1 {
            let choice = inst.level_choice(k, lf, lp);
            let effort = total_effort(
                task,
                &inst.profiles[k],
                &choice,
                inst.gains[k],
                inst.sensing[k],
                &inst.params,
            )?;
            let payment = payment_request(&effort, inst.params.payment_coeff);
            let energy = effort.total_energy();
            if effort.total_time() <= task.deadline
                && payment <= task.budget
                && best.is_none_or(|b| energy < b.energy)
            {
                best = Some(LevelOption {
                    lf,
                    lp,
                    choice,
                    energy,
                });
            }
        }
    }
    Ok(best)
}

/// Exhaustive optimum of the weighted completed-task sum over the grid of
/// resource levels, with one MU per task. Root branches run in parallel.
pub fn ota_solve(inst: &OtaInstance) -> Result<OtaSolution, OtaError> {
    inst.validate()?;
    let solver = Solver::new(inst)?;
    let empty = OtaSolution {
        objective: 0.0,
        plan: vec![Vec::new(); inst.horizon()],
    };
    if inst.horizon() == 0 {
        return Ok(empty);
    }
    let roots = solver.matchings(0);
    let results: Vec<Result<(f64, Vec<Vec<(usize, usize)>>), OtaError>> = roots
        .par_iter()
        .map(|m| {
            let mut best = (f64::NEG_INFINITY, Vec::new());
            if let Some((gain, next)) = solver.apply(0, m, &inst.initial_battery)? {
                let mut plan = vec![m.clone()];
                solver.search(1, &next, gain, &mut plan, &mut best)?;
            }
            Ok(best)
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for r in results {
        let r = r?;
        if r.0 > best.0 {
            best = r;
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Ok(empty);
    }
    let plan = best
        .1
        .iter()
        .enumerate()
        .map(|(t, m)| {
            m.iter()
                .map(|&(k, n)| {
                    let o = solver.options[t][k][n].expect("feasible");
                    OtaAssignment {
                        mu: k,
                        task: inst.tasks[t][n].index,
                        compute_level: o.lf,
                        power_level: o.lp,
                    }
                })
                .collect()
        })
        .collect();
    Ok(OtaSolution {
        objective: canonical_objective(inst, &best.1),
        plan,
    })
}

/// Σ V of the chosen tasks, summed in (step, task) order so equal plans
/// give bit-equal objectives regardless of search order.
fn canonical_objective(inst: &OtaInstance, plan: &[Vec<(usize, usize)>]) -> f64 {
    let mut total = 0.0;
    for (t, m) in plan.iter().enumerate() {
        let mut tasks: Vec<usize> = m.iter().map(|&(_, n)| n).collect();
        tasks.sort_unstable();
        for n in tasks {
            total += inst.tasks[t][n].difficulty;
        }
    }
    total
}

/// Runs a causal policy on the instance through the regular selection and
/// adjudication path. Requested resources are rounded up to the grid, so
/// any realized outcome is reachable by [`ota_solve`]. `policy` sees the
/// step, the MU's own view and the published tasks, and returns at most
/// one (task index, resources) proposal. Returns the weighted completed sum.
pub fn replay_policy<P>(inst: &OtaInstance, mut policy: P) -> Result<f64, OtaError>
where
    P: FnMut(usize, &MuEntity, &[TaskSpec]) -> Option<(usize, ResourceChoice)>,
{
    inst.validate()?;
    let params = &inst.params;
    let mut batteries = inst.initial_battery.clone();
    let mut total = 0.0;
    for t in 0..inst.horizon() {
        let tasks = &inst.tasks[t];
        let mut proposals = Vec::new();
        for k in 0..inst.num_mus() {
            let view = inst.mu_view(k, t, batteries[k]);
            let Some((n, choice)) = policy(t, &view, tasks) else {
                continue;
            };
            let Some(task) = tasks.iter().find(|task| task.index == n) else {
                continue;
            };
            if !is_eligible(inst.locations[t][k], &task.roi) {
                continue;
            }
            let choice = inst.snap_up(k, &choice);
            let effort = total_effort(
                task,
                &inst.profiles[k],
                &choice,
                inst.gains[k],
                inst.sensing[k],
                params,
            )?;
            proposals.push(Proposal {
                mu: k,
                task: n,
                payment: payment_request(&effort, params.payment_coeff),
                choice,
            });
        }
        let decision = select_mus(&proposals, tasks);
        let attempts = adjudicate(
            &proposals,
            &decision,
            tasks,
            |k| MuRealization {
                profile: &inst.profiles[k],
                gain: inst.gains[k],
                sensing: inst.sensing[k],
                battery: batteries[k],
            },
            params,
        )?;
        let mut spent = vec![0.0; inst.num_mus()];
        let mut done = vec![false; tasks.len()];
        for a in &attempts {
            spent[a.mu] += a.spent.total_energy();
            if a.outcome == Outcome::Success {
                if let Some(pos) = tasks.iter().position(|task| task.index == a.task) {
                    done[pos] = true;
                }
            }
        }
        for (task, d) in tasks.iter().zip(&done) {
            if *d {
                total += task.difficulty;
            }
        }
        for k in 0..inst.num_mus() {
            batteries[k] = battery_update(
                batteries[k],
                spent[k],
                inst.harvest[t][k],
                inst.profiles[k].battery_capacity,
            )?;
        }
    }
    Ok(total)
}
