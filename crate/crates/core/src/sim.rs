//! The step loop: world, policies, platform and learning wired together.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;

use crate::agent::{
    encode_state, init_model, ActMode, ActionSample, Agent, AgentHyperparams, PpoDiagnostics,
};
use crate::baselines::{motp_policy, rtps_policy};
use crate::config::{ChurnAction, ChurnEvent, PolicyKind};
use crate::environment::{Process, RngStreams, StreamRng, World};
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig, InProcessAggregator, RoundLedger};
use crate::mcsp::{
    adjudicate, select_mus, settle, MuRealization, Outcome, Proposal, StepRecord, TaskSummary,
};
use crate::model::{is_eligible, payment_request, total_effort, ResourceChoice, SensingDraw};

/// Init-stream entity of the shared initial global model.
const GLOBAL_MODEL_ENTITY: u64 = 0xFFFF_FFFF;

/// Decision makers for every MU under one policy.
#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: PolicyKind,
    pub agents: BTreeMap<usize, Agent>,
    pub federation: Option<Federation<InProcessAggregator>>,
    hp: AgentHyperparams,
    tasks_per_step: usize,
    streams: RngStreams,
    policy_streams: RngStreams,
}

impl Controller {
    /// `streams` seeds model initialization and the agents' own sampling.
    pub fn new(
        kind: PolicyKind,
        hp: &AgentHyperparams,
        federation: &FederationConfig,
        tasks_per_step: usize,
        streams: RngStreams,
        initial_mus: usize,
    ) -> Self {
        let mut ctrl = Self {
            kind,
            agents: BTreeMap::new(),
            federation: None,
            hp: hp.clone(),
            tasks_per_step,
            streams,
            policy_streams: streams,
        };
        if kind == PolicyKind::FdrlPpo && federation.enabled {
            let global = init_model(
                tasks_per_step,
                hp,
                &mut streams.stream(Process::Init, GLOBAL_MODEL_ENTITY),
            );
            ctrl.federation = Some(Federation::new(
                federation.clone(),
                InProcessAggregator::new(global),
            ));
        }
        for id in 0..initial_mus {
            ctrl.on_join(id)
                .expect("fresh global model matches every agent");
        }
        ctrl
    }

    pub fn learns(&self) -> bool {
        self.kind.learns()
    }

    /// Gives a new MU its agent: the current global model when federated,
    /// a fresh independent initialization otherwise.
    pub fn on_join(&mut self, id: usize) -> Result<()> {
        if !self.learns() || self.agents.contains_key(&id) {
            return Ok(());
        }
        let model = match &self.federation {
            Some(f) => f.global_model()?,
            None => init_model(
                self.tasks_per_step,
                &self.hp,
                &mut self.streams.stream(Process::Init, id as u64),
            ),
        };
        let agent = Agent::new(
            id,
            model,
            self.hp.clone(),
            self.policy_streams.stream(Process::Policy, id as u64),
        );
        self.agents.insert(id, agent);
        Ok(())
    }

    /// Points every agent's action sampling, present and future, at
    /// `streams`. Model initialization keeps its original streams.
    pub fn reseed_policies(&mut self, streams: RngStreams) {
        self.policy_streams = streams;
        for (&id, a) in self.agents.iter_mut() {
            a.reseed(streams.stream(Process::Policy, id as u64));
        }
    }

    pub fn start_episode(&mut self, episode: usize) {
        for a in self.agents.values_mut() {
            a.start_episode(episode);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub horizon: usize,
    pub mode: ActMode,
    pub learn: bool,
    pub churn: Vec<ChurnEvent>,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeOutput {
    pub records: Vec<StepRecord>,
    pub rounds: Vec<RoundLedger>,
    pub updates: Vec<(usize, PpoDiagnostics)>,
}

impl EpisodeOutput {
    pub fn weighted_completed(&self) -> f64 {
        self.records
            .iter()
            .map(StepRecord::weighted_completed)
            .sum()
    }

    pub fn total_payments(&self) -> f64 {
        self.records.iter().flat_map(|r| r.payments.values()).sum()
    }
}

struct Pending {
    obs: Vec<f64>,
    action: ActionSample,
    value: f64,
}

fn apply_churn(
    world: &mut World,
    ctrl: &mut Controller,
    churn: &[ChurnEvent],
    step: usize,
) -> Result<()> {
    for event in churn.iter().filter(|e| e.step == step) {
        match &event.action {
            ChurnAction::Join { ids } => {
                for &id in ids {
                    let got = world.add_mu();
                    if got != id {
                        return Err(Error::Other(format!(
                            "churn at step {step}: joining MU would get id {got}, not {id}"
                        )));
                    }
                    ctrl.on_join(id)?;
                }
            }
            ChurnAction::Drop { ids } => {
                for &id in ids {
                    world.drop_mu(id);
                }
            }
            ChurnAction::DropRandom { count } => {
                let active = world.active_ids();
                let mut rng = world.streams().stream(Process::Churn, step as u64);
                let chosen: Vec<usize> =
                    active.choose_multiple(&mut rng, *count).copied().collect();
                for id in chosen {
                    world.drop_mu(id);
                }
            }
        }
    }
    Ok(())
}

fn observations(world: &World) -> BTreeMap<usize, Vec<f64>> {
    world
        .mus
        .iter()
        .filter(|m| m.active)
        .map(|m| (m.id, encode_state(m, &world.tasks, &world.params)))
        .collect()
}

/// Runs one episode. Training (`opts.learn`) stores transitions, updates
/// each agent whenever its buffer fills and closes federation rounds.
/// Every step is checked against the model constraints, and every MU's
/// energy ledger must close at the end.
pub fn run_episode(
    world: &mut World,
    ctrl: &mut Controller,
    opts: &EpisodeOptions,
) -> Result<EpisodeOutput> {
    let mut out = EpisodeOutput::default();
    let mut policy_rngs: BTreeMap<usize, StreamRng> = BTreeMap::new();
    let mut energy: BTreeMap<usize, (f64, f64, f64, f64)> = BTreeMap::new();
    let n = world.params.tasks_per_step;

    apply_churn(world, ctrl, &opts.churn, 0)?;
    world.begin_step();
    let mut obs = if ctrl.learns() {
        observations(world)
    } else {
        BTreeMap::new()
    };

    for t in 0..opts.horizon {
        let params = world.params.clone();
        let mut proposals = Vec::new();
        let mut pending: BTreeMap<usize, Pending> = BTreeMap::new();
        let active = world.active_ids();
        for &id in &active {
            let mu = &world.mus[id];
            energy
                .entry(id)
                .or_insert((mu.state.battery, 0.0, 0.0, 0.0));
            let eligible: Vec<usize> = world
                .tasks
                .iter()
                .filter(|task| is_eligible(mu.state.location, &task.roi))
                .map(|task| task.index)
                .collect();
            let expected = SensingDraw {
                time: mu.profile.mean_sensing_time,
                power: mu.profile.mean_sensing_power,
            };
            let planned = |task_index: usize, choice: ResourceChoice| -> Result<Proposal> {
                let task = &world.tasks[task_index];
                let effort = total_effort(
                    task,
                    &mu.profile,
                    &choice,
                    mu.planning_gain(&params),
                    expected,
                    &params,
                )?;
                Ok(Proposal {
                    mu: id,
                    task: task_index,
                    payment: payment_request(&effort, params.payment_coeff),
                    choice,
                })
            };
            match ctrl.kind {
                PolicyKind::FdrlPpo | PolicyKind::Ippo => {
                    let agent = ctrl
                        .agents
                        .get_mut(&id)
                        .expect("every active MU has an agent");
                    let o = obs.remove(&id).expect("observation for every active MU");
                    let action = agent.act(&o, opts.mode)?;
                    if let Some(task) = action.task(n) {
                        let choice = ResourceChoice::new(
                            action.compute_fraction * mu.profile.max_compute_rate,
                            action.power_fraction * mu.profile.max_transmit_power,
                            &mu.profile,
                        )?;
                        proposals.push(planned(task, choice)?);
                    }
                    if opts.learn {
                        let value = agent.value(&o)?;
                        pending.insert(
                            id,
                            Pending {
                                obs: o,
                                action,
                                value,
                            },
                        );
                    }
                }
                PolicyKind::Rtps => {
                    let rng = policy_rngs
                        .entry(id)
                        .or_insert_with(|| world.streams().stream(Process::Policy, id as u64));
                    if let Some((task, choice)) = rtps_policy(&eligible, &mu.profile, rng) {
                        proposals.push(planned(task, choice)?);
                    }
                }
                PolicyKind::Motp => {
                    let tasks: Vec<_> = eligible.iter().map(|&i| &world.tasks[i]).collect();
                    if let Some((task, choice, payment)) =
                        motp_policy(&tasks, &mu.profile, mu.step_gain, mu.state.battery, &params)
                    {
                        proposals.push(Proposal {
                            mu: id,
                            task,
                            payment,
                            choice,
                        });
                    }
                }
                PolicyKind::Ota => {
                    return Err(Error::Other(
                        "the offline optimum runs on fixed instances, not in the step loop".into(),
                    ))
                }
            }
        }

        let decision = select_mus(&proposals, &world.tasks);
        let attempts = adjudicate(
            &proposals,
            &decision,
            &world.tasks,
            |k| {
                let mu = &world.mus[k];
                MuRealization {
                    profile: &mu.profile,
                    gain: mu.step_gain,
                    sensing: mu.step_sensing,
                    battery: mu.state.battery,
                }
            },
            &params,
        )?;
        let payments = settle(&proposals, &attempts);
        let mut spent = vec![0.0; world.mus.len()];
        for a in &attempts {
            spent[a.mu] += a.spent.total_energy();
        }
        let mut completed: Vec<usize> = attempts
            .iter()
            .filter(|a| a.outcome == Outcome::Success)
            .map(|a| a.task)
            .collect();
        completed.sort_unstable();
        completed.dedup();
        let tasks = world
            .tasks
            .iter()
            .map(|task| TaskSummary {
                index: task.index,
                task_type: task.task_type,
                difficulty: task.difficulty,
                budget: task.budget,
            })
            .collect();
        let ledgers = world.end_step(&spent)?;
        for l in &ledgers {
            let e = energy.get_mut(&l.mu).expect("ledger for a tracked MU");
            e.1 += l.harvested;
            e.2 += l.spent;
            e.3 += l.overflow;
        }
        let record = StepRecord {
            step: t,
            active_mus: active.clone(),
            tasks,
            proposals,
            decision,
            attempts,
            payments,
            energy: ledgers,
            completed,
        };
        record
            .check_constraints(params.battery_capacity)
            .map_err(|message| Error::Constraint { step: t, message })?;

        let last = t + 1 == opts.horizon;
        if !last {
            apply_churn(world, ctrl, &opts.churn, t + 1)?;
            world.begin_step();
            if ctrl.learns() {
                obs = observations(world);
            }
        }

        if opts.learn {
            for (id, p) in pending {
                let reward = record.payments.get(&id).copied().unwrap_or(0.0);
                // The horizon truncates rather than terminates: the state
                // value of the final observation stands in for the unseen
                // next state. A dropped MU's trajectory does terminate.
                let next = if last { None } else { obs.get(&id) };
                let dropped = !last && next.is_none();
                let agent = ctrl.agents.get_mut(&id).expect("agent acted");
                let value = p.value;
                agent.record(p.obs, p.action, reward, value, dropped);
                if let Some(f) = ctrl.federation.as_mut() {
                    f.credit(id, reward);
                }
                if agent.buffer_full() {
                    let bootstrap = match next {
                        Some(o) => agent.value(o)?,
                        None if last => value,
                        None => 0.0,
                    };
                    out.updates.push((id, agent.update(bootstrap)?));
                }
            }
            if let Some(f) = ctrl.federation.as_mut() {
                if f.config.round_ends_after(t) {
                    let ids = world.active_ids();
                    let mut present: Vec<&mut Agent> = ctrl
                        .agents
                        .iter_mut()
                        .filter(|(id, _)| ids.contains(id))
                        .map(|(_, a)| a)
                        .collect();
                    out.rounds.push(f.finish_round(&mut present)?);
                }
            }
        }
        out.records.push(record);
    }

    if opts.learn {
        // Whatever is left over still trains, truncated at the horizon.
        for agent in ctrl.agents.values_mut() {
            if let Some(tail) = agent.buffer.last() {
                let bootstrap = if tail.done { 0.0 } else { tail.value };
                let id = agent.id;
                out.updates.push((id, agent.update(bootstrap)?));
            }
        }
    }

    for (id, (start, harvested, spent, overflow)) in energy {
        let end = world.mus[id].state.battery;
        let residual = harvested - spent - (end - start + overflow);
        if residual.abs() > 1e-9 {
            return Err(Error::Constraint {
                step: opts.horizon,
                message: format!(
                    "energy ledger of MU {id} does not close (residual {residual:e} J)"
                ),
            });
        }
    }
    Ok(out)
}
