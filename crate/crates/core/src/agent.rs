//! Per-MU PPO-clip agent: observation encoding, the hybrid
//! categorical/squashed-Gaussian action head, GAE and the clipped update.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environment::{mean_gain, MuEntity, StreamRng};
use crate::error::{Error, NnError};
use crate::model::{is_eligible, ScenarioParams, TaskSpec};
use crate::nn::{adam_step, clip_grad_norm, scheduled_lr, AdamState, Mlp, ModelParams};

/// Global features ahead of the task slots: battery, channel, cell (i, j).
pub const GLOBAL_FEATURES: usize = 4;
pub const SLOT_FEATURES: usize = 5;
/// Continuous heads: compute fraction and transmit-power fraction.
const CONT_HEADS: usize = 2;
const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 1.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn observation_len(tasks_per_step: usize) -> usize {
    GLOBAL_FEATURES + SLOT_FEATURES * tasks_per_step
}

/// Actor output width: N task logits, one abstain logit, then
/// (mean, log-std) for each continuous head.
pub fn actor_output_len(tasks_per_step: usize) -> usize {
    tasks_per_step + 1 + 2 * CONT_HEADS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentHyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Multiplicative learning-rate decay per training episode.
    pub lr_decay: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    /// Offset added to the raw log-std outputs so a fresh policy explores.
    pub init_log_std: f64,
    /// Rewards are multiplied by this before they enter the buffer.
    pub reward_scale: f64,
}

impl Default for AgentHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            batch_size: 100,
            minibatch_size: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 5e-5,
            lr_decay: 0.995,
            max_grad_norm: 0.5,
            hidden: vec![256, 256],
            init_log_std: -0.5,
            reward_scale: 1.0,
        }
    }
}

impl AgentHyperparams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err("clip_eps must lie in (0, 1)".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.minibatch_size == 0 {
            return Err("epochs, batch_size and minibatch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err("lr must be positive and lr_decay in (0, 1]".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err("hidden layer sizes must be positive".into());
        }
        if !(self.max_grad_norm > 0.0)
            || !(self.reward_scale > 0.0)
            || self.entropy_coef < 0.0
            || self.value_coef < 0.0
        {
            return Err(
                "max_grad_norm and reward_scale must be positive, coefficients nonnegative".into(),
            );
        }
        Ok(())
    }
}

fn unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// The MU's own view of the step. Every entry lies in [0, 1]; absent task
/// slots are all zeros.
pub fn encode_state(mu: &MuEntity, tasks: &[TaskSpec], params: &ScenarioParams) -> Vec<f64> {
    let n = params.tasks_per_step;
    let mut obs = vec![0.0; observation_len(n)];
    obs[0] = unit(mu.state.battery / mu.profile.battery_capacity);
    let g_hi = mean_gain(params.min_distance_m, params).ln();
    let g_lo = mean_gain(params.max_distance_m, params).ln();
    obs[1] = unit((mu.planning_gain(params).ln() - g_lo) / (g_hi - g_lo));
    let side = f64::from(params.grid_side.saturating_sub(1).max(1));
    obs[2] = unit(f64::from(mu.state.location.i) / side);
    obs[3] = unit(f64::from(mu.state.location.j) / side);
    let v_max = params.size_weight + params.deadline_weight;
    for (slot, task) in tasks.iter().take(n).enumerate() {
        let o = GLOBAL_FEATURES + SLOT_FEATURES * slot;
        obs[o] = unit(task.result_size / params.max_result_size());
        obs[o + 1] = unit(task.deadline / params.step_duration);
        obs[o + 2] = if is_eligible(mu.state.location, &task.roi) {
            1.0
        } else {
            0.0
        };
        obs[o + 3] = unit(task.difficulty / v_max);
        obs[o + 4] = unit(task.task_type as f64 / params.num_types as f64);
    }
    obs
}

/// Slot `n` is selectable iff its eligibility flag is set. Abstain always is.
pub fn action_mask(obs: &[f64], tasks_per_step: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..tasks_per_step)
        .map(|n| obs[GLOBAL_FEATURES + SLOT_FEATURES * n + 2] > 0.5)
        .collect();
    mask.push(true);
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Greedy,
}

impl ActMode {
    pub fn name(self) -> &'static str {
        match self {
            ActMode::Sample => "sample",
            ActMode::Greedy => "greedy",
        }
    }
}

impl std::str::FromStr for ActMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sample" => Ok(ActMode::Sample),
            "greedy" => Ok(ActMode::Greedy),
            other => Err(format!("unknown action mode `{other}` (sample, greedy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    /// Categorical index; `tasks_per_step` means abstain.
    pub slot: usize,
    /// Pre-squash Gaussian draws for (compute, power).
    pub raw: [f64; 2],
    pub compute_fraction: f64,
    pub power_fraction: f64,
    pub log_prob: f64,
}

impl ActionSample {
    pub fn task(&self, tasks_per_step: usize) -> Option<usize> {
        (self.slot < tasks_per_step).then_some(self.slot)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Decoded actor output for one observation.
#[derive(Debug, Clone)]
struct Head {
    /// Log-probabilities of the masked categorical (−∞ where masked).
    log_pi: Vec<f64>,
    mean: [f64; 2],
    log_std: [f64; 2],
    /// Whether the raw log-std output was inside the clamp range.
    log_std_free: [bool; 2],
}

fn decode(out: &[f64], mask: &[bool], init_log_std: f64) -> Head {
    let k = mask.len();
    let max = out[..k]
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + out[..k]
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(z, _)| (z - max).exp())
            .sum::<f64>()
            .ln();
    let log_pi = out[..k]
        .iter()
        .zip(mask)
        .map(|(z, &m)| if m { z - lse } else { f64::NEG_INFINITY })
        .collect();
    let mut mean = [0.0; 2];
    let mut log_std = [0.0; 2];
    let mut log_std_free = [true; 2];
    for h in 0..CONT_HEADS {
        mean[h] = out[k + 2 * h];
        let ls = out[k + 2 * h + 1] + init_log_std;
        log_std_free[h] = (LOG_STD_MIN..=LOG_STD_MAX).contains(&ls);
        log_std[h] = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
    }
    Head {
        log_pi,
        mean,
        log_std,
        log_std_free,
    }
}

/// `log N(u; μ, σ) − log σ'(u)`: density of the squashed fraction.
fn squashed_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    let log_jac = -softplus(-u) - softplus(u);
    -0.5 * z * z - log_std - HALF_LN_2PI - log_jac
}

fn joint_log_prob(head: &Head, slot: usize, raw: [f64; 2], abstain: usize) -> f64 {
    let mut lp = head.log_pi[slot];
    if slot != abstain {
        for h in 0..CONT_HEADS {
            lp += squashed_log_density(raw[h], head.mean[h], head.log_std[h]);
        }
    }
    lp
}

fn entropy(head: &Head) -> f64 {
    let cat: f64 = head
        .log_pi
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| -l.exp() * l)
        .sum();
    cat + head
        .log_std
        .iter()
        .map(|ls| 0.5 + HALF_LN_2PI + ls)
        .sum::<f64>()
}

fn fraction(u: f64) -> f64 {
    sigmoid(u).max(1e-12)
}

/// Draws (or, greedily, picks) an action from the actor's output.
pub fn act<R: Rng + ?Sized>(
    obs: &[f64],
    actor: &Mlp,
    hp: &AgentHyperparams,
    rng: &mut R,
    mode: ActMode,
) -> Result<ActionSample, NnError> {
    let out = actor.predict(obs)?;
    let n = out.len() - 1 - 2 * CONT_HEADS;
    let mask = action_mask(obs, n);
    let head = decode(&out, &mask, hp.init_log_std);
    let (slot, raw) = match mode {
        ActMode::Greedy => {
            let mut best = n;
            for s in 0..=n {
                if head.log_pi[s] > head.log_pi[best] {
                    best = s;
                }
            }
            (best, head.mean)
        }
        ActMode::Sample => {
            let x: f64 = rng.random();
            let mut acc = 0.0;
            let mut slot = n;
            for (s, lp) in head.log_pi.iter().enumerate() {
                if lp.is_finite() {
                    acc += lp.exp();
                    if x < acc {
                        slot = s;
                        break;
                    }
                }
            }
            let mut raw = [0.0; 2];
            for h in 0..CONT_HEADS {
                let e: f64 = StandardNormal.sample(rng);
                raw[h] = head.mean[h] + head.log_std[h].exp() * e;
            }
            (slot, raw)
        }
    };
    Ok(ActionSample {
        slot,
        raw,
        compute_fraction: fraction(raw[0]),
        power_fraction: fraction(raw[1]),
        log_prob: joint_log_prob(&head, slot, raw, n),
    })
}

/// Joint log-probability of `action` under `actor` and its gradient with
/// respect to every actor parameter.
pub fn log_prob_and_grad(
    obs: &[f64],
    actor: &Mlp,
    hp: &AgentHyperparams,
    action: &ActionSample,
) -> Result<(f64, Vec<f64>), NnError> {
    let (out, cache) = actor.forward(obs)?;
    let n = out.len() - 1 - 2 * CONT_HEADS;
    let mask = action_mask(obs, n);
    let head = decode(&out, &mask, hp.init_log_std);
    let lp = joint_log_prob(&head, action.slot, action.raw, n);
    let mut g = Array2::zeros((1, out.len()));
    log_prob_output_grad(&head, action, n, &mut g.row_mut(0));
    Ok((lp, actor.backward(&cache, g.view())?))
}

/// d log π / d output, written into `g` (which must be zeroed).
fn log_prob_output_grad(
    head: &Head,
    action: &ActionSample,
    n: usize,
    g: &mut ndarray::ArrayViewMut1<'_, f64>,
) {
    for (j, lp) in head.log_pi.iter().enumerate() {
        if lp.is_finite() {
            g[j] = if j == action.slot { 1.0 } else { 0.0 } - lp.exp();
        }
    }
    if action.slot != n {
        for h in 0..CONT_HEADS {
            let var = (2.0 * head.log_std[h]).exp();
            let d = action.raw[h] - head.mean[h];
            g[n + 1 + 2 * h] = d / var;
            if head.log_std_free[h] {
                g[n + 2 + 2 * h] = d * d / var - 1.0;
            }
        }
    }
}

/// d entropy / d output, accumulated into `g` with factor `scale`.
fn entropy_output_grad(head: &Head, n: usize, scale: f64, g: &mut ndarray::ArrayViewMut1<'_, f64>) {
    let h_cat: f64 = head
        .log_pi
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| -l.exp() * l)
        .sum();
    for (j, lp) in head.log_pi.iter().enumerate() {
        if lp.is_finite() {
            g[j] += scale * (-lp.exp() * (lp + h_cat));
        }
    }
    for h in 0..CONT_HEADS {
        if head.log_std_free[h] {
            g[n + 2 + 2 * h] += scale;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: ActionSample,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
}

/// GAE(γ, λ) over a trajectory. `dones[t]` marks that no state follows step
/// `t`; `bootstrap` is the critic's value of the state after the last step.
/// Returns (advantages, returns) with returns = advantages + values.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let len = rewards.len();
    let mut adv = vec![0.0; len];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..len).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0, std 1; a constant batch is only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Clipped surrogate `min(ρA, clip(ρ, 1±ε)A)` and its derivative with
/// respect to the new log-probability.
pub fn clipped_surrogate(
    log_prob: f64,
    old_log_prob: f64,
    advantage: f64,
    clip_eps: f64,
) -> (f64, f64) {
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// One PPO-clip update over `batch`. `bootstrap` is the critic value of the
/// state following the last transition (ignored when it is terminal).
pub fn ppo_update(
    batch: &[Transition],
    bootstrap: f64,
    model: &mut ModelParams,
    actor_opt: &mut AdamState,
    critic_opt: &mut AdamState,
    hp: &AgentHyperparams,
    rng: &mut StreamRng,
) -> Result<PpoDiagnostics, NnError> {
    if batch.is_empty() {
        return Ok(PpoDiagnostics::default());
    }
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = batch.iter().map(|t| t.value).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    let (mut adv, returns) = compute_gae(
        &rewards,
        &values,
        &dones,
        bootstrap,
        hp.gamma,
        hp.gae_lambda,
    );
    normalize_advantages(&mut adv);

    let obs_len = model.actor.input_size();
    let n = model.actor.output_size() - 1 - 2 * CONT_HEADS;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut diag = PpoDiagnostics::default();
    let mut samples = 0.0;
    for _ in 0..hp.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hp.minibatch_size) {
            let b = chunk.len();
            let mut x = Array2::zeros((b, obs_len));
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r)
                    .assign(&ndarray::ArrayView1::from(&batch[i].obs));
            }
            let (out, cache) = model.actor.forward_batch(x.view())?;
            let mut g_out = Array2::zeros(out.dim());
            for (r, &i) in chunk.iter().enumerate() {
                let tr = &batch[i];
                let mask = action_mask(&tr.obs, n);
                let head = decode(
                    out.row(r).as_slice().expect("contiguous row"),
                    &mask,
                    hp.init_log_std,
                );
                let lp = joint_log_prob(&head, tr.action.slot, tr.action.raw, n);
                let (surr, d_surr) = clipped_surrogate(lp, tr.log_prob, adv[i], hp.clip_eps);
                let ent = entropy(&head);
                let mut row = g_out.row_mut(r);
                // Minimize −surrogate − c·entropy, averaged over the minibatch.
                log_prob_output_grad(&head, &tr.action, n, &mut row);
                row.mapv_inplace(|v| -d_surr * v / b as f64);
                entropy_output_grad(&head, n, -hp.entropy_coef / b as f64, &mut row);
                let log_ratio = lp - tr.log_prob;
                diag.policy_loss -= surr;
                diag.entropy += ent;
                diag.approx_kl += log_ratio.exp() - 1.0 - log_ratio;
                if (log_ratio.exp() - 1.0).abs() > hp.clip_eps {
                    diag.clip_fraction += 1.0;
                }
            }
            let mut g_actor = model.actor.backward(&cache, g_out.view())?;
            diag.actor_grad_norm += clip_grad_norm(&mut g_actor, hp.max_grad_norm) * b as f64;
            adam_step(model.actor.params_mut(), &g_actor, actor_opt)?;

            let (v_out, v_cache) = model.critic.forward_batch(x.view())?;
            let mut g_v = Array2::zeros(v_out.dim());
            for (r, &i) in chunk.iter().enumerate() {
                let err = v_out[[r, 0]] - returns[i];
                diag.value_loss += err * err;
                g_v[[r, 0]] = 2.0 * hp.value_coef * err / b as f64;
            }
            let mut g_critic = model.critic.backward(&v_cache, g_v.view())?;
            diag.critic_grad_norm += clip_grad_norm(&mut g_critic, hp.max_grad_norm) * b as f64;
            adam_step(model.critic.params_mut(), &g_critic, critic_opt)?;
            samples += b as f64;
        }
    }
    diag.policy_loss /= samples;
    diag.value_loss /= samples;
    diag.entropy /= samples;
    diag.approx_kl /= samples;
    diag.clip_fraction /= samples;
    diag.actor_grad_norm /= samples;
    diag.critic_grad_norm /= samples;
    Ok(diag)
}

/// Fresh actor and critic for an observation of `tasks_per_step` slots.
pub fn init_model(
    tasks_per_step: usize,
    hp: &AgentHyperparams,
    rng: &mut StreamRng,
) -> ModelParams {
    let obs = observation_len(tasks_per_step);
    let mut actor_sizes = vec![obs];
    actor_sizes.extend(&hp.hidden);
    let mut critic_sizes = actor_sizes.clone();
    actor_sizes.push(actor_output_len(tasks_per_step));
    critic_sizes.push(1);
    ModelParams {
        actor: Mlp::new_seeded(&actor_sizes, 0.01, rng),
        critic: Mlp::new_seeded(&critic_sizes, 1.0, rng),
        version: 0,
    }
}

/// One MU's learner: its networks, optimizers, rollout buffer and stream.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub model: ModelParams,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub hp: AgentHyperparams,
    pub buffer: Vec<Transition>,
    rng: StreamRng,
    pub last_diagnostics: Option<PpoDiagnostics>,
}

impl Agent {
    /// Replaces the action-sampling stream.
    pub fn reseed(&mut self, rng: StreamRng) {
        self.rng = rng;
    }

    pub fn new(id: usize, model: ModelParams, hp: AgentHyperparams, rng: StreamRng) -> Self {
        let actor_opt = AdamState::new(model.actor.params().len(), hp.lr);
        let critic_opt = AdamState::new(model.critic.params().len(), hp.lr);
        Self {
            id,
            model,
            actor_opt,
            critic_opt,
            hp,
            buffer: Vec::new(),
            rng,
            last_diagnostics: None,
        }
    }

    pub fn tasks_per_step(&self) -> usize {
        self.model.actor.output_size() - 1 - 2 * CONT_HEADS
    }

    /// Applies the per-episode learning-rate schedule to both optimizers.
    pub fn start_episode(&mut self, episode: usize) {
        let lr = scheduled_lr(self.hp.lr, self.hp.lr_decay, episode);
        self.actor_opt.lr = lr;
        self.critic_opt.lr = lr;
    }

    pub fn act(&mut self, obs: &[f64], mode: ActMode) -> Result<ActionSample, NnError> {
        act(obs, &self.model.actor, &self.hp, &mut self.rng, mode)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(self.model.critic.predict(obs)?[0])
    }

    pub fn record(
        &mut self,
        obs: Vec<f64>,
        action: ActionSample,
        reward: f64,
        value: f64,
        done: bool,
    ) {
        let log_prob = action.log_prob;
        self.buffer.push(Transition {
            obs,
            action,
            reward: reward * self.hp.reward_scale,
            value,
            log_prob,
            done,
        });
    }

    pub fn buffer_full(&self) -> bool {
        self.buffer.len() >= self.hp.batch_size
    }

    /// Runs PPO on the buffer and clears it.
    pub fn update(&mut self, bootstrap: f64) -> Result<PpoDiagnostics, NnError> {
        let batch = std::mem::take(&mut self.buffer);
        let diag = ppo_update(
            &batch,
            bootstrap,
            &mut self.model,
            &mut self.actor_opt,
            &mut self.critic_opt,
            &self.hp,
            &mut self.rng,
        )?;
        self.last_diagnostics = Some(diag);
        Ok(diag)
    }

    /// Writes `<stem>.model` (binary parameters) and `<stem>.json`
    /// (optimizer state and hyperparameters).
    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.model")), self.model.to_bytes())?;
        let meta = CheckpointMeta {
            id: self.id,
            hp: self.hp.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opt: self.critic_opt.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_vec_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path, stem: &str, rng: StreamRng) -> Result<Self, Error> {
        let model = ModelParams::from_bytes(&std::fs::read(dir.join(format!("{stem}.model")))?)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        if meta.actor_opt.m.len() != model.actor.params().len()
            || meta.critic_opt.m.len() != model.critic.params().len()
        {
            return Err(NnError::Shape("optimizer state does not match the model".into()).into());
        }
        let mut agent = Self::new(meta.id, model, meta.hp, rng);
        agent.actor_opt = meta.actor_opt;
        agent.critic_opt = meta.critic_opt;
        Ok(agent)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    id: usize,
    hp: AgentHyperparams,
    actor_opt: AdamState,
    critic_opt: AdamState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Process, RngStreams, World};
    use crate::model::Region;

    fn small_hp() -> AgentHyperparams {
        AgentHyperparams {
            hidden: vec![16, 16],
            ..Default::default()
        }
    }

    fn world() -> World {
        let mut w = World::new(ScenarioParams::default(), RngStreams::new(3)).unwrap();
        w.begin_step();
        w
    }

    #[test]
    fn encoding_shape_and_range() {
        let w = world();
        let obs = encode_state(&w.mus[0], &w.tasks, &w.params);
        assert_eq!(obs.len(), observation_len(5));
        assert_eq!(obs[0], 1.0);
        assert!(obs.iter().all(|v| (0.0..=1.0).contains(v)));
        let empty = encode_state(&w.mus[0], &[], &w.params);
        assert!(empty[GLOBAL_FEATURES..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_permutes_with_tasks() {
        let w = world();
        let mut rev = w.tasks.clone();
        rev.reverse();
        let a = encode_state(&w.mus[0], &w.tasks, &w.params);
        let b = encode_state(&w.mus[0], &rev, &w.params);
        for s in 0..5 {
            let sa =
                &a[GLOBAL_FEATURES + SLOT_FEATURES * s..GLOBAL_FEATURES + SLOT_FEATURES * (s + 1)];
            let r = 4 - s;
            let sb =
                &b[GLOBAL_FEATURES + SLOT_FEATURES * r..GLOBAL_FEATURES + SLOT_FEATURES * (r + 1)];
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn all_ineligible_forces_abstain() {
        let mut w = world();
        for t in &mut w.tasks {
            t.roi = Region::Rect {
                i_min: 0,
                j_min: 0,
                i_max: 0,
                j_max: 0,
            };
        }
        w.mus[0].state.location = crate::model::Cell::new(50, 50);
        let obs = encode_state(&w.mus[0], &w.tasks, &w.params);
        let mut rng = RngStreams::new(1).stream(Process::Init, 0);
        let model = init_model(5, &small_hp(), &mut rng);
        for _ in 0..200 {
            let a = act(&obs, &model.actor, &small_hp(), &mut rng, ActMode::Sample).unwrap();
            assert_eq!(a.slot, 5);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let w = world();
        let obs = encode_state(&w.mus[0], &w.tasks, &w.params);
        let mut rng = RngStreams::new(1).stream(Process::Init, 0);
        let model = init_model(5, &small_hp(), &mut rng);
        let a = act(&obs, &model.actor, &small_hp(), &mut rng, ActMode::Greedy).unwrap();
        let b = act(&obs, &model.actor, &small_hp(), &mut rng, ActMode::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gae_degenerate_discounts() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.5, 0.5];
        let d = [false, false, true];
        let (a, _) = compute_gae(&r, &v, &d, 9.0, 0.0, 0.95);
        assert_eq!(a, vec![0.5, 1.5, 2.5]);
        let (a, ret) = compute_gae(&r, &v, &d, 9.0, 1.0, 1.0);
        assert_eq!(a, vec![5.5, 4.5, 2.5]);
        assert_eq!(ret, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![1.0, 2.0, 3.0, 10.0];
        normalize_advantages(&mut a);
        let mean = a.iter().sum::<f64>() / 4.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        let mut c = vec![2.0; 3];
        normalize_advantages(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn surrogate_clipping() {
        assert_eq!(clipped_surrogate(0.0, 0.0, 2.0, 0.2), (2.0, 2.0));
        let (v, d) = clipped_surrogate(0.5f64, 0.0, 1.0, 0.2);
        assert!((v - 1.2).abs() < 1e-15 && d == 0.0);
        let (v, d) = clipped_surrogate(0.5f64, 0.0, -1.0, 0.2);
        assert!((v + 0.5f64.exp()).abs() < 1e-15 && (d + 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn first_epoch_ratio_is_one() {
        let w = world();
        let obs = encode_state(&w.mus[0], &w.tasks, &w.params);
        let mut rng = RngStreams::new(2).stream(Process::Init, 0);
        let model = init_model(5, &small_hp(), &mut rng);
        let a = act(&obs, &model.actor, &small_hp(), &mut rng, ActMode::Sample).unwrap();
        let (lp, _) = log_prob_and_grad(&obs, &model.actor, &small_hp(), &a).unwrap();
        assert_eq!(lp, a.log_prob);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStreams::new(2).stream(Process::Init, 0);
        let model = init_model(5, &small_hp(), &mut rng);
        let agent = Agent::new(3, model, small_hp(), rng.clone());
        agent.save_checkpoint(dir.path(), "mu3").unwrap();
        let back = Agent::load_checkpoint(dir.path(), "mu3", rng).unwrap();
        assert_eq!(back.model, agent.model);
        assert_eq!(back.hp, agent.hp);
        assert_eq!(back.id, 3);
    }
}
