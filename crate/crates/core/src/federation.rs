//! Reward-weighted federated averaging between MU agents.
//!
//! Agents only ever hand over [`ModelParams`] (in the binary exchange
//! format) and their round reward; observations and transitions stay local.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::error::NnError;
use crate::nn::{combine, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// Off means independent learners (IPPO).
    pub enabled: bool,
    /// Environment steps per round (T_r).
    pub steps_per_round: usize,
    /// Rounds per episode (r_max); `None` means as many as fit.
    pub rounds: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            steps_per_round: 100,
            rounds: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, horizon: usize) -> Result<(), String> {
        if self.steps_per_round == 0 {
            return Err("steps_per_round must be positive".into());
        }
        if let Some(r) = self.rounds {
            if r * self.steps_per_round > horizon {
                return Err(format!(
                    "{r} rounds of {} steps exceed the horizon {horizon}",
                    self.steps_per_round
                ));
            }
        }
        Ok(())
    }

    /// Whether a round closes after episode step `t` (0-based).
    pub fn round_ends_after(&self, t: usize) -> bool {
        if !self.enabled || (t + 1) % self.steps_per_round != 0 {
            return false;
        }
        let round = (t + 1) / self.steps_per_round;
        self.rounds.is_none_or(|r| round <= r)
    }
}

/// Aggregation weights `R_k / ΣR`, uniform when nobody earned anything.
pub fn aggregation_weights(rewards: &[f64]) -> Vec<f64> {
    let total: f64 = rewards.iter().sum();
    if total > 0.0 {
        rewards.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / rewards.len() as f64; rewards.len()]
    }
}

/// Local blend factors `χ_k = R_k / ΣR`; all zero (adopt the global model)
/// when nobody earned anything.
pub fn blend_factors(rewards: &[f64]) -> Vec<f64> {
    let total: f64 = rewards.iter().sum();
    if total > 0.0 {
        rewards.iter().map(|r| r / total).collect()
    } else {
        vec![0.0; rewards.len()]
    }
}

/// `χ·local + (1 − χ)·global`.
pub fn blend_local(
    local: &ModelParams,
    global: &ModelParams,
    chi: f64,
) -> Result<ModelParams, NnError> {
    if !(0.0..=1.0).contains(&chi) {
        return Err(NnError::Weights(chi));
    }
    let mut out = combine(&[local, global], &[chi, 1.0 - chi])?;
    out.version = global.version;
    Ok(out)
}

/// Reward-weighted average of the uploaded local models.
pub fn aggregate_global(locals: &[&ModelParams], rewards: &[f64]) -> Result<ModelParams, NnError> {
    if locals.len() != rewards.len() {
        return Err(NnError::Shape(format!(
            "{} models but {} rewards",
            locals.len(),
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !(**r >= 0.0)) {
        return Err(NnError::Weights(*r));
    }
    combine(locals, &aggregation_weights(rewards))
}

/// The platform-side endpoint of the federation. Uploads and downloads use
/// the binary model format so the endpoint could live in another process.
pub trait Aggregator {
    /// Current global model, serialized.
    fn download(&self) -> Vec<u8>;
    fn upload(&mut self, mu: usize, model: Vec<u8>, round_reward: f64) -> Result<(), NnError>;
    /// Folds all uploads of the round into the next global model and
    /// returns the weight given to each uploader.
    fn aggregate(&mut self, round: u64) -> Result<BTreeMap<usize, f64>, NnError>;
}

/// Aggregator living in the simulation process.
#[derive(Debug, Clone)]
pub struct InProcessAggregator {
    global: ModelParams,
    uploads: BTreeMap<usize, (ModelParams, f64)>,
}

impl InProcessAggregator {
    pub fn new(initial: ModelParams) -> Self {
        Self {
            global: initial,
            uploads: BTreeMap::new(),
        }
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }
}

impl Aggregator for InProcessAggregator {
    fn download(&self) -> Vec<u8> {
        self.global.to_bytes()
    }

    fn upload(&mut self, mu: usize, model: Vec<u8>, round_reward: f64) -> Result<(), NnError> {
        let model = ModelParams::from_bytes(&model)?;
        if !model.same_shape(&self.global) {
            return Err(NnError::Shape(format!(
                "upload from MU {mu} does not match the global model"
            )));
        }
        self.uploads.insert(mu, (model, round_reward));
        Ok(())
    }

    fn aggregate(&mut self, round: u64) -> Result<BTreeMap<usize, f64>, NnError> {
        let uploads = std::mem::take(&mut self.uploads);
        if uploads.is_empty() {
            return Ok(BTreeMap::new());
        }
        let models: Vec<&ModelParams> = uploads.values().map(|(m, _)| m).collect();
        let rewards: Vec<f64> = uploads.values().map(|(_, r)| *r).collect();
        let mut global = aggregate_global(&models, &rewards)?;
        global.version = round;
        self.global = global;
        Ok(uploads
            .keys()
            .copied()
            .zip(aggregation_weights(&rewards))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: u64,
    pub rewards: BTreeMap<usize, f64>,
    pub weights: BTreeMap<usize, f64>,
    pub chi: BTreeMap<usize, f64>,
    pub global_version: u64,
}

/// Round bookkeeping on the MU side plus the aggregator handle.
#[derive(Debug, Clone)]
pub struct Federation<A: Aggregator> {
    pub config: FederationConfig,
    aggregator: A,
    round: u64,
    round_rewards: BTreeMap<usize, f64>,
}

impl<A: Aggregator> Federation<A> {
    pub fn new(config: FederationConfig, aggregator: A) -> Self {
        Self {
            config,
            aggregator,
            round: 0,
            round_rewards: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn aggregator(&self) -> &A {
        &self.aggregator
    }

    pub fn global_model(&self) -> Result<ModelParams, NnError> {
        ModelParams::from_bytes(&self.aggregator.download())
    }

    pub fn credit(&mut self, mu: usize, reward: f64) {
        *self.round_rewards.entry(mu).or_insert(0.0) += reward;
    }

    /// A joining MU starts from the current global model.
    pub fn join(&self, agent: &mut Agent) -> Result<(), NnError> {
        agent.model = self.global_model()?;
        Ok(())
    }

    /// Closes the round: present agents upload, the aggregator averages,
    /// and every present agent blends its local model with the new global.
    pub fn finish_round(&mut self, agents: &mut [&mut Agent]) -> Result<RoundLedger, NnError> {
        self.round += 1;
        let rewards: Vec<f64> = agents
            .iter()
            .map(|a| self.round_rewards.get(&a.id).copied().unwrap_or(0.0))
            .collect();
        for (agent, &r) in agents.iter().zip(&rewards) {
            self.aggregator
                .upload(agent.id, agent.model.to_bytes(), r)?;
        }
        let weights = self.aggregator.aggregate(self.round)?;
        let global = self.global_model()?;
        let chi = blend_factors(&rewards);
        for (agent, &c) in agents.iter_mut().zip(&chi) {
            agent.model = blend_local(&agent.model, &global, c)?;
        }
        self.round_rewards.clear();
        Ok(RoundLedger {
            round: self.round,
            rewards: agents.iter().map(|a| a.id).zip(rewards).collect(),
            weights,
            chi: agents.iter().map(|a| a.id).zip(chi).collect(),
            global_version: global.version,
        })
    }
}
