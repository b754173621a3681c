//! Flat `key = value` experiment configuration.
//!
//! Scenario parameters use their plain field names (`num_mus = 5`), agent
//! hyperparameters are prefixed with `ppo.` and federation settings with
//! `federation.`. Tuples and lists are comma separated. `#` starts a comment.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agent::{ActMode, AgentHyperparams};
use crate::baselines::{OTA_MAX_MUS, OTA_MAX_STEPS, OTA_MAX_TASKS};
use crate::error::ConfigError;
use crate::federation::FederationConfig;
use crate::model::ScenarioParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FdrlPpo,
    Ippo,
    Motp,
    Rtps,
    Ota,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [Self::FdrlPpo, Self::Ippo, Self::Motp, Self::Rtps, Self::Ota];

    pub fn name(self) -> &'static str {
        match self {
            Self::FdrlPpo => "fdrl_ppo",
            Self::Ippo => "ippo",
            Self::Motp => "motp",
            Self::Rtps => "rtps",
            Self::Ota => "ota",
        }
    }

    pub fn learns(self) -> bool {
        matches!(self, Self::FdrlPpo | Self::Ippo)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| {
                format!("unknown policy `{s}` (expected fdrl_ppo, ippo, motp, rtps or ota)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Baseline,
    MuScaling,
    TaskLoad,
    BudgetSweep,
    Churn,
}

impl ScenarioKind {
    const ALL: [ScenarioKind; 5] = [
        Self::Baseline,
        Self::MuScaling,
        Self::TaskLoad,
        Self::BudgetSweep,
        Self::Churn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::MuScaling => "mu_scaling",
            Self::TaskLoad => "task_load",
            Self::BudgetSweep => "budget_sweep",
            Self::Churn => "churn",
        }
    }

    /// Name of the swept scenario parameter, if any.
    pub fn axis(self) -> Option<&'static str> {
        match self {
            Self::MuScaling => Some("num_mus"),
            Self::TaskLoad => Some("tasks_per_step"),
            Self::BudgetSweep => Some("budget_coeff"),
            Self::Baseline | Self::Churn => None,
        }
    }

    fn default_sweep(self) -> Vec<f64> {
        match self {
            Self::MuScaling | Self::TaskLoad => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            Self::BudgetSweep => vec![5.0, 10.0, 15.0, 20.0, 25.0],
            Self::Baseline | Self::Churn => Vec::new(),
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ChurnAction {
    /// New MUs; the ids must be the next free ones, in order.
    Join {
        ids: Vec<usize>,
    },
    Drop {
        ids: Vec<usize>,
    },
    /// Drop this many active MUs chosen at random.
    DropRandom {
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub step: usize,
    pub action: ChurnAction,
}

fn parse_ids(s: &str) -> Result<Vec<usize>, String> {
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (
                a.trim().parse().map_err(|e| format!("{part}: {e}"))?,
                b.trim().parse().map_err(|e| format!("{part}: {e}"))?,
            );
            if a > b {
                return Err(format!("empty id range {part}"));
            }
            ids.extend(a..=b);
        } else {
            ids.push(part.parse().map_err(|e| format!("{part}: {e}"))?);
        }
    }
    if ids.is_empty() {
        return Err("no MU ids given".into());
    }
    Ok(ids)
}

/// Parses `step:join:ids; step:drop:ids; step:drop:random:count`.
pub fn parse_churn(s: &str) -> Result<Vec<ChurnEvent>, String> {
    let mut events = Vec::new();
    for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let step = parts[0]
            .parse()
            .map_err(|e| format!("`{item}`: bad step: {e}"))?;
        let action = match parts.as_slice() {
            [_, "join", ids] => ChurnAction::Join {
                ids: parse_ids(ids)?,
            },
            [_, "drop", "random", count] => ChurnAction::DropRandom {
                count: count.parse().map_err(|e| format!("`{item}`: {e}"))?,
            },
            [_, "drop", ids] => ChurnAction::Drop {
                ids: parse_ids(ids)?,
            },
            _ => {
                return Err(format!(
                    "`{item}`: expected step:join:ids, step:drop:ids or step:drop:random:count"
                ))
            }
        };
        events.push(ChurnEvent { step, action });
    }
    events.sort_by_key(|e| e.step);
    Ok(events)
}

pub fn format_churn(events: &[ChurnEvent]) -> String {
    let ids = |v: &[usize]| {
        v.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    events
        .iter()
        .map(|e| match &e.action {
            ChurnAction::Join { ids: v } => format!("{}:join:{}", e.step, ids(v)),
            ChurnAction::Drop { ids: v } => format!("{}:drop:{}", e.step, ids(v)),
            ChurnAction::DropRandom { count } => format!("{}:drop:random:{count}", e.step),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub params: ScenarioParams,
    pub agent: AgentHyperparams,
    pub federation: FederationConfig,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    /// Training episodes per seed for the learning policies.
    pub episodes: usize,
    /// Validation episodes per seed.
    pub realizations: usize,
    /// Length of a validation episode; training episodes use `params.horizon`.
    pub validation_horizon: usize,
    /// Values of the scenario's swept parameter.
    pub sweep: Vec<f64>,
    pub churn: Vec<ChurnEvent>,
    pub dataset: Option<PathBuf>,
    /// Write every step record to the event log.
    pub log_steps: bool,
    /// How learned policies act during validation.
    pub validation_mode: ActMode,
    pub bootstrap_resamples: usize,
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: ScenarioKind) -> Self {
        let params = ScenarioParams {
            horizon: 100,
            ..Default::default()
        };
        let mut cfg = Self {
            scenario,
            validation_horizon: params.horizon,
            params,
            agent: AgentHyperparams::default(),
            federation: FederationConfig::default(),
            policies: vec![
                PolicyKind::FdrlPpo,
                PolicyKind::Ippo,
                PolicyKind::Motp,
                PolicyKind::Rtps,
            ],
            seeds: (1..=10).collect(),
            episodes: 60,
            realizations: 10,
            sweep: scenario.default_sweep(),
            churn: Vec::new(),
            dataset: None,
            log_steps: true,
            validation_mode: ActMode::Sample,
            bootstrap_resamples: 1000,
        };
        if scenario == ScenarioKind::Churn {
            cfg.validation_horizon = 300;
            cfg.policies = vec![PolicyKind::FdrlPpo, PolicyKind::Ippo];
            cfg.churn = parse_churn("100:join:5-9; 200:drop:random:5").expect("static schedule");
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        self.agent.validate().map_err(invalid)?;
        self.federation
            .validate(self.params.horizon)
            .map_err(invalid)?;
        if self.policies.is_empty() || self.seeds.is_empty() {
            return Err(invalid(
                "at least one policy and one seed are required".into(),
            ));
        }
        if self.realizations == 0 || self.validation_horizon == 0 {
            return Err(invalid(
                "realizations and validation_horizon must be positive".into(),
            ));
        }
        if self.bootstrap_resamples == 0 {
            return Err(invalid("bootstrap_resamples must be positive".into()));
        }
        if self.policies.contains(&PolicyKind::Ota) {
            let p = &self.params;
            if p.num_mus > OTA_MAX_MUS
                || p.tasks_per_step > OTA_MAX_TASKS
                || self.validation_horizon > OTA_MAX_STEPS
            {
                return Err(invalid(format!(
                    "policy ota needs num_mus <= {OTA_MAX_MUS}, tasks_per_step <= {OTA_MAX_TASKS}, validation_horizon <= {OTA_MAX_STEPS}"
                )));
            }
            if self.scenario.axis().is_some() || !self.churn.is_empty() {
                return Err(invalid(
                    "policy ota cannot be combined with sweeps or churn".into(),
                ));
            }
        }
        if let Some(e) = self
            .churn
            .iter()
            .find(|e| e.step >= self.validation_horizon)
        {
            return Err(invalid(format!(
                "churn event at step {} is beyond the validation horizon",
                e.step
            )));
        }
        if self.scenario.axis().is_some() && self.sweep.is_empty() {
            return Err(invalid(format!(
                "scenario {} needs sweep values",
                self.scenario.name()
            )));
        }
        Ok(())
    }

    /// Parses the flat format on top of the scenario's defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let scenario = match entries.iter().find(|e| e.1 == "scenario") {
            Some((_, _, v)) => v.parse().map_err(|m| ConfigError::Value {
                key: "scenario".into(),
                message: m,
            })?,
            None => ScenarioKind::Baseline,
        };
        let mut cfg = Self::for_scenario(scenario);
        let mut params = to_object(&cfg.params);
        let mut agent = to_object(&cfg.agent);
        let mut federation = to_object(&cfg.federation);
        let mut horizon_set = false;
        let mut validation_set = false;
        for (_, key, value) in &entries {
            let err = |message: String| ConfigError::Value {
                key: key.clone(),
                message,
            };
            match key.as_str() {
                "scenario" => {}
                "policy" | "policies" => {
                    cfg.policies = split_list(value)
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(err)?;
                }
                "seeds" => cfg.seeds = parse_seeds(value).map_err(err)?,
                "episodes" => cfg.episodes = value.parse().map_err(|e| err(format!("{e}")))?,
                "realizations" => {
                    cfg.realizations = value.parse().map_err(|e| err(format!("{e}")))?
                }
                "validation_horizon" => {
                    cfg.validation_horizon = value.parse().map_err(|e| err(format!("{e}")))?;
                    validation_set = true;
                }
                "sweep" => {
                    cfg.sweep = split_list(value)
                        .map(|v| v.parse::<f64>().map_err(|e| err(format!("{e}"))))
                        .collect::<Result<_, _>>()?
                }
                "churn" => cfg.churn = parse_churn(value).map_err(err)?,
                "dataset" => cfg.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
                "log_steps" => cfg.log_steps = parse_bool(value).map_err(err)?,
                "validation_mode" => cfg.validation_mode = value.parse().map_err(err)?,
                "bootstrap_resamples" => {
                    cfg.bootstrap_resamples = value.parse().map_err(|e| err(format!("{e}")))?
                }
                k => {
                    let (target, field) = if let Some(f) = k.strip_prefix("ppo.") {
                        (&mut agent, f)
                    } else if let Some(f) = k.strip_prefix("federation.") {
                        (&mut federation, f)
                    } else {
                        horizon_set |= k == "horizon";
                        (&mut params, k)
                    };
                    let default = target
                        .get(field)
                        .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
                    let parsed = parse_like(default, value).map_err(err)?;
                    target.insert(field.to_string(), parsed);
                }
            }
        }
        cfg.params = from_object(params, "scenario parameters")?;
        cfg.agent = from_object(agent, "ppo")?;
        cfg.federation = from_object(federation, "federation")?;
        if horizon_set && !validation_set && cfg.scenario != ScenarioKind::Churn {
            cfg.validation_horizon = cfg.params.horizon;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`ExperimentConfig::parse`]: every setting, one per line.
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("scenario", self.scenario.name().into());
        line(
            "policies",
            self.policies
                .iter()
                .map(|p| p.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        line(
            "seeds",
            self.seeds
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        line("episodes", self.episodes.to_string());
        line("realizations", self.realizations.to_string());
        line("validation_horizon", self.validation_horizon.to_string());
        line(
            "sweep",
            self.sweep
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        line("churn", format_churn(&self.churn));
        line(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        line("log_steps", self.log_steps.to_string());
        line("validation_mode", self.validation_mode.name().into());
        line("bootstrap_resamples", self.bootstrap_resamples.to_string());
        for (prefix, obj) in [
            ("", to_object(&self.params)),
            ("ppo.", to_object(&self.agent)),
            ("federation.", to_object(&self.federation)),
        ] {
            for (k, v) in obj {
                line(&format!("{prefix}{k}"), flat_value(&v));
            }
        }
        out
    }
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn from_object<T: for<'de> Deserialize<'de>>(
    m: Map<String, Value>,
    what: &str,
) -> Result<T, ConfigError> {
    serde_json::from_value(Value::Object(m))
        .map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

/// `1,2,5` or `1..10` (inclusive).
fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        return Ok((a..=b).collect());
    }
    split_list(s)
        .map(|v| v.parse().map_err(|e| format!("{v}: {e}")))
        .collect()
}

fn parse_scalar(template: &Value, s: &str) -> Result<Value, String> {
    match template {
        Value::Bool(_) => parse_bool(s).map(Value::Bool),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| format!("`{s}` is not finite"))
        }
        Value::Number(_) | Value::Null => {
            if template.is_null() && (s == "none" || s.is_empty()) {
                return Ok(Value::Null);
            }
            s.parse::<u64>()
                .map(Value::from)
                .map_err(|e| format!("`{s}`: {e}"))
        }
        Value::String(_) => Ok(Value::String(s.to_string())),
        _ => Err("unsupported value type".into()),
    }
}

fn parse_like(template: &Value, s: &str) -> Result<Value, String> {
    match template {
        Value::Array(items) => {
            let parts: Vec<&str> = split_list(s).collect();
            let elem = items.first().cloned().unwrap_or(Value::from(0u64));
            parts
                .iter()
                .map(|p| parse_scalar(&elem, p))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        t => parse_scalar(t, s),
    }
}

fn flat_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(flat_value).collect::<Vec<_>>().join(","),
        Value::Null => "none".into(),
        Value::Number(n) => n
            .as_f64()
            .filter(|_| n.is_f64())
            .map(|f| format!("{f:?}"))
            .unwrap_or_else(|| n.to_string()),
        other => other.to_string().trim_matches('"').to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# tiny run\nnum_mus = 3\nppo.hidden = 32,32\nfederation.enabled = false\nseeds = 1..3\npolicies = rtps, motp\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, ScenarioKind::Baseline);
        assert_eq!(cfg.params.num_mus, 3);
        assert_eq!(cfg.agent.hidden, vec![32, 32]);
        assert!(!cfg.federation.enabled);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.policies, vec![PolicyKind::Rtps, PolicyKind::Motp]);
    }

    #[test]
    fn tuple_and_option_fields() {
        let cfg = ExperimentConfig::parse("compute_rate_range = 1e8, 2e8\nfederation.rounds = 1\n")
            .unwrap();
        assert_eq!(cfg.params.compute_rate_range, (1e8, 2e8));
        assert_eq!(cfg.federation.rounds, Some(1));
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(
            ExperimentConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("num_mus = many"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("no equals sign"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("policies = ota"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("scenario = churn\nchurn = 400:drop:1"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn flat_round_trip() {
        let mut cfg = ExperimentConfig::for_scenario(ScenarioKind::Churn);
        cfg.params.budget_coeff = 12.5;
        let back = ExperimentConfig::parse(&cfg.to_flat()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn churn_grammar() {
        let ev = parse_churn("200:drop:random:5; 100:join:5-9").unwrap();
        assert_eq!(
            ev[0],
            ChurnEvent {
                step: 100,
                action: ChurnAction::Join {
                    ids: vec![5, 6, 7, 8, 9]
                }
            }
        );
        assert_eq!(
            ev[1],
            ChurnEvent {
                step: 200,
                action: ChurnAction::DropRandom { count: 5 }
            }
        );
        assert_eq!(
            parse_churn("3:drop:1,4").unwrap()[0].action,
            ChurnAction::Drop { ids: vec![1, 4] }
        );
        assert!(parse_churn("3:leave:1").is_err());
        assert_eq!(format_churn(&ev), "100:join:5,6,7,8,9; 200:drop:random:5");
    }
}
