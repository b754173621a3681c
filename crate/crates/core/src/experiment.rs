//! Scenario runner: trains the learning policies per seed, validates every
//! policy on common realizations, and writes the metric files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{encode_state, ActMode};
use crate::baselines::{motp_policy, ota_solve, replay_policy, rtps_policy, OtaInstance};
use crate::config::{ExperimentConfig, PolicyKind, ScenarioKind};
use crate::environment::{load_dataset_tasks, Process, RngStreams, World};
use crate::error::{Error, Result};
use crate::federation::RoundLedger;
use crate::mcsp::StepRecord;
use crate::metrics::{realization_metrics, summarize, MetricsReport, RealizationMetrics};
use crate::model::{is_eligible, ResourceChoice, ScenarioParams, TaskSpec};
use crate::sim::{run_episode, Controller, EpisodeOptions, EpisodeOutput};

/// Stream salts separating training worlds, validation worlds and agents.
const TRAIN_SALT: u64 = 1 << 20;
const VALIDATION_SALT: u64 = 2 << 20;
const AGENT_SALT: u64 = 3 << 20;
const OTA_SALT: u64 = 4 << 20;

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "FEDCROWD_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub episode: usize,
    pub total_reward: f64,
    pub weighted_completed: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Builds a world for one episode, with the dataset stream if configured.
pub fn make_world(
    params: &ScenarioParams,
    streams: RngStreams,
    dataset: Option<&[TaskSpec]>,
) -> Result<World> {
    let world = World::new(params.clone(), streams)?;
    Ok(match dataset {
        Some(tasks) => world.with_dataset(tasks.to_vec()),
        None => world,
    })
}

pub fn load_dataset(
    cfg: &ExperimentConfig,
    params: &ScenarioParams,
) -> Result<Option<Vec<TaskSpec>>> {
    match &cfg.dataset {
        Some(path) => Ok(Some(load_dataset_tasks(
            path,
            params.num_types,
            params,
            RngStreams::new(0).derive(Process::Dataset as u64),
        )?)),
        None => Ok(None),
    }
}

/// A policy trained for one seed (baselines come back untrained).
pub struct Trained {
    pub controller: Controller,
    pub curve: Vec<TrainingPoint>,
    pub rounds: Vec<RoundLedger>,
}

pub fn train_policy(
    cfg: &ExperimentConfig,
    params: &ScenarioParams,
    policy: PolicyKind,
    seed: u64,
    dataset: Option<&[TaskSpec]>,
) -> Result<Trained> {
    let streams = RngStreams::new(seed);
    let mut controller = Controller::new(
        policy,
        &cfg.agent,
        &cfg.federation,
        params.tasks_per_step,
        streams.derive(AGENT_SALT),
        params.num_mus,
    );
    let mut curve = Vec::new();
    let mut rounds = Vec::new();
    if !policy.learns() {
        return Ok(Trained {
            controller,
            curve,
            rounds,
        });
    }
    let opts = EpisodeOptions {
        horizon: params.horizon,
        mode: ActMode::Sample,
        learn: true,
        churn: Vec::new(),
    };
    for episode in 0..cfg.episodes {
        let mut world = make_world(params, streams.derive(TRAIN_SALT + episode as u64), dataset)?;
        controller.start_episode(episode);
        let out = run_episode(&mut world, &mut controller, &opts)?;
        let k = out.updates.len().max(1) as f64;
        let avg = |f: &dyn Fn(&crate::agent::PpoDiagnostics) -> f64| {
            out.updates.iter().map(|(_, d)| f(d)).sum::<f64>() / k
        };
        curve.push(TrainingPoint {
            episode,
            total_reward: out.total_payments(),
            weighted_completed: out.weighted_completed(),
            policy_loss: avg(&|d| d.policy_loss),
            value_loss: avg(&|d| d.value_loss),
            entropy: avg(&|d| d.entropy),
            approx_kl: avg(&|d| d.approx_kl),
        });
        rounds.extend(out.rounds);
    }
    Ok(Trained {
        controller,
        curve,
        rounds,
    })
}

/// Frozen validation on `realizations` fresh worlds. Every policy
/// of a seed sees the same worlds.
pub fn validate_policy(
    cfg: &ExperimentConfig,
    params: &ScenarioParams,
    controller: &Controller,
    seed: u64,
    dataset: Option<&[TaskSpec]>,
) -> Result<Vec<EpisodeOutput>> {
    let streams = RngStreams::new(seed);
    let opts = EpisodeOptions {
        horizon: cfg.validation_horizon,
        mode: cfg.validation_mode,
        learn: false,
        churn: cfg.churn.clone(),
    };
    (0..cfg.realizations)
        .map(|i| {
            let mut world =
                make_world(params, streams.derive(VALIDATION_SALT + i as u64), dataset)?;
            let mut c = controller.clone();
            c.reseed_policies(streams.derive(VALIDATION_SALT + AGENT_SALT + i as u64));
            run_episode(&mut world, &mut c, &opts)
        })
        .collect()
}

/// Realized metrics of the offline optimum on random instances shaped like
/// `params` (per-type counts and weighted sum only).
fn ota_realizations(
    cfg: &ExperimentConfig,
    params: &ScenarioParams,
    seed: u64,
) -> Result<Vec<RealizationMetrics>> {
    let streams = RngStreams::new(seed);
    (0..cfg.realizations)
        .map(|i| {
            let inst = OtaInstance::random(
                params,
                params.num_mus,
                params.tasks_per_step,
                cfg.validation_horizon,
                streams.derive(OTA_SALT + i as u64).seed(),
            );
            let sol = ota_solve(&inst)?;
            let mut per_type = vec![0u64; params.num_types];
            let mut completed = 0;
            for (t, step) in sol.plan.iter().enumerate() {
                for a in step {
                    let task = inst.tasks[t]
                        .iter()
                        .find(|x| x.index == a.task)
                        .expect("planned task exists");
                    per_type[task.task_type] += 1;
                    completed += 1;
                }
            }
            Ok(RealizationMetrics {
                weighted_completed: sol.objective,
                completed,
                proposals: completed,
                collisions: 0,
                collision_ratio: 0.0,
                per_type,
                energy_spent: f64::NAN,
                energy_per_completed: f64::NAN,
                reward_series: Vec::new(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub axis_value: Option<f64>,
    pub policy: PolicyKind,
    pub report: MetricsReport,
    /// Mean weighted completed tasks per seed, in seed order.
    pub per_seed_weighted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioKind,
    pub axis: Option<String>,
    pub points: Vec<PointResult>,
}

/// One event-log line: a federation round ledger or a validation step.
/// A flat struct rather than a tagged enum so integer map keys round-trip.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct LogEvent {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ledger: Option<RoundLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    realization: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    record: Option<StepRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RealizationLine {
    axis_value: Option<f64>,
    policy: PolicyKind,
    seed: u64,
    realization: usize,
    metrics: RealizationMetrics,
}

struct Job {
    point: usize,
    axis_value: Option<f64>,
    params: ScenarioParams,
    policy: PolicyKind,
    seed: u64,
}

struct JobResult {
    realizations: Vec<RealizationMetrics>,
    curve: Vec<TrainingPoint>,
}

fn job_tag(job: &Job) -> String {
    match job.axis_value {
        Some(v) => format!("{}_{v}_seed{}", job.policy.name(), job.seed),
        None => format!("{}_seed{}", job.policy.name(), job.seed),
    }
}

fn run_job(cfg: &ExperimentConfig, job: &Job, out_dir: Option<&Path>) -> Result<JobResult> {
    if job.policy == PolicyKind::Ota {
        return Ok(JobResult {
            realizations: ota_realizations(cfg, &job.params, job.seed)?,
            curve: Vec::new(),
        });
    }
    let dataset = load_dataset(cfg, &job.params)?;
    let trained = train_policy(cfg, &job.params, job.policy, job.seed, dataset.as_deref())?;
    let outputs = validate_policy(
        cfg,
        &job.params,
        &trained.controller,
        job.seed,
        dataset.as_deref(),
    )?;
    let realizations = outputs
        .iter()
        .map(|o| realization_metrics(&o.records, job.params.num_types))
        .collect::<Result<Vec<_>>>()?;
    if let (Some(dir), true) = (out_dir, cfg.log_steps) {
        let events = dir.join("events");
        fs::create_dir_all(&events)?;
        let mut w = BufWriter::new(File::create(
            events.join(format!("{}.jsonl", job_tag(job))),
        )?);
        for ledger in &trained.rounds {
            serde_json::to_writer(
                &mut w,
                &LogEvent {
                    kind: "round".into(),
                    ledger: Some(ledger.clone()),
                    ..Default::default()
                },
            )?;
            w.write_all(b"\n")?;
        }
        for (i, o) in outputs.iter().enumerate() {
            for record in &o.records {
                serde_json::to_writer(
                    &mut w,
                    &LogEvent {
                        kind: "step".into(),
                        realization: Some(i),
                        record: Some(record.clone()),
                        ..Default::default()
                    },
                )?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    Ok(JobResult {
        realizations,
        curve: trained.curve,
    })
}

/// Runs `f` on a pool sized by [`WORKERS_ENV`] when set.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Runs the configured scenario. With `out_dir`, writes the metric CSVs,
/// per-realization lines, training curves, event logs and a summary.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ScenarioResult> {
    cfg.validate()?;
    let axis = cfg.scenario.axis();
    let points: Vec<(Option<f64>, ScenarioParams)> = match axis {
        None => vec![(None, cfg.params.clone())],
        Some(name) => cfg
            .sweep
            .iter()
            .map(|&v| {
                let mut p = cfg.params.clone();
                match name {
                    "num_mus" => p.num_mus = v as usize,
                    "tasks_per_step" => p.tasks_per_step = v as usize,
                    _ => p.budget_coeff = v,
                }
                (Some(v), p)
            })
            .collect(),
    };
    let mut jobs = Vec::new();
    for (point, (axis_value, params)) in points.iter().enumerate() {
        for &policy in &cfg.policies {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    point,
                    axis_value: *axis_value,
                    params: params.clone(),
                    policy,
                    seed,
                });
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let events = dir.join("events");
        if events.exists() {
            fs::remove_dir_all(&events)?;
        }
    }
    let results: Vec<Result<JobResult>> =
        with_workers(|| jobs.par_iter().map(|j| run_job(cfg, j, out_dir)).collect());
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut out = ScenarioResult {
        scenario: cfg.scenario,
        axis: axis.map(String::from),
        points: Vec::new(),
    };
    for (point, (axis_value, _)) in points.iter().enumerate() {
        for &policy in &cfg.policies {
            let mine: Vec<(&Job, &JobResult)> = jobs
                .iter()
                .zip(&results)
                .filter(|(j, _)| j.point == point && j.policy == policy)
                .collect();
            let all: Vec<RealizationMetrics> = mine
                .iter()
                .flat_map(|(_, r)| r.realizations.iter().cloned())
                .collect();
            let per_seed_weighted = mine
                .iter()
                .map(|(_, r)| {
                    r.realizations
                        .iter()
                        .map(|m| m.weighted_completed)
                        .sum::<f64>()
                        / r.realizations.len() as f64
                })
                .collect();
            out.points.push(PointResult {
                axis_value: *axis_value,
                policy,
                report: summarize(&all, cfg.bootstrap_resamples, 0)?,
                per_seed_weighted,
            });
        }
    }
    if let Some(dir) = out_dir {
        write_outputs(cfg, &jobs, &results, &out, dir)?;
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_outputs(
    cfg: &ExperimentConfig,
    jobs: &[Job],
    results: &[JobResult],
    res: &ScenarioResult,
    dir: &Path,
) -> Result<()> {
    fs::write(dir.join("config.txt"), cfg.to_flat())?;
    let scenario = cfg.scenario.name();
    let axis = res.axis.clone().unwrap_or_default();
    let scalar =
        |name: &str, pick: &dyn Fn(&MetricsReport) -> crate::metrics::Estimate| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            w.write_record([
                "scenario",
                "axis",
                "axis_value",
                "policy",
                "mean",
                "ci_low",
                "ci_high",
                "n",
            ])?;
            for p in &res.points {
                let e = pick(&p.report);
                w.write_record([
                    scenario.to_string(),
                    axis.clone(),
                    fmt_opt(p.axis_value),
                    p.policy.name().to_string(),
                    e.mean.to_string(),
                    e.ci_low.to_string(),
                    e.ci_high.to_string(),
                    e.n.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        };
    scalar("weighted_completed", &|r| r.weighted_completed)?;
    scalar("collision_ratio", &|r| r.collision_ratio)?;
    scalar("energy_per_completed", &|r| r.energy_per_completed_task)?;

    let mut w = csv::Writer::from_path(dir.join("per_type_completions.csv"))?;
    w.write_record([
        "scenario",
        "axis",
        "axis_value",
        "policy",
        "task_type",
        "mean",
        "ci_low",
        "ci_high",
    ])?;
    for p in &res.points {
        for (c, e) in p.report.per_type_completions.iter().enumerate() {
            w.write_record([
                scenario.to_string(),
                axis.clone(),
                fmt_opt(p.axis_value),
                p.policy.name().to_string(),
                c.to_string(),
                e.mean.to_string(),
                e.ci_low.to_string(),
                e.ci_high.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("reward_series.csv"))?;
    w.write_record(["axis_value", "policy", "step", "mean_reward_per_mu"])?;
    for p in &res.points {
        for (t, r) in p.report.reward_series.iter().enumerate() {
            w.write_record([
                fmt_opt(p.axis_value),
                p.policy.name().to_string(),
                t.to_string(),
                r.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("training.csv"))?;
    w.write_record([
        "axis_value",
        "policy",
        "seed",
        "episode",
        "total_reward",
        "weighted_completed",
        "policy_loss",
        "value_loss",
        "entropy",
        "approx_kl",
    ])?;
    for (job, r) in jobs.iter().zip(results) {
        for c in &r.curve {
            w.write_record([
                fmt_opt(job.axis_value),
                job.policy.name().to_string(),
                job.seed.to_string(),
                c.episode.to_string(),
                c.total_reward.to_string(),
                c.weighted_completed.to_string(),
                c.policy_loss.to_string(),
                c.value_loss.to_string(),
                c.entropy.to_string(),
                c.approx_kl.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("realizations.jsonl"))?);
    for (job, r) in jobs.iter().zip(results) {
        for (i, m) in r.realizations.iter().enumerate() {
            let line = RealizationLine {
                axis_value: job.axis_value,
                policy: job.policy,
                seed: job.seed,
                realization: i,
                metrics: m.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(res)?)?;
    Ok(())
}

/// Recomputes per-policy reports from a run directory: from the step event
/// logs when present, otherwise from the per-realization lines.
pub fn metrics_from_dir(
    dir: &Path,
    num_types: usize,
    resamples: usize,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut groups: std::collections::BTreeMap<String, Vec<RealizationMetrics>> =
        Default::default();
    let events = dir.join("events");
    if events.is_dir() {
        let mut files: Vec<_> = fs::read_dir(&events)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for path in files {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let group = stem
                .rsplit_once("_seed")
                .map_or(stem.clone(), |(g, _)| g.to_string());
            let mut per_real: std::collections::BTreeMap<usize, Vec<StepRecord>> =
                Default::default();
            for line in BufReader::new(File::open(&path)?).lines() {
                let ev: LogEvent = serde_json::from_str(&line?)?;
                if let (Some(realization), Some(record)) = (ev.realization, ev.record) {
                    per_real.entry(realization).or_default().push(record);
                }
            }
            for records in per_real.values() {
                groups
                    .entry(group.clone())
                    .or_default()
                    .push(realization_metrics(records, num_types)?);
            }
        }
    } else {
        for line in BufReader::new(File::open(dir.join("realizations.jsonl"))?).lines() {
            let l: RealizationLine = serde_json::from_str(&line?)?;
            let group = match l.axis_value {
                Some(v) => format!("{}_{v}", l.policy.name()),
                None => l.policy.name().to_string(),
            };
            groups.entry(group).or_default().push(l.metrics);
        }
    }
    groups
        .into_iter()
        .map(|(g, ms)| Ok((g, summarize(&ms, resamples, 0)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtaCheckRow {
    pub instance: usize,
    pub seed: u64,
    pub ota: f64,
    pub rtps: f64,
    pub motp: f64,
    pub ppo: f64,
}

impl OtaCheckRow {
    pub fn bound_holds(&self) -> bool {
        self.rtps <= self.ota && self.motp <= self.ota && self.ppo <= self.ota
    }
}

/// Solves random tiny instances exactly and replays the causal policies on
/// each (an untrained PPO agent stands in for the learners).
pub fn ota_check(cfg: &ExperimentConfig, instances: usize) -> Result<Vec<OtaCheckRow>> {
    let p = &cfg.params;
    let mut rows = Vec::with_capacity(instances);
    for i in 0..instances {
        let seed = RngStreams::new(cfg.seeds[i % cfg.seeds.len()])
            .derive(OTA_SALT + i as u64)
            .seed();
        let inst =
            OtaInstance::random(p, p.num_mus, p.tasks_per_step, cfg.validation_horizon, seed);
        let ota = ota_solve(&inst)?.objective;
        let eligible = |view: &crate::environment::MuEntity, tasks: &[TaskSpec]| -> Vec<usize> {
            tasks
                .iter()
                .filter(|t| is_eligible(view.state.location, &t.roi))
                .map(|t| t.index)
                .collect()
        };
        let mut rng = RngStreams::new(seed).stream(Process::Policy, 0);
        let rtps = replay_policy(&inst, |_, view, tasks| {
            rtps_policy(&eligible(view, tasks), &view.profile, &mut rng)
        })?;
        let motp = replay_policy(&inst, |_, view, tasks| {
            let el: Vec<&TaskSpec> = tasks
                .iter()
                .filter(|t| is_eligible(view.state.location, &t.roi))
                .collect();
            motp_policy(
                &el,
                &view.profile,
                view.state.avg_channel,
                view.state.battery,
                &inst.params,
            )
            .map(|(n, c, _)| (n, c))
        })?;
        let mut ctrl = Controller::new(
            PolicyKind::Ippo,
            &cfg.agent,
            &cfg.federation,
            p.tasks_per_step,
            RngStreams::new(seed).derive(AGENT_SALT),
            p.num_mus,
        );
        let params = inst.params.clone();
        let ppo = replay_policy(&inst, |_, view, tasks| {
            let agent = ctrl.agents.get_mut(&view.id)?;
            let obs = encode_state(view, tasks, &params);
            let a = agent.act(&obs, ActMode::Sample).ok()?;
            let n = a.task(params.tasks_per_step)?;
            Some((
                n,
                ResourceChoice {
                    compute_rate: a.compute_fraction * view.profile.max_compute_rate,
                    transmit_power: a.power_fraction * view.profile.max_transmit_power,
                },
            ))
        })?;
        rows.push(OtaCheckRow {
            instance: i,
            seed,
            ota,
            rtps,
            motp,
            ppo,
        });
    }
    Ok(rows)
}

/// Mean reward per active MU over steps `[from, to)`.
pub fn window_mean(series: &[f64], from: usize, to: usize) -> f64 {
    let w = &series[from.min(series.len())..to.min(series.len())];
    if w.is_empty() {
        return f64::NAN;
    }
    w.iter().sum::<f64>() / w.len() as f64
}

pub fn check_error_is_constraint(e: &Error) -> bool {
    matches!(e, Error::Constraint { .. })
}
