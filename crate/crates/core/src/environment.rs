//! The world's stochastic processes: task publication, mobility, fading,
//! energy harvesting and sensing noise.
//!
//! Every process draws from its own deterministic stream, keyed by
//! `(master seed, process, entity)`. Adding or removing an MU, or switching
//! a process off, never shifts the draws another stream sees.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Deserialize;

use crate::error::{DatasetError, ModelError};
use crate::model::{
    battery_update, compute_budget, compute_difficulty, Cell, MuProfile, MuState, Region,
    ScenarioParams, SensingDraw, TaskSpec,
};

pub type StreamRng = ChaCha8Rng;

/// Named random processes. The discriminant is part of the stream id, so
/// never reorder these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Process {
    Tasks = 1,
    Mobility = 2,
    Channel = 3,
    Harvest = 4,
    Sensing = 5,
    Placement = 6,
    Profile = 7,
    Policy = 8,
    Init = 9,
    Churn = 10,
    Dataset = 11,
}

/// Factory for counter-based per-entity streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, process: Process, entity: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((process as u64) << 48) ^ entity);
        rng
    }

    /// A child factory, e.g. one per training episode.
    pub fn derive(&self, salt: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Publishes `tasks_per_step` synthetic tasks for step `t`.
pub fn generate_tasks<R: Rng + ?Sized>(
    t: usize,
    params: &ScenarioParams,
    rng: &mut R,
) -> Vec<TaskSpec> {
    (0..params.tasks_per_step)
        .map(|n| generate_task(t, n, params, rng))
        .collect()
}

fn generate_task<R: Rng + ?Sized>(
    t: usize,
    n: usize,
    params: &ScenarioParams,
    rng: &mut R,
) -> TaskSpec {
    let task_type = rng.random_range(0..params.num_types);
    let (lo, hi) = params.type_size_band(task_type);
    let result_size = uniform(rng, lo, hi).max(f64::MIN_POSITIVE);
    let raw_size = result_size * uniform(rng, params.raw_ratio_range.0, params.raw_ratio_range.1);
    let deadline = draw_deadline(params, rng);
    let complexity = uniform(rng, params.complexity_range.0, params.complexity_range.1);
    let roi = if rng.random::<f64>() < params.whole_area_prob {
        Region::WholeArea
    } else {
        random_rect(params, rng)
    };
    let difficulty = compute_difficulty(result_size, deadline, params, params.max_result_size())
        .expect("generated sizes and deadlines lie inside their ranges");
    TaskSpec {
        index: n,
        step: t,
        result_size,
        raw_size,
        deadline,
        roi,
        task_type,
        complexity,
        difficulty,
        budget: compute_budget(difficulty, params.budget_coeff),
    }
}

fn draw_deadline<R: Rng + ?Sized>(params: &ScenarioParams, rng: &mut R) -> f64 {
    let (lo, hi) = params.deadline_fraction_range;
    params.step_duration * uniform(rng, lo, hi)
}

/// Uniform on `[lo, hi]`, degenerate when `lo == hi`.
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

fn random_rect<R: Rng + ?Sized>(params: &ScenarioParams, rng: &mut R) -> Region {
    let side = params.grid_side;
    let total = f64::from(side) * f64::from(side);
    let fraction = uniform(
        rng,
        params.roi_fraction_range.0,
        params.roi_fraction_range.1,
    );
    let aspect = uniform(rng, 0.5, 2.0);
    let cells = fraction * total;
    let w = ((cells * aspect).sqrt().round() as u32).clamp(1, side);
    let h = ((cells / f64::from(w)).round() as u32).clamp(1, side);
    let i_min = rng.random_range(0..=side - w);
    let j_min = rng.random_range(0..=side - h);
    Region::Rect {
        i_min,
        j_min,
        i_max: i_min + w - 1,
        j_max: j_min + h - 1,
    }
}

pub fn cell_of(position: (f64, f64), params: &ScenarioParams) -> Cell {
    let size = params.cell_size_m();
    let max = params.grid_side - 1;
    let to_idx = |v: f64| ((v / size).floor().max(0.0) as u32).min(max);
    Cell::new(to_idx(position.0), to_idx(position.1))
}

/// Distance to the platform at the area center, clipped to the modeled range.
pub fn distance_to_mcsp(position: (f64, f64), params: &ScenarioParams) -> f64 {
    let c = params.area_side_m / 2.0;
    let d = (position.0 - c).hypot(position.1 - c);
    d.clamp(params.min_distance_m, params.max_distance_m)
}

fn random_point<R: Rng + ?Sized>(params: &ScenarioParams, rng: &mut R) -> (f64, f64) {
    let a = params.area_side_m;
    (a * rng.random::<f64>(), a * rng.random::<f64>())
}

fn reflect(v: f64, limit: f64) -> f64 {
    let mut v = v;
    // A single step is far shorter than the area, so two passes suffice.
    for _ in 0..2 {
        if v < 0.0 {
            v = -v;
        }
        if v > limit {
            v = 2.0 * limit - v;
        }
    }
    v.clamp(0.0, limit)
}

/// Random-waypoint move: travel toward the waypoint at a speed drawn from
/// `[0, max_speed]`, picking a fresh waypoint on arrival.
pub fn step_mobility<R: Rng + ?Sized>(
    state: &MuState,
    params: &ScenarioParams,
    rng: &mut R,
) -> MuState {
    let mut next = state.clone();
    let speed = params.max_speed_mps * rng.random::<f64>();
    let mut budget = speed * params.step_duration;
    let limit = params.area_side_m;
    let (mut x, mut y) = state.position;
    let mut waypoint = state.waypoint;
    while budget > 0.0 {
        let (dx, dy) = (waypoint.0 - x, waypoint.1 - y);
        let dist = dx.hypot(dy);
        if dist <= budget {
            x = waypoint.0;
            y = waypoint.1;
            budget -= dist;
            waypoint = random_point(params, rng);
            if dist == 0.0 {
                break;
            }
        } else {
            x += dx / dist * budget;
            y += dy / dist * budget;
            budget = 0.0;
        }
    }
    next.position = (reflect(x, limit), reflect(y, limit));
    next.waypoint = waypoint;
    next.location = cell_of(next.position, params);
    next
}

/// Rayleigh block fading over distance path loss: `|h|² = d^-α · X`,
/// `X ~ Exp(1)`. The draw is appended to the MU's history.
pub fn sample_channel<R: Rng + ?Sized>(
    mu: &mut MuState,
    distance: f64,
    params: &ScenarioParams,
    rng: &mut R,
) -> f64 {
    let gain = draw_gain(distance, params, rng);
    mu.record_channel(gain, params.channel_window);
    gain
}

pub fn draw_gain<R: Rng + ?Sized>(distance: f64, params: &ScenarioParams, rng: &mut R) -> f64 {
    let fading: f64 = Exp1.sample(rng);
    distance.powf(-params.pathloss_exponent) * fading
}

/// Mean path gain at a distance, used before any channel has been observed.
pub fn mean_gain(distance: f64, params: &ScenarioParams) -> f64 {
    distance.powf(-params.pathloss_exponent)
}

pub fn harvest_energy<R: Rng + ?Sized>(params: &ScenarioParams, rng: &mut R) -> f64 {
    params.max_harvest_fraction * params.battery_capacity * rng.random::<f64>()
}

/// Normal around `mean` with relative spread `rel_std`, truncated to
/// `±3σ` and to nonnegative values.
fn truncated_normal<R: Rng + ?Sized>(mean: f64, rel_std: f64, rng: &mut R) -> f64 {
    let sigma = mean * rel_std;
    if sigma == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            let v = mean + sigma * z;
            if v >= 0.0 {
                return v;
            }
        }
    }
}

pub fn draw_sensing<R: Rng + ?Sized>(
    profile: &MuProfile,
    params: &ScenarioParams,
    rng: &mut R,
) -> SensingDraw {
    SensingDraw {
        time: truncated_normal(profile.mean_sensing_time, params.sensing_rel_std, rng),
        power: truncated_normal(profile.mean_sensing_power, params.sensing_rel_std, rng),
    }
}

/// One MU's per-process streams.
#[derive(Debug, Clone)]
pub struct MuStreams {
    pub mobility: StreamRng,
    pub channel: StreamRng,
    pub harvest: StreamRng,
    pub sensing: StreamRng,
}

/// An MU as the world sees it.
#[derive(Debug, Clone)]
pub struct MuEntity {
    pub id: usize,
    pub profile: MuProfile,
    pub state: MuState,
    pub active: bool,
    streams: MuStreams,
    /// Realized gain and sensing draw of the current step.
    pub step_gain: f64,
    pub step_sensing: SensingDraw,
}

impl MuEntity {
    /// An MU outside any world, e.g. for replaying a fixed instance. Its
    /// streams are placeholders and are never drawn from.
    pub fn detached(id: usize, profile: MuProfile, state: MuState) -> Self {
        let s = RngStreams::new(0);
        let streams = MuStreams {
            mobility: s.stream(Process::Mobility, id as u64),
            channel: s.stream(Process::Channel, id as u64),
            harvest: s.stream(Process::Harvest, id as u64),
            sensing: s.stream(Process::Sensing, id as u64),
        };
        Self {
            id,
            profile,
            state,
            active: true,
            streams,
            step_gain: 0.0,
            step_sensing: SensingDraw {
                time: 0.0,
                power: 0.0,
            },
        }
    }

    /// Channel estimate available to the MU itself: the history mean, or the
    /// path-loss mean before anything was observed.
    pub fn planning_gain(&self, params: &ScenarioParams) -> f64 {
        if self.state.channel_history.is_empty() {
            mean_gain(distance_to_mcsp(self.state.position, params), params)
        } else {
            self.state.avg_channel
        }
    }
}

#[derive(Debug, Clone)]
enum TaskSource {
    Synthetic(StreamRng),
    Dataset { tasks: Vec<TaskSpec>, cursor: usize },
}

/// End-of-step energy bookkeeping for one MU.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnergyLedger {
    pub mu: usize,
    pub battery_before: f64,
    pub spent: f64,
    pub harvested: f64,
    pub overflow: f64,
    pub battery_after: f64,
}

/// Complete world state of one simulation instance.
#[derive(Debug, Clone)]
pub struct World {
    pub params: ScenarioParams,
    pub step: usize,
    pub tasks: Vec<TaskSpec>,
    pub mus: Vec<MuEntity>,
    streams: RngStreams,
    source: TaskSource,
}

impl World {
    pub fn new(params: ScenarioParams, streams: RngStreams) -> Result<Self, ModelError> {
        params.validate()?;
        let source = TaskSource::Synthetic(streams.stream(Process::Tasks, 0));
        let mut world = Self {
            params,
            step: 0,
            tasks: Vec::new(),
            mus: Vec::new(),
            streams,
            source,
        };
        for _ in 0..world.params.num_mus {
            world.add_mu();
        }
        Ok(world)
    }

    /// Replaces synthetic generation with a fixed arrival-ordered stream.
    /// Each step publishes the next `tasks_per_step` tasks, wrapping around.
    pub fn with_dataset(mut self, tasks: Vec<TaskSpec>) -> Self {
        self.source = TaskSource::Dataset { tasks, cursor: 0 };
        self
    }

    pub fn streams(&self) -> RngStreams {
        self.streams
    }

    /// Adds a fresh MU with the next free id and returns that id.
    pub fn add_mu(&mut self) -> usize {
        let id = self.mus.len();
        let p = &self.params;
        let mut profile_rng = self.streams.stream(Process::Profile, id as u64);
        let f_max = uniform(
            &mut profile_rng,
            p.compute_rate_range.0,
            p.compute_rate_range.1,
        );
        let profile = p.profile(id, f_max);
        let mut placement = self.streams.stream(Process::Placement, id as u64);
        let position = random_point(p, &mut placement);
        let waypoint = random_point(p, &mut placement);
        let state = MuState {
            battery: p.battery_capacity * p.initial_battery_fraction,
            position,
            location: cell_of(position, p),
            waypoint,
            channel_history: Vec::new(),
            avg_channel: 0.0,
        };
        let streams = MuStreams {
            mobility: self.streams.stream(Process::Mobility, id as u64),
            channel: self.streams.stream(Process::Channel, id as u64),
            harvest: self.streams.stream(Process::Harvest, id as u64),
            sensing: self.streams.stream(Process::Sensing, id as u64),
        };
        self.mus.push(MuEntity {
            id,
            profile,
            state,
            active: true,
            streams,
            step_gain: 0.0,
            step_sensing: SensingDraw {
                time: 0.0,
                power: 0.0,
            },
        });
        id
    }

    pub fn drop_mu(&mut self, id: usize) {
        if let Some(mu) = self.mus.get_mut(id) {
            mu.active = false;
        }
    }

    pub fn active_ids(&self) -> Vec<usize> {
        self.mus.iter().filter(|m| m.active).map(|m| m.id).collect()
    }

    /// Publishes this step's tasks and realizes every active MU's channel
    /// and sensing draw. Nothing is recorded into channel histories yet;
    /// the MU only learns the realized gain once the step is over.
    pub fn begin_step(&mut self) {
        let t = self.step;
        self.tasks = match &mut self.source {
            TaskSource::Synthetic(rng) => generate_tasks(t, &self.params, rng),
            TaskSource::Dataset { tasks, cursor } => {
                let mut out = Vec::with_capacity(self.params.tasks_per_step);
                if !tasks.is_empty() {
                    for n in 0..self.params.tasks_per_step {
                        let mut task = tasks[*cursor % tasks.len()].clone();
                        task.index = n;
                        task.step = t;
                        out.push(task);
                        *cursor += 1;
                    }
                }
                out
            }
        };
        let params = &self.params;
        for mu in self.mus.iter_mut().filter(|m| m.active) {
            let d = distance_to_mcsp(mu.state.position, params);
            mu.step_gain = draw_gain(d, params, &mut mu.streams.channel);
            mu.step_sensing = draw_sensing(&mu.profile, params, &mut mu.streams.sensing);
        }
    }

    /// Debits `spent[k]`, credits harvest, records the step's channel and
    /// moves every active MU. `spent` is indexed by MU id.
    pub fn end_step(&mut self, spent: &[f64]) -> Result<Vec<EnergyLedger>, ModelError> {
        let params = &self.params;
        let mut ledgers = Vec::new();
        for mu in self.mus.iter_mut().filter(|m| m.active) {
            let e = spent.get(mu.id).copied().unwrap_or(0.0);
            let harvested = harvest_energy(params, &mut mu.streams.harvest);
            let before = mu.state.battery;
            let after = battery_update(before, e, harvested, mu.profile.battery_capacity)?;
            ledgers.push(EnergyLedger {
                mu: mu.id,
                battery_before: before,
                spent: e,
                harvested,
                overflow: (before - e + harvested) - after,
                battery_after: after,
            });
            mu.state.battery = after;
            mu.state.record_channel(mu.step_gain, params.channel_window);
            mu.state = step_mobility(&mu.state, params, &mut mu.streams.mobility);
        }
        self.step += 1;
        Ok(ledgers)
    }
}

/// One row of the task dataset CSV
/// (`external_id,x_m,y_m,reward,type_label[,deadline_s]`).
#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
pub struct DatasetTask {
    pub external_id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub reward: f64,
    pub type_label: String,
    #[serde(default)]
    pub deadline_s: Option<f64>,
}

pub fn parse_dataset<R: Read>(reader: R) -> Result<Vec<DatasetTask>, DatasetError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| DatasetError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["external_id", "x_m", "y_m", "reward", "type_label"];
    if headers.len() < expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(DatasetError::Parse {
            line: 1,
            message: format!("header must start with {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| DatasetError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: DatasetTask =
            record
                .deserialize(Some(&headers))
                .map_err(|e| DatasetError::Parse {
                    line,
                    message: e.to_string(),
                })?;
        if !(row.reward >= 0.0 && row.reward.is_finite()) {
            return Err(DatasetError::Parse {
                line,
                message: format!("reward must be nonnegative, got {}", row.reward),
            });
        }
        if !(row.x_m.is_finite() && row.y_m.is_finite()) {
            return Err(DatasetError::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        if let Some(d) = row.deadline_s {
            if !(d > 0.0) {
                return Err(DatasetError::Parse {
                    line,
                    message: format!("deadline must be positive, got {d}"),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(rows)
}

/// Quantile bucket of each row by reward: rows sorted by reward (stable, so
/// ties keep file order) and cut into `bucket_count` equal-population groups.
pub fn reward_buckets(rows: &[DatasetTask], bucket_count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].reward.total_cmp(&rows[b].reward));
    let mut buckets = vec![0; rows.len()];
    for (rank, &row) in order.iter().enumerate() {
        buckets[row] = rank * bucket_count / rows.len();
    }
    buckets
}

/// Converts dataset rows into arrival-ordered tasks. The reward becomes the
/// budget; sizes are drawn from the bucket's size band.
pub fn dataset_to_tasks(
    rows: &[DatasetTask],
    bucket_count: usize,
    params: &ScenarioParams,
    rng: &mut StreamRng,
) -> Vec<TaskSpec> {
    let buckets = reward_buckets(rows, bucket_count.max(1));
    let (x_min, x_max) = min_max(rows.iter().map(|r| r.x_m));
    let (y_min, y_max) = min_max(rows.iter().map(|r| r.y_m));
    let max_idx = f64::from(params.grid_side - 1);
    let map = |v: f64, lo: f64, hi: f64| -> u32 {
        if hi > lo {
            ((v - lo) / (hi - lo) * max_idx).round() as u32
        } else {
            (max_idx / 2.0).round() as u32
        }
    };
    let r = params.dataset_roi_radius;
    rows.iter()
        .zip(&buckets)
        .enumerate()
        .map(|(pos, (row, &bucket))| {
            // Buckets are mapped onto the scenario's type bands.
            let task_type = bucket * params.num_types / bucket_count.max(1);
            let (lo, hi) = params.type_size_band(task_type.min(params.num_types - 1));
            let result_size = uniform(rng, lo, hi);
            let raw_size =
                result_size * uniform(rng, params.raw_ratio_range.0, params.raw_ratio_range.1);
            let complexity = uniform(rng, params.complexity_range.0, params.complexity_range.1);
            let drawn = draw_deadline(params, rng);
            let deadline = row
                .deadline_s
                .map_or(drawn, |d| d.min(params.step_duration));
            let (ci, cj) = (map(row.x_m, x_min, x_max), map(row.y_m, y_min, y_max));
            let roi = Region::Rect {
                i_min: ci.saturating_sub(r),
                j_min: cj.saturating_sub(r),
                i_max: (ci + r).min(params.grid_side - 1),
                j_max: (cj + r).min(params.grid_side - 1),
            };
            TaskSpec {
                index: pos,
                step: 0,
                result_size,
                raw_size,
                deadline,
                roi,
                task_type,
                complexity,
                difficulty: row.reward / params.budget_coeff,
                budget: row.reward,
            }
        })
        .collect()
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

pub fn load_dataset_tasks(
    path: &Path,
    bucket_count: usize,
    params: &ScenarioParams,
    streams: RngStreams,
) -> Result<Vec<TaskSpec>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let rows = parse_dataset(file)?;
    let mut rng = streams.stream(Process::Dataset, 0);
    Ok(dataset_to_tasks(&rows, bucket_count, params, &mut rng))
}

/// Synthetic stand-in for the proprietary task dataset: clustered
/// locations, a heavy-tailed reward distribution and bursty arrivals (runs
/// of tasks from the same cluster).
pub fn synthesize_dataset(count: usize, seed: u64) -> Vec<DatasetTask> {
    let mut rng = RngStreams::new(seed).stream(Process::Dataset, 1);
    let centers: Vec<(f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..5000.0), rng.random_range(0.0..5000.0)))
        .collect();
    let mut out = Vec::with_capacity(count);
    let mut cluster = 0;
    for i in 0..count {
        if rng.random::<f64>() < 0.2 {
            cluster = rng.random_range(0..centers.len());
        }
        let (cx, cy) = centers[cluster];
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let ln: f64 = StandardNormal.sample(&mut rng);
        let reward = (1.5 + 0.6 * ln).exp();
        let label = ["survey", "photo", "noise", "temperature", "traffic"][rng.random_range(0..5)];
        let deadline_s = if rng.random::<f64>() < 0.3 {
            Some(rng.random_range(5.0..10.0))
        } else {
            None
        };
        out.push(DatasetTask {
            external_id: format!("t{i:06}"),
            x_m: cx + 300.0 * nx,
            y_m: cy + 300.0 * ny,
            reward: (reward * 100.0).round() / 100.0,
            type_label: label.to_string(),
            deadline_s,
        });
    }
    out
}

pub fn write_dataset<W: std::io::Write>(rows: &[DatasetTask], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "external_id",
        "x_m",
        "y_m",
        "reward",
        "type_label",
        "deadline_s",
    ])?;
    for r in rows {
        w.write_record([
            r.external_id.clone(),
            r.x_m.to_string(),
            r.y_m.to_string(),
            r.reward.to_string(),
            r.type_label.clone(),
            r.deadline_s.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MBIT;

    fn params() -> ScenarioParams {
        ScenarioParams::default()
    }

    #[test]
    fn generates_n_tasks_in_range() {
        let p = params();
        let mut rng = RngStreams::new(3).stream(Process::Tasks, 0);
        let tasks = generate_tasks(7, &p, &mut rng);
        assert_eq!(tasks.len(), 5);
        for (n, t) in tasks.iter().enumerate() {
            assert_eq!(t.index, n);
            assert_eq!(t.step, 7);
            assert!(t.result_size >= 1.0 * MBIT && t.result_size <= 8.0 * MBIT);
            assert!(t.raw_size > t.result_size);
            assert!(t.deadline >= 5.0 && t.deadline <= 10.0);
            assert!(t.complexity >= 200.0 && t.complexity <= 300.0);
            assert!(t.task_type < 10);
        }
    }

    #[test]
    fn whole_area_when_forced() {
        let mut p = params();
        p.whole_area_prob = 1.0;
        let mut rng = RngStreams::new(1).stream(Process::Tasks, 0);
        for t in 0..50 {
            assert!(generate_tasks(t, &p, &mut rng)
                .iter()
                .all(|t| t.roi == Region::WholeArea));
        }
    }

    #[test]
    fn task_generation_is_seeded() {
        let p = params();
        let a = generate_tasks(0, &p, &mut RngStreams::new(42).stream(Process::Tasks, 0));
        let b = generate_tasks(0, &p, &mut RngStreams::new(42).stream(Process::Tasks, 0));
        let c = generate_tasks(0, &p, &mut RngStreams::new(43).stream(Process::Tasks, 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rect_roi_fraction_in_range() {
        let mut p = params();
        p.whole_area_prob = 0.0;
        let mut rng = RngStreams::new(9).stream(Process::Tasks, 0);
        for t in 0..200 {
            for task in generate_tasks(t, &p, &mut rng) {
                let frac = task.roi.cell_count(p.grid_side) as f64 / 10_000.0;
                // Rounding to whole cells moves the fraction a little.
                assert!(frac > 0.04 && frac < 0.27, "fraction {frac}");
            }
        }
    }

    fn state_at(p: &ScenarioParams, pos: (f64, f64), wp: (f64, f64)) -> MuState {
        MuState {
            battery: 8.0,
            position: pos,
            location: cell_of(pos, p),
            waypoint: wp,
            channel_history: vec![],
            avg_channel: 0.0,
        }
    }

    #[test]
    fn mobility_respects_speed() {
        let p = params();
        let mut rng = RngStreams::new(5).stream(Process::Mobility, 0);
        let mut s = state_at(&p, (1000.0, 1000.0), (1001.0, 1000.0));
        for _ in 0..5000 {
            let next = step_mobility(&s, &p, &mut rng);
            let d = (next.position.0 - s.position.0).hypot(next.position.1 - s.position.1);
            assert!(d <= 27.78 + 1e-9, "moved {d}");
            assert!(next.position.0 >= 0.0 && next.position.0 <= 2000.0);
            assert_eq!(next.location, cell_of(next.position, &p));
            s = next;
        }
    }

    #[test]
    fn zero_speed_stays_put() {
        let mut p = params();
        p.max_speed_mps = 0.0;
        let mut rng = RngStreams::new(5).stream(Process::Mobility, 0);
        let s = state_at(&p, (300.0, 700.0), (900.0, 900.0));
        let next = step_mobility(&s, &p, &mut rng);
        assert_eq!(next.position, s.position);
        assert_eq!(next.location, s.location);
    }

    #[test]
    fn channel_mean_follows_path_loss() {
        let p = params();
        let mut rng = RngStreams::new(11).stream(Process::Channel, 0);
        let n = 100_000;
        let mean_near: f64 = (0..n).map(|_| draw_gain(100.0, &p, &mut rng)).sum::<f64>() / n as f64;
        let mean_far: f64 = (0..n).map(|_| draw_gain(1000.0, &p, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean_near / 1e-6 - 1.0).abs() < 0.03);
        assert!((mean_far / 1e-9 - 1.0).abs() < 0.03);
        assert!((mean_near / mean_far / 1e3 - 1.0).abs() < 0.05);
        assert!((mean_gain(100.0, &p) / mean_gain(1000.0, &p) - 1e3).abs() < 1e-6);
    }

    #[test]
    fn channel_sampling_updates_history() {
        let p = params();
        let mut rng = RngStreams::new(2).stream(Process::Channel, 0);
        let mut s = state_at(&p, (0.0, 0.0), (0.0, 0.0));
        for _ in 0..25 {
            sample_channel(&mut s, 500.0, &p, &mut rng);
        }
        assert_eq!(s.channel_history.len(), 20);
        let mean = s.channel_history.iter().sum::<f64>() / 20.0;
        assert_eq!(s.avg_channel, mean);
    }

    #[test]
    fn harvest_range_and_mean() {
        let p = params();
        let mut rng = RngStreams::new(8).stream(Process::Harvest, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let e = harvest_energy(&p, &mut rng);
            assert!((0.0..=0.8).contains(&e));
            sum += e;
        }
        assert!((sum / n as f64 / 0.4 - 1.0).abs() < 0.02);
    }

    #[test]
    fn sensing_draws_truncated() {
        let p = params();
        let profile = p.profile(0, 3e8);
        let mut rng = RngStreams::new(4).stream(Process::Sensing, 0);
        for _ in 0..10_000 {
            let d = draw_sensing(&profile, &p, &mut rng);
            assert!(d.time >= 0.35 - 1e-12 && d.time <= 0.65 + 1e-12);
            assert!(d.power >= 0.07 - 1e-12 && d.power <= 0.13 + 1e-12);
        }
    }

    #[test]
    fn streams_are_independent_of_population() {
        let p = params();
        let streams = RngStreams::new(77);
        let mut small = World::new(
            ScenarioParams {
                num_mus: 2,
                ..p.clone()
            },
            streams,
        )
        .unwrap();
        let mut large = World::new(ScenarioParams { num_mus: 5, ..p }, streams).unwrap();
        for _ in 0..10 {
            small.begin_step();
            large.begin_step();
            assert_eq!(small.tasks, large.tasks);
            for k in 0..2 {
                assert_eq!(small.mus[k].step_gain, large.mus[k].step_gain);
                assert_eq!(small.mus[k].step_sensing, large.mus[k].step_sensing);
            }
            small.end_step(&[]).unwrap();
            large.end_step(&[]).unwrap();
            for k in 0..2 {
                assert_eq!(small.mus[k].state, large.mus[k].state);
            }
        }
    }

    #[test]
    fn harvest_not_spendable_same_step() {
        let mut p = params();
        p.initial_battery_fraction = 0.0;
        let mut w = World::new(p, RngStreams::new(1)).unwrap();
        w.begin_step();
        // Nothing stored yet, so any positive spend is a causality violation
        // even though this step's harvest is positive.
        assert!(w.clone().end_step(&[0.01]).is_err());
        let ledgers = w.end_step(&[0.0]).unwrap();
        assert_eq!(ledgers[0].battery_before, 0.0);
        assert_eq!(ledgers[0].battery_after, ledgers[0].harvested);
    }

    #[test]
    fn dataset_equal_rewards_one_per_bucket() {
        let rows: Vec<DatasetTask> = (0..10)
            .map(|i| DatasetTask {
                external_id: format!("r{i}"),
                x_m: i as f64,
                y_m: 0.0,
                reward: 5.0,
                type_label: "x".into(),
                deadline_s: None,
            })
            .collect();
        assert_eq!(reward_buckets(&rows, 10), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_monotone_rewards_bucket_means_increase() {
        let rows: Vec<DatasetTask> = (1..=100)
            .rev()
            .map(|i| DatasetTask {
                external_id: format!("r{i}"),
                x_m: 0.0,
                y_m: 0.0,
                reward: i as f64,
                type_label: "x".into(),
                deadline_s: Some(7.0),
            })
            .collect();
        let buckets = reward_buckets(&rows, 10);
        let mut sums = [0.0; 10];
        let mut counts = [0usize; 10];
        for (r, &b) in rows.iter().zip(&buckets) {
            sums[b] += r.reward;
            counts[b] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        for b in 1..10 {
            assert!(sums[b] / counts[b] as f64 > sums[b - 1] / counts[b - 1] as f64);
        }
        let p = params();
        let tasks = dataset_to_tasks(
            &rows,
            10,
            &p,
            &mut RngStreams::new(1).stream(Process::Dataset, 0),
        );
        // Arrival order preserved, reward carried into the budget.
        assert_eq!(tasks[0].budget, 100.0);
        assert_eq!(tasks[99].budget, 1.0);
        assert!(tasks.iter().all(|t| t.deadline == 7.0));
        assert!((tasks[0].difficulty * p.budget_coeff - tasks[0].budget).abs() < 1e-12);
    }

    #[test]
    fn dataset_parse_errors() {
        let bad = "external_id,x_m,y_m,reward,type_label\na,1,2,3,x\nb,1,oops,3,x\n";
        match parse_dataset(bad.as_bytes()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_dataset("external_id,x_m,y_m,reward,type_label\n".as_bytes()),
            Err(DatasetError::Empty)
        ));
        assert!(parse_dataset("id,x,y\n1,2,3\n".as_bytes()).is_err());
        let neg = "external_id,x_m,y_m,reward,type_label\na,1,2,-3,x\n";
        assert!(matches!(
            parse_dataset(neg.as_bytes()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn synthetic_dataset_round_trips() {
        let rows = synthesize_dataset(50, 3);
        let mut buf = Vec::new();
        write_dataset(&rows, &mut buf).unwrap();
        let parsed = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 50);
        assert_eq!(parsed[7].external_id, rows[7].external_id);
        assert_eq!(parsed[7].deadline_s, rows[7].deadline_s);
    }
}
