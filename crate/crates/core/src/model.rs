//! Domain types and the closed-form physics of task execution.
//!
//! Everything in here is pure: no randomness, no shared state. The
//! stochastic processes that feed these functions live in
//! [`crate::environment`].

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Bits per megabit, used by the defaults below.
pub const MBIT: f64 = 1.0e6;

/// A cell of the square target-area grid, `(i, j)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub i: u32,
    pub j: u32,
}

impl Cell {
    pub fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }
}

/// Region of interest of a task. Rectangles are closed: both corner cells
/// and every boundary cell are inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    WholeArea,
    Rect {
        i_min: u32,
        j_min: u32,
        i_max: u32,
        j_max: u32,
    },
}

impl Region {
    pub fn contains(&self, cell: Cell) -> bool {
        match *self {
            Region::WholeArea => true,
            Region::Rect {
                i_min,
                j_min,
                i_max,
                j_max,
            } => (i_min..=i_max).contains(&cell.i) && (j_min..=j_max).contains(&cell.j),
        }
    }

    /// Number of grid cells covered, given the grid side length.
    pub fn cell_count(&self, grid_side: u32) -> u64 {
        match *self {
            Region::WholeArea => u64::from(grid_side) * u64::from(grid_side),
            Region::Rect {
                i_min,
                j_min,
                i_max,
                j_max,
            } => u64::from(i_max - i_min + 1) * u64::from(j_max - j_min + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskType {
    pub id: usize,
    /// Mean sensing-result size in bits.
    pub mean_result_size: f64,
    pub label: String,
}

/// One published sensing task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub step: usize,
    /// Size of the processed result `M`, bits.
    pub result_size: f64,
    /// Size of the raw sensed data `M̄`, bits.
    pub raw_size: f64,
    /// Deadline, seconds.
    pub deadline: f64,
    pub roi: Region,
    pub task_type: usize,
    /// Processing complexity, CPU cycles per raw bit.
    pub complexity: f64,
    pub difficulty: f64,
    pub budget: f64,
}

impl TaskSpec {
    /// CPU cycles needed to turn the raw data into the result.
    pub fn workload_cycles(&self) -> f64 {
        self.raw_size * self.complexity
    }
}

/// Static characteristics of one mobile unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuProfile {
    pub index: usize,
    pub battery_capacity: f64,
    pub mean_sensing_time: f64,
    pub mean_sensing_power: f64,
    pub max_transmit_power: f64,
    pub max_compute_rate: f64,
    /// Energy per cycle is `compute_energy_coeff * f²`.
    pub compute_energy_coeff: f64,
}

impl MuProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("battery_capacity", self.battery_capacity),
            ("mean_sensing_time", self.mean_sensing_time),
            ("mean_sensing_power", self.mean_sensing_power),
            ("max_transmit_power", self.max_transmit_power),
            ("max_compute_rate", self.max_compute_rate),
            ("compute_energy_coeff", self.compute_energy_coeff),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Domain(format!(
                    "profile.{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable per-MU state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuState {
    pub battery: f64,
    /// Continuous position in meters; the grid cell is derived from it.
    pub position: (f64, f64),
    pub location: Cell,
    pub waypoint: (f64, f64),
    pub channel_history: Vec<f64>,
    /// Arithmetic mean of `channel_history`; 0 while the history is empty.
    pub avg_channel: f64,
}

impl MuState {
    /// Appends a gain observation, evicting the oldest beyond `window`, and
    /// refreshes the running mean.
    pub fn record_channel(&mut self, gain: f64, window: usize) {
        self.channel_history.push(gain);
        if self.channel_history.len() > window {
            let excess = self.channel_history.len() - window;
            self.channel_history.drain(..excess);
        }
        self.avg_channel =
            self.channel_history.iter().sum::<f64>() / self.channel_history.len() as f64;
    }
}

/// An MU's execution plan: CPU rate and transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceChoice {
    pub compute_rate: f64,
    pub transmit_power: f64,
}

impl ResourceChoice {
    /// Builds a choice, rejecting anything outside `(0, f_max] × [0, p_max]`.
    pub fn new(
        compute_rate: f64,
        transmit_power: f64,
        profile: &MuProfile,
    ) -> Result<Self, ModelError> {
        if !(compute_rate > 0.0 && compute_rate <= profile.max_compute_rate) {
            return Err(ModelError::InvalidChoice(format!(
                "compute rate {compute_rate} outside (0, {}]",
                profile.max_compute_rate
            )));
        }
        if !(transmit_power >= 0.0 && transmit_power <= profile.max_transmit_power) {
            return Err(ModelError::InvalidChoice(format!(
                "transmit power {transmit_power} outside [0, {}]",
                profile.max_transmit_power
            )));
        }
        Ok(Self {
            compute_rate,
            transmit_power,
        })
    }
}

/// Per-phase energies (J) and durations (s) of one task attempt.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EffortBreakdown {
    pub e_proposal: f64,
    pub e_sense: f64,
    pub e_compute: f64,
    pub e_transmit: f64,
    pub t_sense: f64,
    pub t_compute: f64,
    pub t_transmit: f64,
}

impl EffortBreakdown {
    pub fn total_energy(&self) -> f64 {
        self.e_proposal + self.e_sense + self.e_compute + self.e_transmit
    }

    pub fn total_time(&self) -> f64 {
        self.t_sense + self.t_compute + self.t_transmit
    }

    /// Breakdown of a proposal that was never executed.
    pub fn proposal_only(e_proposal: f64) -> Self {
        Self {
            e_proposal,
            ..Self::default()
        }
    }
}

/// Realized sensing time and power for one attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingDraw {
    pub time: f64,
    pub power: f64,
}

/// Scenario-wide physical and economic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub horizon: usize,
    pub step_duration: f64,
    pub num_mus: usize,
    pub tasks_per_step: usize,
    pub num_types: usize,
    pub bandwidth: f64,
    pub noise_power: f64,
    pub pathloss_exponent: f64,
    pub size_weight: f64,
    pub deadline_weight: f64,
    pub budget_coeff: f64,
    pub payment_coeff: f64,
    pub max_harvest_fraction: f64,
    pub grid_side: u32,
    pub area_side_m: f64,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub proposal_bits: f64,
    pub battery_capacity: f64,
    pub initial_battery_fraction: f64,
    pub max_transmit_power: f64,
    pub compute_rate_range: (f64, f64),
    pub compute_energy_coeff: f64,
    pub mean_sensing_time: f64,
    pub mean_sensing_power: f64,
    pub sensing_rel_std: f64,
    pub result_size_range: (f64, f64),
    /// Raw-data size as a multiple of the result size.
    pub raw_ratio_range: (f64, f64),
    pub deadline_fraction_range: (f64, f64),
    pub complexity_range: (f64, f64),
    pub whole_area_prob: f64,
    pub roi_fraction_range: (f64, f64),
    pub max_speed_mps: f64,
    pub channel_window: usize,
    /// Half-width, in cells, of the square RoI placed around a dataset task.
    pub dataset_roi_radius: u32,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            horizon: 1000,
            step_duration: 10.0,
            num_mus: 5,
            tasks_per_step: 5,
            num_types: 10,
            bandwidth: 1.0e6,
            noise_power: 1.0e-16,
            pathloss_exponent: 3.0,
            size_weight: 1.0,
            deadline_weight: 1.0,
            budget_coeff: 10.0,
            payment_coeff: 5.0,
            max_harvest_fraction: 0.1,
            grid_side: 100,
            area_side_m: 2000.0,
            min_distance_m: 100.0,
            max_distance_m: 1000.0,
            proposal_bits: 1000.0,
            battery_capacity: 8.0,
            initial_battery_fraction: 1.0,
            max_transmit_power: 0.2,
            compute_rate_range: (2.0e8, 4.0e8),
            compute_energy_coeff: 1.0e-26,
            mean_sensing_time: 0.5,
            mean_sensing_power: 0.1,
            sensing_rel_std: 0.1,
            result_size_range: (1.0 * MBIT, 8.0 * MBIT),
            raw_ratio_range: (1.1, 1.5),
            deadline_fraction_range: (0.5, 1.0),
            complexity_range: (200.0, 300.0),
            whole_area_prob: 0.5,
            roi_fraction_range: (0.05, 0.25),
            max_speed_mps: 10.0 / 3.6,
            channel_window: 20,
            dataset_roi_radius: 10,
        }
    }
}

impl ScenarioParams {
    pub fn max_result_size(&self) -> f64 {
        self.result_size_range.1
    }

    pub fn cell_size_m(&self) -> f64 {
        self.area_side_m / f64::from(self.grid_side)
    }

    /// Largest distance an MU can cover in one step.
    pub fn max_step_displacement(&self) -> f64 {
        self.max_speed_mps * self.step_duration
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("step_duration", self.step_duration),
            ("bandwidth", self.bandwidth),
            ("noise_power", self.noise_power),
            ("pathloss_exponent", self.pathloss_exponent),
            ("budget_coeff", self.budget_coeff),
            ("payment_coeff", self.payment_coeff),
            ("max_harvest_fraction", self.max_harvest_fraction),
            ("area_side_m", self.area_side_m),
            ("min_distance_m", self.min_distance_m),
            ("max_distance_m", self.max_distance_m),
            ("proposal_bits", self.proposal_bits),
            ("battery_capacity", self.battery_capacity),
            ("max_transmit_power", self.max_transmit_power),
            ("compute_energy_coeff", self.compute_energy_coeff),
            ("mean_sensing_time", self.mean_sensing_time),
            ("mean_sensing_power", self.mean_sensing_power),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Domain(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.size_weight < 0.0 || self.deadline_weight < 0.0 {
            return Err(ModelError::Domain(
                "difficulty weights must be nonnegative".into(),
            ));
        }
        if self.horizon == 0
            || self.num_types == 0
            || self.grid_side == 0
            || self.channel_window == 0
        {
            return Err(ModelError::Domain(
                "horizon, num_types, grid_side and channel_window must be nonzero".into(),
            ));
        }
        if self.min_distance_m > self.max_distance_m {
            return Err(ModelError::Domain(
                "min_distance_m exceeds max_distance_m".into(),
            ));
        }
        let ranges = [
            ("compute_rate_range", self.compute_rate_range),
            ("result_size_range", self.result_size_range),
            ("raw_ratio_range", self.raw_ratio_range),
            ("deadline_fraction_range", self.deadline_fraction_range),
            ("complexity_range", self.complexity_range),
            ("roi_fraction_range", self.roi_fraction_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(ModelError::Domain(format!(
                    "{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.raw_ratio_range.0 <= 1.0 {
            return Err(ModelError::Domain(
                "raw data must be larger than the result (raw_ratio > 1)".into(),
            ));
        }
        if self.deadline_fraction_range.1 > 1.0 {
            return Err(ModelError::Domain(
                "deadlines cannot exceed the step duration".into(),
            ));
        }
        if self.roi_fraction_range.1 > 1.0 {
            return Err(ModelError::Domain("roi fraction above 1".into()));
        }
        if !(0.0..=1.0).contains(&self.whole_area_prob)
            || !(0.0..=1.0).contains(&self.initial_battery_fraction)
            || self.max_harvest_fraction > 1.0
        {
            return Err(ModelError::Domain(
                "probabilities and fractions must lie in [0, 1]".into(),
            ));
        }
        if self.max_speed_mps < 0.0 || self.sensing_rel_std < 0.0 {
            return Err(ModelError::Domain(
                "speed and sensing spread must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Builds the profile every MU shares apart from its CPU rate.
    pub fn profile(&self, index: usize, max_compute_rate: f64) -> MuProfile {
        MuProfile {
            index,
            battery_capacity: self.battery_capacity,
            mean_sensing_time: self.mean_sensing_time,
            mean_sensing_power: self.mean_sensing_power,
            max_transmit_power: self.max_transmit_power,
            max_compute_rate,
            compute_energy_coeff: self.compute_energy_coeff,
        }
    }

    /// The `num_types` task types, with result-size bands of equal width in
    /// increasing order.
    pub fn task_types(&self) -> Vec<TaskType> {
        (0..self.num_types)
            .map(|id| {
                let (lo, hi) = self.type_size_band(id);
                TaskType {
                    id,
                    mean_result_size: 0.5 * (lo + hi),
                    label: format!("type-{id}"),
                }
            })
            .collect()
    }

    /// Result-size band `[lo, hi]` of task type `c`.
    pub fn type_size_band(&self, c: usize) -> (f64, f64) {
        let (lo, hi) = self.result_size_range;
        let width = (hi - lo) / self.num_types as f64;
        (lo + width * c as f64, lo + width * (c + 1) as f64)
    }
}

/// Task difficulty `ξ·M/M_max + ω·(1 − τ_dl/τ_int)`.
pub fn compute_difficulty(
    result_size: f64,
    deadline: f64,
    params: &ScenarioParams,
    max_result_size: f64,
) -> Result<f64, ModelError> {
    if !(result_size > 0.0 && result_size <= max_result_size) {
        return Err(ModelError::Domain(format!(
            "result size {result_size} outside (0, {max_result_size}]"
        )));
    }
    if !(deadline > 0.0 && deadline <= params.step_duration) {
        return Err(ModelError::Domain(format!(
            "deadline {deadline} outside (0, {}]",
            params.step_duration
        )));
    }
    Ok(params.size_weight * (result_size / max_result_size)
        + params.deadline_weight * (1.0 - deadline / params.step_duration))
}

pub fn compute_budget(difficulty: f64, budget_coeff: f64) -> f64 {
    budget_coeff * difficulty
}

/// Shannon-rate upload time. Infinite when nothing is transmitted.
pub fn transmission_time(
    bits: f64,
    transmit_power: f64,
    channel_gain: f64,
    bandwidth: f64,
    noise_power: f64,
) -> Result<f64, ModelError> {
    if !(bandwidth > 0.0) || !(noise_power > 0.0) {
        return Err(ModelError::Domain(format!(
            "bandwidth {bandwidth} and noise power {noise_power} must be positive"
        )));
    }
    if transmit_power < 0.0 || channel_gain < 0.0 || bits < 0.0 {
        return Err(ModelError::Domain("negative power, gain or size".into()));
    }
    let snr = transmit_power * channel_gain / noise_power;
    // ln_1p keeps precision for tiny SNR.
    let rate = bandwidth * snr.ln_1p() / std::f64::consts::LN_2;
    if rate == 0.0 {
        return Ok(if bits == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(bits / rate)
}

pub fn computing_time(
    raw_size: f64,
    complexity: f64,
    compute_rate: f64,
) -> Result<f64, ModelError> {
    if !(compute_rate > 0.0) {
        return Err(ModelError::Domain(format!(
            "compute rate {compute_rate} must be positive"
        )));
    }
    Ok(raw_size * complexity / compute_rate)
}

/// CMOS dynamic energy: cycles × `ε_chip·f²`.
pub fn compute_energy(raw_size: f64, complexity: f64, compute_rate: f64, energy_coeff: f64) -> f64 {
    raw_size * complexity * energy_coeff * compute_rate * compute_rate
}

/// Energy and time of every execution phase, for the given channel and
/// sensing realization.
pub fn total_effort(
    task: &TaskSpec,
    profile: &MuProfile,
    choice: &ResourceChoice,
    channel_gain: f64,
    sensing: SensingDraw,
    params: &ScenarioParams,
) -> Result<EffortBreakdown, ModelError> {
    if !(sensing.time >= 0.0 && sensing.power >= 0.0) {
        return Err(ModelError::Domain(
            "sensing draw must be nonnegative".into(),
        ));
    }
    let p = choice.transmit_power;
    let t_proposal = transmission_time(
        params.proposal_bits,
        p,
        channel_gain,
        params.bandwidth,
        params.noise_power,
    )?;
    let t_transmit = transmission_time(
        task.result_size,
        p,
        channel_gain,
        params.bandwidth,
        params.noise_power,
    )?;
    let t_compute = computing_time(task.raw_size, task.complexity, choice.compute_rate)?;
    Ok(EffortBreakdown {
        e_proposal: phase_energy(p, t_proposal),
        e_sense: sensing.time * sensing.power,
        e_compute: compute_energy(
            task.raw_size,
            task.complexity,
            choice.compute_rate,
            profile.compute_energy_coeff,
        ),
        e_transmit: phase_energy(p, t_transmit),
        t_sense: sensing.time,
        t_compute,
        t_transmit,
    })
}

/// `power × time`, with a silent radio costing nothing however long it
/// would have to wait.
pub(crate) fn phase_energy(power: f64, time: f64) -> f64 {
    if power == 0.0 {
        0.0
    } else {
        power * time
    }
}

pub fn payment_request(effort: &EffortBreakdown, payment_coeff: f64) -> f64 {
    payment_coeff * effort.total_energy()
}

/// End-of-step battery level, clipped at capacity.
pub fn battery_update(
    prev: f64,
    spent: f64,
    harvested: f64,
    capacity: f64,
) -> Result<f64, ModelError> {
    if spent > prev {
        return Err(ModelError::CausalityViolation {
            spent,
            available: prev,
        });
    }
    if spent < 0.0 || harvested < 0.0 || prev < 0.0 || prev > capacity {
        return Err(ModelError::Domain(format!(
            "battery update out of domain: prev={prev} spent={spent} harvested={harvested} cap={capacity}"
        )));
    }
    Ok((prev - spent + harvested).min(capacity))
}

pub fn is_eligible(location: Cell, roi: &Region) -> bool {
    roi.contains(location)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ScenarioParams {
        ScenarioParams::default()
    }

    #[test]
    fn difficulty_examples() {
        let p = params();
        let m_max = 8.0 * MBIT;
        assert_eq!(compute_difficulty(m_max, 10.0, &p, m_max).unwrap(), 1.0);
        assert_eq!(
            compute_difficulty(m_max / 2.0, 5.0, &p, m_max).unwrap(),
            1.0
        );
        assert_eq!(compute_difficulty(8.0 * MBIT, 5.0, &p, m_max).unwrap(), 1.5);
        assert!(compute_difficulty(m_max * 1.01, 5.0, &p, m_max).is_err());
        assert!(compute_difficulty(m_max, 10.5, &p, m_max).is_err());
    }

    #[test]
    fn budget_examples() {
        assert_eq!(compute_budget(0.0, 10.0), 0.0);
        assert_eq!(compute_budget(1.5, 10.0), 15.0);
        assert_eq!(compute_budget(1.0, 20.0), 20.0);
    }

    #[test]
    fn transmission_examples() {
        // SNR of exactly one.
        let t = transmission_time(1.0e6, 1.0, 1.0e-16, 1.0e6, 1.0e-16).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        assert_eq!(
            transmission_time(1.0e6, 0.0, 1e-9, 1.0e6, 1e-16).unwrap(),
            f64::INFINITY
        );
        assert!(transmission_time(1.0, 0.1, 1.0, 0.0, 1e-16).is_err());
        assert!(transmission_time(1.0, 0.1, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn transmission_decreasing_in_power_and_gain() {
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let t = transmission_time(4.0e6, 0.004 * k as f64, 1e-9, 1e6, 1e-16).unwrap();
            assert!(t < last);
            last = t;
        }
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let t = transmission_time(4.0e6, 0.1, 1e-10 * k as f64, 1e6, 1e-16).unwrap();
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn computing_time_examples() {
        assert_eq!(computing_time(2.0e7, 200.0, 4.0e8).unwrap(), 10.0);
        assert_eq!(computing_time(4.0e8, 1.0, 4.0e8).unwrap(), 1.0);
        let a = computing_time(3.0e6, 250.0, 1.0e8).unwrap();
        let b = computing_time(3.0e6, 250.0, 2.0e8).unwrap();
        assert_eq!(a, 2.0 * b);
        assert!(computing_time(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn compute_energy_examples() {
        let e1 = compute_energy(4.0e6, 250.0, 1.0e8, 1e-26);
        let e2 = compute_energy(4.0e6, 250.0, 2.0e8, 1e-26);
        assert!((e2 / e1 - 4.0).abs() < 1e-12);
        assert_eq!(compute_energy(4.0e6, 250.0, 1.0e8, 0.0), 0.0);
        let e = compute_energy(1.0e9, 1.0, 3.0e8, 1e-26);
        assert!((e - 0.9).abs() < 1e-12);
    }

    fn task(result: f64, raw: f64, complexity: f64) -> TaskSpec {
        TaskSpec {
            index: 0,
            step: 0,
            result_size: result,
            raw_size: raw,
            deadline: 8.0,
            roi: Region::WholeArea,
            task_type: 0,
            complexity,
            difficulty: 0.5,
            budget: 5.0,
        }
    }

    #[test]
    fn effort_sums_and_silent_radio() {
        let p = params();
        let profile = p.profile(0, 3.0e8);
        let choice = ResourceChoice::new(3.0e8, 0.0, &profile).unwrap();
        let sensing = SensingDraw {
            time: 0.5,
            power: 0.1,
        };
        let e = total_effort(&task(1e6, 2e6, 1e-12), &profile, &choice, 1e-9, sensing, &p).unwrap();
        assert_eq!(e.e_proposal, 0.0);
        assert_eq!(e.e_transmit, 0.0);
        assert!((e.e_compute - 2e-6 * 1e-26 * 9e16).abs() < 1e-28);
        assert!((e.e_sense - 0.05).abs() < 1e-15);
        assert_eq!(e.t_transmit, f64::INFINITY);

        let choice = ResourceChoice::new(2.5e8, 0.15, &profile).unwrap();
        let e = total_effort(&task(4e6, 5e6, 250.0), &profile, &choice, 3e-9, sensing, &p).unwrap();
        assert_eq!(
            e.total_energy(),
            e.e_proposal + e.e_sense + e.e_compute + e.e_transmit
        );
        assert_eq!(e.total_time(), e.t_sense + e.t_compute + e.t_transmit);
    }

    #[test]
    fn resource_choice_bounds() {
        let profile = params().profile(0, 3.0e8);
        assert!(ResourceChoice::new(3.0e8, 0.2, &profile).is_ok());
        assert!(ResourceChoice::new(3.0e8, 0.0, &profile).is_ok());
        assert!(ResourceChoice::new(0.0, 0.1, &profile).is_err());
        assert!(ResourceChoice::new(3.1e8, 0.1, &profile).is_err());
        assert!(ResourceChoice::new(1e8, 0.21, &profile).is_err());
        assert!(ResourceChoice::new(1e8, -0.01, &profile).is_err());
    }

    #[test]
    fn payment_is_linear() {
        let e = EffortBreakdown {
            e_proposal: 0.01,
            e_sense: 0.05,
            e_compute: 0.7,
            e_transmit: 0.02,
            ..Default::default()
        };
        assert_eq!(payment_request(&EffortBreakdown::default(), 3.0), 0.0);
        let one = payment_request(&e, 1.0);
        assert!((payment_request(&e, 2.5) - 2.5 * one).abs() < 1e-15);
    }

    #[test]
    fn battery_examples() {
        assert!((battery_update(5.0, 1.0, 0.8, 8.0).unwrap() - 4.8).abs() < 1e-15);
        assert_eq!(battery_update(8.0, 0.0, 0.8, 8.0).unwrap(), 8.0);
        assert!(matches!(
            battery_update(0.5, 0.6, 0.0, 8.0),
            Err(ModelError::CausalityViolation { .. })
        ));
    }

    #[test]
    fn eligibility_examples() {
        let rect = Region::Rect {
            i_min: 10,
            j_min: 20,
            i_max: 15,
            j_max: 30,
        };
        assert!(is_eligible(Cell::new(99, 0), &Region::WholeArea));
        assert!(is_eligible(Cell::new(12, 25), &rect));
        assert!(is_eligible(Cell::new(10, 20), &rect));
        assert!(is_eligible(Cell::new(15, 30), &rect));
        assert!(!is_eligible(Cell::new(16, 30), &rect));
        assert!(!is_eligible(Cell::new(12, 19), &rect));
    }

    #[test]
    fn channel_window_evicts_oldest() {
        let mut s = MuState {
            battery: 1.0,
            position: (0.0, 0.0),
            location: Cell::new(0, 0),
            waypoint: (0.0, 0.0),
            channel_history: vec![],
            avg_channel: 0.0,
        };
        for g in [1.0, 2.0, 3.0, 4.0] {
            s.record_channel(g, 3);
        }
        assert_eq!(s.channel_history, vec![2.0, 3.0, 4.0]);
        assert_eq!(s.avg_channel, 3.0);
    }

    #[test]
    fn type_bands_are_ordered() {
        let p = params();
        let types = p.task_types();
        assert_eq!(types.len(), 10);
        for w in types.windows(2) {
            assert!(w[0].mean_result_size < w[1].mean_result_size);
        }
        assert_eq!(p.type_size_band(0).0, 1.0 * MBIT);
        assert!((p.type_size_band(9).1 - 8.0 * MBIT).abs() < 1e-6);
    }

    #[test]
    fn default_params_validate() {
        params().validate().unwrap();
        let mut p = params();
        p.raw_ratio_range = (0.9, 1.2);
        assert!(p.validate().is_err());
    }
}
