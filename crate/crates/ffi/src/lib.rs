//! C ABI over the `fedcrowd` crate.
//!
//! Every fallible call returns an [`FcStatus`]; on failure the message is
//! available from [`fc_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and must be released with their
//! matching `*_free` function. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedcrowd::agent::{init_model, AgentHyperparams};
use fedcrowd::config::{ExperimentConfig, PolicyKind};
use fedcrowd::environment::{Process, RngStreams};
use fedcrowd::experiment::{run_scenario, ScenarioResult};
use fedcrowd::metrics::Estimate;
use fedcrowd::model::{self, ScenarioParams};
use fedcrowd::nn::{combine, ModelParams};
use fedcrowd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Model = 6,
    Constraint = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcPolicy {
    FdrlPpo = 0,
    Ippo = 1,
    Motp = 2,
    Rtps = 3,
    Ota = 4,
}

impl From<PolicyKind> for FcPolicy {
    fn from(p: PolicyKind) -> Self {
        match p {
            PolicyKind::FdrlPpo => FcPolicy::FdrlPpo,
            PolicyKind::Ippo => FcPolicy::Ippo,
            PolicyKind::Motp => FcPolicy::Motp,
            PolicyKind::Rtps => FcPolicy::Rtps,
            PolicyKind::Ota => FcPolicy::Ota,
        }
    }
}

/// Mean with its 5%/95% bootstrap interval over `n` realizations.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl From<Estimate> for FcEstimate {
    fn from(e: Estimate) -> Self {
        Self {
            mean: e.mean,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            n: e.n,
        }
    }
}

/// One (sweep value, policy) point of a scenario run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcPointSummary {
    pub has_axis: bool,
    pub axis_value: f64,
    pub policy: FcPolicy,
    pub realizations: usize,
    pub weighted_completed: FcEstimate,
    pub collision_ratio: FcEstimate,
    pub energy_per_completed: FcEstimate,
    pub per_type_cv: f64,
}

/// Parsed experiment configuration.
pub struct FcConfig(ExperimentConfig);

/// Results of a scenario run.
pub struct FcRun {
    result: ScenarioResult,
    json: CString,
}

/// Actor and critic parameters of one agent.
pub struct FcModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => FcStatus::Config,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Dataset(_) => FcStatus::Io,
            Error::Model(_) | Error::Nn(_) | Error::Ota(_) => FcStatus::Model,
            Error::Constraint { .. } => FcStatus::Constraint,
            Error::Other(_) => FcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<fedcrowd::error::ModelError> for Failure {
    fn from(e: fedcrowd::error::ModelError) -> Self {
        Failure(FcStatus::Model, e.to_string())
    }
}

impl From<fedcrowd::error::NnError> for Failure {
    fn from(e: fedcrowd::error::NnError) -> Self {
        Failure(FcStatus::Model, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FcStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            FcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FcStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `bytes` plus a terminating NUL into `buf` when it fits.
/// `needed` (optional) receives the full size including the NUL.
unsafe fn copy_out(
    bytes: &[u8],
    buf: *mut u8,
    len: usize,
    needed: *mut usize,
    nul: bool,
) -> Result<(), Failure> {
    let total = bytes.len() + usize::from(nul);
    if let Some(n) = needed.as_mut() {
        *n = total;
    }
    if buf.is_null() || len < total {
        return Err(Failure(
            FcStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, {total} needed"),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    if nul {
        *buf.add(bytes.len()) = 0;
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fc_clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Task difficulty for a result of `result_size` bits due within
/// `deadline` seconds of a `step_duration`-second step.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_task_difficulty(
    result_size: f64,
    deadline: f64,
    max_result_size: f64,
    step_duration: f64,
    size_weight: f64,
    deadline_weight: f64,
    out: *mut f64,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = ScenarioParams {
            step_duration,
            size_weight,
            deadline_weight,
            ..Default::default()
        };
        *out = model::compute_difficulty(result_size, deadline, &params, max_result_size)?;
        Ok(())
    })
}

/// Upload time of `bits` over a Shannon-rate link (infinite for a zero rate).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_transmission_time(
    bits: f64,
    transmit_power: f64,
    channel_gain: f64,
    bandwidth: f64,
    noise_power: f64,
    out: *mut f64,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out =
            model::transmission_time(bits, transmit_power, channel_gain, bandwidth, noise_power)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_computing_time(
    raw_size: f64,
    complexity: f64,
    compute_rate: f64,
    out: *mut f64,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = model::computing_time(raw_size, complexity, compute_rate)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_compute_energy(
    raw_size: f64,
    complexity: f64,
    compute_rate: f64,
    energy_coeff: f64,
    out: *mut f64,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = model::compute_energy(raw_size, complexity, compute_rate, energy_coeff);
        Ok(())
    })
}

/// Battery level after spending and harvesting, clipped at `capacity`.
/// Spending more than `prev` fails with `FC_STATUS_MODEL`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_battery_update(
    prev: f64,
    spent: f64,
    harvested: f64,
    capacity: f64,
    out: *mut f64,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = model::battery_update(prev, spent, harvested, capacity)?;
        Ok(())
    })
}

/// Parses a flat `key = value` configuration.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_config_parse(text: *const c_char, out: *mut *mut FcConfig) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::parse(str_arg(text, "text")?)
            .map_err(|e| Failure::from(Error::from(e)))?;
        *out = Box::into_raw(Box::new(FcConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_config_load(path: *const c_char, out: *mut *mut FcConfig) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = std::fs::read_to_string(str_arg(path, "path")?)
            .map_err(|e| Failure::from(Error::from(e)))?;
        let cfg = ExperimentConfig::parse(&text).map_err(|e| Failure::from(Error::from(e)))?;
        *out = Box::into_raw(Box::new(FcConfig(cfg)));
        Ok(())
    })
}

/// Writes the full configuration in the flat format. With a NULL or short
/// buffer, returns `FC_STATUS_BUFFER_TOO_SMALL` and sets `needed`.
///
/// # Safety
/// `cfg` must come from `fc_config_parse`/`fc_config_load`; `buf` must
/// hold `len` bytes; `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn fc_config_to_string(
    cfg: *const FcConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FcStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        copy_out(cfg.0.to_flat().as_bytes(), buf.cast(), len, needed, true)
    })
}

/// # Safety
/// `cfg` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fc_config_free(cfg: *mut FcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains and validates the configured policies. `out_dir` may be NULL to
/// skip writing result files.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` NULL or a NUL-terminated string;
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_run_scenario(
    cfg: *const FcConfig,
    out_dir: *const c_char,
    out: *mut *mut FcRun,
) -> FcStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(Path::new(str_arg(out_dir, "out_dir")?))
        };
        let result = run_scenario(&cfg.0, dir)?;
        let json = serde_json::to_string(&result).map_err(|e| Failure::from(Error::from(e)))?;
        let json = CString::new(json).map_err(|e| Failure(FcStatus::Internal, e.to_string()))?;
        *out = Box::into_raw(Box::new(FcRun { result, json }));
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle; `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_run_point_count(run: *const FcRun, count: *mut usize) -> FcStatus {
    guard(|| {
        *out_arg(count, "count")? = handle(run, "run")?.result.points.len();
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_run_point(
    run: *const FcRun,
    index: usize,
    out: *mut FcPointSummary,
) -> FcStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let out = out_arg(out, "out")?;
        let p = run.result.points.get(index).ok_or_else(|| {
            Failure(
                FcStatus::InvalidArgument,
                format!("point {index} of {}", run.result.points.len()),
            )
        })?;
        *out = FcPointSummary {
            has_axis: p.axis_value.is_some(),
            axis_value: p.axis_value.unwrap_or(f64::NAN),
            policy: p.policy.into(),
            realizations: p.report.realizations,
            weighted_completed: p.report.weighted_completed.into(),
            collision_ratio: p.report.collision_ratio.into(),
            energy_per_completed: p.report.energy_per_completed_task.into(),
            per_type_cv: p.report.per_type_cv,
        };
        Ok(())
    })
}

/// Whole result as JSON, owned by the handle (valid until `fc_run_free`).
/// Returns NULL for a NULL handle.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_run_summary_json(run: *const FcRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// # Safety
/// `run` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fc_run_free(run: *mut FcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Freshly initialized agent model for `tasks_per_step` task slots with the
/// default hyperparameters, seeded by `seed`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_model_init(
    tasks_per_step: usize,
    seed: u64,
    out: *mut *mut FcModel,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if tasks_per_step == 0 {
            return Err(Failure(
                FcStatus::InvalidArgument,
                "tasks_per_step must be positive".into(),
            ));
        }
        let mut rng = RngStreams::new(seed).stream(Process::Init, 0);
        let model = init_model(tasks_per_step, &AgentHyperparams::default(), &mut rng);
        *out = Box::into_raw(Box::new(FcModel(model)));
        Ok(())
    })
}

/// Reads a model from its binary encoding.
///
/// # Safety
/// `bytes` must hold `len` readable bytes; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_model_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FcModel,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let model = ModelParams::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(FcModel(model)));
        Ok(())
    })
}

/// Binary encoding of the model. With a NULL or short buffer, returns
/// `FC_STATUS_BUFFER_TOO_SMALL` and sets `needed`.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `len` bytes; `needed`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn fc_model_to_bytes(
    model: *const FcModel,
    buf: *mut u8,
    len: usize,
    needed: *mut usize,
) -> FcStatus {
    guard(|| {
        copy_out(
            &handle(model, "model")?.0.to_bytes(),
            buf,
            len,
            needed,
            false,
        )
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_model_read(path: *const c_char, out: *mut *mut FcModel) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let bytes =
            std::fs::read(str_arg(path, "path")?).map_err(|e| Failure::from(Error::from(e)))?;
        *out = Box::into_raw(Box::new(FcModel(ModelParams::from_bytes(&bytes)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fc_model_write(model: *const FcModel, path: *const c_char) -> FcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        std::fs::write(str_arg(path, "path")?, model.0.to_bytes())
            .map_err(|e| Failure::from(Error::from(e)))?;
        Ok(())
    })
}

/// Total number of actor and critic parameters.
///
/// # Safety
/// `model` must be a live handle; `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_model_param_count(
    model: *const FcModel,
    count: *mut usize,
) -> FcStatus {
    guard(|| {
        *out_arg(count, "count")? = handle(model, "model")?.0.param_count();
        Ok(())
    })
}

/// Weighted combination of `count` same-shaped models.
///
/// # Safety
/// `models` must hold `count` live handles and `weights` `count` values;
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_model_combine(
    models: *const *const FcModel,
    weights: *const f64,
    count: usize,
    out: *mut *mut FcModel,
) -> FcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if models.is_null() || weights.is_null() {
            return Err(null("models or weights"));
        }
        let handles = std::slice::from_raw_parts(models, count);
        let refs = handles
            .iter()
            .enumerate()
            .map(|(i, &m)| handle(m, &format!("models[{i}]")).map(|m| &m.0))
            .collect::<Result<Vec<_>, _>>()?;
        let combined = combine(&refs, std::slice::from_raw_parts(weights, count))?;
        *out = Box::into_raw(Box::new(FcModel(combined)));
        Ok(())
    })
}

/// Raw actor outputs for one observation.
///
/// # Safety
/// `model` must be a live handle; `input` must hold `input_len` values and
/// `output` `output_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fc_model_actor_forward(
    model: *const FcModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> FcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if input.is_null() || output.is_null() {
            return Err(null("input or output"));
        }
        let actor = &model.0.actor;
        if input_len != actor.input_size() || output_len != actor.output_size() {
            return Err(Failure(
                FcStatus::InvalidArgument,
                format!(
                    "actor maps {} inputs to {} outputs, got {input_len} and {output_len}",
                    actor.input_size(),
                    actor.output_size()
                ),
            ));
        }
        let y = actor.predict(std::slice::from_raw_parts(input, input_len))?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fc_model_free(model: *mut FcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
