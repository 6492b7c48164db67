// SPDX-License-Identifier: MIT OR Apache-2.0

//! C interface to `line-core`.
//!
//! Every fallible function returns a [`LineStatus`] and writes results
//! through out-pointers. On failure, [`line_last_error`] describes the
//! error for the calling thread. Strings returned by the library must be
//! released with [`line_string_free`]; scoreboards with
//! [`line_scoreboard_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use line_core::engine::RunConfig;
use line_core::proposer::{
    render_main_prompt, render_summary_prompt, ProposalRequest, SimStrategy,
};
use line_core::scoring::{control_stats, score_auc, score_avg, score_mad, ActivationSet};
use line_core::simworld::{simulate, SimConfig, SimWorld};
use line_core::{normalize_label, LineError, NeuronAddress, Origin, Scoreboard, ScoreboardEntry};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Empty = 4,
    DegenerateControl = 5,
    Failed = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineOrigin {
    Predefined = 0,
    Generated = 1,
    Summary = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSimProposer {
    Greedy = 0,
    Oracle = 1,
}

/// Opaque scoreboard handle.
pub struct LineScoreboard(Scoreboard);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LineStatus, String);

impl From<LineError> for Failure {
    fn from(e: LineError) -> Self {
        let status = match e {
            LineError::EmptyScoreboard | LineError::EmptyActivation => LineStatus::Empty,
            LineError::DegenerateControl => LineStatus::DegenerateControl,
            LineError::InvalidLabel(_)
            | LineError::NonFiniteActivation(_)
            | LineError::Config(_)
            | LineError::Json(_)
            | LineError::UnknownLayer { .. } => LineStatus::InvalidArgument,
            _ => LineStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LineStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LineStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LineStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LineStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LineStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LineStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s)
        .map_err(|_| Failure(LineStatus::Failed, "string contains a nul byte".into()))?;
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(c.into_raw());
    Ok(())
}

unsafe fn board<'a>(sb: *const LineScoreboard) -> Result<&'a Scoreboard, Failure> {
    sb.as_ref().map(|b| &b.0).ok_or_else(|| null("scoreboard"))
}

fn activations(values: &[f64]) -> Result<ActivationSet, Failure> {
    Ok(ActivationSet::new(values.to_vec())?)
}

/// Error message of the most recent call on this thread, or null if that
/// call succeeded. Valid until the next call into the library on this
/// thread; do not free.
#[no_mangle]
pub extern "C" fn line_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn line_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn line_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Canonical form of a concept label.
///
/// # Safety
/// `raw` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn line_normalize_label(
    raw: *const c_char,
    out: *mut *mut c_char,
) -> LineStatus {
    guard(|| {
        let label = normalize_label(str_arg(raw, "raw")?)?;
        write_string(out, label.to_string())
    })
}

/// Mean activation.
///
/// # Safety
/// `values` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_score_avg(values: *const f64, n: usize, out: *mut f64) -> LineStatus {
    guard(|| {
        let a = activations(slice_arg(values, n, "values")?)?;
        write(out, score_avg(&a), "out")
    })
}

/// Fraction of (control, concept) pairs with control strictly below concept.
///
/// # Safety
/// Arrays must hold `n` and `m` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_score_auc(
    control: *const f64,
    n: usize,
    concept: *const f64,
    m: usize,
    out: *mut f64,
) -> LineStatus {
    guard(|| {
        let c = activations(slice_arg(control, n, "control")?)?;
        let k = activations(slice_arg(concept, m, "concept")?)?;
        write(out, score_auc(&c, &k), "out")
    })
}

/// Concept mean minus control mean, in control standard deviations.
///
/// # Safety
/// Arrays must hold `n` and `m` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_score_mad(
    control: *const f64,
    n: usize,
    concept: *const f64,
    m: usize,
    out: *mut f64,
) -> LineStatus {
    guard(|| {
        let c = activations(slice_arg(control, n, "control")?)?;
        let k = activations(slice_arg(concept, m, "concept")?)?;
        write(out, score_mad(&control_stats(&c), &k)?, "out")
    })
}

/// New empty scoreboard for neuron `layer:index`.
///
/// # Safety
/// `layer` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_new(
    layer: *const c_char,
    index: usize,
    out: *mut *mut LineScoreboard,
) -> LineStatus {
    guard(|| {
        let layer = str_arg(layer, "layer")?;
        if layer.is_empty() {
            return Err(invalid("layer is empty"));
        }
        let sb = Box::new(LineScoreboard(Scoreboard::new(NeuronAddress::new(
            layer, index,
        ))));
        write(out, Box::into_raw(sb), "out")
    })
}

/// Parses a scoreboard from its JSON form.
///
/// # Safety
/// `json` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_from_json(
    json: *const c_char,
    out: *mut *mut LineScoreboard,
) -> LineStatus {
    guard(|| {
        let sb = Scoreboard::from_json(str_arg(json, "json")?)?;
        write(out, Box::into_raw(Box::new(LineScoreboard(sb))), "out")
    })
}

/// Frees a scoreboard. Null is ignored.
///
/// # Safety
/// `sb` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_free(sb: *mut LineScoreboard) {
    if !sb.is_null() {
        drop(Box::from_raw(sb));
    }
}

/// Adds an entry. `*added` is false when the label was already present and
/// the existing entry was kept. Steps must not decrease.
///
/// # Safety
/// `sb`, `label` and `added` must be valid; `added` may be null.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_insert(
    sb: *mut LineScoreboard,
    label: *const c_char,
    score: f64,
    step: u32,
    origin: LineOrigin,
    added: *mut bool,
) -> LineStatus {
    guard(|| {
        let b = &mut sb.as_mut().ok_or_else(|| null("scoreboard"))?.0;
        let label = normalize_label(str_arg(label, "label")?)?;
        if !score.is_finite() {
            return Err(invalid("score must be finite"));
        }
        if let Some(last) = b.entries().last() {
            if step < last.step {
                return Err(invalid(format!(
                    "step {step} precedes last entry step {}",
                    last.step
                )));
            }
        }
        let origin = match origin {
            LineOrigin::Predefined => Origin::Predefined,
            LineOrigin::Generated => Origin::Generated,
            LineOrigin::Summary => Origin::Summary,
        };
        let outcome = b.insert(ScoreboardEntry::new(label, score, step, origin));
        if !added.is_null() {
            added.write(outcome == line_core::scoreboard::InsertOutcome::Added);
        }
        Ok(())
    })
}

/// Number of entries, or 0 for null.
///
/// # Safety
/// `sb` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_len(sb: *const LineScoreboard) -> usize {
    sb.as_ref().map_or(0, |b| b.0.len())
}

/// Best entry: highest score, then earliest step, then label.
///
/// # Safety
/// `sb` must be valid; out-pointers must be valid, `score` and `step` may be null.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_best(
    sb: *const LineScoreboard,
    label: *mut *mut c_char,
    score: *mut f64,
    step: *mut u32,
) -> LineStatus {
    guard(|| {
        let best = board(sb)?.best()?;
        if !score.is_null() {
            score.write(best.score);
        }
        if !step.is_null() {
            step.write(best.step);
        }
        write_string(label, best.label.to_string())
    })
}

/// # Safety
/// `sb` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_scoreboard_to_json(
    sb: *const LineScoreboard,
    out: *mut *mut c_char,
) -> LineStatus {
    guard(|| write_string(out, board(sb)?.to_json()))
}

/// The refinement prompt for the current board: all entries by rank and
/// the labels already proposed.
///
/// # Safety
/// `sb` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_render_main_prompt(
    sb: *const LineScoreboard,
    out: *mut *mut c_char,
) -> LineStatus {
    guard(|| {
        let b = board(sb)?;
        if b.is_empty() {
            return Err(LineError::EmptyScoreboard.into());
        }
        let list = b
            .ranked()
            .into_iter()
            .map(|e| (e.label.clone(), e.score))
            .collect();
        write_string(
            out,
            render_main_prompt(&ProposalRequest::main(list, b.forbidden_set())),
        )
    })
}

/// The summary prompt over the three best entries.
///
/// # Safety
/// `sb` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn line_render_summary_prompt(
    sb: *const LineScoreboard,
    out: *mut *mut c_char,
) -> LineStatus {
    guard(|| {
        let top: Vec<_> = board(sb)?
            .top_k(3)
            .into_iter()
            .map(|e| (e.label.clone(), e.score))
            .collect();
        write_string(out, render_summary_prompt(&top)?)
    })
}

/// Runs a simulated study and returns the layer summary as JSON.
/// `sim_config_json` holds simulation world settings; omitted keys take
/// their defaults, so `"{}"` is valid.
///
/// # Safety
/// `sim_config_json` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn line_simulate_json(
    sim_config_json: *const c_char,
    iterations: u32,
    proposer: LineSimProposer,
    out: *mut *mut c_char,
) -> LineStatus {
    guard(|| {
        let config: SimConfig = serde_json::from_str(str_arg(sim_config_json, "sim_config_json")?)
            .map_err(|e| invalid(format!("sim config: {e}")))?;
        let world = SimWorld::new(config)?;
        let strategy = match proposer {
            LineSimProposer::Greedy => SimStrategy::Greedy,
            LineSimProposer::Oracle => SimStrategy::Oracle,
        };
        let cfg = RunConfig {
            iterations,
            ..RunConfig::default()
        };
        let run = simulate(&world, strategy, &cfg)?;
        let json = serde_json::to_string_pretty(&run.summary)
            .map_err(|e| Failure(LineStatus::Failed, e.to_string()))?;
        write_string(out, json)
    })
}
