//! C ABI over the `preflab` core.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! a [`PreflabStatus`]; on failure a message is kept per thread and can be
//! read with [`preflab_last_error_message`]. Tables are row-major
//! `prompts × responses` buffers of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use preflab::losses::{dpo_gradient, dpo_loss, BetaParam};
use preflab::preference::PreferencePairSet;
use preflab::solvers::{dpo_optimal_policy, rlhf_optimal_policy, MarginalPair};
use preflab::tabular::{CategoricalConditional, RewardTable, TabularPolicy};
use preflab::theory::{run_check, Check, SuiteOptions};
use preflab::trainer::{train_dpo, TrainConfig};
use preflab::{Error, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreflabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    SupportViolation = 4,
    Diverged = 5,
    Construction = 6,
    Io = 7,
    Serialization = 8,
    Panic = 9,
}

/// Softmax policy over logits.
pub struct PreflabPolicy(TabularPolicy);

/// Conditional distribution with rows on the simplex.
pub struct PreflabConditional(CategoricalConditional);

/// Weighted preference pairs.
pub struct PreflabPairSet(PreferencePairSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: PreflabStatus,
    message: String,
}

impl Failure {
    fn new(status: PreflabStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Self::new(PreflabStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::InvalidInstance(_) | Error::InvalidStrategy(_) => {
                PreflabStatus::InvalidInput
            }
            Error::ShapeMismatch { .. } => PreflabStatus::ShapeMismatch,
            Error::SupportViolation { .. } => PreflabStatus::SupportViolation,
            Error::Diverged { .. } => PreflabStatus::Diverged,
            Error::Construction(_) => PreflabStatus::Construction,
            Error::Io(_) => PreflabStatus::Io,
            Error::Schema { .. } | Error::Json(_) => PreflabStatus::Serialization,
        };
        Self::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PreflabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PreflabStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            PreflabStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn table(p: *const f64, prompts: usize, responses: usize, what: &str) -> Result<Matrix, Failure> {
    let len = prompts
        .checked_mul(responses)
        .ok_or_else(|| Failure::new(PreflabStatus::InvalidInput, "table size overflows"))?;
    Ok(Matrix::from_flat(prompts, responses, slice(p, len, what)?.to_vec())?)
}

unsafe fn write_table(m: &Matrix, out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("output buffer"));
    }
    if len != m.data().len() {
        return Err(Failure::new(
            PreflabStatus::ShapeMismatch,
            format!("output buffer holds {len} values, table has {}", m.data().len()),
        ));
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(m.data());
    Ok(())
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn beta(v: f64) -> Result<BetaParam, Failure> {
    Ok(BetaParam::new(v)?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failure on the same thread.
#[no_mangle]
pub extern "C" fn preflab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn preflab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `logits` must point to `prompts * responses` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_new(
    logits: *const f64,
    prompts: usize,
    responses: usize,
    out: *mut *mut PreflabPolicy,
) -> PreflabStatus {
    guard(|| {
        let m = table(logits, prompts, responses, "logits")?;
        emit(out, PreflabPolicy(TabularPolicy::new(m)?))
    })
}

/// Policy whose softmax equals `conditional`.
///
/// # Safety
/// Pointers must be valid handles or null.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_from_conditional(
    conditional: *const PreflabConditional,
    out: *mut *mut PreflabPolicy,
) -> PreflabStatus {
    guard(|| {
        let c = borrow(conditional, "conditional")?;
        emit(out, PreflabPolicy(TabularPolicy::from_conditional(&c.0)?))
    })
}

/// # Safety
/// `policy` must be a valid handle; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_shape(
    policy: *const PreflabPolicy,
    prompts: *mut usize,
    responses: *mut usize,
) -> PreflabStatus {
    guard(|| {
        let (n, m) = borrow(policy, "policy")?.0.shape();
        if let Some(p) = prompts.as_mut() {
            *p = n;
        }
        if let Some(r) = responses.as_mut() {
            *r = m;
        }
        Ok(())
    })
}

/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_logits(policy: *const PreflabPolicy, out: *mut f64, len: usize) -> PreflabStatus {
    guard(|| write_table(borrow(policy, "policy")?.0.logits(), out, len))
}

/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_probs(policy: *const PreflabPolicy, out: *mut f64, len: usize) -> PreflabStatus {
    guard(|| write_table(borrow(policy, "policy")?.0.probs().probs(), out, len))
}

/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn preflab_policy_free(policy: *mut PreflabPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Rows must be non-negative and sum to one.
///
/// # Safety
/// `probs` must point to `prompts * responses` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_conditional_new(
    probs: *const f64,
    prompts: usize,
    responses: usize,
    out: *mut *mut PreflabConditional,
) -> PreflabStatus {
    guard(|| {
        let m = table(probs, prompts, responses, "probs")?;
        emit(out, PreflabConditional(CategoricalConditional::new(m)?))
    })
}

/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_conditional_probs(
    conditional: *const PreflabConditional,
    out: *mut f64,
    len: usize,
) -> PreflabStatus {
    guard(|| write_table(borrow(conditional, "conditional")?.0.probs(), out, len))
}

/// # Safety
/// `conditional` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn preflab_conditional_free(conditional: *mut PreflabConditional) {
    if !conditional.is_null() {
        drop(Box::from_raw(conditional));
    }
}

/// Pair set from `count` weighted `(prompt, chosen, rejected)` entries.
/// Entries with `chosen == rejected` are dropped and the weights are
/// renormalized.
///
/// # Safety
/// The four arrays must each hold `count` elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn preflab_pairs_new(
    prompts: usize,
    responses: usize,
    prompt: *const usize,
    chosen: *const usize,
    rejected: *const usize,
    mass: *const f64,
    count: usize,
    out: *mut *mut PreflabPairSet,
) -> PreflabStatus {
    guard(|| {
        let p = slice(prompt, count, "prompt")?;
        let w = slice(chosen, count, "chosen")?;
        let l = slice(rejected, count, "rejected")?;
        let v = slice(mass, count, "mass")?;
        let entries = (0..count).map(|i| (p[i], w[i], l[i], v[i]));
        emit(out, PreflabPairSet(PreferencePairSet::from_masses(prompts, responses, entries)?))
    })
}

/// Number of stored pairs, or 0 for a null handle.
///
/// # Safety
/// `pairs` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn preflab_pairs_len(pairs: *const PreflabPairSet) -> usize {
    pairs.as_ref().map_or(0, |p| p.0.len())
}

/// # Safety
/// `pairs` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn preflab_pairs_free(pairs: *mut PreflabPairSet) {
    if !pairs.is_null() {
        drop(Box::from_raw(pairs));
    }
}

/// # Safety
/// Handles must be valid; `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn preflab_dpo_loss(
    policy: *const PreflabPolicy,
    reference: *const PreflabConditional,
    pairs: *const PreflabPairSet,
    beta_value: f64,
    out: *mut f64,
) -> PreflabStatus {
    guard(|| {
        let v = dpo_loss(
            &borrow(policy, "policy")?.0,
            &borrow(reference, "reference")?.0,
            &borrow(pairs, "pairs")?.0,
            beta(beta_value)?,
        )?;
        *out.as_mut().ok_or_else(|| Failure::null("out"))? = v;
        Ok(())
    })
}

/// Gradient of the DPO loss in the logits.
///
/// # Safety
/// Handles must be valid; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn preflab_dpo_gradient(
    policy: *const PreflabPolicy,
    reference: *const PreflabConditional,
    pairs: *const PreflabPairSet,
    beta_value: f64,
    out: *mut f64,
    len: usize,
) -> PreflabStatus {
    guard(|| {
        let g = dpo_gradient(
            &borrow(policy, "policy")?.0,
            &borrow(reference, "reference")?.0,
            &borrow(pairs, "pairs")?.0,
            beta(beta_value)?,
        )?;
        write_table(&g, out, len)
    })
}

/// Minimizer of the DPO loss on independent chosen × rejected pairs.
///
/// # Safety
/// Handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn preflab_dpo_closed_form(
    reference: *const PreflabConditional,
    chosen: *const PreflabConditional,
    rejected: *const PreflabConditional,
    beta_value: f64,
    out: *mut *mut PreflabConditional,
) -> PreflabStatus {
    guard(|| {
        let marginals = MarginalPair::new(borrow(chosen, "chosen")?.0.clone(), borrow(rejected, "rejected")?.0.clone())?;
        let p = dpo_optimal_policy(&marginals, &borrow(reference, "reference")?.0, beta(beta_value)?)?;
        emit(out, PreflabConditional(p))
    })
}

/// Reference tilted by `exp(reward/β)`.
///
/// # Safety
/// `reward` must hold as many doubles as the reference table.
#[no_mangle]
pub unsafe extern "C" fn preflab_rlhf_closed_form(
    reward: *const f64,
    reference: *const PreflabConditional,
    beta_value: f64,
    out: *mut *mut PreflabConditional,
) -> PreflabStatus {
    guard(|| {
        let r = &borrow(reference, "reference")?.0;
        let (n, m) = r.shape();
        let reward = RewardTable::new(table(reward, n, m, "reward")?)?;
        emit(out, PreflabConditional(rlhf_optimal_policy(&reward, r, beta(beta_value)?)?))
    })
}

/// Plain gradient descent on the DPO loss from `policy`, stopping early
/// once the largest gradient entry drops to 1e-10.
///
/// # Safety
/// Handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn preflab_train_dpo(
    policy: *const PreflabPolicy,
    reference: *const PreflabConditional,
    pairs: *const PreflabPairSet,
    learning_rate: f64,
    steps: usize,
    beta_value: f64,
    out: *mut *mut PreflabPolicy,
) -> PreflabStatus {
    guard(|| {
        let mut cfg = TrainConfig::new(learning_rate, steps, beta_value)?;
        cfg.snapshot_every = 0;
        cfg.convergence_tol = 1e-10;
        let (trained, _) = train_dpo(
            &borrow(policy, "policy")?.0,
            &borrow(reference, "reference")?.0,
            &borrow(pairs, "pairs")?.0,
            &cfg,
        )?;
        emit(out, PreflabPolicy(trained))
    })
}

/// Runs a named verification check and returns its report as JSON. Free
/// the string with [`preflab_string_free`].
///
/// # Safety
/// `check` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn preflab_verify(check: *const c_char, seed: u64, out: *mut *mut c_char) -> PreflabStatus {
    guard(|| {
        if check.is_null() {
            return Err(Failure::null("check"));
        }
        let name = CStr::from_ptr(check)
            .to_str()
            .map_err(|_| Failure::new(PreflabStatus::InvalidInput, "check name is not UTF-8"))?;
        let check = Check::parse(name)
            .ok_or_else(|| Failure::new(PreflabStatus::InvalidInput, format!("unknown check {name:?}")))?;
        let report = run_check(check, &SuiteOptions::new(seed))?;
        let json = serde_json::to_string(&report).map_err(Error::from)?;
        if out.is_null() {
            return Err(Failure::null("output string"));
        }
        *out = CString::new(json)
            .map_err(|_| Failure::new(PreflabStatus::Serialization, "report contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn preflab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
