// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the attribution engine.
//!
//! Every fallible call returns an [`UnpackStatus`]; on failure the message is
//! available from [`unpack_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Array outputs follow one convention: the required length is always written
//! to `out_len`, and the data only when `cap` is large enough.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unpack::attribution::{CreditLedger, Target, TraceConfig, Tracer};
use unpack::model::toy::ToySpec;
use unpack::model::{load_model, CaptureFlags, ComponentId, Model};
use unpack::UnpackError;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnpackStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Model = 3,
    Numeric = 4,
    Utf8 = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded model.
pub struct UnpackModel {
    model: Model,
}

/// A trace configuration. Without a target, traces use the most likely
/// next token at the traced position.
#[derive(Clone)]
pub struct UnpackConfig {
    config: TraceConfig,
    target: Option<Target>,
}

/// The result of a trace or rerooting.
pub struct UnpackLedger {
    ledger: CreditLedger,
}

/// Dimensions of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct UnpackModelInfo {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub n_components: usize,
    pub bos_token_id: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Status(UnpackStatus, String),
    Core(UnpackError),
}

impl From<UnpackError> for Failure {
    fn from(e: UnpackError) -> Self {
        Self::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn status_of(e: &UnpackError) -> UnpackStatus {
    match e.exit_code() {
        3 => UnpackStatus::Model,
        4 => UnpackStatus::Numeric,
        _ => UnpackStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> UnpackStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UnpackStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            UnpackStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(UnpackStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(UnpackStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> FfiResult<()> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = data.len();
    if cap < data.len() {
        return Err(Failure::Status(
            UnpackStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", data.len()),
        ));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn unpack_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn unpack_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unpack_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_model_load(path: *const c_char, out: *mut *mut UnpackModel) -> UnpackStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let model = load_model(Path::new(path))?;
        put(out, UnpackModel { model })
    })
}

/// A seeded random model with the default toy dimensions and a byte-level
/// tokenizer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_model_new_toy(
    n_layers: usize,
    n_heads: usize,
    seed: u64,
    out: *mut *mut UnpackModel,
) -> UnpackStatus {
    guard(|| {
        let model = ToySpec {
            n_layers,
            n_heads,
            seed,
            ..ToySpec::default()
        }
        .build()?;
        put(out, UnpackModel { model })
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unpack_model_free(model: *mut UnpackModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_model_info(model: *const UnpackModel, out: *mut UnpackModelInfo) -> UnpackStatus {
    guard(|| {
        let cfg = &as_ref(model, "model")?.model.config;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = UnpackModelInfo {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            vocab_size: cfg.vocab_size,
            n_ctx: cfg.n_ctx,
            n_components: cfg.n_components(),
            bos_token_id: cfg.bos_token_id,
        };
        Ok(())
    })
}

/// Tokenizes `text`, prepending BOS when `add_bos` is nonzero.
///
/// # Safety
/// `text` must be NUL-terminated; `out_ids` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn unpack_tokenize(
    model: *const UnpackModel,
    text: *const c_char,
    add_bos: i32,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> UnpackStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let text = as_str(text, "text")?;
        let ids = if add_bos != 0 { m.tokenize_with_bos(text)? } else { m.tokenize(text)? };
        copy_out(&ids, out_ids, cap, out_len)
    })
}

/// Next-token logits at `position`.
///
/// # Safety
/// `ids` must hold `n_ids` ids; `out_logits` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn unpack_forward_logits(
    model: *const UnpackModel,
    ids: *const u32,
    n_ids: usize,
    position: usize,
    out_logits: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> UnpackStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let ids = as_slice(ids, n_ids, "ids")?;
        let cap_ = m.forward(ids, CaptureFlags::LOGITS_ONLY)?;
        cap_.check_pos(position)?;
        let row = cap_.logits.row(position).to_vec();
        copy_out(&row, out_logits, cap, out_len)
    })
}

/// One of the named configurations with default hyperparameters.
///
/// # Safety
/// `name` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_new(name: *const c_char, out: *mut *mut UnpackConfig) -> UnpackStatus {
    guard(|| {
        let name = as_str(name, "name")?;
        let config = TraceConfig::named(name, Target::Single { token: 0 })?;
        put(out, UnpackConfig { config, target: None })
    })
}

/// # Safety
/// `config` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_free(config: *mut UnpackConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

unsafe fn edit(config: *mut UnpackConfig, f: impl FnOnce(&mut UnpackConfig)) -> FfiResult<()> {
    let c = config.as_mut().ok_or_else(|| null("config"))?;
    let mut next = c.clone();
    f(&mut next);
    next.config.validate()?;
    *c = next;
    Ok(())
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_beta(config: *mut UnpackConfig, beta: f64) -> UnpackStatus {
    guard(|| edit(config, |c| c.config.beta = beta))
}

/// Enumeration floor and aggregate pruning floor.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_tau(
    config: *mut UnpackConfig,
    tau: f64,
    tau_aggregate: f64,
) -> UnpackStatus {
    guard(|| {
        edit(config, |c| {
            c.config.tau = tau;
            c.config.tau_aggregate = tau_aggregate;
        })
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_top_k(config: *mut UnpackConfig, top_k: usize) -> UnpackStatus {
    guard(|| edit(config, |c| c.config.top_k_paths = top_k))
}

/// Branch weights of the KQV configurations; they must sum to 1.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_weights(config: *mut UnpackConfig, k: f64, q: f64, v: f64) -> UnpackStatus {
    guard(|| {
        edit(config, |c| {
            c.config.branch_weights = unpack::attribution::BranchWeights { k, q, v };
        })
    })
}

/// Targets the centered logit of `token`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_target(config: *mut UnpackConfig, token: u32) -> UnpackStatus {
    guard(|| edit(config, |c| c.target = Some(Target::Single { token })))
}

/// Targets the logit difference `token - distractor`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn unpack_config_set_logit_diff(
    config: *mut UnpackConfig,
    token: u32,
    distractor: u32,
) -> UnpackStatus {
    guard(|| edit(config, |c| c.target = Some(Target::LogitDiff { token, distractor })))
}

fn argmax(probs: &[f64]) -> u32 {
    (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best }) as u32
}

/// Traces the target at `position`.
///
/// # Safety
/// Handles must be live; `ids` must hold `n_ids` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_trace(
    model: *const UnpackModel,
    config: *const UnpackConfig,
    ids: *const u32,
    n_ids: usize,
    position: usize,
    out: *mut *mut UnpackLedger,
) -> UnpackStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let c = as_ref(config, "config")?;
        let ids = as_slice(ids, n_ids, "ids")?;
        let cap = m.forward(ids, CaptureFlags::ALL)?;
        cap.check_pos(position)?;
        let target = c.target.unwrap_or_else(|| Target::Single {
            token: argmax(&cap.probs(position)),
        });
        let cfg = TraceConfig {
            target,
            ..c.config.clone()
        };
        let ledger = Tracer::new(m, &cap, cfg)?.trace(position)?;
        put(out, UnpackLedger { ledger })
    })
}

/// Reroots at `component` (`"A1.H0"`, `"MLP0"`) at `position`.
///
/// # Safety
/// Handles must be live; `component` NUL-terminated; `ids` must hold
/// `n_ids` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_reroot(
    model: *const UnpackModel,
    config: *const UnpackConfig,
    ids: *const u32,
    n_ids: usize,
    component: *const c_char,
    position: usize,
    out: *mut *mut UnpackLedger,
) -> UnpackStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model;
        let c = as_ref(config, "config")?;
        let ids = as_slice(ids, n_ids, "ids")?;
        let component: ComponentId = as_str(component, "component")?.parse()?;
        let cap = m.forward(ids, CaptureFlags::ALL)?;
        let ledger = Tracer::new(m, &cap, c.config.clone())?.reroot(component, position)?;
        put(out, UnpackLedger { ledger })
    })
}

/// # Safety
/// `ledger` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unpack_ledger_free(ledger: *mut UnpackLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// Signed credit per token position.
///
/// # Safety
/// `ledger` must be live; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn unpack_ledger_token_credit(
    ledger: *const UnpackLedger,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> UnpackStatus {
    guard(|| copy_out(&as_ref(ledger, "ledger")?.ledger.token_credit, out, cap, out_len))
}

/// Total importance of the roots, or NaN for a null handle.
///
/// # Safety
/// `ledger` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn unpack_ledger_total(ledger: *const UnpackLedger) -> f64 {
    ledger.as_ref().map_or(f64::NAN, |l| l.ledger.total_root_importance)
}

/// Kept paths as JSON Lines; free with [`unpack_string_free`].
///
/// # Safety
/// `ledger` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unpack_ledger_paths_json(ledger: *const UnpackLedger, out: *mut *mut c_char) -> UnpackStatus {
    guard(|| {
        let l = &as_ref(ledger, "ledger")?.ledger;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut buf = Vec::new();
        l.write_paths(&mut buf)
            .map_err(|e| Failure::Status(UnpackStatus::InvalidArgument, e.to_string()))?;
        let s = CString::new(buf).map_err(|_| Failure::Status(UnpackStatus::Utf8, "nul byte in paths".into()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// `sign(Σr) * max(|Σr|, beta * Σ|r|)` with `sign(0) = +1`; NaN on a null
/// pointer with nonzero length.
///
/// # Safety
/// `values` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn unpack_safe_denom(values: *const f64, n: usize, beta: f64) -> f64 {
    match as_slice(values, n, "values") {
        Ok(v) => unpack::attribution::safe_denom(v, beta),
        Err(_) => f64::NAN,
    }
}
