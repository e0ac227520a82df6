//! C ABI over the memory-inception engine.
//!
//! Conventions: opaque handles behind pointers, integer status codes, and
//! a thread-local last-error message. Every constructor has a matching
//! `*_free`; strings returned through out-pointers are freed with
//! [`mi_string_free`]. The header is generated by cbindgen into
//! `include/mi_ffi.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mi_core::banks::{self, BankSpec};
use mi_core::budget::{kv_bytes, kv_ratio, BudgetInputs};
use mi_core::harness::{default_sizes, greedy_decode, run_property_suite};
use mi_core::model::{self, synth_model, Model, ModelConfig};
use mi_core::plan::{RoutingMode, SteeringPlan};
use mi_core::routing::RoutingGains;
use mi_core::selector::{
    load_artifact, save_artifact, score_units, select, trace_calibration, SelectorArtifact,
    SelectorConfig,
};
use mi_core::tokenizer::{ByteTokenizer, Tokenizer};
use mi_core::{KVBank, MiError};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiStatus {
    Ok = 0,
    InvalidArgument = 1,
    FormatError = 2,
    CompatibilityError = 3,
    EmptyBank = 4,
    InvalidPlan = 5,
    ConfigurationError = 6,
    IoError = 7,
    NullPointer = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

/// Opaque frozen model handle.
pub struct MiModel {
    inner: Model,
}

/// Opaque frozen bank handle.
pub struct MiBank {
    inner: KVBank,
}

/// Opaque frozen selector-artifact handle.
pub struct MiArtifact {
    inner: SelectorArtifact,
}

/// Opaque steering-plan handle; owns deep copies of its artifact and banks.
pub struct MiPlan {
    inner: SteeringPlan,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &MiError) -> MiStatus {
    match err {
        MiError::InvalidArgument(_) => MiStatus::InvalidArgument,
        MiError::Format(_) => MiStatus::FormatError,
        MiError::Compatibility(_) => MiStatus::CompatibilityError,
        MiError::EmptyBank(_) => MiStatus::EmptyBank,
        MiError::InvalidPlan(_) => MiStatus::InvalidPlan,
        MiError::Configuration(_) => MiStatus::ConfigurationError,
        MiError::Io(_) => MiStatus::IoError,
    }
}

fn fail(err: MiError) -> MiStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Run `f` behind a panic guard, translating errors to status codes.
fn guarded(f: impl FnOnce() -> Result<(), MiStatus>) -> MiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MiStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("panic across the FFI boundary");
            MiStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, MiStatus> {
    if ptr.is_null() {
        set_error(&format!("{what}: null pointer"));
        return Err(MiStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what}: invalid UTF-8"));
        MiStatus::InvalidUtf8
    })
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, MiStatus> {
    if ptr.is_null() {
        set_error(&format!("{what}: null pointer"));
        return Err(MiStatus::NullPointer);
    }
    Ok(&*ptr)
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), MiStatus> {
    if out.is_null() {
        set_error("out: null pointer");
        return Err(MiStatus::NullPointer);
    }
    unsafe {
        *out = Box::into_raw(Box::new(value));
    }
    Ok(())
}

/// Crate version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn mi_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn mi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Free a string returned through an out-pointer.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn mi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a deterministic synthetic model from a JSON config (the same
/// schema as the CLI synth spec's "config" object).
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mi_model_synth(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut MiModel,
) -> MiStatus {
    guarded(|| {
        let json = cstr(config_json, "config_json")?;
        let config: ModelConfig = serde_json::from_str(json)
            .map_err(|e| fail(MiError::Format(format!("config parse: {e}"))))?;
        let inner = synth_model(&config, seed).map_err(fail)?;
        put(out, MiModel { inner })
    })
}

/// Load a model from an MIW1 file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_model_load(path: *const c_char, out: *mut *mut MiModel) -> MiStatus {
    guarded(|| {
        let path = cstr(path, "path")?;
        let inner = model::io::load(Path::new(path)).map_err(fail)?;
        put(out, MiModel { inner })
    })
}

/// Save a model as MIW1.
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mi_model_save(model: *const MiModel, path: *const c_char) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let path = cstr(path, "path")?;
        model::io::save(&model.inner, Path::new(path)).map_err(fail)
    })
}

/// Hex fingerprint of the model; free with `mi_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_model_fingerprint(
    model: *const MiModel,
    out: *mut *mut c_char,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        if out.is_null() {
            set_error("out: null pointer");
            return Err(MiStatus::NullPointer);
        }
        let s = CString::new(model.inner.fingerprint()).expect("hex fingerprint");
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mi_model_free(model: *mut MiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn parse_sites(sites: *const u32, n_sites: usize) -> Result<Vec<(usize, usize)>, MiStatus> {
    if n_sites == 0 {
        return Ok(Vec::new());
    }
    if sites.is_null() {
        set_error("sites: null pointer");
        return Err(MiStatus::NullPointer);
    }
    let flat = unsafe { std::slice::from_raw_parts(sites, n_sites * 2) };
    Ok(flat
        .chunks_exact(2)
        .map(|p| (p[0] as usize, p[1] as usize))
        .collect())
}

/// Build a bank from a bank-spec JSON at explicit sites, passed as a flat
/// `[layer0, unit0, layer1, unit1, ...]` array of `2 * n_sites` entries.
///
/// # Safety
/// All pointers must be valid; `sites` must hold `2 * n_sites` entries.
#[no_mangle]
pub unsafe extern "C" fn mi_bank_build(
    model: *const MiModel,
    spec_json: *const c_char,
    sites: *const u32,
    n_sites: usize,
    out: *mut *mut MiBank,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let json = cstr(spec_json, "spec_json")?;
        let spec: BankSpec = serde_json::from_str(json)
            .map_err(|e| fail(MiError::Format(format!("bank spec parse: {e}"))))?;
        let sites = parse_sites(sites, n_sites)?;
        let inner = banks::build_bank(&model.inner, &spec, &sites).map_err(fail)?;
        put(out, MiBank { inner })
    })
}

/// Load an MIB1 bank, verifying the model fingerprint unless
/// `allow_fingerprint_mismatch` is set.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_bank_load(
    model: *const MiModel,
    path: *const c_char,
    allow_fingerprint_mismatch: bool,
    out: *mut *mut MiBank,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let path = cstr(path, "path")?;
        let inner =
            banks::io::load(Path::new(path), &model.inner, allow_fingerprint_mismatch)
                .map_err(fail)?;
        put(out, MiBank { inner })
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_bank_save(bank: *const MiBank, path: *const c_char) -> MiStatus {
    guarded(|| {
        let bank = deref(bank, "bank")?;
        let path = cstr(path, "path")?;
        banks::io::save(&bank.inner, Path::new(path)).map_err(fail)
    })
}

/// Slot count of a bank; 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mi_bank_slot_count(bank: *const MiBank) -> u32 {
    if bank.is_null() {
        return 0;
    }
    (*bank).inner.slot_count() as u32
}

/// # Safety
/// `bank` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mi_bank_free(bank: *mut MiBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Calibrate the selector over all (layer, unit) candidates: prompts are
/// a JSON array of strings, byte-tokenized. The reference bank may be
/// null; `steps` of 0 keeps the default continuation length.
///
/// # Safety
/// All pointers must be valid (reference may be null).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mi_calibrate(
    model: *const MiModel,
    target: *const MiBank,
    reference: *const MiBank,
    prompts_json: *const c_char,
    k: usize,
    m: usize,
    steps: usize,
    out: *mut *mut MiArtifact,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let target = deref(target, "target")?;
        let reference = if reference.is_null() {
            None
        } else {
            Some(&(*reference).inner)
        };
        let prompts_text = cstr(prompts_json, "prompts_json")?;
        let prompts: Vec<String> = serde_json::from_str(prompts_text)
            .map_err(|e| fail(MiError::Format(format!("prompts parse: {e}"))))?;
        let token_prompts: Vec<Vec<u32>> = prompts
            .iter()
            .map(|p| ByteTokenizer.encode(p).iter().map(|t| t.id).collect())
            .collect();
        let mut config = SelectorConfig::defaults_for(model.inner.config(), k, m);
        if steps > 0 {
            config.calib_steps = steps;
        }
        let trace = trace_calibration(
            &model.inner,
            &token_prompts,
            &target.inner,
            reference,
            &config,
        )
        .map_err(fail)?;
        let scores = score_units(&trace, &config);
        let inner = select(&scores, &trace, &config, model.inner.fingerprint()).map_err(fail)?;
        put(out, MiArtifact { inner })
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_artifact_load(
    model: *const MiModel,
    path: *const c_char,
    out: *mut *mut MiArtifact,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let path = cstr(path, "path")?;
        let inner = load_artifact(Path::new(path), &model.inner).map_err(fail)?;
        put(out, MiArtifact { inner })
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mi_artifact_save(
    artifact: *const MiArtifact,
    path: *const c_char,
) -> MiStatus {
    guarded(|| {
        let artifact = deref(artifact, "artifact")?;
        let path = cstr(path, "path")?;
        save_artifact(&artifact.inner, Path::new(path)).map_err(fail)
    })
}

/// # Safety
/// `artifact` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mi_artifact_free(artifact: *mut MiArtifact) {
    if !artifact.is_null() {
        drop(Box::from_raw(artifact));
    }
}

/// Routing mode for `mi_plan_build`: augmented cache.
pub const MI_MODE_AUGMENTED: u32 = 0;
/// Routing mode for `mi_plan_build`: factored bank mixture.
pub const MI_MODE_MIXTURE: u32 = 1;
/// Routing mode for `mi_plan_build`: side-bank approximation.
pub const MI_MODE_SIDEBANK: u32 = 2;

/// Assemble a steering plan from an artifact and banks. The plan deep-
/// copies its inputs, so handles stay independent, and it is validated
/// against `model` before being returned.
///
/// # Safety
/// `banks` must hold `n_banks` live handles; other pointers must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mi_plan_build(
    model: *const MiModel,
    artifact: *const MiArtifact,
    banks: *const *const MiBank,
    n_banks: usize,
    lambda_plus: f64,
    lambda_minus: f64,
    gamma: f64,
    mode: u32,
    out: *mut *mut MiPlan,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        let artifact = deref(artifact, "artifact")?;
        let mut owned = Vec::with_capacity(n_banks);
        if n_banks > 0 {
            if banks.is_null() {
                set_error("banks: null pointer");
                return Err(MiStatus::NullPointer);
            }
            for i in 0..n_banks {
                let handle = *banks.add(i);
                let bank = deref(handle, "banks[i]")?;
                owned.push(bank.inner.clone());
            }
        }
        let mode = match mode {
            MI_MODE_AUGMENTED => RoutingMode::Augmented,
            MI_MODE_MIXTURE => RoutingMode::Mixture,
            MI_MODE_SIDEBANK => RoutingMode::Sidebank,
            other => {
                return Err(fail(MiError::InvalidArgument(format!(
                    "unknown routing mode {other}"
                ))));
            }
        };
        let gains = RoutingGains::new(lambda_plus, lambda_minus, gamma).map_err(fail)?;
        let plan = SteeringPlan::new(artifact.inner.clone(), owned, gains, mode).map_err(fail)?;
        plan.compile(&model.inner).map_err(fail)?;
        put(out, MiPlan { inner: plan })
    })
}

/// # Safety
/// `plan` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mi_plan_free(plan: *mut MiPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Greedy-decode `steps` tokens from a byte prompt, optionally steered.
/// `out_tokens` must hold at least `steps` entries; `out_written` receives
/// the number of generated tokens.
///
/// # Safety
/// `prompt` must hold `prompt_len` bytes; `out_tokens` must hold `steps`
/// entries; `plan` may be null.
#[no_mangle]
pub unsafe extern "C" fn mi_generate(
    model: *const MiModel,
    plan: *const MiPlan,
    prompt: *const u8,
    prompt_len: usize,
    steps: usize,
    out_tokens: *mut u32,
    out_written: *mut usize,
) -> MiStatus {
    guarded(|| {
        let model = deref(model, "model")?;
        if prompt.is_null() || out_tokens.is_null() || out_written.is_null() {
            set_error("mi_generate: null pointer");
            return Err(MiStatus::NullPointer);
        }
        let prompt_bytes = std::slice::from_raw_parts(prompt, prompt_len);
        let prompt_tokens: Vec<u32> = prompt_bytes.iter().map(|b| *b as u32).collect();
        let plan_ref = if plan.is_null() {
            None
        } else {
            Some(&(*plan).inner)
        };
        let (generated, _) =
            greedy_decode(&model.inner, &prompt_tokens, steps, plan_ref).map_err(fail)?;
        for (i, tok) in generated.iter().enumerate() {
            *out_tokens.add(i) = *tok;
        }
        *out_written = generated.len();
        Ok(())
    })
}

/// Idealized KV storage ratio `(layers * prompt_tokens) /
/// (ctrl_layers * bank_slots)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mi_kv_ratio(
    layers: u64,
    ctrl_layers: u64,
    prompt_tokens: u64,
    bank_slots: u64,
    out: *mut f64,
) -> MiStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out: null pointer");
            return Err(MiStatus::NullPointer);
        }
        let inputs = BudgetInputs {
            layers,
            ctrl_layers,
            prompt_tokens,
            bank_slots,
            kv_heads: 1,
            head_dim: 2,
            bytes_per_element: 2,
        };
        *out = kv_ratio(&inputs).map_err(fail)?;
        Ok(())
    })
}

/// Exact KV bytes for one cache side (factor 2 for keys and values).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mi_kv_bytes(
    layers: u64,
    units: u64,
    head_dim: u64,
    positions: u64,
    bytes_per_element: u64,
    out: *mut u64,
) -> MiStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out: null pointer");
            return Err(MiStatus::NullPointer);
        }
        *out = kv_bytes(layers, units, head_dim, positions, bytes_per_element).map_err(fail)?;
        Ok(())
    })
}

/// Run the seeded property suite; returns 0 when every property passes,
/// 3 otherwise (matching the CLI exit code).
#[no_mangle]
pub extern "C" fn mi_check(seed: u64, instances: usize) -> i32 {
    match catch_unwind(|| {
        let report = run_property_suite(seed, &default_sizes(), instances);
        if report.all_pass() {
            0
        } else {
            set_error(&report.render());
            3
        }
    }) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic across the FFI boundary");
            10
        }
    }
}
