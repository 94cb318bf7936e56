//! C interface. Every call returns an `HsrStatus`; on failure the message is
//! kept per thread and read with `hsr_last_error`. Handles are opaque and
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hsr_core::model::{KvCache, Model, ModelConfig, TokenSeq};
use hsr_core::restore::{restore, RestoreError, RestoreOptions};
use hsr_core::schedule::{self, Complement, ProfiledTimings, RestorationPlan};
use hsr_core::storage::{config_hash, DevicePool, SessionSpec, SessionStore, StorageError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    NotFound = 4,
    Mismatch = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsrComplement {
    KvOffload = 0,
    Recompute = 1,
    None = 2,
}

impl From<HsrComplement> for Complement {
    fn from(c: HsrComplement) -> Self {
        match c {
            HsrComplement::KvOffload => Complement::KvOffload,
            HsrComplement::Recompute => Complement::Recompute,
            HsrComplement::None => Complement::None,
        }
    }
}

impl From<Complement> for HsrComplement {
    fn from(c: Complement) -> Self {
        match c {
            Complement::KvOffload => HsrComplement::KvOffload,
            Complement::Recompute => HsrComplement::Recompute,
            Complement::None => HsrComplement::None,
        }
    }
}

pub struct HsrModel {
    model: Model,
    seed: u64,
}

pub struct HsrStore(SessionStore);

pub struct HsrKvCache(KvCache);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Fail(HsrStatus, String);

impl From<StorageError> for Fail {
    fn from(e: StorageError) -> Self {
        let code = match &e {
            StorageError::Io(_) => HsrStatus::Io,
            StorageError::UnknownSession(_) | StorageError::Absent { .. } => HsrStatus::NotFound,
            StorageError::PlanMismatch(_) => HsrStatus::Mismatch,
            _ => HsrStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<RestoreError> for Fail {
    fn from(e: RestoreError) -> Self {
        match e {
            RestoreError::Storage(s) => s.into(),
            RestoreError::PlanMismatch { .. } | RestoreError::ConfigMismatch(_) => Fail(HsrStatus::Mismatch, e.to_string()),
            other => Fail(HsrStatus::InvalidArgument, other.to_string()),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Fail {
            fn from(e: $t) -> Self {
                Fail(HsrStatus::InvalidArgument, e.to_string())
            }
        }
    )*};
}
invalid_from!(hsr_core::model::ModelError, hsr_core::schedule::ScheduleError);

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HsrStatus {
    let (code, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (HsrStatus::Ok, String::new()),
        Ok(Err(Fail(code, msg))) => (code, msg),
        Err(_) => (HsrStatus::Internal, "panic inside hsr".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    code
}

fn null() -> Fail {
    Fail(HsrStatus::NullArgument, "null pointer argument".into())
}

unsafe fn as_ref<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

unsafe fn as_str<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(HsrStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hsr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Model with the given shape and weight seed; RoPE and layer norms on,
/// fp32 persisted state.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_model_new(
    n_layers: usize,
    d_hidden: usize,
    n_heads: usize,
    d_ffn: usize,
    vocab_size: usize,
    max_seq: usize,
    seed: u64,
    out: *mut *mut HsrModel,
) -> HsrStatus {
    guard(|| {
        let cfg = ModelConfig { n_layers, d_hidden, n_heads, d_ffn, vocab_size, max_seq, ..ModelConfig::desk() };
        put(out, HsrModel { model: Model::init(&cfg, seed)?, seed })
    })
}

/// Default desk-scale model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_model_new_desk(seed: u64, out: *mut *mut HsrModel) -> HsrStatus {
    guard(|| put(out, HsrModel { model: Model::init(&ModelConfig::desk(), seed)?, seed }))
}

/// # Safety
/// `m` must be null or come from `hsr_model_new*` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hsr_model_free(m: *mut HsrModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Store striped over `n_devices` directories `dev<i>` below `root`.
///
/// # Safety
/// `root` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_store_open(root: *const c_char, n_devices: usize, out: *mut *mut HsrStore) -> HsrStatus {
    guard(|| {
        let root = as_str(root)?;
        let pool = DevicePool::under(Path::new(root), n_devices, None)?;
        put(out, HsrStore(SessionStore::new(pool, hsr_core::storage::DEFAULT_BUFFER_BYTES)))
    })
}

/// # Safety
/// `s` must be null or come from `hsr_store_open` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hsr_store_free(s: *mut HsrStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Prefill `tokens` and persist the states the plan asks for under `session`.
///
/// # Safety
/// Handles must be live, `session` NUL-terminated, `tokens` `n_tokens` long.
#[no_mangle]
pub unsafe extern "C" fn hsr_prefill_save(
    model: *const HsrModel,
    store: *const HsrStore,
    session: *const c_char,
    tokens: *const u32,
    n_tokens: usize,
    plan_l_h: usize,
    plan_l_o: usize,
    complement: HsrComplement,
) -> HsrStatus {
    guard(|| {
        let m = as_ref(model)?;
        let s = &as_ref(store)?.0;
        let id = as_str(session)?;
        if tokens.is_null() {
            return Err(null());
        }
        let toks = std::slice::from_raw_parts(tokens, n_tokens).to_vec();
        let cfg = m.model.config();
        let plan = RestorationPlan::new(cfg.n_layers, plan_l_h, plan_l_o, complement.into())?;
        let (kv, fwd) = m.model.prefill(&TokenSeq::new(toks.clone(), cfg.vocab_size)?)?;
        s.create_session(SessionSpec {
            session_id: id.to_string(),
            config_hash: config_hash(cfg, m.seed),
            plan,
            d_hidden: cfg.d_hidden,
            elem_bytes: cfg.elem_bytes,
        })?;
        s.append_tokens(id, 0, &toks)?;
        s.snapshot_forward(id, &fwd.hidden, &kv, true)?;
        s.drain();
        s.finalize(id)?;
        Ok(())
    })
}

/// Rebuild a session's KV cache following the plan it was stored with.
/// `out_seconds` (optional) receives the wall-clock restore time.
///
/// # Safety
/// Handles must be live, `session` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hsr_restore(
    model: *const HsrModel,
    store: *const HsrStore,
    session: *const c_char,
    out: *mut *mut HsrKvCache,
    out_seconds: *mut f64,
) -> HsrStatus {
    guard(|| {
        let m = as_ref(model)?;
        let s = &as_ref(store)?.0;
        let id = as_str(session)?;
        let plan = s.open_session(id)?.plan;
        let (kv, tl) = restore(s, &m.model, id, &plan, &RestoreOptions::wall())?;
        if !out_seconds.is_null() {
            *out_seconds = tl.total_s();
        }
        put(out, HsrKvCache(kv))
    })
}

/// Prefill `tokens` straight into a cache, for comparison with a restore.
///
/// # Safety
/// `model` must be live, `tokens` `n_tokens` long, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hsr_prefill(
    model: *const HsrModel,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut *mut HsrKvCache,
) -> HsrStatus {
    guard(|| {
        let m = as_ref(model)?;
        if tokens.is_null() {
            return Err(null());
        }
        let toks = std::slice::from_raw_parts(tokens, n_tokens).to_vec();
        let (kv, _) = m.model.prefill(&TokenSeq::new(toks, m.model.config().vocab_size)?)?;
        put(out, HsrKvCache(kv))
    })
}

/// Tokens held by the cache.
///
/// # Safety
/// `kv` must be live; `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn hsr_kv_len(kv: *const HsrKvCache, out_len: *mut usize) -> HsrStatus {
    guard(|| {
        let kv = &as_ref(kv)?.0;
        if out_len.is_null() {
            return Err(null());
        }
        *out_len = kv.len().unwrap_or(0);
        Ok(())
    })
}

/// Copy one layer's K and V (tokens × d_hidden, row-major) out. Each buffer
/// must hold `cap` floats; `BUFFER_TOO_SMALL` if that is short.
///
/// # Safety
/// `kv` must be live; `k_out` and `v_out` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn hsr_kv_copy_layer(
    kv: *const HsrKvCache,
    layer: usize,
    k_out: *mut f32,
    v_out: *mut f32,
    cap: usize,
) -> HsrStatus {
    guard(|| {
        let kv = &as_ref(kv)?.0;
        if k_out.is_null() || v_out.is_null() {
            return Err(null());
        }
        if layer >= kv.n_layers() {
            return Err(Fail(HsrStatus::InvalidArgument, format!("layer {layer} of {}", kv.n_layers())));
        }
        let l = kv.layer(layer);
        let n = l.len * kv.d_hidden();
        if cap < n {
            return Err(Fail(HsrStatus::BufferTooSmall, format!("need {n} floats, have {cap}")));
        }
        std::ptr::copy_nonoverlapping(l.k.as_ptr(), k_out, n);
        std::ptr::copy_nonoverlapping(l.v.as_ptr(), v_out, n);
        Ok(())
    })
}

/// # Safety
/// `kv` must be null or a live cache handle.
#[no_mangle]
pub unsafe extern "C" fn hsr_kv_free(kv: *mut HsrKvCache) {
    if !kv.is_null() {
        drop(Box::from_raw(kv));
    }
}

/// Partition plan for per-layer stage times.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hsr_plan(
    io_h: f64,
    io_kv: f64,
    c_h: f64,
    c_token: f64,
    n_layers: usize,
    out_l_h: *mut usize,
    out_l_o: *mut usize,
    out_complement: *mut HsrComplement,
) -> HsrStatus {
    guard(|| {
        if out_l_h.is_null() || out_l_o.is_null() || out_complement.is_null() {
            return Err(null());
        }
        let p = schedule::plan(&ProfiledTimings { io_h, io_kv, c_h, c_token, n_layers })?;
        *out_l_h = p.l_h;
        *out_l_o = p.l_o;
        *out_complement = p.complement.into();
        Ok(())
    })
}
