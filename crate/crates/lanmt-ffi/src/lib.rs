//! C ABI for embedding the translator: opaque session handle, status
//! codes, and a thread-local last-error message. All strings are UTF-8
//! and NUL-terminated; strings returned by this library must be freed
//! with `lanmt_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;

use lanmt::corpus::Vocab;
use lanmt::inference::{deterministic_inference, latent_search, InferenceOptions};
use lanmt::model::LaNMTModel;
use lanmt::teacher::TeacherModel;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LanmtStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The requested operation needs a teacher model but the session
    /// was opened without one.
    NoTeacher = 3,
    /// Any other failure; details via `lanmt_last_error`.
    Error = 4,
}

/// Opaque translation session: model, vocabulary, optional teacher.
pub struct LanmtSession {
    model: LaNMTModel,
    vocab: Vocab,
    teacher: Option<TeacherModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Message for the most recent error on this thread, or null if the
/// last call succeeded. Valid until the next library call on the same
/// thread; do not free.
#[no_mangle]
pub extern "C" fn lanmt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(ptr::null(), |message| message.as_ptr())
    })
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn lanmt_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn utf8_arg<'a>(s: *const c_char) -> Result<&'a str, LanmtStatus> {
    if s.is_null() {
        set_error("null string argument".into());
        return Err(LanmtStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".into());
        LanmtStatus::InvalidUtf8
    })
}

/// Opens a session from checkpoint files. `teacher_path` may be null;
/// latent search then becomes unavailable. On success writes the
/// session handle to `out`.
///
/// # Safety
/// Path arguments must be valid NUL-terminated strings (or null where
/// documented); `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lanmt_session_open(
    model_path: *const c_char,
    vocab_path: *const c_char,
    teacher_path: *const c_char,
    out: *mut *mut LanmtSession,
) -> LanmtStatus {
    clear_error();
    if out.is_null() {
        set_error("null output pointer".into());
        return LanmtStatus::NullArgument;
    }
    let model_path = match unsafe { utf8_arg(model_path) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let vocab_path = match unsafe { utf8_arg(vocab_path) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let model = match LaNMTModel::load(Path::new(model_path)) {
        Ok(m) => m,
        Err(e) => {
            set_error(format!("loading model {model_path}: {e}"));
            return LanmtStatus::Error;
        }
    };
    let vocab = match Vocab::load(Path::new(vocab_path)) {
        Ok(v) => v,
        Err(e) => {
            set_error(format!("loading vocab {vocab_path}: {e}"));
            return LanmtStatus::Error;
        }
    };
    let teacher = if teacher_path.is_null() {
        None
    } else {
        let teacher_path = match unsafe { utf8_arg(teacher_path) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match TeacherModel::load(Path::new(teacher_path)) {
            Ok(t) => Some(t),
            Err(e) => {
                set_error(format!("loading teacher {teacher_path}: {e}"));
                return LanmtStatus::Error;
            }
        }
    };
    if model.config.vocab_size != vocab.size() {
        set_error(format!(
            "model vocab size {} != vocabulary size {}",
            model.config.vocab_size,
            vocab.size()
        ));
        return LanmtStatus::Error;
    }
    let session = Box::new(LanmtSession { model, vocab, teacher });
    unsafe { *out = Box::into_raw(session) };
    LanmtStatus::Ok
}

/// Frees a session. Null is a no-op.
///
/// # Safety
/// `session` must be a handle from `lanmt_session_open`, not yet closed.
#[no_mangle]
pub unsafe extern "C" fn lanmt_session_close(session: *mut LanmtSession) {
    if !session.is_null() {
        drop(unsafe { Box::from_raw(session) });
    }
}

fn translate_line(
    session: &LanmtSession,
    source: &str,
    steps: usize,
    candidates: usize,
    temperature: f64,
    seed: u64,
) -> Result<String, (LanmtStatus, String)> {
    let tokens: Vec<String> = source.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Ok(String::new());
    }
    let x = session.vocab.encode(&tokens);
    let opts = InferenceOptions { steps, ..Default::default() };
    let ids = if candidates > 1 {
        let teacher = session.teacher.as_ref().ok_or((
            LanmtStatus::NoTeacher,
            "latent search needs a session opened with a teacher checkpoint".to_string(),
        ))?;
        latent_search(&session.model, teacher, &x, candidates, temperature, &opts, seed)
            .map_err(|e| (LanmtStatus::Error, e.to_string()))?
            .tokens
    } else {
        deterministic_inference(&session.model, &x, &opts)
            .map_err(|e| (LanmtStatus::Error, e.to_string()))?
            .final_tokens()
            .to_vec()
    };
    let words = session
        .vocab
        .decode(&ids)
        .map_err(|e| (LanmtStatus::Error, e.to_string()))?;
    Ok(words.join(" "))
}

fn emit_string(text: String, out: *mut *mut c_char) -> LanmtStatus {
    match CString::new(text) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            LanmtStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL".into());
            LanmtStatus::Error
        }
    }
}

/// Translates one whitespace-tokenized source line with deterministic
/// iterative refinement (`steps` = T). Writes a heap string to `out`;
/// free it with `lanmt_string_free`.
///
/// # Safety
/// `session` must be an open session handle; `source` a valid string;
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lanmt_translate(
    session: *const LanmtSession,
    source: *const c_char,
    steps: usize,
    out: *mut *mut c_char,
) -> LanmtStatus {
    clear_error();
    if session.is_null() || out.is_null() {
        set_error("null session or output pointer".into());
        return LanmtStatus::NullArgument;
    }
    let source = match unsafe { utf8_arg(source) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let session = unsafe { &*session };
    match translate_line(session, source, steps, 1, 0.0, 0) {
        Ok(text) => emit_string(text, out),
        Err((status, message)) => {
            set_error(message);
            status
        }
    }
}

/// Translates one line via latent search: `candidates` prior samples at
/// `temperature`, each refined `steps` iterations, rescored by the
/// teacher. Requires a session opened with a teacher checkpoint.
///
/// # Safety
/// Same contracts as `lanmt_translate`.
#[no_mangle]
pub unsafe extern "C" fn lanmt_latent_search(
    session: *const LanmtSession,
    source: *const c_char,
    steps: usize,
    candidates: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> LanmtStatus {
    clear_error();
    if session.is_null() || out.is_null() {
        set_error("null session or output pointer".into());
        return LanmtStatus::NullArgument;
    }
    if candidates == 0 {
        set_error("candidates must be >= 1".into());
        return LanmtStatus::Error;
    }
    let source = match unsafe { utf8_arg(source) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let session = unsafe { &*session };
    let candidates = candidates.max(2); // force the search path
    match translate_line(session, source, steps, candidates, temperature, seed) {
        Ok(text) => emit_string(text, out),
        Err((status, message)) => {
            set_error(message);
            status
        }
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lanmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
