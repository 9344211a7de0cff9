//! C ABI over the varformer core: load a trained checkpoint and a
//! vocabulary, then greedy-decode responses from any language that can
//! call C. Handles are opaque; functions return NULL (or a non-zero code)
//! on failure and record a message retrievable with `vf_last_error`.
//! Every entry point catches panics, so no unwind ever crosses the
//! boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use varformer::data::{detokenize, tokenize, Vocabulary};
use varformer::model::{AnyModel, LatentSource, ModelConfig};
use varformer::tensor::ParamStore;
use varformer::checkpoint;

// ── Last-error plumbing ──────────────────────────────────────────────

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message for the most recent failure on this thread, or NULL if the last
/// call succeeded. The pointer is valid until the next varformer call on
/// the same thread; do not free it.
#[no_mangle]
pub extern "C" fn vf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Crate version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ── Panic-safe call wrapper ──────────────────────────────────────────

/// Runs `f`, converting both Err and panic into a recorded error plus the
/// caller-supplied failure value.
fn guarded<R>(failure: R, f: impl FnOnce() -> Result<R, String>) -> R {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(value)) => value,
        Ok(Err(message)) => {
            set_last_error(message);
            failure
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {what}"));
            failure
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, String> {
    if ptr.is_null() {
        return Err(format!("{what} is NULL"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| format!("{what} is not valid UTF-8"))
}

// ── Opaque handles ───────────────────────────────────────────────────

/// A loaded checkpoint: parameters plus the architecture they encode.
#[repr(C)]
pub struct VfModel {
    _private: [u8; 0],
}

/// A loaded vocabulary (token <-> id table).
#[repr(C)]
pub struct VfVocab {
    _private: [u8; 0],
}

struct ModelInner {
    store: ParamStore<f64>,
    cfg: ModelConfig,
    model: AnyModel,
}

unsafe fn model_ref<'a>(ptr: *const VfModel) -> Result<&'a ModelInner, String> {
    (ptr as *const ModelInner).as_ref().ok_or_else(|| "model handle is NULL".into())
}

unsafe fn vocab_ref<'a>(ptr: *const VfVocab) -> Result<&'a Vocabulary, String> {
    (ptr as *const Vocabulary).as_ref().ok_or_else(|| "vocabulary handle is NULL".into())
}

// ── Loading and freeing ──────────────────────────────────────────────

/// Loads a checkpoint written by the `varformer` CLI. Returns NULL on
/// failure (see `vf_last_error`).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char) -> *mut VfModel {
    guarded(std::ptr::null_mut(), || {
        let path = required_str(path, "path")?;
        let loaded = checkpoint::load::<f64>(Path::new(path)).map_err(|e| e.to_string())?;
        let model = AnyModel::from_store(&loaded.store, &loaded.config);
        let inner = Box::new(ModelInner { store: loaded.store, cfg: loaded.config, model });
        Ok(Box::into_raw(inner) as *mut VfModel)
    })
}

/// Frees a model handle; NULL is a no-op.
///
/// # Safety
/// `model` must come from `vf_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model as *mut ModelInner));
    }
}

/// The model's variant name ("baseline", "gvt", or "svt") as a new string;
/// free it with `vf_string_free`. Returns NULL on failure.
///
/// # Safety
/// `model` must be a live handle from `vf_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vf_model_variant(model: *const VfModel) -> *mut c_char {
    guarded(std::ptr::null_mut(), || {
        let inner = model_ref(model)?;
        Ok(CString::new(inner.cfg.variant.to_string()).unwrap().into_raw())
    })
}

/// Loads a vocabulary file written by the `varformer` CLI. Returns NULL on
/// failure.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn vf_vocab_load(path: *const c_char) -> *mut VfVocab {
    guarded(std::ptr::null_mut(), || {
        let path = required_str(path, "path")?;
        let vocab = Vocabulary::load(Path::new(path)).map_err(|e| e.to_string())?;
        Ok(Box::into_raw(Box::new(vocab)) as *mut VfVocab)
    })
}

/// Frees a vocabulary handle; NULL is a no-op.
///
/// # Safety
/// `vocab` must come from `vf_vocab_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_vocab_free(vocab: *mut VfVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab as *mut Vocabulary));
    }
}

/// Number of entries in the vocabulary, or 0 on failure.
///
/// # Safety
/// `vocab` must be a live handle from `vf_vocab_load`.
#[no_mangle]
pub unsafe extern "C" fn vf_vocab_len(vocab: *const VfVocab) -> usize {
    guarded(0, || Ok(vocab_ref(vocab)?.len()))
}

/// Frees a string returned by this library; NULL is a no-op.
///
/// # Safety
/// `s` must come from a varformer function documented to return a new
/// string, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ── Decoding ─────────────────────────────────────────────────────────

/// Greedy-decodes a response to `context` (whitespace-tokenized UTF-8).
///
/// `meta` is an optional metadata label the model was trained with, or
/// NULL. When `sample` is true the latent is drawn from the prior with
/// `seed` (the baseline ignores it); otherwise the prior mean is used.
/// `max_new` of 0 means the model's trained response budget. Returns a new
/// string to free with `vf_string_free`, or NULL on failure.
///
/// # Safety
/// `model` and `vocab` must be live handles; `context` must be a
/// NUL-terminated UTF-8 string; `meta` must be NULL or the same.
#[no_mangle]
pub unsafe extern "C" fn vf_generate(
    model: *const VfModel,
    vocab: *const VfVocab,
    context: *const c_char,
    meta: *const c_char,
    seed: u64,
    sample: bool,
    max_new: usize,
) -> *mut c_char {
    guarded(std::ptr::null_mut(), || {
        let inner = model_ref(model)?;
        let vocab = vocab_ref(vocab)?;
        let context = required_str(context, "context")?;
        let meta = if meta.is_null() { None } else { Some(required_str(meta, "meta")?) };

        let meta_id = match meta {
            None => None,
            Some(label) => Some(
                inner.cfg.meta_labels.iter().position(|l| l == label).ok_or_else(|| {
                    format!(
                        "unknown meta label {label:?} (model knows {:?})",
                        inner.cfg.meta_labels
                    )
                })?,
            ),
        };

        let budget = inner.cfg.max_len - 1;
        let mut ids = vocab.encode(&tokenize(context));
        if ids.len() > budget {
            ids.drain(..ids.len() - budget);
        }
        let source = if sample {
            LatentSource::PriorSample { seed }
        } else {
            LatentSource::PriorMean
        };
        let max_new = if max_new == 0 { budget } else { max_new.min(budget) };
        let out = inner.model.decode_greedy(&inner.store, &ids, meta_id, source, max_new);
        let text = detokenize(&vocab.decode(&out));
        CString::new(text.replace('\0', "?")).map_err(|e| e.to_string()).map(CString::into_raw)
    })
}

// ── Tests (exercise the extern fns as plain Rust) ────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    use varformer::data::special;
    use varformer::model::Variant;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn tiny_fixture(dir: &Path) -> (CString, CString) {
        let words: Vec<String> = ["hello", "there", "friend"].iter().map(|s| s.to_string()).collect();
        let vocab = Vocabulary::build(std::iter::once(&words[..]), 1);
        let vocab_path = dir.join("vocab.txt");
        vocab.save(&vocab_path).unwrap();

        let mut cfg = ModelConfig::defaults(Variant::Gvt, vocab.len());
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_head = 4;
        cfg.latent_dim = 4;
        cfg.mlp_hidden = 8;
        cfg.max_len = 8;
        let mut store: ParamStore<f64> = ParamStore::new();
        let _ = AnyModel::build(&mut store, &cfg, 1);
        let ckpt_path = dir.join("model.ckpt");
        checkpoint::save(&ckpt_path, &store, &cfg, 0).unwrap();

        (c(vocab_path.to_str().unwrap()), c(ckpt_path.to_str().unwrap()))
    }

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(vf_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"), "version mismatch");
    }

    #[test]
    fn null_arguments_fail_with_message() {
        let model = unsafe { vf_model_load(std::ptr::null()) };
        assert!(model.is_null(), "NULL path produced a model");
        let msg = unsafe { CStr::from_ptr(vf_last_error()) }.to_str().unwrap();
        assert!(msg.contains("NULL"), "unhelpful error: {msg}");
        unsafe {
            vf_model_free(std::ptr::null_mut());
            vf_vocab_free(std::ptr::null_mut());
            vf_string_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn missing_checkpoint_reports_and_clears() {
        let path = c("/nonexistent/model.ckpt");
        let model = unsafe { vf_model_load(path.as_ptr()) };
        assert!(model.is_null(), "nonexistent checkpoint produced a model");
        assert!(!vf_last_error().is_null(), "no error recorded");

        let dir = tempfile::tempdir().unwrap();
        let (vocab_path, _) = tiny_fixture(dir.path());
        let vocab = unsafe { vf_vocab_load(vocab_path.as_ptr()) };
        assert!(!vocab.is_null());
        assert!(vf_last_error().is_null(), "successful call left a stale error");
        unsafe { vf_vocab_free(vocab) };
    }

    #[test]
    fn load_generate_free_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab_path, ckpt_path) = tiny_fixture(dir.path());

        let vocab = unsafe { vf_vocab_load(vocab_path.as_ptr()) };
        assert!(!vocab.is_null(), "vocab load failed");
        assert_eq!(unsafe { vf_vocab_len(vocab) }, special::RESERVED + 3);

        let model = unsafe { vf_model_load(ckpt_path.as_ptr()) };
        assert!(!model.is_null(), "model load failed");

        let variant = unsafe { vf_model_variant(model) };
        assert_eq!(unsafe { CStr::from_ptr(variant) }.to_str().unwrap(), "gvt");
        unsafe { vf_string_free(variant) };

        let context = c("hello there");
        let decode = |seed: u64, sample: bool| -> String {
            let out = unsafe {
                vf_generate(model, vocab, context.as_ptr(), std::ptr::null(), seed, sample, 0)
            };
            assert!(!out.is_null(), "generate failed: {}", unsafe {
                CStr::from_ptr(vf_last_error()).to_string_lossy()
            });
            let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
            unsafe { vf_string_free(out) };
            text
        };
        assert_eq!(decode(4, true), decode(4, true), "same seed must decode identically");
        assert_eq!(decode(1, false), decode(2, false), "prior mean must ignore the seed");

        let bad_meta = c("angry");
        let out = unsafe {
            vf_generate(model, vocab, context.as_ptr(), bad_meta.as_ptr(), 0, false, 0)
        };
        assert!(out.is_null(), "unknown meta label was accepted");
        let msg = unsafe { CStr::from_ptr(vf_last_error()) }.to_str().unwrap();
        assert!(msg.contains("angry"), "unhelpful error: {msg}");

        unsafe {
            vf_model_free(model);
            vf_vocab_free(vocab);
        }
    }
}
