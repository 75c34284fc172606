//! C ABI over the `repinv` library.
//!
//! Every fallible function returns a [`RepinvStatus`]; on failure the
//! message is available from [`repinv_last_error`] on the same thread.
//! Handles are opaque and released with their `_free` function. Output
//! arrays follow one convention: `*out_len` always receives the required
//! length, and `REPINV_STATUS_BUFFER_TOO_SMALL` is returned when `cap` is
//! smaller. All tensors are single precision.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use repinv::adapter::AdapterParams;
use repinv::checkpoint;
use repinv::dataset::Tokenizer;
use repinv::metrics;
use repinv::model::{LmParams, LoraParams};
use repinv::tensor::Tensor;
use repinv::trainer::{self, Prompt, TrainConfig};
use repinv::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Io = 4,
    Checkpoint = 5,
    Shape = 6,
    Index = 7,
    Length = 8,
    Layer = 9,
    Config = 10,
    Numeric = 11,
    Contract = 12,
    Other = 13,
    Panic = 14,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RepinvStatus {
    match e {
        Error::Io { .. } => RepinvStatus::Io,
        Error::Checkpoint(_) => RepinvStatus::Checkpoint,
        Error::Shape(_) => RepinvStatus::Shape,
        Error::Index(_) => RepinvStatus::Index,
        Error::Length { .. } => RepinvStatus::Length,
        Error::Layer { .. } => RepinvStatus::Layer,
        Error::Config(_) => RepinvStatus::Config,
        Error::Numeric(_) | Error::Divergence { .. } => RepinvStatus::Numeric,
        Error::Contract(_) => RepinvStatus::Contract,
        Error::Stage { source, .. } => status_of(source),
        _ => RepinvStatus::Other,
    }
}

/// Failure raised inside a call body.
enum Fail {
    Status(RepinvStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(RepinvStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RepinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RepinvStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RepinvStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(RepinvStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T: Copy>(
    src: &[T],
    out: *mut T,
    cap: usize,
    out_len: *mut usize,
) -> Result<(), Fail> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = src.len();
    if src.len() > cap {
        return Err(Fail::Status(
            RepinvStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {cap}", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

unsafe fn put_handle<H>(out: *mut *mut H, h: H) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(h));
    Ok(())
}

unsafe fn handle<'a, H>(h: *const H, what: &str) -> Result<&'a H, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on this thread.
#[no_mangle]
pub extern "C" fn repinv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn repinv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn repinv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

pub struct RepinvTokenizer {
    inner: Tokenizer,
}

/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn repinv_tokenizer_load(
    path: *const c_char,
    out: *mut *mut RepinvTokenizer,
) -> RepinvStatus {
    guard(|| {
        let inner = Tokenizer::load(&path_arg(path, "path")?)?;
        put_handle(out, RepinvTokenizer { inner })
    })
}

/// # Safety
/// `tok` must come from [`repinv_tokenizer_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn repinv_tokenizer_free(tok: *mut RepinvTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// # Safety
/// Pointers must be valid; `out` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn repinv_tokenizer_encode(
    tok: *const RepinvTokenizer,
    text: *const c_char,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> RepinvStatus {
    guard(|| {
        let t = handle(tok, "tokenizer")?;
        let ids = t.inner.encode(str_arg(text, "text")?);
        write_out(&ids, out, cap, out_len)
    })
}

/// Decodes ids into a newly allocated string released with
/// [`repinv_string_free`].
///
/// # Safety
/// Pointers must be valid; `ids` must hold `len` ids.
#[no_mangle]
pub unsafe extern "C" fn repinv_tokenizer_decode(
    tok: *const RepinvTokenizer,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> RepinvStatus {
    guard(|| {
        let t = handle(tok, "tokenizer")?;
        let text = t.inner.decode(slice_arg(ids, len, "ids")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(text.replace('\0', ""))
            .expect("nul removed")
            .into_raw();
        Ok(())
    })
}

pub struct RepinvLm {
    inner: LmParams<f32>,
}

/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn repinv_lm_load(
    path: *const c_char,
    out: *mut *mut RepinvLm,
) -> RepinvStatus {
    guard(|| {
        let inner = checkpoint::load_lm(&path_arg(path, "path")?)?;
        put_handle(out, RepinvLm { inner })
    })
}

/// # Safety
/// `lm` must come from [`repinv_lm_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn repinv_lm_free(lm: *mut RepinvLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Model width, or 0 for a null handle.
///
/// # Safety
/// `lm` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn repinv_lm_d_model(lm: *const RepinvLm) -> usize {
    lm.as_ref().map_or(0, |l| l.inner.spec.d_model)
}

/// Number of blocks, or 0 for a null handle.
///
/// # Safety
/// `lm` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn repinv_lm_n_layers(lm: *const RepinvLm) -> usize {
    lm.as_ref().map_or(0, |l| l.inner.spec.n_layers)
}

/// Last-token residual stream after block `layer` (1-based).
///
/// # Safety
/// Pointers must be valid; `out` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn repinv_lm_capture(
    lm: *const RepinvLm,
    ids: *const u32,
    len: usize,
    layer: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> RepinvStatus {
    guard(|| {
        let m = handle(lm, "lm")?;
        let h = m
            .inner
            .capture_representation(slice_arg(ids, len, "ids")?, layer)?;
        write_out(h.data(), out, cap, out_len)
    })
}

pub struct RepinvInverter {
    adapter: AdapterParams<f32>,
    lora: Option<LoraParams<f32>>,
    decoder: LmParams<f32>,
    prompt: Prompt,
    cfg: TrainConfig,
}

/// Loads an adapter, its decoding model, and optionally the decoder's
/// LoRA. The prompt strings default to the training defaults when null.
///
/// # Safety
/// String arguments must be valid C strings or null where allowed; `tok`
/// and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn repinv_inverter_load(
    adapter_path: *const c_char,
    decoder_path: *const c_char,
    lora_path: *const c_char,
    tok: *const RepinvTokenizer,
    prompt_sys: *const c_char,
    prompt_user: *const c_char,
    out: *mut *mut RepinvInverter,
) -> RepinvStatus {
    guard(|| {
        let t = handle(tok, "tokenizer")?;
        let adapter: AdapterParams<f32> =
            checkpoint::load_adapter(&path_arg(adapter_path, "adapter_path")?)?;
        let decoder: LmParams<f32> = checkpoint::load_lm(&path_arg(decoder_path, "decoder_path")?)?;
        let lora = if lora_path.is_null() {
            None
        } else {
            Some(checkpoint::load_lora(
                &path_arg(lora_path, "lora_path")?,
                &decoder,
            )?)
        };
        if adapter.config.d_out != decoder.spec.d_model {
            return Err(Error::Shape(format!(
                "adapter emits width {}, decoder has {}",
                adapter.config.d_out, decoder.spec.d_model
            ))
            .into());
        }
        let mut cfg = TrainConfig::default();
        if !prompt_sys.is_null() {
            cfg.prompt_sys = str_arg(prompt_sys, "prompt_sys")?.to_string();
        }
        if !prompt_user.is_null() {
            cfg.prompt_user = str_arg(prompt_user, "prompt_user")?.to_string();
        }
        let prompt = Prompt::encode(&t.inner, &cfg);
        put_handle(
            out,
            RepinvInverter {
                adapter,
                lora,
                decoder,
                prompt,
                cfg,
            },
        )
    })
}

/// # Safety
/// `inv` must come from [`repinv_inverter_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn repinv_inverter_free(inv: *mut RepinvInverter) {
    if !inv.is_null() {
        drop(Box::from_raw(inv));
    }
}

/// Greedily reconstructs up to `max_new` tokens from one representation
/// of `d` floats.
///
/// # Safety
/// Pointers must be valid; `h` must hold `d` floats and `out` `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn repinv_invert(
    inv: *const RepinvInverter,
    h: *const f32,
    d: usize,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> RepinvStatus {
    guard(|| {
        let i = handle(inv, "inverter")?;
        let h = Tensor::from_vec([d], slice_arg(h, d, "h")?.to_vec())?;
        let dec = trainer::decoder_for(&i.cfg, &i.decoder, i.lora.as_ref(), i.adapter.config.k);
        let ids = trainer::invert(&i.adapter, &dec, &i.prompt, &[&h], max_new)?;
        write_out(&ids[0], out, cap, out_len)
    })
}

/// ROUGE-N F1 over token ids.
///
/// # Safety
/// `reference` and `candidate` must hold the given counts; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn repinv_rouge_n(
    reference: *const u32,
    ref_len: usize,
    candidate: *const u32,
    cand_len: usize,
    n: usize,
    out: *mut f64,
) -> RepinvStatus {
    guard(|| {
        if n == 0 {
            return Err(Error::Config("n must be at least 1".into()).into());
        }
        let r = slice_arg(reference, ref_len, "reference")?;
        let c = slice_arg(candidate, cand_len, "candidate")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::rouge_n(r, c, n, 1.0);
        Ok(())
    })
}

/// ROUGE-L F1 over token ids.
///
/// # Safety
/// `reference` and `candidate` must hold the given counts; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn repinv_rouge_l(
    reference: *const u32,
    ref_len: usize,
    candidate: *const u32,
    cand_len: usize,
    out: *mut f64,
) -> RepinvStatus {
    guard(|| {
        let r = slice_arg(reference, ref_len, "reference")?;
        let c = slice_arg(candidate, cand_len, "candidate")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::rouge_l(r, c, 1.0);
        Ok(())
    })
}
