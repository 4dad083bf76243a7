//! C interface. Every function returns a status code; on failure the message
//! is available from `tg_last_error` on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings returned through
//! `char **` are owned by the caller and released with `tg_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use textgan::augment::synthesize;
use textgan::data::{Dataset, Provenance};
use textgan::gan::{js_divergence, optimal_discriminator, Generator, ToyDistribution};
use textgan::gumbel::{gumbel_softmax, gumbel_softmax_hard};
use textgan::io::checkpoint::{load_gan, load_lm};
use textgan::lm::{generate, perplexity, LmModel};
use textgan::tokenizer::{TokenSequence, Vocab, EOS};
use textgan::{Error, Tensor};

pub const TG_OK: i32 = 0;
/// A required pointer argument was null.
pub const TG_ERR_NULL: i32 = 1;
/// An argument was out of range or a string was not UTF-8.
pub const TG_ERR_ARGUMENT: i32 = 2;
/// A file could not be read.
pub const TG_ERR_IO: i32 = 3;
/// A checkpoint failed its integrity check or has an unsupported version.
pub const TG_ERR_CHECKPOINT: i32 = 4;
/// A computation produced a non-finite value.
pub const TG_ERR_NUMERIC: i32 = 5;
/// Any other failure, including a caught panic.
pub const TG_ERR_INTERNAL: i32 = 6;

/// Trained language model with its vocabulary.
pub struct TgLm {
    model: LmModel,
    vocab: Vocab,
}

/// Trained generator with its vocabulary.
pub struct TgGan {
    generator: Generator,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::File { .. } | Error::Io(_) => TG_ERR_IO,
            Error::Corrupt(_) | Error::Version { .. } => TG_ERR_CHECKPOINT,
            Error::Numeric { .. } | Error::Training { .. } => TG_ERR_NUMERIC,
            Error::Dimension { .. }
            | Error::Index { .. }
            | Error::Parameter(_)
            | Error::Length { .. }
            | Error::Input(_)
            | Error::Validation(_) => TG_ERR_ARGUMENT,
            _ => TG_ERR_INTERNAL,
        };
        Failure(code, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TG_OK,
        Ok(Err(Failure(code, message))) => {
            set_error(message);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            TG_ERR_INTERNAL
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(TG_ERR_NULL, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TG_ERR_ARGUMENT, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(TG_ERR_INTERNAL, "output contains a nul byte".into()))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on this thread.
#[no_mangle]
pub extern "C" fn tg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a language-model checkpoint and the vocabulary file it references.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_lm_load(path: *const c_char, out: *mut *mut TgLm) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let (model, vref) = load_lm(path)?;
        let vocab = vref.resolve(path)?;
        *out = Box::into_raw(Box::new(TgLm { model, vocab }));
        Ok(())
    })
}

/// # Safety
/// `lm` must come from `tg_lm_load` and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tg_lm_free(lm: *mut TgLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Vocabulary size, reserved ids included.
///
/// # Safety
/// `lm` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_lm_vocab_size(lm: *const TgLm, out: *mut usize) -> i32 {
    guard(|| {
        let lm = lm.as_ref().ok_or_else(|| null("lm"))?;
        *out_arg(out, "out")? = lm.vocab.len();
        Ok(())
    })
}

/// Perplexity over the non-empty lines of `text`.
///
/// # Safety
/// `lm` must be a live handle, `text` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tg_lm_perplexity(lm: *const TgLm, text: *const c_char, out: *mut f64) -> i32 {
    guard(|| {
        let lm = lm.as_ref().ok_or_else(|| null("lm"))?;
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let lines = text.lines().filter(|l| !l.trim().is_empty());
        let data = Dataset::from_lines(&lm.vocab, lines, Provenance::Real, lm.model.config().max_seq_len);
        *out = perplexity(&lm.model, &data)?;
        Ok(())
    })
}

/// Continues `prefix` by up to `max_new` characters sampled at `temperature`
/// (greedy when not positive). Writes the prefix plus continuation to `out`.
///
/// # Safety
/// `lm` must be a live handle, `prefix` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tg_lm_generate(
    lm: *const TgLm,
    prefix: *const c_char,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let lm = lm.as_ref().ok_or_else(|| null("lm"))?;
        let prefix = str_arg(prefix, "prefix")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let mut ids = lm.vocab.encode(prefix).ids;
        if ids.last() == Some(&EOS) {
            ids.pop();
        }
        let seq = generate(&lm.model, &TokenSequence::new(ids), max_new, temperature, seed)?;
        *out = c_string(lm.vocab.decode(&seq.ids)?)?;
        Ok(())
    })
}

/// Loads a GAN checkpoint and the vocabulary file it references.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_gan_load(path: *const c_char, out: *mut *mut TgGan) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let (generator, _, vref) = load_gan(path)?;
        let vocab = vref.resolve(path)?;
        *out = Box::into_raw(Box::new(TgGan { generator, vocab }));
        Ok(())
    })
}

/// # Safety
/// `gan` must come from `tg_gan_load` and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tg_gan_free(gan: *mut TgGan) {
    if !gan.is_null() {
        drop(Box::from_raw(gan));
    }
}

/// `n` hard generator samples decoded to text, one per line.
///
/// # Safety
/// `gan` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_gan_sample(gan: *const TgGan, n: usize, tau: f64, seed: u64, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let gan = gan.as_ref().ok_or_else(|| null("gan"))?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        // room for BOS and EOS around a full-length sample
        let max_len = gan.generator.config().seq_len + 2;
        let data = synthesize(&gan.generator, &gan.vocab, n, tau, seed, max_len)?;
        let mut text = String::new();
        for seq in data.sequences() {
            text.push_str(&gan.vocab.decode(&seq.ids)?);
            text.push('\n');
        }
        *out = c_string(text)?;
        Ok(())
    })
}

unsafe fn toy(seq_len: usize, vocab_size: usize, p: *const f64, what: &str) -> Result<ToyDistribution, Failure> {
    let n = u32::try_from(seq_len)
        .ok()
        .and_then(|l| vocab_size.checked_pow(l))
        .filter(|&n| n <= 1 << 16)
        .ok_or_else(|| Failure(TG_ERR_ARGUMENT, format!("{vocab_size}^{seq_len} table is too large")))?;
    Ok(ToyDistribution::new(seq_len, vocab_size, slice_arg(p, n, what)?.to_vec())?)
}

/// Jensen-Shannon divergence in nats between two tables over all sequences of
/// `seq_len` tokens from `vocab_size` symbols (`vocab_size^seq_len` entries,
/// first position most significant).
///
/// # Safety
/// `p` and `q` must hold `vocab_size^seq_len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_js_divergence(
    seq_len: usize,
    vocab_size: usize,
    p: *const f64,
    q: *const f64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = toy(seq_len, vocab_size, p, "p")?;
        let q = toy(seq_len, vocab_size, q, "q")?;
        *out = js_divergence(&p, &q)?;
        Ok(())
    })
}

/// Optimal discriminator output at sequence `x` for the tables `p_data` and
/// `p_g` laid out as in `tg_js_divergence`.
///
/// # Safety
/// `p_data` and `p_g` must hold `vocab_size^seq_len` doubles, `x` must hold
/// `seq_len` ids, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_optimal_discriminator(
    seq_len: usize,
    vocab_size: usize,
    p_data: *const f64,
    p_g: *const f64,
    x: *const usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pd = toy(seq_len, vocab_size, p_data, "p_data")?;
        let pg = toy(seq_len, vocab_size, p_g, "p_g")?;
        *out = optimal_discriminator(&pd, &pg, slice_arg(x, seq_len, "x")?)?;
        Ok(())
    })
}

/// One Gumbel-Softmax draw over `k` logits at temperature `tau`, written to
/// `out` (`k` doubles). `hard` non-zero gives the one-hot sample.
///
/// # Safety
/// `logits` must hold `k` doubles and `out` must have room for `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn tg_gumbel_softmax(
    logits: *const f64,
    k: usize,
    tau: f64,
    hard: i32,
    seed: u64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        if k == 0 {
            return Err(Failure(TG_ERR_ARGUMENT, "k must be positive".into()));
        }
        let logits = Tensor::new(&[1, k], slice_arg(logits, k, "logits")?.to_vec())?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = textgan::rng::stream(seed, "ffi-gumbel");
        let sample = if hard != 0 {
            gumbel_softmax_hard(&logits, tau, &mut rng)?
        } else {
            gumbel_softmax(&logits, tau, &mut rng)?
        };
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(sample.y.data());
        Ok(())
    })
}
