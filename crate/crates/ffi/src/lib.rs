//! C ABI over the starlab library.
//!
//! Models and corpora are opaque handles created by `*_load` and released
//! by `*_free`. Every fallible call returns a [`StarStatus`]; on failure the
//! message is kept per thread and read with [`star_last_error`]. Output
//! buffers follow one protocol: the required element count is always
//! stored in `len_out`, and nothing is written when `cap` is too small.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use starlab::corpus::{load_corpus, Corpus, Token};
use starlab::decoding::{greedy_decode, DecodeOptions};
use starlab::indicators::{score_trace, star_combine as combine_scores, IndicatorConfig, Variant};
use starlab::metrics::{edit_distance_value, nce};
use starlab::model::{load_checkpoint, Model};
use starlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Input = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StarVariant {
    History = 0,
    Future = 1,
    Both = 2,
}

/// Indicator settings; see [`star_indicator_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarIndicatorConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub renorm_star: bool,
    pub variant: StarVariant,
}

/// Opaque model handle.
pub struct StarModel {
    inner: Model,
}

/// Opaque corpus handle.
pub struct StarCorpus {
    inner: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(StarStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => StarStatus::InvalidArgument,
            Error::Input(_) | Error::Length { .. } | Error::Degenerate(_) | Error::Undefined(_) => StarStatus::Input,
            Error::Parse { .. } | Error::Version { .. } | Error::Checkpoint(_) => StarStatus::Format,
            Error::Io { .. } => StarStatus::Io,
            Error::NonFiniteGradient { .. } => StarStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: StarStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StarStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (StarStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(_) => (StarStatus::Panic, "internal panic".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(StarStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(StarStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(StarStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(StarStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T: Copy>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(StarStatus::NullPointer, &format!("{what} is null")));
    }
    *p = v;
    Ok(())
}

/// Copies `src` into `dst` when it fits; always reports the needed length.
unsafe fn emit<T: Copy>(src: &[T], dst: *mut T, cap: usize, len_out: *mut usize) -> Result<(), Failure> {
    store(len_out, src.len(), "len_out")?;
    if src.len() > cap {
        return Err(fail(
            StarStatus::BufferTooSmall,
            &format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(fail(StarStatus::NullPointer, "output buffer is null"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

impl StarIndicatorConfig {
    fn split(&self) -> (IndicatorConfig, Variant) {
        let variant = match self.variant {
            StarVariant::History => Variant::History,
            StarVariant::Future => Variant::Future,
            StarVariant::Both => Variant::Both,
        };
        (
            IndicatorConfig {
                lambda: self.lambda,
                tau: self.tau,
                epsilon: self.epsilon,
                renorm_star: self.renorm_star,
            },
            variant,
        )
    }
}

fn utterance(corpus: &StarCorpus, index: usize) -> Result<&starlab::corpus::Utterance, Failure> {
    corpus.inner.utterances.get(index).ok_or_else(|| {
        fail(
            StarStatus::InvalidArgument,
            &format!("index {index} outside corpus of {}", corpus.inner.len()),
        )
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn star_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes. Returns the full length including the NUL.
///
/// # Safety
/// `buf` must be null or valid for `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn star_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

#[no_mangle]
pub extern "C" fn star_indicator_config_default() -> StarIndicatorConfig {
    let c = IndicatorConfig::default();
    StarIndicatorConfig {
        lambda: c.lambda,
        tau: c.tau,
        epsilon: c.epsilon,
        renorm_star: c.renorm_star,
        variant: StarVariant::Both,
    }
}

/// Loads a checkpoint. `*out` is null unless the call succeeds.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_model_load(path: *const c_char, out: *mut *mut StarModel) -> StarStatus {
    guard(|| {
        store(out, std::ptr::null_mut(), "out")?;
        let (inner, _) = load_checkpoint(&c_path(path)?)?;
        store(out, Box::into_raw(Box::new(StarModel { inner })), "out")
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`star_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn star_model_free(model: *mut StarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_model_vocab_size(model: *const StarModel, out: *mut u32) -> StarStatus {
    guard(|| store(out, reference(model, "model")?.inner.config.vocab.size, "out"))
}

/// Loads a corpus file. `*out` is null unless the call succeeds.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_corpus_load(path: *const c_char, out: *mut *mut StarCorpus) -> StarStatus {
    guard(|| {
        store(out, std::ptr::null_mut(), "out")?;
        let inner = load_corpus(&c_path(path)?)?;
        store(out, Box::into_raw(Box::new(StarCorpus { inner })), "out")
    })
}

/// Releases a corpus; null is ignored.
///
/// # Safety
/// `corpus` must come from [`star_corpus_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn star_corpus_free(corpus: *mut StarCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_corpus_len(corpus: *const StarCorpus, out: *mut usize) -> StarStatus {
    guard(|| store(out, reference(corpus, "corpus")?.inner.len(), "out"))
}

/// Reference tokens of utterance `index`.
///
/// # Safety
/// Handles must be live; `buf` valid for `cap` tokens; `len_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_corpus_reference(
    corpus: *const StarCorpus,
    index: usize,
    buf: *mut u32,
    cap: usize,
    len_out: *mut usize,
) -> StarStatus {
    guard(|| {
        let u = utterance(reference(corpus, "corpus")?, index)?;
        let r = u
            .reference
            .as_deref()
            .ok_or_else(|| fail(StarStatus::Input, &format!("utterance {} has no reference", u.id)))?;
        emit(r, buf, cap, len_out)
    })
}

/// Greedy hypothesis of utterance `index`: content tokens without prompt
/// or eos.
///
/// # Safety
/// Handles must be live; `buf` valid for `cap` tokens; `len_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_decode_greedy(
    model: *const StarModel,
    corpus: *const StarCorpus,
    index: usize,
    buf: *mut u32,
    cap: usize,
    len_out: *mut usize,
) -> StarStatus {
    guard(|| {
        let m = &reference(model, "model")?.inner;
        let u = utterance(reference(corpus, "corpus")?, index)?;
        let trace = greedy_decode(m, u, &DecodeOptions::default())?;
        emit(trace.content(), buf, cap, len_out)
    })
}

/// Normalized confidence, attentive and combined scores of the greedy
/// hypothesis of utterance `index`, one per scored position (content
/// tokens then eos). The three buffers share `cap`.
///
/// # Safety
/// Handles must be live; `config` valid; each buffer valid for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn star_score_utterance(
    model: *const StarModel,
    corpus: *const StarCorpus,
    index: usize,
    config: *const StarIndicatorConfig,
    conf: *mut f64,
    attn: *mut f64,
    star: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> StarStatus {
    guard(|| {
        let m = &reference(model, "model")?.inner;
        let u = utterance(reference(corpus, "corpus")?, index)?;
        let (cfg, variant) = reference(config, "config")?.split();
        let trace = greedy_decode(m, u, &DecodeOptions::default())?;
        let s = score_trace(&trace, &cfg, variant)?;
        emit(&s.conf, conf, cap, len_out)?;
        emit(&s.attn, attn, cap, len_out)?;
        emit(&s.star, star, cap, len_out)
    })
}

/// Combined scores of `n` (confidence, attentive) pairs.
///
/// # Safety
/// `conf`, `attn` and `out` must be valid for `n` values; `config` valid.
#[no_mangle]
pub unsafe extern "C" fn star_combine(
    conf: *const f64,
    attn: *const f64,
    n: usize,
    config: *const StarIndicatorConfig,
    out: *mut f64,
) -> StarStatus {
    guard(|| {
        let (cfg, _) = reference(config, "config")?.split();
        let s = combine_scores(slice(conf, n, "conf")?, slice(attn, n, "attn")?, &cfg)?;
        let mut len = 0;
        emit(&s, out, n, &mut len)
    })
}

/// Levenshtein distance between two token sequences.
///
/// # Safety
/// `a` and `b` must be valid for `na` and `nb` tokens; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_edit_distance(
    a: *const u32,
    na: usize,
    b: *const u32,
    nb: usize,
    out: *mut usize,
) -> StarStatus {
    guard(|| {
        let a: &[Token] = slice(a, na, "a")?;
        let b: &[Token] = slice(b, nb, "b")?;
        store(out, edit_distance_value(a, b), "out")
    })
}

/// Normalized cross-entropy of scores against correctness labels.
///
/// # Safety
/// `scores` and `labels` must be valid for `n` values; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn star_nce(scores: *const f64, labels: *const bool, n: usize, out: *mut f64) -> StarStatus {
    guard(|| {
        let v = nce(slice(scores, n, "scores")?, slice(labels, n, "labels")?)?;
        store(out, v, "out")
    })
}
