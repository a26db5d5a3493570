//! C ABI over the cirforge library.
//!
//! Every fallible function returns a [`CirforgeStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can be
//! read with [`cirforge_last_error`]. Strings handed out by this library must be
//! released with [`cirforge_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cirforge::metrics::{
    average_precision_at_k, map_at_k, recall_at_k, RankedQuery, RelevanceRecord, RetrievalRun,
};
use cirforge::model::{contains_forbidden_verb, cosine_similarity};
use cirforge::permute::{generate_permutations, join, PermuteConfig};
use cirforge::phash::{compute_phash, GrayRaster};
use cirforge::tokenizer::Vocabulary;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirforgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Loaded CLIP BPE vocabulary.
pub struct CirforgeTokenizer(Vocabulary);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CirforgeStatus, String);

impl Failure {
    fn new(status: CirforgeStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CirforgeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CirforgeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside cirforge");
            CirforgeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(
            CirforgeStatus::NullPointer,
            format!("{name} is null"),
        ));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure::new(
            CirforgeStatus::InvalidUtf8,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn str_array<'a>(
    p: *const *const c_char,
    n: usize,
    name: &str,
) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(vec![]);
    }
    if p.is_null() {
        return Err(Failure::new(
            CirforgeStatus::NullPointer,
            format!("{name} is null"),
        ));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .enumerate()
        .map(|(i, &s)| str_arg(s, &format!("{name}[{i}]")))
        .collect()
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(CirforgeStatus::NullPointer, format!("{name} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| {
        Failure::new(
            CirforgeStatus::InvalidArgument,
            "result contains a NUL byte",
        )
    })
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cirforge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cirforge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// Paths must be NUL-terminated; `out_tok` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirforge_tokenizer_load(
    vocab_path: *const c_char,
    merges_path: *const c_char,
    out_tok: *mut *mut CirforgeTokenizer,
) -> CirforgeStatus {
    guard(|| {
        let v = str_arg(vocab_path, "vocab_path")?;
        let m = str_arg(merges_path, "merges_path")?;
        let slot = out(out_tok, "out_tok")?;
        let vocab = Vocabulary::load(Path::new(v), Path::new(m)).map_err(|e| {
            let status = if matches!(e, cirforge::tokenizer::TokenizerError::Io { .. }) {
                CirforgeStatus::Io
            } else {
                CirforgeStatus::Parse
            };
            Failure::new(status, e.to_string())
        })?;
        *slot = Box::into_raw(Box::new(CirforgeTokenizer(vocab)));
        Ok(())
    })
}

/// # Safety
/// `tok` must be null or a handle from [`cirforge_tokenizer_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cirforge_tokenizer_free(tok: *mut CirforgeTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

unsafe fn tokenizer<'a>(tok: *const CirforgeTokenizer) -> Result<&'a Vocabulary, Failure> {
    tok.as_ref()
        .map(|t| &t.0)
        .ok_or_else(|| Failure::new(CirforgeStatus::NullPointer, "tokenizer is null"))
}

/// Encodes `text` with start and end markers. Writes at most `cap` ids and
/// always reports the full length in `out_len`; returns `BufferTooSmall`
/// when `cap` is short. `ids` may be null when `cap` is 0.
///
/// # Safety
/// `ids` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cirforge_tokenizer_encode(
    tok: *const CirforgeTokenizer,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> CirforgeStatus {
    guard(|| {
        let v = tokenizer(tok)?;
        let text = str_arg(text, "text")?;
        let len = out(out_len, "out_len")?;
        let seq = v.encode(text);
        *len = seq.ids.len();
        if cap < seq.ids.len() {
            return Err(Failure::new(
                CirforgeStatus::BufferTooSmall,
                format!("need {} ids, buffer holds {cap}", seq.ids.len()),
            ));
        }
        if ids.is_null() {
            return Err(Failure::new(CirforgeStatus::NullPointer, "ids is null"));
        }
        std::slice::from_raw_parts_mut(ids, seq.ids.len()).copy_from_slice(&seq.ids);
        Ok(())
    })
}

/// Token count as checked against the caption budget.
///
/// # Safety
/// `text` must be NUL-terminated; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirforge_tokenizer_count(
    tok: *const CirforgeTokenizer,
    text: *const c_char,
    count_special: bool,
    out_count: *mut usize,
) -> CirforgeStatus {
    guard(|| {
        let v = tokenizer(tok)?;
        let text = str_arg(text, "text")?;
        *out(out_count, "out_count")? = v.budget_count(text, count_special);
        Ok(())
    })
}

/// # Safety
/// `a` and `b` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirforge_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out_sim: *mut f64,
) -> CirforgeStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(Failure::new(CirforgeStatus::NullPointer, "vector is null"));
        }
        let (a, b) = (
            std::slice::from_raw_parts(a, len),
            std::slice::from_raw_parts(b, len),
        );
        let s = cosine_similarity(a, b)
            .map_err(|e| Failure::new(CirforgeStatus::InvalidArgument, e.to_string()))?;
        *out(out_sim, "out_sim")? = s;
        Ok(())
    })
}

/// 64-bit pHash of a row-major 8-bit grayscale buffer, at least 32x32.
///
/// # Safety
/// `pixels` must point to `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn cirforge_phash_gray(
    pixels: *const u8,
    width: usize,
    height: usize,
    out_hash: *mut u64,
) -> CirforgeStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(Failure::new(CirforgeStatus::NullPointer, "pixels is null"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Failure::new(CirforgeStatus::InvalidArgument, "image size overflows"))?;
        let data = std::slice::from_raw_parts(pixels, n)
            .iter()
            .map(|&p| f64::from(p))
            .collect();
        let bad = |e: cirforge::phash::PhashError| {
            Failure::new(CirforgeStatus::InvalidArgument, e.to_string())
        };
        let raster = GrayRaster::new(width, height, data).map_err(bad)?;
        *out(out_hash, "out_hash")? = compute_phash(&raster).map_err(bad)?.bits;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn cirforge_hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Joins two or three captions into one compound caption.
///
/// # Safety
/// `parts` must point to `n` NUL-terminated strings. Free the result with
/// [`cirforge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cirforge_join(
    parts: *const *const c_char,
    n: usize,
    out_text: *mut *mut c_char,
) -> CirforgeStatus {
    guard(|| {
        let parts = str_array(parts, n, "parts")?;
        let slot = out(out_text, "out_text")?;
        let text = join(&parts).ok_or_else(|| {
            Failure::new(
                CirforgeStatus::InvalidArgument,
                format!("can join 2 or 3 captions, got {n}"),
            )
        })?;
        *slot = into_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `text` must be NUL-terminated; `out_found` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirforge_has_forbidden_verb(
    text: *const c_char,
    out_found: *mut bool,
) -> CirforgeStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        *out(out_found, "out_found")? = contains_forbidden_verb(text);
        Ok(())
    })
}

/// AP@k of one ranking, normalised by `min(k, n_relevant)`.
///
/// # Safety
/// `ranking` and `relevant` must point to `n_ranking` and `n_relevant` strings.
#[no_mangle]
pub unsafe extern "C" fn cirforge_average_precision(
    ranking: *const *const c_char,
    n_ranking: usize,
    relevant: *const *const c_char,
    n_relevant: usize,
    k: usize,
    out_ap: *mut f64,
) -> CirforgeStatus {
    guard(|| {
        let ranking: Vec<String> = str_array(ranking, n_ranking, "ranking")?
            .into_iter()
            .map(String::from)
            .collect();
        let relevant = str_array(relevant, n_relevant, "relevant")?
            .into_iter()
            .map(String::from)
            .collect();
        let slot = out(out_ap, "out_ap")?;
        if k == 0 {
            return Err(Failure::new(
                CirforgeStatus::InvalidArgument,
                "k must be positive",
            ));
        }
        *slot = average_precision_at_k(&ranking, &relevant, k);
        Ok(())
    })
}

/// Recall@k and mAP@k over a run. Both inputs are JSON arrays:
/// `[{"query_id", "ranking"}]` and `[{"query_id", "relevant"}]`.
///
/// # Safety
/// Strings must be NUL-terminated; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirforge_evaluate(
    run_json: *const c_char,
    relevance_json: *const c_char,
    k: usize,
    out_recall: *mut f64,
    out_map: *mut f64,
) -> CirforgeStatus {
    guard(|| {
        let parse = |e: serde_json::Error| Failure::new(CirforgeStatus::Parse, e.to_string());
        let queries: Vec<RankedQuery> =
            serde_json::from_str(str_arg(run_json, "run_json")?).map_err(parse)?;
        let rel: Vec<RelevanceRecord> =
            serde_json::from_str(str_arg(relevance_json, "relevance_json")?).map_err(parse)?;
        let (r, m) = (out(out_recall, "out_recall")?, out(out_map, "out_map")?);
        let invalid = |e: cirforge::metrics::MetricsError| {
            Failure::new(CirforgeStatus::InvalidArgument, e.to_string())
        };
        let run = RetrievalRun::new(queries, rel).map_err(invalid)?;
        *r = recall_at_k(&run, k).map_err(invalid)?;
        *m = map_at_k(&run, k).map_err(invalid)?;
        Ok(())
    })
}

/// Atomic and compound captions for one pair. `captions_json` is a JSON array
/// of strings; `config_json` is null for defaults or a permute config object.
/// The result is a JSON array of caption objects.
///
/// # Safety
/// Strings must be NUL-terminated. Free the result with [`cirforge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cirforge_permute(
    tok: *const CirforgeTokenizer,
    captions_json: *const c_char,
    config_json: *const c_char,
    pair_id: *const c_char,
    out_json: *mut *mut c_char,
) -> CirforgeStatus {
    guard(|| {
        let v = tokenizer(tok)?;
        let parse = |e: serde_json::Error| Failure::new(CirforgeStatus::Parse, e.to_string());
        let captions: Vec<String> =
            serde_json::from_str(str_arg(captions_json, "captions_json")?).map_err(parse)?;
        let cfg: PermuteConfig = if config_json.is_null() {
            PermuteConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(parse)?
        };
        cfg.validate()
            .map_err(|e| Failure::new(CirforgeStatus::InvalidArgument, e.to_string()))?;
        let pair_id = str_arg(pair_id, "pair_id")?;
        let slot = out(out_json, "out_json")?;
        let result = generate_permutations(&captions, v, &cfg, pair_id);
        *slot = into_c_string(serde_json::to_string(&result).expect("captions serialise"))?;
        Ok(())
    })
}
