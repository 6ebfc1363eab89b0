//! C ABI over the msvq toolkit.
//!
//! Every fallible function returns an [`MsvqStatus`]; on failure the message is available
//! from [`msvq_last_error_message`] on the same thread until the next call. Handles are
//! opaque and must be released with their matching `*_free` function. Panics never cross
//! the boundary; they surface as [`MsvqStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use msvq::metrics::{self, TokenSequence};
use msvq::mhvq::{self, MultiHeadCodebook};
use msvq::pipeline::commands::{self, Artifacts};
use msvq::pipeline::format;
use msvq::{Error, FeatureSequence, Rows};

/// Result codes. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsvqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidInput = 3,
    Config = 4,
    FingerprintMismatch = 5,
    Numeric = 6,
    Format = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for MsvqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidIndex { .. } => Self::InvalidArgument,
            Error::InvalidInput(_) | Error::InsufficientData(_) | Error::UndefinedRate(_) => Self::InvalidInput,
            Error::Config(_) => Self::Config,
            Error::FingerprintMismatch { .. } => Self::FingerprintMismatch,
            Error::Numeric(_) => Self::Numeric,
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::TruncatedPayload(_) | Error::Wav(_) => {
                Self::Format
            }
            Error::Io(_) => Self::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic for [`msvq_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), (MsvqStatus, String)>) -> MsvqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsvqStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MsvqStatus::Panic
        }
    }
}

fn lift(e: Error) -> (MsvqStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (MsvqStatus, String) {
    (MsvqStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MsvqStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (MsvqStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MsvqStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn msvq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opaque multi-head codebook.
pub struct MsvqCodebook(MultiHeadCodebook);

/// Opaque feature sequence.
pub struct MsvqFeatures(FeatureSequence);

/// Opaque set of trained artifacts.
pub struct MsvqModel(Artifacts);

/// Loads a codebook file written by `train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn msvq_codebook_load(path: *const c_char, out: *mut *mut MsvqCodebook) -> MsvqStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::fs::read(&path).map_err(|e| lift(e.into()))?;
        let art = format::decode_codebook(&bytes).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(MsvqCodebook(art.codebook))) };
        Ok(())
    })
}

/// Builds a codebook from `heads * codewords * head_dim` head-major values.
///
/// # Safety
/// `data` must point to that many doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_codebook_new(
    heads: usize,
    codewords: usize,
    head_dim: usize,
    data: *const f64,
    out: *mut *mut MsvqCodebook,
) -> MsvqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = heads.saturating_mul(codewords).saturating_mul(head_dim);
        let values = unsafe { slice_arg(data, n, "data") }?.to_vec();
        let cb = MultiHeadCodebook::new(heads, codewords, head_dim, values).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(MsvqCodebook(cb))) };
        Ok(())
    })
}

/// # Safety
/// `cb` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn msvq_codebook_free(cb: *mut MsvqCodebook) {
    if !cb.is_null() {
        drop(unsafe { Box::from_raw(cb) });
    }
}

/// Writes heads, codewords and per-head dimension.
///
/// # Safety
/// All pointers must be valid; `cb` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn msvq_codebook_dims(
    cb: *const MsvqCodebook,
    heads: *mut usize,
    codewords: *mut usize,
    head_dim: *mut usize,
) -> MsvqStatus {
    guard(|| {
        let cb = unsafe { cb.as_ref() }.ok_or_else(|| null("codebook"))?;
        if heads.is_null() || codewords.is_null() || head_dim.is_null() {
            return Err(null("output"));
        }
        unsafe {
            *heads = cb.0.heads();
            *codewords = cb.0.codewords();
            *head_dim = cb.0.head_dim();
        }
        Ok(())
    })
}

/// Quantizes one vector of `len == heads * head_dim` values, writing one index per head
/// into `indices` (capacity `indices_len`) and, when `quantized` is non-null, the
/// reconstructed vector.
///
/// # Safety
/// Buffers must be valid for their stated lengths; `quantized` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn msvq_quantize(
    cb: *const MsvqCodebook,
    x: *const f64,
    len: usize,
    indices: *mut u32,
    indices_len: usize,
    quantized: *mut f64,
) -> MsvqStatus {
    guard(|| {
        let cb = unsafe { cb.as_ref() }.ok_or_else(|| null("codebook"))?;
        let x = unsafe { slice_arg(x, len, "x") }?;
        if indices.is_null() {
            return Err(null("indices"));
        }
        if indices_len < cb.0.heads() {
            return Err((MsvqStatus::BufferTooSmall, format!("need {} indices", cb.0.heads())));
        }
        let r = mhvq::quantize(x, &cb.0).map_err(lift)?;
        let out = unsafe { std::slice::from_raw_parts_mut(indices, cb.0.heads()) };
        for (o, i) in out.iter_mut().zip(&r.indices) {
            *o = *i as u32;
        }
        if !quantized.is_null() {
            unsafe { std::slice::from_raw_parts_mut(quantized, len) }.copy_from_slice(&r.quantized);
        }
        Ok(())
    })
}

/// Concatenated codewords for one index per head; `out` holds `heads * head_dim` doubles.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn msvq_dequantize(
    cb: *const MsvqCodebook,
    indices: *const u32,
    indices_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MsvqStatus {
    guard(|| {
        let cb = unsafe { cb.as_ref() }.ok_or_else(|| null("codebook"))?;
        let idx: Vec<usize> = unsafe { slice_arg(indices, indices_len, "indices") }?.iter().map(|&i| i as usize).collect();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < cb.0.total_dim() {
            return Err((MsvqStatus::BufferTooSmall, format!("need {} values", cb.0.total_dim())));
        }
        let v = mhvq::dequantize(&idx, &cb.0).map_err(lift)?;
        unsafe { std::slice::from_raw_parts_mut(out, v.len()) }.copy_from_slice(&v);
        Ok(())
    })
}

/// Reads a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_features_load(path: *const c_char, out: *mut *mut MsvqFeatures) -> MsvqStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let seq = format::read_feature_file(path).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(MsvqFeatures(seq))) };
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msvq_features_free(f: *mut MsvqFeatures) {
    if !f.is_null() {
        drop(unsafe { Box::from_raw(f) });
    }
}

/// Frame count and dimension.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn msvq_features_dims(f: *const MsvqFeatures, frames: *mut usize, dim: *mut usize) -> MsvqStatus {
    guard(|| {
        let f = unsafe { f.as_ref() }.ok_or_else(|| null("features"))?;
        if frames.is_null() || dim.is_null() {
            return Err(null("output"));
        }
        unsafe {
            *frames = f.0.len();
            *dim = f.0.dim();
        }
        Ok(())
    })
}

/// Copies the row-major frames into `out`, which holds at least `frames * dim` doubles.
///
/// # Safety
/// `out` must be valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn msvq_features_copy(f: *const MsvqFeatures, out: *mut f64, out_len: usize) -> MsvqStatus {
    guard(|| {
        let f = unsafe { f.as_ref() }.ok_or_else(|| null("features"))?;
        let src = f.0.as_slice();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < src.len() {
            return Err((MsvqStatus::BufferTooSmall, format!("need {} values", src.len())));
        }
        unsafe { std::slice::from_raw_parts_mut(out, src.len()) }.copy_from_slice(src);
        Ok(())
    })
}

/// Loads the artifact directory written by `train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_model_load(dir: *const c_char, out: *mut *mut MsvqModel) -> MsvqStatus {
    guard(|| {
        let dir = unsafe { path_arg(dir, "dir") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let art = commands::load_artifacts(&dir).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(MsvqModel(art))) };
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msvq_model_free(m: *mut MsvqModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Number of stages and bits per stage-1 frame.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn msvq_model_info(m: *const MsvqModel, stages: *mut usize, bits_per_frame: *mut f64) -> MsvqStatus {
    guard(|| {
        let m = unsafe { m.as_ref() }.ok_or_else(|| null("model"))?;
        if stages.is_null() || bits_per_frame.is_null() {
            return Err(null("output"));
        }
        unsafe {
            *stages = m.0.stages.num_stages();
            *bits_per_frame = m.0.stages.bits_per_frame();
        }
        Ok(())
    })
}

type FileOp = fn(&Artifacts, &std::path::Path, &std::path::Path) -> msvq::Result<()>;

unsafe fn file_op(m: *const MsvqModel, input: *const c_char, output: *const c_char, op: FileOp) -> MsvqStatus {
    guard(|| {
        let m = unsafe { m.as_ref() }.ok_or_else(|| null("model"))?;
        let input = unsafe { path_arg(input, "input") }?;
        let output = unsafe { path_arg(output, "output") }?;
        op(&m.0, &input, &output).map_err(lift)
    })
}

fn read_msmcr(art: &Artifacts, path: &std::path::Path) -> msvq::Result<msvq::msmc::Msmcr> {
    format::decode_msmcr(&std::fs::read(path)?)?.resolve(&art.stages, &art.codebooks())
}

/// Feature file to MSMCR token file.
///
/// # Safety
/// `m` must be a live handle; paths NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn msvq_encode_file(m: *const MsvqModel, input: *const c_char, output: *const c_char) -> MsvqStatus {
    unsafe {
        file_op(m, input, output, |art, i, o| {
            let seq = format::read_feature_file(i)?;
            let rep = msvq::msmc::encode(&seq, &art.stages, &art.codebooks())?;
            std::fs::write(o, format::encode_msmcr(&rep, &art.books_fingerprint())?)?;
            Ok(())
        })
    }
}

/// MSMCR token file to feature file.
///
/// # Safety
/// `m` must be a live handle; paths NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn msvq_decode_file(m: *const MsvqModel, input: *const c_char, output: *const c_char) -> MsvqStatus {
    unsafe {
        file_op(m, input, output, |art, i, o| {
            let rep = read_msmcr(art, i)?;
            let seq = msvq::msmc::decode(&rep, &art.decoder)?.with_kind(msvq::FeatureKind::Upstream);
            format::write_feature_file(o, &seq)
        })
    }
}

/// MSMCR token file to compact code file.
///
/// # Safety
/// `m` must be a live handle; paths NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn msvq_compress_file(m: *const MsvqModel, input: *const c_char, output: *const c_char) -> MsvqStatus {
    unsafe {
        file_op(m, input, output, |art, i, o| {
            let rep = read_msmcr(art, i)?;
            let code = msvq::associate::compress(&rep, &art.associate)?;
            std::fs::write(o, format::encode_code(&code)?)?;
            Ok(())
        })
    }
}

/// Compact code file to MSMCR token file.
///
/// # Safety
/// `m` must be a live handle; paths NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn msvq_reconstruct_file(
    m: *const MsvqModel,
    input: *const c_char,
    output: *const c_char,
) -> MsvqStatus {
    unsafe {
        file_op(m, input, output, |art, i, o| {
            let code = format::decode_code(&std::fs::read(i)?)?;
            let rep = msvq::associate::reconstruct(&code, &art.associate, &art.stages, &art.codebooks())?;
            std::fs::write(o, format::encode_msmcr(&rep, &art.books_fingerprint())?)?;
            Ok(())
        })
    }
}

/// Frechet distance between the Gaussian statistics of two row-major embedding sets,
/// multiplied by `scale`.
///
/// # Safety
/// `a` holds `a_rows * dim` doubles and `b` holds `b_rows * dim`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_frechet_distance(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    dim: usize,
    scale: f64,
    out: *mut f64,
) -> MsvqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = unsafe { slice_arg(a, a_rows.saturating_mul(dim), "a") }?;
        let b = unsafe { slice_arg(b, b_rows.saturating_mul(dim), "b") }?;
        let sa = metrics::gaussian_stats(Rows::new(a, dim).map_err(lift)?).map_err(lift)?;
        let sb = metrics::gaussian_stats(Rows::new(b, dim).map_err(lift)?).map_err(lift)?;
        let fd = metrics::frechet_distance(&sa, &sb, scale).map_err(lift)?;
        unsafe { *out = fd };
        Ok(())
    })
}

/// Character error rate (`words == 0`) or word error rate between two UTF-8 strings.
///
/// # Safety
/// Strings must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_error_rate(
    reference: *const c_char,
    hypothesis: *const c_char,
    words: i32,
    out: *mut f64,
) -> MsvqStatus {
    guard(|| {
        if reference.is_null() || hypothesis.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let text = |p| {
            unsafe { CStr::from_ptr(p) }
                .to_str()
                .map_err(|_| (MsvqStatus::InvalidArgument, "text is not valid UTF-8".to_owned()))
        };
        let (r, h) = (text(reference)?, text(hypothesis)?);
        let tok = |s| if words != 0 { TokenSequence::words(s) } else { TokenSequence::chars(s) };
        let er = metrics::error_rate(&tok(r), &tok(h)).map_err(lift)?;
        unsafe { *out = er };
        Ok(())
    })
}

/// Mel-cepstral distortion between two feature handles of equal shape.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msvq_mcd(a: *const MsvqFeatures, b: *const MsvqFeatures, out: *mut f64) -> MsvqStatus {
    guard(|| {
        let a = unsafe { a.as_ref() }.ok_or_else(|| null("a"))?;
        let b = unsafe { b.as_ref() }.ok_or_else(|| null("b"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = msvq::dsp::mel_cepstral_distortion(&a.0, &b.0).map_err(lift)?;
        unsafe { *out = v };
        Ok(())
    })
}
