//! C ABI over the `paric` core.
//!
//! Every function returns a [`ParicStatus`]; on failure the message is
//! available from [`paric_last_error`] until the next failing call on the
//! same thread. Handles are opaque and must be released with their `_free`
//! function. Images are row-major `[height][width][3]` `double` arrays with
//! values in [0, 1]; maps are row-major `[height][width]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use paric::classifier::ClassifierState;
use paric::diffcore::Tensor;
use paric::encoders::{EncoderConfig, FrozenEncoder, Prompt};
use paric::error::Error;
use paric::ggd::{self, GgdParams};
use paric::harness::{self, ExperimentConfig, Progress};
use paric::saliency::{self, Aggregation, SaliencyMap};
use paric::seed;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParicStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    Numeric = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    InvalidUtf8 = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Reference-map aggregation selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParicAggregation {
    Mean = 0,
    Median = 1,
}

/// Frozen image/text encoder.
pub struct ParicEncoder {
    inner: FrozenEncoder,
}

/// Attention-pooling classifier.
pub struct ParicClassifier {
    inner: ClassifierState,
}

/// Validated experiment configuration.
pub struct ParicExperiment {
    inner: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> ParicStatus {
    match e {
        Error::Contract { .. } => ParicStatus::Contract,
        Error::Numeric(_) => ParicStatus::Numeric,
        Error::Config { .. } => ParicStatus::Config,
        Error::Format(_) | Error::Json { .. } => ParicStatus::Format,
        Error::Io { .. } => ParicStatus::Io,
    }
}

struct Fail(ParicStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ParicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ParicStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ParicStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ParicStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ParicStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out(dst: *mut f64, cap: usize, src: &[f64], what: &str) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(null(what));
    }
    if cap < src.len() {
        return Err(Fail(
            ParicStatus::BufferTooSmall,
            format!("`{what}` holds {cap} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn image_arg(pixels: *const f64, height: usize, width: usize) -> Result<Tensor, Fail> {
    let data = slice_arg(pixels, height * width * 3, "pixels")?;
    Ok(Tensor::new(vec![height, width, 3], data.to_vec())?)
}

unsafe fn put_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn paric_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn paric_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Pretrains (or fetches from the in-process cache) the frozen encoder with
/// the default configuration, keyed by `name`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_new(name: *const c_char, out: *mut *mut ParicEncoder) -> ParicStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let inner = FrozenEncoder::shared(name, &EncoderConfig::default())?;
        put_handle(out, ParicEncoder { inner })
    })
}

/// Loads frozen weights saved in the checkpoint format.
///
/// # Safety
/// `name` and `path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_load(
    name: *const c_char,
    path: *const c_char,
    out: *mut *mut ParicEncoder,
) -> ParicStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let path = str_arg(path, "path")?;
        let inner = FrozenEncoder::load(name, &EncoderConfig::default(), Path::new(path))?;
        put_handle(out, ParicEncoder { inner })
    })
}

/// # Safety
/// `enc` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_free(enc: *mut ParicEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// # Safety
/// `enc` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_save(enc: *const ParicEncoder, path: *const c_char) -> ParicStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or_else(|| null("enc"))?;
        let path = str_arg(path, "path")?;
        Ok(enc.inner.save(Path::new(path))?)
    })
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_embed_dim(enc: *const ParicEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.inner.embed_dim())
}

/// Image embedding into `out_z` (capacity `cap`).
///
/// # Safety
/// `pixels` must hold `height * width * 3` values; `out_z` must hold `cap`.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_encode_image(
    enc: *const ParicEncoder,
    pixels: *const f64,
    height: usize,
    width: usize,
    out_z: *mut f64,
    cap: usize,
) -> ParicStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or_else(|| null("enc"))?;
        let x = image_arg(pixels, height, width)?;
        let (z, _) = enc.inner.encode_image(&x)?;
        write_out(out_z, cap, &z, "out_z")
    })
}

/// Embedding of the prompt "a photo of {category}".
///
/// # Safety
/// `category` must be NUL-terminated; `out_z` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_encode_text(
    enc: *const ParicEncoder,
    category: *const c_char,
    out_z: *mut f64,
    cap: usize,
) -> ParicStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or_else(|| null("enc"))?;
        let p = Prompt::for_category(str_arg(category, "category")?)?;
        write_out(out_z, cap, &enc.inner.encode_text(&p)?, "out_z")
    })
}

/// Normalised Grad-CAM map of `Ψ_I(x) · Ψ_T(prompt)` at the encoder's
/// feature resolution. `out_h`/`out_w` receive the map size.
///
/// # Safety
/// Pointer arguments must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn paric_encoder_saliency(
    enc: *const ParicEncoder,
    pixels: *const f64,
    height: usize,
    width: usize,
    category: *const c_char,
    out_map: *mut f64,
    cap: usize,
    out_h: *mut usize,
    out_w: *mut usize,
) -> ParicStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or_else(|| null("enc"))?;
        let x = image_arg(pixels, height, width)?;
        let p = Prompt::for_category(str_arg(category, "category")?)?;
        let m = saliency::deterministic_map(&enc.inner, &x, &p)?;
        if out_h.is_null() || out_w.is_null() {
            return Err(null("out_h/out_w"));
        }
        write_out(out_map, cap, m.values.data(), "out_map")?;
        *out_h = m.values.shape()[0];
        *out_w = m.values.shape()[1];
        Ok(())
    })
}

/// Fresh classifier with seeded weights for `[height, width, 3]` images.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_new(
    num_classes: usize,
    height: usize,
    width: usize,
    seed_value: u64,
    out: *mut *mut ParicClassifier,
) -> ParicStatus {
    guard(|| {
        let mut rng = seed::stream(seed_value, "classifier-init", 0);
        let inner = ClassifierState::new(num_classes, height, width, [8, 8], &mut rng)?;
        put_handle(out, ParicClassifier { inner })
    })
}

/// # Safety
/// `cls` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_free(cls: *mut ParicClassifier) {
    if !cls.is_null() {
        drop(Box::from_raw(cls));
    }
}

/// # Safety
/// `cls` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_load_weights(cls: *mut ParicClassifier, path: *const c_char) -> ParicStatus {
    guard(|| {
        let cls = cls.as_mut().ok_or_else(|| null("cls"))?;
        let path = str_arg(path, "path")?;
        Ok(cls.inner.load_weights(Path::new(path))?)
    })
}

/// # Safety
/// `cls` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_save(cls: *const ParicClassifier, path: *const c_char) -> ParicStatus {
    guard(|| {
        let cls = cls.as_ref().ok_or_else(|| null("cls"))?;
        let path = str_arg(path, "path")?;
        Ok(cls.inner.save(Path::new(path))?)
    })
}

/// Class probabilities (`num_classes` values) and the `[height][width]`
/// attention map.
///
/// # Safety
/// Pointer arguments must be valid for the stated capacities.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_forward(
    cls: *const ParicClassifier,
    pixels: *const f64,
    height: usize,
    width: usize,
    out_probs: *mut f64,
    probs_cap: usize,
    out_attention: *mut f64,
    attention_cap: usize,
) -> ParicStatus {
    guard(|| {
        let cls = cls.as_ref().ok_or_else(|| null("cls"))?;
        let x = image_arg(pixels, height, width)?;
        let (p, a) = cls.inner.forward_classify(&x)?;
        write_out(out_probs, probs_cap, &p, "out_probs")?;
        write_out(out_attention, attention_cap, a.data(), "out_attention")
    })
}

/// One optimizer step on a single-example batch with reference map `a_ref`
/// (`ref_h × ref_w`). Writes `{cls, att, total}` to `out_loss`.
///
/// # Safety
/// Pointer arguments must be valid for the stated sizes; `out_loss` holds 3.
#[no_mangle]
pub unsafe extern "C" fn paric_classifier_train_step(
    cls: *mut ParicClassifier,
    pixels: *const f64,
    height: usize,
    width: usize,
    label: usize,
    a_ref: *const f64,
    ref_h: usize,
    ref_w: usize,
    lambda: f64,
    lr: f64,
    out_loss: *mut f64,
) -> ParicStatus {
    guard(|| {
        let cls = cls.as_mut().ok_or_else(|| null("cls"))?;
        let x = image_arg(pixels, height, width)?;
        let r = Tensor::new(vec![ref_h, ref_w], slice_arg(a_ref, ref_h * ref_w, "a_ref")?.to_vec())?;
        let l = cls.inner.train_step(&[(&x, label, &r)], lambda, lr)?;
        write_out(out_loss, 3, &[l.cls, l.att, l.total], "out_loss")
    })
}

/// Per-pixel aggregation of `k` maps of `height × width` stored back to
/// back in `maps`. Writes the reference map and the uncertainty map.
///
/// # Safety
/// `maps` must hold `k * height * width` values; outputs hold `height * width`.
#[no_mangle]
pub unsafe extern "C" fn paric_aggregate(
    maps: *const f64,
    k: usize,
    height: usize,
    width: usize,
    method: ParicAggregation,
    out_values: *mut f64,
    out_uncertainty: *mut f64,
) -> ParicStatus {
    guard(|| {
        let n = height * width;
        let all = slice_arg(maps, k * n, "maps")?;
        let list = all
            .chunks_exact(n.max(1))
            .enumerate()
            .map(|(i, c)| {
                Ok(SaliencyMap {
                    values: Tensor::new(vec![height, width], c.to_vec())?,
                    sample_index: i,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let method = match method {
            ParicAggregation::Mean => Aggregation::Mean,
            ParicAggregation::Median => Aggregation::Median,
        };
        let r = saliency::aggregate(&list, method)?;
        write_out(out_values, n, r.values.data(), "out_values")?;
        write_out(out_uncertainty, n, r.uncertainty.data(), "out_uncertainty")
    })
}

/// Log-density of `z` under a per-dimension generalized Gaussian.
///
/// # Safety
/// All arrays must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_ggd_logpdf(
    mu: *const f64,
    alpha: *const f64,
    beta: *const f64,
    z: *const f64,
    dim: usize,
    out: *mut f64,
) -> ParicStatus {
    guard(|| {
        let p = GgdParams::new(
            slice_arg(mu, dim, "mu")?.to_vec(),
            slice_arg(alpha, dim, "alpha")?.to_vec(),
            slice_arg(beta, dim, "beta")?.to_vec(),
        )?;
        let v = ggd::ggd_logpdf(&p, slice_arg(z, dim, "z")?)?;
        write_out(out, 1, &[v], "out")
    })
}

/// Histogram Jensen–Shannon divergence (natural log) of two score lists.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_outcome_divergence(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    bins: usize,
    out: *mut f64,
) -> ParicStatus {
    guard(|| {
        let v = harness::outcome_divergence(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?, bins)?;
        write_out(out, 1, &[v], "out")
    })
}

/// Parses and validates an experiment configuration from JSON text.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paric_experiment_from_json(json: *const c_char, out: *mut *mut ParicExperiment) -> ParicStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let inner = ExperimentConfig::from_json(text, Path::new("<json>"))?;
        put_handle(out, ParicExperiment { inner })
    })
}

/// # Safety
/// `exp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn paric_experiment_free(exp: *mut ParicExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Runs the four-arm comparison and writes `metrics.csv`, `record.json`
/// and checkpoints under `out_dir`.
///
/// # Safety
/// `exp` must be a live handle; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn paric_experiment_compare(exp: *const ParicExperiment, out_dir: *const c_char) -> ParicStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        let out = Path::new(str_arg(out_dir, "out_dir")?);
        let record = harness::compare(&exp.inner, Some(out), Progress { quiet: true })?;
        Ok(harness::write_outputs(out, &record)?)
    })
}
