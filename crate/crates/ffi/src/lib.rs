//! C ABI over weights and dataset files, parameter counting, cache sizing
//! and query-feature collection.
//!
//! Every fallible function returns a [`VqtStatus`]; on failure the message
//! is available from [`vqt_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vqtlab::data::Dataset;
use vqtlab::model::{ModelSpec, Strategy};
use vqtlab::train::{estimate_bytes, CacheLayout};
use vqtlab::vit::{load_weights, FormatError, Mode, ViTConfig, WeightsFile};
use vqtlab::vqt::{collect_features, feature_dim};
use vqtlab::TensorError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NumericalFailure = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Cache layout selector for [`vqt_cache_estimate_bytes`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqtCacheLayout {
    KeyValue = 0,
    Intermediate = 1,
}

/// Plain-data view of a ViT configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VqtConfig {
    pub d: u32,
    pub m: u32,
    pub heads: u32,
    pub mlp_ratio: u32,
    pub patch: u32,
    pub image: u32,
    pub channels: u32,
    /// 0 for the bare single-head form, 1 for pre-LN multi-head blocks.
    pub full_mode: u32,
}

/// Opaque weights file: backbone plus optional query tokens.
pub struct VqtWeights {
    file: WeightsFile,
}

/// Opaque labelled image set.
pub struct VqtDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(VqtStatus, String);

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        let status = match e {
            TensorError::NonFinite { .. } => VqtStatus::NumericalFailure,
            _ => VqtStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        let status = match e {
            FormatError::Io(_) => VqtStatus::Io,
            FormatError::NonFinite(_) => VqtStatus::NumericalFailure,
            _ => VqtStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VqtStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VqtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VqtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside vqtlab");
            VqtStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(VqtStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn to_u32(v: usize) -> u32 {
    u32::try_from(v).unwrap_or(u32::MAX)
}

impl From<&ViTConfig> for VqtConfig {
    fn from(c: &ViTConfig) -> Self {
        VqtConfig {
            d: to_u32(c.d),
            m: to_u32(c.m),
            heads: to_u32(c.heads),
            mlp_ratio: to_u32(c.mlp_ratio),
            patch: to_u32(c.patch),
            image: to_u32(c.image),
            channels: to_u32(c.channels),
            full_mode: u32::from(c.mode == Mode::Full),
        }
    }
}

fn vit_config(c: &VqtConfig) -> Result<ViTConfig, Failure> {
    let cfg = ViTConfig {
        d: c.d as usize,
        m: c.m as usize,
        heads: c.heads as usize,
        mlp_ratio: c.mlp_ratio as usize,
        patch: c.patch as usize,
        image: c.image as usize,
        channels: c.channels as usize,
        mode: match c.full_mode {
            0 => Mode::Paper,
            1 => Mode::Full,
            v => return Err(invalid(format!("full_mode must be 0 or 1, got {v}"))),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn vqt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Desk-scale configuration.
#[no_mangle]
pub extern "C" fn vqt_config_desk() -> VqtConfig {
    VqtConfig::from(&ViTConfig::desk())
}

/// ViT-B/16 configuration.
#[no_mangle]
pub extern "C" fn vqt_config_vit_b() -> VqtConfig {
    VqtConfig::from(&ViTConfig::vit_b())
}

/// Tokens per image, CLS included. Zero for an invalid configuration.
#[no_mangle]
pub extern "C" fn vqt_config_tokens(cfg: VqtConfig) -> u32 {
    vit_config(&cfg).map_or(0, |c| to_u32(c.tokens()))
}

/// Loads a `VQTW` file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_weights_load(path: *const c_char, out: *mut *mut VqtWeights) -> VqtStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let file = load_weights(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VqtWeights { file }));
        Ok(())
    })
}

/// Releases a weights handle; null is ignored.
///
/// # Safety
/// `w` must come from [`vqt_weights_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vqt_weights_free(w: *mut VqtWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Configuration stored in a weights file.
///
/// # Safety
/// `w` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_weights_config(w: *const VqtWeights, out: *mut VqtConfig) -> VqtStatus {
    guard(|| {
        non_null(w, "weights")?;
        non_null(out, "out")?;
        *out = VqtConfig::from(&(*w).file.config);
        Ok(())
    })
}

/// Query tokens per layer stored in the file, 0 when there are none.
///
/// # Safety
/// `w` must be a live handle and `out_t` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_weights_query_tokens(w: *const VqtWeights, out_t: *mut u32) -> VqtStatus {
    guard(|| {
        non_null(w, "weights")?;
        non_null(out_t, "out_t")?;
        *out_t = (*w).file.queries.as_ref().map_or(0, |q| to_u32(q.t()));
        Ok(())
    })
}

/// Loads a `VQTD` file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_dataset_load(path: *const c_char, out: *mut *mut VqtDataset) -> VqtStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let data = Dataset::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VqtDataset { data }));
        Ok(())
    })
}

/// Releases a dataset handle; null is ignored.
///
/// # Safety
/// `d` must come from [`vqt_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vqt_dataset_free(d: *mut VqtDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Sample count and class count of a dataset.
///
/// # Safety
/// `d` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vqt_dataset_info(d: *const VqtDataset, out_len: *mut u64, out_classes: *mut u32) -> VqtStatus {
    guard(|| {
        non_null(d, "dataset")?;
        non_null(out_len, "out_len")?;
        non_null(out_classes, "out_classes")?;
        *out_len = (*d).data.len() as u64;
        *out_classes = to_u32((*d).data.classes);
        Ok(())
    })
}

/// Tunable parameter count of `strategy` (for example `"vqt"` or
/// `"adaptformer+vqt"`) with `t` tokens in every layer, adapter width
/// `adapter_dim` and `classes` outputs.
///
/// # Safety
/// `strategy` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_count_tunable(
    cfg: VqtConfig,
    strategy: *const c_char,
    t: u32,
    adapter_dim: u32,
    classes: u32,
    out: *mut u64,
) -> VqtStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = vit_config(&cfg)?;
        let s: Strategy = str_arg(strategy, "strategy")?.parse().map_err(invalid)?;
        if classes < 2 {
            return Err(invalid("classes must be at least 2"));
        }
        let mut spec = ModelSpec::new(s, &cfg, classes as usize).with_t(t as usize);
        spec.adapter_dim = adapter_dim as usize;
        *out = spec.count_tunable(&cfg) as u64;
        Ok(())
    })
}

/// Length of the concatenated query features plus CLS: `m * d * t + d`.
#[no_mangle]
pub extern "C" fn vqt_feature_dim(m: u32, d: u32, t: u32) -> u64 {
    feature_dim(m as usize, d as usize, t as usize) as u64
}

/// Bytes needed to cache `layers` layers of features for `images` images.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vqt_cache_estimate_bytes(
    cfg: VqtConfig,
    layout: VqtCacheLayout,
    layers: u32,
    images: u64,
    out: *mut u64,
) -> VqtStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = vit_config(&cfg)?;
        let layout = match layout {
            VqtCacheLayout::KeyValue => CacheLayout::KeyValue,
            VqtCacheLayout::Intermediate => CacheLayout::Intermediate,
        };
        *out = estimate_bytes(&cfg, layout, layers as usize, images as usize);
        Ok(())
    })
}

/// Runs the frozen backbone with the file's query tokens over every image
/// of `data` and writes one row of [`vqt_feature_dim`] values per image
/// into `out`, row-major. `*written` receives the value count; when
/// `capacity` is too small it receives the required count instead.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn vqt_collect_features(
    w: *const VqtWeights,
    data: *const VqtDataset,
    out: *mut f64,
    capacity: u64,
    written: *mut u64,
) -> VqtStatus {
    guard(|| {
        non_null(w, "weights")?;
        non_null(data, "dataset")?;
        non_null(written, "written")?;
        let file = &(*w).file;
        let data = &(*data).data;
        let cfg = &file.config;
        let queries = file
            .queries
            .as_ref()
            .ok_or_else(|| invalid("weights file has no query tokens"))?;
        if data.channels != cfg.channels || data.height != cfg.image || data.width != cfg.image {
            return Err(invalid("dataset image shape does not match the weights"));
        }
        let dim = feature_dim(queries.active().len(), cfg.d, queries.t());
        let need = (dim * data.len()) as u64;
        *written = need;
        if capacity < need {
            return Err(Failure(
                VqtStatus::BufferTooSmall,
                format!("{need} values needed, capacity {capacity}"),
            ));
        }
        non_null(out, "out")?;
        let dst = std::slice::from_raw_parts_mut(out, need as usize);
        let idx: Vec<usize> = (0..data.len()).collect();
        for (chunk_no, chunk) in idx.chunks(64).enumerate() {
            let bundles = collect_features(&data.image_refs(chunk), &file.weights, queries, cfg)?;
            for (i, b) in bundles.iter().enumerate() {
                let row = (chunk_no * 64 + i) * dim;
                dst[row..row + dim].copy_from_slice(&b.flatten());
            }
        }
        Ok(())
    })
}
