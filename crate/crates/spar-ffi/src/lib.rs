//! C ABI over the spar toolkit.
//!
//! Conventions: objects cross the boundary as opaque handles created and
//! released by this library; every fallible call returns a [`SparStatus`]
//! and writes its result through out-pointers; the message for the most
//! recent error on the calling thread is available via
//! [`spar_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use spar::segment::ClassEmbeddings;
use spar::tensor::{bilinear_resize, l2_normalize_channels, mse, FeatureGrid};
use spar::vit::{
    forward, forward_window, init_params, load_checkpoint, save_checkpoint, ModelParams, ViTConfig,
};
use spar::window::{min_upsample_factor, plan_windows, stitch_features};
use spar::SparError;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    IoError = 4,
    DataError = 5,
    InternalError = 6,
}

/// Opaque dense grid handle (`height x width x channels`, row-major,
/// channel-last, f64).
pub struct SparGrid {
    inner: FeatureGrid,
}

/// Opaque model handle bundling architecture config and parameters.
pub struct SparModel {
    cfg: ViTConfig,
    params: ModelParams,
}

/// Architecture description used to create models over the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SparModelConfig {
    pub patch_size: u32,
    pub native_side: u32,
    pub channels: u32,
    pub num_blocks: u32,
    pub num_heads: u32,
    pub mlp_ratio: f64,
    pub last_attention_identity: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &SparError) -> SparStatus {
    match err {
        SparError::InvalidArgument(_) | SparError::Config(_) => SparStatus::InvalidArgument,
        SparError::ShapeMismatch(_) => SparStatus::ShapeMismatch,
        SparError::Io { .. } => SparStatus::IoError,
        SparError::Format { .. }
        | SparError::MissingRecord { .. }
        | SparError::ImageSmallerThanWindow { .. }
        | SparError::DegenerateCovariance { .. } => SparStatus::DataError,
    }
}

fn fail(err: SparError) -> SparStatus {
    set_error(&err.to_string());
    status_for(&err)
}

/// Runs `body` with panic isolation; panics become `InternalError`.
fn guarded(body: impl FnOnce() -> SparStatus) -> SparStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal invariant violation");
            SparStatus::InternalError
        }
    }
}

unsafe fn path_from(ptr_: *const c_char) -> Result<&'static Path, SparStatus> {
    if ptr_.is_null() {
        set_error("null path");
        return Err(SparStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr_) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(SparStatus::InvalidArgument)
        }
    }
}

/// Message of the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Static library version string.
#[no_mangle]
pub extern "C" fn spar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a grid. `data` may be null for an all-zero grid; otherwise it
/// must hold `height * width * channels` doubles.
///
/// # Safety
/// `data`, when non-null, must point to `height * width * channels`
/// readable doubles; `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_grid_create(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return SparStatus::NullPointer;
        }
        let grid = if data.is_null() {
            if height == 0 || width == 0 || channels == 0 {
                return fail(SparError::InvalidArgument(
                    "grid dimensions must be positive".into(),
                ));
            }
            FeatureGrid::zeros(height, width, channels)
        } else {
            let len = height * width * channels;
            let slice = unsafe { std::slice::from_raw_parts(data, len) };
            match FeatureGrid::from_vec(height, width, channels, slice.to_vec()) {
                Ok(g) => g,
                Err(e) => return fail(e),
            }
        };
        unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: grid })) };
        SparStatus::Ok
    })
}

/// Writes the grid shape through the out-pointers (each may be null).
///
/// # Safety
/// `grid` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn spar_grid_dims(
    grid: *const SparGrid,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> SparStatus {
    guarded(|| {
        let Some(grid) = (unsafe { grid.as_ref() }) else {
            set_error("null grid");
            return SparStatus::NullPointer;
        };
        let (h, w, c) = grid.inner.shape();
        unsafe {
            if !height.is_null() {
                *height = h;
            }
            if !width.is_null() {
                *width = w;
            }
            if !channels.is_null() {
                *channels = c;
            }
        }
        SparStatus::Ok
    })
}

/// Borrowed pointer to the grid's row-major channel-last payload; valid
/// while the handle lives. Returns null for a null handle.
///
/// # Safety
/// `grid` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn spar_grid_data(grid: *const SparGrid) -> *const f64 {
    match unsafe { grid.as_ref() } {
        Some(g) => g.inner.data().as_ptr(),
        None => ptr::null(),
    }
}

/// Releases a grid handle; null is a no-op.
///
/// # Safety
/// `grid` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spar_grid_free(grid: *mut SparGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Half-pixel bilinear resize into a new grid.
///
/// # Safety
/// `grid` must be a live handle; `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_bilinear_resize(
    grid: *const SparGrid,
    out_h: usize,
    out_w: usize,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        let (Some(grid), false) = (unsafe { grid.as_ref() }, out.is_null()) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        match bilinear_resize(&grid.inner, out_h, out_w) {
            Ok(resized) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: resized })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Channel-wise l2 normalization (vectors below `epsilon` pass through).
///
/// # Safety
/// `grid` must be a live handle; `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_l2_normalize(
    grid: *const SparGrid,
    epsilon: f64,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        let (Some(grid), false) = (unsafe { grid.as_ref() }, out.is_null()) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        match l2_normalize_channels(&grid.inner, epsilon) {
            Ok(normed) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: normed })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Mean squared error between two identically shaped grids.
///
/// # Safety
/// `a` and `b` must be live handles; `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_mse(
    a: *const SparGrid,
    b: *const SparGrid,
    out: *mut f64,
) -> SparStatus {
    guarded(|| {
        let (Some(a), Some(b), false) =
            (unsafe { a.as_ref() }, unsafe { b.as_ref() }, out.is_null())
        else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        match mse(&a.inner, &b.inner) {
            Ok(v) => {
                unsafe { *out = v };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

fn vit_config_from(c: &SparModelConfig) -> ViTConfig {
    ViTConfig {
        patch_size: c.patch_size as usize,
        native_side: c.native_side as usize,
        channels: c.channels as usize,
        num_blocks: c.num_blocks as usize,
        num_heads: c.num_heads as usize,
        mlp_ratio: c.mlp_ratio,
        last_attention_identity: c.last_attention_identity,
    }
}

/// Deterministically initializes a model from the config and seed.
///
/// # Safety
/// `config` must point to a valid config; `out` must be a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_model_init(
    config: *const SparModelConfig,
    seed: u64,
    out: *mut *mut SparModel,
) -> SparStatus {
    guarded(|| {
        let (Some(config), false) = (unsafe { config.as_ref() }, out.is_null()) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        let cfg = vit_config_from(config);
        match init_params(&cfg, seed) {
            Ok(params) => {
                unsafe { *out = Box::into_raw(Box::new(SparModel { cfg, params })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a `SPARVIT1` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spar_model_load(
    path: *const c_char,
    out: *mut *mut SparModel,
) -> SparStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return SparStatus::NullPointer;
        }
        let path = match unsafe { path_from(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(path) {
            Ok((cfg, params)) => {
                unsafe { *out = Box::into_raw(Box::new(SparModel { cfg, params })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Saves the model as a `SPARVIT1` checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spar_model_save(
    model: *const SparModel,
    path: *const c_char,
) -> SparStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            set_error("null model");
            return SparStatus::NullPointer;
        };
        let path = match unsafe { path_from(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_checkpoint(path, &model.cfg, &model.params) {
            Ok(()) => SparStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Copies the model's architecture description into `out`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_model_config(
    model: *const SparModel,
    out: *mut SparModelConfig,
) -> SparStatus {
    guarded(|| {
        let (Some(model), false) = (unsafe { model.as_ref() }, out.is_null()) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        let c = &model.cfg;
        unsafe {
            *out = SparModelConfig {
                patch_size: c.patch_size as u32,
                native_side: c.native_side as u32,
                channels: c.channels as u32,
                num_blocks: c.num_blocks as u32,
                num_heads: c.num_heads as u32,
                mlp_ratio: c.mlp_ratio,
                last_attention_identity: c.last_attention_identity,
            };
        }
        SparStatus::Ok
    })
}

/// Releases a model handle; null is a no-op.
///
/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spar_model_free(model: *mut SparModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Single-pass forward over a 3-channel, patch-divisible image.
///
/// # Safety
/// `model` and `image` must be live handles; `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spar_forward(
    model: *const SparModel,
    image: *const SparGrid,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        let (Some(model), Some(image), false) = (
            unsafe { model.as_ref() },
            unsafe { image.as_ref() },
            out.is_null(),
        ) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        match forward(&image.inner, &model.params, &model.cfg) {
            Ok((features, _)) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: features })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Native-resolution forward over one `K x K` window.
///
/// # Safety
/// `model` and `window` must be live handles; `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spar_forward_window(
    model: *const SparModel,
    window: *const SparGrid,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        let (Some(model), Some(window), false) = (
            unsafe { model.as_ref() },
            unsafe { window.as_ref() },
            out.is_null(),
        ) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        match forward_window(&window.inner, &model.params, &model.cfg) {
            Ok(features) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: features })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Smallest r with `patch % r == 0` and `stride % (patch / r) == 0`.
#[no_mangle]
pub extern "C" fn spar_min_upsample_factor(stride: u32, patch: u32) -> u32 {
    if stride == 0 || patch == 0 {
        return 0;
    }
    min_upsample_factor(stride as usize, patch as usize) as u32
}

/// Number of windows the planner enumerates for this geometry.
///
/// # Safety
/// `out_m` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_plan_window_count(
    image_h: usize,
    image_w: usize,
    window: usize,
    stride: usize,
    patch: usize,
    out_m: *mut usize,
) -> SparStatus {
    guarded(|| {
        if out_m.is_null() {
            set_error("null out pointer");
            return SparStatus::NullPointer;
        }
        match plan_windows(image_h, image_w, window, stride, patch) {
            Ok(plan) => {
                unsafe { *out_m = plan.m };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Stitches per-window feature maps (plan order, row-major origins) into
/// the single-pass layout for the given geometry.
///
/// # Safety
/// `window_feats` must point to `count` live grid handles; `out` must be
/// a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn spar_stitch_features(
    window_feats: *const *const SparGrid,
    count: usize,
    image_h: usize,
    image_w: usize,
    window: usize,
    stride: usize,
    patch: usize,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        if window_feats.is_null() || out.is_null() {
            set_error("null argument");
            return SparStatus::NullPointer;
        }
        let plan = match plan_windows(image_h, image_w, window, stride, patch) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        let handles = unsafe { std::slice::from_raw_parts(window_feats, count) };
        let mut grids = Vec::with_capacity(count);
        for &h in handles {
            let Some(g) = (unsafe { h.as_ref() }) else {
                set_error("null grid in window list");
                return SparStatus::NullPointer;
            };
            grids.push(g.inner.clone());
        }
        match stitch_features(&grids, &plan, patch) {
            Ok(stitched) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: stitched })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Cosine similarities between feature cells and `num_classes` vectors of
/// length `dim` (row-major).
///
/// # Safety
/// `features` must be a live handle; `class_vectors` must hold
/// `num_classes * dim` doubles; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spar_class_similarities(
    features: *const SparGrid,
    class_vectors: *const f64,
    num_classes: usize,
    dim: usize,
    out: *mut *mut SparGrid,
) -> SparStatus {
    guarded(|| {
        let (Some(features), false, false) = (
            unsafe { features.as_ref() },
            class_vectors.is_null(),
            out.is_null(),
        ) else {
            set_error("null argument");
            return SparStatus::NullPointer;
        };
        let values = unsafe { std::slice::from_raw_parts(class_vectors, num_classes * dim) };
        let names = (0..num_classes).map(|i| format!("class_{i}")).collect();
        let embeddings = match ClassEmbeddings::new(names, dim, values.to_vec()) {
            Ok(e) => e,
            Err(e) => return fail(e),
        };
        match spar::segment::class_similarities(&features.inner, &embeddings) {
            Ok(sims) => {
                unsafe { *out = Box::into_raw(Box::new(SparGrid { inner: sims })) };
                SparStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
