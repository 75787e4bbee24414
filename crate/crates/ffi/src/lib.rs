//! C ABI over `flux-core`.
//!
//! Every fallible function returns a [`FluxStatus`]; on failure the message
//! is available from [`flux_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`flux_string_free`], models
//! with [`flux_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flux_core::fluxvit::{bind, forward, init_params, load_checkpoint, save_checkpoint, FluxViTConfig, FluxViTParams};
use flux_core::sampling::{candidates, patchify, sample_grid, SamplerConfig, SamplingGrid};
use flux_core::selector::{dynamic_scores, select_group_dynamic, NormOrder};
use flux_core::tokenopt::{flops, vit_shape};
use flux_core::videogen::VideoSample;
use flux_core::{FluxError, Graph, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Selection = 4,
    Checkpoint = 5,
    Io = 6,
    Runtime = 7,
    Panic = 8,
}

/// A (frames, resolution) grid and its token layout.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FluxGrid {
    pub frames: usize,
    pub resolution: usize,
    pub t: usize,
    pub gh: usize,
    pub gw: usize,
    pub pool: usize,
}

impl From<SamplingGrid> for FluxGrid {
    fn from(g: SamplingGrid) -> Self {
        Self {
            frames: g.frames,
            resolution: g.resolution,
            t: g.t,
            gh: g.gh,
            gw: g.gw,
            pool: g.pool,
        }
    }
}

/// Opaque model handle.
pub struct FluxModel {
    params: FluxViTParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(FluxStatus, String);

impl From<FluxError> for Failure {
    fn from(e: FluxError) -> Self {
        let status = match &e {
            FluxError::InvalidConfig(_) => FluxStatus::InvalidConfig,
            FluxError::Selection(_) | FluxError::QuotaExceeded { .. } => FluxStatus::Selection,
            FluxError::Checkpoint(_) => FluxStatus::Checkpoint,
            FluxError::Io(_) => FluxStatus::Io,
            FluxError::InvalidInput(_) | FluxError::Shape { .. } | FluxError::Json(_) => FluxStatus::InvalidArgument,
            _ => FluxStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FluxStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FluxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FluxStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FluxStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FluxStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(s, what)?;
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("JSON has no interior NUL").into_raw()
}

fn norm(p: u32) -> Result<NormOrder, Failure> {
    NormOrder::from_p(p).map_err(Failure::from)
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn flux_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn flux_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flux_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// MAC breakdown of a ViT of width `d_model` and `depth` blocks (MLP ×4,
/// 64-wide heads, 400 classes, 1×14×14 patches) at `tokens` tokens, as JSON.
///
/// # Safety
/// `out_json` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn flux_flops_json(d_model: usize, depth: usize, tokens: usize, out_json: *mut *mut c_char) -> FluxStatus {
    guard(|| {
        non_null(out_json, "out_json")?;
        if d_model < 64 || !d_model.is_multiple_of(64) || depth == 0 {
            return Err(invalid("d_model must be a positive multiple of 64 and depth positive"));
        }
        let report = flops(&vit_shape(d_model, depth), tokens);
        let mut v = serde_json::to_value(&report).map_err(|e| invalid(e.to_string()))?;
        v["gflops"] = serde_json::json!(report.gflops());
        *out_json = to_c_string(v.to_string());
        Ok(())
    })
}

/// All admissible grids of a sampler config (JSON object with the sampler
/// field names) as a JSON array.
///
/// # Safety
/// `sampler_json` must be a NUL-terminated string; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn flux_sampler_candidates_json(sampler_json: *const c_char, out_json: *mut *mut c_char) -> FluxStatus {
    guard(|| {
        non_null(out_json, "out_json")?;
        let cfg: SamplerConfig = serde_json::from_str(read_str(sampler_json, "sampler_json")?).map_err(|e| invalid(e.to_string()))?;
        let grids = candidates(&cfg)?;
        *out_json = to_c_string(serde_json::to_string(&grids).map_err(|e| invalid(e.to_string()))?);
        Ok(())
    })
}

/// Seeded uniform draw over the admissible grids.
///
/// # Safety
/// `sampler_json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flux_sample_grid(sampler_json: *const c_char, seed: u64, out: *mut FluxGrid) -> FluxStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg: SamplerConfig = serde_json::from_str(read_str(sampler_json, "sampler_json")?).map_err(|e| invalid(e.to_string()))?;
        *out = sample_grid(seed, &cfg)?.into();
        Ok(())
    })
}

fn token_grid(t: usize, side: usize) -> SamplingGrid {
    SamplingGrid::new(t, side, [1, 1, 1])
}

/// Temporal-difference scores of `t·side·side` tokens of width `dim`
/// (row-major `(t, h, w)`), with norm order `p` (1 or 2).
///
/// # Safety
/// `tokens` must hold `t·side·side·dim` doubles, `out_scores` room for
/// `t·side·side`.
#[no_mangle]
pub unsafe extern "C" fn flux_dynamic_scores(
    tokens: *const f64,
    t: usize,
    side: usize,
    dim: usize,
    p: u32,
    out_scores: *mut f64,
) -> FluxStatus {
    guard(|| {
        non_null(tokens, "tokens")?;
        non_null(out_scores, "out_scores")?;
        let grid = token_grid(t, side);
        if grid.pool == 0 || dim == 0 {
            return Err(invalid("empty token grid"));
        }
        let data = std::slice::from_raw_parts(tokens, grid.pool * dim).to_vec();
        let s = dynamic_scores(&Tensor::new(vec![grid.pool, dim], data)?, &grid, norm(p)?)?;
        std::slice::from_raw_parts_mut(out_scores, grid.pool).copy_from_slice(&s.scores);
        Ok(())
    })
}

/// Group-dynamic selection of `k` of the `t·side·side` scored tokens in `groups`
/// temporal groups. Writes the `k` indices ascending.
///
/// # Safety
/// `scores` must hold `t·side·side` doubles, `out_indices` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn flux_select_group_dynamic(
    scores: *const f64,
    t: usize,
    side: usize,
    k: usize,
    groups: usize,
    out_indices: *mut usize,
) -> FluxStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(out_indices, "out_indices")?;
        let grid = token_grid(t, side);
        let s = std::slice::from_raw_parts(scores, grid.pool);
        let mask = select_group_dynamic(s, &grid, k, groups)?;
        std::slice::from_raw_parts_mut(out_indices, k).copy_from_slice(&mask.indices);
        Ok(())
    })
}

/// Fresh model from a JSON model config (null for the desk-scale student).
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flux_model_new(config_json: *const c_char, seed: u64, out: *mut *mut FluxModel) -> FluxStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = if config_json.is_null() {
            FluxViTConfig::desk_student()
        } else {
            serde_json::from_str(read_str(config_json, "config_json")?).map_err(|e| invalid(e.to_string()))?
        };
        let params = init_params(&config, seed)?;
        *out = Box::into_raw(Box::new(FluxModel { params }));
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI or [`flux_model_save`].
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flux_model_load(path: *const c_char, out: *mut *mut FluxModel) -> FluxStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = load_checkpoint(Path::new(read_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(FluxModel { params }));
        Ok(())
    })
}

/// Writes `<path>` (tensor data) and its JSON index beside it.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn flux_model_save(model: *const FluxModel, path: *const c_char) -> FluxStatus {
    guard(|| {
        non_null(model, "model")?;
        save_checkpoint(Path::new(read_str(path, "path")?), &(*model).params)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flux_model_free(model: *mut FluxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes (0 for a null handle).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flux_model_num_classes(model: *const FluxModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.num_classes)
}

/// The model's config as JSON.
///
/// # Safety
/// `model` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn flux_model_config_json(model: *const FluxModel, out_json: *mut *mut c_char) -> FluxStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_json, "out_json")?;
        let s = serde_json::to_string(&(*model).params.config).map_err(|e| invalid(e.to_string()))?;
        *out_json = to_c_string(s);
        Ok(())
    })
}

/// Classifies one clip: samples it at `frames`×`resolution`², keeps `k`
/// tokens by group-dynamic selection over `groups` groups (raw-patch L2
/// scores), and writes `num_classes` logits.
///
/// # Safety
/// `video` must hold `t·h·w·c` floats in `[T,H,W,C]` order; `out_logits`
/// room for [`flux_model_num_classes`] doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn flux_model_forward(
    model: *const FluxModel,
    video: *const f32,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    frames: usize,
    resolution: usize,
    k: usize,
    groups: usize,
    out_logits: *mut f64,
) -> FluxStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(video, "video")?;
        non_null(out_logits, "out_logits")?;
        let params = &(*model).params;
        let cfg = &params.config;
        if c != cfg.channels {
            return Err(invalid(format!("model expects {} channels, got {c}", cfg.channels)));
        }
        if frames == 0 || resolution == 0 || !frames.is_multiple_of(cfg.patch[0]) || !resolution.is_multiple_of(cfg.patch[1]) || !resolution.is_multiple_of(cfg.patch[2]) {
            return Err(invalid("frames and resolution must be positive multiples of the patch size"));
        }
        let n = t * h * w * c;
        if n == 0 {
            return Err(invalid("empty video"));
        }
        let sample = VideoSample {
            frames: std::slice::from_raw_parts(video, n).to_vec(),
            motion_mask: vec![false; t * h * w],
            label: 0,
            seed: 0,
            dims: [t, h, w, c],
        };
        let grid = SamplingGrid::new(frames, resolution, cfg.patch);
        let pool = patchify(&sample, &grid)?;
        let scores = dynamic_scores(&pool.features, &grid, NormOrder::L2)?;
        let mask = select_group_dynamic(&scores.scores, &grid, k, groups)?;
        let mut g = Graph::new();
        let b = bind(&mut g, params, false);
        let out = forward(&mut g, &b, cfg, &pool, &mask)?;
        let logits = g.value(out.logits).data();
        std::slice::from_raw_parts_mut(out_logits, cfg.num_classes).copy_from_slice(logits);
        Ok(())
    })
}
