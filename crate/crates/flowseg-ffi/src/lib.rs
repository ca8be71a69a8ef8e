//! C ABI over the segmentation engine.
//!
//! Conventions, which the generated `include/flowseg.h` restates:
//!
//! - `FsgConfig`, `FsgVolume`, and `FsgModels` are opaque handles. Create
//!   and destroy them only through this API; freeing is never implicit.
//! - Functions returning [`FsgStatus`] report failure through the code and
//!   leave a message readable with [`fsg_last_error`]. Functions returning
//!   a pointer return null on failure and leave the same message.
//! - `char*` results are owned by the caller and released with
//!   [`fsg_string_free`]; `const char*` results are borrowed.
//! - Handles are not synchronized: using one from two threads at once is
//!   the caller's bug. Distinct handles are independent.
//! - Panics never unwind across the boundary; they surface as
//!   `FSG_STATUS_FAIL` with an `internal panic` message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use flowseg::config::RunConfig;
use flowseg::flow::VelocityField;
use flowseg::guidance::{tfg_segment, GuidanceModels};
use flowseg::io::{read_volume, write_volume};
use flowseg::latent::Autoencoder;
use flowseg::metrics::{dice, mean_surface_distance};
use flowseg::phantom::Volume;
use flowseg::pipeline::{
    eval_cmd, gen_data, load_fold_models, segment_cmd, train_ae_cmd, train_flow_cmd,
    train_predictor_cmd,
};
use flowseg::predictor::Classifier;

/// Outcome of a call. Nonzero codes match the CLI's exit codes where one
/// exists: 1 generic failure, 2 bad configuration or argument, 3 missing
/// artifact, 4 numeric failure. 5 flags a null pointer handed to a
/// parameter that requires one.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsgStatus {
    Ok = 0,
    Fail = 1,
    Config = 2,
    MissingArtifact = 3,
    Numeric = 4,
    NullArgument = 5,
}

/// A run configuration: the same keys the CLI's config file accepts.
pub struct FsgConfig(RunConfig);

/// A dense float volume with voxel spacing in millimeters.
pub struct FsgVolume(Volume);

/// The three trained models one fold's segmentation needs.
pub struct FsgModels {
    ae: Autoencoder,
    flow: VelocityField,
    clf: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let clean: String = msg.chars().filter(|&ch| ch != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn fail(e: &flowseg::Error) -> FsgStatus {
    set_last_error(&e.to_string());
    match e.exit_code() {
        2 => FsgStatus::Config,
        3 => FsgStatus::MissingArtifact,
        4 => FsgStatus::Numeric,
        _ => FsgStatus::Fail,
    }
}

fn null_arg(what: &str) -> FsgStatus {
    set_last_error(&format!("{what} must not be null"));
    FsgStatus::NullArgument
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> &str {
    p.downcast_ref::<&str>()
        .copied()
        .or_else(|| p.downcast_ref::<String>().map(String::as_str))
        .unwrap_or("unknown panic")
}

fn guard_status(f: impl FnOnce() -> FsgStatus) -> FsgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            set_last_error(&format!("internal panic: {}", panic_text(p.as_ref())));
            FsgStatus::Fail
        }
    }
}

fn guard_ptr<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(p) => p,
        Err(p) => {
            set_last_error(&format!("internal panic: {}", panic_text(p.as_ref())));
            ptr::null_mut()
        }
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

unsafe fn handle_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, FsgStatus> {
    p.as_ref().ok_or_else(|| null_arg(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FsgStatus> {
    p.as_mut().ok_or_else(|| null_arg(what))
}

unsafe fn cstr_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FsgStatus> {
    if p.is_null() {
        return Err(null_arg(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_last_error(&format!("{what} is not valid UTF-8"));
        FsgStatus::Config
    })
}

unsafe fn put<T>(p: *mut T, v: T) {
    if !p.is_null() {
        p.write(v);
    }
}

fn own<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

// --- library ----------------------------------------------------------------

/// Version of the library, as a static string.
#[no_mangle]
pub extern "C" fn fsg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failure on the calling thread, or an empty
/// string if nothing failed yet. Borrowed; valid until the next failure on
/// the same thread.
#[no_mangle]
pub extern "C" fn fsg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string this library returned as `char*`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fsg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// --- config -------------------------------------------------------------

/// New configuration holding every default.
#[no_mangle]
pub extern "C" fn fsg_config_new() -> *mut FsgConfig {
    guard_ptr(|| own(FsgConfig(RunConfig::default())))
}

/// Parse configuration text (`key = value` lines, `#` comments). Returns
/// null and sets the error message on any unknown key, duplicate key, bad
/// value, or cross-field violation.
#[no_mangle]
pub unsafe extern "C" fn fsg_config_parse(text: *const c_char) -> *mut FsgConfig {
    guard_ptr(|| {
        let text = match cstr_arg(text, "text") {
            Ok(t) => t,
            Err(_) => return ptr::null_mut(),
        };
        match RunConfig::parse(text) {
            Ok(c) => own(FsgConfig(c)),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Load and parse a configuration file.
#[no_mangle]
pub unsafe extern "C" fn fsg_config_load(path: *const c_char) -> *mut FsgConfig {
    guard_ptr(|| {
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match RunConfig::load(Path::new(path)) {
            Ok(c) => own(FsgConfig(c)),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Set one key to its textual value, e.g. `("data.count", "60")`. Values
/// are checked individually; cross-field rules wait for
/// `fsg_config_validate` so keys can arrive in any order.
#[no_mangle]
pub unsafe extern "C" fn fsg_config_set(
    cfg: *mut FsgConfig,
    key: *const c_char,
    value: *const c_char,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_mut(cfg, "cfg"));
        let key = try_ffi!(cstr_arg(key, "key"));
        let value = try_ffi!(cstr_arg(value, "value"));
        match cfg.0.set(key, value) {
            Ok(()) => FsgStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Check the cross-field rules (fold counts, guidance window, ranges).
#[no_mangle]
pub unsafe extern "C" fn fsg_config_validate(cfg: *const FsgConfig) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        match cfg.0.validate() {
            Ok(()) => FsgStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Canonical text form listing every key. Caller frees with
/// `fsg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fsg_config_serialize(cfg: *const FsgConfig) -> *mut c_char {
    guard_ptr(|| {
        let cfg = match handle_ref(cfg, "cfg") {
            Ok(c) => c,
            Err(_) => return ptr::null_mut(),
        };
        match CString::new(cfg.0.serialize()) {
            Ok(s) => s.into_raw(),
            Err(_) => {
                set_last_error("serialized config contains an interior NUL");
                ptr::null_mut()
            }
        }
    })
}

/// Release a configuration. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fsg_config_free(cfg: *mut FsgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// --- pipeline -----------------------------------------------------------

/// Generate the phantom corpus under the config's output directory.
/// Writes volumes, masks, and the manifest; `out_count`, when non-null,
/// receives the number of volumes generated.
#[no_mangle]
pub unsafe extern "C" fn fsg_gen_data(cfg: *const FsgConfig, out_count: *mut usize) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        match gen_data(&cfg.0) {
            Ok(m) => {
                put(out_count, m.volumes.len());
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Train the autoencoder for one fold (or materialize the identity latent
/// when `ae.identity` is set). `out_val_mse`, when non-null, receives the
/// final held-out reconstruction MSE.
#[no_mangle]
pub unsafe extern "C" fn fsg_train_ae(
    cfg: *const FsgConfig,
    fold: usize,
    out_val_mse: *mut f32,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        match train_ae_cmd(&cfg.0, fold) {
            Ok(mse) => {
                put(out_val_mse, mse);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Train the latent velocity field for one fold. When non-null,
/// `out_first_loss` and `out_last_loss` receive the first and last
/// smoothed training losses.
#[no_mangle]
pub unsafe extern "C" fn fsg_train_flow(
    cfg: *const FsgConfig,
    fold: usize,
    out_first_loss: *mut f64,
    out_last_loss: *mut f64,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        match train_flow_cmd(&cfg.0, fold) {
            Ok((first, last)) => {
                put(out_first_loss, first);
                put(out_last_loss, last);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Train the weakly supervised slice classifier for one fold.
/// `out_f1`, when non-null, receives the best held-out slice F1.
#[no_mangle]
pub unsafe extern "C" fn fsg_train_predictor(
    cfg: *const FsgConfig,
    fold: usize,
    out_f1: *mut f32,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        match train_predictor_cmd(&cfg.0, fold) {
            Ok(f1) => {
                put(out_f1, f1);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Segment volumes with one method: `"tfg"`, `"cam"`, or `"gradcam"`.
/// `fold` and `volume` restrict the work; pass -1 for all. `jobs` caps the
/// worker threads (0 counts as 1). `out_count`, when non-null, receives
/// the number of volumes segmented.
#[no_mangle]
pub unsafe extern "C" fn fsg_segment(
    cfg: *const FsgConfig,
    method: *const c_char,
    fold: i64,
    volume: i64,
    jobs: usize,
    out_count: *mut usize,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        let method = try_ffi!(cstr_arg(method, "method"));
        let fold = if fold < 0 { None } else { Some(fold as usize) };
        let volume = if volume < 0 { None } else { Some(volume as usize) };
        match segment_cmd(&cfg.0, method, fold, volume, None, jobs.max(1)) {
            Ok(n) => {
                put(out_count, n);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Score stored segmentations against ground truth, writing results.csv,
/// summary.csv, and table.txt under the output directory. `methods` is a
/// comma-separated list; null means `"tfg,cam,gradcam"`. `out_table`, when
/// non-null, receives the rendered table (free with `fsg_string_free`).
#[no_mangle]
pub unsafe extern "C" fn fsg_eval(
    cfg: *const FsgConfig,
    methods: *const c_char,
    jobs: usize,
    out_table: *mut *mut c_char,
) -> FsgStatus {
    guard_status(|| {
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        let list = if methods.is_null() {
            "tfg,cam,gradcam"
        } else {
            try_ffi!(cstr_arg(methods, "methods"))
        };
        let methods: Vec<String> =
            list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        match eval_cmd(&cfg.0, &methods, None, jobs.max(1)) {
            Ok(table) => {
                if !out_table.is_null() {
                    match CString::new(table) {
                        Ok(s) => put(out_table, s.into_raw()),
                        Err(_) => {
                            set_last_error("table contains an interior NUL");
                            return FsgStatus::Fail;
                        }
                    }
                }
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

// --- volumes --------------------------------------------------------------

/// Read a `.fsvl` volume file.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_read(path: *const c_char) -> *mut FsgVolume {
    guard_ptr(|| {
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match read_volume(Path::new(path)) {
            Ok(v) => own(FsgVolume(v)),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Write a volume as a `.fsvl` file, creating parent directories.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_write(
    vol: *const FsgVolume,
    path: *const c_char,
) -> FsgStatus {
    guard_status(|| {
        let vol = try_ffi!(handle_ref(vol, "vol"));
        let path = try_ffi!(cstr_arg(path, "path"));
        let path = Path::new(path);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                if let Err(e) = std::fs::create_dir_all(parent) {
                    return fail(&flowseg::Error::Io(e));
                }
            }
        }
        match write_volume(path, &vol.0) {
            Ok(()) => FsgStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Build a volume from row-major voxels. `dims` and `spacing` point at
/// three values each; `len` must equal `dims[0]*dims[1]*dims[2]`. The
/// voxels are copied.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_create(
    dims: *const usize,
    spacing: *const f32,
    values: *const f32,
    len: usize,
) -> *mut FsgVolume {
    guard_ptr(|| {
        if dims.is_null() || spacing.is_null() || (values.is_null() && len > 0) {
            null_arg("dims/spacing/values");
            return ptr::null_mut();
        }
        let dims = [*dims, *dims.add(1), *dims.add(2)];
        let spacing = [*spacing, *spacing.add(1), *spacing.add(2)];
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(values, len).to_vec()
        };
        match Volume::with_values(dims, spacing, values) {
            Ok(v) => own(FsgVolume(v)),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Copy the volume's dimensions into `out_dims[3]`.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_dims(
    vol: *const FsgVolume,
    out_dims: *mut usize,
) -> FsgStatus {
    guard_status(|| {
        let vol = try_ffi!(handle_ref(vol, "vol"));
        if out_dims.is_null() {
            return null_arg("out_dims");
        }
        for (i, &d) in vol.0.dims.iter().enumerate() {
            out_dims.add(i).write(d);
        }
        FsgStatus::Ok
    })
}

/// Copy the voxel spacing in millimeters into `out_spacing[3]`.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_spacing(
    vol: *const FsgVolume,
    out_spacing: *mut f32,
) -> FsgStatus {
    guard_status(|| {
        let vol = try_ffi!(handle_ref(vol, "vol"));
        if out_spacing.is_null() {
            return null_arg("out_spacing");
        }
        for (i, &s) in vol.0.spacing.iter().enumerate() {
            out_spacing.add(i).write(s);
        }
        FsgStatus::Ok
    })
}

/// Number of voxels, or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_len(vol: *const FsgVolume) -> usize {
    vol.as_ref().map_or(0, |v| v.0.values.len())
}

/// Borrowed pointer to the row-major voxels, or null for null. Valid until
/// the volume is freed; nothing in this API mutates a volume in place.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_data(vol: *const FsgVolume) -> *const f32 {
    vol.as_ref().map_or(ptr::null(), |v| v.0.values.as_ptr())
}

/// Release a volume. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fsg_volume_free(vol: *mut FsgVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

// --- models and segmentation ---------------------------------------------

/// Load a fold's trained autoencoder, velocity field, and classifier from
/// the config's output directory. With `ae.identity` set, the autoencoder
/// needs no checkpoint.
#[no_mangle]
pub unsafe extern "C" fn fsg_models_load(cfg: *const FsgConfig, fold: usize) -> *mut FsgModels {
    guard_ptr(|| {
        let cfg = match handle_ref(cfg, "cfg") {
            Ok(c) => c,
            Err(_) => return ptr::null_mut(),
        };
        match load_fold_models(&cfg.0, fold) {
            Ok((ae, flow, clf)) => own(FsgModels { ae, flow, clf }),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Release a model bundle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fsg_models_free(models: *mut FsgModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Counterfactual segmentation of one volume (display intensity range
/// [0, 255]), using the config's `guidance.*` and `flow.t_steps` keys. Each
/// non-null output receives a new handle the caller frees: `out_mask` the
/// binary mask, `out_counterfactual` the pseudo-healthy reconstruction,
/// `out_residual` the absolute difference the mask is cut from.
/// `out_skipped`, when non-null, is set to true when no slice was
/// predicted positive, in which case the mask comes from the unguided
/// reconstruction alone.
#[no_mangle]
pub unsafe extern "C" fn fsg_tfg_segment(
    models: *const FsgModels,
    volume: *const FsgVolume,
    cfg: *const FsgConfig,
    out_mask: *mut *mut FsgVolume,
    out_counterfactual: *mut *mut FsgVolume,
    out_residual: *mut *mut FsgVolume,
    out_skipped: *mut bool,
) -> FsgStatus {
    guard_status(|| {
        let models = try_ffi!(handle_ref(models, "models"));
        let volume = try_ffi!(handle_ref(volume, "volume"));
        let cfg = try_ffi!(handle_ref(cfg, "cfg"));
        let bundle = GuidanceModels { ae: &models.ae, flow: &models.flow, clf: &models.clf };
        match tfg_segment(&volume.0, &bundle, &cfg.0.guidance_config()) {
            Ok(res) => {
                put(out_skipped, res.guidance_skipped);
                if !out_mask.is_null() {
                    put(out_mask, own(FsgVolume(res.mask)));
                }
                if !out_counterfactual.is_null() {
                    put(out_counterfactual, own(FsgVolume(res.counterfactual)));
                }
                if !out_residual.is_null() {
                    put(out_residual, own(FsgVolume(res.residual)));
                }
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

// --- metrics ---------------------------------------------------------------

/// Dice overlap of two binary masks on the same grid (1.0 when both are
/// empty, 0.0 when exactly one is).
#[no_mangle]
pub unsafe extern "C" fn fsg_dice(
    a: *const FsgVolume,
    b: *const FsgVolume,
    out: *mut f64,
) -> FsgStatus {
    guard_status(|| {
        let a = try_ffi!(handle_ref(a, "a"));
        let b = try_ffi!(handle_ref(b, "b"));
        if out.is_null() {
            return null_arg("out");
        }
        match dice(&a.0, &b.0) {
            Ok(d) => {
                out.write(d);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Symmetric mean surface distance in millimeters between two binary
/// masks on the same grid, using the first volume's spacing (0.0 when
/// both are empty; pooled over the diagonal when exactly one is).
#[no_mangle]
pub unsafe extern "C" fn fsg_mean_surface_distance(
    a: *const FsgVolume,
    b: *const FsgVolume,
    out: *mut f64,
) -> FsgStatus {
    guard_status(|| {
        let a = try_ffi!(handle_ref(a, "a"));
        let b = try_ffi!(handle_ref(b, "b"));
        if out.is_null() {
            return null_arg("out");
        }
        match mean_surface_distance(&a.0, &b.0, a.0.spacing) {
            Ok(d) => {
                out.write(d);
                FsgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
