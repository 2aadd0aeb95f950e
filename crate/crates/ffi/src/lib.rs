//! C ABI over the `gausspose` library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `gp_*_free`. Every function returns a [`GpStatus`]; on
//! failure a description is kept per thread and read back with
//! [`gp_last_error_message`]. Transform parameters are flat `double` arrays
//! of six values per part (`xx, xy, yx, yy, tx, ty`) in template order.
//! Panics never unwind into the caller; they surface as `GP_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gausspose::diff::ParamVector;
use gausspose::eval::keypoints_from_transforms;
use gausspose::fit::{fit_pose, FitConfig, FitResult};
use gausspose::geometry::AffineTransform;
use gausspose::loss::{anchor_loss, boundary_loss, total_loss, Features, LossBreakdown, LossConfig};
use gausspose::render::{render_analytic, render_warped, PartMaps};
use gausspose::template::{canonical_human_template, parse_template, Template};
use gausspose::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Schema = 3,
    Reference = 4,
    Geometry = 5,
    SingularTransform = 6,
    ShapeMismatch = 7,
    NonFinite = 8,
    Io = 9,
    Format = 10,
    SamplingExhausted = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for GpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Schema(_) => GpStatus::Schema,
            Error::Reference(_) => GpStatus::Reference,
            Error::Geometry(_) => GpStatus::Geometry,
            Error::SingularTransform { .. } => GpStatus::SingularTransform,
            Error::ShapeMismatch(_) => GpStatus::ShapeMismatch,
            Error::NonFinite(_) => GpStatus::NonFinite,
            Error::InvalidArgument(_) => GpStatus::InvalidArgument,
            Error::SamplingExhausted { .. } => GpStatus::SamplingExhausted,
            Error::Format(_) => GpStatus::Format,
            Error::Io { .. } => GpStatus::Io,
        }
    }
}

/// Opaque template handle.
pub struct GpTemplate(Template);

/// Opaque part-map stack (`channels x size x size`).
pub struct GpPartMaps(PartMaps);

/// Opaque fit result.
pub struct GpFitResult(FitResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub boundary_b: f64,
    /// Average-pooling factor applied before the L1 comparison; 0 or 1
    /// compares raw map values.
    pub avg_pool: usize,
}

impl From<&LossConfig> for GpLossConfig {
    fn from(c: &LossConfig) -> Self {
        GpLossConfig {
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            boundary_b: c.boundary_b,
            avg_pool: match c.recon_features {
                Features::Identity => 0,
                Features::AvgPool(f) => f,
            },
        }
    }
}

impl From<&GpLossConfig> for LossConfig {
    fn from(c: &GpLossConfig) -> Self {
        LossConfig {
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            boundary_b: c.boundary_b,
            recon_features: match c.avg_pool {
                0 | 1 => Features::Identity,
                f => Features::AvgPool(f),
            },
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GpLossBreakdown {
    pub recon: f64,
    pub anchor: f64,
    pub boundary: f64,
    pub total: f64,
}

impl From<&LossBreakdown> for GpLossBreakdown {
    fn from(l: &LossBreakdown) -> Self {
        GpLossBreakdown {
            recon: l.recon,
            anchor: l.anchor,
            boundary: l.boundary,
            total: l.total,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpFitConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub patience: usize,
    pub seed: u64,
    pub loss: GpLossConfig,
    pub resolution: usize,
}

impl From<&FitConfig> for GpFitConfig {
    fn from(c: &FitConfig) -> Self {
        GpFitConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            convergence_tol: c.convergence_tol,
            patience: c.patience,
            seed: c.seed,
            loss: (&c.loss).into(),
            resolution: c.resolution,
        }
    }
}

impl From<&GpFitConfig> for FitConfig {
    fn from(c: &GpFitConfig) -> Self {
        FitConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            convergence_tol: c.convergence_tol,
            patience: c.patience,
            seed: c.seed,
            loss: (&c.loss).into(),
            resolution: c.resolution,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Status(GpStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FfiResult = Result<(), Fail>;

fn null(what: &str) -> Fail {
    Fail::Status(GpStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> FfiResult) -> GpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GpStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            GpStatus::from(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            GpStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        Fail::Status(
            GpStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn transforms(
    template: &Template,
    params: *const f64,
    n_params: usize,
) -> Result<Vec<AffineTransform>, Fail> {
    let expected = template.num_parts() * AffineTransform::PARAMS;
    if n_params != expected {
        return Err(Error::ShapeMismatch(format!(
            "{n_params} parameters, template needs {expected}"
        ))
        .into());
    }
    let values = unsafe { slice(params, n_params, "params") }?;
    Ok(ParamVector::new(values.to_vec())?.to_transforms())
}

fn check_len(have: usize, need: usize, what: &str) -> FfiResult {
    if have < need {
        return Err(Fail::Status(
            GpStatus::BufferTooSmall,
            format!("`{what}` holds {have} values, {need} needed"),
        ));
    }
    Ok(())
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> FfiResult {
    if out.is_null() {
        return Err(null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to fit) into `buf` and returns the buffer size needed for the whole
/// message including the terminator. `buf` may be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn gp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        bytes.len() + 1
    })
}

/// The built-in 18-part human template.
#[no_mangle]
pub unsafe extern "C" fn gp_template_canonical(out: *mut *mut GpTemplate) -> GpStatus {
    guard(|| unsafe {
        put(
            out,
            Box::into_raw(Box::new(GpTemplate(canonical_human_template()))),
            "out",
        )
    })
}

/// Parses a TOML template.
#[no_mangle]
pub unsafe extern "C" fn gp_template_parse(
    text: *const c_char,
    out: *mut *mut GpTemplate,
) -> GpStatus {
    guard(|| unsafe {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = parse_template(string(text, "text")?)?;
        put(out, Box::into_raw(Box::new(GpTemplate(t))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_template_free(template: *mut GpTemplate) {
    if !template.is_null() {
        drop(unsafe { Box::from_raw(template) });
    }
}

/// Number of parts, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn gp_template_num_parts(template: *const GpTemplate) -> usize {
    unsafe { template.as_ref() }.map_or(0, |t| t.0.num_parts())
}

#[no_mangle]
pub unsafe extern "C" fn gp_template_num_anchor_pairs(template: *const GpTemplate) -> usize {
    unsafe { template.as_ref() }.map_or(0, |t| t.0.anchor_pairs().len())
}

#[no_mangle]
pub unsafe extern "C" fn gp_template_num_keypoints(template: *const GpTemplate) -> usize {
    unsafe { template.as_ref() }.map_or(0, |t| t.0.keypoints().len())
}

/// Copies the id of keypoint `index` like [`gp_last_error_message`] and
/// stores the size needed (including the terminator) in `needed`.
#[no_mangle]
pub unsafe extern "C" fn gp_template_keypoint_id(
    template: *const GpTemplate,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        let kp = t.keypoints().get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("keypoint index {index} out of range"))
        })?;
        let bytes = kp.id.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len() + 1;
        }
        if len == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
        Ok(())
    })
}

/// Analytic rendering of the transformed template.
#[no_mangle]
pub unsafe extern "C" fn gp_render_analytic(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    resolution: usize,
    out: *mut *mut GpPartMaps,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let maps = render_analytic(t, &transforms(t, params, n_params)?, resolution)?;
        put(out, Box::into_raw(Box::new(GpPartMaps(maps))), "out")
    })
}

/// Rendering by warping the canonical maps.
#[no_mangle]
pub unsafe extern "C" fn gp_render_warped(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    resolution: usize,
    out: *mut *mut GpPartMaps,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let maps = render_warped(t, &transforms(t, params, n_params)?, resolution)?;
        put(out, Box::into_raw(Box::new(GpPartMaps(maps))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_dims(
    maps: *const GpPartMaps,
    channels: *mut usize,
    size: *mut usize,
) -> GpStatus {
    guard(|| unsafe {
        let m = &borrow(maps, "maps")?.0;
        put(channels, m.channels(), "channels")?;
        put(size, m.size(), "size")
    })
}

/// Copies all `channels * size * size` values, channel-major then row-major.
#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_copy(
    maps: *const GpPartMaps,
    buf: *mut f64,
    len: usize,
) -> GpStatus {
    guard(|| unsafe {
        let m = &borrow(maps, "maps")?.0;
        check_len(len, m.data().len(), "buf")?;
        slice_mut(buf, len, "buf")?[..m.data().len()].copy_from_slice(m.data());
        Ok(())
    })
}

/// Builds maps from `channels * size * size` values in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_from_data(
    data: *const f64,
    channels: usize,
    size: usize,
    out: *mut *mut GpPartMaps,
) -> GpStatus {
    guard(|| unsafe {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = channels
            .checked_mul(size)
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| Error::InvalidArgument("dimensions overflow".into()))?;
        let values = slice(data, len, "data")?.to_vec();
        let maps = PartMaps::from_data(channels, size, values)?;
        put(out, Box::into_raw(Box::new(GpPartMaps(maps))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_read(
    path: *const c_char,
    out: *mut *mut GpPartMaps,
) -> GpStatus {
    guard(|| unsafe {
        if out.is_null() {
            return Err(null("out"));
        }
        let maps = PartMaps::read(Path::new(string(path, "path")?))?;
        put(out, Box::into_raw(Box::new(GpPartMaps(maps))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_write(
    maps: *const GpPartMaps,
    path: *const c_char,
) -> GpStatus {
    guard(|| unsafe {
        let m = &borrow(maps, "maps")?.0;
        m.write(Path::new(string(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_partmaps_free(maps: *mut GpPartMaps) {
    if !maps.is_null() {
        drop(unsafe { Box::from_raw(maps) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn gp_anchor_loss(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    out: *mut f64,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        let tr = transforms(t, params, n_params)?;
        put(out, anchor_loss(t, &tr), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_boundary_loss(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    bound: f64,
    out: *mut f64,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidArgument(format!("bound {bound}")).into());
        }
        let tr = transforms(t, params, n_params)?;
        put(out, boundary_loss(t, &tr, bound), "out")
    })
}

/// All loss terms for the given transforms against `target`.
#[no_mangle]
pub unsafe extern "C" fn gp_total_loss(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    target: *const GpPartMaps,
    config: *const GpLossConfig,
    out: *mut GpLossBreakdown,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        let target = &borrow(target, "target")?.0;
        let config: LossConfig = borrow(config, "config")?.into();
        let tr = transforms(t, params, n_params)?;
        let loss = total_loss(t, &tr, target, &config, target.size())?;
        put(out, (&loss).into(), "out")
    })
}

/// Library defaults (learning rate 1e-4).
#[no_mangle]
pub unsafe extern "C" fn gp_fit_config_default(out: *mut GpFitConfig) -> GpStatus {
    guard(|| unsafe { put(out, (&FitConfig::default()).into(), "out") })
}

/// Settings calibrated on synthetic poses (learning rate 1e-2, 300 iterations).
#[no_mangle]
pub unsafe extern "C" fn gp_fit_config_synthetic(out: *mut GpFitConfig) -> GpStatus {
    guard(|| unsafe { put(out, (&FitConfig::synthetic()).into(), "out") })
}

/// Fits part transforms to `target` starting from the canonical pose.
#[no_mangle]
pub unsafe extern "C" fn gp_fit_pose(
    template: *const GpTemplate,
    target: *const GpPartMaps,
    config: *const GpFitConfig,
    out: *mut *mut GpFitResult,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        let target = &borrow(target, "target")?.0;
        let config: FitConfig = borrow(config, "config")?.into();
        if out.is_null() {
            return Err(null("out"));
        }
        let r = fit_pose(t, target, &config)?;
        put(out, Box::into_raw(Box::new(GpFitResult(r))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_free(result: *mut GpFitResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Copies the best transforms (six values per part) into `buf`.
#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_transforms(
    result: *const GpFitResult,
    buf: *mut f64,
    len: usize,
) -> GpStatus {
    guard(|| unsafe {
        let r = &borrow(result, "result")?.0;
        let values = ParamVector::from_transforms(&r.transforms).into_inner();
        check_len(len, values.len(), "buf")?;
        slice_mut(buf, len, "buf")?[..values.len()].copy_from_slice(&values);
        Ok(())
    })
}

/// Copies keypoints as `x, y` pairs in template keypoint order.
#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_keypoints(
    result: *const GpFitResult,
    buf: *mut f64,
    len: usize,
) -> GpStatus {
    guard(|| unsafe {
        let r = &borrow(result, "result")?.0;
        let need = 2 * r.keypoints.len();
        check_len(len, need, "buf")?;
        let out = slice_mut(buf, len, "buf")?;
        for (i, k) in r.keypoints.iter().enumerate() {
            out[2 * i] = k.position.x;
            out[2 * i + 1] = k.position.y;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_summary(
    result: *const GpFitResult,
    best: *mut GpLossBreakdown,
    iterations: *mut usize,
    converged: *mut bool,
) -> GpStatus {
    guard(|| unsafe {
        let r = &borrow(result, "result")?.0;
        put(best, (&r.best).into(), "best")?;
        put(iterations, r.iterations_used, "iterations")?;
        put(converged, r.converged, "converged")
    })
}

/// Number of entries in the loss trace (iterations evaluated, including the start).
#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_trace_len(result: *const GpFitResult) -> usize {
    unsafe { result.as_ref() }.map_or(0, |r| r.0.loss_trace.len())
}

#[no_mangle]
pub unsafe extern "C" fn gp_fit_result_trace(
    result: *const GpFitResult,
    buf: *mut GpLossBreakdown,
    len: usize,
) -> GpStatus {
    guard(|| unsafe {
        let r = &borrow(result, "result")?.0;
        check_len(len, r.loss_trace.len(), "buf")?;
        if buf.is_null() && !r.loss_trace.is_empty() {
            return Err(null("buf"));
        }
        for (i, l) in r.loss_trace.iter().enumerate() {
            buf.add(i).write(l.into());
        }
        Ok(())
    })
}

/// Keypoints of the given transforms as `x, y` pairs in template order.
#[no_mangle]
pub unsafe extern "C" fn gp_keypoints_from_transforms(
    template: *const GpTemplate,
    params: *const f64,
    n_params: usize,
    buf: *mut f64,
    len: usize,
) -> GpStatus {
    guard(|| unsafe {
        let t = &borrow(template, "template")?.0;
        let tr = transforms(t, params, n_params)?;
        let kps = keypoints_from_transforms(t, &tr);
        check_len(len, 2 * kps.len(), "buf")?;
        let out = slice_mut(buf, len, "buf")?;
        for (i, k) in kps.iter().enumerate() {
            out[2 * i] = k.position.x;
            out[2 * i + 1] = k.position.y;
        }
        Ok(())
    })
}
