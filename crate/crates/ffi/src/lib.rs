//! C ABI over the flowmine supervision, loss and metric routines.
//!
//! Every fallible call returns an [`FmStatus`]; on failure the message is
//! available from [`fm_last_error_message`] on the same thread. Arrays of
//! 3-vectors are passed as flat `x, y, z` doubles.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use flowmine::ensemble::{mine_supervision, EnsemblingConfig, Supervision};
use flowmine::error::Error;
use flowmine::geometry::{FlowField, Frame, FrameWindow, RigidTransform, Vec3};
use flowmine::loss::{total_loss, DclsMode, LossConfig};
use flowmine::metrics::{dynamic_mask_from_gt, threeway_epe, EvalConfig, ObjectClass};
use flowmine::segment::{ClusterSet, FrameLabels};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidWindow = 2,
    LengthMismatch = 3,
    InvalidConfig = 4,
    InvalidTransform = 5,
    MissingTarget = 6,
    OutOfRange = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for FmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidWindow(_) => FmStatus::InvalidWindow,
            Error::LengthMismatch { .. } => FmStatus::LengthMismatch,
            Error::Config(_) => FmStatus::InvalidConfig,
            Error::InvalidTransform(_) => FmStatus::InvalidTransform,
            Error::MissingTarget(_) => FmStatus::MissingTarget,
            Error::OutOfRange { .. } => FmStatus::OutOfRange,
            _ => FmStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(FmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside flowmine".into());
            FmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `3 * n` readable doubles.
unsafe fn vectors(ptr: *const f64, n: usize, what: &str) -> Result<Vec<Vec3>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    let raw = slice::from_raw_parts(ptr, 3 * n);
    Ok(raw.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

unsafe fn array<'a, T>(ptr: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, n))
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmEnsemblingConfig {
    pub tau_cos: f64,
    pub top_k: usize,
    pub gamma: f64,
    pub zero_norm_eps: f64,
    pub use_consensus_matrix: bool,
    pub use_reliability_weights: bool,
    pub use_aggregation: bool,
}

impl From<EnsemblingConfig> for FmEnsemblingConfig {
    fn from(c: EnsemblingConfig) -> Self {
        Self {
            tau_cos: c.tau_cos,
            top_k: c.top_k,
            gamma: c.gamma,
            zero_norm_eps: c.zero_norm_eps,
            use_consensus_matrix: c.use_consensus_matrix,
            use_reliability_weights: c.use_reliability_weights,
            use_aggregation: c.use_aggregation,
        }
    }
}

impl From<FmEnsemblingConfig> for EnsemblingConfig {
    fn from(c: FmEnsemblingConfig) -> Self {
        Self {
            tau_cos: c.tau_cos,
            top_k: c.top_k,
            gamma: c.gamma,
            zero_norm_eps: c.zero_norm_eps,
            use_consensus_matrix: c.use_consensus_matrix,
            use_reliability_weights: c.use_reliability_weights,
            use_aggregation: c.use_aggregation,
        }
    }
}

/// `dcls_mode`: 0 both terms, 1 point-level only, 2 cluster-level only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmLossConfig {
    pub enable_dcls: bool,
    pub enable_static: bool,
    pub enable_geom: bool,
    pub dcls_mode: u32,
    pub chamfer_truncation: f64,
}

impl FmLossConfig {
    fn to_core(self) -> Result<LossConfig, Fail> {
        let c = self;
        let dcls_mode = match c.dcls_mode {
            0 => DclsMode::Both,
            1 => DclsMode::PointOnly,
            2 => DclsMode::ClusterOnly,
            m => return Err(Fail(FmStatus::InvalidConfig, format!("unknown dcls mode {m}"))),
        };
        Ok(LossConfig {
            enable_dcls: c.enable_dcls,
            enable_static: c.enable_static,
            enable_geom: c.enable_geom,
            dcls_mode,
            chamfer_truncation: c.chamfer_truncation,
        })
    }
}

#[no_mangle]
pub extern "C" fn fm_ensembling_config_default() -> FmEnsemblingConfig {
    EnsemblingConfig::default().into()
}

#[no_mangle]
pub extern "C" fn fm_loss_config_default() -> FmLossConfig {
    let c = LossConfig::default();
    FmLossConfig {
        enable_dcls: c.enable_dcls,
        enable_static: c.enable_static,
        enable_geom: c.enable_geom,
        dcls_mode: 0,
        chamfer_truncation: c.chamfer_truncation,
    }
}

/// Frames of one window, pushed oldest first; the second-to-last frame
/// pushed is the source.
pub struct FmWindow {
    frames: Vec<Frame>,
    transforms: Vec<RigidTransform>,
}

impl FmWindow {
    fn build(&self) -> Result<FrameWindow, Fail> {
        Ok(FrameWindow::align(self.frames.clone(), self.transforms.clone())?)
    }
}

#[no_mangle]
pub extern "C" fn fm_window_new() -> *mut FmWindow {
    Box::into_raw(Box::new(FmWindow {
        frames: Vec::new(),
        transforms: Vec::new(),
    }))
}

/// # Safety
/// `window` must come from [`fm_window_new`] and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fm_window_free(window: *mut FmWindow) {
    if !window.is_null() {
        drop(Box::from_raw(window));
    }
}

/// Appends a frame.
///
/// `points` holds `3 * n` doubles; `labels` holds `n` codes (−1 static,
/// −2 dynamic noise, ≥0 cluster id). `transform` is a row-major 4×4 from
/// this frame into the sensor frame of the last frame, or null for identity.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fm_window_push_frame(
    window: *mut FmWindow,
    points: *const f64,
    labels: *const i32,
    n: usize,
    transform: *const f64,
) -> FmStatus {
    guard(|| {
        let w = window.as_mut().ok_or_else(|| null("window"))?;
        let pts = vectors(points, n, "points")?;
        let codes = array(labels, n, "labels")?;
        let l = FrameLabels::from_codes(codes)?;
        let t = if transform.is_null() {
            RigidTransform::identity()
        } else {
            RigidTransform::from_row_major(slice::from_raw_parts(transform, 16))?
        };
        w.frames.push(Frame {
            index: w.frames.len() as i64,
            points: pts,
            dynamic_mask: l.dynamic_mask,
            cluster_id: l.cluster_id,
        });
        w.transforms.push(t);
        Ok(())
    })
}

/// # Safety
/// `window` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_window_frame_count(window: *const FmWindow) -> usize {
    window.as_ref().map_or(0, |w| w.frames.len())
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FmTarget {
    pub cluster_id: u32,
    pub target: [f64; 3],
    pub pool_size: usize,
    pub winner: usize,
}

/// Mined targets, ordered by cluster id.
pub struct FmSupervision {
    inner: Supervision,
    ordered: Vec<FmTarget>,
}

/// Mines targets for every source cluster with at least `min_cluster_size`
/// points. `flow` holds `3 * n` doubles for the source frame, or is null for
/// a zero flow. `config` may be null for the defaults.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_mine_supervision(
    window: *const FmWindow,
    flow: *const f64,
    n: usize,
    config: *const FmEnsemblingConfig,
    min_cluster_size: usize,
    out: *mut *mut FmSupervision,
) -> FmStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fw = w.build()?;
        let flow = if flow.is_null() {
            FlowField::zeros(fw.source().len())
        } else {
            FlowField::new(vectors(flow, n, "flow")?)
        };
        let cfg: EnsemblingConfig = config.as_ref().map_or_else(EnsemblingConfig::default, |c| (*c).into());
        let clusters = ClusterSet::from_frame(fw.source(), min_cluster_size);
        let inner = mine_supervision(&fw, &clusters, &flow, &cfg)?;
        let ordered = inner
            .iter()
            .map(|(&id, s)| FmTarget {
                cluster_id: id,
                target: [s.target.x, s.target.y, s.target.z],
                pool_size: s.pool.len(),
                winner: s.consensus.winner,
            })
            .collect();
        *out = Box::into_raw(Box::new(FmSupervision { inner, ordered }));
        Ok(())
    })
}

/// # Safety
/// `sup` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_supervision_len(sup: *const FmSupervision) -> usize {
    sup.as_ref().map_or(0, |s| s.ordered.len())
}

/// # Safety
/// `sup` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fm_supervision_get(
    sup: *const FmSupervision,
    index: usize,
    out: *mut FmTarget,
) -> FmStatus {
    guard(|| {
        let s = sup.as_ref().ok_or_else(|| null("supervision"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *s.ordered.get(index).ok_or_else(|| {
            Fail(
                FmStatus::OutOfRange,
                format!("target {index} of {}", s.ordered.len()),
            )
        })?;
        Ok(())
    })
}

/// Winner supporters of one cluster. Writes up to `capacity` candidate
/// indices and stores the full count in `count`.
///
/// # Safety
/// `out` must hold `capacity` writable entries; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_supervision_supporters(
    sup: *const FmSupervision,
    cluster_id: u32,
    out: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> FmStatus {
    guard(|| {
        let s = sup.as_ref().ok_or_else(|| null("supervision"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        let c = s.inner.get(&cluster_id).ok_or(Error::MissingTarget(cluster_id))?;
        let sup = &c.consensus.supporters;
        *count = sup.len();
        if capacity > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            let dst = slice::from_raw_parts_mut(out, capacity);
            for (d, &v) in dst.iter_mut().zip(sup) {
                *d = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `sup` must come from [`fm_mine_supervision`] and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn fm_supervision_free(sup: *mut FmSupervision) {
    if !sup.is_null() {
        drop(Box::from_raw(sup));
    }
}

/// Total training loss of `flow` (3·n doubles, source frame) for targets
/// given as parallel arrays `cluster_ids` / `targets` (3·m doubles).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_total_loss(
    window: *const FmWindow,
    flow: *const f64,
    n: usize,
    cluster_ids: *const u32,
    targets: *const f64,
    m: usize,
    config: *const FmLossConfig,
    min_cluster_size: usize,
    out: *mut f64,
) -> FmStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let fw = w.build()?;
        let flow = FlowField::new(vectors(flow, n, "flow")?);
        let ids = array(cluster_ids, m, "cluster_ids")?;
        let tv = vectors(targets, m, "targets")?;
        let map: BTreeMap<u32, Vec3> = ids.iter().copied().zip(tv).collect();
        let cfg: LossConfig = match config.as_ref() {
            Some(c) => c.to_core()?,
            None => LossConfig::default(),
        };
        let clusters = ClusterSet::from_frame(fw.source(), min_cluster_size);
        *out = total_loss(&flow, &fw, &clusters, &map, &cfg)?.total;
        Ok(())
    })
}

/// Three-way EPE; empty categories are reported as NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FmThreeWay {
    pub mean: f64,
    pub fd: f64,
    pub fs: f64,
    pub bs: f64,
    pub count_fd: usize,
    pub count_fs: usize,
    pub count_bs: usize,
}

/// `classes` holds `n` codes (0 background, 1 car, 2 other, 3 pedestrian,
/// 4 VRU). `points` may be null to skip the evaluation-region filter.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_threeway_epe(
    pred: *const f64,
    gt: *const f64,
    classes: *const i32,
    points: *const f64,
    n: usize,
    dynamic_threshold: f64,
    out: *mut FmThreeWay,
) -> FmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let pred = FlowField::new(vectors(pred, n, "pred")?);
        let gt = FlowField::new(vectors(gt, n, "gt")?);
        let classes = array(classes, n, "classes")?
            .iter()
            .map(|&c| ObjectClass::from_code(c))
            .collect::<Result<Vec<_>, _>>()?;
        let pts = if points.is_null() {
            None
        } else {
            Some(vectors(points, n, "points")?)
        };
        let cfg = EvalConfig {
            dynamic_threshold,
            ..EvalConfig::default()
        };
        cfg.validate()?;
        let dynamic = dynamic_mask_from_gt(&gt, dynamic_threshold);
        let fg: Vec<bool> = classes.iter().map(|c| c.is_foreground()).collect();
        let r = threeway_epe(&pred, &gt, &dynamic, &fg, pts.as_deref(), &cfg)?;
        *out = FmThreeWay {
            mean: r.mean.unwrap_or(f64::NAN),
            fd: r.fd.unwrap_or(f64::NAN),
            fs: r.fs.unwrap_or(f64::NAN),
            bs: r.bs.unwrap_or(f64::NAN),
            count_fd: r.count_fd,
            count_fs: r.count_fs,
            count_bs: r.count_bs,
        };
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
