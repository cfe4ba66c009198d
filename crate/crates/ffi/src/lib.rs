//! C ABI over `confpose`.
//!
//! Every fallible function returns a [`CpStatus`]; on failure the message is
//! available from [`cp_last_error`] on the same thread. Streams are opaque
//! handles created by [`cp_stream_new`] and released with [`cp_stream_free`].
//! Quaternions are `w, x, y, z`.

use confpose::eval::{ate, Alignment};
use confpose::geom::umeyama_sim3;
use confpose::posegraph::{fuse_candidates_with, CandidatePose, FusionConfig, TopK, Weighting};
use confpose::refine::{refine, RefineConfig, RefinementProblem, RotationResidual};
use confpose::stream::{EventKind, FrameToken, StreamConfig, StreamState};
use confpose::{Error, FrameId, Pose, PoseEdge, UnitQuaternion, Vec3};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Input too degenerate to produce a result.
    Degenerate = 3,
    NotFound = 4,
    /// Output buffer too small; the required length was written.
    BufferTooSmall = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: CpStatus, msg: impl Into<String>) -> CpStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::DegenerateInput(_)
        | Error::EmptyCandidates
        | Error::NonFiniteObjective
        | Error::TooFewPoses { .. } => CpStatus::Degenerate,
        Error::UnknownFrame(_) | Error::UnknownBridgeFrame(_) => CpStatus::NotFound,
        Error::Io(_) => CpStatus::Internal,
        _ => CpStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), CpStatus>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CpStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(CpStatus::Internal, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, CpStatus>;
}

impl<T> OrStatus<T> for confpose::Result<T> {
    fn or_status(self) -> Result<T, CpStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), CpStatus> {
    if p.is_null() {
        Err(fail(CpStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Slice view that accepts a null pointer when `len` is zero.
unsafe fn view<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], CpStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpPose {
    /// Unit quaternion `w, x, y, z`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl CpPose {
    fn to_pose(self) -> Result<Pose, CpStatus> {
        let [w, x, y, z] = self.q;
        let q = UnitQuaternion::new(w, x, y, z).or_status()?;
        Ok(Pose::new(q, Vec3::new(self.t[0], self.t[1], self.t[2])))
    }

    fn from_pose(p: &Pose) -> Self {
        let t = p.translation;
        Self {
            q: p.rotation.coords(),
            t: [t.x, t.y, t.z],
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpEdge {
    pub src: u64,
    pub dst: u64,
    /// Pose of `dst` in the frame of `src`.
    pub rel: CpPose,
    pub conf_rot: f64,
    pub conf_trans: f64,
}

impl CpEdge {
    fn to_edge(self) -> Result<PoseEdge, CpStatus> {
        PoseEdge::new(
            FrameId(self.src),
            FrameId(self.dst),
            self.rel.to_pose()?,
            self.conf_rot,
            self.conf_trans,
        )
        .or_status()
    }
}

fn edges_from(edges: &[CpEdge]) -> Result<Vec<PoseEdge>, CpStatus> {
    edges.iter().map(|e| e.to_edge()).collect()
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpCandidate {
    pub pose: CpPose,
    pub conf_rot: f64,
    pub conf_trans: f64,
    pub reference: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpWeighting {
    Softmax = 0,
    SoftmaxLog = 1,
    Uniform = 2,
}

/// Weightings cross the boundary as plain integers so that out-of-range
/// values from C are rejected instead of forming an invalid enum.
fn weighting(raw: u32) -> Result<Weighting, CpStatus> {
    match raw {
        x if x == CpWeighting::Softmax as u32 => Ok(Weighting::Softmax),
        x if x == CpWeighting::SoftmaxLog as u32 => Ok(Weighting::SoftmaxLog),
        x if x == CpWeighting::Uniform as u32 => Ok(Weighting::Uniform),
        _ => Err(fail(CpStatus::InvalidArgument, format!("unknown weighting {raw}"))),
    }
}

fn top_k(k: usize) -> TopK {
    if k == 0 {
        TopK::All
    } else {
        TopK::K(k)
    }
}

/// Streaming constants. `k == 0` fuses every reference.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpStreamConfig {
    pub tau: f64,
    pub delta_max: usize,
    pub m_max: usize,
    pub n_cal: usize,
    pub tau_out: f64,
    pub n_rej: usize,
    pub l_max: usize,
    pub bridge_len: usize,
    pub k: usize,
    /// One of [`CpWeighting`].
    pub weighting: u32,
}

impl From<&StreamConfig> for CpStreamConfig {
    fn from(c: &StreamConfig) -> Self {
        Self {
            tau: c.tau,
            delta_max: c.delta_max,
            m_max: c.m_max,
            n_cal: c.n_cal,
            tau_out: c.tau_out,
            n_rej: c.n_rej,
            l_max: c.l_max,
            bridge_len: c.bridge_len,
            k: match c.fusion.k {
                TopK::All => 0,
                TopK::K(k) => k,
            },
            weighting: match c.fusion.weighting {
                Weighting::Softmax => CpWeighting::Softmax,
                Weighting::SoftmaxLog => CpWeighting::SoftmaxLog,
                Weighting::Uniform => CpWeighting::Uniform,
            } as u32,
        }
    }
}

impl CpStreamConfig {
    fn to_config(&self) -> Result<StreamConfig, CpStatus> {
        let c = self;
        Ok(StreamConfig {
            tau: c.tau,
            delta_max: c.delta_max,
            m_max: c.m_max,
            n_cal: c.n_cal,
            tau_out: c.tau_out,
            n_rej: c.n_rej,
            l_max: c.l_max,
            bridge_len: c.bridge_len,
            fusion: FusionConfig {
                k: top_k(c.k),
                weighting: weighting(c.weighting)?,
            },
        })
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpRefineConfig {
    pub delta_rot: f64,
    pub delta_trans: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Use the chordal rotation residual instead of the geodesic one.
    pub chordal: bool,
}

impl From<&RefineConfig> for CpRefineConfig {
    fn from(c: &RefineConfig) -> Self {
        Self {
            delta_rot: c.delta_rot,
            delta_trans: c.delta_trans,
            max_iters: c.max_iters,
            grad_tol: c.grad_tol,
            chordal: c.rotation_residual == RotationResidual::Chordal,
        }
    }
}

impl From<&CpRefineConfig> for RefineConfig {
    fn from(c: &CpRefineConfig) -> Self {
        Self {
            delta_rot: c.delta_rot,
            delta_trans: c.delta_trans,
            max_iters: c.max_iters,
            grad_tol: c.grad_tol,
            rotation_residual: if c.chordal {
                RotationResidual::Chordal
            } else {
                RotationResidual::Geodesic
            },
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpSim3 {
    pub scale: f64,
    /// Rotation `w, x, y, z`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpRefineResult {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Opaque streaming state.
pub struct CpStream {
    state: StreamState,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_config_default(out: *mut CpStreamConfig) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = CpStreamConfig::from(&StreamConfig::default());
        Ok(())
    })
}

/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn cp_refine_config_default(out: *mut CpRefineConfig) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = CpRefineConfig::from(&RefineConfig::default());
        Ok(())
    })
}

/// Creates a stream. A null `config` uses the defaults.
///
/// # Safety
/// `config` must be null or valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_new(
    config: *const CpStreamConfig,
    out: *mut *mut CpStream,
) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = if config.is_null() {
            StreamConfig::default()
        } else {
            (*config).to_config()?
        };
        let state = StreamState::new(config).or_status()?;
        *out = Box::into_raw(Box::new(CpStream { state }));
        Ok(())
    })
}

/// # Safety
/// `stream` must be null or a handle from [`cp_stream_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_free(stream: *mut CpStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Frames the next frame must supply edges from, in ascending order.
/// Writes the count to `out_len`; ids are written only if `cap` suffices.
///
/// # Safety
/// `stream` must be a live handle, `ids` writable for `cap` values (or null
/// with `cap == 0`) and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_context(
    stream: *const CpStream,
    ids: *mut u64,
    cap: usize,
    out_len: *mut usize,
) -> CpStatus {
    guard(|| {
        non_null(stream, "stream")?;
        non_null(out_len, "out_len")?;
        let ctx = (*stream).state.active_context();
        *out_len = ctx.len();
        if ctx.len() > cap {
            return Err(fail(
                CpStatus::BufferTooSmall,
                format!("context has {} frames, buffer holds {cap}", ctx.len()),
            ));
        }
        if !ctx.is_empty() {
            non_null(ids, "ids")?;
            for (k, id) in ctx.iter().enumerate() {
                *ids.add(k) = id.0;
            }
        }
        Ok(())
    })
}

/// Processes one frame. `edges` must contain an edge into `frame` from every
/// context frame; extra edges are ignored. `out_accepted` is optional.
///
/// # Safety
/// `stream` must be a live handle; `token` readable for `token_len` values;
/// `edges` readable for `n_edges` values; `out_accepted` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_process(
    stream: *mut CpStream,
    frame: u64,
    token: *const f64,
    token_len: usize,
    edges: *const CpEdge,
    n_edges: usize,
    out_accepted: *mut bool,
) -> CpStatus {
    guard(|| {
        non_null(stream, "stream")?;
        let features = view(token, token_len, "token")?.to_vec();
        let token = FrameToken::new(FrameId(frame), features).or_status()?;
        let edges = edges_from(view(edges, n_edges, "edges")?)?;
        let events = (*stream).state.process_frame(token, &edges).or_status()?;
        if !out_accepted.is_null() {
            *out_accepted = events
                .iter()
                .any(|e| e.frame == FrameId(frame) && matches!(e.kind, EventKind::Accepted { .. }));
        }
        Ok(())
    })
}

/// Estimated pose of an accepted frame.
///
/// # Safety
/// `stream` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_pose(
    stream: *const CpStream,
    frame: u64,
    out: *mut CpPose,
) -> CpStatus {
    guard(|| {
        non_null(stream, "stream")?;
        non_null(out, "out")?;
        let p = (*stream).state.trajectory().get(&FrameId(frame)).ok_or_else(|| {
            fail(CpStatus::NotFound, format!("frame {frame} has no pose"))
        })?;
        *out = CpPose::from_pose(p);
        Ok(())
    })
}

/// # Safety
/// `stream` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_stream_bank_size(stream: *const CpStream, out: *mut usize) -> CpStatus {
    guard(|| {
        non_null(stream, "stream")?;
        non_null(out, "out")?;
        *out = (*stream).state.bank().len();
        Ok(())
    })
}

/// Fuses candidate poses for one frame. `k == 0` keeps every candidate;
/// `weighting` is one of [`CpWeighting`].
///
/// # Safety
/// `candidates` readable for `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_fuse_candidates(
    candidates: *const CpCandidate,
    n: usize,
    k: usize,
    weighting: u32,
    out: *mut CpPose,
) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let cands = view(candidates, n, "candidates")?
            .iter()
            .map(|c| {
                Ok(CandidatePose {
                    proposed: c.pose.to_pose()?,
                    conf_rot: c.conf_rot,
                    conf_trans: c.conf_trans,
                    reference: FrameId(c.reference),
                })
            })
            .collect::<Result<Vec<_>, CpStatus>>()?;
        let fusion = FusionConfig {
            k: top_k(k),
            weighting: self::weighting(weighting)?,
        };
        *out = CpPose::from_pose(&fuse_candidates_with(&cands, &fusion).or_status()?.pose);
        Ok(())
    })
}

unsafe fn points(p: *const f64, n: usize, name: &str) -> Result<Vec<Vec3>, CpStatus> {
    let flat = view(p, n.checked_mul(3).ok_or_else(|| fail(CpStatus::InvalidArgument, "point count overflows"))?, name)?;
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Similarity transform mapping `source` onto `target`, both `n` points
/// stored as `x, y, z` triples.
///
/// # Safety
/// `source` and `target` readable for `3 * n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_umeyama_sim3(
    source: *const f64,
    target: *const f64,
    n: usize,
    out: *mut CpSim3,
) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = umeyama_sim3(&points(source, n, "source")?, &points(target, n, "target")?)
            .or_status()?;
        let t = a.translation;
        *out = CpSim3 {
            scale: a.scale,
            q: a.rotation.coords(),
            t: [t.x, t.y, t.z],
        };
        Ok(())
    })
}

/// Refines `n_nodes` poses against `n_edges` edges with node `fixed` held.
/// Refined poses are written to `out_poses` in the order of `ids`. A null
/// `config` uses the defaults; `out_result` is optional.
///
/// # Safety
/// `ids`, `poses` and `out_poses` valid for `n_nodes` values; `edges`
/// readable for `n_edges`; `config` and `out_result` null or valid.
#[no_mangle]
pub unsafe extern "C" fn cp_refine_solve(
    ids: *const u64,
    poses: *const CpPose,
    n_nodes: usize,
    edges: *const CpEdge,
    n_edges: usize,
    fixed: u64,
    config: *const CpRefineConfig,
    out_poses: *mut CpPose,
    out_result: *mut CpRefineResult,
) -> CpStatus {
    guard(|| {
        let ids = view(ids, n_nodes, "ids")?;
        let poses = view(poses, n_nodes, "poses")?;
        if n_nodes > 0 {
            non_null(out_poses, "out_poses")?;
        }
        let mut nodes = BTreeMap::new();
        for (id, p) in ids.iter().zip(poses) {
            if nodes.insert(FrameId(*id), p.to_pose()?).is_some() {
                return Err(fail(CpStatus::InvalidArgument, format!("duplicate node {id}")));
            }
        }
        let config = if config.is_null() {
            RefineConfig::default()
        } else {
            RefineConfig::from(&*config)
        };
        let edges = edges_from(view(edges, n_edges, "edges")?)?;
        let problem = RefinementProblem::new(nodes, edges, FrameId(fixed), &config).or_status()?;
        let result = refine(&problem, &config).or_status()?;
        for (k, id) in ids.iter().enumerate() {
            *out_poses.add(k) = CpPose::from_pose(&result.poses[&FrameId(*id)]);
        }
        if !out_result.is_null() {
            *out_result = CpRefineResult {
                initial_objective: result.initial_objective,
                final_objective: result.final_objective,
                iterations: result.iterations,
                converged: result.converged,
            };
        }
        Ok(())
    })
}

/// Absolute trajectory RMSE of `estimate` against `reference`, matched by
/// index, after Sim(3) alignment or rigid alignment when `sim3` is false.
///
/// # Safety
/// `estimate` and `reference` readable for `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_ate(
    estimate: *const CpPose,
    reference: *const CpPose,
    n: usize,
    sim3: bool,
    out: *mut f64,
) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let collect = |s: &[CpPose]| -> Result<BTreeMap<FrameId, Pose>, CpStatus> {
            s.iter()
                .enumerate()
                .map(|(k, p)| Ok((FrameId(k as u64 + 1), p.to_pose()?)))
                .collect()
        };
        let est = collect(view(estimate, n, "estimate")?)?;
        let reference = collect(view(reference, n, "reference")?)?;
        let alignment = if sim3 { Alignment::Sim3 } else { Alignment::Se3 };
        *out = ate(&est, &reference, alignment).or_status()?.ate_rmse;
        Ok(())
    })
}

/// Copies the last error into `buf` (NUL terminated, truncated to fit).
/// Returns the full message length excluding the terminator.
///
/// # Safety
/// `buf` must be writable for `cap` bytes, or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn cp_copy_last_error(buf: *mut c_char, cap: usize) -> usize {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let bytes = CStr::to_bytes(&msg);
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
    }
    bytes.len()
}
