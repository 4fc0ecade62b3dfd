//! C ABI over the planner, replay selection, scoring and the pipeline.
//!
//! Every function returns a [`TravStatus`]. On failure the message is kept
//! per thread and read with [`trav_last_error`]. Objects cross the boundary
//! as opaque handles that the caller frees with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use trav_core::config::RunConfig;
use trav_core::mapping::ElevationMap;
use trav_core::pipeline::{run_all, RunDir};
use trav_core::planner::{edge_cost, plan, Path as PlannedPath, PlanQuery};
use trav_core::replay::fps_select;
use trav_core::scoring::rescaled_cosine;
use trav_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TravStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    InvalidEdge = 4,
    NoPath = 5,
    Degenerate = 6,
    MissingArtifact = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Elevation grid handed to the planner.
pub struct TravMap(ElevationMap);

/// Planned path.
pub struct TravPath(PlannedPath);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> TravStatus {
    match e {
        Error::InvalidConfig(_) => TravStatus::InvalidConfig,
        Error::InvalidEdge { .. } => TravStatus::InvalidEdge,
        Error::DegenerateVector(_) | Error::DegenerateGeometry(_) => TravStatus::Degenerate,
        Error::MissingArtifact { .. } => TravStatus::MissingArtifact,
        Error::Io(_) => TravStatus::Io,
        Error::Internal(_) => TravStatus::Internal,
        _ => TravStatus::InvalidInput,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (TravStatus, String)>) -> TravStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TravStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside trav");
            TravStatus::Panic
        }
    }
}

fn core(e: Error) -> (TravStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TravStatus, String) {
    (TravStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (TravStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (TravStatus::InvalidInput, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn trav_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// New map with every cell unobserved, height 0 and traversability 0.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn trav_map_new(
    rows: usize,
    cols: usize,
    resolution: f64,
    out: *mut *mut TravMap,
) -> TravStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if rows == 0 || cols == 0 || !(resolution > 0.0) {
            return Err((
                TravStatus::InvalidInput,
                "map needs rows, cols >= 1 and resolution > 0".into(),
            ));
        }
        *out = Box::into_raw(Box::new(TravMap(ElevationMap::empty(
            rows,
            cols,
            resolution,
            (0.0, 0.0),
        ))));
        Ok(())
    })
}

/// Loads a map directory written by `trav map`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn trav_map_read(dir: *const c_char, out: *mut *mut TravMap) -> TravStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let map = ElevationMap::read(Path::new(dir)).map_err(core)?;
        *out = Box::into_raw(Box::new(TravMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must come from `trav_map_new`/`trav_map_read` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn trav_map_free(map: *mut TravMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn trav_map_set_cell(
    map: *mut TravMap,
    row: usize,
    col: usize,
    height: f64,
    traversability: f64,
    observed: bool,
) -> TravStatus {
    guard(|| {
        let m = &mut map.as_mut().ok_or_else(|| null("map"))?.0;
        if row >= m.rows || col >= m.cols {
            return Err((
                TravStatus::InvalidInput,
                format!("cell ({row}, {col}) outside {}x{} map", m.rows, m.cols),
            ));
        }
        if !height.is_finite() || !(0.0..=1.0).contains(&traversability) {
            return Err((
                TravStatus::InvalidInput,
                "height must be finite and traversability in [0, 1]".into(),
            ));
        }
        let k = m.idx(row, col);
        m.height[k] = height;
        m.traversability[k] = traversability;
        m.observed[k] = observed;
        Ok(())
    })
}

/// Cost of the edge between two adjacent observed cells.
///
/// # Safety
/// `map` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn trav_edge_cost(
    map: *const TravMap,
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
    w_trav: f64,
    out: *mut f64,
) -> TravStatus {
    guard(|| {
        let m = &map.as_ref().ok_or_else(|| null("map"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = edge_cost(m, (r0, c0), (r1, c1), w_trav).map_err(core)?;
        Ok(())
    })
}

/// Minimum-cost path. An unreachable goal returns the no-path status and leaves
/// `*out` null.
///
/// # Safety
/// `map` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn trav_plan(
    map: *const TravMap,
    start_row: usize,
    start_col: usize,
    goal_row: usize,
    goal_col: usize,
    w_trav: f64,
    out: *mut *mut TravPath,
) -> TravStatus {
    guard(|| {
        let m = &map.as_ref().ok_or_else(|| null("map"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let query = PlanQuery {
            start: (start_row, start_col),
            goal: (goal_row, goal_col),
            w_trav,
        };
        match plan(m, &query).map_err(core)? {
            Some(p) => {
                *out = Box::into_raw(Box::new(TravPath(p)));
                Ok(())
            }
            None => Err((TravStatus::NoPath, "goal is unreachable".into())),
        }
    })
}

/// # Safety
/// `path` must come from `trav_plan` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn trav_path_free(path: *mut TravPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Number of cells in the path; 0 for null.
///
/// # Safety
/// `path` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn trav_path_len(path: *const TravPath) -> usize {
    path.as_ref().map_or(0, |p| p.0.len())
}

/// Total cost and 3D length.
///
/// # Safety
/// `path` must be a live handle; `cost` and `length` writable.
#[no_mangle]
pub unsafe extern "C" fn trav_path_summary(
    path: *const TravPath,
    cost: *mut f64,
    length: *mut f64,
) -> TravStatus {
    guard(|| {
        let p = &path.as_ref().ok_or_else(|| null("path"))?.0;
        if cost.is_null() || length.is_null() {
            return Err(null("cost or length"));
        }
        *cost = p.total_cost;
        *length = p.total_length;
        Ok(())
    })
}

/// Copies the path's cells into `rows`/`cols`, each of capacity `cap`.
///
/// # Safety
/// `path` must be a live handle; `rows` and `cols` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn trav_path_cells(
    path: *const TravPath,
    rows: *mut usize,
    cols: *mut usize,
    cap: usize,
) -> TravStatus {
    guard(|| {
        let p = &path.as_ref().ok_or_else(|| null("path"))?.0;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows or cols"));
        }
        if cap < p.len() {
            return Err((
                TravStatus::InvalidInput,
                format!("buffer holds {cap} cells, path has {}", p.len()),
            ));
        }
        for (i, &(r, c)) in p.cells.iter().enumerate() {
            *rows.add(i) = r;
            *cols.add(i) = c;
        }
        Ok(())
    })
}

/// Farthest-point selection of `k` rows of the `n × dim` row-major
/// `features`; indices are written to `out` in selection order.
///
/// # Safety
/// `features` must hold `n * dim` values and `out` room for `k` indices.
#[no_mangle]
pub unsafe extern "C" fn trav_fps_select(
    features: *const f64,
    n: usize,
    dim: usize,
    k: usize,
    out: *mut usize,
) -> TravStatus {
    guard(|| {
        if features.is_null() || out.is_null() {
            return Err(null("features or out"));
        }
        if dim == 0 {
            return Err((TravStatus::InvalidInput, "dim must be >= 1".into()));
        }
        let flat = std::slice::from_raw_parts(features, n * dim);
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let picked = fps_select(&rows, k).map_err(core)?;
        std::slice::from_raw_parts_mut(out, picked.len()).copy_from_slice(&picked);
        Ok(())
    })
}

/// Traversability score of `latent` against `reference`: cosine rescaled to `[0, 1]`.
///
/// # Safety
/// Both vectors must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trav_score(
    reference: *const f64,
    latent: *const f64,
    dim: usize,
    out: *mut f64,
) -> TravStatus {
    guard(|| {
        if reference.is_null() || latent.is_null() || out.is_null() {
            return Err(null("reference, latent or out"));
        }
        let a = std::slice::from_raw_parts(reference, dim);
        let b = std::slice::from_raw_parts(latent, dim);
        *out = rescaled_cosine(a, b).map_err(core)?;
        Ok(())
    })
}

/// Runs every pipeline stage into `out_dir`. `config_path` may be null to
/// use `profile` ("default" or "fast"; null means "default").
///
/// # Safety
/// Non-null pointers must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn trav_run_pipeline(
    config_path: *const c_char,
    profile: *const c_char,
    out_dir: *const c_char,
) -> TravStatus {
    guard(|| {
        let out_dir = str_arg(out_dir, "out_dir")?;
        let cfg = if config_path.is_null() {
            let profile = if profile.is_null() {
                "default"
            } else {
                str_arg(profile, "profile")?
            };
            RunConfig::from_profile(profile)
        } else {
            RunConfig::load(Path::new(str_arg(config_path, "config_path")?))
        }
        .map_err(core)?;
        run_all(&cfg, &RunDir::new(out_dir)).map_err(core)?;
        Ok(())
    })
}
