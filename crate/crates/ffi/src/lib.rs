//! C interface to layercut.
//!
//! Objects cross the boundary as opaque handles created by `lc_*_read`/`lc_*_load` style
//! constructors and released with the matching `lc_*_free`. Every fallible call returns an
//! [`LcStatus`]; on failure the message is kept per thread and read with
//! [`lc_last_error`]. Output pointers are only written on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use layercut::compose::{refine_composition, visibility_cameras, RefineOptions};
use layercut::config::RunConfig;
use layercut::io::{read_mesh, write_mesh};
use layercut::metrics::{chamfer, voxel_iou};
use layercut::pipeline::{demo_config, demo_synthetic};
use layercut::rig::{lbs_forward, load_pose, load_rig, Pose, Rig};
use layercut::seglift::{lift_segmentation, load_view_manifest};
use layercut::tetgrid::{build_regular_grid, marching_tetrahedra, ImplicitField};
use layercut::{Error, Label, TriMesh, Vec3};

/// Result of every fallible call. Values 1 to 5 match the command line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    Invalid = 1,
    Config = 2,
    Io = 3,
    Guidance = 4,
    NonFinite = 5,
    NullPointer = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Triangle mesh with optional colours and face labels.
pub struct LcMesh(TriMesh);

/// Skeleton, skinning weights and blend shapes.
pub struct LcRig(Rig);

/// Joint rotations and blend shape coefficients.
pub struct LcPose(Pose);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Small { need: usize, have: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

fn call(f: impl FnOnce() -> FfiResult) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            let status = match e.exit_code() {
                2 => LcStatus::Config,
                3 => LcStatus::Io,
                4 => LcStatus::Guidance,
                5 => LcStatus::NonFinite,
                _ => LcStatus::Invalid,
            };
            set_error(e.to_string());
            status
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            LcStatus::NullPointer
        }
        Ok(Err(Fail::Small { need, have })) => {
            set_error(format!("buffer holds {have} elements, {need} needed"));
            LcStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LcStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_value<T>(out: *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = value;
    Ok(())
}

unsafe fn fill<T: Copy>(out: *mut T, capacity: usize, values: &[T]) -> FfiResult {
    if values.len() > capacity {
        return Err(Fail::Small {
            need: values.len(),
            have: capacity,
        });
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(Fail::Null("output buffer"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn lc_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an OBJ or PLY file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_read(path: *const c_char, out: *mut *mut LcMesh) -> LcStatus {
    call(|| {
        let p = path_arg(path, "path")?;
        put(out, LcMesh(read_mesh(&p)?), "out")
    })
}

/// Builds a mesh from `vertex_count` xyz triples and `face_count` index triples.
///
/// # Safety
/// The arrays must hold `3 * vertex_count` and `3 * face_count` elements.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_from_arrays(
    vertices: *const f64,
    vertex_count: usize,
    faces: *const u32,
    face_count: usize,
    out: *mut *mut LcMesh,
) -> LcStatus {
    call(|| {
        if (vertices.is_null() && vertex_count > 0) || (faces.is_null() && face_count > 0) {
            return Err(Fail::Null("mesh arrays"));
        }
        let v = if vertex_count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(vertices, 3 * vertex_count)
        };
        let f = if face_count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(faces, 3 * face_count)
        };
        let mesh = TriMesh::new(
            v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        )?;
        put(out, LcMesh(mesh), "out")
    })
}

/// Writes the mesh; the extension picks PLY or OBJ.
///
/// # Safety
/// `mesh` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_write(mesh: *const LcMesh, path: *const c_char) -> LcStatus {
    call(|| {
        let m = deref(mesh, "mesh")?;
        write_mesh(&path_arg(path, "path")?, &m.0)?;
        Ok(())
    })
}

/// Vertex count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_vertex_count(mesh: *const LcMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.vertices.len())
}

/// Face count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_face_count(mesh: *const LcMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.faces.len())
}

/// Copies xyz triples into `out`, which holds `capacity` doubles.
///
/// # Safety
/// `out` must be writable for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_copy_vertices(mesh: *const LcMesh, out: *mut f64, capacity: usize) -> LcStatus {
    call(|| {
        let m = deref(mesh, "mesh")?;
        let flat: Vec<f64> = m.0.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        fill(out, capacity, &flat)
    })
}

/// Copies index triples into `out`, which holds `capacity` integers.
///
/// # Safety
/// `out` must be writable for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_copy_faces(mesh: *const LcMesh, out: *mut u32, capacity: usize) -> LcStatus {
    call(|| {
        let m = deref(mesh, "mesh")?;
        let flat: Vec<u32> = m.0.faces.iter().flatten().copied().collect();
        fill(out, capacity, &flat)
    })
}

/// # Safety
/// `mesh` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_mesh_free(mesh: *mut LcMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Node count of the regular grid at `resolution`.
#[no_mangle]
pub extern "C" fn lc_grid_node_count(resolution: u32, out: *mut usize) -> LcStatus {
    call(|| {
        let g = build_regular_grid(resolution)?;
        unsafe { put_value(out, g.node_count(), "out") }
    })
}

/// Node positions of the regular grid as xyz triples.
///
/// # Safety
/// `out` must be writable for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn lc_grid_nodes(resolution: u32, out: *mut f64, capacity: usize) -> LcStatus {
    call(|| {
        let g = build_regular_grid(resolution)?;
        let flat: Vec<f64> = g.nodes().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        fill(out, capacity, &flat)
    })
}

/// Zero level set of per-node signed distances on the regular grid, without offsets.
///
/// # Safety
/// `sdf` must hold `count` values, one per grid node.
#[no_mangle]
pub unsafe extern "C" fn lc_extract_surface(
    resolution: u32,
    sdf: *const f64,
    count: usize,
    out: *mut *mut LcMesh,
) -> LcStatus {
    call(|| {
        if sdf.is_null() {
            return Err(Fail::Null("sdf"));
        }
        let grid = build_regular_grid(resolution)?;
        let mut field = ImplicitField::constant(&grid, 1.0);
        field.sdf = std::slice::from_raw_parts(sdf, count).to_vec();
        field.check(&grid)?;
        put(out, LcMesh(marching_tetrahedra(&grid, &field)?), "out")
    })
}

/// Symmetric mean surface distance between two meshes.
///
/// # Safety
/// Handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn lc_chamfer(
    a: *const LcMesh,
    b: *const LcMesh,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> LcStatus {
    call(|| {
        let d = chamfer(&deref(a, "a")?.0, &deref(b, "b")?.0, samples, seed)?;
        put_value(out, d, "out")
    })
}

/// Volumetric intersection over union on a `resolution`³ lattice.
///
/// # Safety
/// Handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn lc_voxel_iou(
    a: *const LcMesh,
    b: *const LcMesh,
    resolution: usize,
    out: *mut f64,
) -> LcStatus {
    call(|| {
        let v = voxel_iou(&deref(a, "a")?.0, &deref(b, "b")?.0, resolution)?;
        put_value(out, v, "out")
    })
}

/// Loads a rig description and the files it references.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lc_rig_load(path: *const c_char, out: *mut *mut LcRig) -> LcStatus {
    call(|| {
        let p = path_arg(path, "path")?;
        put(out, LcRig(load_rig(&p)?), "out")
    })
}

/// # Safety
/// `rig` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_rig_free(rig: *mut LcRig) {
    if !rig.is_null() {
        drop(Box::from_raw(rig));
    }
}

/// Loads a pose file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lc_pose_load(path: *const c_char, out: *mut *mut LcPose) -> LcStatus {
    call(|| {
        let p = path_arg(path, "path")?;
        put(out, LcPose(load_pose(&p)?), "out")
    })
}

/// The rest pose of `rig`.
///
/// # Safety
/// `rig` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lc_pose_zero(rig: *const LcRig, out: *mut *mut LcPose) -> LcStatus {
    call(|| {
        let r = deref(rig, "rig")?;
        put(out, LcPose(Pose::zero(&r.0)), "out")
    })
}

/// # Safety
/// `pose` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_pose_free(pose: *mut LcPose) {
    if !pose.is_null() {
        drop(Box::from_raw(pose));
    }
}

/// Skins a canonical mesh into `pose`.
///
/// # Safety
/// Handles must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lc_lbs_forward(
    mesh: *const LcMesh,
    rig: *const LcRig,
    pose: *const LcPose,
    out: *mut *mut LcMesh,
) -> LcStatus {
    call(|| {
        let posed = lbs_forward(&deref(mesh, "mesh")?.0, &deref(rig, "rig")?.0, &deref(pose, "pose")?.0)?;
        put(out, LcMesh(posed), "out")
    })
}

/// Votes the masks of a view manifest onto the scan's faces. Writes one byte per face into
/// `labels`: 0 human, 1 object.
///
/// # Safety
/// `labels` must be writable for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn lc_lift_labels(
    scan: *const LcMesh,
    manifest: *const c_char,
    min_votes: u32,
    labels: *mut u8,
    capacity: usize,
) -> LcStatus {
    call(|| {
        let s = deref(scan, "scan")?;
        let views = load_view_manifest(&path_arg(manifest, "manifest")?)?;
        let l = lift_segmentation(&s.0, &views, min_votes)?;
        let bytes: Vec<u8> = l.iter().map(|&x| u8::from(x == Label::Object)).collect();
        fill(labels, capacity, &bytes)
    })
}

/// Pushes the human layer under the object layer with default settings and the given
/// displacement weight. `penetrating` receives the remaining penetrating vertex count.
///
/// # Safety
/// Handles must come from this library; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lc_refine(
    human: *const LcMesh,
    object: *const LcMesh,
    lambda_dis: f64,
    out: *mut *mut LcMesh,
    penetrating: *mut usize,
) -> LcStatus {
    call(|| {
        let opts = RefineOptions {
            lambda_dis,
            ..Default::default()
        };
        let cams = visibility_cameras(opts.camera_size)?;
        let r = refine_composition(&deref(human, "human")?.0, &deref(object, "object")?.0, &opts, &cams)?;
        if penetrating.is_null() || out.is_null() {
            return Err(Fail::Null("output"));
        }
        *penetrating = r.penetrations.last().copied().unwrap_or(0);
        put(out, LcMesh(r.mesh), "out")
    })
}

/// Runs the synthetic demo into `out_dir`. `config` may be null for the built-in settings;
/// otherwise it is layered over them. `passed` receives 1 when every threshold held.
///
/// # Safety
/// Strings must be NUL-terminated; `passed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lc_demo_synthetic(
    config: *const c_char,
    out_dir: *const c_char,
    passed: *mut i32,
) -> LcStatus {
    call(|| {
        let cfg_path = if config.is_null() {
            None
        } else {
            Some(path_arg(config, "config")?)
        };
        let cfg = RunConfig::load_over(&demo_config(), cfg_path.as_deref())?;
        let report = demo_synthetic(&cfg, &path_arg(out_dir, "out_dir")?)?;
        put_value(passed, i32::from(report.passed()), "passed")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_follow_exit_codes() {
        let s = call(|| Err(Error::Config("x".into()).into()));
        assert_eq!(s, LcStatus::Config);
        assert_eq!(s as i32, Error::Config(String::new()).exit_code());
        assert_eq!(call(|| Err(Error::EmptyMesh.into())), LcStatus::Invalid);
        assert_eq!(call(|| Ok(())), LcStatus::Ok);
    }

    #[test]
    fn panics_are_caught() {
        let s = call(|| panic!("boom"));
        assert_eq!(s, LcStatus::Panic);
        let msg = unsafe { CStr::from_ptr(lc_last_error()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
    }

    #[test]
    fn errors_are_per_thread() {
        lc_clear_error();
        call(|| Err(Fail::Null("x")));
        assert!(!lc_last_error().is_null());
        std::thread::spawn(|| assert!(lc_last_error().is_null()))
            .join()
            .unwrap();
    }
}
