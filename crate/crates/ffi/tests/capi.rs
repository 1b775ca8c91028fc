use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use layercut::rig::save_rig;
use layercut::synthetic::{icosphere, sphere_rig};
use layercut_ffi::*;

fn last_error() -> String {
    let p = lc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn tetra() -> *mut LcMesh {
    let v = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let f = [0u32, 2, 1, 0, 1, 3, 0, 3, 2, 1, 2, 3];
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { lc_mesh_from_arrays(v.as_ptr(), 4, f.as_ptr(), 4, &mut m) },
        LcStatus::Ok
    );
    m
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(lc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn mesh_round_trip_through_arrays_and_files() {
    let m = tetra();
    unsafe {
        assert_eq!(lc_mesh_vertex_count(m), 4);
        assert_eq!(lc_mesh_face_count(m), 4);
        let mut v = [0.0f64; 12];
        assert_eq!(lc_mesh_copy_vertices(m, v.as_mut_ptr(), v.len()), LcStatus::Ok);
        assert_eq!(v[3], 1.0);
        let mut f = [0u32; 12];
        assert_eq!(lc_mesh_copy_faces(m, f.as_mut_ptr(), f.len()), LcStatus::Ok);
        assert_eq!(&f[..3], &[0, 2, 1]);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(&dir.path().join("t.ply"));
        assert_eq!(lc_mesh_write(m, path.as_ptr()), LcStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(lc_mesh_read(path.as_ptr(), &mut back), LcStatus::Ok);
        assert_eq!(lc_mesh_face_count(back), 4);
        lc_mesh_free(back);
        lc_mesh_free(m);
    }
}

#[test]
fn failures_set_status_and_message() {
    unsafe {
        let m = tetra();
        let mut small = [0.0f64; 5];
        assert_eq!(
            lc_mesh_copy_vertices(m, small.as_mut_ptr(), small.len()),
            LcStatus::BufferTooSmall
        );
        assert!(last_error().contains("12"));
        assert_eq!(
            lc_mesh_copy_vertices(ptr::null(), small.as_mut_ptr(), 5),
            LcStatus::NullPointer
        );
        assert_eq!(lc_mesh_vertex_count(ptr::null()), 0);

        let missing = CString::new("/nonexistent/mesh.obj").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(lc_mesh_read(missing.as_ptr(), &mut out), LcStatus::Io);
        assert!(out.is_null());
        assert!(last_error().contains("/nonexistent/mesh.obj"));

        let bad_faces = [0u32, 0, 1];
        let v = [0.0f64; 6];
        assert_eq!(
            lc_mesh_from_arrays(v.as_ptr(), 2, bad_faces.as_ptr(), 1, &mut out),
            LcStatus::Invalid
        );
        assert_eq!(lc_grid_node_count(0, &mut 0), LcStatus::Invalid);
        lc_clear_error();
        assert!(lc_last_error().is_null());
        lc_mesh_free(m);
        lc_mesh_free(ptr::null_mut());
    }
}

#[test]
fn sphere_surface_from_node_values() {
    unsafe {
        let res = 16;
        let mut n = 0usize;
        assert_eq!(lc_grid_node_count(res, &mut n), LcStatus::Ok);
        assert_eq!(n, 17 * 17 * 17);
        let mut nodes = vec![0.0; 3 * n];
        assert_eq!(lc_grid_nodes(res, nodes.as_mut_ptr(), nodes.len()), LcStatus::Ok);
        let sdf: Vec<f64> = nodes
            .chunks(3)
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5)
            .collect();
        let mut m = ptr::null_mut();
        assert_eq!(lc_extract_surface(res, sdf.as_ptr(), sdf.len(), &mut m), LcStatus::Ok);
        let nv = lc_mesh_vertex_count(m);
        let mut v = vec![0.0; 3 * nv];
        assert_eq!(lc_mesh_copy_vertices(m, v.as_mut_ptr(), v.len()), LcStatus::Ok);
        for p in v.chunks(3) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.5).abs() < 2.0 / 16.0);
        }
        assert_eq!(lc_extract_surface(res, sdf.as_ptr(), 3, &mut m), LcStatus::Invalid);

        let mut d = -1.0;
        assert_eq!(lc_chamfer(m, m, 500, 1, &mut d), LcStatus::Ok);
        assert!(d < 1e-9);
        let mut iou = 0.0;
        assert_eq!(lc_voxel_iou(m, m, 16, &mut iou), LcStatus::Ok);
        assert_eq!(iou, 1.0);
        lc_mesh_free(m);
    }
}

#[test]
fn rest_pose_skinning_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let rig_path = save_rig(&sphere_rig(), dir.path(), "rig").unwrap();
    let mesh_path = dir.path().join("s.obj");
    layercut::io::write_mesh(&mesh_path, &icosphere(0.5, 1)).unwrap();
    unsafe {
        let mut rig = ptr::null_mut();
        assert_eq!(lc_rig_load(cstr(&rig_path).as_ptr(), &mut rig), LcStatus::Ok);
        let mut pose = ptr::null_mut();
        assert_eq!(lc_pose_zero(rig, &mut pose), LcStatus::Ok);
        let mut mesh = ptr::null_mut();
        assert_eq!(lc_mesh_read(cstr(&mesh_path).as_ptr(), &mut mesh), LcStatus::Ok);
        let mut posed = ptr::null_mut();
        assert_eq!(lc_lbs_forward(mesh, rig, pose, &mut posed), LcStatus::Ok);
        let n = lc_mesh_vertex_count(mesh);
        let (mut a, mut b) = (vec![0.0; 3 * n], vec![0.0; 3 * n]);
        lc_mesh_copy_vertices(mesh, a.as_mut_ptr(), a.len());
        lc_mesh_copy_vertices(posed, b.as_mut_ptr(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        for p in [posed, mesh] {
            lc_mesh_free(p);
        }
        lc_pose_free(pose);
        lc_rig_free(rig);
    }
}

#[test]
fn refinement_clears_concentric_penetration() {
    let h = icosphere(0.55, 2);
    let o = icosphere(0.5, 2);
    let flat = |m: &layercut::TriMesh| -> (Vec<f64>, Vec<u32>) {
        (
            m.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
            m.faces.iter().flatten().copied().collect(),
        )
    };
    unsafe {
        let mut handles = [ptr::null_mut(); 2];
        for (k, m) in [&h, &o].into_iter().enumerate() {
            let (v, f) = flat(m);
            assert_eq!(
                lc_mesh_from_arrays(v.as_ptr(), v.len() / 3, f.as_ptr(), f.len() / 3, &mut handles[k]),
                LcStatus::Ok
            );
        }
        let mut out = ptr::null_mut();
        let mut left = usize::MAX;
        assert_eq!(
            lc_refine(handles[0], handles[1], 10.0, &mut out, &mut left),
            LcStatus::Ok
        );
        assert_eq!(left, 0);
        assert_eq!(
            lc_refine(handles[0], handles[1], -1.0, &mut out, &mut left),
            LcStatus::Config
        );
        lc_mesh_free(out);
        for m in handles {
            lc_mesh_free(m);
        }
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("layercut.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "lc_mesh_read",
        "lc_last_error",
        "LC_STATUS_BUFFER_TOO_SMALL",
        "typedef struct LcMesh LcMesh",
    ] {
        assert!(text.contains(name), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"layercut.h\"\nint main(void) {\n  LcMesh *m = 0;\n  LcStatus s = lc_mesh_read(\"x.obj\", &m);\n  \
         return s == LC_STATUS_OK ? 0 : (int)lc_mesh_vertex_count(m);\n}\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&src)
            .arg("-I")
            .arg(&include)
            .status()
            .unwrap();
        assert!(status.success(), "{compiler}");
    }
}
