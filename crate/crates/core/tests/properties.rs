use layercut::compose::{refine_composition, visibility_cameras, RefineOptions};
use layercut::config::RunConfig;
use layercut::decompose::smoothed_descent;
use layercut::metrics::chamfer;
use layercut::rig::{lbs_forward, nn_skinning_weights, Pose};
use layercut::seglift::partition_mesh;
use layercut::synthetic::{capsule_body_rig, icosphere, two_bone_chain};
use layercut::tetgrid::{
    build_regular_grid, extract_surface, marching_tetrahedra, mt_vertex_jacobian, ImplicitField, TetGrid,
};
use layercut::{Label, TriMesh, Vec3};
use proptest::prelude::*;

fn signed_volume(m: &TriMesh) -> f64 {
    (0..m.faces.len())
        .map(|f| {
            let [a, b, c] = m.corners(f);
            a.dot(&b.cross(&c)) / 6.0
        })
        .sum()
}

/// Node values bounded away from zero so extraction never nudges them.
fn node_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.0..-0.05f64, 0.05..1.0f64], n)
}

fn field_on(grid: &TetGrid, values: Vec<f64>) -> ImplicitField {
    let mut f = ImplicitField::constant(grid, 1.0);
    f.sdf = values;
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_is_deterministic_and_sign_symmetric(values in node_values(125)) {
        let grid = build_regular_grid(4).unwrap();
        prop_assume!(values.len() == grid.node_count());
        let field = field_on(&grid, values.clone());
        let a = marching_tetrahedra(&grid, &field).unwrap();
        let b = marching_tetrahedra(&grid, &field).unwrap();
        prop_assert_eq!(&a.vertices, &b.vertices);
        prop_assert_eq!(&a.faces, &b.faces);

        let negated = field_on(&grid, values.iter().map(|v| -v).collect());
        let n = marching_tetrahedra(&grid, &negated).unwrap();
        prop_assert_eq!(a.faces.len(), n.faces.len());
        let mut va: Vec<[u64; 3]> = a.vertices.iter().map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]).collect();
        let mut vn: Vec<[u64; 3]> = n.vertices.iter().map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]).collect();
        va.sort_unstable();
        vn.sort_unstable();
        prop_assert_eq!(va, vn);
        prop_assert!((a.total_area() - n.total_area()).abs() < 1e-9);
        prop_assert!((signed_volume(&a) + signed_volume(&n)).abs() < 1e-9);
    }

    #[test]
    fn crossing_jacobian_matches_finite_differences(values in node_values(125), pick in 0usize..1000) {
        let grid = build_regular_grid(4).unwrap();
        prop_assume!(values.len() == grid.node_count());
        let field = field_on(&grid, values);
        let s = extract_surface(&grid, &field).unwrap();
        prop_assume!(!s.mesh.vertices.is_empty());
        let i = pick % s.mesh.vertices.len();
        let (a, b) = s.vertex_edges[i];
        let j = mt_vertex_jacobian(&grid, &field, (a, b)).unwrap();
        let h = 1e-6;
        for (node, analytic) in [(a as usize, j.d_sdf_a), (b as usize, j.d_sdf_b)] {
            let at = |by: f64| {
                let mut f = field.clone();
                f.sdf[node] += by;
                let t = extract_surface(&grid, &f).unwrap();
                let k = t.vertex_edges.iter().position(|e| *e == (a, b)).unwrap();
                t.mesh.vertices[k]
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!((numeric - analytic).norm() <= 1e-5 * (1.0 + analytic.norm()));
        }
    }

    #[test]
    fn clamped_offsets_stay_in_bounds(raw in prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), 125)) {
        let grid = build_regular_grid(4).unwrap();
        let mut field = ImplicitField::constant(&grid, 0.3);
        for (o, r) in field.offset.iter_mut().zip(raw.iter().cycle()) {
            *o = Vec3::from(*r);
        }
        let before = field.offset.clone();
        field.clamp_offsets(&grid);
        for (k, (o, b)) in field.offset.iter().zip(&before).enumerate() {
            prop_assert!(o.norm() <= grid.offset_bound(k) * (1.0 + 1e-12));
            prop_assert!(o.cross(b).norm() <= 1e-12 * (1.0 + b.norm_squared()));
            prop_assert!(o.dot(b) >= 0.0);
        }
    }

    #[test]
    fn nearest_template_weights_match_brute_force(points in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 1..40)) {
        let rig = capsule_body_rig();
        let queries: Vec<Vec3> = points.iter().map(|p| Vec3::from(*p)).collect();
        let got = nn_skinning_weights(&rig, &queries);
        for (q, w) in queries.iter().zip(&got) {
            let best = rig
                .template
                .vertices
                .iter()
                .map(|v| (v - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            let chosen = rig.nearest_template_vertex(q);
            prop_assert_eq!((rig.template.vertices[chosen] - q).norm_squared(), best);
            prop_assert_eq!(w.as_slice(), rig.weights(chosen));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn skinned_meshes_keep_topology_and_stay_finite(theta in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 2)) {
        let rig = two_bone_chain();
        let mut pose = Pose::zero(&rig);
        for (t, v) in pose.theta.iter_mut().zip(&theta) {
            *t = *v;
        }
        let out = lbs_forward(&rig.template, &rig, &pose).unwrap();
        prop_assert_eq!(&out.faces, &rig.template.faces);
        prop_assert!(out.vertices.iter().all(|v| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn chamfer_is_bounded_by_a_translation(t in prop::array::uniform3(-0.3..0.3f64), seed in 0u64..1000) {
        let a = icosphere(0.5, 2);
        let shift = Vec3::from(t);
        let b = a.map_vertices(|v| v + shift);
        let d = chamfer(&a, &b, 500, seed).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(d <= shift.norm() + 1e-9);
    }

    #[test]
    fn partition_splits_faces_by_label(labels in prop::collection::vec(any::<bool>(), 320)) {
        let mut scan = icosphere(0.5, 2);
        prop_assume!(labels.len() == scan.faces.len());
        let labels: Vec<Label> = labels.iter().map(|&o| if o { Label::Object } else { Label::Human }).collect();
        scan.labels = None;
        let (h, o) = partition_mesh(&scan, &labels).unwrap();
        let objects = labels.iter().filter(|l| **l == Label::Object).count();
        prop_assert_eq!(o.faces.len(), objects);
        prop_assert_eq!(h.faces.len(), labels.len() - objects);
        prop_assert!(h.faces.iter().flatten().all(|&v| (v as usize) < h.vertices.len()));
        prop_assert!(o.faces.iter().flatten().all(|&v| (v as usize) < o.vertices.len()));
    }

    #[test]
    fn refinement_moves_only_along_normals(outer in 1.02..1.2f64, lambda in 0.0..50.0f64) {
        let human = icosphere(outer, 2);
        let object = icosphere(1.0, 2);
        let opts = RefineOptions { lambda_dis: lambda, steps: 40, ..Default::default() };
        let r = refine_composition(&human, &object, &opts, &visibility_cameras(48).unwrap()).unwrap();
        for ((p, q), n) in r.mesh.vertices.iter().zip(&human.vertices).zip(&r.normals) {
            prop_assert!((p - q).cross(n).norm() <= 1e-6);
        }
        prop_assert!(r.penetrations.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.penetrations);
    }

    #[test]
    fn config_snapshot_round_trips(res in 1u32..128, geo in 0usize..5000, seed in any::<u64>(), lambda in 0.0..100.0f64) {
        let mut cfg = RunConfig::default();
        cfg.grid_resolution = res;
        cfg.schedule.geo_steps = geo;
        cfg.schedule.seed = seed;
        cfg.refine.lambda_dis = lambda;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn strictly_decreasing_losses_descend(start in 1.0..1e6f64, ratio in 0.9..0.9999f64, len in 100usize..400) {
        let values: Vec<f64> = (0..len).map(|i| start * ratio.powi(i as i32)).collect();
        prop_assert!(smoothed_descent(&values, 50));
        let rising: Vec<f64> = values.iter().rev().cloned().collect();
        prop_assert!(!smoothed_descent(&rising, 50));
    }
}
