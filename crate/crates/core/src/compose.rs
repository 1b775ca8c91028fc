//! Putting canonical layers on new bodies and poses, and pushing the human layer under the
//! object where the two interpenetrate.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointIndex;
use crate::mesh::{merge_meshes, TriMesh, Vec3};
use crate::raster::{rasterize, Camera};
use crate::rig::{lbs_forward, Pose, Rig};

/// Vertices with at least one incident face covering a pixel in some view, ascending.
pub fn visible_vertices(mesh: &TriMesh, cameras: &[Camera]) -> Result<Vec<usize>> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("visibility needs at least one camera".into()));
    }
    let mut unlabeled = mesh.clone();
    unlabeled.labels = None;
    unlabeled.colors = None;
    let per_view: Vec<BTreeSet<i32>> = cameras
        .par_iter()
        .map(|c| {
            rasterize(&unlabeled, c)
                .face_id
                .into_iter()
                .filter(|&f| f >= 0)
                .collect()
        })
        .collect();
    let mut seen = vec![false; mesh.vertices.len()];
    for faces in per_view {
        for f in faces {
            for &v in &mesh.faces[f as usize] {
                seen[v as usize] = true;
            }
        }
    }
    Ok((0..seen.len()).filter(|&v| seen[v]).collect())
}

/// 30 views around the vertical axis at radius 3 and zero elevation.
pub fn visibility_cameras(size: usize) -> Result<Vec<Camera>> {
    Camera::ring(30, 3.0, PI / 4.0, size, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub lambda_dis: f64,
    pub steps: usize,
    pub lr: f64,
    /// Required clearance behind the object surface, in object mean edge lengths.
    pub margin: f64,
    /// Pairs farther apart than this many object mean edge lengths are ignored.
    pub reach: f64,
    pub camera_size: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            lambda_dis: 10.0,
            steps: 200,
            lr: 1e-3,
            margin: 0.25,
            reach: 3.0,
            camera_size: 256,
        }
    }
}

impl RefineOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dis >= 0.0)
            || !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.margin >= 0.0)
            || !(self.reach > 0.0)
        {
            return Err(Error::Config(format!(
                "refinement needs lambda_dis >= 0, lr > 0, margin >= 0 and reach > 0, got {self:?}"
            )));
        }
        if self.camera_size == 0 {
            return Err(Error::Config("refinement camera size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub mesh: TriMesh,
    /// Signed offset of every human vertex along its frozen normal.
    pub displacement: Vec<f64>,
    pub normals: Vec<Vec3>,
    /// Penetrating vertex count within reach before each step and after the last one.
    pub penetrations: Vec<usize>,
}

/// Nearest index and distance.
fn nearest_object(index: &PointIndex, points: &[Vec3]) -> Vec<(usize, f64)> {
    index
        .nearest_many(points)
        .into_iter()
        .map(|(i, d2)| (i, d2.sqrt()))
        .collect()
}

/// Human vertices whose nearest visible object point lies against their normal.
pub fn penetrating_vertices(human: &[Vec3], normals: &[Vec3], object_points: &[Vec3]) -> Vec<usize> {
    penetrating_vertices_within(human, normals, object_points, f64::INFINITY)
}

/// [`penetrating_vertices`] restricted to vertices whose nearest object point is at most
/// `reach` away.
pub fn penetrating_vertices_within(human: &[Vec3], normals: &[Vec3], object_points: &[Vec3], reach: f64) -> Vec<usize> {
    if object_points.is_empty() {
        return Vec::new();
    }
    let index = PointIndex::new(object_points);
    nearest_object(&index, human)
        .into_iter()
        .enumerate()
        .filter(|(i, (o, dist))| *dist <= reach && (object_points[*o] - human[*i]).dot(&normals[*i]) < 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Moves human vertices along their initial normals until each one lies behind the visible
/// object surface, with a quadratic pull back toward the input.
///
/// With `ℓ` the object's mean edge length and `m = margin·ℓ`, each human vertex `v` with
/// nearest visible object vertex `o` pays `max(0, m − ⟨o − v, n_v⟩) / ℓ`, and each visible
/// object vertex `o` with nearest human vertex `h` pays `max(0, ⟨h − o, n_o⟩ + m) / ℓ` through
/// `h`. The slope `1/ℓ` is that of the unit-direction penalty flipping sign across one edge.
/// Object terms sharing a human vertex are averaged, and a vertex follows the larger of its
/// own term and that average. Pairs more than `reach·ℓ` apart do not interact, so parts of
/// the body far from a partial object such as a band stay put. A step never moves a vertex
/// past its margin, and the displacement regularizer `λ d²` is applied as a proximal step.
/// The object never moves.
pub fn refine_composition(
    human: &TriMesh,
    object: &TriMesh,
    opts: &RefineOptions,
    cameras: &[Camera],
) -> Result<RefineResult> {
    opts.validate()?;
    human.validate()?;
    object.validate()?;
    let normals = human.vertex_normals();
    let n = human.vertices.len();
    let mut d = vec![0.0; n];
    let done = |d: &[f64], penetrations: Vec<usize>| RefineResult {
        mesh: displaced(human, &normals, d),
        displacement: d.to_vec(),
        normals: normals.clone(),
        penetrations,
    };
    if object.is_empty() || human.is_empty() {
        return Ok(done(&d, Vec::new()));
    }
    let visible = visible_vertices(object, cameras)?;
    if visible.is_empty() {
        return Ok(done(&d, Vec::new()));
    }
    let obj_normals = object.vertex_normals();
    let vis_points: Vec<Vec3> = visible.iter().map(|&v| object.vertices[v]).collect();
    let vis_normals: Vec<Vec3> = visible.iter().map(|&v| obj_normals[v]).collect();
    let obj_index = PointIndex::new(&vis_points);
    let edge = object.mean_edge_length();
    let margin = opts.margin * edge;
    let reach = opts.reach * edge;
    let step_len = opts.lr / edge;
    let shrink = 1.0 / (1.0 + 2.0 * opts.lr * opts.lambda_dis);
    let mut penetrations = Vec::with_capacity(opts.steps + 1);
    let mut positions = human.vertices.clone();
    for _ in 0..opts.steps {
        let nn_h = nearest_object(&obj_index, &positions);
        let hum_index = PointIndex::new(&positions);
        let nn_o = nearest_object(&hum_index, &vis_points);
        let mut push = vec![0.0f64; n];
        let mut count = 0;
        for i in 0..n {
            if nn_h[i].1 > reach {
                continue;
            }
            let gap = (vis_points[nn_h[i].0] - positions[i]).dot(&normals[i]);
            if gap < 0.0 {
                count += 1;
            }
            push[i] = (margin - gap).max(0.0);
        }
        let mut pull = vec![(0.0, 0u32); n];
        for (k, &(h, dist)) in nn_o.iter().enumerate() {
            if dist > reach {
                continue;
            }
            let gap = (positions[h] - vis_points[k]).dot(&vis_normals[k]);
            let violation = gap + margin;
            if violation > 0.0 {
                pull[h].0 += violation * vis_normals[k].dot(&normals[h]);
                pull[h].1 += 1;
            }
        }
        penetrations.push(count);
        for i in 0..n {
            let (sum, hits) = pull[i];
            let object_push = if hits > 0 { sum / hits as f64 } else { 0.0 };
            d[i] = (d[i] - step_len.min(push[i].max(object_push))) * shrink;
            positions[i] = human.vertices[i] + normals[i] * d[i];
        }
    }
    penetrations.push(penetrating_vertices_within(&positions, &normals, &vis_points, reach).len());
    Ok(done(&d, penetrations))
}

fn displaced(human: &TriMesh, normals: &[Vec3], d: &[f64]) -> TriMesh {
    TriMesh {
        vertices: human
            .vertices
            .iter()
            .zip(normals)
            .zip(d)
            .map(|((v, n), d)| v + n * *d)
            .collect(),
        ..human.clone()
    }
}

/// Dresses a canonical human in a canonical object asset and poses the result.
pub fn transfer(
    asset_o: &TriMesh,
    target_h: &TriMesh,
    rig: &Rig,
    pose: &Pose,
    refine: Option<&RefineOptions>,
) -> Result<TriMesh> {
    rig.check_pose(pose)?;
    let human = match refine {
        Some(opts) => {
            let cams = visibility_cameras(opts.camera_size)?;
            refine_composition(target_h, asset_o, opts, &cams)?.mesh
        }
        None => target_h.clone(),
    };
    lbs_forward(&merge_meshes(&human, asset_o), rig, pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Label;
    use crate::synthetic::{icosphere, sphere_rig};

    #[test]
    fn sphere_cap_visibility() {
        let r = 0.3;
        let s = icosphere(r, 4);
        let cam = Camera::new(3.0, 0.0, 0.0, 0.5, 256, 256).unwrap();
        let v = visible_vertices(&s, &[cam]).unwrap();
        let frac = v.len() as f64 / s.vertices.len() as f64;
        let cap = (1.0 - r / 3.0) / 2.0;
        assert!((frac - cap).abs() < 0.15 * cap, "{frac} vs {cap}");
        assert!(visible_vertices(&s, &[]).is_err());
    }

    #[test]
    fn occluded_mesh_is_invisible() {
        let inner = icosphere(0.3, 2);
        let outer = icosphere(0.8, 2);
        let merged = merge_meshes(&inner, &outer);
        let v = visible_vertices(&merged, &visibility_cameras(64).unwrap()).unwrap();
        assert!(v.iter().all(|&i| i >= inner.vertices.len()));
    }

    #[test]
    fn more_cameras_see_more() {
        let s = icosphere(0.5, 3);
        let cams = visibility_cameras(64).unwrap();
        let a = visible_vertices(&s, &cams[..3]).unwrap();
        let b = visible_vertices(&s, &cams[..10]).unwrap();
        assert!(a.iter().all(|v| b.binary_search(v).is_ok()));
        assert!(b.len() >= a.len());
    }

    #[test]
    fn inside_human_is_untouched() {
        let h = icosphere(0.5, 2);
        let o = icosphere(0.8, 2);
        let r = refine_composition(&h, &o, &RefineOptions::default(), &visibility_cameras(64).unwrap()).unwrap();
        assert!(r.displacement.iter().all(|&d| d == 0.0));
        assert_eq!(r.mesh.vertices, h.vertices);
    }

    #[test]
    fn band_leaves_distant_vertices_alone() {
        let h = icosphere(0.5, 3);
        let o = crate::synthetic::ring(0.45, 0.65, 0.1, 64, 4);
        let r = refine_composition(&h, &o, &RefineOptions::default(), &visibility_cameras(128).unwrap()).unwrap();
        for (v, d) in h.vertices.iter().zip(&r.displacement) {
            if v.y.abs() > 0.35 {
                assert_eq!(*d, 0.0, "{v:?}");
            }
        }
        let cams = visibility_cameras(128).unwrap();
        let vis: Vec<Vec3> = visible_vertices(&o, &cams)
            .unwrap()
            .iter()
            .map(|&i| o.vertices[i])
            .collect();
        let n = h.vertex_normals();
        assert!(
            penetrating_vertices(&h.vertices, &n, &vis).len()
                > penetrating_vertices_within(&h.vertices, &n, &vis, 0.1).len()
        );
    }

    #[test]
    fn concentric_spheres_resolve() {
        let h = icosphere(1.1 * 0.5, 3);
        let o = icosphere(0.5, 3);
        let r = refine_composition(&h, &o, &RefineOptions::default(), &visibility_cameras(128).unwrap()).unwrap();
        assert!(r.penetrations[0] > 0);
        assert_eq!(*r.penetrations.last().unwrap(), 0, "{:?}", r.penetrations);
        assert!(r.penetrations.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.penetrations);
        for v in &r.mesh.vertices {
            assert!(v.norm() < 0.5);
        }
        let h = icosphere(1.1, 3);
        let o = icosphere(1.0, 3);
        let r = refine_composition(&h, &o, &RefineOptions::default(), &visibility_cameras(128).unwrap()).unwrap();
        assert_eq!(*r.penetrations.last().unwrap(), 0, "{:?}", r.penetrations);
        assert!(r.mesh.vertices.iter().all(|v| v.norm() < 1.0));
    }

    #[test]
    fn huge_lambda_keeps_input() {
        let h = icosphere(0.55, 2);
        let o = icosphere(0.5, 2);
        let opts = RefineOptions {
            lambda_dis: 1e12,
            ..Default::default()
        };
        let r = refine_composition(&h, &o, &opts, &visibility_cameras(64).unwrap()).unwrap();
        for (a, b) in r.mesh.vertices.iter().zip(&h.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_object_is_noop() {
        let h = icosphere(0.5, 1);
        let r = refine_composition(
            &h,
            &TriMesh::default(),
            &RefineOptions::default(),
            &visibility_cameras(32).unwrap(),
        )
        .unwrap();
        assert_eq!(r.mesh.vertices, h.vertices);
    }

    #[test]
    fn identity_transfer_is_merge() {
        let rig = sphere_rig();
        let h = icosphere(0.5, 2);
        let o = icosphere(0.6, 1);
        let out = transfer(&o, &h, &rig, &Pose::zero(&rig), None).unwrap();
        let merged = merge_meshes(&h, &o);
        for (a, b) in out.vertices.iter().zip(&merged.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(out.labels.as_ref().unwrap()[0], Label::Human);
        let mut bad = Pose::zero(&rig);
        bad.theta.pop();
        assert!(transfer(&o, &h, &rig, &bad, None).is_err());
    }
}
