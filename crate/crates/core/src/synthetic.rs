//! Synthetic meshes, rigs and scenes used by the tests and the demo pipeline.

use std::collections::HashMap;
use std::f64::consts::TAU;

use nalgebra::{Matrix4, Rotation3, Translation3};

use crate::mesh::{merge_meshes, Label, TriMesh, Vec3};
use crate::rig::{lbs_forward, BlendBasis, Bone, Pose, Rig, EXPRESSION_DIMS, OPENPOSE_JOINTS, SHAPE_DIMS};
use crate::tetgrid::{build_regular_grid, marching_tetrahedra, ImplicitField};

/// Subdivided icosahedron, outward winding.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh {
        vertices: verts.into_iter().map(|v| v * radius).collect(),
        faces,
        colors: None,
        labels: None,
    }
}

/// Closed solid of revolution about +y from a closed counter-clockwise `(r, y)` profile.
pub fn revolve(profile: &[(f64, f64)], segments: usize) -> TriMesh {
    let np = profile.len();
    let mut vertices = Vec::with_capacity(np * segments);
    for s in 0..segments {
        let (sa, ca) = (TAU * s as f64 / segments as f64).sin_cos();
        for &(r, y) in profile {
            vertices.push(Vec3::new(r * sa, y, r * ca));
        }
    }
    let id = |s: usize, p: usize| ((s % segments) * np + (p % np)) as u32;
    let mut faces = Vec::with_capacity(2 * np * segments);
    for s in 0..segments {
        for p in 0..np {
            let (a, b, c, d) = (id(s, p), id(s, p + 1), id(s + 1, p + 1), id(s + 1, p));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    TriMesh {
        vertices,
        faces,
        colors: None,
        labels: None,
    }
}

/// Band of rectangular cross-section around the y axis.
pub fn ring(inner: f64, outer: f64, half_height: f64, segments: usize, profile_steps: usize) -> TriMesh {
    let mut profile = Vec::new();
    let corners = [
        (inner, -half_height),
        (outer, -half_height),
        (outer, half_height),
        (inner, half_height),
    ];
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        for s in 0..profile_steps {
            let t = s as f64 / profile_steps as f64;
            profile.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    }
    revolve(&profile, segments)
}

pub fn ring_sdf(p: &Vec3, inner: f64, outer: f64, half_height: f64) -> f64 {
    let r = (p.x * p.x + p.z * p.z).sqrt();
    let c = 0.5 * (inner + outer);
    let h = 0.5 * (outer - inner);
    let q = (r - c).abs() - h;
    let w = p.y.abs() - half_height;
    let outside = (q.max(0.0).powi(2) + w.max(0.0).powi(2)).sqrt();
    outside + q.max(w).min(0.0)
}

/// A flat two-vertex-wide strip from x=0 to x=2 bound to a root at the origin and a child
/// bone whose joint sits at (1, 0, 0).
pub fn two_bone_chain() -> Rig {
    let mut vertices = Vec::new();
    for i in 0..5 {
        let x = 0.5 * i as f64;
        vertices.push(Vec3::new(x, -0.1, 0.0));
        vertices.push(Vec3::new(x, 0.1, 0.0));
    }
    let mut faces = Vec::new();
    for i in 0..4u32 {
        let (a, b, c, d) = (2 * i, 2 * i + 2, 2 * i + 3, 2 * i + 1);
        faces.push([a, b, c]);
        faces.push([a, c, d]);
    }
    let template = TriMesh::new(vertices, faces).expect("strip is valid");
    let weights: Vec<f64> = template
        .vertices
        .iter()
        .flat_map(|v| if v.x < 1.0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let nv = template.vertices.len();
    let bones = vec![
        Bone {
            name: "root".into(),
            parent: None,
            rest: Matrix4::identity(),
        },
        Bone {
            name: "child".into(),
            parent: Some(0),
            rest: Translation3::new(1.0, 0.0, 0.0).to_homogeneous(),
        },
    ];
    let mut map = [-1; OPENPOSE_JOINTS];
    map[1] = 0;
    map[4] = 1;
    Rig::new(
        bones,
        template,
        weights,
        BlendBasis::zeros(nv, SHAPE_DIMS),
        BlendBasis::zeros(nv, EXPRESSION_DIMS),
        None,
        map,
    )
    .expect("chain rig is valid")
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Ellipsoid stretched over the segment `a → b`.
fn limb(a: &Vec3, b: &Vec3, thickness: f64) -> TriMesh {
    let axis = b - a;
    let len = axis.norm();
    let rot = Rotation3::rotation_between(&Vec3::y(), &(axis / len))
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
    let centre = (a + b) / 2.0;
    let half = 0.5 * len + thickness;
    icosphere(1.0, 1).map_vertices(|v| centre + rot * Vec3::new(v.x * thickness, v.y * half, v.z * thickness))
}

/// Twelve-bone humanoid of overlapping ellipsoid limbs with smooth distance-based weights.
pub fn capsule_body_rig() -> Rig {
    // (name, parent, joint position in the canonical pose, tip position)
    let limbs: [(&str, Option<usize>, [f64; 3], [f64; 3]); 12] = [
        ("pelvis", None, [0.0, 0.0, 0.0], [0.0, 0.2, 0.0]),
        ("spine", Some(0), [0.0, 0.2, 0.0], [0.0, 0.4, 0.0]),
        ("chest", Some(1), [0.0, 0.4, 0.0], [0.0, 0.55, 0.0]),
        ("head", Some(2), [0.0, 0.6, 0.0], [0.0, 0.85, 0.0]),
        ("l_upperarm", Some(2), [0.18, 0.5, 0.0], [0.45, 0.45, 0.0]),
        ("l_forearm", Some(4), [0.45, 0.45, 0.0], [0.7, 0.4, 0.0]),
        ("r_upperarm", Some(2), [-0.18, 0.5, 0.0], [-0.45, 0.45, 0.0]),
        ("r_forearm", Some(6), [-0.45, 0.45, 0.0], [-0.7, 0.4, 0.0]),
        ("l_thigh", Some(0), [0.1, -0.05, 0.0], [0.12, -0.45, 0.0]),
        ("l_shin", Some(8), [0.12, -0.45, 0.0], [0.13, -0.85, 0.0]),
        ("r_thigh", Some(0), [-0.1, -0.05, 0.0], [-0.12, -0.45, 0.0]),
        ("r_shin", Some(10), [-0.12, -0.45, 0.0], [-0.13, -0.85, 0.0]),
    ];
    let joints: Vec<Vec3> = limbs.iter().map(|s| Vec3::from(s.2)).collect();
    let tips: Vec<Vec3> = limbs.iter().map(|s| Vec3::from(s.3)).collect();

    // World rest frames: translations at the joints, with a small twist on the upper arms so
    // rest transforms are not all pure translations.
    let world: Vec<Matrix4<f64>> = (0..12)
        .map(|i| {
            let twist = match i {
                4 => 0.1,
                6 => -0.1,
                _ => 0.0,
            };
            Translation3::from(joints[i]).to_homogeneous()
                * Rotation3::from_axis_angle(&Vec3::z_axis(), twist).to_homogeneous()
        })
        .collect();
    let bones: Vec<Bone> = limbs
        .iter()
        .enumerate()
        .map(|(i, s)| Bone {
            name: s.0.to_string(),
            parent: s.1,
            rest: match s.1 {
                Some(p) => world[p].try_inverse().expect("rigid") * world[i],
                None => world[i],
            },
        })
        .collect();

    let mut template = TriMesh::default();
    for i in 0..12 {
        let part = limb(&joints[i], &tips[i], if i == 3 { 0.1 } else { 0.06 });
        let off = template.vertices.len() as u32;
        template.vertices.extend(part.vertices);
        template.faces.extend(part.faces.iter().map(|f| f.map(|v| v + off)));
    }
    let nv = template.vertices.len();
    let sigma2 = 0.06f64 * 0.06;
    let mut weights = Vec::with_capacity(nv * 12);
    for v in &template.vertices {
        let d: Vec<f64> = (0..12).map(|i| segment_distance(v, &joints[i], &tips[i])).collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d.iter().map(|x| (-(x * x - dmin * dmin) / sigma2).exp()).collect();
        let sum: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|x| x / sum));
    }

    let shape: Vec<Vec3> = template
        .vertices
        .iter()
        .flat_map(|v| {
            (0..SHAPE_DIMS).map(move |k| match k {
                0 => v * 0.05,
                1 => Vec3::new(0.0, v.y * 0.05, 0.0),
                2 => Vec3::new(v.x * 0.05, 0.0, 0.0),
                _ => {
                    let f = k as f64;
                    Vec3::new((f * v.y).sin(), (f * v.x).cos(), (f * (v.x + v.y)).sin()) * 0.01
                }
            })
        })
        .collect();
    let head = (joints[3], tips[3]);
    let expression: Vec<Vec3> = template
        .vertices
        .iter()
        .flat_map(|v| {
            let on_head = segment_distance(v, &head.0, &head.1) < 0.12;
            (0..EXPRESSION_DIMS).map(move |k| {
                if on_head {
                    let f = 1.0 + k as f64;
                    Vec3::new(0.0, (f * v.x * 10.0).sin(), (f * v.y * 10.0).cos()) * 0.005
                } else {
                    Vec3::zeros()
                }
            })
        })
        .collect();

    let mut map = [-1; OPENPOSE_JOINTS];
    for (k, b) in [
        (0, 3),
        (1, 2),
        (2, 6),
        (3, 7),
        (5, 4),
        (6, 5),
        (8, 10),
        (9, 11),
        (11, 8),
        (12, 9),
    ] {
        map[k] = b;
    }
    Rig::new(
        bones,
        template,
        weights,
        BlendBasis::new(SHAPE_DIMS, shape).expect("shape basis"),
        BlendBasis::new(EXPRESSION_DIMS, expression).expect("expression basis"),
        None,
        map,
    )
    .expect("capsule rig is valid")
}

/// Radius of the demo rig's template sphere.
pub const SPHERE_RIG_RADIUS: f64 = 0.45;

/// Sphere template with a root bone and an upper-body bone, weights blended smoothly in y.
pub fn sphere_rig() -> Rig {
    let template = icosphere(SPHERE_RIG_RADIUS, 3);
    let weights: Vec<f64> = template
        .vertices
        .iter()
        .flat_map(|v| {
            let t = ((v.y / SPHERE_RIG_RADIUS + 0.4) / 0.8).clamp(0.0, 1.0);
            let s = t * t * (3.0 - 2.0 * t);
            [1.0 - s, s]
        })
        .collect();
    let nv = template.vertices.len();
    let bones = vec![
        Bone {
            name: "root".into(),
            parent: None,
            rest: Matrix4::identity(),
        },
        Bone {
            name: "upper".into(),
            parent: Some(0),
            rest: Translation3::new(0.0, 0.1, 0.0).to_homogeneous(),
        },
    ];
    let mut map = [-1; OPENPOSE_JOINTS];
    map[0] = 1;
    map[1] = 0;
    Rig::new(
        bones,
        template,
        weights,
        BlendBasis::zeros(nv, SHAPE_DIMS),
        BlendBasis::zeros(nv, EXPRESSION_DIMS),
        None,
        map,
    )
    .expect("sphere rig is valid")
}

fn pose_with(rig: &Rig, theta: &[[f64; 3]]) -> Pose {
    let mut p = Pose::zero(rig);
    p.theta[..theta.len()].copy_from_slice(theta);
    p
}

pub fn human_color(p: &Vec3) -> Vec3 {
    Vec3::new(0.85, 0.6 + 0.25 * p.y, 0.5 + 0.2 * p.x).map(|c| c.clamp(0.0, 1.0))
}

pub fn object_color(p: &Vec3) -> Vec3 {
    Vec3::new(0.2 + 0.1 * p.z, 0.3, 0.7 + 0.2 * p.x).map(|c| c.clamp(0.0, 1.0))
}

/// Canonical and posed ground truth for the sphere-with-band scene.
#[derive(Clone, Debug)]
pub struct SphereBandScene {
    pub rig: Rig,
    pub input_pose: Pose,
    pub pose_set: Vec<Pose>,
    pub human: TriMesh,
    pub object: TriMesh,
    pub human_radius: f64,
    pub ring: (f64, f64, f64),
}

impl SphereBandScene {
    pub fn new() -> Self {
        let rig = sphere_rig();
        let input_pose = pose_with(&rig, &[[0.0, 0.5, 0.15], [0.0, 0.0, 0.35]]);
        let pose_set = vec![
            Pose::zero(&rig),
            input_pose.clone(),
            pose_with(&rig, &[[0.0, 0.0, 0.0], [0.0, 0.0, -0.3]]),
        ];
        let human_radius = 0.5;
        let ring_dims = (0.47, 0.65, 0.15);
        let mut human = icosphere(human_radius, 3);
        human.colors = Some(human.vertices.iter().map(human_color).collect());
        let mut object = ring(ring_dims.0, ring_dims.1, ring_dims.2, 64, 4);
        object.colors = Some(object.vertices.iter().map(object_color).collect());
        SphereBandScene {
            rig,
            input_pose,
            pose_set,
            human,
            object,
            human_radius,
            ring: ring_dims,
        }
    }

    pub fn human_sdf(&self, p: &Vec3) -> f64 {
        p.norm() - self.human_radius
    }

    pub fn object_sdf(&self, p: &Vec3) -> f64 {
        ring_sdf(p, self.ring.0, self.ring.1, self.ring.2)
    }

    /// Canonical union of both layers.
    pub fn canonical_composite(&self) -> TriMesh {
        merge_meshes(&self.human, &self.object)
    }

    /// Single-layer scan: the union's outer surface extracted at `resolution`, faces labeled
    /// by the nearer layer, coloured by layer, then posed by the input pose.
    pub fn scan(&self, resolution: u32) -> TriMesh {
        let grid = build_regular_grid(resolution).expect("valid resolution");
        let field = ImplicitField::from_fn(&grid, |p| self.human_sdf(p).min(self.object_sdf(p)));
        let mut mesh = marching_tetrahedra(&grid, &field).expect("field matches grid");
        let labels: Vec<Label> = (0..mesh.faces.len())
            .map(|f| {
                let [a, b, c] = mesh.corners(f);
                let m = (a + b + c) / 3.0;
                if self.object_sdf(&m) < self.human_sdf(&m) {
                    Label::Object
                } else {
                    Label::Human
                }
            })
            .collect();
        let colors = mesh
            .vertices
            .iter()
            .map(|v| {
                if self.object_sdf(v) < self.human_sdf(v) {
                    object_color(v)
                } else {
                    human_color(v)
                }
            })
            .collect();
        mesh.labels = Some(labels);
        mesh.colors = Some(colors);
        lbs_forward(&mesh, &self.rig, &self.input_pose).expect("scene pose matches rig")
    }

    /// Both layers posed and merged, so the scan is exactly the composite of the layers.
    pub fn layered_scan(&self) -> TriMesh {
        let h = lbs_forward(&self.human, &self.rig, &self.input_pose).expect("pose matches rig");
        let o = lbs_forward(&self.object, &self.rig, &self.input_pose).expect("pose matches rig");
        merge_meshes(&h, &o)
    }
}

impl Default for SphereBandScene {
    fn default() -> Self {
        Self::new()
    }
}

/// Sphere whose upper hemisphere (face centroid y > 0) is labeled object.
pub fn two_hemisphere_scan(radius: f64, subdivisions: u32) -> TriMesh {
    let mut m = icosphere(radius, subdivisions);
    m.labels = Some(
        (0..m.faces.len())
            .map(|f| {
                let [a, b, c] = m.corners(f);
                if a.y + b.y + c.y > 0.0 {
                    Label::Object
                } else {
                    Label::Human
                }
            })
            .collect(),
    );
    m
}

/// Axis-aligned closed box.
pub fn cuboid(lo: Vec3, hi: Vec3) -> TriMesh {
    let v = |x: usize, y: usize, z: usize| {
        Vec3::new(
            if x == 1 { hi.x } else { lo.x },
            if y == 1 { hi.y } else { lo.y },
            if z == 1 { hi.z } else { lo.z },
        )
    };
    let vertices = (0..8).map(|i| v(i & 1, (i >> 1) & 1, (i >> 2) & 1)).collect();
    let faces = vec![
        [0, 2, 3],
        [0, 3, 1],
        [4, 5, 7],
        [4, 7, 6],
        [0, 1, 5],
        [0, 5, 4],
        [2, 6, 7],
        [2, 7, 3],
        [0, 4, 6],
        [0, 6, 2],
        [1, 3, 7],
        [1, 7, 5],
    ];
    TriMesh {
        vertices,
        faces,
        colors: None,
        labels: None,
    }
}

/// Unit square in the plane `z = z0`, split into `n × n` quads.
pub fn square(z0: f64, n: usize) -> TriMesh {
    let mut vertices = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Vec3::new(i as f64 / n as f64, j as f64 / n as f64, z0));
        }
    }
    let id = |i: usize, j: usize| (j * (n + 1) + i) as u32;
    let mut faces = Vec::new();
    for j in 0..n {
        for i in 0..n {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriMesh {
        vertices,
        faces,
        colors: None,
        labels: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_is_closed_and_outward() {
        for s in 0..4 {
            let m = icosphere(2.0, s);
            assert_eq!(m.faces.len(), 20 * 4usize.pow(s));
            assert!(m.is_closed());
            for f in 0..m.faces.len() {
                let [a, b, c] = m.corners(f);
                assert!(m.face_cross(f).dot(&(a + b + c)) > 0.0);
            }
            assert!(m.vertices.iter().all(|v| (v.norm() - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn ring_and_cuboid_are_closed_and_outward() {
        for m in [
            ring(0.4, 0.6, 0.1, 32, 3),
            cuboid(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)),
        ] {
            assert!(m.is_closed());
            // Divergence theorem: positive enclosed volume means outward winding.
            let vol: f64 = (0..m.faces.len())
                .map(|f| {
                    let [a, b, c] = m.corners(f);
                    a.dot(&b.cross(&c)) / 6.0
                })
                .sum();
            assert!(vol > 0.0);
        }
    }

    #[test]
    fn ring_sdf_signs() {
        assert!(ring_sdf(&Vec3::new(0.55, 0.0, 0.0), 0.47, 0.65, 0.15) < 0.0);
        assert!((ring_sdf(&Vec3::new(0.0, 0.0, 0.7), 0.47, 0.65, 0.15) - 0.05).abs() < 1e-12);
        assert!((ring_sdf(&Vec3::new(0.55, 0.25, 0.0), 0.47, 0.65, 0.15) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn scenes_are_well_formed() {
        let s = SphereBandScene::new();
        let scan = s.scan(24);
        assert!(scan.validate().is_ok());
        let labels = scan.labels.as_ref().unwrap();
        assert!(labels.contains(&Label::Human) && labels.contains(&Label::Object));
        assert_eq!(capsule_body_rig().bone_count(), 12);
        let hemi = two_hemisphere_scan(1.0, 2);
        let n_obj = hemi.labels.unwrap().iter().filter(|&&l| l == Label::Object).count();
        assert!(n_obj > 0 && n_obj < hemi.faces.len());
    }
}
