//! Generic skeletal body model and forward linear blend skinning.
//!
//! A posed vertex is `Σ_i w_i T_i (v + B)` where the weights `w` and blend offset `B`
//! are taken from the nearest template vertex of the canonical point `v`.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointIndex;
use crate::io;
use crate::mesh::{TriMesh, Vec3};
use crate::raster::{Camera, Similarity};

pub const OPENPOSE_JOINTS: usize = 18;
pub const SHAPE_DIMS: usize = 10;
pub const EXPRESSION_DIMS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Bone {
    pub name: String,
    /// `None` only for bone 0.
    pub parent: Option<usize>,
    /// Rigid rest-pose transform relative to the parent frame.
    pub rest: Matrix4<f64>,
}

/// Linear per-vertex displacement basis, vertex-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendBasis {
    dims: usize,
    data: Vec<Vec3>,
}

impl BlendBasis {
    pub fn new(dims: usize, data: Vec<Vec3>) -> Result<Self> {
        if dims == 0 || data.len() % dims != 0 {
            return Err(Error::DimensionMismatch(format!(
                "basis of {} directions is not a multiple of {dims}",
                data.len()
            )));
        }
        Ok(BlendBasis { dims, data })
    }

    pub fn zeros(vertices: usize, dims: usize) -> Self {
        BlendBasis {
            dims,
            data: vec![Vec3::zeros(); vertices * dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn vertex_count(&self) -> usize {
        self.data.len() / self.dims
    }

    pub fn direction(&self, vertex: usize, k: usize) -> Vec3 {
        self.data[vertex * self.dims + k]
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    fn accumulate(&self, coeffs: &[f64], out: &mut [Vec3]) {
        for (v, o) in out.iter_mut().enumerate() {
            for (k, c) in coeffs.iter().enumerate() {
                if *c != 0.0 {
                    *o += self.data[v * self.dims + k] * *c;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rig {
    pub bones: Vec<Bone>,
    pub template: TriMesh,
    weights: Vec<f64>,
    pub shape_basis: BlendBasis,
    pub expression_basis: BlendBasis,
    pub pose_basis: Option<BlendBasis>,
    /// Bone index for each OpenPose joint, `-1` when the rig has no counterpart.
    pub openpose_map: [i32; OPENPOSE_JOINTS],
    index: PointIndex,
    rest_inverse: Vec<Matrix4<f64>>,
}

/// Skeleton rotations and blend-shape coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Axis-angle rotation per bone, radians.
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Pose {
    pub fn zero(rig: &Rig) -> Self {
        Pose {
            theta: vec![[0.0; 3]; rig.bones.len()],
            beta: vec![0.0; rig.shape_basis.dims()],
            psi: vec![0.0; rig.expression_basis.dims()],
        }
    }

    pub fn rotation(&self, bone: usize) -> Rotation3<f64> {
        Rotation3::from_scaled_axis(Vec3::from(self.theta[bone]))
    }

    /// Wraps every axis-angle so its magnitude is at most π.
    pub fn canonicalized(&self) -> Pose {
        let mut out = self.clone();
        for t in &mut out.theta {
            let v = Vec3::from(*t);
            let a = v.norm();
            if a > std::f64::consts::PI {
                let wrapped = a - std::f64::consts::TAU * (a / std::f64::consts::TAU).round();
                *t = (v * (wrapped / a)).into();
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .flatten()
            .chain(&self.beta)
            .chain(&self.psi)
            .all(|x| x.is_finite())
    }
}

fn is_rigid(m: &Matrix4<f64>) -> bool {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let bottom_ok = (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs()) < 1e-9;
    bottom_ok && (r.transpose() * r - Matrix3::identity()).norm() < 1e-6 && (r.determinant() - 1.0).abs() < 1e-6
}

fn rotation4(r: &Rotation3<f64>) -> Matrix4<f64> {
    r.to_homogeneous()
}

impl Rig {
    pub fn new(
        bones: Vec<Bone>,
        template: TriMesh,
        weights: Vec<f64>,
        shape_basis: BlendBasis,
        expression_basis: BlendBasis,
        pose_basis: Option<BlendBasis>,
        openpose_map: [i32; OPENPOSE_JOINTS],
    ) -> Result<Self> {
        let nb = bones.len();
        let nv = template.vertices.len();
        if nb == 0 {
            return Err(Error::InvalidArgument("rig has no bones".into()));
        }
        if nv == 0 {
            return Err(Error::EmptyMesh);
        }
        for (i, b) in bones.iter().enumerate() {
            match (i, b.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::InvalidArgument("bone 0 must be the root".into())),
                (_, Some(p)) if p < i => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "bone {i} ({}) must have a parent with a lower index",
                        b.name
                    )))
                }
            }
            if !is_rigid(&b.rest) {
                return Err(Error::InvalidArgument(format!(
                    "rest transform of bone {i} is not rigid"
                )));
            }
        }
        if weights.len() != nv * nb {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {nv} vertices x {nb} bones",
                weights.len()
            )));
        }
        for (v, w) in weights.chunks_exact(nb).enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| *x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "skinning weights of vertex {v} are not a convex combination"
                )));
            }
        }
        for (name, b) in [("shape", &shape_basis), ("expression", &expression_basis)] {
            if b.vertex_count() != nv {
                return Err(Error::DimensionMismatch(format!(
                    "{name} basis covers {} vertices, template has {nv}",
                    b.vertex_count()
                )));
            }
        }
        if let Some(p) = &pose_basis {
            if p.vertex_count() != nv || p.dims() != 9 * (nb - 1) {
                return Err(Error::DimensionMismatch(format!(
                    "pose basis must have {} directions for {nv} vertices",
                    9 * (nb - 1)
                )));
            }
        }
        for &j in &openpose_map {
            if j < -1 || j >= nb as i32 {
                return Err(Error::InvalidArgument(format!("openpose map entry {j} out of range")));
            }
        }
        let mut rig = Rig {
            index: PointIndex::new(&template.vertices),
            bones,
            template,
            weights,
            shape_basis,
            expression_basis,
            pose_basis,
            openpose_map,
            rest_inverse: Vec::new(),
        };
        rig.rest_inverse = rig
            .global_transforms(None)
            .iter()
            .map(|g| g.try_inverse().expect("rigid transforms are invertible"))
            .collect();
        Ok(rig)
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn weights(&self, vertex: usize) -> &[f64] {
        let nb = self.bones.len();
        &self.weights[vertex * nb..(vertex + 1) * nb]
    }

    pub fn all_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.theta.len() != self.bones.len()
            || pose.beta.len() != self.shape_basis.dims()
            || pose.psi.len() != self.expression_basis.dims()
        {
            return Err(Error::DimensionMismatch(format!(
                "pose has {}/{}/{} entries, rig expects {}/{}/{}",
                pose.theta.len(),
                pose.beta.len(),
                pose.psi.len(),
                self.bones.len(),
                self.shape_basis.dims(),
                self.expression_basis.dims()
            )));
        }
        if !pose.is_finite() {
            return Err(Error::InvalidArgument("pose contains non-finite values".into()));
        }
        Ok(())
    }

    /// World transform of every bone frame, with `pose` rotations applied when given.
    fn global_transforms(&self, pose: Option<&Pose>) -> Vec<Matrix4<f64>> {
        let mut g: Vec<Matrix4<f64>> = Vec::with_capacity(self.bones.len());
        for (i, b) in self.bones.iter().enumerate() {
            let local = match pose {
                Some(p) => b.rest * rotation4(&p.rotation(i)),
                None => b.rest,
            };
            let world = match b.parent {
                Some(p) => g[p] * local,
                None => local,
            };
            g.push(world);
        }
        g
    }

    /// Nearest template vertex (lowest index on ties).
    pub fn nearest_template_vertex(&self, p: &Vec3) -> usize {
        self.index.nearest(p).expect("template is non-empty").0
    }

    pub fn nearest_template_vertices(&self, points: &[Vec3]) -> Vec<usize> {
        self.index.nearest_many(points).into_iter().map(|(i, _)| i).collect()
    }
}

/// `T_i(β, θ)`: maps the canonical frame of each bone to its posed frame.
pub fn bone_transforms(rig: &Rig, pose: &Pose) -> Result<Vec<Matrix4<f64>>> {
    rig.check_pose(pose)?;
    Ok(rig
        .global_transforms(Some(pose))
        .iter()
        .zip(&rig.rest_inverse)
        .map(|(g, inv)| g * inv)
        .collect())
}

/// Posed joint centres.
pub fn joint_positions(rig: &Rig, pose: &Pose) -> Result<Vec<Vec3>> {
    rig.check_pose(pose)?;
    Ok(rig
        .global_transforms(Some(pose))
        .iter()
        .map(|g| Vec3::new(g[(0, 3)], g[(1, 3)], g[(2, 3)]))
        .collect())
}

pub fn nn_skinning_weights(rig: &Rig, query_points: &[Vec3]) -> Vec<Vec<f64>> {
    rig.nearest_template_vertices(query_points)
        .into_iter()
        .map(|k| rig.weights(k).to_vec())
        .collect()
}

fn pose_features(pose: &Pose) -> Vec<f64> {
    let mut f = Vec::with_capacity(9 * pose.theta.len().saturating_sub(1));
    for i in 1..pose.theta.len() {
        let r = pose.rotation(i).into_inner() - Matrix3::identity();
        for row in 0..3 {
            for col in 0..3 {
                f.push(r[(row, col)]);
            }
        }
    }
    f
}

/// `B(β, θ, ψ)` per template vertex.
pub fn blend_shape_offset(rig: &Rig, pose: &Pose) -> Result<Vec<Vec3>> {
    rig.check_pose(pose)?;
    let mut out = vec![Vec3::zeros(); rig.template.vertices.len()];
    rig.shape_basis.accumulate(&pose.beta, &mut out);
    rig.expression_basis.accumulate(&pose.psi, &mut out);
    if let Some(pb) = &rig.pose_basis {
        pb.accumulate(&pose_features(pose), &mut out);
    }
    Ok(out)
}

/// Blended affine transform and blend offset for every template vertex under one pose.
#[derive(Clone, Debug)]
pub struct PoseSkinning {
    linear: Vec<Matrix3<f64>>,
    translation: Vec<Vec3>,
    blend: Vec<Vec3>,
}

impl PoseSkinning {
    pub fn new(rig: &Rig, pose: &Pose) -> Result<Self> {
        let transforms = bone_transforms(rig, pose)?;
        let blend = blend_shape_offset(rig, pose)?;
        let nb = rig.bone_count();
        let nv = rig.template.vertices.len();
        let mut linear = Vec::with_capacity(nv);
        let mut translation = Vec::with_capacity(nv);
        for v in 0..nv {
            let mut m = Matrix4::zeros();
            for (i, w) in rig.weights(v).iter().enumerate().take(nb) {
                if *w != 0.0 {
                    m += transforms[i] * *w;
                }
            }
            linear.push(m.fixed_view::<3, 3>(0, 0).into_owned());
            translation.push(Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]));
        }
        Ok(PoseSkinning {
            linear,
            translation,
            blend,
        })
    }

    /// Poses a canonical point that borrows the skinning data of template vertex `k`.
    #[inline]
    pub fn apply(&self, k: usize, v: &Vec3) -> Vec3 {
        self.linear[k] * (v + self.blend[k]) + self.translation[k]
    }

    /// `∂ posed / ∂ canonical` for points bound to template vertex `k`.
    #[inline]
    pub fn jacobian(&self, k: usize) -> &Matrix3<f64> {
        &self.linear[k]
    }
}

/// Canonical points posed by one skinning, with the template binding kept for backprop.
#[derive(Clone, Debug)]
pub struct SkinnedPoints {
    pub positions: Vec<Vec3>,
    pub binding: Vec<usize>,
}

impl SkinnedPoints {
    pub fn new(rig: &Rig, skinning: &PoseSkinning, canonical: &[Vec3]) -> Self {
        let binding = rig.nearest_template_vertices(canonical);
        let positions = canonical
            .iter()
            .zip(&binding)
            .map(|(v, &k)| skinning.apply(k, v))
            .collect();
        SkinnedPoints { positions, binding }
    }

    /// Pulls posed-space vertex gradients back to canonical space.
    pub fn pullback(&self, skinning: &PoseSkinning, grads: &[Vec3]) -> Vec<Vec3> {
        grads
            .iter()
            .zip(&self.binding)
            .map(|(g, &k)| skinning.jacobian(k).transpose() * g)
            .collect()
    }
}

pub fn lbs_forward(mesh: &TriMesh, rig: &Rig, pose: &Pose) -> Result<TriMesh> {
    let skinning = PoseSkinning::new(rig, pose)?;
    let skinned = SkinnedPoints::new(rig, &skinning, &mesh.vertices);
    Ok(TriMesh {
        vertices: skinned.positions,
        faces: mesh.faces.clone(),
        colors: mesh.colors.clone(),
        labels: mesh.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Posed joint centres projected in OpenPose order.
pub fn pose_keypoints_2d(rig: &Rig, pose: &Pose, camera: &Camera) -> Result<Vec<Keypoint>> {
    pose_keypoints_2d_zoomed(rig, pose, camera, &Similarity::identity())
}

/// As [`pose_keypoints_2d`], with the joints first mapped through a zoom transform.
pub fn pose_keypoints_2d_zoomed(rig: &Rig, pose: &Pose, camera: &Camera, zoom: &Similarity) -> Result<Vec<Keypoint>> {
    let joints = joint_positions(rig, pose)?;
    Ok(rig
        .openpose_map
        .iter()
        .map(|&b| {
            if b < 0 {
                return Keypoint {
                    x: 0.0,
                    y: 0.0,
                    visible: false,
                };
            }
            match camera.project(&zoom.apply(&joints[b as usize])) {
                Some((x, y, _)) => Keypoint { x, y, visible: true },
                None => Keypoint {
                    x: 0.0,
                    y: 0.0,
                    visible: false,
                },
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct BoneEntry {
    name: String,
    parent: i32,
    rest_transform: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryEntry {
    binary_path: String,
    #[serde(default)]
    dims: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    bones: Vec<BoneEntry>,
    template: TemplateEntry,
    weights: BinaryEntry,
    shape_basis: BinaryEntry,
    expression_basis: BinaryEntry,
    #[serde(default)]
    pose_basis: Option<BinaryEntry>,
    openpose_map: Vec<i32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateEntry {
    obj_path: String,
}

fn vec3s_from_f32(values: Vec<f32>) -> Vec<Vec3> {
    values
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

fn f32s_from_vec3(values: &[Vec3]) -> Vec<f32> {
    values
        .iter()
        .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
        .collect()
}

/// Loads a rig description (TOML) and its referenced OBJ and binary blobs.
pub fn load_rig(path: &Path) -> Result<Rig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RigFile = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf { dir.join(p) };

    let bones = file
        .bones
        .iter()
        .map(|b| {
            if b.rest_transform.len() != 16 {
                return Err(Error::parse(
                    "rig bone",
                    format!("{} needs 16 transform entries", b.name),
                ));
            }
            Ok(Bone {
                name: b.name.clone(),
                parent: (b.parent >= 0).then_some(b.parent as usize),
                rest: Matrix4::from_row_slice(&b.rest_transform),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let template = io::read_obj(&resolve(&file.template.obj_path))?;
    let weights: Vec<f64> = io::read_f32_blob(&resolve(&file.weights.binary_path))?
        .into_iter()
        .map(f64::from)
        .collect();
    let basis = |e: &BinaryEntry| -> Result<BlendBasis> {
        let dims = e
            .dims
            .ok_or_else(|| Error::parse("rig basis", format!("{} lacks dims", e.binary_path)))?;
        BlendBasis::new(dims, vec3s_from_f32(io::read_f32_blob(&resolve(&e.binary_path))?))
    };
    let shape = basis(&file.shape_basis)?;
    let expr = basis(&file.expression_basis)?;
    let pose_basis = file.pose_basis.as_ref().map(basis).transpose()?;
    let map: [i32; OPENPOSE_JOINTS] = file
        .openpose_map
        .clone()
        .try_into()
        .map_err(|_| Error::parse("rig", format!("openpose_map needs {OPENPOSE_JOINTS} entries")))?;
    Rig::new(bones, template, weights, shape, expr, pose_basis, map)
}

/// Writes `<stem>.toml` plus its OBJ and blob files into `dir`.
pub fn save_rig(rig: &Rig, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let obj = format!("{stem}_template.obj");
    let w = format!("{stem}_weights.bin");
    let s = format!("{stem}_shape.bin");
    let x = format!("{stem}_expression.bin");
    io::write_obj(&dir.join(&obj), &rig.template)?;
    io::write_f32_blob(
        &dir.join(&w),
        &rig.weights.iter().map(|v| *v as f32).collect::<Vec<_>>(),
    )?;
    io::write_f32_blob(&dir.join(&s), &f32s_from_vec3(rig.shape_basis.data()))?;
    io::write_f32_blob(&dir.join(&x), &f32s_from_vec3(rig.expression_basis.data()))?;
    let pose_basis = match &rig.pose_basis {
        Some(pb) => {
            let p = format!("{stem}_pose.bin");
            io::write_f32_blob(&dir.join(&p), &f32s_from_vec3(pb.data()))?;
            Some(BinaryEntry {
                binary_path: p,
                dims: Some(pb.dims()),
            })
        }
        None => None,
    };
    let file = RigFile {
        bones: rig
            .bones
            .iter()
            .map(|b| BoneEntry {
                name: b.name.clone(),
                parent: b.parent.map_or(-1, |p| p as i32),
                rest_transform: b.rest.transpose().as_slice().to_vec(),
            })
            .collect(),
        template: TemplateEntry { obj_path: obj },
        weights: BinaryEntry {
            binary_path: w,
            dims: None,
        },
        shape_basis: BinaryEntry {
            binary_path: s,
            dims: Some(rig.shape_basis.dims()),
        },
        expression_basis: BinaryEntry {
            binary_path: x,
            dims: Some(rig.expression_basis.dims()),
        },
        pose_basis,
        openpose_map: rig.openpose_map.to_vec(),
    };
    let path = dir.join(format!("{stem}.toml"));
    let text = toml::to_string(&file).map_err(|e| Error::parse("rig", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn save_pose(path: &Path, pose: &Pose) -> Result<()> {
    let text = toml::to_string(pose).map_err(|e| Error::parse("pose", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Homogeneous point transform.
pub fn transform_point(m: &Matrix4<f64>, p: &Vec3) -> Vec3 {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{capsule_body_rig, two_bone_chain};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_pose_gives_identity_transforms() {
        let rig = capsule_body_rig();
        for t in bone_transforms(&rig, &Pose::zero(&rig)).unwrap() {
            assert!((t - Matrix4::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn root_rotation_propagates_to_every_bone() {
        let rig = two_bone_chain();
        let mut pose = Pose::zero(&rig);
        pose.theta[0] = [0.0, 0.0, 0.7];
        let r = Rotation3::from_scaled_axis(Vec3::new(0.0, 0.0, 0.7)).to_homogeneous();
        let root = rig.bones[0].rest;
        let expected = root * r * root.try_inverse().unwrap();
        for t in bone_transforms(&rig, &pose).unwrap() {
            assert!((t - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn child_quarter_turn_moves_tip() {
        // Chain: root at origin, child joint at (1,0,0), tip 1 unit further along +x.
        let rig = two_bone_chain();
        let mut pose = Pose::zero(&rig);
        pose.theta[1] = [0.0, 0.0, FRAC_PI_2];
        let t = bone_transforms(&rig, &pose).unwrap();
        let tip = transform_point(&t[1], &Vec3::new(2.0, 0.0, 0.0));
        assert!((tip - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        let joints = joint_positions(&rig, &pose).unwrap();
        assert!((joints[1] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let rig = capsule_body_rig();
        let mut pose = Pose::zero(&rig);
        pose.theta.pop();
        assert!(bone_transforms(&rig, &pose).is_err());
        let mut pose = Pose::zero(&rig);
        pose.beta.push(0.0);
        assert!(blend_shape_offset(&rig, &pose).is_err());
    }

    #[test]
    fn blend_shapes_are_linear() {
        let rig = capsule_body_rig();
        let zero = blend_shape_offset(&rig, &Pose::zero(&rig)).unwrap();
        assert!(zero.iter().all(|v| *v == Vec3::zeros()));

        let mut p = Pose::zero(&rig);
        p.beta[0] = 2.0;
        let b = blend_shape_offset(&rig, &p).unwrap();
        for (v, o) in b.iter().enumerate() {
            assert!((o - rig.shape_basis.direction(v, 0) * 2.0).norm() < 1e-15);
        }
        let mut q = Pose::zero(&rig);
        q.psi[3] = -0.5;
        let e = blend_shape_offset(&rig, &q).unwrap();
        let mut both = p.clone();
        both.psi[3] = -0.5;
        let s = blend_shape_offset(&rig, &both).unwrap();
        for v in 0..s.len() {
            assert!((s[v] - b[v] - e[v]).norm() < 1e-15);
        }
    }

    #[test]
    fn nn_weights_at_vertex_and_on_ties() {
        let rig = capsule_body_rig();
        let w = nn_skinning_weights(&rig, &[rig.template.vertices[12]]);
        assert_eq!(w[0], rig.weights(12));

        let rig = two_bone_chain();
        // Template vertices 0 and 1 of the chain sit at (±0.1, 0, 0) from (1,0,0)... use midpoint.
        let a = rig.template.vertices[0];
        let b = rig.template.vertices[1];
        let mid = (a + b) / 2.0;
        assert_eq!(rig.nearest_template_vertex(&mid), 0);
    }

    #[test]
    fn identity_pose_lbs_is_identity_and_beta_displaces() {
        let rig = capsule_body_rig();
        let out = lbs_forward(&rig.template, &rig, &Pose::zero(&rig)).unwrap();
        for (a, b) in out.vertices.iter().zip(&rig.template.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
        let mut p = Pose::zero(&rig);
        p.beta[1] = 1.0;
        let out = lbs_forward(&rig.template, &rig, &p).unwrap();
        for (v, (a, b)) in out.vertices.iter().zip(&rig.template.vertices).enumerate() {
            assert!((a - b - rig.shape_basis.direction(v, 1)).norm() < 1e-12);
        }
    }

    #[test]
    fn keypoints_project_and_flag_hidden() {
        let rig = capsule_body_rig();
        let pose = Pose::zero(&rig);
        let joints = joint_positions(&rig, &pose).unwrap();
        // Camera on +z looking at the origin; bone 0 sits at the origin.
        let cam = Camera::new(3.0, 0.0, 0.0, std::f64::consts::FRAC_PI_4, 64, 64).unwrap();
        let kp = pose_keypoints_2d(&rig, &pose, &cam).unwrap();
        assert_eq!(kp.len(), OPENPOSE_JOINTS);
        for (k, &b) in rig.openpose_map.iter().enumerate() {
            if b < 0 {
                assert!(!kp[k].visible);
                continue;
            }
            let j = joints[b as usize];
            let f = 32.0 / (std::f64::consts::FRAC_PI_8).tan();
            let depth = 3.0 - j.z;
            assert!((kp[k].x - (32.0 + f * j.x / depth)).abs() < 1e-9);
            assert!((kp[k].y - (32.0 - f * j.y / depth)).abs() < 1e-9);
        }
        // Shift the body behind the camera.
        let behind = Similarity {
            scale: 1.0,
            center: [0.0, 0.0, -10.0],
        };
        let kp = pose_keypoints_2d_zoomed(&rig, &pose, &cam, &behind).unwrap();
        assert!(kp.iter().all(|k| !k.visible));
    }

    #[test]
    fn canonicalize_wraps_large_rotations() {
        let rig = two_bone_chain();
        let mut p = Pose::zero(&rig);
        p.theta[1] = [0.0, 0.0, 1.5 * std::f64::consts::PI];
        let c = p.canonicalized();
        assert!(Vec3::from(c.theta[1]).norm() <= std::f64::consts::PI + 1e-12);
        let a = bone_transforms(&rig, &p).unwrap();
        let b = bone_transforms(&rig, &c).unwrap();
        assert!((a[1] - b[1]).norm() < 1e-12);
    }

    #[test]
    fn rig_file_round_trip() {
        let rig = capsule_body_rig();
        let dir = tempfile::tempdir().unwrap();
        let path = save_rig(&rig, dir.path(), "body").unwrap();
        let back = load_rig(&path).unwrap();
        assert_eq!(back.bone_count(), rig.bone_count());
        assert_eq!(back.openpose_map, rig.openpose_map);
        assert_eq!(back.template.faces, rig.template.faces);
        for (a, b) in back.all_weights().iter().zip(rig.all_weights()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in back.bones.iter().zip(&rig.bones) {
            assert!((a.rest - b.rest).norm() < 1e-6);
        }
    }
}
