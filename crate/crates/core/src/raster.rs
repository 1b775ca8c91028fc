//! Deterministic software rasterizer and screen-space to vertex gradients.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_png;
use crate::mesh::{Label, TriMesh, Vec3};

const NEAR: f64 = 1e-6;

/// Pinhole camera on a sphere around the origin, looking at it with +y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub radius: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

/// World-space frame of a camera.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// Viewing direction; camera-space `-z`.
    pub forward: Vec3,
    pub focal: f64,
}

impl Camera {
    pub fn new(radius: f64, elevation: f64, azimuth: f64, fov: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            radius,
            elevation,
            azimuth,
            fov,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::InvalidArgument(format!("fov {} outside (0, π)", self.fov)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is smaller than 8x8",
                self.width, self.height
            )));
        }
        if !(self.radius > 0.0) || !self.elevation.is_finite() || !self.azimuth.is_finite() {
            return Err(Error::InvalidArgument(
                "camera radius must be positive and angles finite".into(),
            ));
        }
        Ok(())
    }

    pub fn with_size(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn position(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(ce * sa, se, ce * ca) * self.radius
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov).tan()
    }

    pub fn frame(&self) -> CameraFrame {
        let position = self.position();
        let forward = (-position).normalize();
        let mut right = forward.cross(&Vec3::y());
        if right.norm() < 1e-12 {
            right = forward.cross(&Vec3::z());
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        CameraFrame {
            position,
            right,
            up,
            forward,
            focal: self.focal(),
        }
    }

    /// Pixel coordinates `(x, y)` (origin top-left, y down) and depth, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        self.frame().project(p, self.width, self.height)
    }

    /// The 30-view evaluation ring: elevation 0, evenly spaced azimuth.
    pub fn ring(count: usize, radius: f64, fov: f64, width: usize, height: usize) -> Result<Vec<Camera>> {
        (0..count)
            .map(|i| Camera::new(radius, 0.0, TAU * i as f64 / count as f64, fov, width, height))
            .collect()
    }
}

impl CameraFrame {
    pub fn project(&self, p: &Vec3, width: usize, height: usize) -> Option<(f64, f64, f64)> {
        let d = p - self.position;
        let depth = d.dot(&self.forward);
        if depth <= NEAR {
            return None;
        }
        let x = 0.5 * width as f64 + self.focal * d.dot(&self.right) / depth;
        let y = 0.5 * height as f64 - self.focal * d.dot(&self.up) / depth;
        Some((x, y, depth))
    }

    /// Ray direction through a pixel centre, scaled so the ray parameter equals depth.
    pub fn ray(&self, px: usize, py: usize, width: usize, height: usize) -> Vec3 {
        let x = (px as f64 + 0.5 - 0.5 * width as f64) / self.focal;
        let y = -(py as f64 + 0.5 - 0.5 * height as f64) / self.focal;
        self.right * x + self.up * y + self.forward
    }

    /// Rows are the camera axes (right, up, backward).
    pub fn world_to_camera(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.right.transpose(), self.up.transpose(), (-self.forward).transpose()])
    }
}

/// Uniform scale about a centre: `p ↦ scale · (p − center)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub center: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            center: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) * self.scale
    }

    pub fn apply_mesh(&self, mesh: &TriMesh) -> TriMesh {
        mesh.map_vertices(|v| self.apply(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<u8>,
    /// Camera-space unit normals, zero off the mesh.
    pub normal: Vec<Vec3>,
    pub seg_h: Vec<u8>,
    pub seg_o: Vec<u8>,
    pub rgb: Vec<Vec3>,
    pub face_id: Vec<i32>,
    /// Distance along the viewing axis, `+∞` off the mesh.
    pub depth: Vec<f64>,
    /// Barycentric weights of the covering face.
    pub bary: Vec<[f64; 3]>,
}

impl RenderBuffers {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderBuffers {
            width,
            height,
            mask: vec![0; n],
            normal: vec![Vec3::zeros(); n],
            seg_h: vec![0; n],
            seg_o: vec![0; n],
            rgb: vec![Vec3::zeros(); n],
            face_id: vec![-1; n],
            depth: vec![f64::INFINITY; n],
            bary: vec![[0.0; 3]; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

struct FaceSetup {
    a: Vec3,
    e1: Vec3,
    e2: Vec3,
    normal_cam: Vec3,
    label: Option<Label>,
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Ray/triangle intersection returning `(t, u, v)`.
#[inline]
fn intersect(origin: &Vec3, d: &Vec3, a: &Vec3, e1: &Vec3, e2: &Vec3) -> Option<(f64, f64, f64)> {
    let p = d.cross(e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if u < 0.0 {
        return None;
    }
    let q = s.cross(e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > NEAR).then_some((t, u, v))
}

/// Front-facing, z-buffered rasterization with flat camera-space normals.
pub fn rasterize(mesh: &TriMesh, camera: &Camera) -> RenderBuffers {
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderBuffers::empty(w, h);
    if mesh.is_empty() {
        return out;
    }
    let frame = camera.frame();
    let to_cam = frame.world_to_camera();

    let setups: Vec<Option<FaceSetup>> = (0..mesh.faces.len())
        .into_par_iter()
        .map(|fi| {
            let [a, b, c] = mesh.corners(fi);
            let e1 = b - a;
            let e2 = c - a;
            let m = e1.cross(&e2);
            let len = m.norm();
            if len == 0.0 || m.dot(&(frame.position - a)) <= 0.0 {
                return None;
            }
            let mut lo = (f64::INFINITY, f64::INFINITY);
            let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for p in [a, b, c] {
                let (x, y, _) = frame.project(&p, w, h)?;
                lo = (lo.0.min(x), lo.1.min(y));
                hi = (hi.0.max(x), hi.1.max(y));
            }
            // Pixel centres sit at k + 0.5; widen by one pixel, the exact test is the ray cast.
            let c0 = (lo.0 - 1.5).ceil().max(0.0);
            let c1 = (hi.0 + 0.5).floor().min(w as f64 - 1.0);
            let r0 = (lo.1 - 1.5).ceil().max(0.0);
            let r1 = (hi.1 + 0.5).floor().min(h as f64 - 1.0);
            if c0 > c1 || r0 > r1 {
                return None;
            }
            Some(FaceSetup {
                a,
                e1,
                e2,
                normal_cam: to_cam * (m / len),
                label: mesh.labels.as_ref().map(|l| l[fi]),
                rows: (r0 as usize, r1 as usize),
                cols: (c0 as usize, c1 as usize),
            })
        })
        .collect();

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (fi, s) in setups.iter().enumerate() {
        if let Some(s) = s {
            for row in &mut rows[s.rows.0..=s.rows.1] {
                row.push(fi as u32);
            }
        }
    }

    let grey = Vec3::repeat(0.5);
    let row_results: Vec<Vec<(usize, i32, f64, [f64; 3])>> = rows
        .par_iter()
        .enumerate()
        .map(|(py, faces)| {
            let mut best: Vec<(usize, i32, f64, [f64; 3])> = Vec::new();
            let mut depth = vec![f64::INFINITY; w];
            let mut fid = vec![-1i32; w];
            let mut bary = vec![[0.0; 3]; w];
            for &fi in faces {
                let s = setups[fi as usize].as_ref().expect("bucketed faces are set up");
                for px in s.cols.0..=s.cols.1 {
                    let d = frame.ray(px, py, w, h);
                    if let Some((t, u, v)) = intersect(&frame.position, &d, &s.a, &s.e1, &s.e2) {
                        if t < depth[px] {
                            depth[px] = t;
                            fid[px] = fi as i32;
                            bary[px] = [1.0 - u - v, u, v];
                        }
                    }
                }
            }
            for px in 0..w {
                if fid[px] >= 0 {
                    best.push((px, fid[px], depth[px], bary[px]));
                }
            }
            best
        })
        .collect();

    for (py, row) in row_results.into_iter().enumerate() {
        for (px, fi, t, b) in row {
            let i = py * w + px;
            let s = setups[fi as usize].as_ref().expect("covering face is set up");
            out.mask[i] = 1;
            out.face_id[i] = fi;
            out.depth[i] = t;
            out.bary[i] = b;
            out.normal[i] = s.normal_cam;
            match s.label {
                Some(Label::Human) => out.seg_h[i] = 1,
                Some(Label::Object) => out.seg_o[i] = 1,
                None => {}
            }
            let f = mesh.faces[fi as usize];
            out.rgb[i] = match &mesh.colors {
                Some(c) => c[f[0] as usize] * b[0] + c[f[1] as usize] * b[1] + c[f[2] as usize] * b[2],
                None => grey,
            };
        }
    }
    out
}

/// Per-pixel loss gradients; empty vectors mean the channel carries no gradient.
#[derive(Clone, Debug, Default)]
pub struct PixelGrad {
    pub normal: Vec<Vec3>,
    pub rgb: Vec<Vec3>,
    pub mask: Vec<f64>,
    pub seg_h: Vec<f64>,
    pub seg_o: Vec<f64>,
}

impl PixelGrad {
    pub fn is_zero(&self) -> bool {
        self.normal.iter().all(|g| *g == Vec3::zeros())
            && self.rgb.iter().all(|g| *g == Vec3::zeros())
            && self
                .mask
                .iter()
                .chain(&self.seg_h)
                .chain(&self.seg_o)
                .all(|g| *g == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexGrad {
    pub position: Vec<Vec3>,
    pub color: Vec<Vec3>,
}

impl VertexGrad {
    pub fn zeros(n: usize) -> Self {
        VertexGrad {
            position: vec![Vec3::zeros(); n],
            color: vec![Vec3::zeros(); n],
        }
    }

    pub fn add(&mut self, other: &VertexGrad) {
        for (a, b) in self.position.iter_mut().zip(&other.position) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
    }
}

fn check_channel<T>(name: &str, v: &[T], n: usize) -> Result<()> {
    if !v.is_empty() && v.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{name} gradient has {} pixels, image has {n}",
            v.len()
        )));
    }
    Ok(())
}

/// Pulls pixel gradients back through the covering triangle of each pixel: barycentric
/// colour interpolation and the flat normal. Mask and segmentation channels are piecewise
/// constant in the vertex positions and contribute nothing here; see [`coverage_gradient`].
pub fn backprop_pixels_to_vertices(
    mesh: &TriMesh,
    camera: &Camera,
    buffers: &RenderBuffers,
    grad: &PixelGrad,
) -> Result<VertexGrad> {
    let n = buffers.pixel_count();
    if buffers.width != camera.width || buffers.height != camera.height {
        return Err(Error::DimensionMismatch("buffers were rendered at another size".into()));
    }
    check_channel("normal", &grad.normal, n)?;
    check_channel("rgb", &grad.rgb, n)?;
    check_channel("mask", &grad.mask, n)?;
    check_channel("seg_h", &grad.seg_h, n)?;
    check_channel("seg_o", &grad.seg_o, n)?;
    if buffers.face_id.iter().any(|&f| f >= mesh.faces.len() as i32) {
        return Err(Error::DimensionMismatch(
            "buffers reference faces the mesh does not have".into(),
        ));
    }

    let frame = camera.frame();
    let to_cam = frame.world_to_camera();
    let mut out = VertexGrad::zeros(mesh.vertices.len());
    let mut normal_acc = vec![Vec3::zeros(); mesh.faces.len()];

    for i in 0..n {
        let fi = buffers.face_id[i];
        if fi < 0 {
            continue;
        }
        let fi = fi as usize;
        if !grad.normal.is_empty() {
            normal_acc[fi] += grad.normal[i];
        }
        if grad.rgb.is_empty() || grad.rgb[i] == Vec3::zeros() {
            continue;
        }
        let g = grad.rgb[i];
        let f = mesh.faces[fi];
        let b = buffers.bary[i];
        for k in 0..3 {
            out.color[f[k] as usize] += g * b[k];
        }
        let Some(colors) = &mesh.colors else { continue };
        let gb = [
            g.dot(&colors[f[0] as usize]),
            g.dot(&colors[f[1] as usize]),
            g.dot(&colors[f[2] as usize]),
        ];
        // Barycentrics of the ray hit: (1 − u − v, u, v) with M [t u v]ᵀ = o − a,
        // M = [−d, e1, e2]. Moving vertex k by δ shifts x by −b_k M⁻¹ δ.
        let [a, bb, c] = mesh.corners(fi);
        let d = frame.ray(i % buffers.width, i / buffers.width, buffers.width, buffers.height);
        let m = Matrix3::from_columns(&[-d, bb - a, c - a]);
        let Some(minv) = m.try_inverse() else {
            continue;
        };
        let gx = Vec3::new(0.0, gb[1] - gb[0], gb[2] - gb[0]);
        let w = minv.transpose() * gx;
        for k in 0..3 {
            out.position[f[k] as usize] -= w * b[k];
        }
    }

    if !grad.normal.is_empty() {
        for (fi, g) in normal_acc.iter().enumerate() {
            if *g == Vec3::zeros() {
                continue;
            }
            let [a, b, c] = mesh.corners(fi);
            let e1 = b - a;
            let e2 = c - a;
            let m = e1.cross(&e2);
            let len = m.norm();
            if len == 0.0 {
                continue;
            }
            let nrm = m / len;
            let gw = to_cam.transpose() * g;
            let gm = (gw - nrm * nrm.dot(&gw)) / len;
            let ge1 = e2.cross(&gm);
            let ge2 = gm.cross(&e1);
            let f = mesh.faces[fi];
            out.position[f[0] as usize] -= ge1 + ge2;
            out.position[f[1] as usize] += ge1;
            out.position[f[2] as usize] += ge2;
        }
    }
    Ok(out)
}

/// Surrogate gradient for a coverage channel (mask or one segmentation layer).
///
/// `grad[i]` is `∂L/∂coverage` at pixel `i`. Pixels the layer owns with a positive value push
/// the covering face's vertices inward along the face normal. Pixels with a negative value
/// push the nearest face of `buffers` (the pixel itself included, within `radius` pixels)
/// outward, which grows the silhouette or lifts an occluded face in front of its occluder.
/// Displacements are scaled by focal/depth so one pixel of silhouette motion carries unit
/// weight. `owned` defaults to the coverage of `buffers`; pass the layer's share of a joint
/// rendering to restrict the inward push to pixels where the layer is actually visible.
pub fn coverage_gradient(
    mesh: &TriMesh,
    camera: &Camera,
    buffers: &RenderBuffers,
    owned: Option<&[bool]>,
    grad: &[f64],
    radius: usize,
) -> Result<Vec<Vec3>> {
    let (w, h) = (buffers.width, buffers.height);
    check_channel("coverage", grad, w * h)?;
    if let Some(o) = owned {
        check_channel("ownership mask", o, w * h)?;
    }
    let mut out = vec![Vec3::zeros(); mesh.vertices.len()];
    if grad.is_empty() {
        return Ok(out);
    }
    let focal = camera.focal();
    let push = |pixel: usize, g: f64, out: &mut Vec<Vec3>| {
        let fi = buffers.face_id[pixel] as usize;
        let n = mesh.face_normal(fi);
        let kappa = focal / buffers.depth[pixel];
        let step = n * (g * kappa / 3.0);
        for &v in &mesh.faces[fi] {
            out[v as usize] += step;
        }
    };
    let hit = |i: usize| buffers.face_id[i] >= 0;
    for i in 0..w * h {
        let g = grad[i];
        if g > 0.0 {
            if owned.map_or(hit(i), |o| o[i] && hit(i)) {
                push(i, g, &mut out);
            }
            continue;
        }
        if g == 0.0 {
            continue;
        }
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let r = radius as i64;
        let mut best: Option<(i64, usize)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let (qx, qy) = (x + dx, y + dy);
                if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                    continue;
                }
                let q = (qy * w as i64 + qx) as usize;
                let d2 = dx * dx + dy * dy;
                if hit(q) && d2 <= r * r && best.is_none_or(|(bd, bq)| (d2, q) < (bd, bq)) {
                    best = Some((d2, q));
                }
            }
        }
        if let Some((_, q)) = best {
            push(q, g, &mut out);
        }
    }
    Ok(out)
}

/// Random camera parameters drawn for each optimization view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampling {
    pub radius: f64,
    pub elevation: (f64, f64),
    pub fov: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSampling {
    fn default() -> Self {
        CameraSampling {
            radius: 3.0,
            elevation: (-PI / 18.0, PI / 9.0),
            fov: (PI / 7.0, PI / 4.0),
            width: 64,
            height: 64,
        }
    }
}

pub fn sample_camera_with(rng: &mut impl Rng, cfg: &CameraSampling) -> Camera {
    let elevation = rng.random_range(cfg.elevation.0..=cfg.elevation.1);
    let azimuth = rng.random_range(0.0..TAU);
    let fov = rng.random_range(cfg.fov.0..=cfg.fov.1);
    Camera {
        radius: cfg.radius,
        elevation,
        azimuth,
        fov,
        width: cfg.width,
        height: cfg.height,
    }
}

pub fn sample_camera(seed: u64, cfg: &CameraSampling) -> Camera {
    sample_camera_with(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoomPart {
    Face,
    Hand,
}

impl ZoomPart {
    pub fn scale(self) -> f64 {
        match self {
            ZoomPart::Face => 5.0,
            ZoomPart::Hand => 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ZoomTarget {
    Joint {
        position: Vec3,
        part: ZoomPart,
    },
    /// Axis-aligned box `(x_l, x_r)`, e.g. of the human/object interaction region.
    Bbox {
        lo: Vec3,
        hi: Vec3,
    },
}

/// The close-up transform for a target; the bbox mode draws its centre and scale from `rng`.
pub fn zoom_transform(target: &ZoomTarget, rng: &mut impl Rng) -> Result<Similarity> {
    match *target {
        ZoomTarget::Joint { position, part } => Ok(Similarity {
            scale: part.scale(),
            center: position.into(),
        }),
        ZoomTarget::Bbox { lo, hi } => {
            let ext = (hi - lo).max();
            if !(ext > 0.0) || (hi - lo).min() < 0.0 {
                return Err(Error::InvalidArgument("zoom box has zero extent".into()));
            }
            let mut center = [0.0; 3];
            for k in 0..3 {
                let a = (hi[k] + 3.0 * lo[k]) / 4.0;
                let b = (3.0 * hi[k] + lo[k]) / 4.0;
                center[k] = if a < b { rng.random_range(a..b) } else { a };
            }
            let scale = rng.random_range(1.0 / (0.6 * ext)..1.0 / (0.3 * ext));
            Ok(Similarity { scale, center })
        }
    }
}

pub fn zoom_view(mesh: &TriMesh, target: &ZoomTarget, seed: u64) -> Result<(TriMesh, Similarity)> {
    let t = zoom_transform(target, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((t.apply_mesh(mesh), t))
}

/// Writes `<stem>_mask.png`, `_normal.png`, `_seg_h.png`, `_seg_o.png`, `_rgb.png` and `.fid`.
pub fn export_buffers(dir: &Path, stem: &str, b: &RenderBuffers) -> Result<()> {
    let (w, h) = (b.width, b.height);
    let gray = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    write_png(&dir.join(format!("{stem}_mask.png")), w, h, 1, &gray(&b.mask))?;
    write_png(&dir.join(format!("{stem}_seg_h.png")), w, h, 1, &gray(&b.seg_h))?;
    write_png(&dir.join(format!("{stem}_seg_o.png")), w, h, 1, &gray(&b.seg_o))?;
    let normal: Vec<f64> = b
        .normal
        .iter()
        .zip(&b.mask)
        .flat_map(|(n, &m)| {
            let c = if m != 0 {
                n.map(|x| 0.5 * (x + 1.0))
            } else {
                Vec3::zeros()
            };
            [c.x, c.y, c.z]
        })
        .collect();
    write_png(&dir.join(format!("{stem}_normal.png")), w, h, 3, &normal)?;
    let rgb: Vec<f64> = b.rgb.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
    write_png(&dir.join(format!("{stem}_rgb.png")), w, h, 3, &rgb)?;
    let fid: Vec<u8> = b.face_id.iter().flat_map(|f| f.to_le_bytes()).collect();
    let path = dir.join(format!("{stem}.fid"));
    std::fs::write(&path, fid).map_err(|e| Error::io(&path, e))
}
