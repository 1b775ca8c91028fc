//! Loss assembly and the two optimization loops: geometry decomposition in canonical space
//! and texture completion on the frozen layers.
//!
//! Posed-space reconstruction and segmentation losses compare renderings of the skinned
//! layers with renderings of the labeled scan from the same camera. Guidance losses render
//! the layers in canonical space (or under a pose of the schedule's pose set) and distil
//! per-pixel gradients from a [`GuidanceProvider`]. Everything reaches the implicit fields
//! through rasterizer backprop, the skinning Jacobian and the marching tetrahedra chain.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    sds_pixel_gradient, Condition, GuidanceProvider, GuidanceSpace, NoiseSchedule, ViewRequest, ViewTag,
};
use crate::io::write_f32_blob;
use crate::mesh::{merge_meshes, Label, TriMesh, Vec3};
use crate::optim::Adam;
use crate::raster::{
    backprop_pixels_to_vertices, coverage_gradient, rasterize, sample_camera_with, zoom_transform, Camera,
    CameraSampling, PixelGrad, RenderBuffers, Similarity, ZoomPart, ZoomTarget,
};
use crate::rig::{joint_positions, pose_keypoints_2d_zoomed, Pose, PoseSkinning, Rig};
use crate::seglift::render_scan_ground_truth;
use crate::tetgrid::{
    extract_surface, sample_sdf_training_points, save_checkpoint, FieldGradient, ImplicitField, MtSurface,
    SignedDistance, TetGrid,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec_h_geo: f64,
    pub rec_o_geo: f64,
    pub seg_comp: f64,
    pub sds_h_geo: f64,
    pub sds_o_geo: f64,
    pub rec_h_tex: f64,
    pub rec_o_tex: f64,
    pub sds_h_tex: f64,
    pub sds_o_tex: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec_h_geo: 5e3,
            rec_o_geo: 5e3,
            seg_comp: 1e5,
            sds_h_geo: 1.0,
            sds_o_geo: 1.0,
            rec_h_tex: 1e8,
            rec_o_tex: 1e8,
            sds_h_tex: 1.0,
            sds_o_tex: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("rec_h_geo", self.rec_h_geo),
            ("rec_o_geo", self.rec_o_geo),
            ("seg_comp", self.seg_comp),
            ("sds_h_geo", self.sds_h_geo),
            ("sds_o_geo", self.sds_o_geo),
            ("rec_h_tex", self.rec_h_tex),
            ("rec_o_tex", self.rec_o_tex),
            ("sds_h_tex", self.sds_h_tex),
            ("sds_o_tex", self.sds_o_tex),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Reconstruction and segmentation only.
    pub fn without_guidance(mut self) -> Self {
        self.sds_h_geo = 0.0;
        self.sds_o_geo = 0.0;
        self.sds_h_tex = 0.0;
        self.sds_o_tex = 0.0;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSchedule {
    pub init_steps: usize,
    pub geo_steps: usize,
    pub tex_steps: usize,
    pub tex_sds_warmup: usize,
    pub init_lr: f64,
    pub geo_lr: f64,
    pub tex_lr: f64,
    /// Extra poses for guidance views; empty means the canonical and the input pose.
    pub pose_set: Vec<Pose>,
    pub seed: u64,
    /// Near-surface and uniform samples each for fitting the initial field.
    pub init_points: usize,
    pub zoom_views: bool,
    /// Zoomed guidance views in the colour stage as well.
    pub tex_zoom_views: bool,
    /// Search radius in pixels of the silhouette surrogate.
    pub coverage_radius: usize,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for OptimSchedule {
    fn default() -> Self {
        OptimSchedule {
            init_steps: 400,
            geo_steps: 1600,
            tex_steps: 2000,
            tex_sds_warmup: 400,
            init_lr: 0.01,
            geo_lr: 0.001,
            tex_lr: 0.01,
            pose_set: Vec::new(),
            seed: 0,
            init_points: 50_000,
            zoom_views: true,
            tex_zoom_views: false,
            coverage_radius: 3,
            checkpoint_every: 200,
        }
    }
}

impl OptimSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("init_lr", self.init_lr),
            ("geo_lr", self.geo_lr),
            ("tex_lr", self.tex_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.pose_set.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("pose set contains non-finite values".into()));
        }
        Ok(())
    }

    /// The configured pose set, or canonical plus input when none is configured.
    pub fn poses(&self, rig: &Rig, input_pose: &Pose) -> Vec<Pose> {
        if self.pose_set.is_empty() {
            vec![Pose::zero(rig), input_pose.clone()]
        } else {
            self.pose_set.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub gender: String,
    pub object: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            gender: "person".into(),
            object: "object".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    pub weights: LossWeights,
    pub schedule: OptimSchedule,
    pub cameras: CameraSampling,
    pub prompts: Prompts,
}

impl DecomposeConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.cameras.width == 0 || self.cameras.height == 0 {
            return Err(Error::Config("render size must be positive".into()));
        }
        Ok(())
    }
}

/// The posed scan with its face labels and the body it was captured on.
#[derive(Clone, Copy, Debug)]
pub struct ScanInput<'a> {
    pub scan: &'a TriMesh,
    pub labels: &'a [Label],
    pub rig: &'a Rig,
    pub input_pose: &'a Pose,
}

impl ScanInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.scan.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if self.labels.len() != self.scan.faces.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} scan faces",
                self.labels.len(),
                self.scan.faces.len()
            )));
        }
        self.rig.check_pose(self.input_pose)
    }
}

/// Scalar loss and its gradient with respect to the rendered channels.
#[derive(Clone, Debug, Default)]
pub struct PixelLoss {
    pub value: f64,
    pub grad: PixelGrad,
}

fn check_dims(a: &RenderBuffers, b: &RenderBuffers) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} rendering against {}x{} scan rendering",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Masked normal reconstruction of one layer rendered alone against the scan rendering.
///
/// The object adds `Σ (A_o − S^scan_o)²`. Pixels the scan assigns to the layer but the layer
/// leaves uncovered carry a negative coverage signal equal to the loss drop of covering them.
pub fn recon_geo_loss(posed: &RenderBuffers, scan: &RenderBuffers, layer: Label) -> Result<PixelLoss> {
    check_dims(posed, scan)?;
    let n = posed.pixel_count();
    let seg = match layer {
        Label::Human => &scan.seg_h,
        Label::Object => &scan.seg_o,
    };
    let mut value = 0.0;
    let mut normal = vec![Vec3::zeros(); n];
    let mut mask = vec![0.0; n];
    for i in 0..n {
        let s = seg[i] as f64;
        let diff = posed.normal[i] - scan.normal[i];
        value += s * diff.norm_squared();
        normal[i] = diff * (2.0 * s);
        let a = posed.mask[i] as f64;
        if a == 0.0 {
            mask[i] -= s * scan.normal[i].norm_squared();
        }
        if layer == Label::Object {
            let r = a - s;
            value += r * r;
            mask[i] += 2.0 * r;
        }
    }
    Ok(PixelLoss {
        value,
        grad: PixelGrad {
            normal,
            mask,
            ..Default::default()
        },
    })
}

/// `‖S^p_h − S^scan_h‖² + ‖S^p_o − S^scan_o‖²` on a joint rendering of both layers.
pub fn seg_comp_loss(joint: &RenderBuffers, scan: &RenderBuffers) -> Result<PixelLoss> {
    check_dims(joint, scan)?;
    let n = joint.pixel_count();
    let mut value = 0.0;
    let mut seg_h = vec![0.0; n];
    let mut seg_o = vec![0.0; n];
    for i in 0..n {
        let dh = joint.seg_h[i] as f64 - scan.seg_h[i] as f64;
        let d_o = joint.seg_o[i] as f64 - scan.seg_o[i] as f64;
        value += dh * dh + d_o * d_o;
        seg_h[i] = 2.0 * dh;
        seg_o[i] = 2.0 * d_o;
    }
    Ok(PixelLoss {
        value,
        grad: PixelGrad {
            seg_h,
            seg_o,
            ..Default::default()
        },
    })
}

/// Masked colour reconstruction of one layer rendered alone against the scan rendering.
pub fn recon_tex_loss(posed: &RenderBuffers, scan: &RenderBuffers, layer: Label) -> Result<PixelLoss> {
    check_dims(posed, scan)?;
    let seg = match layer {
        Label::Human => &scan.seg_h,
        Label::Object => &scan.seg_o,
    };
    let mut value = 0.0;
    let rgb = (0..posed.pixel_count())
        .map(|i| {
            let s = seg[i] as f64;
            let diff = posed.rgb[i] - scan.rgb[i];
            value += s * diff.norm_squared();
            diff * (2.0 * s)
        })
        .collect();
    Ok(PixelLoss {
        value,
        grad: PixelGrad {
            rgb,
            ..Default::default()
        },
    })
}

/// A mesh whose vertices borrow the skinning of their nearest template vertex.
#[derive(Clone, Debug)]
pub struct BoundMesh {
    pub mesh: TriMesh,
    pub binding: Vec<usize>,
}

impl BoundMesh {
    pub fn new(rig: &Rig, mesh: TriMesh) -> Self {
        let binding = rig.nearest_template_vertices(&mesh.vertices);
        BoundMesh { mesh, binding }
    }

    pub fn posed(&self, skinning: &PoseSkinning) -> TriMesh {
        let vertices = self
            .mesh
            .vertices
            .iter()
            .zip(&self.binding)
            .map(|(v, &k)| skinning.apply(k, v))
            .collect();
        TriMesh {
            vertices,
            ..self.mesh.clone()
        }
    }

    pub fn pullback(&self, skinning: &PoseSkinning, grads: &[Vec3]) -> Vec<Vec3> {
        grads
            .iter()
            .zip(&self.binding)
            .map(|(g, &k)| skinning.jacobian(k).transpose() * g)
            .collect()
    }
}

/// Extracted surface of one layer, bound to the rig.
#[derive(Clone, Debug)]
pub struct LayerSurface {
    pub surface: MtSurface,
    pub bound: BoundMesh,
}

impl LayerSurface {
    pub fn extract(grid: &TetGrid, field: &ImplicitField, rig: &Rig, label: Label) -> Result<Self> {
        let surface = extract_surface(grid, field)?;
        let mesh = surface.mesh.clone().with_uniform_label(label);
        Ok(LayerSurface {
            bound: BoundMesh::new(rig, mesh),
            surface,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.surface.mesh.is_empty()
    }

    /// Chains posed-space vertex gradients through skinning and extraction.
    pub fn field_gradient(
        &self,
        grid: &TetGrid,
        field: &ImplicitField,
        skinning: &PoseSkinning,
        posed_grads: &[Vec3],
    ) -> Result<FieldGradient> {
        let canonical = self.bound.pullback(skinning, posed_grads);
        FieldGradient::from_vertex_grads(grid, field, &self.surface, &canonical)
    }
}

/// Values of each loss term at one step, before weighting. The guidance columns hold the
/// squared norm of the distilled pixel gradient; `total` is the weighted reconstruction and
/// segmentation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub rec_h: f64,
    pub rec_o: f64,
    pub seg: f64,
    pub sds_h: f64,
    pub sds_o: f64,
    pub total: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "step,rec_h,rec_o,seg,sds_h,sds_o,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.rec_h, self.rec_o, self.seg, self.sds_h, self.sds_o, self.total
        )
    }

    fn is_finite(&self) -> bool {
        [self.rec_h, self.rec_o, self.seg, self.sds_h, self.sds_o, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Metrics CSV and checkpoints for one optimization stage; inert without a directory.
pub struct Recorder {
    dir: Option<PathBuf>,
    stage: String,
    every: usize,
    csv: Option<BufWriter<File>>,
}

impl Recorder {
    pub fn new(dir: Option<&Path>, stage: &str, every: usize) -> Result<Self> {
        let csv = match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(format!("{stage}_metrics.csv"));
                let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
                writeln!(w, "{}", StepLosses::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
                Some(w)
            }
            None => None,
        };
        Ok(Recorder {
            dir: dir.map(Path::to_path_buf),
            stage: stage.to_string(),
            every,
            csv,
        })
    }

    pub fn disabled() -> Self {
        Recorder {
            dir: None,
            stage: String::new(),
            every: 0,
            csv: None,
        }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    pub fn row(&mut self, l: &StepLosses) -> Result<()> {
        if let Some(w) = self.csv.as_mut() {
            writeln!(w, "{}", l.csv_row()).map_err(|e| Error::io(format!("{}_metrics.csv", self.stage), e))?;
        }
        Ok(())
    }

    fn due(&self, step: usize) -> bool {
        self.dir.is_some() && self.every > 0 && step > 0 && step % self.every == 0
    }

    pub fn fields(&self, tag: &str, grid: &TetGrid, h: &ImplicitField, o: &ImplicitField) -> Result<()> {
        if let (Some(ph), Some(po)) = (
            self.path(&format!("{}_{tag}_human.lctg", self.stage)),
            self.path(&format!("{}_{tag}_object.lctg", self.stage)),
        ) {
            save_checkpoint(&ph, grid, h)?;
            save_checkpoint(&po, grid, o)?;
        }
        Ok(())
    }

    pub fn colors(&self, tag: &str, h: &[Vec3], o: &[Vec3]) -> Result<()> {
        let flat = |c: &[Vec3]| {
            c.iter()
                .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
                .collect::<Vec<_>>()
        };
        if let (Some(ph), Some(po)) = (
            self.path(&format!("{}_{tag}_human.f32", self.stage)),
            self.path(&format!("{}_{tag}_object.f32", self.stage)),
        ) {
            write_f32_blob(&ph, &flat(h))?;
            write_f32_blob(&po, &flat(o))?;
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some(w) = self.csv.as_mut() {
            w.flush()
                .map_err(|e| Error::io(format!("{}_metrics.csv", self.stage), e))?;
        }
        Ok(())
    }
}

/// Fits the field's sdf values to the template's signed distance at near-surface samples,
/// uniform samples and the grid nodes themselves. Offsets are reset to zero. Returns the
/// fitted field and the mean squared error before every step.
pub fn init_field(
    grid: &TetGrid,
    field: &ImplicitField,
    template: &TriMesh,
    steps: usize,
    lr: f64,
    points: usize,
    seed: u64,
) -> Result<(ImplicitField, Vec<f64>)> {
    field.check(grid)?;
    if template.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if steps == 0 {
        return Ok((field.clone(), Vec::new()));
    }
    if !template.is_closed() {
        log::warn!("initialization template is not closed; inside tests use winding numbers");
    }
    let mut samples = sample_sdf_training_points(template, points, points, 0.05, seed)?;
    let sd = SignedDistance::new(template)?;
    samples.extend(grid.nodes().iter().copied().zip(sd.eval_many(grid.nodes())));
    let located: Vec<([u32; 4], [f64; 4], f64)> = samples
        .iter()
        .filter_map(|(p, d)| grid.locate(p).map(|(t, w)| (grid.tets()[t], w, *d)))
        .collect();
    let m = located.len() as f64;
    let mut out = ImplicitField {
        sdf: field.sdf.clone(),
        offset: vec![Vec3::zeros(); grid.node_count()],
    };
    let mut adam = Adam::new(grid.node_count(), lr);
    let mut history = Vec::with_capacity(steps);
    let mut grad = vec![0.0; grid.node_count()];
    for _ in 0..steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (tet, w, target) in &located {
            let pred: f64 = (0..4).map(|k| w[k] * out.sdf[tet[k] as usize]).sum();
            let r = pred - target;
            loss += r * r;
            for k in 0..4 {
                grad[tet[k] as usize] += 2.0 * r * w[k] / m;
            }
        }
        history.push(loss / m);
        adam.step(&mut out.sdf, &grad);
    }
    Ok((out, history))
}

/// Both layers start from the same fit of the rig template, beginning at a constant positive
/// field.
pub fn template_fields(grid: &TetGrid, rig: &Rig, sched: &OptimSchedule) -> Result<(ImplicitField, Vec<f64>)> {
    let start = ImplicitField::constant(grid, 1.0);
    init_field(
        grid,
        &start,
        &rig.template,
        sched.init_steps,
        sched.init_lr,
        sched.init_points,
        sched.seed,
    )
}

/// One guidance view: where it looks, under which pose, and the diffusion draw.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceView {
    pub space: GuidanceSpace,
    pub pose: usize,
    pub camera: Camera,
    pub zoom: Similarity,
    pub t: usize,
    pub noise_seed: u64,
}

/// Face, hand and interaction close-up targets for a posed body.
pub fn zoom_targets(rig: &Rig, pose: &Pose, posed_object: Option<&TriMesh>) -> Result<Vec<ZoomTarget>> {
    let joints = joint_positions(rig, pose)?;
    let mut out = Vec::new();
    for (kp, part) in [(0usize, ZoomPart::Face), (4, ZoomPart::Hand), (7, ZoomPart::Hand)] {
        let b = rig.openpose_map[kp];
        if b >= 0 {
            out.push(ZoomTarget::Joint {
                position: joints[b as usize],
                part,
            });
        }
    }
    if let Some((lo, hi)) = posed_object.and_then(|m| m.bounding_box()) {
        if (hi - lo).min() > 0.0 {
            out.push(ZoomTarget::Bbox { lo, hi });
        }
    }
    Ok(out)
}

fn sds_value(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum()
}

/// Surrogate coverage signal for an image-space gradient: at a covered pixel, the loss change
/// of dropping to background; at an uncovered one, of gaining the nearest covered normal.
fn image_coverage_signal(b: &RenderBuffers, channel: &[Vec3], g: &[Vec3], radius: usize) -> Vec<f64> {
    let (w, h) = (b.width, b.height);
    let r = radius as i64;
    (0..w * h)
        .map(|i| {
            if b.mask[i] != 0 {
                return g[i].dot(&channel[i]);
            }
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let mut best: Option<(i64, usize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                        continue;
                    }
                    let q = (qy * w as i64 + qx) as usize;
                    let d2 = dx * dx + dy * dy;
                    if b.mask[q] != 0 && d2 <= r * r && best.is_none_or(|(bd, bq)| (d2, q) < (bd, bq)) {
                        best = Some((d2, q));
                    }
                }
            }
            best.map_or(0.0, |(_, q)| g[i].dot(&channel[q]))
        })
        .collect()
}

const GOLDEN_TURN: f64 = 0.618_033_988_749_894_8 * std::f64::consts::TAU;

/// Posed-space camera of one step. Elevation and fov are drawn from `rng`; the azimuth walks
/// the circle in golden-ratio increments from a random phase, so each draw is still uniform
/// while consecutive steps spread evenly around the subject.
fn step_camera(rng: &mut ChaCha8Rng, cfg: &CameraSampling, phase: f64, step: usize) -> Camera {
    let mut c = sample_camera_with(rng, cfg);
    c.azimuth = (phase + step as f64 * GOLDEN_TURN).rem_euclid(std::f64::consts::TAU);
    c
}

fn azimuth_phase(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed ^ 0x7068_6173).random_range(0.0..std::f64::consts::TAU)
}

/// Everything the geometry stage needs besides the fields.
pub struct GeometryProblem<'a> {
    pub input: ScanInput<'a>,
    pub grid: &'a TetGrid,
    pub config: &'a DecomposeConfig,
    pub guidance: &'a dyn GuidanceProvider,
    poses: Vec<Pose>,
    skinnings: Vec<PoseSkinning>,
    input_skinning: PoseSkinning,
    schedule: NoiseSchedule,
    phase: f64,
}

/// Field gradients and loss values of one evaluation.
#[derive(Clone, Debug)]
pub struct GeometryGradient {
    pub human: FieldGradient,
    pub object: FieldGradient,
    pub losses: StepLosses,
}

impl<'a> GeometryProblem<'a> {
    pub fn new(
        input: ScanInput<'a>,
        grid: &'a TetGrid,
        config: &'a DecomposeConfig,
        guidance: &'a dyn GuidanceProvider,
    ) -> Result<Self> {
        input.validate()?;
        config.validate()?;
        let poses = config.schedule.poses(input.rig, input.input_pose);
        let skinnings = poses
            .iter()
            .map(|p| PoseSkinning::new(input.rig, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeometryProblem {
            input_skinning: PoseSkinning::new(input.rig, input.input_pose)?,
            input,
            grid,
            config,
            guidance,
            poses,
            skinnings,
            schedule: NoiseSchedule::default(),
            phase: azimuth_phase(config.schedule.seed),
        })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn input_skinning(&self) -> &PoseSkinning {
        &self.input_skinning
    }

    /// Weighted reconstruction and segmentation gradients from one posed-space camera.
    pub fn reconstruction_gradient(
        &self,
        fields: (&ImplicitField, &ImplicitField),
        layers: (&LayerSurface, &LayerSurface),
        camera: &Camera,
    ) -> Result<GeometryGradient> {
        let w = &self.config.weights;
        let radius = self.config.schedule.coverage_radius;
        let skin = &self.input_skinning;
        let (lh, lo) = layers;
        let scan_b = render_scan_ground_truth(self.input.scan, self.input.labels, camera)?;
        let ph = lh.bound.posed(skin);
        let po = lo.bound.posed(skin);
        let bh = rasterize(&ph, camera);
        let bo = rasterize(&po, camera);
        let bc = rasterize(&merge_meshes(&ph, &po), camera);
        let rec_h = recon_geo_loss(&bh, &scan_b, Label::Human)?;
        let rec_o = recon_geo_loss(&bo, &scan_b, Label::Object)?;
        let seg = seg_comp_loss(&bc, &scan_b)?;

        let nh = ph.vertices.len();
        let owned_h: Vec<bool> = bc.seg_h.iter().map(|&s| s != 0).collect();
        let owned_o: Vec<bool> = bc.seg_o.iter().map(|&s| s != 0).collect();
        let layer_grad = |mesh: &TriMesh,
                          b: &RenderBuffers,
                          rec: &PixelLoss,
                          lam_rec: f64,
                          owned: &[bool],
                          seg_grad: &[f64]|
         -> Result<Vec<Vec3>> {
            let mut g = vec![Vec3::zeros(); mesh.vertices.len()];
            if mesh.is_empty() {
                return Ok(g);
            }
            if lam_rec > 0.0 {
                let normal = PixelGrad {
                    normal: rec.grad.normal.clone(),
                    ..Default::default()
                };
                let vg = backprop_pixels_to_vertices(mesh, camera, b, &normal)?;
                let cov = coverage_gradient(mesh, camera, b, None, &rec.grad.mask, radius)?;
                for ((o, a), c) in g.iter_mut().zip(&vg.position).zip(&cov) {
                    *o += (a + c) * lam_rec;
                }
            }
            if w.seg_comp > 0.0 {
                let cov = coverage_gradient(mesh, camera, b, Some(owned), seg_grad, radius)?;
                for (o, c) in g.iter_mut().zip(&cov) {
                    *o += c * w.seg_comp;
                }
            }
            Ok(g)
        };
        let gh = layer_grad(&ph, &bh, &rec_h, w.rec_h_geo, &owned_h, &seg.grad.seg_h)?;
        let go = layer_grad(&po, &bo, &rec_o, w.rec_o_geo, &owned_o, &seg.grad.seg_o)?;
        debug_assert_eq!(gh.len(), nh);
        let human = lh.field_gradient(self.grid, fields.0, skin, &gh)?;
        let object = lo.field_gradient(self.grid, fields.1, skin, &go)?;
        Ok(GeometryGradient {
            human,
            object,
            losses: StepLosses {
                rec_h: rec_h.value,
                rec_o: rec_o.value,
                seg: seg.value,
                total: w.rec_h_geo * rec_h.value + w.rec_o_geo * rec_o.value + w.seg_comp * seg.value,
                ..Default::default()
            },
        })
    }

    /// Unweighted guidance gradient of one view. In composite space the human layer is
    /// rendered but detached: its field gradient is identically zero.
    pub fn guidance_gradient(
        &self,
        fields: (&ImplicitField, &ImplicitField),
        layers: (&LayerSurface, &LayerSurface),
        view: &GuidanceView,
    ) -> Result<GeometryGradient> {
        let n = self.grid.node_count();
        let mut out = GeometryGradient {
            human: FieldGradient::zeros(n),
            object: FieldGradient::zeros(n),
            losses: StepLosses::default(),
        };
        let skin = &self.skinnings[view.pose];
        let pose = &self.poses[view.pose];
        let (lh, lo) = layers;
        let ph = lh.bound.posed(skin);
        let mesh = match view.space {
            GuidanceSpace::Human => ph,
            GuidanceSpace::Composite => merge_meshes(&ph, &lo.bound.posed(skin)),
        };
        if mesh.is_empty() {
            return Ok(out);
        }
        let zoomed = view.zoom.apply_mesh(&mesh);
        let b = rasterize(&zoomed, &view.camera);
        let (g_pix, value) = self.distil(view, pose, &b.normal, false)?;
        let cov_signal = image_coverage_signal(&b, &b.normal, &g_pix, self.config.schedule.coverage_radius);
        let vg = backprop_pixels_to_vertices(
            &zoomed,
            &view.camera,
            &b,
            &PixelGrad {
                normal: g_pix,
                ..Default::default()
            },
        )?;
        let cov = coverage_gradient(
            &zoomed,
            &view.camera,
            &b,
            None,
            &cov_signal,
            self.config.schedule.coverage_radius,
        )?;
        let s = view.zoom.scale;
        let posed_grad: Vec<Vec3> = vg.position.iter().zip(&cov).map(|(a, c)| (a + c) * s).collect();
        let nh = lh.bound.mesh.vertices.len();
        match view.space {
            GuidanceSpace::Human => {
                out.human = lh.field_gradient(self.grid, fields.0, skin, &posed_grad)?;
                out.losses.sds_h = value;
            }
            GuidanceSpace::Composite => {
                out.object = lo.field_gradient(self.grid, fields.1, skin, &posed_grad[nh..])?;
                out.losses.sds_o = value;
            }
        }
        Ok(out)
    }

    fn distil(&self, view: &GuidanceView, pose: &Pose, pixels: &[Vec3], rgb: bool) -> Result<(Vec<Vec3>, f64)> {
        Distiller {
            rig: self.input.rig,
            prompts: &self.config.prompts,
            guidance: self.guidance,
            schedule: &self.schedule,
        }
        .distil(view, pose, pixels, rgb)
    }

    /// Guidance views for one step: a body view per enabled space, plus one close-up each
    /// when zoom views are on. Draws from `rng` in a fixed order whatever the weights.
    pub fn draw_views(&self, step: usize, object: &LayerSurface, rng: &mut ChaCha8Rng) -> Result<Vec<GuidanceView>> {
        let pose = step % self.poses.len();
        let zoom_pool = if self.config.schedule.zoom_views {
            let posed_o = (!object.is_empty()).then(|| object.bound.posed(&self.skinnings[pose]));
            zoom_targets(self.input.rig, &self.poses[pose], posed_o.as_ref())?
        } else {
            Vec::new()
        };
        let mut views = Vec::new();
        for space in [GuidanceSpace::Human, GuidanceSpace::Composite] {
            let draw = |zoom: Similarity, rng: &mut ChaCha8Rng| GuidanceView {
                space,
                pose,
                camera: sample_camera_with(rng, &self.config.cameras),
                zoom,
                t: self.schedule.sample_t(rng),
                noise_seed: rng.random(),
            };
            views.push(draw(Similarity::identity(), rng));
            if !zoom_pool.is_empty() {
                let target = &zoom_pool[step % zoom_pool.len()];
                let z = zoom_transform(target, rng)?;
                views.push(draw(z, rng));
            }
        }
        Ok(views)
    }

    /// Full weighted gradient of one optimization step.
    pub fn step_gradient(
        &self,
        step: usize,
        fields: (&ImplicitField, &ImplicitField),
        rng: &mut ChaCha8Rng,
    ) -> Result<GeometryGradient> {
        let rig = self.input.rig;
        let lh = LayerSurface::extract(self.grid, fields.0, rig, Label::Human)?;
        let lo = LayerSurface::extract(self.grid, fields.1, rig, Label::Object)?;
        if lh.is_empty() || lo.is_empty() {
            log::warn!("step {step}: a layer surface is empty");
        }
        let camera = step_camera(rng, &self.config.cameras, self.phase, step);
        let views = self.draw_views(step, &lo, rng)?;
        let mut total = self.reconstruction_gradient(fields, (&lh, &lo), &camera)?;
        total.losses.step = step;
        let w = &self.config.weights;
        let active: Vec<&GuidanceView> = views
            .iter()
            .filter(|v| match v.space {
                GuidanceSpace::Human => w.sds_h_geo > 0.0,
                GuidanceSpace::Composite => w.sds_o_geo > 0.0,
            })
            .collect();
        let parts = active
            .par_iter()
            .map(|v| self.guidance_gradient(fields, (&lh, &lo), v))
            .collect::<Result<Vec<_>>>()?;
        for p in &parts {
            total.human.add_scaled(&p.human, w.sds_h_geo);
            total.object.add_scaled(&p.object, w.sds_o_geo);
            total.losses.sds_h += p.losses.sds_h;
            total.losses.sds_o += p.losses.sds_o;
        }
        Ok(total)
    }
}

fn flatten(f: &ImplicitField, out: &mut Vec<f64>) {
    out.extend_from_slice(&f.sdf);
    out.extend(f.offset.iter().flat_map(|o| [o.x, o.y, o.z]));
}

fn flatten_grad(g: &FieldGradient, out: &mut Vec<f64>) {
    out.extend_from_slice(&g.sdf);
    out.extend(g.offset.iter().flat_map(|o| [o.x, o.y, o.z]));
}

fn unflatten(params: &[f64], f: &mut ImplicitField) {
    let n = f.sdf.len();
    f.sdf.copy_from_slice(&params[..n]);
    for (i, o) in f.offset.iter_mut().enumerate() {
        *o = Vec3::new(params[n + 3 * i], params[n + 3 * i + 1], params[n + 3 * i + 2]);
    }
}

#[derive(Clone, Debug)]
pub struct GeometryResult {
    pub human: ImplicitField,
    pub object: ImplicitField,
    pub history: Vec<StepLosses>,
}

/// Runs `geo_steps` Adam steps on both fields. A non-finite loss or gradient aborts the run;
/// the fields from before the failing step are then written as `geometry_last_good_*`.
pub fn optimize_geometry(
    problem: &GeometryProblem<'_>,
    init_h: ImplicitField,
    init_o: ImplicitField,
    recorder: &mut Recorder,
) -> Result<GeometryResult> {
    let grid = problem.grid;
    init_h.check(grid)?;
    init_o.check(grid)?;
    let sched = &problem.config.schedule;
    let mut fh = init_h;
    let mut fo = init_o;
    let mut params = Vec::with_capacity(8 * grid.node_count());
    flatten(&fh, &mut params);
    flatten(&fo, &mut params);
    let split = params.len() / 2;
    let mut adam = Adam::new(params.len(), sched.geo_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x6765_6f6d);
    let mut history = Vec::with_capacity(sched.geo_steps);
    let mut grad = Vec::with_capacity(params.len());
    for step in 0..sched.geo_steps {
        let g = problem.step_gradient(step, (&fh, &fo), &mut rng)?;
        if !(g.losses.is_finite() && g.human.is_finite() && g.object.is_finite()) {
            recorder.fields("last_good", grid, &fh, &fo)?;
            recorder.finish()?;
            return Err(Error::NonFinite {
                context: format!("geometry losses {:?}", g.losses),
                step,
            });
        }
        recorder.row(&g.losses)?;
        history.push(g.losses);
        grad.clear();
        flatten_grad(&g.human, &mut grad);
        flatten_grad(&g.object, &mut grad);
        adam.step(&mut params, &grad);
        unflatten(&params[..split], &mut fh);
        unflatten(&params[split..], &mut fo);
        fh.clamp_offsets(grid);
        fo.clamp_offsets(grid);
        params.clear();
        flatten(&fh, &mut params);
        flatten(&fo, &mut params);
        if recorder.due(step + 1) {
            recorder.fields(&format!("{:05}", step + 1), grid, &fh, &fo)?;
        }
    }
    recorder.finish()?;
    Ok(GeometryResult {
        human: fh,
        object: fo,
        history,
    })
}

/// Colour stage inputs: frozen canonical layers plus the scan.
pub struct TextureProblem<'a> {
    pub input: ScanInput<'a>,
    pub config: &'a DecomposeConfig,
    pub guidance: &'a dyn GuidanceProvider,
    human: BoundMesh,
    object: BoundMesh,
    poses: Vec<Pose>,
    skinnings: Vec<PoseSkinning>,
    input_skinning: PoseSkinning,
    schedule: NoiseSchedule,
    phase: f64,
}

#[derive(Clone, Debug)]
pub struct TextureResult {
    pub human: Vec<Vec3>,
    pub object: Vec<Vec3>,
    pub history: Vec<StepLosses>,
}

impl<'a> TextureProblem<'a> {
    pub fn new(
        input: ScanInput<'a>,
        human: &TriMesh,
        object: &TriMesh,
        config: &'a DecomposeConfig,
        guidance: &'a dyn GuidanceProvider,
    ) -> Result<Self> {
        input.validate()?;
        config.validate()?;
        human.validate()?;
        object.validate()?;
        let poses = config.schedule.poses(input.rig, input.input_pose);
        let skinnings = poses
            .iter()
            .map(|p| PoseSkinning::new(input.rig, p))
            .collect::<Result<Vec<_>>>()?;
        let bind = |m: &TriMesh, l: Label| BoundMesh::new(input.rig, m.clone().with_uniform_label(l));
        Ok(TextureProblem {
            human: bind(human, Label::Human),
            object: bind(object, Label::Object),
            input_skinning: PoseSkinning::new(input.rig, input.input_pose)?,
            input,
            config,
            guidance,
            poses,
            skinnings,
            schedule: NoiseSchedule::default(),
            phase: azimuth_phase(config.schedule.seed),
        })
    }

    fn colored(&self, mesh: &TriMesh, colors: &[Vec3]) -> TriMesh {
        TriMesh {
            colors: Some(colors.to_vec()),
            ..mesh.clone()
        }
    }

    fn guidance_color_gradient(
        &self,
        view: &GuidanceView,
        colors: (&[Vec3], &[Vec3]),
    ) -> Result<(Vec<Vec3>, Vec<Vec3>, f64)> {
        let skin = &self.skinnings[view.pose];
        let pose = &self.poses[view.pose];
        let ph = self.colored(&self.human.posed(skin), colors.0);
        let mesh = match view.space {
            GuidanceSpace::Human => ph,
            GuidanceSpace::Composite => merge_meshes(&ph, &self.colored(&self.object.posed(skin), colors.1)),
        };
        let nh = colors.0.len();
        let zero = (vec![Vec3::zeros(); nh], vec![Vec3::zeros(); colors.1.len()], 0.0);
        if mesh.is_empty() {
            return Ok(zero);
        }
        let zoomed = view.zoom.apply_mesh(&mesh);
        let b = rasterize(&zoomed, &view.camera);
        let (g_pix, value) = Distiller {
            rig: self.input.rig,
            prompts: &self.config.prompts,
            guidance: self.guidance,
            schedule: &self.schedule,
        }
        .distil(view, pose, &b.rgb, true)?;
        let vg = backprop_pixels_to_vertices(
            &zoomed,
            &view.camera,
            &b,
            &PixelGrad {
                rgb: g_pix,
                ..Default::default()
            },
        )?;
        Ok(match view.space {
            GuidanceSpace::Human => (vg.color, zero.1, value),
            GuidanceSpace::Composite => (zero.0, vg.color[nh..].to_vec(), value),
        })
    }

    /// Reconstruction gradient on vertex colours from one posed-space camera, weighted.
    pub fn reconstruction_gradient(
        &self,
        colors: (&[Vec3], &[Vec3]),
        camera: &Camera,
    ) -> Result<(Vec<Vec3>, Vec<Vec3>, StepLosses)> {
        let w = &self.config.weights;
        let scan_b = render_scan_ground_truth(self.input.scan, self.input.labels, camera)?;
        let mut losses = StepLosses::default();
        let mut grads = Vec::with_capacity(2);
        for (bound, c, layer, lam) in [
            (&self.human, colors.0, Label::Human, w.rec_h_tex),
            (&self.object, colors.1, Label::Object, w.rec_o_tex),
        ] {
            let posed = self.colored(&bound.posed(&self.input_skinning), c);
            let b = rasterize(&posed, camera);
            let rec = recon_tex_loss(&b, &scan_b, layer)?;
            let mut g = backprop_pixels_to_vertices(&posed, camera, &b, &rec.grad)?.color;
            g.iter_mut().for_each(|x| *x *= lam);
            match layer {
                Label::Human => losses.rec_h = rec.value,
                Label::Object => losses.rec_o = rec.value,
            }
            losses.total += lam * rec.value;
            grads.push(g);
        }
        let go = grads.pop().unwrap();
        let gh = grads.pop().unwrap();
        Ok((gh, go, losses))
    }
}

/// The pieces of a problem that guidance distillation needs.
struct Distiller<'a> {
    rig: &'a Rig,
    prompts: &'a Prompts,
    guidance: &'a dyn GuidanceProvider,
    schedule: &'a NoiseSchedule,
}

impl Distiller<'_> {
    fn distil(&self, view: &GuidanceView, pose: &Pose, pixels: &[Vec3], rgb: bool) -> Result<(Vec<Vec3>, f64)> {
        let cam = &view.camera;
        let request = ViewRequest {
            space: view.space,
            camera: cam,
            pose,
            zoom: &view.zoom,
            channels: 3,
            rgb,
        };
        let kps = pose_keypoints_2d_zoomed(self.rig, pose, cam, &view.zoom)?;
        let cond = Condition::new(
            view.space,
            &self.prompts.gender,
            &self.prompts.object,
            ViewTag::from_azimuth(cam.azimuth),
            kps,
        )?;
        let model = self.guidance.model_for(&request)?;
        let image = crate::guidance::Image::from_vec3(cam.width, cam.height, pixels)?;
        let g = sds_pixel_gradient(&image, &cond, model.as_ref(), self.schedule, view.t, view.noise_seed)?;
        let value = sds_value(&g);
        Ok((g.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(), value))
    }
}

/// Optimizes per-vertex colours of both frozen layers. Colours start at mid grey; guidance
/// joins after `tex_sds_warmup` steps.
pub fn optimize_texture(problem: &TextureProblem<'_>, recorder: &mut Recorder) -> Result<TextureResult> {
    let sched = &problem.config.schedule;
    let w = &problem.config.weights;
    let nh = problem.human.mesh.vertices.len();
    let no = problem.object.mesh.vertices.len();
    let mut params = vec![0.5; 3 * (nh + no)];
    let mut adam = Adam::new(params.len(), sched.tex_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x7465_7874);
    let unpack = |p: &[f64]| -> (Vec<Vec3>, Vec<Vec3>) {
        let all: Vec<Vec3> = p.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        (all[..nh].to_vec(), all[nh..].to_vec())
    };
    let pose_count = problem.poses.len();
    let mut history = Vec::with_capacity(sched.tex_steps);
    for step in 0..sched.tex_steps {
        let (ch, co) = unpack(&params);
        let camera = step_camera(&mut rng, &problem.config.cameras, problem.phase, step);
        let (mut gh, mut go, mut losses) = problem.reconstruction_gradient((&ch, &co), &camera)?;
        losses.step = step;
        let pose = step % pose_count;
        let mut views = Vec::new();
        for space in [GuidanceSpace::Human, GuidanceSpace::Composite] {
            views.push(GuidanceView {
                space,
                pose,
                camera: sample_camera_with(&mut rng, &problem.config.cameras),
                zoom: Similarity::identity(),
                t: problem.schedule.sample_t(&mut rng),
                noise_seed: rng.random(),
            });
        }
        if sched.tex_zoom_views {
            let posed_o = (!problem.object.mesh.is_empty()).then(|| problem.object.posed(&problem.skinnings[pose]));
            let pool = zoom_targets(problem.input.rig, &problem.poses[pose], posed_o.as_ref())?;
            if !pool.is_empty() {
                let target = pool[step % pool.len()];
                for space in [GuidanceSpace::Human, GuidanceSpace::Composite] {
                    let zoom = zoom_transform(&target, &mut rng)?;
                    views.push(GuidanceView {
                        space,
                        pose,
                        camera: sample_camera_with(&mut rng, &problem.config.cameras),
                        zoom,
                        t: problem.schedule.sample_t(&mut rng),
                        noise_seed: rng.random(),
                    });
                }
            }
        }
        if step >= sched.tex_sds_warmup {
            let active: Vec<&GuidanceView> = views
                .iter()
                .filter(|v| match v.space {
                    GuidanceSpace::Human => w.sds_h_tex > 0.0,
                    GuidanceSpace::Composite => w.sds_o_tex > 0.0,
                })
                .collect();
            let parts = active
                .par_iter()
                .map(|v| problem.guidance_color_gradient(v, (&ch, &co)))
                .collect::<Result<Vec<_>>>()?;
            for (v, (ph, po, value)) in active.iter().zip(&parts) {
                match v.space {
                    GuidanceSpace::Human => {
                        losses.sds_h += value;
                        gh.iter_mut().zip(ph).for_each(|(a, b)| *a += b * w.sds_h_tex);
                    }
                    GuidanceSpace::Composite => {
                        losses.sds_o += value;
                        go.iter_mut().zip(po).for_each(|(a, b)| *a += b * w.sds_o_tex);
                    }
                }
            }
        }
        let grad: Vec<f64> = gh.iter().chain(&go).flat_map(|g| [g.x, g.y, g.z]).collect();
        if !losses.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            recorder.colors("last_good", &ch, &co)?;
            recorder.finish()?;
            return Err(Error::NonFinite {
                context: format!("texture losses {losses:?}"),
                step,
            });
        }
        recorder.row(&losses)?;
        history.push(losses);
        adam.step_lazy(&mut params, &grad);
        params.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        if recorder.due(step + 1) {
            let (ch, co) = unpack(&params);
            recorder.colors(&format!("{:05}", step + 1), &ch, &co)?;
        }
    }
    recorder.finish()?;
    let (human, object) = unpack(&params);
    Ok(TextureResult { human, object, history })
}

/// Means over consecutive windows of `window` values; a trailing partial window is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Whether a noisy loss curve descends: no window mean rises above the previous one by more
/// than two standard errors of their difference, and the last window ends below the first.
pub fn smoothed_descent(values: &[f64], window: usize) -> bool {
    if window < 2 || values.len() < 2 * window {
        return false;
    }
    let means = window_means(values, window);
    let sq_err: Vec<f64> = means
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let chunk = &values[k * window..(k + 1) * window];
            chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ((window - 1) * window) as f64
        })
        .collect();
    let steady = (1..means.len()).all(|k| means[k] <= means[k - 1] + 2.0 * (sq_err[k] + sq_err[k - 1]).sqrt());
    steady && means[means.len() - 1] < means[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::MockGuidance;
    use crate::synthetic::{icosphere, sphere_rig};
    use crate::tetgrid::{build_regular_grid, marching_tetrahedra};

    fn buffers(n: usize) -> RenderBuffers {
        RenderBuffers::empty(n, 1)
    }

    #[test]
    fn recon_zero_on_identical_masked_renders() {
        let mut scan = buffers(3);
        scan.mask = vec![1, 1, 0];
        scan.seg_h = vec![1, 0, 0];
        scan.seg_o = vec![0, 1, 0];
        scan.normal = vec![Vec3::z(), Vec3::x(), Vec3::zeros()];
        let mut h = buffers(3);
        h.mask = vec![1, 0, 0];
        h.normal[0] = Vec3::z();
        assert_eq!(recon_geo_loss(&h, &scan, Label::Human).unwrap().value, 0.0);
        let mut o = buffers(3);
        o.mask = vec![0, 1, 0];
        o.normal[1] = Vec3::x();
        assert_eq!(recon_geo_loss(&o, &scan, Label::Object).unwrap().value, 0.0);
        o.mask[2] = 1;
        assert!(recon_geo_loss(&o, &scan, Label::Object).unwrap().value > 0.0);
    }

    #[test]
    fn recon_two_pixel_hand_value() {
        let mut scan = buffers(2);
        scan.mask = vec![1, 1];
        scan.seg_h = vec![1, 0];
        scan.seg_o = vec![0, 1];
        scan.normal = vec![Vec3::z(), Vec3::z()];
        let mut p = buffers(2);
        p.mask = vec![1, 1];
        p.normal = vec![Vec3::x(), Vec3::y()];
        // Human: only pixel 0 counts, |x - z|^2 = 2.
        let h = recon_geo_loss(&p, &scan, Label::Human).unwrap();
        assert!((h.value - 2.0).abs() < 1e-12);
        assert_eq!(h.grad.normal[0], (Vec3::x() - Vec3::z()) * 2.0);
        assert_eq!(h.grad.normal[1], Vec3::zeros());
        // Object: pixel 1 normal term 2, mask term (1 - 0)^2 at pixel 0.
        let o = recon_geo_loss(&p, &scan, Label::Object).unwrap();
        assert!((o.value - 3.0).abs() < 1e-12);
        assert_eq!(o.grad.mask, vec![2.0, 0.0]);
    }

    #[test]
    fn recon_rejects_mismatched_dims() {
        assert!(recon_geo_loss(&buffers(2), &buffers(3), Label::Human).is_err());
        assert!(seg_comp_loss(&buffers(2), &buffers(3)).is_err());
    }

    #[test]
    fn seg_loss_counts_penetration_twice() {
        let k = 5;
        let mut scan = buffers(8);
        scan.seg_o = vec![1; 8];
        let mut joint = buffers(8);
        joint.seg_o = vec![1; 8];
        assert_eq!(seg_comp_loss(&joint, &scan).unwrap().value, 0.0);
        for i in 0..k {
            joint.seg_o[i] = 0;
            joint.seg_h[i] = 1;
        }
        assert!(seg_comp_loss(&joint, &scan).unwrap().value >= 2.0 * k as f64);
    }

    #[test]
    fn seg_with_empty_object_is_human_mask_error() {
        let mut scan = buffers(4);
        scan.mask = vec![1, 1, 0, 0];
        scan.seg_h = vec![1, 1, 0, 0];
        let mut joint = buffers(4);
        joint.seg_h = vec![1, 0, 1, 0];
        let l = seg_comp_loss(&joint, &scan).unwrap();
        let direct: f64 = (0..4)
            .map(|i| (joint.seg_h[i] as f64 - scan.mask[i] as f64).powi(2))
            .sum();
        assert_eq!(l.value, direct);
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let w = LossWeights {
            seg_comp: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            rec_h_geo: f64::NAN,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let s = OptimSchedule {
            geo_lr: 0.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn init_zero_steps_is_identity() {
        let grid = build_regular_grid(4).unwrap();
        let f = ImplicitField::constant(&grid, 0.3);
        let (g, h) = init_field(&grid, &f, &icosphere(0.5, 1), 0, 0.01, 100, 0).unwrap();
        assert_eq!(g, f);
        assert!(h.is_empty());
        assert!(init_field(&grid, &f, &TriMesh::default(), 10, 0.01, 100, 0).is_err());
    }

    #[test]
    fn init_fits_template() {
        let grid = build_regular_grid(12).unwrap();
        let f = ImplicitField::constant(&grid, 1.0);
        let template = icosphere(0.5, 3);
        let (g, hist) = init_field(&grid, &f, &template, 300, 0.01, 4000, 1).unwrap();
        assert!(hist.last().unwrap() < &(0.01 * hist[0]));
        let m = marching_tetrahedra(&grid, &g).unwrap();
        let r: f64 = m.vertices.iter().map(|v| v.norm()).sum::<f64>() / m.vertices.len() as f64;
        assert!((r - 0.5).abs() < 0.5 * grid.cell_size(), "{r}");
    }

    #[test]
    fn smoothed_descent_tolerates_noise() {
        let noisy: Vec<f64> = (0..400)
            .map(|i| 100.0 / (1.0 + i as f64) + if i % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        assert!(smoothed_descent(&noisy, 50));
        let rising: Vec<f64> = (0..400).map(|i| i as f64).collect();
        assert!(!smoothed_descent(&rising, 50));
        let mut bump = noisy.clone();
        for v in &mut bump[200..250] {
            *v += 10.0;
        }
        assert!(!smoothed_descent(&bump, 50));
        assert!(!smoothed_descent(&noisy[..60], 50));
    }

    #[test]
    fn window_means_drop_partial() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
        assert!(window_means(&[1.0], 0).is_empty());
    }

    #[test]
    fn zoom_targets_follow_openpose_map() {
        let rig = sphere_rig();
        let pose = Pose::zero(&rig);
        let t = zoom_targets(&rig, &pose, None).unwrap();
        assert!(t.iter().any(|z| matches!(
            z,
            ZoomTarget::Joint {
                part: ZoomPart::Face,
                ..
            }
        )));
        let obj = icosphere(0.2, 1);
        let t2 = zoom_targets(&rig, &pose, Some(&obj)).unwrap();
        assert_eq!(t2.len(), t.len() + 1);
    }

    #[test]
    fn composite_guidance_leaves_human_field_untouched() {
        let rig = sphere_rig();
        let grid = build_regular_grid(8).unwrap();
        let fh = ImplicitField::from_fn(&grid, |p| p.norm() - 0.5);
        let fo = ImplicitField::from_fn(&grid, |p| (p.norm() - 0.6).max(p.y.abs() - 0.2));
        let scan = icosphere(0.6, 2).with_uniform_label(Label::Human);
        let labels = scan.labels.clone().unwrap();
        let pose = Pose::zero(&rig);
        let cfg = DecomposeConfig {
            cameras: CameraSampling {
                width: 24,
                height: 24,
                ..Default::default()
            },
            ..Default::default()
        };
        let target = crate::guidance::Image::zeros(24, 24, 3);
        let guidance = MockGuidance::new(target, NoiseSchedule::default());
        let input = ScanInput {
            scan: &scan,
            labels: &labels,
            rig: &rig,
            input_pose: &pose,
        };
        let problem = GeometryProblem::new(input, &grid, &cfg, &guidance).unwrap();
        let lh = LayerSurface::extract(&grid, &fh, &rig, Label::Human).unwrap();
        let lo = LayerSurface::extract(&grid, &fo, &rig, Label::Object).unwrap();
        let view = GuidanceView {
            space: GuidanceSpace::Composite,
            pose: 0,
            camera: Camera::new(3.0, 0.1, 0.4, 0.6, 24, 24).unwrap(),
            zoom: Similarity::identity(),
            t: 500,
            noise_seed: 3,
        };
        let g = problem.guidance_gradient((&fh, &fo), (&lh, &lo), &view).unwrap();
        assert!(g.human.sdf.iter().all(|&x| x == 0.0));
        assert!(g.human.offset.iter().all(|x| *x == Vec3::zeros()));
        assert!(g.object.sdf.iter().any(|&x| x != 0.0));
        let human_view = GuidanceView {
            space: GuidanceSpace::Human,
            ..view
        };
        let g = problem.guidance_gradient((&fh, &fo), (&lh, &lo), &human_view).unwrap();
        assert!(g.human.sdf.iter().any(|&x| x != 0.0));
        assert!(g.object.sdf.iter().all(|&x| x == 0.0));
    }
}
