//! Whole-stage runs shared by the command line and the C interface.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Duration;

use crate::compose::{refine_composition, transfer, visibility_cameras};
use crate::config::{GuidanceKind, RunConfig};
use crate::decompose::{
    optimize_geometry, optimize_texture, smoothed_descent, template_fields, DecomposeConfig, GeometryProblem, Recorder,
    ScanInput, StepLosses, TextureProblem,
};
use crate::error::{Error, Result};
use crate::guidance::{remote_guidance, ConstantGuidance, GuidanceProvider, ReferenceGuidance};
use crate::io::{read_mesh, write_labels, write_mesh};
use crate::mesh::{merge_meshes, Label, TriMesh, Vec3};
use crate::metrics::{chamfer, voxel_iou};
use crate::raster::Camera;
use crate::rig::{save_pose, save_rig, Rig};
use crate::seglift::{lift_segmentation, partition_mesh, render_scan_ground_truth, ViewMask};
use crate::synthetic::SphereBandScene;
use crate::tetgrid::{build_regular_grid, marching_tetrahedra, save_checkpoint, ImplicitField, TetGrid};

/// Provider named by the guidance section.
pub fn build_guidance(cfg: &RunConfig, rig: &Rig) -> Result<Box<dyn GuidanceProvider>> {
    let g = &cfg.guidance;
    g.validate()?;
    Ok(match g.resolve()? {
        GuidanceKind::Mock => match (&g.reference_human, &g.reference_object) {
            (Some(h), Some(o)) => Box::new(ReferenceGuidance::new(rig.clone(), read_mesh(h)?, read_mesh(o)?)),
            _ => Box::new(ConstantGuidance::new(Vec3::from(g.flat_value))),
        },
        GuidanceKind::Remote => Box::new(remote_guidance(
            g.url.as_deref().unwrap_or_default(),
            Duration::from_millis(g.timeout_ms),
        )),
    })
}

/// Canonical layers out of the geometry stage.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub human_field: ImplicitField,
    pub object_field: ImplicitField,
    pub human: TriMesh,
    pub object: TriMesh,
    pub init_history: Vec<f64>,
    pub history: Vec<StepLosses>,
}

/// Template fit followed by the geometry stage. With `out`, per-step losses, periodic
/// checkpoints and the final fields land there.
pub fn decompose_scan(
    input: ScanInput<'_>,
    grid: &TetGrid,
    cfg: &DecomposeConfig,
    guidance: &dyn GuidanceProvider,
    out: Option<&Path>,
) -> Result<Decomposition> {
    let problem = GeometryProblem::new(input, grid, cfg, guidance)?;
    let (init, init_history) = template_fields(grid, input.rig, &cfg.schedule)?;
    let mut rec = Recorder::new(out, "geometry", cfg.schedule.checkpoint_every)?;
    let r = optimize_geometry(&problem, init.clone(), init, &mut rec)?;
    let human = marching_tetrahedra(grid, &r.human)?.with_uniform_label(Label::Human);
    let object = marching_tetrahedra(grid, &r.object)?.with_uniform_label(Label::Object);
    if let Some(dir) = out {
        save_checkpoint(&dir.join("human.lctg"), grid, &r.human)?;
        save_checkpoint(&dir.join("object.lctg"), grid, &r.object)?;
    }
    Ok(Decomposition {
        human_field: r.human,
        object_field: r.object,
        human,
        object,
        init_history,
        history: r.history,
    })
}

/// Colour stage on frozen layers; returns both layers with their colours attached.
pub fn complete_texture(
    input: ScanInput<'_>,
    human: &TriMesh,
    object: &TriMesh,
    cfg: &DecomposeConfig,
    guidance: &dyn GuidanceProvider,
    out: Option<&Path>,
) -> Result<(TriMesh, TriMesh, Vec<StepLosses>)> {
    let problem = TextureProblem::new(input, human, object, cfg, guidance)?;
    let mut rec = Recorder::new(out, "texture", cfg.schedule.checkpoint_every)?;
    let r = optimize_texture(&problem, &mut rec)?;
    let h = human.clone().with_uniform_label(Label::Human).with_colors(r.human)?;
    let o = object.clone().with_uniform_label(Label::Object).with_colors(r.object)?;
    Ok((h, o, r.history))
}

/// Cameras for synthesized masks: a ring cycling through zero elevation and 30 degrees above
/// and below.
pub fn lift_cameras(count: usize, size: usize) -> Result<Vec<Camera>> {
    let tilts = [0.0, PI / 6.0, -PI / 6.0];
    (0..count)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / count as f64;
            Camera::new(3.0, tilts[i % 3], az, PI / 4.0, size, size)
        })
        .collect()
}

/// Exact object masks of a labeled scan from each camera.
pub fn masks_from_labels(scan: &TriMesh, labels: &[Label], cameras: &[Camera]) -> Result<Vec<ViewMask>> {
    cameras
        .iter()
        .map(|c| {
            let b = render_scan_ground_truth(scan, labels, c)?;
            ViewMask::new(*c, b.seg_o.iter().map(|&v| u8::from(v > 0)).collect())
        })
        .collect()
}

/// One named value written to the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// A threshold the demo is expected to meet.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct DemoReport {
    pub metrics: Vec<Metric>,
    pub checks: Vec<Check>,
    pub config_hash: String,
}

impl DemoReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Scan resolution of the synthetic demo.
pub const DEMO_SCAN_RESOLUTION: u32 = 48;

/// The configuration the synthetic demo starts from before a user file or flags.
pub fn demo_config() -> RunConfig {
    let scene = SphereBandScene::new();
    let mut cfg = RunConfig {
        grid_resolution: 32,
        ..RunConfig::default()
    };
    cfg.guidance.kind = Some(GuidanceKind::Mock);
    cfg.schedule.pose_set = scene.pose_set.clone();
    cfg.lift.views = 20;
    cfg.eval.chamfer_samples = 20_000;
    cfg.eval.iou_resolution = 64;
    cfg.refine.camera_size = 128;
    cfg
}

fn metric(name: &str, value: f64) -> Metric {
    Metric {
        name: name.into(),
        value,
    }
}

fn write_metrics_csv(path: &Path, metrics: &[Metric], hash: &str) -> Result<()> {
    let mut text = String::from("metric,value,config_hash\n");
    for m in metrics {
        text.push_str(&format!("{},{},{hash}\n", m.name, m.value));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_losses(path: &Path, history: &[StepLosses]) -> Result<()> {
    let mut text = format!("{}\n", StepLosses::CSV_HEADER);
    for l in history {
        text.push_str(&l.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full pipeline on the sphere-and-band scene: label lifting from exact masks, geometry and
/// colour stages against the ground-truth layers, refinement, transfer to a new pose and
/// evaluation. Everything is written under `out_dir`.
///
/// The guidance section of `cfg` is ignored unless it selects remote guidance; the mock
/// otherwise renders the scene's own canonical layers.
pub fn demo_synthetic(cfg: &RunConfig, out_dir: &Path) -> Result<DemoReport> {
    cfg.validate()?;
    cfg.write_snapshot(out_dir)?;
    let hash = cfg.hash()?;
    let scene = SphereBandScene::new();
    let rig = &scene.rig;

    let scan = scene.scan(DEMO_SCAN_RESOLUTION);
    let truth = scan
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidArgument("scene scan is unlabeled".into()))?;
    let mut unlabeled = scan.clone();
    unlabeled.labels = None;
    write_mesh(&out_dir.join("scan.ply"), &unlabeled)?;
    save_rig(rig, out_dir, "rig")?;
    save_pose(&out_dir.join("input_pose.toml"), &scene.input_pose)?;

    log::info!("lifting labels from {} views", cfg.lift.views);
    let cams = lift_cameras(cfg.lift.views, cfg.lift.view_size)?;
    let views = masks_from_labels(&scan, &truth, &cams)?;
    let labels = lift_segmentation(&unlabeled, &views, cfg.lift.min_votes)?;
    write_labels(&out_dir.join("labels.txt"), &labels)?;
    let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
    let label_accuracy = agree as f64 / truth.len() as f64;
    let (scan_h, scan_o) = partition_mesh(&unlabeled, &labels)?;
    write_mesh(&out_dir.join("scan_human.ply"), &scan_h)?;
    write_mesh(&out_dir.join("scan_object.ply"), &scan_o)?;

    let guidance: Box<dyn GuidanceProvider> = match cfg.guidance.resolve() {
        Ok(GuidanceKind::Remote) => build_guidance(cfg, rig)?,
        _ => Box::new(ReferenceGuidance::new(
            rig.clone(),
            scene.human.clone(),
            scene.object.clone(),
        )),
    };
    let input = ScanInput {
        scan: &unlabeled,
        labels: &labels,
        rig,
        input_pose: &scene.input_pose,
    };
    let dcfg = cfg.decompose();
    let grid = build_regular_grid(cfg.grid_resolution)?;
    log::info!("geometry stage at resolution {}", cfg.grid_resolution);
    let d = decompose_scan(input, &grid, &dcfg, guidance.as_ref(), Some(out_dir))?;
    if d.human.is_empty() || d.object.is_empty() {
        return Err(Error::EmptyMesh);
    }
    write_mesh(&out_dir.join("canonical_human.ply"), &d.human)?;
    write_mesh(&out_dir.join("canonical_object.ply"), &d.object)?;

    log::info!("colour stage");
    let (human, object, tex_history) =
        complete_texture(input, &d.human, &d.object, &dcfg, guidance.as_ref(), Some(out_dir))?;
    write_mesh(&out_dir.join("textured_human.ply"), &human)?;
    write_mesh(&out_dir.join("textured_object.ply"), &object)?;

    log::info!("refinement and transfer");
    let refined = refine_composition(
        &human,
        &object,
        &cfg.refine,
        &visibility_cameras(cfg.refine.camera_size)?,
    )?;
    write_mesh(&out_dir.join("refined_human.ply"), &refined.mesh)?;
    let target_pose = scene.pose_set.last().unwrap_or(&scene.input_pose);
    let posed = transfer(&object, &human, rig, target_pose, Some(&cfg.refine))?;
    write_mesh(&out_dir.join("composite_posed.ply"), &posed)?;

    let e = &cfg.eval;
    let composite = merge_meshes(&d.human, &d.object);
    let truth_composite = scene.canonical_composite();
    let cd = chamfer(&composite, &truth_composite, e.chamfer_samples, e.seed)?;
    let iou_h = voxel_iou(&d.human, &scene.human, e.iou_resolution)?;
    let iou_o = voxel_iou(&d.object, &scene.object, e.iou_resolution)?;
    let first = d.history.first().map_or(f64::NAN, |l| l.total);
    let last = d.history.last().map_or(f64::NAN, |l| l.total);
    let totals: Vec<f64> = d.history.iter().map(|l| l.total).collect();
    let penetrating = *refined.penetrations.last().unwrap_or(&0) as f64;
    let metrics = vec![
        metric("label_accuracy", label_accuracy),
        metric("chamfer", cd),
        metric("chamfer_cm", cd * e.cm_per_unit),
        metric("iou_human", iou_h),
        metric("iou_object", iou_o),
        metric("geometry_loss_first", first),
        metric("geometry_loss_last", last),
        metric("texture_loss_last", tex_history.last().map_or(f64::NAN, |l| l.total)),
        metric(
            "penetrating_before_refine",
            refined.penetrations.first().map_or(0.0, |&p| p as f64),
        ),
        metric("penetrating_after_refine", penetrating),
        metric("human_vertices", d.human.vertices.len() as f64),
        metric("object_vertices", d.object.vertices.len() as f64),
    ];
    write_metrics_csv(&out_dir.join("metrics.csv"), &metrics, &hash)?;
    write_losses(&out_dir.join("geometry_losses.csv"), &d.history)?;

    let cell = grid.cell_size();
    let check = |name: &str, value: f64, limit: f64, passed: bool| Check {
        name: name.into(),
        value,
        limit,
        passed,
    };
    let checks = vec![
        check("label_accuracy", label_accuracy, 0.99, label_accuracy >= 0.99),
        check("chamfer_cells", cd / cell, 3.0, cd < 3.0 * cell),
        check("loss_descent", last, first, smoothed_descent(&totals, 50)),
        check("penetrating_after_refine", penetrating, 0.0, penetrating == 0.0),
    ];
    Ok(DemoReport {
        metrics,
        checks,
        config_hash: hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GuidanceConfig;
    use crate::synthetic::{icosphere, two_hemisphere_scan};

    #[test]
    fn guidance_from_config() {
        let rig = crate::synthetic::sphere_rig();
        let mut cfg = RunConfig::default();
        assert!(matches!(build_guidance(&cfg, &rig), Err(Error::Config(_))));
        cfg.guidance = GuidanceConfig {
            kind: Some(GuidanceKind::Mock),
            ..Default::default()
        };
        assert!(build_guidance(&cfg, &rig).is_ok());
        cfg.guidance.reference_human = Some("/nonexistent/h.obj".into());
        cfg.guidance.reference_object = Some("/nonexistent/o.obj".into());
        assert!(matches!(build_guidance(&cfg, &rig), Err(Error::Io { .. })));
    }

    #[test]
    fn synthesized_masks_lift_exactly() {
        let scan = two_hemisphere_scan(0.5, 3);
        let truth = scan.labels.clone().unwrap();
        let cams = lift_cameras(12, 96).unwrap();
        let views = masks_from_labels(&scan, &truth, &cams).unwrap();
        let labels = lift_segmentation(&scan, &views, 3).unwrap();
        let ok = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(ok as f64 >= 0.99 * truth.len() as f64);
    }

    #[test]
    fn lift_cameras_alternate_elevation() {
        let c = lift_cameras(6, 32).unwrap();
        assert_eq!(c.len(), 6);
        assert_ne!(c[0].elevation, c[1].elevation);
        assert_eq!(c[0].elevation, c[3].elevation);
        let s = icosphere(0.5, 1);
        assert!(masks_from_labels(&s, &[], &c).is_err());
    }
}
