use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layercut::compose::{refine_composition, transfer, visibility_cameras};
use layercut::config::{GuidanceKind, RunConfig};
use layercut::decompose::ScanInput;
use layercut::io::{read_labels, read_mesh, read_png_gray, write_labels, write_mesh};
use layercut::metrics::{chamfer, por_score, voxel_iou};
use layercut::pipeline::{
    build_guidance, complete_texture, decompose_scan, demo_config, demo_synthetic, lift_cameras, masks_from_labels,
};
use layercut::raster::{export_buffers, rasterize, Camera};
use layercut::rig::{lbs_forward, load_pose, load_rig};
use layercut::seglift::{lift_segmentation, load_view_manifest, save_view_manifest};
use layercut::tetgrid::build_regular_grid;
use layercut::{Error, Label, Result, TriMesh};

#[derive(Parser)]
#[command(
    name = "layercut",
    version,
    about = "Split a posed single-layer human scan into human and object layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Directory for every output, the resolved config and the seed.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceArg {
    Mock,
    Remote,
}

#[derive(Args, Clone)]
struct GuidanceArgs {
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    #[arg(long)]
    guidance_url: Option<String>,
    #[arg(long)]
    guidance_timeout_ms: Option<u64>,
}

#[derive(Args, Clone)]
struct ScanArgs {
    /// Posed scan (OBJ or PLY).
    #[arg(long)]
    scan: PathBuf,
    /// Face labels; the scan's own labels are used when omitted.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    rig: PathBuf,
    /// Pose the scan was captured in.
    #[arg(long)]
    pose: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Vote multi-view object masks onto scan faces.
    Lift {
        #[arg(long)]
        scan: PathBuf,
        /// Manifest of cameras and mask images.
        #[arg(long)]
        views: PathBuf,
        /// Label file, one label per face.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_votes: Option<u32>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recover canonical human and object geometry.
    Decompose {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        resolution: Option<u32>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Colour canonical layers from the scan and guidance.
    Texture {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        object: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Put an object layer on a canonical human and pose the pair.
    Compose {
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        /// Push the human under the object before posing.
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        lambda_dis: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Push a human layer under an object layer.
    Refine {
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        lambda_dis: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Chamfer distance and IoU against a reference, plus POR from mask folders.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Target-object masks of the input renders, `mask_<i>.png` per evaluation camera.
        #[arg(long, requires = "por_edited")]
        por_input: Option<PathBuf>,
        /// Target-object masks of the edited renders, same layout.
        #[arg(long, requires = "por_input")]
        por_edited: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a ring of views of a mesh: mask, normals, segmentation, colour.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        /// Pose the mesh with this rig and pose first.
        #[arg(long, requires = "pose")]
        rig: Option<PathBuf>,
        #[arg(long, requires = "rig")]
        pose: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Also write object masks and a lift manifest from the mesh's face labels.
        #[arg(long)]
        manifest: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Whole pipeline on the built-in synthetic scene, with threshold checks.
    DemoSynthetic {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Report the thresholds without failing on them.
        #[arg(long)]
        skip_checks: bool,
    },
}

fn configure(base: &RunConfig, common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_over(base, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.schedule.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn apply_guidance(cfg: &mut RunConfig, g: &GuidanceArgs) {
    if let Some(kind) = g.guidance {
        cfg.guidance.kind = Some(match kind {
            GuidanceArg::Mock => GuidanceKind::Mock,
            GuidanceArg::Remote => GuidanceKind::Remote,
        });
    }
    if let Some(u) = &g.guidance_url {
        cfg.guidance.url = Some(u.clone());
    }
    if let Some(t) = g.guidance_timeout_ms {
        cfg.guidance.timeout_ms = t;
    }
}

/// Refuses to write any output over one of the inputs.
fn guard(inputs: &[&Path], outputs: &[PathBuf]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    for o in outputs {
        let Some(co) = canon(o) else { continue };
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&co)) {
            return Err(Error::Config(format!(
                "output {} would overwrite an input",
                o.display()
            )));
        }
    }
    Ok(())
}

fn scan_labels(scan: &TriMesh, labels: Option<&Path>) -> Result<Vec<Label>> {
    match labels {
        Some(p) => read_labels(p),
        None => scan
            .labels
            .clone()
            .ok_or_else(|| Error::Config("the scan has no face labels; pass --labels".into())),
    }
}

fn write_csv(path: &Path, rows: &[(String, f64)], hash: &str) -> Result<String> {
    let mut text = String::from("metric,value,config_hash\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{v},{hash}\n"));
    }
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(text)
}

fn read_masks(dir: &Path, cameras: &[Camera]) -> Result<Vec<(Camera, Vec<u8>)>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let img = read_png_gray(&dir.join(format!("mask_{i:03}.png")))?;
            if img.width != c.width || img.height != c.height {
                return Err(Error::DimensionMismatch(format!(
                    "mask {i} in {} is {}x{}, expected {}x{}",
                    dir.display(),
                    img.width,
                    img.height,
                    c.width,
                    c.height
                )));
            }
            Ok((*c, img.data.iter().map(|&v| u8::from(v > 0.5)).collect()))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Lift {
            scan,
            views,
            out,
            min_votes,
            config,
        } => {
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let dir = if dir.as_os_str().is_empty() {
                PathBuf::from(".")
            } else {
                dir
            };
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(v) = min_votes {
                cfg.lift.min_votes = v;
            }
            cfg.validate()?;
            guard(&[&scan, &views], &[out.clone(), dir.join("config.toml")])?;
            cfg.write_snapshot(&dir)?;
            let mesh = read_mesh(&scan)?;
            let masks = load_view_manifest(&views)?;
            let labels = lift_segmentation(&mesh, &masks, cfg.lift.min_votes)?;
            write_labels(&out, &labels)?;
            let objects = labels.iter().filter(|&&l| l == Label::Object).count();
            log::info!("{objects} of {} faces labeled object", labels.len());
        }
        Command::Decompose {
            scan,
            resolution,
            common,
            guidance,
        } => {
            let mut cfg = configure(&RunConfig::default(), &common)?;
            apply_guidance(&mut cfg, &guidance);
            if let Some(r) = resolution {
                cfg.grid_resolution = r;
            }
            cfg.validate()?;
            cfg.guidance.resolve()?;
            let out = &common.out_dir;
            let names = ["canonical_human.ply", "canonical_object.ply", "config.toml"].map(|n| out.join(n));
            guard(&[&scan.scan, &scan.rig, &scan.pose], &names)?;
            cfg.write_snapshot(out)?;
            let mesh = read_mesh(&scan.scan)?;
            let labels = scan_labels(&mesh, scan.labels.as_deref())?;
            let rig = load_rig(&scan.rig)?;
            let pose = load_pose(&scan.pose)?;
            let provider = build_guidance(&cfg, &rig)?;
            let grid = build_regular_grid(cfg.grid_resolution)?;
            let input = ScanInput {
                scan: &mesh,
                labels: &labels,
                rig: &rig,
                input_pose: &pose,
            };
            let d = decompose_scan(input, &grid, &cfg.decompose(), provider.as_ref(), Some(out))?;
            write_mesh(&names[0], &d.human)?;
            write_mesh(&names[1], &d.object)?;
        }
        Command::Texture {
            scan,
            human,
            object,
            common,
            guidance,
        } => {
            let mut cfg = configure(&RunConfig::default(), &common)?;
            apply_guidance(&mut cfg, &guidance);
            cfg.validate()?;
            cfg.guidance.resolve()?;
            let out = &common.out_dir;
            let names = ["textured_human.ply", "textured_object.ply", "config.toml"].map(|n| out.join(n));
            guard(&[&scan.scan, &scan.rig, &scan.pose, &human, &object], &names)?;
            cfg.write_snapshot(out)?;
            let mesh = read_mesh(&scan.scan)?;
            let labels = scan_labels(&mesh, scan.labels.as_deref())?;
            let rig = load_rig(&scan.rig)?;
            let pose = load_pose(&scan.pose)?;
            let provider = build_guidance(&cfg, &rig)?;
            let input = ScanInput {
                scan: &mesh,
                labels: &labels,
                rig: &rig,
                input_pose: &pose,
            };
            let (h, o, _) = complete_texture(
                input,
                &read_mesh(&human)?,
                &read_mesh(&object)?,
                &cfg.decompose(),
                provider.as_ref(),
                Some(out),
            )?;
            write_mesh(&names[0], &h)?;
            write_mesh(&names[1], &o)?;
        }
        Command::Compose {
            object,
            human,
            rig,
            pose,
            refine,
            lambda_dis,
            common,
        } => {
            let mut cfg = configure(&RunConfig::default(), &common)?;
            if let Some(l) = lambda_dis {
                cfg.refine.lambda_dis = l;
            }
            cfg.validate()?;
            let out = common.out_dir.join("composite.ply");
            guard(&[&object, &human, &rig, &pose], &[out.clone()])?;
            cfg.write_snapshot(&common.out_dir)?;
            let rig = load_rig(&rig)?;
            let pose = load_pose(&pose)?;
            let o = read_mesh(&object)?.with_uniform_label(Label::Object);
            let h = read_mesh(&human)?.with_uniform_label(Label::Human);
            let posed = transfer(&o, &h, &rig, &pose, refine.then_some(&cfg.refine))?;
            write_mesh(&out, &posed)?;
        }
        Command::Refine {
            human,
            object,
            lambda_dis,
            common,
        } => {
            let mut cfg = configure(&RunConfig::default(), &common)?;
            if let Some(l) = lambda_dis {
                cfg.refine.lambda_dis = l;
            }
            cfg.validate()?;
            let out = common.out_dir.join("refined_human.ply");
            guard(&[&human, &object], &[out.clone()])?;
            cfg.write_snapshot(&common.out_dir)?;
            let h = read_mesh(&human)?;
            let o = read_mesh(&object)?;
            let r = refine_composition(&h, &o, &cfg.refine, &visibility_cameras(cfg.refine.camera_size)?)?;
            write_mesh(&out, &r.mesh)?;
            let mut csv = String::from("step,penetrating\n");
            for (i, p) in r.penetrations.iter().enumerate() {
                csv.push_str(&format!("{i},{p}\n"));
            }
            let path = common.out_dir.join("refine_penetrations.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            log::info!(
                "penetrating vertices {} -> {}",
                r.penetrations.first().unwrap_or(&0),
                r.penetrations.last().unwrap_or(&0)
            );
        }
        Command::Eval {
            pred,
            gt,
            por_input,
            por_edited,
            common,
        } => {
            let cfg = configure(&RunConfig::default(), &common)?;
            cfg.validate()?;
            let path = common.out_dir.join("metrics.csv");
            guard(&[&pred, &gt], &[path.clone()])?;
            cfg.write_snapshot(&common.out_dir)?;
            let e = &cfg.eval;
            let a = read_mesh(&pred)?;
            let b = read_mesh(&gt)?;
            let cd = chamfer(&a, &b, e.chamfer_samples, e.seed)?;
            let mut rows = vec![
                ("chamfer".to_string(), cd),
                ("chamfer_cm".to_string(), cd * e.cm_per_unit),
                ("iou".to_string(), voxel_iou(&a, &b, e.iou_resolution)?),
            ];
            if let (Some(i), Some(o)) = (por_input, por_edited) {
                let cams = Camera::ring(e.views, 3.0, std::f64::consts::PI / 4.0, e.view_size, e.view_size)?;
                rows.push((
                    "por".to_string(),
                    por_score(&read_masks(&i, &cams)?, &read_masks(&o, &cams)?)?,
                ));
            }
            print!("{}", write_csv(&path, &rows, &cfg.hash()?)?);
        }
        Command::Render {
            mesh,
            rig,
            pose,
            views,
            size,
            manifest,
            common,
        } => {
            let cfg = configure(&RunConfig::default(), &common)?;
            cfg.validate()?;
            guard(&[&mesh], &[common.out_dir.join("config.toml")])?;
            cfg.write_snapshot(&common.out_dir)?;
            let mut m = read_mesh(&mesh)?;
            if let (Some(r), Some(p)) = (rig, pose) {
                m = lbs_forward(&m, &load_rig(&r)?, &load_pose(&p)?)?;
            }
            let cams = lift_cameras(views, size)?;
            for (i, c) in cams.iter().enumerate() {
                export_buffers(&common.out_dir, &format!("view_{i:03}"), &rasterize(&m, c))?;
            }
            if manifest {
                let labels = m
                    .labels
                    .clone()
                    .ok_or_else(|| Error::Config("--manifest needs a mesh with face labels".into()))?;
                save_view_manifest(&common.out_dir.join("masks"), &masks_from_labels(&m, &labels, &cams)?)?;
            }
        }
        Command::DemoSynthetic {
            common,
            guidance,
            skip_checks,
        } => {
            let mut cfg = configure(&demo_config(), &common)?;
            apply_guidance(&mut cfg, &guidance);
            let report = demo_synthetic(&cfg, &common.out_dir)?;
            for c in &report.checks {
                println!(
                    "{} {}: {} (limit {})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.limit
                );
            }
            if !report.passed() && !skip_checks {
                return Err(Error::InvalidArgument("synthetic demo missed its thresholds".into()));
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LAYERCUT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LAYERCUT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
