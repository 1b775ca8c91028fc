//! Run configuration: one TOML file, CLI overrides on top, a resolved snapshot and its hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::RefineOptions;
use crate::decompose::{DecomposeConfig, LossWeights, OptimSchedule, Prompts};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_CHAMFER_SAMPLES, DEFAULT_IOU_RESOLUTION};
use crate::raster::CameraSampling;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Mock,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub kind: Option<GuidanceKind>,
    pub url: Option<String>,
    pub timeout_ms: u64,
    /// Canonical reference layers the mock renders as its target. Without them the mock
    /// targets a flat image of `flat_value`.
    pub reference_human: Option<PathBuf>,
    pub reference_object: Option<PathBuf>,
    pub flat_value: [f64; 3],
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            kind: None,
            url: None,
            timeout_ms: 30_000,
            reference_human: None,
            reference_object: None,
            flat_value: [0.5; 3],
        }
    }
}

impl GuidanceConfig {
    /// The provider to build: an explicit kind wins, a bare URL means remote.
    pub fn resolve(&self) -> Result<GuidanceKind> {
        match (self.kind, self.url.as_deref()) {
            (Some(GuidanceKind::Mock), _) => Ok(GuidanceKind::Mock),
            (Some(GuidanceKind::Remote), Some(u)) if !u.trim().is_empty() => Ok(GuidanceKind::Remote),
            (Some(GuidanceKind::Remote), _) => Err(Error::Config("remote guidance needs a guidance url".into())),
            (None, Some(u)) if !u.trim().is_empty() => Ok(GuidanceKind::Remote),
            (None, _) => Err(Error::Config(
                "no guidance selected: pass --guidance mock or a --guidance-url".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference_human.is_some() != self.reference_object.is_some() {
            return Err(Error::Config(
                "mock references need both a human and an object mesh".into(),
            ));
        }
        if self.flat_value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mock flat value must be finite".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("guidance timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    pub min_votes: u32,
    /// Views rendered when masks are synthesized from known labels.
    pub views: usize,
    pub view_size: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            min_votes: 3,
            views: 30,
            view_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub chamfer_samples: usize,
    pub iou_resolution: usize,
    /// Centimetres per canonical unit.
    pub cm_per_unit: f64,
    pub views: usize,
    pub view_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chamfer_samples: DEFAULT_CHAMFER_SAMPLES,
            iou_resolution: DEFAULT_IOU_RESOLUTION,
            cm_per_unit: 100.0,
            views: 30,
            view_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid_resolution: u32,
    pub weights: LossWeights,
    pub schedule: OptimSchedule,
    pub cameras: CameraSampling,
    pub prompts: Prompts,
    pub guidance: GuidanceConfig,
    pub lift: LiftConfig,
    pub refine: RefineOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_resolution: 64,
            weights: LossWeights::default(),
            schedule: OptimSchedule::default(),
            cameras: CameraSampling::default(),
            prompts: Prompts::default(),
            guidance: GuidanceConfig::default(),
            lift: LiftConfig::default(),
            refine: RefineOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_over(&Self::default(), path)
    }

    /// `text` layered onto `base`: keys present in the file replace those of `base`, tables
    /// merge recursively.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let mut merged: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_over(base: &RunConfig, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_over(base, &text)
            }
            None => Ok(base.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution == 0 {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        self.decompose().validate()?;
        self.guidance.validate()?;
        self.refine.validate()?;
        if self.lift.views == 0 || self.lift.view_size == 0 {
            return Err(Error::Config("lift views and view size must be positive".into()));
        }
        let e = &self.eval;
        if e.chamfer_samples == 0 || e.iou_resolution == 0 || e.views == 0 || e.view_size == 0 {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        if !(e.cm_per_unit.is_finite() && e.cm_per_unit > 0.0) {
            return Err(Error::Config("cm_per_unit must be positive".into()));
        }
        Ok(())
    }

    pub fn decompose(&self) -> DecomposeConfig {
        DecomposeConfig {
            weights: self.weights.clone(),
            schedule: self.schedule.clone(),
            cameras: self.cameras.clone(),
            prompts: self.prompts.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes `config.toml` and `seed.txt` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let seed = dir.join("seed.txt");
        std::fs::write(&seed, format!("{}\n", self.schedule.seed)).map_err(|e| Error::io(&seed, e))
    }
}

fn merge_tables(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge_tables(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(
            cfg.hash().unwrap(),
            RunConfig::from_toml(&text).unwrap().hash().unwrap()
        );
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("grid_resolution = 16\n[schedule]\ngeo_steps = 5\n").unwrap();
        assert_eq!(cfg.grid_resolution, 16);
        assert_eq!(cfg.schedule.geo_steps, 5);
        assert_eq!(cfg.schedule.tex_steps, 2000);
        assert_ne!(cfg.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn malformed_files_are_config_errors() {
        for text in [
            "grid_resolution = \"big\"",
            "[schedule]\ngeo_stepz = 3",
            "grid_resolution = 0",
            "[weights]\nseg_comp = -1.0",
            "[guidance]\nreference_human = \"h.obj\"",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn layering_keeps_base_values() {
        let mut base = RunConfig::default();
        base.grid_resolution = 32;
        base.schedule.tex_steps = 7;
        let cfg = RunConfig::from_toml_over(&base, "[schedule]\ngeo_steps = 5\n").unwrap();
        assert_eq!(cfg.grid_resolution, 32);
        assert_eq!(cfg.schedule.tex_steps, 7);
        assert_eq!(cfg.schedule.geo_steps, 5);
        assert!(RunConfig::from_toml_over(&base, "[schedule]\nbogus = 1\n").is_err());
        let snap = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_over(&RunConfig::default(), &snap).unwrap(), cfg);
    }

    #[test]
    fn guidance_selection() {
        let mut g = GuidanceConfig::default();
        assert!(matches!(g.resolve(), Err(Error::Config(_))));
        g.url = Some("http://localhost:9".into());
        assert_eq!(g.resolve().unwrap(), GuidanceKind::Remote);
        g.kind = Some(GuidanceKind::Mock);
        assert_eq!(g.resolve().unwrap(), GuidanceKind::Mock);
        g.kind = Some(GuidanceKind::Remote);
        g.url = None;
        assert!(g.resolve().is_err());
    }
}
