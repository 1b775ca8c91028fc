//! Lifting multi-view 2D object masks onto scan faces, and partitioning by label.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_png_gray, write_png};
use crate::mesh::{Label, TriMesh};
use crate::raster::{rasterize, Camera, RenderBuffers};

pub const DEFAULT_MIN_VOTES: u32 = 3;

/// Binary object mask aligned with a rendering of the scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMask {
    pub camera: Camera,
    pub mask: Vec<u8>,
}

impl ViewMask {
    pub fn new(camera: Camera, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != camera.width * camera.height {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} pixels, camera is {}x{}",
                mask.len(),
                camera.width,
                camera.height
            )));
        }
        Ok(ViewMask { camera, mask })
    }
}

/// `(object, human)` vote counts per face.
pub fn count_votes(scan: &TriMesh, views: &[ViewMask]) -> Result<Vec<(u32, u32)>> {
    for v in views {
        if v.mask.len() != v.camera.width * v.camera.height {
            return Err(Error::DimensionMismatch("mask does not match its camera".into()));
        }
    }
    let per_view: Vec<Vec<(u32, u32, u32)>> = views
        .par_iter()
        .map(|v| {
            let mut unlabeled = scan.clone();
            unlabeled.labels = None;
            let b = rasterize(&unlabeled, &v.camera);
            b.face_id
                .iter()
                .zip(&v.mask)
                .filter(|(f, _)| **f >= 0)
                .map(|(&f, &m)| (f as u32, (m != 0) as u32, (m == 0) as u32))
                .collect()
        })
        .collect();
    let mut votes = vec![(0u32, 0u32); scan.faces.len()];
    for view in per_view {
        for (f, o, h) in view {
            votes[f as usize].0 += o;
            votes[f as usize].1 += h;
        }
    }
    Ok(votes)
}

/// Majority vote per face (ties → human); faces with fewer than `min_votes` votes take the
/// label of the nearest voted face by breadth-first search over shared edges.
pub fn lift_segmentation(scan: &TriMesh, views: &[ViewMask], min_votes: u32) -> Result<Vec<Label>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("lifting needs at least one view".into()));
    }
    let votes = count_votes(scan, views)?;
    let mut labels: Vec<Option<Label>> = votes
        .iter()
        .map(|&(o, h)| (o + h >= min_votes.max(1)).then_some(if o > h { Label::Object } else { Label::Human }))
        .collect();
    propagate_labels(scan, &mut labels);
    Ok(labels.into_iter().map(|l| l.unwrap_or(Label::Human)).collect())
}

/// Multi-source BFS from every labeled face, sources seeded in face order.
fn propagate_labels(scan: &TriMesh, labels: &mut [Option<Label>]) {
    let adj = scan.face_adjacency();
    let mut queue: VecDeque<usize> = (0..labels.len()).filter(|&f| labels[f].is_some()).collect();
    while let Some(f) = queue.pop_front() {
        let l = labels[f];
        for &n in &adj[f] {
            let n = n as usize;
            if labels[n].is_none() {
                labels[n] = l;
                queue.push_back(n);
            }
        }
    }
}

/// `(human, object)` submeshes; unused vertices are dropped and the rest keep their order.
pub fn partition_mesh(scan: &TriMesh, labels: &[Label]) -> Result<(TriMesh, TriMesh)> {
    if labels.len() != scan.faces.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} faces",
            labels.len(),
            scan.faces.len()
        )));
    }
    let pick = |want: Label| {
        let faces: Vec<[u32; 3]> = scan
            .faces
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == want)
            .map(|(f, _)| *f)
            .collect();
        let mut remap = vec![u32::MAX; scan.vertices.len()];
        for f in &faces {
            for &v in f {
                remap[v as usize] = 0;
            }
        }
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        for (i, r) in remap.iter_mut().enumerate() {
            if *r == 0 {
                *r = vertices.len() as u32;
                vertices.push(scan.vertices[i]);
                if let Some(c) = &scan.colors {
                    colors.push(c[i]);
                }
            }
        }
        let faces: Vec<[u32; 3]> = faces.iter().map(|f| f.map(|v| remap[v as usize])).collect();
        let n = faces.len();
        TriMesh {
            vertices,
            faces,
            colors: scan.colors.as_ref().map(|_| colors),
            labels: Some(vec![want; n]),
        }
    };
    Ok((pick(Label::Human), pick(Label::Object)))
}

/// One rasterization of the labeled scan: mask, normals, layer masks and colour.
pub fn render_scan_ground_truth(scan: &TriMesh, labels: &[Label], camera: &Camera) -> Result<RenderBuffers> {
    if labels.len() != scan.faces.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} faces",
            labels.len(),
            scan.faces.len()
        )));
    }
    let mut m = scan.clone();
    m.labels = Some(labels.to_vec());
    Ok(rasterize(&m, camera))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    #[serde(flatten)]
    camera: Camera,
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    views: Vec<ManifestEntry>,
}

/// Reads a TOML manifest of `[[views]]` with camera parameters and a mask PNG path
/// (relative to the manifest).
pub fn load_view_manifest(path: &Path) -> Result<Vec<ViewMask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    m.views
        .into_iter()
        .map(|v| {
            v.camera.validate()?;
            let img = read_png_gray(&dir.join(&v.mask))?;
            if img.width != v.camera.width || img.height != v.camera.height {
                return Err(Error::DimensionMismatch(format!(
                    "mask {} is {}x{}, camera is {}x{}",
                    v.mask, img.width, img.height, v.camera.width, v.camera.height
                )));
            }
            ViewMask::new(v.camera, img.data.iter().map(|&x| (x > 0.5) as u8).collect())
        })
        .collect()
}

/// Writes `mask_<i>.png` files and `views.toml` into `dir`.
pub fn save_view_manifest(dir: &Path, views: &[ViewMask]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let name = format!("mask_{i:03}.png");
        let data: Vec<f64> = v.mask.iter().map(|&m| m as f64).collect();
        write_png(&dir.join(&name), v.camera.width, v.camera.height, 1, &data)?;
        entries.push(ManifestEntry {
            camera: v.camera,
            mask: name,
        });
    }
    let path = dir.join("views.toml");
    let text = toml::to_string(&Manifest { views: entries }).map_err(|e| Error::parse("manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
