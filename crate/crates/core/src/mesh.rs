//! Indexed triangle meshes with optional per-vertex color and per-face layer label.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Layer a face belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Object,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Human => "human",
            Label::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "human" | "h" | "0" => Some(Label::Human),
            "object" | "o" | "1" => Some(Label::Object),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-vertex RGB in [0, 1].
    pub colors: Option<Vec<Vec3>>,
    pub labels: Option<Vec<Label>>,
}

impl TriMesh {
    /// Builds a mesh and checks the index invariants.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = TriMesh {
            vertices,
            faces,
            colors: None,
            labels: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_colors(mut self, colors: Vec<Vec3>) -> Result<Self> {
        self.colors = Some(colors);
        self.validate()?;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_uniform_label(mut self, label: Label) -> Self {
        self.labels = Some(vec![label; self.faces.len()]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} references a vertex out of range ({n} vertices)"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidArgument(format!("face {fi} is degenerate")));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::DimensionMismatch(format!("{} colors for {n} vertices", c.len())));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.faces.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} faces",
                    l.len(),
                    self.faces.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    /// Unnormalized face normal (twice the area, right-handed winding).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let n = self.face_cross(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted unit vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &v in f {
                acc[v as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some((lo, hi))
    }

    /// Applies a point map to every vertex, keeping topology and attributes.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
            colors: self.colors.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Reverses every face winding.
    pub fn flipped(&self) -> TriMesh {
        let mut out = self.clone();
        for f in &mut out.faces {
            f.swap(1, 2);
        }
        out
    }

    /// Undirected edge -> incident faces.
    pub fn edge_faces(&self) -> HashMap<(u32, u32), Vec<u32>> {
        let mut map: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(fi as u32);
            }
        }
        map
    }

    /// Every edge shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        !self.faces.is_empty() && self.edge_faces().values().all(|f| f.len() == 2)
    }

    /// Faces sharing an edge with each face, sorted ascending.
    pub fn face_adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.faces.len()];
        for faces in self.edge_faces().values() {
            for &a in faces {
                for &b in faces {
                    if a != b {
                        adj[a as usize].push(b);
                    }
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Mean edge length over all face edges.
    pub fn mean_edge_length(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for fi in 0..self.faces.len() {
            let [a, b, c] = self.corners(fi);
            sum += (b - a).norm() + (c - b).norm() + (a - c).norm();
        }
        sum / (3 * self.faces.len()) as f64
    }
}

/// Concatenates two meshes; faces of `a` are labeled human and faces of `b` object.
pub fn merge_meshes(human: &TriMesh, object: &TriMesh) -> TriMesh {
    let offset = human.vertices.len() as u32;
    let mut vertices = human.vertices.clone();
    vertices.extend_from_slice(&object.vertices);
    let mut faces = human.faces.clone();
    faces.extend(
        object
            .faces
            .iter()
            .map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]),
    );
    let colors = match (&human.colors, &object.colors) {
        (None, None) => None,
        (hc, oc) => {
            let grey = Vec3::repeat(0.5);
            let mut c = hc.clone().unwrap_or_else(|| vec![grey; human.vertices.len()]);
            c.extend(oc.clone().unwrap_or_else(|| vec![grey; object.vertices.len()]));
            Some(c)
        }
    };
    let mut labels = vec![Label::Human; human.faces.len()];
    labels.extend(std::iter::repeat_n(Label::Object, object.faces.len()));
    TriMesh {
        vertices,
        faces,
        colors,
        labels: Some(labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> TriMesh {
        TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn rejects_degenerate_and_out_of_range_faces() {
        assert!(TriMesh::new(vec![Vec3::zeros(); 3], vec![[0, 0, 1]]).is_err());
        assert!(TriMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 3]]).is_err());
        assert!(tri().with_colors(vec![Vec3::zeros(); 2]).is_err());
        assert!(tri().with_labels(vec![]).is_err());
    }

    #[test]
    fn normal_follows_winding() {
        let m = tri();
        assert_eq!(m.face_normal(0), Vec3::z());
        assert_eq!(m.flipped().face_normal(0), -Vec3::z());
        assert!((m.face_area(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn merge_is_additive_and_labels_layers() {
        let a = tri();
        let b = tri().map_vertices(|v| v + Vec3::z());
        let m = merge_meshes(&a, &b);
        assert_eq!(m.vertices.len(), 6);
        assert_eq!(m.faces[1], [3, 4, 5]);
        assert_eq!(m.labels.unwrap(), vec![Label::Human, Label::Object]);

        let empty = TriMesh::default();
        let m = merge_meshes(&empty, &b);
        assert_eq!(m.vertices, b.vertices);
        assert_eq!(m.faces, b.faces);
        assert_eq!(m.labels.unwrap(), vec![Label::Object]);
    }
}
