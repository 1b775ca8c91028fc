//! Deformable tetrahedral grid, per-node implicit field, and marching tetrahedra.
//!
//! The field stores a signed distance and a displacement for every grid node. Surface
//! vertices are placed on sign-changing edges by linear interpolation of the displaced
//! node positions, so every output vertex is a closed-form function of four scalars and
//! two displacements. [`FieldGradient::from_vertex_grads`] pushes vertex gradients back
//! onto those parameters.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{sample_surface, winding_number, TriangleBvh};
use crate::mesh::{TriMesh, Vec3};

/// Value substituted for an exact zero before extraction.
pub const ZERO_NUDGE: f64 = 1e-8;
/// Offsets are kept inside this fraction of the shortest incident edge.
pub const OFFSET_LIMIT: f64 = 0.45;

pub const MAX_RESOLUTION: u32 = 256;

#[derive(Clone, Debug)]
pub struct TetGrid {
    resolution: u32,
    nodes: Vec<Vec3>,
    tets: Vec<[u32; 4]>,
    min_edge: Vec<f64>,
}

// Kuhn split of a cube: every tet walks from corner 0 to corner 7 along one axis order.
const AXIS_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Splits `[-1, 1]^3` into `resolution^3` cubes of six tetrahedra each.
pub fn build_regular_grid(resolution: u32) -> Result<TetGrid> {
    if resolution == 0 || resolution > MAX_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be in 1..={MAX_RESOLUTION}, got {resolution}"
        )));
    }
    let r = resolution as usize;
    let n = r + 1;
    let idx = |i: usize, j: usize, k: usize| (i + n * (j + n * k)) as u32;
    let h = 2.0 / r as f64;
    let mut nodes = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                nodes.push(Vec3::new(-1.0 + h * i as f64, -1.0 + h * j as f64, -1.0 + h * k as f64));
            }
        }
    }
    let mut tets = Vec::with_capacity(6 * r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                for order in AXIS_ORDERS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(c[0], c[1], c[2]), 0, 0, 0];
                    for (s, &axis) in order.iter().enumerate() {
                        c[axis] += 1;
                        tet[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    if signed_volume(&nodes, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    let mut min_edge = vec![f64::INFINITY; nodes.len()];
    for t in &tets {
        for a in 0..4 {
            for b in (a + 1)..4 {
                let len = (nodes[t[a] as usize] - nodes[t[b] as usize]).norm();
                min_edge[t[a] as usize] = min_edge[t[a] as usize].min(len);
                min_edge[t[b] as usize] = min_edge[t[b] as usize].min(len);
            }
        }
    }
    Ok(TetGrid {
        resolution,
        nodes,
        tets,
        min_edge,
    })
}

fn signed_volume(nodes: &[Vec3], t: &[u32; 4]) -> f64 {
    let a = nodes[t[0] as usize];
    (nodes[t[1] as usize] - a)
        .cross(&(nodes[t[2] as usize] - a))
        .dot(&(nodes[t[3] as usize] - a))
        / 6.0
}

impl TetGrid {
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    /// Largest admissible offset magnitude at a node.
    pub fn offset_bound(&self, node: usize) -> f64 {
        OFFSET_LIMIT * self.min_edge[node]
    }

    /// Tet containing `p` (undeformed grid) and its barycentric weights.
    pub fn locate(&self, p: &Vec3) -> Option<(usize, [f64; 4])> {
        let r = self.resolution as usize;
        let h = self.cell_size();
        let mut cell = [0usize; 3];
        for a in 0..3 {
            if !(-1.0..=1.0).contains(&p[a]) {
                return None;
            }
            cell[a] = (((p[a] + 1.0) / h).floor() as usize).min(r - 1);
        }
        let base = 6 * (cell[0] + r * (cell[1] + r * cell[2]));
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for ti in base..base + 6 {
            let w = self.barycentric(ti, p);
            let worst = w.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= -1e-12 {
                return Some((ti, w));
            }
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((ti, w, worst));
            }
        }
        best.map(|(t, w, _)| (t, w))
    }

    fn barycentric(&self, tet: usize, p: &Vec3) -> [f64; 4] {
        let t = self.tets[tet];
        let a = self.nodes[t[0] as usize];
        let m = nalgebra::Matrix3::from_columns(&[
            self.nodes[t[1] as usize] - a,
            self.nodes[t[2] as usize] - a,
            self.nodes[t[3] as usize] - a,
        ]);
        let x = m.try_inverse().expect("grid tets are non-degenerate") * (p - a);
        [1.0 - x.sum(), x[0], x[1], x[2]]
    }
}

/// Per-node signed distance and displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitField {
    pub sdf: Vec<f64>,
    pub offset: Vec<Vec3>,
}

impl ImplicitField {
    pub fn constant(grid: &TetGrid, value: f64) -> Self {
        ImplicitField {
            sdf: vec![value; grid.node_count()],
            offset: vec![Vec3::zeros(); grid.node_count()],
        }
    }

    /// Samples an analytic signed distance at the grid nodes, zero offsets.
    pub fn from_fn(grid: &TetGrid, f: impl Fn(&Vec3) -> f64 + Sync) -> Self {
        ImplicitField {
            sdf: grid.nodes().par_iter().map(&f).collect(),
            offset: vec![Vec3::zeros(); grid.node_count()],
        }
    }

    pub fn check(&self, grid: &TetGrid) -> Result<()> {
        let n = grid.node_count();
        if self.sdf.len() != n || self.offset.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "field has {} sdf / {} offset entries for {n} grid nodes",
                self.sdf.len(),
                self.offset.len()
            )));
        }
        if self.sdf.iter().any(|s| !s.is_finite()) || self.offset.iter().any(|o| !o.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("field contains non-finite values".into()));
        }
        Ok(())
    }

    /// Projects every offset onto its admissible ball.
    pub fn clamp_offsets(&mut self, grid: &TetGrid) {
        for (i, o) in self.offset.iter_mut().enumerate() {
            let bound = grid.offset_bound(i);
            let len = o.norm();
            if len > bound {
                *o *= bound / len;
            }
        }
    }

    /// Sign-adjusted sdf value used by extraction.
    #[inline]
    pub fn value(&self, node: usize) -> f64 {
        let s = self.sdf[node];
        if s == 0.0 {
            ZERO_NUDGE
        } else {
            s
        }
    }

    #[inline]
    pub fn position(&self, grid: &TetGrid, node: usize) -> Vec3 {
        grid.nodes[node] + self.offset[node]
    }

    /// Piecewise-linear interpolation of the sdf over the undeformed grid.
    pub fn interpolate(&self, grid: &TetGrid, p: &Vec3) -> Option<f64> {
        let (t, w) = grid.locate(p)?;
        let tet = grid.tets[t];
        Some((0..4).map(|k| w[k] * self.sdf[tet[k] as usize]).sum())
    }
}

/// Extracted surface plus, for every vertex, the grid edge it lies on.
#[derive(Clone, Debug)]
pub struct MtSurface {
    pub mesh: TriMesh,
    /// `(a, b)` with `a < b`.
    pub vertex_edges: Vec<(u32, u32)>,
}

const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[inline]
fn crossing_vertex(pa: &Vec3, pb: &Vec3, sa: f64, sb: f64) -> Vec3 {
    (pa * sb - pb * sa) / (sb - sa)
}

/// Zero level set of `field` on `grid`. Normals point toward positive sdf.
pub fn marching_tetrahedra(grid: &TetGrid, field: &ImplicitField) -> Result<TriMesh> {
    extract_surface(grid, field).map(|s| s.mesh)
}

pub fn extract_surface(grid: &TetGrid, field: &ImplicitField) -> Result<MtSurface> {
    field.check(grid)?;
    let mut edge_vertex: HashMap<(u32, u32), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut vertex_edges = Vec::new();
    let mut faces = Vec::new();

    for tet in &grid.tets {
        let s = tet.map(|n| field.value(n as usize));
        let negatives = s.iter().filter(|&&v| v < 0.0).count();
        if negatives == 0 || negatives == 4 {
            continue;
        }
        let pos = tet.map(|n| field.position(grid, n as usize));

        // Vertices are created in a fixed edge order so the output does not depend on
        // which side of the surface is negative.
        let mut local: [Option<u32>; 6] = [None; 6];
        for (e, &(i, j)) in TET_EDGES.iter().enumerate() {
            if (s[i] < 0.0) == (s[j] < 0.0) {
                continue;
            }
            let (a, b) = (tet[i].min(tet[j]), tet[i].max(tet[j]));
            let id = *edge_vertex.entry((a, b)).or_insert_with(|| {
                let (ia, ib) = if tet[i] == a { (i, j) } else { (j, i) };
                vertices.push(crossing_vertex(&pos[ia], &pos[ib], s[ia], s[ib]));
                vertex_edges.push((a, b));
                (vertices.len() - 1) as u32
            });
            local[e] = Some(id);
        }

        let mut pos_c = Vec3::zeros();
        let mut neg_c = Vec3::zeros();
        for k in 0..4 {
            if s[k] < 0.0 {
                neg_c += pos[k] / negatives as f64;
            } else {
                pos_c += pos[k] / (4 - negatives) as f64;
            }
        }
        let outward = pos_c - neg_c;
        let mut emit = |tri: [u32; 3]| {
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            let n: Vec3 = (b - a).cross(&(c - a));
            if n.dot(&outward) < 0.0 {
                faces.push([tri[0], tri[2], tri[1]]);
            } else {
                faces.push(tri);
            }
        };

        let crossing: Vec<(usize, u32)> = local
            .iter()
            .enumerate()
            .filter_map(|(e, v)| v.map(|v| (e, v)))
            .collect();
        if crossing.len() == 3 {
            emit([crossing[0].1, crossing[1].1, crossing[2].1]);
        } else {
            // Quad: split along the pair of opposite edges that holds the smallest edge key.
            let shares = |e: usize, f: usize| {
                let (a, b) = TET_EDGES[e];
                let (c, d) = TET_EDGES[f];
                a == c || a == d || b == c || b == d
            };
            let key = |e: usize| {
                let (i, j) = TET_EDGES[e];
                (tet[i].min(tet[j]), tet[i].max(tet[j]))
            };
            let first = crossing
                .iter()
                .min_by_key(|(e, _)| key(*e))
                .copied()
                .expect("quad has four edges");
            let opposite = crossing
                .iter()
                .find(|(e, _)| *e != first.0 && !shares(*e, first.0))
                .copied()
                .expect("quad has an opposite edge");
            let others: Vec<u32> = crossing
                .iter()
                .filter(|(e, _)| *e != first.0 && *e != opposite.0)
                .map(|(_, v)| *v)
                .collect();
            emit([first.1, others[0], opposite.1]);
            emit([first.1, opposite.1, others[1]]);
        }
    }

    Ok(MtSurface {
        mesh: TriMesh {
            vertices,
            faces,
            colors: None,
            labels: None,
        },
        vertex_edges,
    })
}

/// Partial derivatives of a crossing vertex with respect to its edge parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MtVertexJacobian {
    pub d_sdf_a: Vec3,
    pub d_sdf_b: Vec3,
    /// `∂v/∂offset_a` is this scalar times the identity.
    pub d_offset_a: f64,
    pub d_offset_b: f64,
}

pub fn mt_vertex_jacobian(grid: &TetGrid, field: &ImplicitField, edge: (u32, u32)) -> Result<MtVertexJacobian> {
    let (a, b) = (edge.0 as usize, edge.1 as usize);
    if a >= grid.node_count() || b >= grid.node_count() {
        return Err(Error::InvalidArgument(format!("edge {edge:?} out of range")));
    }
    let (sa, sb) = (field.value(a), field.value(b));
    if (sa < 0.0) == (sb < 0.0) {
        return Err(Error::InvalidArgument(format!("edge {edge:?} has no sign change")));
    }
    Ok(jacobian_raw(&field.position(grid, a), &field.position(grid, b), sa, sb))
}

#[inline]
fn jacobian_raw(pa: &Vec3, pb: &Vec3, sa: f64, sb: f64) -> MtVertexJacobian {
    let d = sb - sa;
    let diff = pa - pb;
    MtVertexJacobian {
        d_sdf_a: diff * (sb / (d * d)),
        d_sdf_b: -diff * (sa / (d * d)),
        d_offset_a: sb / d,
        d_offset_b: -sa / d,
    }
}

/// Gradient of a scalar objective with respect to the field parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient {
    pub sdf: Vec<f64>,
    pub offset: Vec<Vec3>,
}

impl FieldGradient {
    pub fn zeros(n: usize) -> Self {
        FieldGradient {
            sdf: vec![0.0; n],
            offset: vec![Vec3::zeros(); n],
        }
    }

    /// Chains per-vertex position gradients of an extracted surface to the field.
    pub fn from_vertex_grads(
        grid: &TetGrid,
        field: &ImplicitField,
        surface: &MtSurface,
        vertex_grads: &[Vec3],
    ) -> Result<Self> {
        if vertex_grads.len() != surface.vertex_edges.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vertex gradients for {} surface vertices",
                vertex_grads.len(),
                surface.vertex_edges.len()
            )));
        }
        let mut g = FieldGradient::zeros(grid.node_count());
        g.accumulate(grid, field, surface, vertex_grads);
        Ok(g)
    }

    pub fn accumulate(&mut self, grid: &TetGrid, field: &ImplicitField, surface: &MtSurface, vertex_grads: &[Vec3]) {
        for (&(a, b), gv) in surface.vertex_edges.iter().zip(vertex_grads) {
            if *gv == Vec3::zeros() {
                continue;
            }
            let (a, b) = (a as usize, b as usize);
            let j = jacobian_raw(
                &field.position(grid, a),
                &field.position(grid, b),
                field.value(a),
                field.value(b),
            );
            self.sdf[a] += gv.dot(&j.d_sdf_a);
            self.sdf[b] += gv.dot(&j.d_sdf_b);
            self.offset[a] += gv * j.d_offset_a;
            self.offset[b] += gv * j.d_offset_b;
        }
    }

    pub fn add_scaled(&mut self, other: &FieldGradient, scale: f64) {
        for (a, b) in self.sdf.iter_mut().zip(&other.sdf) {
            *a += scale * b;
        }
        for (a, b) in self.offset.iter_mut().zip(&other.offset) {
            *a += b * scale;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sdf.iter().all(|v| v.is_finite()) && self.offset.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Signed distance queries against one mesh: BVH distance, winding-number sign.
pub struct SignedDistance<'a> {
    mesh: &'a TriMesh,
    bvh: TriangleBvh,
}

impl<'a> SignedDistance<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Ok(SignedDistance {
            mesh,
            bvh: TriangleBvh::new(mesh),
        })
    }

    /// Negative inside (winding number above one half).
    pub fn eval(&self, p: &Vec3) -> f64 {
        let d = self.bvh.distance(p).expect("non-empty mesh");
        if winding_number(self.mesh, p) > 0.5 {
            -d
        } else {
            d
        }
    }

    pub fn eval_many(&self, points: &[Vec3]) -> Vec<f64> {
        points.par_iter().map(|p| self.eval(p)).collect()
    }
}

pub fn mesh_signed_distance(mesh: &TriMesh, point: &Vec3) -> Result<f64> {
    Ok(SignedDistance::new(mesh)?.eval(point))
}

/// Training pairs for fitting a field to a mesh: jittered surface samples within `band`
/// followed by points uniform in the unit cube.
pub fn sample_sdf_training_points(
    mesh: &TriMesh,
    n_near: usize,
    n_uniform: usize,
    band: f64,
    seed: u64,
) -> Result<Vec<(Vec3, f64)>> {
    if n_near + n_uniform == 0 {
        return Err(Error::InvalidArgument("no training points requested".into()));
    }
    let sd = SignedDistance::new(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec3> = sample_surface(mesh, n_near, &mut rng)
        .into_iter()
        .map(|(p, f)| p + mesh.face_normal(f) * rng.random_range(-band..=band))
        .collect();
    points.extend((0..n_uniform).map(|_| {
        Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        )
    }));
    let values = sd.eval_many(&points);
    Ok(points.into_iter().zip(values).collect())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LCTG";

/// Writes `LCTG`, the grid resolution, then f32 sdf values and xyz-interleaved offsets.
pub fn write_checkpoint(w: &mut impl Write, grid: &TetGrid, field: &ImplicitField) -> Result<()> {
    field.check(grid)?;
    let mut buf = Vec::with_capacity(8 + 16 * field.sdf.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&grid.resolution.to_le_bytes());
    for s in &field.sdf {
        buf.extend_from_slice(&(*s as f32).to_le_bytes());
    }
    for o in &field.offset {
        for k in 0..3 {
            buf.extend_from_slice(&(o[k] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint stream>", e))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(TetGrid, ImplicitField)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::parse("checkpoint", "missing LCTG header"));
    }
    let res = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let grid = build_regular_grid(res)?;
    let n = grid.node_count();
    if bytes.len() != 8 + 16 * n {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "expected {} bytes for resolution {res}, found {}",
                8 + 16 * n,
                bytes.len()
            ),
        ));
    }
    let floats: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let sdf = floats[..n].to_vec();
    let offset = floats[n..]
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    Ok((grid, ImplicitField { sdf, offset }))
}

pub fn save_checkpoint(path: &Path, grid: &TetGrid, field: &ImplicitField) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(&mut f, grid, field)
}

pub fn load_checkpoint(path: &Path) -> Result<(TetGrid, ImplicitField)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::icosphere;

    fn single_tet_grid() -> TetGrid {
        let nodes = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        TetGrid {
            resolution: 1,
            min_edge: vec![1.0; 4],
            nodes,
            tets: vec![[0, 1, 2, 3]],
        }
    }

    fn field(sdf: Vec<f64>) -> ImplicitField {
        let n = sdf.len();
        ImplicitField {
            sdf,
            offset: vec![Vec3::zeros(); n],
        }
    }

    #[test]
    fn grid_counts() {
        let g = build_regular_grid(1).unwrap();
        assert_eq!((g.node_count(), g.tets().len()), (8, 6));
        let g = build_regular_grid(2).unwrap();
        assert_eq!((g.node_count(), g.tets().len()), (27, 48));
        assert!(build_regular_grid(0).is_err());
        assert!(build_regular_grid(257).is_err());
    }

    #[test]
    fn grid_tets_are_positive_and_fill_the_cube() {
        let g = build_regular_grid(3).unwrap();
        let vol: f64 = g
            .tets()
            .iter()
            .map(|t| {
                let v = signed_volume(g.nodes(), t);
                assert!(v > 0.0);
                v
            })
            .sum();
        assert!((vol - 8.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_empty() {
        let g = build_regular_grid(4).unwrap();
        let m = marching_tetrahedra(&g, &ImplicitField::constant(&g, 1.0)).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn sixteen_sign_cases() {
        let g = single_tet_grid();
        for case in 0u32..16 {
            let sdf: Vec<f64> = (0..4).map(|k| if case & (1 << k) != 0 { -1.0 } else { 1.0 }).collect();
            let negatives = case.count_ones();
            let m = marching_tetrahedra(&g, &field(sdf.clone())).unwrap();
            let expected = match negatives {
                0 | 4 => 0,
                1 | 3 => 1,
                _ => 2,
            };
            assert_eq!(m.faces.len(), expected, "case {case:04b}");
            // Orientation: normals point from negative toward positive nodes.
            if expected > 0 {
                let pos: Vec3 = (0..4).filter(|&k| sdf[k] > 0.0).map(|k| g.nodes[k]).sum::<Vec3>();
                let neg: Vec3 = (0..4).filter(|&k| sdf[k] < 0.0).map(|k| g.nodes[k]).sum::<Vec3>();
                let dir = pos / (4 - negatives) as f64 - neg / negatives as f64;
                for f in 0..m.faces.len() {
                    assert!(m.face_cross(f).dot(&dir) > 0.0);
                }
            }
        }
    }

    #[test]
    fn midpoint_for_symmetric_values() {
        let g = single_tet_grid();
        let s = extract_surface(&g, &field(vec![-1.0, 1.0, 1.0, 1.0])).unwrap();
        let i = s.vertex_edges.iter().position(|&e| e == (0, 1)).unwrap();
        assert!((s.mesh.vertices[i] - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn exact_zero_is_nudged_positive() {
        let g = single_tet_grid();
        let m = marching_tetrahedra(&g, &field(vec![-1.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let g = build_regular_grid(32).unwrap();
        let f = ImplicitField::from_fn(&g, |p| p.norm() - 0.5);
        let m = marching_tetrahedra(&g, &f).unwrap();
        assert!(!m.is_empty());
        assert!(m.is_closed());
        for v in &m.vertices {
            assert!((v.norm() - 0.5).abs() < 2.0 / 32.0);
        }
    }

    #[test]
    fn negation_reverses_orientation_only() {
        let g = build_regular_grid(6).unwrap();
        let f = ImplicitField::from_fn(&g, |p| (p - Vec3::new(0.1, -0.05, 0.2)).norm() - 0.55 + 0.1 * p.x * p.y);
        let neg = ImplicitField {
            sdf: f.sdf.iter().map(|s| -s).collect(),
            offset: f.offset.clone(),
        };
        let a = marching_tetrahedra(&g, &f).unwrap();
        let b = marching_tetrahedra(&g, &neg).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.flipped().faces, b.faces);
    }

    #[test]
    fn jacobian_rejects_edge_without_crossing() {
        let g = single_tet_grid();
        let f = field(vec![1.0, 1.0, -1.0, 1.0]);
        assert!(mt_vertex_jacobian(&g, &f, (0, 1)).is_err());
        let j = mt_vertex_jacobian(&g, &f, (0, 2)).unwrap();
        assert!((j.d_offset_a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn offsets_are_clamped() {
        let g = build_regular_grid(4).unwrap();
        let mut f = ImplicitField::constant(&g, 1.0);
        f.offset.iter_mut().for_each(|o| *o = Vec3::new(1.0, 1.0, 1.0));
        f.clamp_offsets(&g);
        for (i, o) in f.offset.iter().enumerate() {
            assert!(o.norm() <= g.offset_bound(i) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn signed_distance_of_sphere() {
        let s = icosphere(1.0, 3);
        let d0 = mesh_signed_distance(&s, &Vec3::zeros()).unwrap();
        assert!((d0 + 1.0).abs() < 0.02);
        assert_eq!(mesh_signed_distance(&s, &s.vertices[5]).unwrap(), 0.0);
        let far = Vec3::new(3.0, 0.5, 0.0);
        let nearest_vertex = s
            .vertices
            .iter()
            .map(|v| (v - far).norm())
            .fold(f64::INFINITY, f64::min);
        let d = mesh_signed_distance(&s, &far).unwrap();
        assert!(d > 0.0 && d <= nearest_vertex);
        assert!(matches!(
            mesh_signed_distance(&TriMesh::default(), &far),
            Err(Error::EmptyMesh)
        ));
    }

    #[test]
    fn training_points() {
        let s = icosphere(0.5, 3);
        let only_uniform = sample_sdf_training_points(&s, 0, 50, 0.05, 1).unwrap();
        assert_eq!(only_uniform.len(), 50);
        assert!(only_uniform.iter().all(|(p, _)| p.iter().all(|x| x.abs() <= 1.0)));

        let pts = sample_sdf_training_points(&s, 200, 20, 0.05, 2).unwrap();
        for (p, d) in &pts[..200] {
            assert!(d.abs() <= 0.05 + 1e-9);
            assert_eq!(*d, mesh_signed_distance(&s, p).unwrap());
        }
        assert_eq!(pts, sample_sdf_training_points(&s, 200, 20, 0.05, 2).unwrap());
        assert!(sample_sdf_training_points(&s, 0, 0, 0.05, 2).is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let g = build_regular_grid(2).unwrap();
        let mut f = ImplicitField::from_fn(&g, |p| p.x);
        f.offset[3] = Vec3::new(0.01, 0.02, 0.03);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &g, &f).unwrap();
        assert_eq!(&buf[..4], b"LCTG");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 8 + 27 * 4 + 27 * 12);
        let (g2, f2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(g2.resolution(), 2);
        assert!((f2.offset[3] - f.offset[3]).norm() < 1e-7);
        assert!(read_checkpoint(&mut &b"XXXX\x02\0\0\0"[..]).is_err());
    }
}
