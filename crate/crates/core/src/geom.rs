//! Spatial queries shared by the extraction, skinning, composition and metric code:
//! point-triangle distance, winding numbers, a triangle BVH and a point kd-tree.

use rand::Rng;
use rayon::prelude::*;

use crate::mesh::{TriMesh, Vec3};

/// Closest point to `p` on triangle `(a, b, c)`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Signed solid angle subtended by a triangle at `p`, divided by 4π.
fn triangle_winding(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let x = a - p;
    let y = b - p;
    let z = c - p;
    let (lx, ly, lz) = (x.norm(), y.norm(), z.norm());
    let det = x.dot(&y.cross(&z));
    let div = lx * ly * lz + x.dot(&y) * lz + y.dot(&z) * lx + z.dot(&x) * ly;
    2.0 * det.atan2(div) / (4.0 * std::f64::consts::PI)
}

/// Generalized winding number of `mesh` at `p` (1 inside a closed outward mesh, 0 outside).
pub fn winding_number(mesh: &TriMesh, p: &Vec3) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.corners(f);
            triangle_winding(p, &a, &b, &c)
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn dist_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d += e * e;
        }
        d
    }
}

#[derive(Debug)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding volume hierarchy over the faces of a mesh, for closest-point queries.
#[derive(Debug)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

const BVH_LEAF: usize = 4;

impl TriangleBvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.corners(f)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            Self::build(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        TriangleBvh { tris, order, nodes }
    }

    fn build(
        tris: &[[Vec3; 3]],
        centroids: &[Vec3],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &i in &order[start..end] {
            for v in &tris[i] {
                bounds.grow(v);
            }
            cb.grow(&centroids[i]);
        }
        let id = nodes.len();
        if end - start <= BVH_LEAF {
            nodes.push(BvhNode::Leaf { bounds, start, end });
            return id;
        }
        nodes.push(BvhNode::Leaf { bounds, start, end });
        let extent = cb.hi - cb.lo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = Self::build(tris, centroids, order, start, mid, nodes);
        let right = Self::build(tris, centroids, order, mid, end, nodes);
        nodes[id] = BvhNode::Inner { bounds, left, right };
        id
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Closest surface point and its squared distance.
    pub fn closest_point(&self, p: &Vec3) -> Option<(Vec3, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (Vec3::zeros(), f64::INFINITY);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().dist_sq(p) >= best.1 {
                continue;
            }
            match node {
                BvhNode::Leaf { start, end, .. } => {
                    for &ti in &self.order[*start..*end] {
                        let [a, b, c] = &self.tris[ti];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d = (q - p).norm_squared();
                        if d < best.1 {
                            best = (q, d);
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().dist_sq(p);
                    let dr = self.nodes[*right].bounds().dist_sq(p);
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        Some(best)
    }

    pub fn distance(&self, p: &Vec3) -> Option<f64> {
        self.closest_point(p).map(|(_, d)| d.sqrt())
    }
}

/// Exact nearest-neighbour index over a point set. Ties resolve to the lowest point index.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vec3>,
    perm: Vec<u32>,
}

const KD_LEAF: usize = 8;

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        Self::build(points, &mut perm, 0);
        PointIndex {
            points: points.to_vec(),
            perm,
        }
    }

    fn build(points: &[Vec3], perm: &mut [u32], depth: usize) {
        if perm.len() <= KD_LEAF {
            return;
        }
        let axis = depth % 3;
        let mid = perm.len() / 2;
        perm.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let (l, r) = perm.split_at_mut(mid);
        Self::build(points, l, depth + 1);
        Self::build(points, &mut r[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.perm.len(), 0, &mut best);
        Some(best)
    }

    fn consider(&self, q: &Vec3, idx: u32, best: &mut (usize, f64)) {
        let d = (self.points[idx as usize] - q).norm_squared();
        let idx = idx as usize;
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        let n = hi - lo;
        if n <= KD_LEAF {
            for &i in &self.perm[lo..hi] {
                self.consider(q, i, best);
            }
            return;
        }
        let axis = depth % 3;
        let mid = lo + n / 2;
        let pivot = self.perm[mid];
        let split = self.points[pivot as usize][axis];
        let diff = q[axis] - split;
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        self.consider(q, pivot, best);
        // `<=` keeps equal-distance candidates reachable for the index tie rule.
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }

    pub fn nearest_many(&self, queries: &[Vec3]) -> Vec<(usize, f64)> {
        queries
            .par_iter()
            .map(|q| self.nearest(q).expect("non-empty index"))
            .collect()
    }
}

/// Area-weighted uniform samples on the surface, with the face each came from.
pub fn sample_surface<R: Rng>(mesh: &TriMesh, n: usize, rng: &mut R) -> Vec<(Vec3, usize)> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if acc <= 0.0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let r = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.corners(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            (p, f)
        })
        .collect()
}
