//! Chamfer distance, voxel IoU and the pixel-wise object removal score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{sample_surface, winding_number, TriangleBvh};
use crate::mesh::{TriMesh, Vec3};
use crate::raster::Camera;

pub const DEFAULT_CHAMFER_SAMPLES: usize = 100_000;
pub const DEFAULT_IOU_RESOLUTION: usize = 128;

fn one_way(from: &TriMesh, to: &TriangleBvh, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec3> = sample_surface(from, samples, &mut rng)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let d: Vec<f64> = pts
        .par_iter()
        .map(|p| to.distance(p).expect("target is non-empty"))
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric mean point-to-surface distance over area-weighted samples, in mesh units.
pub fn chamfer(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("chamfer needs at least one sample".into()));
    }
    let (ba, bb) = (TriangleBvh::new(a), TriangleBvh::new(b));
    let ab = one_way(a, &bb, samples, seed);
    let ba_ = one_way(b, &ba, samples, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    Ok(0.5 * (ab + ba_))
}

/// [`chamfer`] converted with `cm_per_unit`.
pub fn chamfer_cm(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64, cm_per_unit: f64) -> Result<f64> {
    chamfer(a, b, samples, seed).map(|d| d * cm_per_unit)
}

/// Inside test for every point of a regular lattice, one x-parallel ray per (y, z) column.
/// Counts crossings of a closed surface; the column is nudged by a tiny irrational offset so
/// rays miss edges and vertices.
fn occupancy_parity(mesh: &TriMesh, xs: &[f64], ys: &[f64], zs: &[f64]) -> Vec<bool> {
    let (nx, ny) = (xs.len(), ys.len());
    let nudge = (ys.last().unwrap_or(&1.0) - ys[0]).abs().max(1.0) * 1.234_567e-9;
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.corners(f)).collect();
    let cols: Vec<Vec<bool>> = (0..ys.len() * zs.len())
        .into_par_iter()
        .map(|c| {
            let y = ys[c % ny] + nudge;
            let z = zs[c / ny] + nudge * 0.618_034;
            let mut hits: Vec<f64> = Vec::new();
            for [a, b, cc] in &tris {
                // Barycentric test in the yz plane, then solve for x.
                let d = (b.y - a.y) * (cc.z - a.z) - (cc.y - a.y) * (b.z - a.z);
                if d == 0.0 {
                    continue;
                }
                let u = ((y - a.y) * (cc.z - a.z) - (cc.y - a.y) * (z - a.z)) / d;
                let v = ((b.y - a.y) * (z - a.z) - (y - a.y) * (b.z - a.z)) / d;
                if u < 0.0 || v < 0.0 || u + v > 1.0 {
                    continue;
                }
                hits.push(a.x + u * (b.x - a.x) + v * (cc.x - a.x));
            }
            hits.sort_by(f64::total_cmp);
            xs.iter().map(|x| hits.partition_point(|h| h < x) % 2 == 1).collect()
        })
        .collect();
    let mut out = vec![false; nx * ny * zs.len()];
    for (c, col) in cols.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            out[c * nx + i] = v;
        }
    }
    out
}

fn occupancy(mesh: &TriMesh, xs: &[f64], ys: &[f64], zs: &[f64]) -> Vec<bool> {
    if mesh.is_closed() {
        return occupancy_parity(mesh, xs, ys, zs);
    }
    log::warn!("mesh is not closed; voxel occupancy falls back to winding numbers");
    let (nx, ny) = (xs.len(), ys.len());
    (0..nx * ny * zs.len())
        .into_par_iter()
        .map(|i| {
            let p = Vec3::new(xs[i % nx], ys[(i / nx) % ny], zs[i / (nx * ny)]);
            winding_number(mesh, &p) > 0.5
        })
        .collect()
}

/// Intersection over union of the two solids on a shared `resolution³` lattice of voxel
/// centres spanning both bounding boxes.
pub fn voxel_iou(a: &TriMesh, b: &TriMesh, resolution: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let (alo, ahi) = a.bounding_box().ok_or(Error::EmptyMesh)?;
    let (blo, bhi) = b.bounding_box().ok_or(Error::EmptyMesh)?;
    let lo = alo.inf(&blo);
    let hi = ahi.sup(&bhi);
    let axis = |k: usize| -> Vec<f64> {
        (0..resolution)
            .map(|i| lo[k] + (hi[k] - lo[k]) * (i as f64 + 0.5) / resolution as f64)
            .collect()
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let oa = occupancy(a, &xs, &ys, &zs);
    let ob = occupancy(b, &xs, &ys, &zs);
    let inter = oa.iter().zip(&ob).filter(|(x, y)| **x && **y).count();
    let union = oa.iter().zip(&ob).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Mean over views of `|edited ∧ input| / |input|`; views with an empty input mask are skipped.
pub fn por_score(input_views: &[(Camera, Vec<u8>)], edited_views: &[(Camera, Vec<u8>)]) -> Result<f64> {
    if input_views.len() != edited_views.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input views, {} edited views",
            input_views.len(),
            edited_views.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, ((ci, mi), (ce, me))) in input_views.iter().zip(edited_views).enumerate() {
        if ci != ce {
            return Err(Error::InvalidArgument(format!("view {i} uses different cameras")));
        }
        if mi.len() != me.len() || mi.len() != ci.width * ci.height {
            return Err(Error::DimensionMismatch(format!("masks of view {i} are misaligned")));
        }
        let target = mi.iter().filter(|&&m| m != 0).count();
        if target == 0 {
            continue;
        }
        let kept = mi.iter().zip(me).filter(|(a, b)| **a != 0 && **b != 0).count();
        sum += kept as f64 / target as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("every input mask is empty".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{cuboid, icosphere, square};
    use nalgebra::Rotation3;

    #[test]
    fn chamfer_identity_and_symmetry() {
        let m = icosphere(1.0, 2);
        assert!(chamfer(&m, &m, 2000, 1).unwrap() < 1e-9);
        let n = icosphere(1.2, 1);
        let ab = chamfer(&m, &n, 3000, 4).unwrap();
        let ba = chamfer(&n, &m, 3000, 4).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 0.05 * ab);
        assert!(chamfer(&TriMesh::default(), &m, 10, 0).is_err());
    }

    #[test]
    fn parallel_planes() {
        let a = square(0.0, 4);
        let b = square(0.3, 4);
        let d = chamfer(&a, &b, 20_000, 9).unwrap();
        assert!((d - 0.3).abs() < 0.02 * 0.3, "{d}");
    }

    #[test]
    fn chamfer_rigid_invariance() {
        let a = icosphere(1.0, 2);
        let b = icosphere(0.8, 2).map_vertices(|v| v + Vec3::new(0.1, 0.0, 0.0));
        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let t = Vec3::new(0.4, -2.0, 5.0);
        let d0 = chamfer(&a, &b, 2000, 3).unwrap();
        let d1 = chamfer(&a.map_vertices(|v| r * v + t), &b.map_vertices(|v| r * v + t), 2000, 3).unwrap();
        assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn iou_cases() {
        let c = cuboid(Vec3::zeros(), Vec3::repeat(1.0));
        assert!((voxel_iou(&c, &c, 32).unwrap() - 1.0).abs() < 1e-12);
        let far = cuboid(Vec3::repeat(3.0), Vec3::repeat(4.0));
        assert_eq!(voxel_iou(&c, &far, 32).unwrap(), 0.0);
        let shifted = cuboid(Vec3::new(0.5, 0.0, 0.0), Vec3::new(1.5, 1.0, 1.0));
        let iou = voxel_iou(&c, &shifted, 64).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 0.1 / 3.0, "{iou}");
    }

    #[test]
    fn iou_open_mesh_falls_back() {
        let mut s = icosphere(1.0, 2);
        s.faces.pop();
        let closed = icosphere(1.0, 2);
        let iou = voxel_iou(&s, &closed, 16).unwrap();
        assert!(iou > 0.95);
    }

    #[test]
    fn por_cases() {
        let cam = Camera::new(3.0, 0.0, 0.0, 0.8, 8, 8).unwrap();
        let input: Vec<u8> = (0..64).map(|i| (i < 32) as u8).collect();
        let half: Vec<u8> = (0..64).map(|i| (i < 16) as u8).collect();
        let views = vec![(cam, input.clone()), (cam, input.clone())];
        assert_eq!(por_score(&views, &views).unwrap(), 1.0);
        let zero = vec![(cam, vec![0; 64]), (cam, vec![0; 64])];
        assert_eq!(por_score(&views, &zero).unwrap(), 0.0);
        let halves = vec![(cam, half.clone()), (cam, half)];
        assert_eq!(por_score(&views, &halves).unwrap(), 0.5);
        assert!(por_score(&zero, &zero).is_err());
    }
}
