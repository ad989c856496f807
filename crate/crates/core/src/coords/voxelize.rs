use alloc::vec;
use alloc::vec::Vec;

use super::{Coord, CoordSet, GridSpec, SparseTensor};
use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use alloc::sync::Arc;

/// Metric point with its per-point feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPoint {
    pub position: [f64; 3],
    pub features: Vec<f32>,
}

/// Discretizes points into stride-1 voxels of batch item `batch`.
///
/// Points outside the grid are dropped; points sharing a voxel are averaged.
/// Voxels appear in order of their first point.
pub fn voxelize<T: Scalar>(points: &[FusedPoint], spec: &GridSpec, batch: u32) -> Result<SparseTensor<T>> {
    let m = points.first().map_or(0, |p| p.features.len());
    if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.features.len() != m) {
        bail!(MalformedInput, "point {} has {} features, expected {}", i, p.features.len(), m);
    }
    let mut set = CoordSet::new(1);
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    for p in points {
        let Some(idx) = spec.voxel_of(p.position) else {
            continue;
        };
        let row = set.insert(Coord::new(batch, idx[0], idx[1], idx[2])) as usize;
        if row == counts.len() {
            counts.push(0);
            sums.extend(core::iter::repeat_n(0.0, m));
        }
        counts[row] += 1;
        for (s, &f) in sums[row * m..(row + 1) * m].iter_mut().zip(&p.features) {
            *s += f as f64;
        }
    }
    let mut data = vec![T::zero(); sums.len()];
    for (row, &n) in counts.iter().enumerate() {
        for c in 0..m {
            data[row * m + c] = T::from_f64(sums[row * m + c] / n as f64);
        }
    }
    let n = set.len();
    SparseTensor::new(Arc::new(set), Matrix::from_vec(n, m, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, z: f64, f: &[f32]) -> FusedPoint {
        FusedPoint { position: [x, y, z], features: f.to_vec() }
    }

    #[test]
    fn origin_maps_to_center_voxel() {
        let t: SparseTensor<f32> = voxelize(&[pt(0.0, 0.0, 0.0, &[1.0])], &GridSpec::default(), 0).unwrap();
        assert_eq!(t.coords.coords(), &[Coord::new(0, 100, 100, 2)]);
        assert_eq!(t.stride(), 1);
    }

    #[test]
    fn lower_corner_maps_to_zero() {
        let t: SparseTensor<f32> = voxelize(&[pt(-40.0, -40.0, -1.0, &[])], &GridSpec::default(), 0).unwrap();
        assert_eq!(t.coords.coords(), &[Coord::new(0, 0, 0, 0)]);
    }

    #[test]
    fn shared_voxel_features_are_averaged() {
        let pts = [pt(0.01, 0.01, 0.01, &[2.0]), pt(0.02, 0.03, 0.05, &[4.0])];
        let t: SparseTensor<f32> = voxelize(&pts, &GridSpec::default(), 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.features.row(0), &[3.0]);
    }

    #[test]
    fn out_of_bounds_points_are_dropped() {
        let pts = [pt(40.0, 0.0, 0.0, &[1.0]), pt(0.0, 0.0, -1.5, &[1.0]), pt(0.0, 0.0, 0.0, &[1.0])];
        let t: SparseTensor<f32> = voxelize(&pts, &GridSpec::default(), 3).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.coords.coords()[0].batch, 3);
    }

    #[test]
    fn inconsistent_feature_lengths_are_rejected() {
        let pts = [pt(0.0, 0.0, 0.0, &[1.0]), pt(1.0, 0.0, 0.0, &[1.0, 2.0])];
        assert!(matches!(
            voxelize::<f32>(&pts, &GridSpec::default(), 0),
            Err(crate::Error::MalformedInput(_))
        ));
    }
}
