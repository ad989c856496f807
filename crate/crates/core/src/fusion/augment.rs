use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::coords::{labels, FusedPoint, GridSpec, OccupancyGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Half-width of the uniform noise added to every feature value.
    pub noise: f64,
    /// Largest translation per axis, in voxels.
    pub max_shift: [i32; 3],
    /// Fraction of occupied ground-truth voxels relabeled free.
    pub mask_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise: 0.05, max_shift: [4, 4, 4], mask_ratio: 0.1 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { noise: 0.0, max_shift: [0; 3], mask_ratio: 0.0 }
    }
}

/// Feature noise, one shared voxel translation, and ground-truth masking.
///
/// The translation moves points by whole voxels and shifts the grid by the
/// same amount. Cells shifted in from outside the grid are unknown and
/// become void.
pub fn augment<R: Rng + ?Sized>(
    mut points: Vec<FusedPoint>,
    gt: &OccupancyGrid,
    spec: &GridSpec,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Vec<FusedPoint>, OccupancyGrid) {
    if cfg.noise > 0.0 {
        let a = cfg.noise as f32;
        for p in &mut points {
            for f in &mut p.features {
                *f += rng.gen_range(-a..=a);
            }
        }
    }

    let shift: [i32; 3] = core::array::from_fn(|i| {
        let m = cfg.max_shift[i].max(0);
        if m == 0 {
            0
        } else {
            rng.gen_range(-m..=m)
        }
    });
    let mut grid = if shift == [0; 3] { gt.clone() } else { shifted(gt, shift) };
    if shift != [0; 3] {
        for p in &mut points {
            for i in 0..3 {
                p.position[i] += shift[i] as f64 * spec.resolution;
            }
        }
    }

    if cfg.mask_ratio > 0.0 {
        let occupied: Vec<usize> = (0..grid.labels().len()).filter(|&i| labels::is_occupied(grid.labels()[i])).collect();
        let n = num_traits::Float::round(occupied.len() as f64 * cfg.mask_ratio.min(1.0)) as usize;
        for k in sample(rng, occupied.len(), n).iter() {
            grid.labels_mut()[occupied[k]] = labels::FREE;
        }
    }
    (points, grid)
}

fn shifted(gt: &OccupancyGrid, shift: [i32; 3]) -> OccupancyGrid {
    let d = gt.dims();
    let mut out = OccupancyGrid::new(d, labels::VOID);
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let src = [x as i32 - shift[0], y as i32 - shift[1], z as i32 - shift[2]];
                if gt.in_bounds(src) {
                    out.set([x, y, z], gt.get([src[0] as usize, src[1] as usize, src[2] as usize]));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (Vec<FusedPoint>, OccupancyGrid, GridSpec) {
        let spec = GridSpec::new([0.0; 3], [4.0, 4.0, 4.0], 1.0).unwrap();
        let mut gt = OccupancyGrid::free(spec.dims);
        for i in 0..4 {
            gt.set([i, 1, 1], 4);
        }
        let pts = vec![FusedPoint { position: [1.5, 1.5, 1.5], features: vec![0.5, 0.25] }];
        (pts, gt, spec)
    }

    #[test]
    fn identity_when_disabled() {
        let (p, g, s) = scene();
        let (p2, g2) = augment(p.clone(), &g, &s, &AugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p, p2);
        assert_eq!(g, g2);
    }

    #[test]
    fn full_mask_frees_everything() {
        let (p, g, s) = scene();
        let cfg = AugmentConfig { mask_ratio: 1.0, ..AugmentConfig::disabled() };
        let (_, g2) = augment(p, &g, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(g2.occupied_count(), 0);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let (p, g, s) = scene();
        let cfg = AugmentConfig { noise: 0.05, ..AugmentConfig::disabled() };
        let (a, _) = augment(p.clone(), &g, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let (b, _) = augment(p.clone(), &g, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (x, y) in a[0].features.iter().zip(&p[0].features) {
            assert!((x - y).abs() <= 0.05 + 1e-7);
        }
    }

    #[test]
    fn translation_moves_points_and_grid_together() {
        let (p, g, s) = scene();
        let cfg = AugmentConfig { max_shift: [1, 1, 1], ..AugmentConfig::disabled() };
        for seed in 0..10 {
            let (q, h) = augment(p.clone(), &g, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let v = s.voxel_of(q[0].position).unwrap();
            let orig = s.voxel_of(p[0].position).unwrap();
            let shift = [v[0] - orig[0], v[1] - orig[1], v[2] - orig[2]];
            // Every original occupied cell that stays inside moved by `shift`.
            for i in 0..4i32 {
                let dst = [i + shift[0], 1 + shift[1], 1 + shift[2]];
                if h.in_bounds(dst) {
                    assert_eq!(h.get_or_free(dst), 4);
                }
            }
        }
    }
}
