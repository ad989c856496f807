use alloc::sync::Arc;
use alloc::vec::Vec;

use num_traits::Float;

use super::model::{GtPyramid, LevelOutput};
use super::stats::ClassStats;
use crate::coords::{labels, CoordSet, OccupancyGrid};
use crate::error::{bail, Result};
use crate::nn::{Tape, Var};
use crate::scalar::Scalar;

/// Class-balanced weight `(1 - beta) / (1 - beta^n)`.
pub fn cb_weight(n: f64, beta: f64) -> f64 {
    (1.0 - beta) / (1.0 - Float::powf(beta, n))
}

pub fn total_loss_value(completion: f64, segmentation: f64, lambda: f64) -> f64 {
    completion + lambda * segmentation
}

/// Sum over levels of the mean BCE between occupancy logits and the pooled
/// ground truth; empty levels add nothing.
pub fn completion_loss<T: Scalar>(tape: &mut Tape<T>, levels: &[LevelOutput], gt: &GtPyramid) -> Result<Var> {
    let mut terms = Vec::with_capacity(levels.len());
    for lvl in levels {
        let targets = lvl
            .coords
            .iter()
            .map(|c| if gt.occupied(c, lvl.level) { T::one() } else { T::zero() })
            .collect();
        terms.push((tape.bce_with_logits(lvl.logits, targets)?, T::one()));
    }
    tape.lin_comb(&terms)
}

/// Rows of `coords` that carry a segmentation target and their labels.
/// Void voxels never do; free voxels only when `ignore_free` is off.
pub fn segmentation_targets(coords: &CoordSet, grids: &[&OccupancyGrid], ignore_free: bool) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for (r, c) in coords.iter().enumerate() {
        let Some(g) = grids.get(c.batch as usize) else {
            bail!(Contract, "no ground truth for batch item {}", c.batch);
        };
        let label = g.get_or_free(c.spatial());
        if label == labels::VOID || (ignore_free && label == labels::FREE) {
            continue;
        }
        rows.push(r as u32);
        out.push(label as u32);
    }
    Ok((rows, out))
}

/// Mean weighted cross entropy over the target rows; with `stats` absent
/// every weight is 1.
pub fn class_balanced_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    rows: Vec<u32>,
    targets: Vec<u32>,
    stats: Option<&ClassStats>,
    beta: f64,
) -> Result<Var> {
    let weights = match stats {
        Some(s) => targets.iter().map(|&y| s.weight(y as usize, beta).map(T::from_f64)).collect::<Result<Vec<_>>>()?,
        None => alloc::vec![T::one(); targets.len()],
    };
    let picked = tape.gather_rows(logits, Arc::new(rows))?;
    tape.weighted_cross_entropy(picked, targets, weights)
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, completion: Var, segmentation: Var, lambda: f64) -> Result<Var> {
    tape.lin_comb(&[(completion, T::one()), (segmentation, T::from_f64(lambda))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::Coord;
    use crate::matrix::Matrix;
    use alloc::vec;

    #[test]
    fn weight_examples() {
        assert!((cb_weight(1.0, 0.9) - 1.0).abs() < 1e-15);
        assert!((cb_weight(2.0, 0.9) - 0.1 / 0.19).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss_value(2.0, 1.0, 0.5), 2.5);
        assert_eq!(total_loss_value(3.0, 0.0, 0.7), 3.0);
    }

    fn level(logits: &[f64], coords: &[[i32; 3]], tape: &mut Tape<f64>) -> LevelOutput {
        let set = CoordSet::from_coords(1, coords.iter().map(|c| Coord::new(0, c[0], c[1], c[2])).collect()).unwrap();
        let l = tape.input(Matrix::from_vec(logits.len(), 1, logits.to_vec()).unwrap(), false);
        LevelOutput { level: 0, coords: Arc::new(set), logits: l }
    }

    #[test]
    fn completion_loss_examples() {
        let mut g = OccupancyGrid::free([2, 1, 1]);
        g.set([0, 0, 0], 4);
        let pyr = GtPyramid::new(&[&g], 1);
        let mut tape = Tape::new();
        let sat = level(&[20.0, -20.0], &[[0, 0, 0], [1, 0, 0]], &mut tape);
        let zero = level(&[0.0, 0.0], &[[0, 0, 0], [1, 0, 0]], &mut tape);
        let empty = level(&[], &[], &mut tape);
        let a = completion_loss(&mut tape, &[sat], &pyr).unwrap();
        assert!(tape.value(a).get(0, 0) < 1e-8);
        let b = completion_loss(&mut tape, &[zero.clone(), zero], &pyr).unwrap();
        assert!((tape.value(b).get(0, 0) - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let c = completion_loss(&mut tape, &[empty], &pyr).unwrap();
        assert_eq!(tape.value(c).get(0, 0), 0.0);
    }

    #[test]
    fn perfect_logits_give_near_zero_ce() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Matrix::from_rows(&[&[20.0, -20.0], &[-20.0, 20.0]]).unwrap(), false);
        let stats = ClassStats::from_counts(&[1, 3]).unwrap();
        let l = class_balanced_ce(&mut tape, z, vec![0, 1], vec![0, 1], Some(&stats), 0.9).unwrap();
        assert!(tape.value(l).get(0, 0) < 1e-6);
    }

    #[test]
    fn rarer_class_gets_pushed_up() {
        // Class 0 is rare, class 1 common; equal logits, one voxel of each.
        let stats = ClassStats::from_counts(&[1, 9]).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Matrix::zeros(2, 2), true);
        let l = class_balanced_ce(&mut tape, z, vec![0, 1], vec![0, 1], Some(&stats), 0.9).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.wrt(z).unwrap();
        // The net push on class 0's logit (descent direction) is upward.
        let push0 = -(g.get(0, 0) + g.get(1, 0));
        assert!(push0 > 0.0);
    }

    #[test]
    fn void_rows_are_skipped() {
        let mut g = OccupancyGrid::free([3, 1, 1]);
        g.set([0, 0, 0], 4);
        g.set([1, 0, 0], labels::VOID);
        let set = CoordSet::from_coords(1, (0..3).map(|i| Coord::new(0, i, 0, 0)).collect()).unwrap();
        let (rows, t) = segmentation_targets(&set, &[&g], false).unwrap();
        assert_eq!((rows, t), (vec![0, 2], vec![4, 17]));
        let (rows, _) = segmentation_targets(&set, &[&g], true).unwrap();
        assert_eq!(rows, vec![0]);
    }
}
