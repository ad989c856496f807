use alloc::vec::Vec;

use super::loss::cb_weight;
use crate::coords::{labels, OccupancyGrid};
use crate::error::{bail, Result};

/// Frequency assigned to classes never seen in training.
pub const FREQ_FLOOR: f64 = 1e-6;

/// Normalized per-class voxel frequency over the occupied training voxels.
///
/// The free class is not an occupied voxel, so it is not counted; it gets
/// frequency 1, i.e. a class-balanced weight of exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub freq: Vec<f64>,
}

impl ClassStats {
    /// `counts[c]` voxels of class `c`; index `FREE` (when present) is ignored.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let counted = |c: usize| c != labels::FREE as usize;
        let total: u64 = counts.iter().enumerate().filter(|(c, _)| counted(*c)).map(|(_, &n)| n).sum();
        if total == 0 {
            bail!(Config, "class statistics need at least one occupied voxel");
        }
        let freq = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                if !counted(c) {
                    1.0
                } else if n == 0 {
                    FREQ_FLOOR
                } else {
                    n as f64 / total as f64
                }
            })
            .collect();
        Ok(Self { counts: counts.to_vec(), freq })
    }

    /// Counts occupied voxels per class over every grid.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a OccupancyGrid>, num_classes: usize) -> Result<Self> {
        let mut counts = alloc::vec![0u64; num_classes];
        let mut frames = 0;
        for g in grids {
            frames += 1;
            for &l in g.labels() {
                if labels::is_occupied(l) {
                    let Some(c) = counts.get_mut(l as usize) else {
                        bail!(MalformedInput, "label {l} exceeds {num_classes} classes");
                    };
                    *c += 1;
                }
            }
        }
        if frames == 0 {
            bail!(Config, "class statistics of an empty dataset");
        }
        Self::from_counts(&counts)
    }

    pub fn classes(&self) -> usize {
        self.freq.len()
    }

    pub fn weight(&self, class: usize, beta: f64) -> Result<f64> {
        match self.freq.get(class) {
            Some(&n) => Ok(cb_weight(n, beta)),
            None => bail!(Config, "class {class} has no statistics ({} classes)", self.freq.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_cars_one_pedestrian() {
        let mut g = OccupancyGrid::free([4, 1, 1]);
        for i in 0..3 {
            g.set([i, 0, 0], labels::CAR);
        }
        g.set([3, 0, 0], labels::PEDESTRIAN);
        let s = ClassStats::from_grids([&g], labels::NUM_CLASSES).unwrap();
        assert_eq!(s.freq[labels::CAR as usize], 0.75);
        assert_eq!(s.freq[labels::PEDESTRIAN as usize], 0.25);
        assert_eq!(s.freq[labels::BUS as usize], FREQ_FLOOR);
        assert_eq!(s.weight(labels::FREE as usize, 0.9).unwrap(), 1.0);
        assert!(s.weight(40, 0.9).is_err());
    }

    #[test]
    fn uniform_labels_equal_frequencies() {
        let s = ClassStats::from_counts(&[5, 5, 5, 5]).unwrap();
        assert!(s.freq.iter().all(|&f| f == 0.25));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(ClassStats::from_grids(core::iter::empty(), 18).is_err());
        let g = OccupancyGrid::free([2, 2, 2]);
        assert!(ClassStats::from_grids([&g], 18).is_err());
    }
}
