use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::Coord;
use crate::error::{bail, Result};

/// Semantic label set: the sixteen evaluated categories, a catch-all
/// `OTHERS` class and `FREE`, plus the `VOID` marker used in files.
pub mod labels {
    pub const OTHERS: u8 = 0;
    pub const BARRIER: u8 = 1;
    pub const BICYCLE: u8 = 2;
    pub const BUS: u8 = 3;
    pub const CAR: u8 = 4;
    pub const CONSTRUCTION_VEHICLE: u8 = 5;
    pub const MOTORCYCLE: u8 = 6;
    pub const PEDESTRIAN: u8 = 7;
    pub const TRAFFIC_CONE: u8 = 8;
    pub const TRAILER: u8 = 9;
    pub const TRUCK: u8 = 10;
    pub const DRIVEABLE_SURFACE: u8 = 11;
    pub const OTHER_FLAT: u8 = 12;
    pub const SIDEWALK: u8 = 13;
    pub const TERRAIN: u8 = 14;
    pub const MANMADE: u8 = 15;
    pub const VEGETATION: u8 = 16;
    pub const FREE: u8 = 17;
    /// Unknown / ignored voxel. Never a prediction target.
    pub const VOID: u8 = 255;

    pub const NUM_CLASSES: usize = 18;

    pub const NAMES: [&str; NUM_CLASSES] = [
        "others",
        "barrier",
        "bicycle",
        "bus",
        "car",
        "cons_veh",
        "motorcycle",
        "pedestrian",
        "traf_cone",
        "trailer",
        "truck",
        "driv_sur",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
        "free",
    ];

    /// True for labels that mark an occupied voxel.
    #[inline]
    pub fn is_occupied(label: u8) -> bool {
        label != FREE && label != VOID
    }
}

/// Axis-aligned metric volume discretized into cubic voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new([-40.0, -40.0, -1.0], [40.0, 40.0, 5.4], 0.4).expect("default grid is valid")
    }
}

impl GridSpec {
    pub fn new(lower: [f64; 3], upper: [f64; 3], resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            bail!(Config, "grid resolution {} must be positive", resolution);
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = upper[a] - lower[a];
            if !(extent > 0.0 && extent.is_finite()) {
                bail!(Config, "grid axis {} has empty extent [{}, {}]", a, lower[a], upper[a]);
            }
            dims[a] = Float::round(extent / resolution) as usize;
            if dims[a] == 0 {
                bail!(Config, "grid axis {} is thinner than one voxel", a);
            }
        }
        Ok(Self { lower, upper, resolution, dims })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel index of a metric point, or `None` when outside the grid.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[i32; 3]> {
        let mut idx = [0i32; 3];
        for a in 0..3 {
            let f = Float::floor((p[a] - self.lower[a]) / self.resolution);
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as i32;
        }
        Some(idx)
    }

    /// Metric center of a voxel.
    pub fn voxel_center(&self, idx: [i32; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.lower[a] + (idx[a] as f64 + 0.5) * self.resolution;
        }
        p
    }

    #[inline]
    pub fn contains_index(&self, idx: [i32; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }
}

/// Dense label grid, row-major with x outermost and z innermost.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], fill: u8) -> Self {
        Self { dims, labels: vec![fill; dims[0] * dims[1] * dims[2]] }
    }

    pub fn free(dims: [usize; 3]) -> Self {
        Self::new(dims, labels::FREE)
    }

    pub fn from_labels(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            bail!(Shape, "{} labels for a {:?} grid", labels.len(), dims);
        }
        Ok(Self { dims, labels })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn in_bounds(&self, idx: [i32; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.linear(idx)]
    }

    /// Label at a signed index; out-of-range cells read as `FREE`.
    #[inline]
    pub fn get_or_free(&self, idx: [i32; 3]) -> u8 {
        if self.in_bounds(idx) {
            self.get([idx[0] as usize, idx[1] as usize, idx[2] as usize])
        } else {
            labels::FREE
        }
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 3], label: u8) {
        let l = self.linear(idx);
        self.labels[l] = label;
    }

    /// Number of occupied cells.
    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| labels::is_occupied(l)).count()
    }

    /// Occupied cells as batch-`batch` coordinates in row-major order.
    pub fn occupied_coords(&self, batch: u32) -> Vec<Coord> {
        let mut out = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if labels::is_occupied(self.get([x, y, z])) {
                        out.push(Coord::new(batch, x as i32, y as i32, z as i32));
                    }
                }
            }
        }
        out
    }

    /// Binary occupancy pooled by `factor`: a parent cell is occupied iff any
    /// child is. Output dims round up.
    pub fn downsample_occupancy(&self, factor: usize) -> OccupancyMask {
        assert!(factor >= 1);
        let dims = [
            self.dims[0].div_ceil(factor),
            self.dims[1].div_ceil(factor),
            self.dims[2].div_ceil(factor),
        ];
        let mut mask = OccupancyMask { dims, factor, bits: vec![false; dims[0] * dims[1] * dims[2]] };
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if labels::is_occupied(self.get([x, y, z])) {
                        let l = (x / factor * dims[1] + y / factor) * dims[2] + z / factor;
                        mask.bits[l] = true;
                    }
                }
            }
        }
        mask
    }
}

/// Binary occupancy at a coarser stride, indexed by stride-1 coordinates
/// that are multiples of `factor`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    dims: [usize; 3],
    factor: usize,
    bits: Vec<bool>,
}

impl OccupancyMask {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Occupancy of the parent cell containing stride-1 coordinate `c`.
    pub fn occupied(&self, c: [i32; 3]) -> bool {
        let f = self.factor as i32;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if c[a] < 0 {
                return false;
            }
            let v = (c[a] / f) as usize;
            if v >= self.dims[a] {
                return false;
            }
            idx[a] = v;
        }
        self.bits[(idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_dims() {
        let g = GridSpec::default();
        assert_eq!(g.dims, [200, 200, 16]);
        assert_eq!(g.resolution, 0.4);
    }

    #[test]
    fn rejects_degenerate_grid() {
        assert!(GridSpec::new([0.0; 3], [1.0, 1.0, 0.0], 0.4).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn downsample_all_free_stays_free() {
        let g = OccupancyGrid::free([4, 4, 4]);
        assert_eq!(g.downsample_occupancy(2).count(), 0);
    }

    #[test]
    fn downsample_single_child_marks_parent() {
        let mut g = OccupancyGrid::free([4, 4, 4]);
        g.set([3, 1, 2], labels::CAR);
        let m = g.downsample_occupancy(2);
        assert_eq!(m.count(), 1);
        assert!(m.occupied([2, 0, 2]));
        assert!(m.occupied([3, 1, 3]));
        assert!(!m.occupied([0, 0, 0]));
    }

    #[test]
    fn downsample_full_block_gives_one_parent() {
        let mut g = OccupancyGrid::free([4, 4, 4]);
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    g.set([x, y, z], labels::CAR);
                }
            }
        }
        let m = g.downsample_occupancy(2);
        assert_eq!(m.count(), 1);
        assert_eq!(m.dims(), [2, 2, 2]);
    }

    #[test]
    fn void_is_not_occupied() {
        let mut g = OccupancyGrid::free([2, 2, 2]);
        g.set([0, 0, 0], labels::VOID);
        assert_eq!(g.occupied_count(), 0);
    }
}
