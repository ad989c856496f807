//! Sparse tensors in coordinate-list form and the algebra over their
//! coordinate sets.

mod algebra;
mod grid;
mod voxelize;

pub use algebra::{downsample_coords, generative_expand, prune, to_dense, DenseLabel};
pub use grid::{labels, GridSpec, OccupancyGrid, OccupancyMask};
pub use voxelize::{voxelize, FusedPoint};

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::hash::BuildHasherDefault;

use hashbrown::HashMap;
use rustc_hash::FxHasher;

use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

type CoordIndex = HashMap<Coord, u32, BuildHasherDefault<FxHasher>>;

/// Voxel coordinate with its batch item. Spatial components are in voxels at
/// stride 1; a tensor at stride `s` only holds multiples of `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coord {
    pub batch: u32,
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl Coord {
    pub const fn new(batch: u32, i: i32, j: i32, k: i32) -> Self {
        Self { batch, i, j, k }
    }

    #[inline]
    pub fn spatial(&self) -> [i32; 3] {
        [self.i, self.j, self.k]
    }

    /// `self + offset * unit`, batch unchanged.
    #[inline]
    pub fn offset(&self, offset: [i32; 3], unit: i32) -> Self {
        Self {
            batch: self.batch,
            i: self.i + offset[0] * unit,
            j: self.j + offset[1] * unit,
            k: self.k + offset[2] * unit,
        }
    }

    /// Floors every spatial component to a multiple of `factor`.
    #[inline]
    pub fn floor_to(&self, factor: i32) -> Self {
        Self {
            batch: self.batch,
            i: self.i.div_euclid(factor) * factor,
            j: self.j.div_euclid(factor) * factor,
            k: self.k.div_euclid(factor) * factor,
        }
    }

    #[inline]
    pub fn is_multiple_of(&self, stride: i32) -> bool {
        self.i.rem_euclid(stride) == 0 && self.j.rem_euclid(stride) == 0 && self.k.rem_euclid(stride) == 0
    }
}

/// Ordered set of unique coordinates at one tensor stride.
///
/// Rows are numbered in insertion order; the hash index is only used for
/// lookup, so iteration order is deterministic.
#[derive(Clone, Debug, Default)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: CoordIndex,
    stride: i32,
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride && self.coords == other.coords
    }
}

impl CoordSet {
    pub fn new(stride: i32) -> Self {
        assert!(stride > 0, "tensor stride must be positive");
        Self { coords: Vec::new(), index: CoordIndex::default(), stride }
    }

    pub fn with_capacity(stride: i32, cap: usize) -> Self {
        let mut s = Self::new(stride);
        s.coords.reserve(cap);
        s.index.reserve(cap);
        s
    }

    /// Builds a set from coordinates that must be unique and stride-aligned.
    pub fn from_coords(stride: i32, coords: Vec<Coord>) -> Result<Self> {
        if stride <= 0 {
            bail!(MalformedInput, "tensor stride {} is not positive", stride);
        }
        let mut index = CoordIndex::default();
        index.reserve(coords.len());
        for (row, c) in coords.iter().enumerate() {
            if !c.is_multiple_of(stride) {
                bail!(MalformedInput, "coordinate {:?} is not a multiple of stride {}", c, stride);
            }
            if index.insert(*c, row as u32).is_some() {
                bail!(MalformedInput, "duplicate coordinate {:?}", c);
            }
        }
        Ok(Self { coords, index, stride })
    }

    /// Inserts `c` if absent and returns its row.
    pub fn insert(&mut self, c: Coord) -> u32 {
        debug_assert!(c.is_multiple_of(self.stride));
        let next = self.coords.len() as u32;
        let row = *self.index.entry(c).or_insert(next);
        if row == next {
            self.coords.push(c);
        }
        row
    }

    #[inline]
    pub fn get(&self, c: &Coord) -> Option<u32> {
        self.index.get(c).copied()
    }

    #[inline]
    pub fn contains(&self, c: &Coord) -> bool {
        self.index.contains_key(c)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn stride(&self) -> i32 {
        self.stride
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Coord> {
        self.coords.iter()
    }

    /// Batch item of every row.
    pub fn batch_ids(&self) -> Vec<u32> {
        self.coords.iter().map(|c| c.batch).collect()
    }

    /// One past the largest batch index present (0 when empty).
    pub fn batch_count(&self) -> usize {
        self.coords.iter().map(|c| c.batch as usize + 1).max().unwrap_or(0)
    }
}

/// Coordinates plus an `n x m` feature matrix; row `r` belongs to
/// `coords.coords()[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T> {
    pub coords: Arc<CoordSet>,
    pub features: Matrix<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(coords: Arc<CoordSet>, features: Matrix<T>) -> Result<Self> {
        if coords.len() != features.rows() {
            bail!(Shape, "{} coordinates but {} feature rows", coords.len(), features.rows());
        }
        Ok(Self { coords, features })
    }

    pub fn empty(stride: i32, channels: usize) -> Self {
        Self { coords: Arc::new(CoordSet::new(stride)), features: Matrix::zeros(0, channels) }
    }

    pub fn from_parts(stride: i32, coords: Vec<Coord>, features: Matrix<T>) -> Result<Self> {
        Self::new(Arc::new(CoordSet::from_coords(stride, coords)?), features)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    /// Feature row at `c`, if present.
    pub fn feature_at(&self, c: &Coord) -> Option<&[T]> {
        self.coords.get(c).map(|r| self.features.row(r as usize))
    }

    /// Concatenates tensors holding disjoint batch items into one tensor.
    pub fn stack(parts: &[SparseTensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(MalformedInput, "cannot stack zero tensors");
        };
        let (stride, ch) = (first.stride(), first.channels());
        let total = parts.iter().map(|p| p.len()).sum();
        let mut coords = Vec::with_capacity(total);
        let mut data = Vec::with_capacity(total * ch);
        for p in parts {
            if p.stride() != stride || p.channels() != ch {
                bail!(Shape, "stacked tensors must share stride and channel count");
            }
            coords.extend_from_slice(p.coords.coords());
            data.extend_from_slice(p.features.as_slice());
        }
        Self::from_parts(stride, coords, Matrix::from_vec(total, ch, data)?)
    }

    pub fn cast<U: Scalar>(&self) -> SparseTensor<U> {
        SparseTensor { coords: self.coords.clone(), features: self.features.cast() }
    }

    /// Keeps the feature columns `start..start + len`.
    pub fn select_channels(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.channels() {
            bail!(Shape, "channels {}..{} out of {}", start, start + len, self.channels());
        }
        let mut data = Vec::with_capacity(self.len() * len);
        for r in 0..self.len() {
            data.extend_from_slice(&self.features.row(r)[start..start + len]);
        }
        Ok(Self { coords: self.coords.clone(), features: Matrix::from_vec(self.len(), len, data)? })
    }
}
