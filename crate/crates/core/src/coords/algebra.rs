use alloc::sync::Arc;
use alloc::vec::Vec;

use super::{Coord, CoordSet, GridSpec, OccupancyGrid, SparseTensor};
use crate::error::{bail, Result};
use crate::kmap::Kernel;
use crate::scalar::Scalar;

/// Coordinates of a stride-`s` set after strided pooling by `factor`:
/// every coordinate floored to a multiple of `s * factor`, deduplicated in
/// first-seen order.
pub fn downsample_coords(coords: &CoordSet, factor: i32) -> Result<CoordSet> {
    if factor < 1 {
        bail!(Contract, "downsample factor {} must be positive", factor);
    }
    let stride = coords.stride() * factor;
    let mut out = CoordSet::with_capacity(stride, coords.len() / 2 + 1);
    for c in coords.iter() {
        out.insert(c.floor_to(stride));
    }
    Ok(out)
}

/// New coordinates produced by a generative transposed convolution: every
/// kernel-offset translate of every input coordinate at the finer stride
/// `coords.stride() / up_factor`.
pub fn generative_expand(coords: &CoordSet, kernel: &Kernel, up_factor: i32) -> Result<CoordSet> {
    if up_factor < 1 || coords.stride() % up_factor != 0 {
        bail!(Contract, "stride {} is not divisible by up factor {}", coords.stride(), up_factor);
    }
    let unit = coords.stride() / up_factor;
    let mut out = CoordSet::with_capacity(unit, coords.len() * kernel.volume().min(8));
    for c in coords.iter() {
        for &o in kernel.offsets() {
            out.insert(c.offset(o, unit));
        }
    }
    Ok(out)
}

/// Keeps rows whose mask entry is `true`, preserving their order.
pub fn prune<T: Scalar>(t: &SparseTensor<T>, keep: &[bool]) -> Result<SparseTensor<T>> {
    if keep.len() != t.len() {
        bail!(MalformedInput, "mask of length {} for {} rows", keep.len(), t.len());
    }
    let rows: Vec<u32> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(r, _)| r as u32).collect();
    let coords: Vec<Coord> = rows.iter().map(|&r| t.coords.coords()[r as usize]).collect();
    let set = CoordSet::from_coords(t.stride(), coords)?;
    SparseTensor::new(Arc::new(set), t.features.gather_rows(&rows))
}

/// How occupied voxels are labeled when densifying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseLabel {
    /// Index of the largest channel, ties to the lowest index.
    Argmax,
    /// Every occupied voxel gets this label.
    Constant(u8),
}

/// Writes the rows of batch item `batch` into a dense grid; cells without a
/// row are `FREE`.
pub fn to_dense<T: Scalar>(t: &SparseTensor<T>, spec: &GridSpec, mode: DenseLabel, batch: u32) -> Result<OccupancyGrid> {
    if t.stride() != 1 {
        bail!(Contract, "to_dense needs a stride-1 tensor, got stride {}", t.stride());
    }
    if let DenseLabel::Argmax = mode {
        if t.channels() == 0 && !t.is_empty() {
            bail!(Shape, "argmax over zero channels");
        }
    }
    let mut grid = OccupancyGrid::free(spec.dims);
    for (r, c) in t.coords.iter().enumerate() {
        if c.batch != batch {
            continue;
        }
        let ijk = c.spatial();
        if !spec.contains_index(ijk) {
            bail!(Contract, "coordinate {:?} lies outside the {:?} grid", c, spec.dims);
        }
        let label = match mode {
            DenseLabel::Argmax => argmax(t.features.row(r)) as u8,
            DenseLabel::Constant(l) => l,
        };
        grid.set([ijk[0] as usize, ijk[1] as usize, ijk[2] as usize], label);
    }
    Ok(grid)
}

/// First index of the maximum value.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> SparseTensor<T> {
    /// Rows of batch item `batch` as a new tensor.
    pub fn batch_item(&self, batch: u32) -> Result<SparseTensor<T>> {
        let keep: Vec<bool> = self.coords.iter().map(|c| c.batch == batch).collect();
        prune(self, &keep)
    }
}
