//! Kernel supports and the kernel maps that drive sparse convolution.
//!
//! A kernel map lists, for every kernel offset, the `(input row, output row)`
//! pairs it connects. Forward convolutions read `in = out + offset * s_in`;
//! transposed convolutions write `out = in + offset * s_out`.

use alloc::vec;
use alloc::vec::Vec;

use crate::coords::CoordSet;
use crate::error::{bail, Result};

/// Odd-sized, centered kernel support with offsets in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kernel {
    size: [usize; 3],
    offsets: Vec<[i32; 3]>,
}

impl Kernel {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        if size.iter().any(|&s| s == 0 || s % 2 == 0) {
            bail!(Config, "kernel size {:?} must be odd and positive on every axis", size);
        }
        let r = size.map(|s| (s / 2) as i32);
        let mut offsets = Vec::with_capacity(size.iter().product());
        for di in -r[0]..=r[0] {
            for dj in -r[1]..=r[1] {
                for dk in -r[2]..=r[2] {
                    offsets.push([di, dj, dk]);
                }
            }
        }
        Ok(Self { size, offsets })
    }

    /// `k x k x k` support.
    pub fn cube(k: usize) -> Self {
        Self::new([k; 3]).expect("cube kernel size must be odd")
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Index of an offset in [`Kernel::offsets`].
    pub fn index_of(&self, offset: [i32; 3]) -> Option<usize> {
        self.offsets.iter().position(|o| *o == offset)
    }
}

/// Per-offset `(in_row, out_row)` pairs for one convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelMap {
    offsets: Vec<[i32; 3]>,
    pairs: Vec<Vec<(u32, u32)>>,
    n_in: usize,
    n_out: usize,
    transposed: bool,
    identity: Vec<bool>,
}

impl KernelMap {
    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Pairs for offset index `k`.
    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }

    /// All `(offset index, in_row, out_row)` triples.
    pub fn triples(&self) -> impl Iterator<Item = (usize, u32, u32)> + '_ {
        self.pairs.iter().enumerate().flat_map(|(k, ps)| ps.iter().map(move |&(i, o)| (k, i, o)))
    }

    /// True when offset `k` maps every row to itself (the centered offset
    /// between identical coordinate sets).
    #[inline]
    pub(crate) fn is_identity(&self, k: usize) -> bool {
        self.identity[k]
    }
}

/// Builds the kernel map between `input` and `output`.
///
/// `conv_stride` relates the two tensor strides: forward maps need
/// `output.stride() == input.stride() * conv_stride` and step offsets by the
/// input stride; transposed maps need `input.stride() == output.stride() *
/// conv_stride` and step offsets by the output stride. Coordinates without a
/// partner simply produce no pair.
pub fn build_kernel_map(
    input: &CoordSet,
    output: &CoordSet,
    kernel: &Kernel,
    conv_stride: i32,
    transposed: bool,
) -> Result<KernelMap> {
    if conv_stride < 1 {
        bail!(Contract, "convolution stride {} must be positive", conv_stride);
    }
    let offsets = kernel.offsets().to_vec();
    let mut pairs = vec![Vec::new(); offsets.len()];
    if !transposed {
        if output.stride() != input.stride() * conv_stride {
            bail!(
                Contract,
                "output stride {} != input stride {} x {}",
                output.stride(),
                input.stride(),
                conv_stride
            );
        }
        let unit = input.stride();
        for (o_row, oc) in output.iter().enumerate() {
            for (k, &off) in offsets.iter().enumerate() {
                if let Some(i_row) = input.get(&oc.offset(off, unit)) {
                    pairs[k].push((i_row, o_row as u32));
                }
            }
        }
    } else {
        if input.stride() != output.stride() * conv_stride {
            bail!(
                Contract,
                "input stride {} != output stride {} x {}",
                input.stride(),
                output.stride(),
                conv_stride
            );
        }
        let unit = output.stride();
        for (i_row, ic) in input.iter().enumerate() {
            for (k, &off) in offsets.iter().enumerate() {
                if let Some(o_row) = output.get(&ic.offset(off, unit)) {
                    pairs[k].push((i_row as u32, o_row));
                }
            }
        }
    }
    let (n_in, n_out) = (input.len(), output.len());
    let identity = pairs
        .iter()
        .map(|ps| {
            n_in == n_out
                && ps.len() == n_in
                && ps.iter().enumerate().all(|(r, &(i, o))| i as usize == r && o as usize == r)
        })
        .collect();
    Ok(KernelMap { offsets, pairs, n_in, n_out, transposed, identity })
}
