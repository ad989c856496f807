//! Sparse voxel tensor engine and semantic occupancy network.
//!
//! The crate is `no_std` compatible (it needs `alloc`). Everything that
//! touches files, clocks or threads lives in the `socc` companion crate.
//!
//! Layout:
//!
//! - [`coords`]: coordinates, sparse tensors, grid geometry, voxelization and
//!   coordinate-set algebra.
//! - [`kmap`]: kernel supports and kernel maps driving gather/scatter
//!   convolution.
//! - [`nn`]: differentiable sparse operators, the reverse-mode tape, Adam and
//!   the parameter checkpoint codec.
//! - [`fusion`]: LiDAR to camera projection, color sampling and augmentation.
//! - [`network`]: completion and segmentation U-Nets, losses and the training
//!   step.
//! - [`eval`]: completion and semantic metrics.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod coords;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kmap;
pub mod matrix;
pub mod network;
pub mod nn;
pub mod scalar;

pub use coords::{Coord, CoordSet, GridSpec, OccupancyGrid, SparseTensor};
pub use error::{Error, Result};
pub use kmap::{Kernel, KernelMap};
pub use matrix::Matrix;
pub use scalar::Scalar;
