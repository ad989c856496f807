//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use socc_core::coords::labels;
use socc_core::nn::ConvWeights;
use socc_core::{Coord, CoordSet, Kernel, Matrix, OccupancyGrid, SparseTensor};

/// Edge length of the cubic test volume.
pub const SIDE: i32 = 16;

/// Up to `max_n` distinct coordinates on the stride lattice inside the test
/// volume, spread over `batches` items.
pub fn random_coords<R: Rng>(rng: &mut R, max_n: usize, stride: i32, batches: u32) -> Vec<Coord> {
    let per_axis = (SIDE / stride) as usize;
    let cells = per_axis.pow(3) * batches as usize;
    let n = rng.gen_range(1..=max_n.min(cells));
    sample(rng, cells, n)
        .into_iter()
        .map(|c| {
            let (b, r) = (c / per_axis.pow(3), c % per_axis.pow(3));
            let (i, j, k) = (r / (per_axis * per_axis), r / per_axis % per_axis, r % per_axis);
            Coord::new(b as u32, i as i32 * stride, j as i32 * stride, k as i32 * stride)
        })
        .collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_tensor<R: Rng>(rng: &mut R, max_n: usize, channels: usize, stride: i32, batches: u32) -> SparseTensor<f64> {
    let coords = random_coords(rng, max_n, stride, batches);
    let n = coords.len();
    SparseTensor::from_parts(stride, coords, random_matrix(rng, n, channels)).unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, k: usize, m_in: usize, m_out: usize, bias: bool) -> ConvWeights<f64> {
    let kernel = Kernel::cube(k);
    let w = random_matrix(rng, kernel.volume() * m_in, m_out);
    let b = bias.then(|| random_matrix(rng, 1, m_out));
    ConvWeights::new(kernel, w, b).unwrap()
}

/// Features stored densely: one `channels`-vector per lattice cell of every
/// batch item, zero where the tensor has no row.
pub struct Dense {
    pub batches: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Dense {
    pub fn zeros(batches: usize, channels: usize) -> Self {
        Self { batches, channels, values: vec![0.0; batches * (SIDE as usize).pow(3) * channels] }
    }

    pub fn from_tensor(t: &SparseTensor<f64>, batches: usize) -> Self {
        let mut d = Self::zeros(batches, t.channels());
        for (r, c) in t.coords.iter().enumerate() {
            d.cell_mut(c).copy_from_slice(t.features.row(r));
        }
        d
    }

    fn index(&self, c: &Coord) -> Option<usize> {
        let inside = c.spatial().iter().all(|&v| (0..SIDE).contains(&v)) && (c.batch as usize) < self.batches;
        inside.then(|| {
            let s = SIDE as usize;
            (((c.batch as usize * s + c.i as usize) * s + c.j as usize) * s + c.k as usize) * self.channels
        })
    }

    pub fn cell(&self, c: &Coord) -> Option<&[f64]> {
        self.index(c).map(|i| &self.values[i..i + self.channels])
    }

    pub fn cell_mut(&mut self, c: &Coord) -> &mut [f64] {
        let i = self.index(c).expect("cell inside the volume");
        &mut self.values[i..i + self.channels]
    }
}

fn offset_block<'a>(w: &'a ConvWeights<f64>, k: usize) -> impl Fn(usize, usize) -> f64 + 'a {
    let m_in = w.m_in();
    move |i, j| w.weight.get(k * m_in + i, j)
}

/// Dense strided convolution evaluated by scattering every occupied input
/// cell into every output lattice cell it reaches, then read back at `out`.
pub fn dense_conv(t: &SparseTensor<f64>, w: &ConvWeights<f64>, out: &CoordSet, batches: usize) -> Vec<Vec<f64>> {
    let x = Dense::from_tensor(t, batches);
    let s_in = t.stride();
    let s_out = out.stride();
    let mut y = Dense::zeros(batches, w.m_out());
    for b in 0..batches as u32 {
        for i in 0..SIDE {
            for j in 0..SIDE {
                for k in 0..SIDE {
                    let q = Coord::new(b, i, j, k);
                    let Some(xq) = x.cell(&q) else { continue };
                    if xq.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (ko, off) in w.kernel.offsets().iter().enumerate() {
                        let p = q.offset(*off, -s_in);
                        if !p.is_multiple_of(s_out) || y.index(&p).is_none() {
                            continue;
                        }
                        let wk = offset_block(w, ko);
                        let yp = y.cell_mut(&p);
                        for (c_out, v) in yp.iter_mut().enumerate() {
                            *v += (0..xq.len()).map(|c_in| xq[c_in] * wk(c_in, c_out)).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    out.iter()
        .map(|c| {
            let mut v = y.cell(c).expect("output inside the volume").to_vec();
            if let Some(bias) = &w.bias {
                v.iter_mut().zip(bias.row(0)).for_each(|(a, b)| *a += b);
            }
            v
        })
        .collect()
}

/// Generative transposed convolution by explicit scatter into a map keyed
/// by output coordinate.
pub fn scatter_transposed(t: &SparseTensor<f64>, w: &ConvWeights<f64>, up: i32) -> BTreeMap<Coord, Vec<f64>> {
    let unit = t.stride() / up;
    let mut out: BTreeMap<Coord, Vec<f64>> = BTreeMap::new();
    for (r, c) in t.coords.iter().enumerate() {
        let x = t.features.row(r);
        for (ko, off) in w.kernel.offsets().iter().enumerate() {
            let p = c.offset(*off, unit);
            let wk = offset_block(w, ko);
            let acc = out.entry(p).or_insert_with(|| match &w.bias {
                Some(b) => b.row(0).to_vec(),
                None => vec![0.0; w.m_out()],
            });
            for (c_out, v) in acc.iter_mut().enumerate() {
                *v += (0..x.len()).map(|c_in| x[c_in] * wk(c_in, c_out)).sum::<f64>();
            }
        }
    }
    out
}

/// Every `(offset, in_row, out_row)` triple found by comparing all pairs of
/// coordinates; forward maps read `in = out + offset * unit`.
pub fn brute_pairs(input: &CoordSet, output: &CoordSet, kernel: &Kernel, unit: i32) -> Vec<(usize, u32, u32)> {
    let mut pairs = Vec::new();
    for (o, oc) in output.iter().enumerate() {
        for (i, ic) in input.iter().enumerate() {
            if ic.batch != oc.batch {
                continue;
            }
            for (k, off) in kernel.offsets().iter().enumerate() {
                if (0..3).all(|a| ic.spatial()[a] - oc.spatial()[a] == off[a] * unit) {
                    pairs.push((k, i as u32, o as u32));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random label grid with dims up to `max_side` per axis: mostly free, some
/// void, the rest spread over the occupied classes.
pub fn random_grid<R: Rng>(rng: &mut R, max_side: usize) -> OccupancyGrid {
    let dims = [rng.gen_range(1..=max_side), rng.gen_range(1..=max_side), rng.gen_range(1..=max_side)];
    let n = dims.iter().product();
    let labels_ = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=4 => labels::FREE,
            5 => labels::VOID,
            _ => rng.gen_range(0..labels::FREE),
        })
        .collect();
    OccupancyGrid::from_labels(dims, labels_).unwrap()
}

/// Same dims as `gt`, each cell copied with probability `keep` and redrawn
/// otherwise, so predictions overlap the truth partially.
pub fn perturbed<R: Rng>(rng: &mut R, gt: &OccupancyGrid, keep: f64) -> OccupancyGrid {
    let labels_ = gt
        .labels()
        .iter()
        .map(|&l| {
            if l != labels::VOID && rng.gen_bool(keep) {
                l
            } else if rng.gen_bool(0.5) {
                labels::FREE
            } else {
                rng.gen_range(0..labels::FREE)
            }
        })
        .collect();
    OccupancyGrid::from_labels(gt.dims(), labels_).unwrap()
}

/// Completion counts `(tp, |P|, |GT|)` by direct enumeration, void cells skipped.
pub fn brute_completion(pred: &OccupancyGrid, gt: &OccupancyGrid) -> (u64, u64, u64) {
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == labels::VOID {
            continue;
        }
        let po = p != labels::FREE;
        let go = g != labels::FREE;
        counts.0 += (po && go) as u64;
        counts.1 += po as u64;
        counts.2 += go as u64;
    }
    counts
}

/// Per-class IoU from explicit TP/FP/FN counts, and their mean over classes
/// other than free that appear in the prediction or the truth.
pub fn brute_miou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> (Vec<Option<f64>>, f64) {
    let mut per_class = vec![None; labels::NUM_CLASSES];
    let (mut sum, mut n) = (0.0, 0);
    for c in 0..labels::NUM_CLASSES as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == labels::VOID {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        per_class[c as usize] = Some(iou);
        if c != labels::FREE {
            sum += iou;
            n += 1;
        }
    }
    (per_class, if n == 0 { 0.0 } else { sum / n as f64 })
}
