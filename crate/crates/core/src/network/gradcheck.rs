//! Finite-difference check of the whole two-stage network.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::Network;
use super::stats::ClassStats;
use super::trainer::forward_losses;
use crate::coords::{labels, Coord, OccupancyGrid, SparseTensor};
use crate::error::Result;
use crate::nn::gradcheck::{op_suite, random_matrix, run_case, CaseReport, Instance};
use crate::nn::Mode;

/// Three decoder levels with tiny widths.
pub fn tiny_config(use_se: bool) -> ModelConfig {
    ModelConfig {
        enc_widths: alloc::vec![2, 2, 2, 2],
        dec_widths: alloc::vec![2, 2, 2],
        seg_widths: alloc::vec![2, 2],
        se_reduction: 2,
        use_se,
        ..ModelConfig::default()
    }
}

const DIMS: [usize; 3] = [8, 8, 8];

fn composite_case(rng: &mut ChaCha8Rng) -> Result<Instance<'static>> {
    let cfg = tiny_config(rng.gen_bool(0.7));
    let (net, mut store) = Network::new::<f64, _>(&cfg, rng)?;
    // Positive BN shifts keep most ReLUs active, and nonzero biases move
    // logits of dead rows off the pruning threshold.
    randomize_shifts(&mut store, rng);
    let mut coords = Vec::new();
    let mut gt = OccupancyGrid::free(DIMS);
    let classes = [labels::CAR, labels::DRIVEABLE_SURFACE, labels::MANMADE];
    for _ in 0..rng.gen_range(4..10) {
        let p = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6)];
        let c = Coord::new(0, p[0], p[1], p[2]);
        if !coords.contains(&c) {
            coords.push(c);
        }
        gt.set([p[0] as usize, p[1] as usize, p[2] as usize], classes[rng.gen_range(0..3)]);
        let q = [(p[0] + 1) as usize, p[1] as usize, p[2] as usize];
        gt.set(q, classes[rng.gen_range(0..3)]);
    }
    let n = coords.len();
    let input = SparseTensor::from_parts(1, coords, random_matrix(n, cfg.input_channels(), rng))?;
    let stats = ClassStats::from_grids([&gt], cfg.num_classes)?;
    // Network inputs are data, so only parameter gradients are probed.
    Ok(Instance {
        store,
        inputs: Vec::new(),
        mode: Mode::Train,
        build: Box::new(move |ctx, _| {
            let (total, _, _) = forward_losses(&net, ctx, &input, &[&gt], Some(&stats), DIMS)?;
            Ok(total)
        }),
    })
}

pub fn randomize_shifts<R: Rng + ?Sized>(store: &mut crate::nn::ParamStore<f64>, rng: &mut R) {
    for id in store.ids().collect::<Vec<_>>() {
        let (beta, bias) = (store.name(id).ends_with(".beta"), store.name(id).ends_with(".bias"));
        if beta || bias {
            let n = store.value(id).cols();
            let data = (0..n)
                .map(|_| {
                    let v = rng.gen_range(0.3..1.0);
                    if bias && rng.gen_bool(0.5) { -v } else { v }
                })
                .collect();
            *store.value_mut(id) = crate::matrix::Matrix::from_vec(1, n, data).expect("sized");
        }
    }
}

/// The composite network case alone.
pub fn composite_report(seed: u64, instances: usize, probes: usize) -> Result<CaseReport> {
    run_case("three_level_network", instances, probes, seed, composite_case)
}

/// Every operator case plus the composite network.
pub fn full_suite(seed: u64, instances: usize, probes: usize) -> Result<Vec<CaseReport>> {
    let mut r = op_suite(seed, instances, probes)?;
    r.push(composite_report(seed ^ 0x5eed, instances, probes)?);
    Ok(r)
}
