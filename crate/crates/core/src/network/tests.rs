use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{composite_report, tiny_config};
use super::*;
use crate::coords::{generative_expand, labels, Coord, CoordSet, OccupancyGrid, SparseTensor};
use crate::kmap::Kernel;
use crate::matrix::Matrix;
use crate::nn::{Ctx, Mode, ParamStore};

const DIMS: [usize; 3] = [16, 16, 8];

fn input_from(coords: Vec<Coord>, channels: usize, rng: &mut ChaCha8Rng) -> SparseTensor<f64> {
    let n = coords.len();
    let data = (0..n * channels).map(|_| rng.gen_range(0.0..1.0)).collect();
    SparseTensor::from_parts(1, coords, Matrix::from_vec(n, channels, data).unwrap()).unwrap()
}

fn scene(rng: &mut ChaCha8Rng) -> (SparseTensor<f64>, OccupancyGrid) {
    let mut gt = OccupancyGrid::free(DIMS);
    let mut coords = Vec::new();
    for x in 3..11 {
        for y in 4..9 {
            gt.set([x, y, 0], labels::DRIVEABLE_SURFACE);
            if rng.gen_bool(0.5) {
                coords.push(Coord::new(0, x as i32, y as i32, 0));
            }
        }
    }
    for z in 1..4 {
        gt.set([6, 6, z], labels::CAR);
        gt.set([7, 6, z], labels::CAR);
    }
    coords.push(Coord::new(0, 6, 6, 3));
    (input_from(coords, 4, rng), gt)
}

fn small() -> ModelConfig {
    ModelConfig { enc_widths: alloc::vec![4, 8, 8, 8], dec_widths: alloc::vec![8, 8, 4], seg_widths: alloc::vec![4, 8], se_reduction: 2, ..ModelConfig::default() }
}

#[test]
fn empty_input_gives_empty_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (net, mut store) = Network::new::<f64, _>(&small(), &mut rng).unwrap();
    let input = input_from(Vec::new(), 4, &mut rng);
    let out = infer_sparse(&net, &mut store, &input, DIMS).unwrap();
    assert!(out.is_empty());
    assert_eq!(out.channels(), labels::NUM_CLASSES);
}

#[test]
fn level_coordinates_stay_within_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (net, mut store) = Network::new::<f64, _>(&small(), &mut rng).unwrap();
    let (input, _) = scene(&mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Eval);
    let (x, ext) = net.split_input(&mut ctx, &input).unwrap();
    let out = net.completion_forward(&mut ctx, &x, ext, None, DIMS).unwrap();
    assert_eq!(out.levels.len(), 3);
    let k = Kernel::cube(3);
    for (j, lv) in out.levels.iter().enumerate() {
        assert_eq!(lv.coords.stride(), 1 << lv.level);
        assert_eq!(ctx.tape.value(lv.logits).rows(), lv.coords.len());
        // Each level is at most 27 children per kept parent.
        if j + 1 < out.levels.len() {
            let next = &out.levels[j + 1];
            assert!(next.coords.len() <= 27 * lv.coords.len());
        }
        let _ = &k;
    }
    assert_eq!(out.dense.coords.stride(), 1);
    for c in out.dense.coords.iter() {
        let s = c.spatial();
        assert!((0..3).all(|a| s[a] >= 0 && (s[a] as usize) < DIMS[a]));
    }
}

#[test]
fn teacher_forcing_keeps_reachable_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small();
    let (net, mut store) = Network::new::<f64, _>(&cfg, &mut rng).unwrap();
    let (input, gt) = scene(&mut rng);
    let pyramid = GtPyramid::new(&[&gt], cfg.depth());

    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let (x, ext) = net.split_input(&mut ctx, &input).unwrap();
    let out = net.completion_forward(&mut ctx, &x, ext, Some(&pyramid), DIMS).unwrap();

    // Chain that keeps only ground-truth cells.
    let mut cur = input.coords.as_ref().clone();
    for _ in 1..cfg.depth() {
        cur = crate::coords::downsample_coords(&cur, 2).unwrap();
    }
    let k = Kernel::cube(3);
    for l in (0..cfg.depth() - 1).rev() {
        let e = generative_expand(&cur, &k, 2).unwrap();
        let mut next = CoordSet::new(1 << l);
        for c in e.iter() {
            let s = c.spatial();
            let inside = (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < DIMS[a]);
            if inside && pyramid.occupied(c, l) {
                next.insert(*c);
            }
        }
        cur = next;
    }
    assert!(!cur.is_empty());
    for c in cur.iter() {
        assert!(out.dense.coords.contains(c), "forced voxel {c:?} was pruned");
    }
}

#[test]
fn segmentation_preserves_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (net, mut store) = Network::new::<f64, _>(&small(), &mut rng).unwrap();
    let (input, gt) = scene(&mut rng);
    let pyramid = GtPyramid::new(&[&gt], 4);
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let (x, ext) = net.split_input(&mut ctx, &input).unwrap();
    let out = net.completion_forward(&mut ctx, &x, ext, Some(&pyramid), DIMS).unwrap();
    let seg = net.segmentation_forward(&mut ctx, &out.dense).unwrap();
    assert!(alloc::sync::Arc::ptr_eq(&seg.coords, &out.dense.coords) || *seg.coords == *out.dense.coords);
    let v = ctx.tape.value(seg.feats);
    assert_eq!((v.rows(), v.cols()), (out.dense.len(), labels::NUM_CLASSES));
}

#[test]
fn training_without_ground_truth_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (net, mut store) = Network::new::<f64, _>(&small(), &mut rng).unwrap();
    let (input, _) = scene(&mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let (x, ext) = net.split_input(&mut ctx, &input).unwrap();
    assert!(net.completion_forward(&mut ctx, &x, ext, None, DIMS).is_err());
}

#[test]
fn network_gradients_match_finite_differences() {
    let r = composite_report(11, 3, 40).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn tiny_config_has_three_decoder_levels() {
    assert_eq!(tiny_config(true).depth() - 1, 3);
}

fn loss_at(net: &Network, store: &mut ParamStore<f32>, ex: &Example<f32>, stats: &ClassStats) -> f64 {
    let mut ctx = Ctx::new(store, Mode::Train);
    let (t, _, _) = forward_losses(net, &mut ctx, &ex.input, &[&ex.gt], Some(stats), DIMS).unwrap();
    ctx.tape.value(t).get(0, 0) as f64
}

#[test]
fn small_steps_reduce_the_loss() {
    let mut decreases = 0;
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (net, store) = Network::new::<f32, _>(&small(), &mut rng).unwrap();
        let (input, gt) = scene(&mut rng);
        let ex = Example { input: input.cast::<f32>(), gt };
        let stats = ClassStats::from_grids([&ex.gt], labels::NUM_CLASSES).unwrap();
        let mut tr = Trainer::new(net, store, Some(stats.clone()), 1e-3, 100);
        let before = loss_at(&tr.net, &mut tr.store.clone(), &ex, &stats);
        for _ in 0..5 {
            tr.step(&[&ex], DIMS).unwrap();
        }
        let after = loss_at(&tr.net, &mut tr.store.clone(), &ex, &stats);
        if after < before {
            decreases += 1;
        }
    }
    assert!(decreases >= 3, "loss fell in only {decreases} of 4 runs");
}

#[test]
fn batched_inputs_keep_items_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, _) = scene(&mut rng);
    let (b, _) = scene(&mut rng);
    let s = batch_inputs(&[&a, &b]).unwrap();
    assert_eq!(s.len(), a.len() + b.len());
    assert_eq!(s.coords.batch_count(), 2);
}

#[test]
#[ignore]
fn print_composite_report() {
    std::println!("{:?}", composite_report(7, 20, 60).unwrap());
}
