//! Finite-difference gradient checks.
//!
//! Each case builds a random small instance, reduces the op output to a
//! scalar with a random weighting `sum(out * R)`, and compares analytic
//! gradients against central differences in `f64`. Instances where a ReLU
//! input or a pruning logit sits too close to its kink are redrawn, since the
//! finite difference is meaningless there.

use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, string::String};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv, SqueezeExcite};
use super::ops::{self, SparseVar};
use super::params::{Ctx, Mode, ParamStore};
use super::tape::Var;
use crate::coords::{downsample_coords, generative_expand, Coord, CoordSet};
use crate::error::Result;
use crate::kmap::{build_kernel_map, Kernel};
use crate::matrix::Matrix;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-5;
/// Minimum distance from a kink for an instance to count.
const MIN_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 50;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds the op under test on a fresh context; returns its output.
pub type Build<'f> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'f;

/// A randomized problem: parameters, inputs and the function to evaluate.
pub struct Instance<'f> {
    pub store: ParamStore<f64>,
    pub inputs: Vec<Matrix<f64>>,
    pub mode: Mode,
    pub build: alloc::boxed::Box<Build<'f>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub redraws: usize,
    pub probes: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Outcome of a single instance, or `None` when it sat too close to a kink.
pub fn check_instance(inst: &Instance<'_>, probes: usize, rng: &mut ChaCha8Rng) -> Result<Option<(f64, usize)>> {
    let eval = |store: &mut ParamStore<f64>, inputs: &[Matrix<f64>], r: Option<&Matrix<f64>>, grads: bool| -> Result<_> {
        let mut ctx = Ctx::new(store, inst.mode);
        let vars: Vec<Var> = inputs.iter().map(|m| ctx.tape.input(m.clone(), grads)).collect();
        let out = (inst.build)(&mut ctx, &vars)?;
        let shape = (ctx.tape.value(out).rows(), ctx.tape.value(out).cols());
        let weights = match r {
            Some(r) => r.clone(),
            None => Matrix::filled(shape.0, shape.1, 0.0),
        };
        let loss = ctx.tape.dot_const(out, weights)?;
        let value = ctx.tape.value(loss).get(0, 0);
        let margin = ctx.tape.margin();
        let g = if grads { Some(ctx.tape.backward(loss)?) } else { None };
        Ok((value, margin, shape, g, vars))
    };

    // First pass only to learn the output shape.
    let mut scratch = inst.store.clone();
    let (_, _, shape, _, _) = eval(&mut scratch, &inst.inputs, None, false)?;
    let r = random_matrix(shape.0, shape.1, rng);

    let mut base = inst.store.clone();
    let (_, margin, _, grads, vars) = eval(&mut base, &inst.inputs, Some(&r), true)?;
    if margin < MIN_MARGIN {
        return Ok(None);
    }
    let grads = grads.expect("requested");
    let param_grads = grads.param_grads();

    // Candidate scalar entries: (is_param, index, element).
    let mut entries = Vec::new();
    for (id, _) in &param_grads {
        for e in 0..inst.store.value(*id).as_slice().len() {
            entries.push((true, id.index(), e));
        }
    }
    for (i, m) in inst.inputs.iter().enumerate() {
        for e in 0..m.as_slice().len() {
            entries.push((false, i, e));
        }
    }
    if entries.is_empty() {
        return Ok(Some((0.0, 0)));
    }
    let picks = sample(rng, entries.len(), probes.min(entries.len()));
    let mut worst = 0.0f64;
    for p in picks.iter() {
        let (is_param, idx, e) = entries[p];
        let analytic = if is_param {
            param_grads.iter().find(|(id, _)| id.index() == idx).map_or(0.0, |(_, g)| g.as_slice()[e])
        } else {
            grads.wrt(vars[idx]).map_or(0.0, |g| g.as_slice()[e])
        };
        let f = |delta: f64| -> Result<f64> {
            let mut store = inst.store.clone();
            let mut inputs = inst.inputs.clone();
            if is_param {
                let id = store.ids().nth(idx).expect("valid id");
                store.value_mut(id).as_mut_slice()[e] += delta;
            } else {
                inputs[idx].as_mut_slice()[e] += delta;
            }
            Ok(eval(&mut store, &inputs, Some(&r), false)?.0)
        };
        let numeric = (f(STEP)? - f(-STEP)?) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(Some((worst, picks.len())))
}

/// Runs `instances` accepted instances drawn from `make`.
pub fn run_case<'f>(
    name: &str,
    instances: usize,
    probes: usize,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<Instance<'f>>,
) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CaseReport {
        name: name.into(),
        instances: 0,
        redraws: 0,
        probes: 0,
        max_rel_err: 0.0,
        passed: true,
    };
    while report.instances < instances {
        if report.redraws > MAX_REDRAWS * instances.max(1) {
            log::warn!("gradcheck {name}: too many instances near a kink");
            report.passed = false;
            break;
        }
        let inst = make(&mut rng)?;
        match check_instance(&inst, probes, &mut rng)? {
            None => report.redraws += 1,
            Some((err, n)) => {
                report.instances += 1;
                report.probes += n;
                report.max_rel_err = report.max_rel_err.max(err);
            }
        }
    }
    report.passed &= report.max_rel_err <= TOLERANCE;
    Ok(report)
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Random unique coordinates at `stride` inside a `side`-wide cube, over
/// `batches` batch items.
pub fn random_coords<R: Rng + ?Sized>(n: usize, side: i32, stride: i32, batches: u32, rng: &mut R) -> CoordSet {
    let mut set = CoordSet::new(stride);
    let mut guard = 0;
    while set.len() < n && guard < n * 100 {
        guard += 1;
        let mut axis = || rng.gen_range(0..side) * stride;
        let c = Coord::new(0, axis(), axis(), axis());
        let c = Coord { batch: rng.gen_range(0..batches), ..c };
        set.insert(c);
    }
    set
}

fn conv_case<'f>(rng: &mut ChaCha8Rng, stride: i32) -> Result<Instance<'f>> {
    let (m_in, m_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let ks = [1, 3][rng.gen_range(0..2)];
    let coords = Arc::new(random_coords(rng.gen_range(2..14), 4, 1, 2, rng));
    let out = Arc::new(if stride == 1 { (*coords).clone() } else { downsample_coords(&coords, stride)? });
    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, "c", Kernel::cube(ks), m_in, m_out, rng.gen_bool(0.5), rng)?;
    if let Some(b) = conv.bias {
        *store.value_mut(b) = random_matrix(1, m_out, rng);
    }
    let kmap = Arc::new(build_kernel_map(&coords, &out, &conv.kernel, stride, false)?);
    let inputs = alloc::vec![random_matrix(coords.len(), m_in, rng)];
    Ok(Instance {
        store,
        inputs,
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            let x = SparseVar { coords: coords.clone(), feats: v[0] };
            Ok(conv.forward(ctx, &x, &kmap, out.clone())?.feats)
        }),
    })
}

fn transposed_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let (m_in, m_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let coords = Arc::new(random_coords(rng.gen_range(1..8), 3, 2, 2, rng));
    let kernel = Kernel::cube(3);
    let out = Arc::new(generative_expand(&coords, &kernel, 2)?);
    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, "t", kernel, m_in, m_out, false, rng)?;
    let kmap = Arc::new(build_kernel_map(&coords, &out, &conv.kernel, 2, true)?);
    let inputs = alloc::vec![random_matrix(coords.len(), m_in, rng)];
    Ok(Instance {
        store,
        inputs,
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            let x = SparseVar { coords: coords.clone(), feats: v[0] };
            Ok(conv.forward(ctx, &x, &kmap, out.clone())?.feats)
        }),
    })
}

fn batch_norm_case<'f>(rng: &mut ChaCha8Rng, mode: Mode) -> Result<Instance<'f>> {
    let m = rng.gen_range(1..4);
    let n = rng.gen_range(2..10);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", m)?;
    *store.value_mut(bn.gamma) = random_matrix(1, m, rng);
    *store.value_mut(bn.beta) = random_matrix(1, m, rng);
    *store.value_mut(bn.running_mean) = random_matrix(1, m, rng);
    *store.value_mut(bn.running_var) = random_matrix(1, m, rng).map(|v| v.abs() + 0.5);
    let coords = Arc::new(random_coords(n, 4, 1, 1, rng));
    let inputs = alloc::vec![random_matrix(coords.len(), m, rng)];
    Ok(Instance {
        store,
        inputs,
        mode,
        build: alloc::boxed::Box::new(move |ctx, v| {
            Ok(bn.forward(ctx, &SparseVar { coords: coords.clone(), feats: v[0] })?.feats)
        }),
    })
}

fn unary_case<'f>(rng: &mut ChaCha8Rng, f: fn(&mut Ctx<'_, f64>, Var) -> Result<Var>) -> Result<Instance<'f>> {
    let (n, m) = (rng.gen_range(1..8), rng.gen_range(1..4));
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(n, m, rng).map(|v| v * 3.0)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| f(ctx, v[0])),
    })
}

fn pool_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let coords = Arc::new(random_coords(rng.gen_range(1..12), 4, 1, 3, rng));
    let m = rng.gen_range(1..4);
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(coords.len(), m, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            ops::global_avg_pool(&mut ctx.tape, &SparseVar { coords: coords.clone(), feats: v[0] })
        }),
    })
}

fn se_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let r = rng.gen_range(1..3);
    let m = r * rng.gen_range(1..4);
    let coords = Arc::new(random_coords(rng.gen_range(1..12), 4, 1, 2, rng));
    let mut store = ParamStore::new();
    let se = SqueezeExcite::new(&mut store, "se", m, r, rng)?;
    Ok(Instance {
        store,
        inputs: alloc::vec![random_matrix(coords.len(), m, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            Ok(se.forward(ctx, &SparseVar { coords: coords.clone(), feats: v[0] })?.feats)
        }),
    })
}

fn concat_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let a = Arc::new(random_coords(rng.gen_range(1..10), 3, 1, 1, rng));
    let b = Arc::new(random_coords(rng.gen_range(1..10), 3, 1, 1, rng));
    let (ma, mb) = (rng.gen_range(1..3), rng.gen_range(1..3));
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(a.len(), ma, rng), random_matrix(b.len(), mb, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            let x = SparseVar { coords: a.clone(), feats: v[0] };
            let y = SparseVar { coords: b.clone(), feats: v[1] };
            Ok(ops::concat(&mut ctx.tape, &x, &y)?.feats)
        }),
    })
}

fn gather_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let n = rng.gen_range(1..8);
    let rows: Vec<u32> = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..n as u32)).collect();
    let rows = Arc::new(rows);
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(n, 2, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| ctx.tape.gather_rows(v[0], rows.clone())),
    })
}

fn bce_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let n = rng.gen_range(1..10);
    let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(n, 1, rng).map(|v| 4.0 * v)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| ctx.tape.bce_with_logits(v[0], targets.clone())),
    })
}

fn ce_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let (n, c) = (rng.gen_range(1..10), rng.gen_range(2..6));
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(n, c, rng).map(|v| 3.0 * v)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| ctx.tape.weighted_cross_entropy(v[0], labels.clone(), weights.clone())),
    })
}

fn lincomb_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let lambda = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
    Ok(Instance {
        store: ParamStore::new(),
        inputs: alloc::vec![random_matrix(1, 1, rng), random_matrix(1, 1, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| ctx.tape.lin_comb(&[(v[0], 1.0), (v[1], lambda)])),
    })
}

/// conv -> BN -> ReLU -> SE on a random sparse tensor.
fn chain_case<'f>(rng: &mut ChaCha8Rng) -> Result<Instance<'f>> {
    let m_in = rng.gen_range(1..3);
    let m = 2 * rng.gen_range(1..3);
    let coords = Arc::new(random_coords(rng.gen_range(3..14), 4, 1, 2, rng));
    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, "c", Kernel::cube(3), m_in, m, false, rng)?;
    let bn = BatchNorm::new(&mut store, "bn", m)?;
    *store.value_mut(bn.beta) = random_matrix(1, m, rng);
    let se = SqueezeExcite::new(&mut store, "se", m, 2, rng)?;
    let kmap = Arc::new(build_kernel_map(&coords, &coords, &conv.kernel, 1, false)?);
    Ok(Instance {
        store,
        inputs: alloc::vec![random_matrix(coords.len(), m_in, rng)],
        mode: Mode::Train,
        build: alloc::boxed::Box::new(move |ctx, v| {
            let x = SparseVar { coords: coords.clone(), feats: v[0] };
            let y = conv.forward(ctx, &x, &kmap, coords.clone())?;
            let y = bn.forward(ctx, &y)?;
            let y = SparseVar { coords: y.coords.clone(), feats: ctx.tape.relu(y.feats) };
            Ok(se.forward(ctx, &y)?.feats)
        }),
    })
}

/// Every single-op case plus the conv/BN/ReLU/SE chain.
pub fn op_suite(seed: u64, instances: usize, probes: usize) -> Result<Vec<CaseReport>> {
    type Maker = fn(&mut ChaCha8Rng) -> Result<Instance<'static>>;
    let cases: [(&str, Maker); 17] = [
        ("sparse_conv", |r| conv_case(r, 1)),
        ("sparse_conv_stride2", |r| conv_case(r, 2)),
        ("generative_transposed_conv", transposed_case),
        ("batch_norm_train", |r| batch_norm_case(r, Mode::Train)),
        ("batch_norm_eval", |r| batch_norm_case(r, Mode::Eval)),
        ("relu", |r| unary_case(r, |c, x| Ok(c.tape.relu(x)))),
        ("sigmoid", |r| unary_case(r, |c, x| Ok(c.tape.sigmoid(x)))),
        ("global_avg_pool", pool_case),
        ("squeeze_excite", se_case),
        ("concat_features", concat_case),
        ("gather_rows", gather_case),
        ("matmul", |r| {
            let (n, k, m) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            Ok(Instance {
                store: ParamStore::new(),
                inputs: alloc::vec![random_matrix(n, k, r), random_matrix(k, m, r)],
                mode: Mode::Train,
                build: alloc::boxed::Box::new(|c, v| c.tape.matmul(v[0], v[1])),
            })
        }),
        ("add_row", |r| {
            let (n, m) = (r.gen_range(1..5), r.gen_range(1..5));
            Ok(Instance {
                store: ParamStore::new(),
                inputs: alloc::vec![random_matrix(n, m, r), random_matrix(1, m, r)],
                mode: Mode::Train,
                build: alloc::boxed::Box::new(|c, v| c.tape.add_row(v[0], v[1])),
            })
        }),
        ("bce_with_logits", bce_case),
        ("weighted_cross_entropy", ce_case),
        ("total_loss", lincomb_case),
        ("conv_bn_relu_se_chain", chain_case),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, make))| run_case(name, instances, probes, seed.wrapping_add(i as u64 * 7919), make))
        .collect()
}

/// One line per case, for logs and the CLI.
pub fn format_report(r: &CaseReport) -> String {
    format!(
        "{:<30} {:>4} instances {:>5} probes  max rel err {:.3e}  {}",
        r.name,
        r.instances,
        r.probes,
        r.max_rel_err,
        if r.passed { "ok" } else { "FAIL" }
    )
}
