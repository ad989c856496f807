//! Completion U-Net with a generative, pruning decoder, followed by a
//! coordinate-preserving segmentation U-Net.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::config::ModelConfig;
use crate::coords::{downsample_coords, generative_expand, Coord, CoordSet, OccupancyGrid, OccupancyMask, SparseTensor};
use crate::error::{bail, Result};
use crate::kmap::{build_kernel_map, Kernel, KernelMap};
use crate::matrix::Matrix;
use crate::nn::ops::{self, SparseVar};
use crate::nn::{BatchNorm, Conv, Ctx, ParamId, ParamKind, ParamStore, SqueezeExcite, Var};
use crate::scalar::Scalar;

/// conv -> BN -> ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: &Kernel,
        m_in: usize,
        m_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), kernel.clone(), m_in, m_out, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), m_out)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &SparseVar,
        kmap: &Arc<KernelMap>,
        out: &Arc<CoordSet>,
    ) -> Result<SparseVar> {
        let y = self.conv.forward(ctx, x, kmap, out.clone())?;
        let y = self.bn.forward(ctx, &y)?;
        let feats = ctx.tape.relu(y.feats);
        Ok(SparseVar { coords: y.coords, feats })
    }
}

/// Double convolution followed by optional squeeze-excite.
#[derive(Clone, Debug)]
struct Block {
    a: ConvBnRelu,
    b: ConvBnRelu,
    se: Option<SqueezeExcite>,
}

impl Block {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        kernel: &Kernel,
        m_in: usize,
        m_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a = ConvBnRelu::new(store, &format!("{name}.a"), kernel, m_in, m_out, rng)?;
        let b = ConvBnRelu::new(store, &format!("{name}.b"), kernel, m_out, m_out, rng)?;
        let se = if cfg.use_se {
            Some(SqueezeExcite::new(store, &format!("{name}.se"), m_out, cfg.se_reduction, rng)?)
        } else {
            None
        };
        Ok(Self { a, b, se })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &SparseVar, kmap: &Arc<KernelMap>) -> Result<SparseVar> {
        let y = self.a.forward(ctx, x, kmap, &x.coords)?;
        let y = self.b.forward(ctx, &y, kmap, &x.coords)?;
        match &self.se {
            Some(se) => se.forward(ctx, &y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvBnRelu,
    se: Option<SqueezeExcite>,
    fuse: ConvBnRelu,
    cls: Conv,
    threshold: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct SegNet {
    enc: Vec<Block>,
    down: Vec<ConvBnRelu>,
    up: Vec<ConvBnRelu>,
    fuse: Vec<ConvBnRelu>,
    head: Conv,
}

/// Binary ground-truth occupancy per batch item at every decoder stride.
#[derive(Clone, Debug)]
pub struct GtPyramid {
    /// `masks[b][l]` pools item `b` by `2^l`.
    masks: Vec<Vec<OccupancyMask>>,
}

impl GtPyramid {
    pub fn new(grids: &[&OccupancyGrid], depth: usize) -> Self {
        let masks = grids.iter().map(|g| (0..depth).map(|l| g.downsample_occupancy(1 << l)).collect()).collect();
        Self { masks }
    }

    pub fn batch_count(&self) -> usize {
        self.masks.len()
    }

    /// Occupancy of the stride-`2^level` cell holding `c`.
    pub fn occupied(&self, c: &Coord, level: usize) -> bool {
        self.masks.get(c.batch as usize).and_then(|m| m.get(level)).is_some_and(|m| m.occupied(c.spatial()))
    }
}

/// Occupancy logits of one decoder level before pruning.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    pub coords: Arc<CoordSet>,
    /// `n x 1`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct CompletionOutput {
    /// Coarsest level first; strides halve toward 1.
    pub levels: Vec<LevelOutput>,
    /// Pruned stride-1 tensor handed to segmentation.
    pub dense: SparseVar,
}

/// Layer structure of the two networks. Parameters live in a separate
/// [`ParamStore`] so one structure can drive both `f32` and `f64` stores.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    kernel: Kernel,
    enc: Vec<Block>,
    down: Vec<ConvBnRelu>,
    dec: Vec<DecoderLevel>,
    seg: SegNet,
}

impl Network {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let kernel = Kernel::cube(cfg.kernel_size);
        let up_kernel = Kernel::cube(3);
        let point = Kernel::cube(1);
        let d = cfg.depth();
        let ext = if cfg.ext_active() { cfg.ext_channels } else { 0 };
        let ext_at = |l: usize| if cfg.ext_depths.contains(&l) { ext } else { 0 };

        let mut enc = Vec::with_capacity(d);
        let mut down = Vec::with_capacity(d - 1);
        for l in 0..d {
            let m_in = if l == 0 { cfg.base_channels } else { cfg.enc_widths[l] } + ext_at(l);
            enc.push(Block::new(&mut store, &format!("enc{l}"), cfg, &kernel, m_in, cfg.enc_widths[l], rng)?);
            if l + 1 < d {
                down.push(ConvBnRelu::new(
                    &mut store,
                    &format!("down{l}"),
                    &kernel,
                    cfg.enc_widths[l],
                    cfg.enc_widths[l + 1],
                    rng,
                )?);
            }
        }

        let mut dec = Vec::with_capacity(d - 1);
        for j in 0..d - 1 {
            let l = d - 2 - j;
            let w = cfg.dec_widths[j];
            let m_in = if j == 0 { cfg.enc_widths[d - 1] } else { cfg.dec_widths[j - 1] };
            let name = format!("dec{l}");
            let up = ConvBnRelu::new(&mut store, &format!("{name}.up"), &up_kernel, m_in, w, rng)?;
            let se = if cfg.use_se {
                Some(SqueezeExcite::new(&mut store, &format!("{name}.se"), w, cfg.se_reduction, rng)?)
            } else {
                None
            };
            let fuse = ConvBnRelu::new(&mut store, &format!("{name}.fuse"), &kernel, w + cfg.enc_widths[l], w, rng)?;
            let cls = Conv::new(&mut store, &format!("{name}.cls"), point.clone(), w, 1, true, rng)?;
            let threshold = if cfg.learnable_threshold {
                Some(store.register(&format!("{name}.threshold"), &[1], Matrix::zeros(1, 1), ParamKind::Weight)?)
            } else {
                None
            };
            dec.push(DecoderLevel { up, se, fuse, cls, threshold });
        }

        let sw = &cfg.seg_widths;
        let ls = sw.len();
        let mut seg = SegNet { enc: vec![], down: vec![], up: vec![], fuse: vec![], head: Conv::new(&mut store, "seg.head", point, sw[0], cfg.num_classes, true, rng)? };
        for l in 0..ls {
            let m_in = if l == 0 { cfg.dec_widths[d - 2] } else { sw[l] };
            seg.enc.push(Block::new(&mut store, &format!("seg.enc{l}"), cfg, &kernel, m_in, sw[l], rng)?);
            if l + 1 < ls {
                seg.down.push(ConvBnRelu::new(&mut store, &format!("seg.down{l}"), &kernel, sw[l], sw[l + 1], rng)?);
                seg.up.push(ConvBnRelu::new(&mut store, &format!("seg.up{l}"), &up_kernel, sw[l + 1], sw[l], rng)?);
                seg.fuse.push(ConvBnRelu::new(&mut store, &format!("seg.fuse{l}"), &kernel, 2 * sw[l], sw[l], rng)?);
            }
        }
        Ok((Self { cfg: cfg.clone(), kernel, enc, down, dec, seg }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Puts a fused stride-1 tensor on the tape, split into the RGB +
    /// intensity part and the external feature channels (`None` when unused).
    pub fn split_input<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, input: &SparseTensor<T>) -> Result<(SparseVar, Option<Var>)> {
        let c = &self.cfg;
        if input.channels() != c.input_channels() {
            bail!(Shape, "input has {} channels, model expects {}", input.channels(), c.input_channels());
        }
        if input.stride() != 1 {
            bail!(Contract, "completion input must be at stride 1, got {}", input.stride());
        }
        let n = input.len();
        let e = c.ext_channels;
        let mut base = Matrix::zeros(n, c.base_channels);
        let mut ext = Matrix::zeros(n, e);
        for r in 0..n {
            let row = input.features.row(r);
            base.row_mut(r)[..3].copy_from_slice(&row[..3]);
            base.row_mut(r)[3] = row[3 + e];
            ext.row_mut(r).copy_from_slice(&row[3..3 + e]);
        }
        let x = SparseVar { coords: input.coords.clone(), feats: ctx.tape.input(base, false) };
        let ext = if c.ext_active() { Some(ctx.tape.input(ext, false)) } else { None };
        Ok((x, ext))
    }

    /// Encoder, generative decoder and pruning. Training mode needs `gt` and
    /// keeps every ground-truth-occupied voxel through pruning.
    pub fn completion_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        input: &SparseVar,
        ext: Option<Var>,
        gt: Option<&GtPyramid>,
        dims: [usize; 3],
    ) -> Result<CompletionOutput> {
        let train = ctx.is_train();
        if train && gt.is_none() {
            bail!(Config, "training-mode completion needs ground truth");
        }
        let d = self.cfg.depth();

        // Coordinate pyramid and kernel maps of the encoder.
        let mut coords = vec![input.coords.clone()];
        for l in 1..d {
            let next = downsample_coords(&coords[l - 1], 2)?;
            coords.push(Arc::new(next));
        }
        let mut same = Vec::with_capacity(d);
        for c in &coords {
            same.push(Arc::new(build_kernel_map(c, c, &self.kernel, 1, false)?));
        }

        let mut skips: Vec<SparseVar> = Vec::with_capacity(d);
        let mut x = input.clone();
        for l in 0..d {
            if l > 0 {
                let kmap = Arc::new(build_kernel_map(&coords[l - 1], &coords[l], &self.kernel, 2, false)?);
                x = self.down[l - 1].forward(ctx, &x, &kmap, &coords[l])?;
            }
            if let Some(e) = ext.filter(|_| self.cfg.ext_depths.contains(&l)) {
                let pooled = pool_to(ctx, &input.coords, e, &coords[l])?;
                x = ops::concat(&mut ctx.tape, &x, &SparseVar { coords: coords[l].clone(), feats: pooled })?;
            }
            x = self.enc[l].forward(ctx, &x, &same[l])?;
            skips.push(x.clone());
        }

        let up_kernel = Kernel::cube(3);
        let mut levels = Vec::with_capacity(d - 1);
        let mut cur = skips.pop().expect("depth >= 2");
        for (j, lvl) in self.dec.iter().enumerate() {
            let l = d - 2 - j;
            let stride = 1i32 << l;
            let expanded = Arc::new(in_bounds(&generative_expand(&cur.coords, &up_kernel, 2)?, dims));
            let kmap_t = Arc::new(build_kernel_map(&cur.coords, &expanded, &up_kernel, 2, true)?);
            let mut y = lvl.up.forward(ctx, &cur, &kmap_t, &expanded)?;
            if let Some(se) = &lvl.se {
                y = se.forward(ctx, &y)?;
            }
            let y = ops::concat(&mut ctx.tape, &y, &skips[l])?;
            let kmap = Arc::new(build_kernel_map(&expanded, &expanded, &self.kernel, 1, false)?);
            let y = lvl.fuse.forward(ctx, &y, &kmap, &expanded)?;
            let mut logits = lvl.cls.forward_pointwise(ctx, &y)?.feats;
            if let Some(t) = lvl.threshold {
                let t = ctx.param(t);
                logits = ctx.tape.add_row(logits, t)?;
            }

            let lv = ctx.tape.value(logits);
            let mut kept = Vec::new();
            let mut rows = Vec::new();
            let mut margin = f64::INFINITY;
            for (r, c) in expanded.iter().enumerate() {
                let z = lv.get(r, 0);
                let forced = train && gt.is_some_and(|g| g.occupied(c, l));
                if !forced {
                    margin = margin.min(z.as_f64().abs());
                }
                if forced || z >= T::zero() {
                    kept.push(*c);
                    rows.push(r as u32);
                }
            }
            ctx.tape.note_margin(margin);
            let feats = ctx.tape.gather_rows(y.feats, Arc::new(rows))?;
            debug_assert!(kept.iter().all(|c| c.is_multiple_of(stride)));
            let pruned = Arc::new(CoordSet::from_coords(stride, kept)?);
            levels.push(LevelOutput { level: l, coords: expanded, logits });
            cur = SparseVar { coords: pruned, feats };
        }
        Ok(CompletionOutput { levels, dense: cur })
    }

    /// Per-voxel class logits on exactly the coordinates of `dense`.
    pub fn segmentation_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, dense: &SparseVar) -> Result<SparseVar> {
        let s = &self.seg;
        let ls = s.enc.len();
        let mut coords = vec![dense.coords.clone()];
        for l in 1..ls {
            let next = downsample_coords(&coords[l - 1], 2)?;
            coords.push(Arc::new(next));
        }
        let mut same = Vec::with_capacity(ls);
        for c in &coords {
            same.push(Arc::new(build_kernel_map(c, c, &self.kernel, 1, false)?));
        }
        let mut skips = Vec::with_capacity(ls);
        let mut x = dense.clone();
        for l in 0..ls {
            if l > 0 {
                let kmap = Arc::new(build_kernel_map(&coords[l - 1], &coords[l], &self.kernel, 2, false)?);
                x = s.down[l - 1].forward(ctx, &x, &kmap, &coords[l])?;
            }
            x = s.enc[l].forward(ctx, &x, &same[l])?;
            skips.push(x.clone());
        }
        let up_kernel = Kernel::cube(3);
        let mut y = skips.pop().expect("at least two scales");
        for l in (0..ls - 1).rev() {
            let kmap = Arc::new(build_kernel_map(&coords[l + 1], &coords[l], &up_kernel, 2, true)?);
            let u = s.up[l].forward(ctx, &y, &kmap, &coords[l])?;
            let u = ops::concat(&mut ctx.tape, &u, &skips[l])?;
            y = s.fuse[l].forward(ctx, &u, &same[l], &coords[l])?;
        }
        s.head.forward_pointwise(ctx, &y)
    }
}

/// Mean of `feats` (rows on `fine`) over each cell of `coarse`.
fn pool_to<T: Scalar>(ctx: &mut Ctx<'_, T>, fine: &CoordSet, feats: Var, coarse: &CoordSet) -> Result<Var> {
    let s = coarse.stride();
    let mut groups = Vec::with_capacity(fine.len());
    for c in fine.iter() {
        match coarse.get(&c.floor_to(s)) {
            Some(r) => groups.push(r),
            None => bail!(Contract, "coordinate {:?} has no parent at stride {}", c, s),
        }
    }
    ctx.tape.group_mean(feats, Arc::new(groups), coarse.len())
}

fn in_bounds(set: &CoordSet, dims: [usize; 3]) -> CoordSet {
    let mut out = CoordSet::with_capacity(set.stride(), set.len());
    for c in set.iter() {
        let s = c.spatial();
        if (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < dims[a]) {
            out.insert(*c);
        }
    }
    out
}
