//! Parameterized layers registered in a [`ParamStore`].

use alloc::format;
use alloc::sync::Arc;

use rand::Rng;

use super::ops::{self, update_running, SparseVar};
use super::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::coords::CoordSet;
use crate::error::{bail, Result};
use crate::kmap::{Kernel, KernelMap};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Uniform fan-in initialization with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<T> {
    let bound = num_traits::Float::sqrt(6.0 / fan_in.max(1) as f64);
    let data = (0..rows * cols).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: Kernel,
    pub m_in: usize,
    pub m_out: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: Kernel,
        m_in: usize,
        m_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = kernel.volume();
        let w = kaiming_uniform(k * m_in, m_out, k * m_in, rng);
        let weight = store.register(&format!("{name}.weight"), &[k, m_in, m_out], w, ParamKind::Weight)?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), &[m_out], Matrix::zeros(1, m_out), ParamKind::Weight)?)
        } else {
            None
        };
        Ok(Self { weight, bias, kernel, m_in, m_out })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &SparseVar,
        kmap: &Arc<KernelMap>,
        out: Arc<CoordSet>,
    ) -> Result<SparseVar> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::conv(&mut ctx.tape, x, w, b, kmap.clone(), out)
    }

    /// A 1x1x1 convolution is a per-row affine map; no kernel map needed.
    pub fn forward_pointwise<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        if self.kernel.volume() != 1 {
            bail!(Contract, "pointwise forward on a kernel of volume {}", self.kernel.volume());
        }
        let w = ctx.param(self.weight);
        let mut feats = ctx.tape.matmul(x.feats, w)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            feats = ctx.tape.add_row(feats, b)?;
        }
        Ok(SparseVar { coords: x.coords.clone(), feats })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let reg = |store: &mut ParamStore<T>, suffix: &str, fill: f64, kind| {
            store.register(&format!("{name}.{suffix}"), &[channels], Matrix::filled(1, channels, T::from_f64(fill)), kind)
        };
        Ok(Self {
            gamma: reg(store, "gamma", 1.0, ParamKind::Weight)?,
            beta: reg(store, "beta", 0.0, ParamKind::Weight)?,
            running_mean: reg(store, "running_mean", 0.0, ParamKind::Buffer)?,
            running_var: reg(store, "running_var", 1.0, ParamKind::Buffer)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// buffers; an empty input passes through unchanged.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        if x.is_empty() {
            if ctx.is_train() {
                log::debug!("batch norm skipped on an empty tensor");
            }
            return Ok(x.clone());
        }
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = T::from_f64(self.eps);
        let feats = if ctx.is_train() {
            let (y, mom) = ctx.tape.batch_norm(x.feats, g, b, eps)?;
            let mut mean = ctx.store.value(self.running_mean).clone();
            let mut var = ctx.store.value(self.running_var).clone();
            update_running(
                mean.as_mut_slice(),
                var.as_mut_slice(),
                &mom.mean,
                &mom.var,
                mom.count,
                T::from_f64(self.momentum),
            );
            *ctx.store.value_mut(self.running_mean) = mean;
            *ctx.store.value_mut(self.running_var) = var;
            y
        } else {
            let mean = ctx.store.value(self.running_mean).as_slice().to_vec();
            let var = ctx.store.value(self.running_var).as_slice().to_vec();
            ctx.tape.batch_norm_eval(x.feats, g, b, &mean, &var, eps)?
        };
        Ok(SparseVar { coords: x.coords.clone(), feats })
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: ParamId,
    pub fc2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl SqueezeExcite {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            bail!(Config, "{name}: {channels} channels not divisible by reduction {reduction}");
        }
        let hidden = channels / reduction;
        let fc1 = store.register(
            &format!("{name}.fc1"),
            &[channels, hidden],
            kaiming_uniform(channels, hidden, channels, rng),
            ParamKind::Weight,
        )?;
        let fc2 = store.register(
            &format!("{name}.fc2"),
            &[hidden, channels],
            kaiming_uniform(hidden, channels, hidden, rng),
            ParamKind::Weight,
        )?;
        Ok(Self { fc1, fc2, channels, hidden })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        if x.is_empty() {
            return Ok(x.clone());
        }
        let (a, b) = (ctx.param(self.fc1), ctx.param(self.fc2));
        ops::squeeze_excite(&mut ctx.tape, x, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Matrix<f64> = kaiming_uniform(27, 8, 24, &mut rng);
        let bound = 0.5;
        assert!(m.as_slice().iter().all(|v| v.abs() < bound));
        assert!(m.as_slice().iter().any(|v| v.abs() > 0.4));
    }

    #[test]
    fn se_rejects_indivisible_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        assert!(SqueezeExcite::new(&mut store, "se", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn conv_registers_named_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let c = Conv::new(&mut store, "enc0", Kernel::cube(3), 4, 8, true, &mut rng).unwrap();
        assert_eq!(store.dims(c.weight), &[27, 4, 8]);
        assert_eq!(store.name(c.bias.unwrap()), "enc0.bias");
        assert!(store.value(c.bias.unwrap()).as_slice().iter().all(|&v| v == 0.0));
    }
}
