//! Adam and the cosine learning-rate schedule.

use alloc::vec::Vec;

use num_traits::Float;

use super::params::{ParamId, ParamStore};
use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// `lr0 * (1 + cos(pi * step / total)) / 2`, reaching 0 at `step == total`
/// and staying there afterwards.
pub fn cosine_anneal(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr0 * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * t))
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Matrix<T>>>,
    v: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Matrix<T>)],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - Float::powi(state.beta1, t);
    let c2 = 1.0 - Float::powi(state.beta2, t);
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(state.eps);
    for (id, g) in grads {
        if !store.is_trainable(*id) {
            continue;
        }
        let p = store.value_mut(*id);
        if p.rows() != g.rows() || p.cols() != g.cols() {
            bail!(Shape, "gradient {}x{} for parameter {}x{}", g.rows(), g.cols(), p.rows(), p.cols());
        }
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        let v = state.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        for (((p, &g), m), v) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_anneal(1e-4, 0, 100), 1e-4);
        assert!(cosine_anneal(1e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_anneal(1e-4, 50, 100) - 5e-5).abs() < 1e-15);
        assert!(cosine_anneal(1e-4, 150, 100).abs() < 1e-20);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("p", &[2], Matrix::from_vec(1, 2, alloc::vec![1.0, 1.0]).unwrap(), ParamKind::Weight).unwrap();
        let mut st = AdamState::new();
        let g = Matrix::from_vec(1, 2, alloc::vec![0.3, -2.0]).unwrap();
        adam_step(&mut store, &[(id, g)], &mut st, 1e-3).unwrap();
        let p = store.value(id).as_slice();
        // The first bias-corrected step has magnitude lr in every coordinate.
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("p", &[1], Matrix::scalar(1.0), ParamKind::Weight).unwrap();
        store.set_trainable(id, false);
        let mut st = AdamState::new();
        adam_step(&mut store, &[(id, Matrix::scalar(1.0))], &mut st, 0.1).unwrap();
        assert_eq!(store.value(id).get(0, 0), 1.0);
    }
}
