//! Optimizers over named parameter gradients.
//!
//! Both optimizers read the gradient buffers stored on the parameters,
//! skip running statistics, honor a name filter (used to freeze the
//! saliency encoder), and reject the whole step if any gradient is
//! non-finite.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::ParameterSet;

fn check_finite<T: Scalar>(params: &ParameterSet<T>, names: &[String]) -> Result<()> {
    for n in names {
        if let Some(g) = params.get(n)?.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{n}`")));
            }
        }
    }
    Ok(())
}

fn selected<T: Scalar>(params: &ParameterSet<T>, filter: impl Fn(&str) -> bool) -> Vec<String> {
    params
        .trainable_names()
        .into_iter()
        .filter(|n| filter(n))
        .collect()
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    lr: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    let names = selected(params, filter);
    check_finite(params, &names)?;
    let lr = T::of64(lr);
    for n in &names {
        let a = params.get_mut(n)?;
        if a.grad().is_none() {
            continue;
        }
        let g = a.grad().unwrap().to_vec();
        for (p, gv) in a.values_mut().iter_mut().zip(g) {
            *p = *p - lr * gv;
        }
    }
    Ok(())
}

/// Adam state: first/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction.
    pub fn step(
        &mut self,
        params: &mut ParameterSet<T>,
        lr: f64,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let names = selected(params, filter);
        check_finite(params, &names)?;
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for n in &names {
            let a = params.get_mut(n)?;
            if a.grad().is_none() {
                continue;
            }
            let g = a.grad().unwrap().to_vec();
            let m = self.m.entry(n.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(n.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let vals = a.values_mut();
            for i in 0..g.len() {
                let gf = g[i].as64();
                let mf = b1 * m[i].as64() + (1.0 - b1) * gf;
                let vf = b2 * v[i].as64() + (1.0 - b2) * gf * gf;
                m[i] = T::of64(mf);
                v[i] = T::of64(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                vals[i] = vals[i] - T::of64(update);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParameterSet, SpecBuilder};
    use crate::tensor::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param_set(value: f64) -> ParameterSet<f64> {
        let (mut b, x) = SpecBuilder::new(vec![1]);
        let o = b.linear(x, "fc", 1);
        let spec = b.finish(o);
        let mut p = ParameterSet::<f64>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *p.get_mut("fc.weight").unwrap() = Array::from_vec(&[1, 1], vec![value]).unwrap();
        *p.get_mut("fc.bias").unwrap() = Array::from_vec(&[1], vec![0.0]).unwrap();
        p
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = one_param_set(0.3);
        p.get_mut("fc.weight").unwrap().grad_mut();
        sgd_step(&mut p, 0.5, |_| true).unwrap();
        assert_eq!(p.get("fc.weight").unwrap().values()[0], 0.3);
    }

    #[test]
    fn sgd_single_step_matches_update_rule() {
        let mut p = one_param_set(1.0);
        p.get_mut("fc.weight").unwrap().grad_mut()[0] = 2.0;
        sgd_step(&mut p, 0.1, |_| true).unwrap();
        assert!((p.get("fc.weight").unwrap().values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_quadratic_bowl_monotonically() {
        // loss = p^2/2, gradient = p, closed form p_t = p_0 (1 - lr)^t.
        let mut p = one_param_set(1.0);
        let lr = 0.01;
        let mut prev_loss = f64::INFINITY;
        for t in 1..=100 {
            let w = p.get("fc.weight").unwrap().values()[0];
            let loss = 0.5 * w * w;
            assert!(loss < prev_loss);
            prev_loss = loss;
            p.get_mut("fc.weight").unwrap().grad_mut()[0] = w;
            sgd_step(&mut p, lr, |_| true).unwrap();
            let expect = (1.0f64 - lr).powi(t);
            assert!((p.get("fc.weight").unwrap().values()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for lr in [0.1, 0.001] {
            let mut p = one_param_set(0.0);
            p.get_mut("fc.weight").unwrap().grad_mut()[0] = 1.0;
            let mut adam = AdamState::new();
            adam.step(&mut p, lr, |_| true).unwrap();
            let got = -p.get("fc.weight").unwrap().values()[0];
            assert!((got - lr).abs() < lr * 1e-6, "lr {lr} gave {got}");
        }
    }

    #[test]
    fn adam_trace_matches_reference_updates() {
        // Independent recomputation of the update equations on a fixed
        // gradient sequence.
        let grads = [0.5, -1.25, 2.0, 0.0, 0.75];
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p = one_param_set(0.2);
        let mut adam = AdamState::new();
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.2f64);
        for (t, g) in grads.iter().enumerate() {
            p.get_mut("fc.weight").unwrap().zero_grad();
            p.get_mut("fc.weight").unwrap().grad_mut()[0] = *g;
            adam.step(&mut p, lr, |_| true).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * mh / (vh.sqrt() + eps);
            assert!((p.get("fc.weight").unwrap().values()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // loss = (p - 3)^2 / 2; 50 steps from 0 should close most of the gap.
        let mut p = one_param_set(0.0);
        let mut adam = AdamState::new();
        for _ in 0..50 {
            let w = p.get("fc.weight").unwrap().values()[0];
            p.get_mut("fc.weight").unwrap().zero_grad();
            p.get_mut("fc.weight").unwrap().grad_mut()[0] = w - 3.0;
            adam.step(&mut p, 0.2, |_| true).unwrap();
        }
        let w = p.get("fc.weight").unwrap().values()[0];
        assert!((w - 3.0).abs() < 0.3, "got {w}");
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = one_param_set(1.0);
        p.get_mut("fc.weight").unwrap().grad_mut()[0] = f64::NAN;
        let err = sgd_step(&mut p, 0.1, |_| true);
        assert!(matches!(err, Err(crate::Error::NonFinite(_))));
        assert_eq!(p.get("fc.weight").unwrap().values()[0], 1.0);
    }

    #[test]
    fn filter_freezes_parameters() {
        let mut p = one_param_set(1.0);
        p.get_mut("fc.weight").unwrap().grad_mut()[0] = 1.0;
        p.get_mut("fc.bias").unwrap().grad_mut()[0] = 1.0;
        sgd_step(&mut p, 0.1, |n| n.starts_with("fc.bias")).unwrap();
        assert_eq!(p.get("fc.weight").unwrap().values()[0], 1.0);
        assert!((p.get("fc.bias").unwrap().values()[0] + 0.1).abs() < 1e-15);
    }
}
