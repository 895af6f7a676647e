//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments for every parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every unfrozen parameter from its accumulated gradient.
    /// Frozen parameters and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be nonnegative"
            )));
        }
        for p in store.iter() {
            if !p.frozen && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(grad: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Tensor::new(vec![grad.len()], vec![0.5; grad.len()]).unwrap(),
        )
        .unwrap();
        s.by_id_mut(0).grad.data_mut().copy_from_slice(grad);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[0.0, 0.0]);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.by_id(0).value.data(), &[0.5, 0.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let lr = 1e-3;
        let mut s = store(&[3.0, -0.02, 1e-3]);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, lr).unwrap();
        for (&w, sign) in s.by_id(0).value.data().iter().zip([1.0, -1.0, 1.0]) {
            let step: f64 = w - 0.5;
            assert!((step + lr * sign).abs() <= lr * 1e-5, "{step}");
        }
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn frozen_and_zero_lr_untouched() {
        let mut s = store(&[1.0, 2.0]);
        s.by_id_mut(0).frozen = true;
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 1e-2).unwrap();
        assert_eq!(s.by_id(0).value.data(), &[0.5, 0.5]);
        assert!(adam.m[0].data().iter().all(|&x| x == 0.0));

        let mut s = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 0.0).unwrap();
        assert_eq!(s.by_id(0).value.data(), &[0.5, 0.5]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = store(&[f64::NAN]);
        let mut adam = AdamState::new(&s);
        let err = adam.step(&mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }
}
