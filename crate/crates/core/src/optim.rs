//! Adam with adaptive moments, keyed by parameter name.
//!
//! Defaults follow the training recipe used throughout: betas (0.0, 0.99),
//! lr 2e-4, eps 1e-8. State entries exist only for parameters that have
//! actually been stepped, which makes the optimizer-freeze contract
//! checkable: frozen parameters never appear.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to a single named parameter.
    pub fn update_param(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        assert_eq!(param.shape(), grad.shape(), "grad shape mismatch for {name}");
        assert!(self.t > 0, "begin_step must be called before update_param");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));

        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);

        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = grad.data();
        for i in 0..pd.len() {
            let g = gd[i];
            md[i] = b1 * md[i] + (one - b1) * g;
            vd[i] = b2 * vd[i] + (one - b2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    /// Names with moment state, sorted (exactly the parameters ever stepped).
    pub fn state_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.m.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
