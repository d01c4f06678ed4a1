//! ADAM optimizer with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
/// Parameters are keyed by name; the map is ordered so serialization and
/// iteration are deterministic.
pub struct AdamState<E: Scalar> {
    pub moments: BTreeMap<String, (Tensor<E>, Tensor<E>)>,
    pub t: u64,
}

impl<E: Scalar> Default for AdamState<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> AdamState<E> {
    pub fn new() -> Self {
        AdamState { moments: BTreeMap::new(), t: 0 }
    }

    /// One optimizer step over named (parameter, gradient) pairs, applied in
    /// place. Refuses the whole step if any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor<E>)>,
        grads: &BTreeMap<String, Tensor<E>>,
        hyper: &AdamHyper,
    ) -> Result<()> {
        let pairs: Vec<(&str, &mut Tensor<E>)> = params.collect();
        for (name, param) in &pairs {
            let grad = grads
                .get(*name)
                .ok_or_else(|| Error::contract(format!("missing gradient for {name}")))?;
            if grad.shape() != param.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} vs parameter {:?} for {name}",
                    grad.shape(),
                    param.shape()
                )));
            }
            if !grad.all_finite() {
                return Err(Error::numerics(format!("non-finite gradient for {name}")));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let b1 = E::from_f64(hyper.beta1);
        let b2 = E::from_f64(hyper.beta2);
        let one_m_b1 = E::from_f64(1.0 - hyper.beta1);
        let one_m_b2 = E::from_f64(1.0 - hyper.beta2);
        let corr1 = E::from_f64(1.0 - hyper.beta1.powi(t));
        let corr2 = E::from_f64(1.0 - hyper.beta2.powi(t));
        let lr = E::from_f64(hyper.lr);
        let eps = E::from_f64(hyper.eps);

        for (name, param) in pairs {
            let grad = &grads[name];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            for i in 0..param.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + one_m_b1 * g;
                let vi = b2 * v.data()[i] + one_m_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(&[value.len()], value).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = one_param(&[1.0, -2.0]);
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        state
            .step(std::iter::once(("w", &mut p)), &grads, &AdamHyper::default())
            .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        // at t=1 the bias-corrected update is -lr * g/(|g| + eps')
        let hyper = AdamHyper::default();
        let mut p = one_param(&[0.5, 0.5]);
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), one_param(&[3.0, -0.004]));
        state.step(std::iter::once(("w", &mut p)), &grads, &hyper).unwrap();
        let d0 = p.data()[0] - 0.5;
        let d1 = p.data()[1] - 0.5;
        assert!((d0 + hyper.lr).abs() < 1e-6, "step vs -lr*sign: {d0}");
        assert!((d1 - hyper.lr).abs() < 1e-5, "step vs +lr: {d1}");
    }

    #[test]
    fn descends_quadratic() {
        // f(w) = w^2 from w=1: three steps strictly decrease f
        let hyper = AdamHyper { lr: 0.1, ..Default::default() };
        let mut p = one_param(&[1.0]);
        let mut state = AdamState::new();
        let mut last = 1.0f64;
        for _ in 0..3 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), one_param(&[2.0 * p.data()[0]]));
            state.step(std::iter::once(("w", &mut p)), &grads, &hyper).unwrap();
            let f = p.data()[0] * p.data()[0];
            assert!(f < last, "{f} !< {last}");
            last = f;
        }
    }

    #[test]
    fn nan_gradient_refused() {
        let mut p = one_param(&[1.0]);
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), one_param(&[f64::NAN]));
        let r = state.step(std::iter::once(("w", &mut p)), &grads, &AdamHyper::default());
        assert!(matches!(r, Err(crate::error::Error::Numerics(_))));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(state.t, 0);
    }
}
