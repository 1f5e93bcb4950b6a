//! Bias-corrected Adam over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One optimizer step over every (name, param, grad) triple.
    ///
    /// All gradients are validated first; a non-finite gradient aborts the
    /// whole step before any parameter is touched.
    pub fn step(&mut self, updates: Vec<(String, &mut Tensor, Tensor)>, lr: f32) -> Result<()> {
        for (name, param, grad) in &updates {
            if !grad.is_finite() {
                return Err(Error::BadGradient {
                    param: name.clone(),
                });
            }
            if grad.dims() != param.dims() {
                return Err(Error::ShapeMismatch {
                    context: format!("adam_step param `{name}`"),
                    expected: format!("{:?}", param.dims()),
                    got: format!("{:?}", grad.dims()),
                });
            }
        }
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, param, grad) in updates {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));
            for i in 0..param.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors and the step counter as named tensors, for checkpoints.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}/step"), Tensor::scalar(self.step as f32))];
        for (k, t) in &self.m {
            out.push((format!("{prefix}/m/{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("{prefix}/v/{k}"), t.clone()));
        }
        out
    }

    pub fn import(prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut st = AdamState::new();
        let step_key = format!("{prefix}/step");
        let step = tensors.get(&step_key).ok_or_else(|| Error::Format {
            path: String::new(),
            message: format!("missing `{step_key}` in checkpoint"),
        })?;
        st.step = step.item() as u64;
        let mp = format!("{prefix}/m/");
        let vp = format!("{prefix}/v/");
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(&mp) {
                st.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&vp) {
                st.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(st)
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new();
        let mut p = Tensor::from_vec(vec![0.5, -0.25]);
        let before = p.clone();
        st.step(vec![("p".into(), &mut p, Tensor::zeros(vec![2]))], 0.005)
            .unwrap();
        assert_eq!(p, before);
        // idempotent under repeated zero grads: moments stay zero
        st.step(vec![("p".into(), &mut p, Tensor::zeros(vec![2]))], 0.005)
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluated_formula() {
        // m1 = 0.1, v1 = 1e-3, mhat = 1, vhat = 1 -> delta = -lr/(1+eps)
        let mut st = AdamState::new();
        let mut p = Tensor::scalar(0.0);
        st.step(vec![("p".into(), &mut p, Tensor::scalar(1.0))], 0.005)
            .unwrap();
        assert!((p.item() + 0.005).abs() < 1e-8, "{}", p.item());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut st = AdamState::new();
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let err = st
            .step(
                vec![
                    ("a".into(), &mut a, Tensor::scalar(0.5)),
                    ("b".into(), &mut b, Tensor::scalar(f32::NAN)),
                ],
                0.01,
            )
            .unwrap_err();
        assert!(matches!(err, Error::BadGradient { ref param } if param == "b"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(b.item(), 2.0);
        assert_eq!(st.step, 0);
    }
}
