//! Adam with bias correction, and global-norm gradient clipping.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::ParamStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for `{name}` at index {index}: {value}")]
    NonFinite { name: String, index: usize, value: f64 },
    #[error("gradient for `{name}` has {got} values, parameter has {want}")]
    Shape { name: String, got: usize, want: usize },
    #[error("gradient for unknown parameter `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has an entry in `grads`. Nothing
    /// is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<(), OptimError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| OptimError::Unknown(name.clone()))?;
            if p.len() != g.len() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    got: g.len(),
                    want: p.len(),
                });
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    name: name.clone(),
                    index,
                    value,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::vector(vec![v]));
        s
    }

    fn grad(v: Vec<f64>) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("t".to_string(), v)])
    }

    #[test]
    fn quadratic_three_steps_match_hand_trace() {
        // f(θ) = θ², g = 2θ, β1 = 0.9, β2 = 0.999, lr = 0.1, θ0 = 1
        let mut expect = Vec::new();
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expect.push(th);
        }
        // first step moves by lr almost exactly
        assert!((expect[0] - 0.9).abs() < 1e-8);

        let mut p = single(1.0);
        let mut opt = Adam::new(0.1);
        for want in expect {
            let th = p.get("t").unwrap().data()[0];
            opt.step(&mut p, &grad(vec![2.0 * th])).unwrap();
            assert!((p.get("t").unwrap().data()[0] - want).abs() < 1e-12);
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = ParamStore::new();
        p.insert("t", Tensor::vector(vec![0.0, 0.0, 0.0]));
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &grad(vec![3.0, -0.5, 1e3])).unwrap();
        for (got, sign) in p.get("t").unwrap().data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((got - sign * 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn first_step_sign_pattern_is_scale_free() {
        let g = vec![0.3, -2.0, 0.0, 5.0];
        let run = |c: f64| {
            let mut p = ParamStore::new();
            p.insert("t", Tensor::vector(vec![0.0; 4]));
            Adam::new(0.1).step(&mut p, &grad(g.iter().map(|v| v * c).collect())).unwrap();
            p.get("t").unwrap().data().iter().map(|v| v.signum() as i32 * i32::from(*v != 0.0)).collect::<Vec<_>>()
        };
        assert_eq!(run(1.0), run(1000.0));
        assert_eq!(run(1.0), run(0.001));
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = single(0.7);
        Adam::new(0.1).step(&mut p, &grad(vec![0.0])).unwrap();
        assert_eq!(p.get("t").unwrap().data()[0], 0.7);
    }

    #[test]
    fn bad_gradients_abort_without_update() {
        let mut p = single(0.7);
        let mut opt = Adam::new(0.1);
        let err = opt.step(&mut p, &grad(vec![f64::NAN])).unwrap_err();
        assert!(err.to_string().contains("`t`"));
        assert!(opt.step(&mut p, &grad(vec![1.0, 2.0])).is_err());
        assert_eq!(p.get("t").unwrap().data()[0], 0.7);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
        let before = g.clone();
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g, before);
    }
}
