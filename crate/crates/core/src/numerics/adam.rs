use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam update. `lr_scale` multiplies the
    /// configured learning rate (for schedules).
    pub fn update(&mut self, param: &mut Matrix<T>, grad: &Matrix<T>, lr_scale: f64) -> Result<()> {
        if !param.same_shape(grad) || !param.same_shape(&self.m) {
            return Err(invalid(format!(
                "adam: parameter {:?}, gradient {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let lr = lr * lr_scale;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let p = param.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (i, g) in grad.data().iter().enumerate() {
            let g = g.as_f64();
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
            m[i] = T::cast(mi);
            v[i] = T::cast(vi);
            let mhat = mi / c1;
            let vhat = vi / c2;
            p[i] = T::cast(p[i].as_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameter and advances `state`.
pub fn adam_step<T: Real>(
    param: &Matrix<T>,
    grad: &Matrix<T>,
    state: &mut AdamState<T>,
) -> Result<Matrix<T>> {
    let mut out = param.clone();
    state.update(&mut out, grad, 1.0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitMix64;

    #[test]
    fn zero_gradient_leaves_param() {
        let p = Matrix::<f32>::from_fn(2, 3, |r, c| (r + c) as f32);
        let g = Matrix::zeros(2, 3);
        let mut s = AdamState::new(2, 3, AdamConfig::with_lr(0.1));
        assert_eq!(adam_step(&p, &g, &mut s).unwrap(), p);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.01);
        for g0 in [0.3f64, -2.0, 1e-3] {
            let p = Matrix::<f64>::row_vector(vec![1.0]);
            let g = Matrix::<f64>::row_vector(vec![g0]);
            let mut s = AdamState::new(1, 1, cfg);
            let out = adam_step(&p, &g, &mut s).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let want = 1.0 - 0.01 * g0 / (g0.abs() + 1e-8);
            assert!((out.get(0, 0) - want).abs() < 1e-15);
            assert!((out.get(0, 0) - (1.0 - 0.01 * g0.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Matrix::<f32>::zeros(2, 2);
        let g = Matrix::<f32>::zeros(2, 3);
        let mut s = AdamState::new(2, 2, AdamConfig::with_lr(0.1));
        assert!(adam_step(&p, &g, &mut s).is_err());
    }

    #[test]
    fn deterministic() {
        let p = Matrix::<f32>::from_fn(3, 3, |r, c| (r * 3 + c) as f32 * 0.1);
        let g = Matrix::<f32>::from_fn(3, 3, |r, c| (r as f32 - c as f32) * 0.2);
        let mut s1 = AdamState::new(3, 3, AdamConfig::with_lr(0.05));
        let mut s2 = s1.clone();
        assert_eq!(
            adam_step(&p, &g, &mut s1).unwrap(),
            adam_step(&p, &g, &mut s2).unwrap()
        );
    }

    #[test]
    fn matches_scalar_reference_over_many_steps() {
        let cfg = AdamConfig {
            lr: 0.003,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-6,
        };
        let n = 7;
        let mut rng = SplitMix64::new(11);
        let mut p = Matrix::<f64>::from_fn(1, n, |_, _| rng.normal());
        let mut state = AdamState::new(1, n, cfg);
        let mut ref_p: Vec<f64> = p.data().to_vec();
        let mut ref_m = vec![0.0; n];
        let mut ref_v = vec![0.0; n];
        for t in 1..=100 {
            let g = Matrix::<f64>::from_fn(1, n, |_, _| rng.normal());
            p = adam_step(&p, &g, &mut state).unwrap();
            for i in 0..n {
                let gi = g.get(0, i);
                ref_m[i] = cfg.beta1 * ref_m[i] + (1.0 - cfg.beta1) * gi;
                ref_v[i] = cfg.beta2 * ref_v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = ref_m[i] / (1.0 - cfg.beta1.powi(t));
                let vh = ref_v[i] / (1.0 - cfg.beta2.powi(t));
                ref_p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        for i in 0..n {
            assert!((p.get(0, i) - ref_p[i]).abs() < 1e-6);
        }
    }
}
