//! AdamW with decoupled weight decay.
//!
//! ```text
//! m = β₁ m + (1 - β₁) g
//! v = β₂ v + (1 - β₂) g²
//! θ = θ - lr · ( m̂ / (√v̂ + ε) + λ θ )      λ = 0 for norm and bias parameters
//! ```

use super::matrix::Matrix;
use super::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &ParameterSet, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.kind.decays())).collect();
        for (id, decays) in ids {
            let i = id.index();
            let wd = if decays { weight_decay } else { 0.0 };
            let theta = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, &g) in grads[i].data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                theta[k] -= lr * (mh / (vh.sqrt() + eps) + wd * theta[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::params::ParamKind;

    fn single(value: f64, kind: ParamKind) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.add("w", kind, Matrix::filled(1, 1, value)).unwrap();
        p
    }

    #[test]
    fn descends_on_square() {
        let mut p = single(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let w = p.value(p.id("w").unwrap()).get(0, 0);
        opt.step(&mut p, &[Matrix::filled(1, 1, 2.0 * w)]);
        assert!(p.value(p.id("w").unwrap()).get(0, 0) < 1.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = single(0.7, ParamKind::Weight);
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..5 {
            opt.step(&mut p, &[Matrix::zeros(1, 1)]);
        }
        assert_eq!(p.value(p.id("w").unwrap()).get(0, 0), 0.7);
    }

    #[test]
    fn decay_skips_bias_and_norm() {
        for (kind, changes) in [
            (ParamKind::Weight, true),
            (ParamKind::Embedding, true),
            (ParamKind::Bias, false),
            (ParamKind::Norm, false),
        ] {
            let mut p = single(1.0, kind);
            let mut opt = AdamW::new(
                &p,
                AdamWConfig {
                    lr: 0.1,
                    weight_decay: 0.5,
                    ..Default::default()
                },
            );
            opt.step(&mut p, &[Matrix::zeros(1, 1)]);
            let w = p.value(p.id("w").unwrap()).get(0, 0);
            assert_eq!(w != 1.0, changes, "{kind:?}");
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x, y) = 0.5 (3 x² + y²) + x y / 2, minimum at the origin
        let grad = |x: f64, y: f64| (3.0 * x + 0.5 * y, y + 0.5 * x);
        let mut p = ParameterSet::new();
        let id = p
            .add("w", ParamKind::Weight, Matrix::row_vector(&[1.5, -2.0]))
            .unwrap();
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for step in 0..200 {
            if step == 150 {
                opt.set_lr(0.005);
            }
            let w = p.value(id).data().to_vec();
            let (gx, gy) = grad(w[0], w[1]);
            opt.step(&mut p, &[Matrix::row_vector(&[gx, gy])]);
        }
        let w = p.value(id).data().to_vec();
        let (gx, gy) = grad(w[0], w[1]);
        assert!(gx.hypot(gy) < 1e-3, "|grad| = {}", gx.hypot(gy));
    }
}
