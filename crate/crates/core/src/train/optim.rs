//! AdamW with decoupled weight decay and a per-step cosine schedule.

use serde::{Deserialize, Serialize};

use crate::layers::{Param, ParamKind, Parameterized};
use crate::tensor::{FloatTensor, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clamp latent binary weights to `[−c, c]` after each update.
    pub latent_clamp: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            latent_clamp: None,
        }
    }
}

/// Optimiser state: first and second moments for every trainable tensor, in
/// parameter-visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<FloatTensor<T>>,
    pub v: Vec<FloatTensor<T>>,
}

/// Parameters that receive weight decay: full-precision weights only.
pub fn decays(kind: ParamKind) -> bool {
    kind == ParamKind::Weight
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update with learning rate `lr` using the gradients stored in `model`.
    pub fn step(&mut self, model: &mut impl Parameterized<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);
        let clamp = c.latent_clamp.map(T::of);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params("", &mut |_, p: &mut Param<T>| {
            if !p.trainable() {
                return;
            }
            if m_all.len() == idx {
                m_all.push(FloatTensor::zeros(p.value.shape()));
                v_all.push(FloatTensor::zeros(p.value.shape()));
            }
            let (m, v) = (m_all[idx].data_mut(), v_all[idx].data_mut());
            idx += 1;
            let wd = decays(p.kind) && c.weight_decay != 0.0;
            let latent_clamp = if p.kind == ParamKind::LatentBinary { clamp } else { None };
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                if wd {
                    *w *= decay;
                }
                *w -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                if let Some(cl) = latent_clamp {
                    *w = w.max(-cl).min(cl);
                }
            }
        });
    }
}

/// Cosine decay from `base` at step 0 to 0 at step `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamVisitor;

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit_params(&mut self, _: &str, f: &mut ParamVisitor<'_, f64>) {
            f("p", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = One(Param::new(FloatTensor::new(&[2], vec![1.0, -1.0]).unwrap(), ParamKind::Norm));
        p.0.grad = FloatTensor::new(&[2], vec![0.3, -5.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, 0.01);
        assert!((p.0.value.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.0.value.data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn decay_and_clamp_apply_by_kind() {
        let mut w = One(Param::new(FloatTensor::full(&[1], 2.0), ParamKind::Weight));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut w, 0.1);
        assert!((w.0.value.data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);

        let mut l = One(Param::new(FloatTensor::full(&[1], 2.0), ParamKind::LatentBinary));
        let mut opt = AdamW::new(AdamWConfig {
            latent_clamp: Some(1.5),
            ..AdamWConfig::default()
        });
        opt.step(&mut l, 0.1);
        assert_eq!(l.0.value.data()[0], 1.5);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-18);
        assert!(cosine_lr(0.1, 99, 100) <= 1e-3);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
    }
}
