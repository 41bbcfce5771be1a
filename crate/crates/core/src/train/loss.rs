//! Distillation loss: `α·τ²·KL(p_teacher ‖ p_student) + (1−α)·CE(student, labels)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            temperature: 1.0,
        }
    }
}

impl KdLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Row-wise `log_softmax(x / t)` in f64.
pub fn log_softmax<T: Real>(row: &[T], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

fn check_logits<T: Real>(logits: &FloatTensor<T>, what: &str) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        ref s => Err(Error::shape(format!("{what} logits must be a non-empty [B, K], got {s:?}"))),
    }
}

/// Batch-mean loss and its gradient with respect to the student logits.
/// `teacher` may be omitted only when `alpha == 0`.
pub fn kd_loss<T: Real>(
    student: &FloatTensor<T>,
    teacher: Option<&FloatTensor<T>>,
    labels: &[usize],
    cfg: KdLossConfig,
) -> Result<(f64, FloatTensor<T>)> {
    cfg.validate()?;
    let (b, k) = check_logits(student, "student")?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let teacher = match teacher {
        Some(t) => {
            student.expect_same_shape(t, "teacher logits")?;
            Some(t)
        }
        None if cfg.alpha == 0.0 => None,
        None => return Err(Error::invalid("a teacher is required when alpha > 0")),
    };
    let (alpha, tau) = (cfg.alpha, cfg.temperature);
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for i in 0..b {
        let s = &student.data()[i * k..(i + 1) * k];
        let ls = log_softmax(s, 1.0);
        let ce = -ls[labels[i]];
        let mut g: Vec<f64> = ls.iter().map(|v| (1.0 - alpha) * v.exp()).collect();
        g[labels[i]] -= 1.0 - alpha;
        let mut kl = 0.0;
        if let (Some(t), true) = (teacher, alpha > 0.0) {
            let lt = log_softmax(&t.data()[i * k..(i + 1) * k], tau);
            let lst = if tau == 1.0 { ls.clone() } else { log_softmax(s, tau) };
            for j in 0..k {
                let pt = lt[j].exp();
                if pt > 0.0 {
                    kl += pt * (lt[j] - lst[j]);
                }
                g[j] += alpha * tau * (lst[j].exp() - pt);
            }
        }
        loss += alpha * tau * tau * kl + (1.0 - alpha) * ce;
        grad.extend(g.into_iter().map(|v| T::of(v * inv_b)));
    }
    Ok((loss * inv_b, FloatTensor::new(&[b, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_zero_is_cross_entropy() {
        let s = FloatTensor::new(&[1, 3], vec![1.0f64, 2.0, 0.5]).unwrap();
        let (l, _) = kd_loss(&s, None, &[1], KdLossConfig { alpha: 0.0, temperature: 1.0 }).unwrap();
        let lse = (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp()).ln();
        assert!((l - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn matching_teacher_alpha_one_is_zero() {
        let s = FloatTensor::new(&[2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 0.0, 0.0]).unwrap();
        for tau in [1.0, 2.0, 4.0] {
            let (l, g) = kd_loss(&s, Some(&s), &[0, 1], KdLossConfig { alpha: 1.0, temperature: tau }).unwrap();
            assert!(l.abs() < 1e-12);
            assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn errors() {
        let s = FloatTensor::<f64>::zeros(&[2, 3]);
        assert!(kd_loss(&s, None, &[0, 1], KdLossConfig { alpha: 1.5, temperature: 1.0 }).is_err());
        assert!(kd_loss(&s, None, &[0, 1], KdLossConfig::default()).is_err());
        assert!(kd_loss(&s, None, &[0], KdLossConfig { alpha: 0.0, temperature: 1.0 }).is_err());
        assert!(kd_loss(&s, None, &[0, 3], KdLossConfig { alpha: 0.0, temperature: 1.0 }).is_err());
    }

    #[test]
    fn default_alpha() {
        assert_eq!(KdLossConfig::default().alpha, 0.9);
    }
}
