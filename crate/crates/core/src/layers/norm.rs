//! Per-channel batch normalization over channels-last tensors.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Real> {
    pub scale: FloatTensor<T>,
    pub shift: FloatTensor<T>,
    pub running_mean: FloatTensor<T>,
    pub running_var: FloatTensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: FloatTensor::full(&[channels], T::one()),
            shift: FloatTensor::zeros(&[channels]),
            running_mean: FloatTensor::zeros(&[channels]),
            running_var: FloatTensor::full(&[channels], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::invalid(format!("batch-norm epsilon must be > 0, got {}", self.eps)));
        }
        if self.running_var.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("batch-norm running variance is negative"));
        }
        Ok(())
    }
}

/// Values saved by the forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Real> {
    pub xhat: FloatTensor<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Normalizes every channel of `x: [..., C]`. In training mode batch
/// statistics are used and the running statistics are updated.
pub fn batchnorm_forward<T: Real>(
    x: &FloatTensor<T>,
    p: &mut BatchNormParams<T>,
    training: bool,
) -> Result<(FloatTensor<T>, BnCache<T>)> {
    let c = p.channels();
    if x.last_dim() != c || x.rank() == 0 {
        return Err(Error::shape(format!("batch norm over {c} channels got {:?}", x.shape())));
    }
    let rows = x.rows();
    let eps = T::of(p.eps);
    let (mean, var) = if training {
        if rows < 2 {
            return Err(Error::invalid("batch norm in training mode needs at least 2 values per channel"));
        }
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        let mom = p.momentum;
        for ch in 0..c {
            let biased = var[ch] / rows as f64;
            let unbiased = var[ch] / (rows - 1) as f64;
            let rm = &mut p.running_mean.data_mut()[ch];
            *rm = T::of((1.0 - mom) * rm.as_f64() + mom * mean[ch]);
            let rv = &mut p.running_var.data_mut()[ch];
            *rv = T::of((1.0 - mom) * rv.as_f64() + mom * unbiased);
            var[ch] = biased;
        }
        (
            mean.into_iter().map(T::of).collect::<Vec<_>>(),
            var.into_iter().map(T::of).collect::<Vec<_>>(),
        )
    } else {
        (p.running_mean.data().to_vec(), p.running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let (scale, shift) = (p.scale.data(), p.shift.data());
    for (hrow, yrow) in xhat.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
        for ch in 0..c {
            let h = (hrow[ch] - mean[ch]) * inv_std[ch];
            hrow[ch] = h;
            yrow[ch] = h * scale[ch] + shift[ch];
        }
    }
    Ok((y, BnCache { xhat, inv_std, training }))
}

/// Returns `(grad_x, grad_scale, grad_shift)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    p: &BatchNormParams<T>,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, FloatTensor<T>, FloatTensor<T>)> {
    grad_out.expect_same_shape(&cache.xhat, "batch-norm backward")?;
    let c = p.channels();
    let rows = grad_out.rows();
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for (grow, hrow) in grad_out.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            gscale[ch] += grow[ch] * hrow[ch];
            gshift[ch] += grow[ch];
        }
    }
    let scale = p.scale.data();
    let mut gx = grad_out.clone();
    if cache.training {
        let n = T::of(rows as f64);
        for (grow, hrow) in gx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                let k = scale[ch] * cache.inv_std[ch] / n;
                grow[ch] = k * (n * grow[ch] - gshift[ch] - hrow[ch] * gscale[ch]);
            }
        }
    } else {
        for grow in gx.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                grow[ch] *= scale[ch] * cache.inv_std[ch];
            }
        }
    }
    Ok((gx, FloatTensor::new(&[c], gscale)?, FloatTensor::new(&[c], gshift)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        let x = FloatTensor::new(&[4, 1], vec![-1.0f64, 1.0, -1.0, 1.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        let (y, _) = batchnorm_forward(&x, &mut p, true).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_channel_yields_shift() {
        let x = FloatTensor::<f32>::full(&[5, 2], 3.0);
        let mut p = BatchNormParams::new(2);
        p.shift = FloatTensor::new(&[2], vec![0.5, -0.25]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut p, true).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -0.25]);
        }
    }

    #[test]
    fn matches_two_pass_oracle_and_updates_running_stats() {
        let x = FloatTensor::from_fn(&[6, 3], |i| ((i * 17) % 13) as f64 * 0.3 - 1.0);
        let mut p = BatchNormParams::new(3);
        let (y, _) = batchnorm_forward(&x, &mut p, true).unwrap();
        for ch in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| x.data()[r * 3 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for r in 0..6 {
                let expect = (col[r] - mean) / (var + 1e-5).sqrt();
                assert!((y.data()[r * 3 + ch] - expect).abs() < 1e-12);
            }
            assert!((p.running_mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
            assert!((p.running_var.data()[ch] - (0.9 + 0.1 * var * 6.0 / 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_training_is_rejected() {
        let x = FloatTensor::<f32>::zeros(&[1, 4]);
        let mut p = BatchNormParams::new(4);
        assert!(batchnorm_forward(&x, &mut p, true).is_err());
        assert!(batchnorm_forward(&x, &mut p, false).is_ok());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.running_mean = FloatTensor::new(&[1], vec![2.0]).unwrap();
        p.running_var = FloatTensor::new(&[1], vec![4.0 - 1e-5]).unwrap();
        let x = FloatTensor::new(&[1, 1], vec![4.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut p, false).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.running_mean.data(), &[2.0]);
    }
}
