//! RPReLU and the simpler activations it degenerates to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

/// Which parameters of the shifted PReLU are live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    /// Learnable shifts and slope.
    #[default]
    Rprelu,
    /// Learnable slope only.
    Prelu,
    /// No parameters; slope 0.
    Relu,
}

/// Per-channel input shift `gamma`, negative slope `beta`, output shift `zeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpreluParams<T: Real> {
    pub gamma: FloatTensor<T>,
    pub beta: FloatTensor<T>,
    pub zeta: FloatTensor<T>,
    pub kind: ActivationKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpreluGrads<T: Real> {
    pub gamma: FloatTensor<T>,
    pub beta: FloatTensor<T>,
    pub zeta: FloatTensor<T>,
}

impl<T: Real> RpreluParams<T> {
    pub fn new(channels: usize, kind: ActivationKind) -> Self {
        let slope = if kind == ActivationKind::Relu { 0.0 } else { 0.25 };
        Self {
            gamma: FloatTensor::zeros(&[channels]),
            beta: FloatTensor::full(&[channels], T::of(slope)),
            zeta: FloatTensor::zeros(&[channels]),
            kind,
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    fn effective(&self, ch: usize) -> (T, T, T) {
        match self.kind {
            ActivationKind::Rprelu => (self.gamma.data()[ch], self.beta.data()[ch], self.zeta.data()[ch]),
            ActivationKind::Prelu => (T::zero(), self.beta.data()[ch], T::zero()),
            ActivationKind::Relu => (T::zero(), T::zero(), T::zero()),
        }
    }
}

fn check<T: Real>(x: &FloatTensor<T>, p: &RpreluParams<T>) -> Result<usize> {
    let c = p.channels();
    if x.last_dim() != c || p.gamma.len() != c || p.zeta.len() != c {
        return Err(Error::shape(format!("activation over {c} channels got {:?}", x.shape())));
    }
    Ok(c)
}

/// `x > γ ? (x − γ) + ζ : β(x − γ) + ζ`, per channel.
pub fn rprelu_forward<T: Real>(x: &FloatTensor<T>, p: &RpreluParams<T>) -> Result<FloatTensor<T>> {
    let c = check(x, p)?;
    let params: Vec<_> = (0..c).map(|ch| p.effective(ch)).collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for (v, &(g, b, z)) in row.iter_mut().zip(&params) {
            let s = *v - g;
            *v = if s > T::zero() { s + z } else { b * s + z };
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grads)`; gradients of parameters the kind does not
/// learn are zero.
pub fn rprelu_backward<T: Real>(
    x: &FloatTensor<T>,
    p: &RpreluParams<T>,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, RpreluGrads<T>)> {
    let c = check(x, p)?;
    grad_out.expect_same_shape(x, "activation backward")?;
    let params: Vec<_> = (0..c).map(|ch| p.effective(ch)).collect();
    let mut gx = grad_out.clone();
    let (mut gg, mut gb, mut gz) = (vec![T::zero(); c], vec![T::zero(); c], vec![T::zero(); c]);
    for (grow, xrow) in gx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for ch in 0..c {
            let (g, b, _) = params[ch];
            let up = grow[ch];
            let s = xrow[ch] - g;
            let slope = if s > T::zero() {
                T::one()
            } else {
                gb[ch] += up * s;
                b
            };
            gz[ch] += up;
            gg[ch] -= up * slope;
            grow[ch] = up * slope;
        }
    }
    match p.kind {
        ActivationKind::Rprelu => {}
        ActivationKind::Prelu => {
            gg.fill(T::zero());
            gz.fill(T::zero());
        }
        ActivationKind::Relu => {
            gg.fill(T::zero());
            gb.fill(T::zero());
            gz.fill(T::zero());
        }
    }
    Ok((
        gx,
        RpreluGrads {
            gamma: FloatTensor::new(&[c], gg)?,
            beta: FloatTensor::new(&[c], gb)?,
            zeta: FloatTensor::new(&[c], gz)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(g: f64, b: f64, z: f64) -> RpreluParams<f64> {
        RpreluParams {
            gamma: FloatTensor::full(&[1], g),
            beta: FloatTensor::full(&[1], b),
            zeta: FloatTensor::full(&[1], z),
            kind: ActivationKind::Rprelu,
        }
    }

    #[test]
    fn degenerate_parameters() {
        let x = FloatTensor::new(&[4, 1], vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        assert_eq!(rprelu_forward(&x, &params(0.0, 0.0, 0.0)).unwrap().data(), &[0.0, 0.0, 0.0, 3.0]);
        assert_eq!(rprelu_forward(&x, &params(0.0, 1.0, 0.0)).unwrap(), x);
    }

    #[test]
    fn shifted_example() {
        let x = FloatTensor::new(&[1, 1], vec![-1.0]).unwrap();
        let y = rprelu_forward(&x, &params(0.5, 0.25, 0.1)).unwrap();
        assert!((y.data()[0] + 0.275).abs() < 1e-12);
    }

    #[test]
    fn relu_kind_ignores_stored_parameters() {
        let mut p = params(0.5, 0.25, 0.1);
        p.kind = ActivationKind::Relu;
        let x = FloatTensor::new(&[2, 1], vec![-1.0, 2.0]).unwrap();
        assert_eq!(rprelu_forward(&x, &p).unwrap().data(), &[0.0, 2.0]);
        let (_, g) = rprelu_backward(&x, &p, &FloatTensor::full(&[2, 1], 1.0)).unwrap();
        assert_eq!((g.gamma.data()[0], g.beta.data()[0], g.zeta.data()[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn default_init() {
        let p = RpreluParams::<f32>::new(3, ActivationKind::Rprelu);
        assert_eq!(p.beta.data(), &[0.25; 3]);
        assert_eq!(p.gamma.data(), &[0.0; 3]);
    }
}
