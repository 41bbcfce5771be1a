//! Token-wise channel mixing and cross-token spatial mixing.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

/// Channel-FC parameters: `W_c` is `d×d'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFcParams<T: Real> {
    pub weight: FloatTensor<T>,
    pub bias: Option<FloatTensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFcGrads<T: Real> {
    pub weight: FloatTensor<T>,
    pub bias: Option<FloatTensor<T>>,
}

impl<T: Real> ChannelFcParams<T> {
    pub fn new(weight: FloatTensor<T>, bias: Option<FloatTensor<T>>) -> Result<Self> {
        let [d_in, d_out] = weight.shape()[..] else {
            return Err(Error::shape(format!("channel-FC weight must be rank 2, got {:?}", weight.shape())));
        };
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::shape(format!("bias {:?} does not match output width {d_out}", b.shape())));
            }
        }
        let _ = d_in;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(l) = s.last_mut() {
        *l = last;
    }
    s
}

/// `X · W_c (+ b)` applied to every row of `x`; `x` is `[..., d]`.
pub fn channel_fc_forward<T: Real>(x: &FloatTensor<T>, p: &ChannelFcParams<T>) -> Result<FloatTensor<T>> {
    let (d_in, d_out) = (p.in_dim(), p.out_dim());
    if x.last_dim() != d_in {
        return Err(Error::shape(format!(
            "channel-FC expects {d_in} input channels, got {:?}",
            x.shape()
        )));
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); rows * d_out];
    if let Some(b) = &p.bias {
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(rows, d_in, d_out, x.data(), false, p.weight.data(), false, T::one(), &mut out);
    FloatTensor::new(&with_last(x.shape(), d_out), out)
}

pub fn channel_fc_backward<T: Real>(
    x: &FloatTensor<T>,
    p: &ChannelFcParams<T>,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, ChannelFcGrads<T>)> {
    let (d_in, d_out) = (p.in_dim(), p.out_dim());
    let rows = x.rows();
    if grad_out.shape() != with_last(x.shape(), d_out) {
        return Err(Error::shape(format!(
            "channel-FC gradient {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut gx = vec![T::zero(); rows * d_in];
    T::gemm(rows, d_out, d_in, grad_out.data(), false, p.weight.data(), true, T::zero(), &mut gx);
    let mut gw = vec![T::zero(); d_in * d_out];
    T::gemm(d_in, rows, d_out, x.data(), true, grad_out.data(), false, T::zero(), &mut gw);
    let gb = p.bias.as_ref().map(|_| {
        let mut acc = vec![T::zero(); d_out];
        for row in grad_out.data().chunks_exact(d_out) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
        FloatTensor::new(&[d_out], acc).expect("bias shape")
    });
    Ok((
        FloatTensor::new(x.shape(), gx)?,
        ChannelFcGrads {
            weight: FloatTensor::new(&[d_in, d_out], gw)?,
            bias: gb,
        },
    ))
}

/// Spatial-FC parameters: `W_s` is `n×n'` for a fixed token count `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFcParams<T: Real> {
    pub weight: FloatTensor<T>,
}

impl<T: Real> SpatialFcParams<T> {
    pub fn new(weight: FloatTensor<T>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!("spatial-FC weight must be rank 2, got {:?}", weight.shape())));
        }
        Ok(Self { weight })
    }

    pub fn tokens_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn tokens_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn spatial_dims<T: Real>(x: &FloatTensor<T>, n: usize) -> Result<(usize, usize)> {
    let (batch, tokens, d) = match x.shape() {
        [t, d] => (1, *t, *d),
        [b, t, d] => (*b, *t, *d),
        s => return Err(Error::shape(format!("spatial-FC input must be [n,d] or [B,n,d], got {s:?}"))),
    };
    if tokens != n {
        return Err(Error::shape(format!(
            "spatial-FC was built for {n} tokens but the input has {tokens}"
        )));
    }
    Ok((batch, d))
}

/// `W_sᵀ · X` for `x` of shape `[n, d]` (or a batch `[B, n, d]`).
pub fn spatial_fc_forward<T: Real>(x: &FloatTensor<T>, p: &SpatialFcParams<T>) -> Result<FloatTensor<T>> {
    let (n, n_out) = (p.tokens_in(), p.tokens_out());
    let (batch, d) = spatial_dims(x, n)?;
    let mut out = vec![T::zero(); batch * n_out * d];
    for (xb, ob) in x.data().chunks_exact(n * d).zip(out.chunks_exact_mut(n_out * d)) {
        T::gemm(n_out, n, d, p.weight.data(), true, xb, false, T::zero(), ob);
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = n_out;
    FloatTensor::new(&shape, out)
}

/// Returns `(grad_x, grad_weight)`.
pub fn spatial_fc_backward<T: Real>(
    x: &FloatTensor<T>,
    p: &SpatialFcParams<T>,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, FloatTensor<T>)> {
    let (n, n_out) = (p.tokens_in(), p.tokens_out());
    let (batch, d) = spatial_dims(x, n)?;
    if grad_out.len() != batch * n_out * d {
        return Err(Error::shape(format!("spatial-FC gradient {:?} has the wrong size", grad_out.shape())));
    }
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); n * n_out];
    for ((xb, gb), gxb) in x
        .data()
        .chunks_exact(n * d)
        .zip(grad_out.data().chunks_exact(n_out * d))
        .zip(gx.chunks_exact_mut(n * d))
    {
        T::gemm(n, n_out, d, p.weight.data(), false, gb, false, T::zero(), gxb);
        T::gemm(n, d, n_out, xb, false, gb, true, T::one(), &mut gw);
    }
    Ok((FloatTensor::new(x.shape(), gx)?, FloatTensor::new(&[n, n_out], gw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> FloatTensor<f32> {
        FloatTensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn channel_identity_and_hand_example() {
        let x = FloatTensor::from_fn(&[3, 4], |i| i as f32 - 5.0);
        let p = ChannelFcParams::new(eye(4), None).unwrap();
        assert_eq!(channel_fc_forward(&x, &p).unwrap(), x);

        let x = FloatTensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = FloatTensor::new(&[2, 2], vec![1.0f32, 0.0, 1.0, 1.0]).unwrap();
        let p = ChannelFcParams::new(w, None).unwrap();
        assert_eq!(channel_fc_forward(&x, &p).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn channel_bias_and_errors() {
        let x = FloatTensor::from_fn(&[2, 2], |i| i as f32);
        let p = ChannelFcParams::new(eye(2), Some(FloatTensor::new(&[2], vec![1.0, -1.0]).unwrap())).unwrap();
        assert_eq!(channel_fc_forward(&x, &p).unwrap().data(), &[1.0, 0.0, 3.0, 2.0]);
        let bad = FloatTensor::<f32>::zeros(&[2, 3]);
        assert!(channel_fc_forward(&bad, &p).is_err());
        assert!(ChannelFcParams::new(eye(2), Some(FloatTensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn spatial_identity_and_swap() {
        let x = FloatTensor::from_fn(&[2, 3], |i| i as f32);
        let p = SpatialFcParams::new(eye(2)).unwrap();
        assert_eq!(spatial_fc_forward(&x, &p).unwrap(), x);
        let swap = SpatialFcParams::new(FloatTensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(spatial_fc_forward(&x, &swap).unwrap().data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        let wrong = FloatTensor::<f32>::zeros(&[3, 3]);
        assert!(spatial_fc_forward(&wrong, &p).is_err());
    }

    #[test]
    fn transpose_duality() {
        let x = FloatTensor::from_fn(&[5, 3], |i| ((i * 7) % 11) as f64 - 4.0);
        let w = FloatTensor::from_fn(&[5, 2], |i| (i as f64 * 0.37).cos());
        let spatial = spatial_fc_forward(&x, &SpatialFcParams::new(w.clone()).unwrap()).unwrap();
        let channel = channel_fc_forward(&x.transpose2().unwrap(), &ChannelFcParams::new(w, None).unwrap()).unwrap();
        assert!(spatial.max_abs_diff(&channel.transpose2().unwrap()) < 1e-12);
    }
}
