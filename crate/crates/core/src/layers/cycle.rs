//! Cycle-FC: a channel FC whose input channels are read from cyclically
//! shifted spatial positions, giving a shape-agnostic local spatial mixer.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct CycleFcParams<T: Real> {
    /// `C_in × C_out`.
    pub weight: FloatTensor<T>,
    pub receptive_h: usize,
    pub receptive_w: usize,
}

impl<T: Real> CycleFcParams<T> {
    pub fn new(weight: FloatTensor<T>, receptive_h: usize, receptive_w: usize) -> Result<Self> {
        if receptive_h == 0 || receptive_w == 0 {
            return Err(Error::invalid(format!(
                "receptive fields must be ≥ 1, got S_H={receptive_h}, S_W={receptive_w}"
            )));
        }
        if weight.rank() != 2 {
            return Err(Error::shape(format!("Cycle-FC weight must be rank 2, got {:?}", weight.shape())));
        }
        Ok(Self {
            weight,
            receptive_h,
            receptive_w,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Spatial offsets `(δ_i(c), δ_j(c))` read by input channel `c`.
pub fn cycle_offsets(c: usize, receptive_h: usize, receptive_w: usize) -> (isize, isize) {
    let di = (c % receptive_h) as isize - 1;
    let dj = ((c / receptive_h) % receptive_w) as isize - 1;
    (di, dj)
}

/// `(batch, height, width, channels)` of a `[H,W,C]` or `[B,H,W,C]` tensor.
pub(crate) fn bhwc<T: Real>(z: &FloatTensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *z.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::shape(format!("expected [H,W,C] or [B,H,W,C], got {s:?}"))),
    }
}

/// Gathers the shifted input matrix `[B·H·W, C_in]`; out-of-range reads give `pad`.
pub fn cycle_gather<T: Real>(z: &FloatTensor<T>, receptive_h: usize, receptive_w: usize, pad: T) -> Result<FloatTensor<T>> {
    let (b, h, w, c) = bhwc(z)?;
    let offsets: Vec<(isize, isize)> = (0..c).map(|ch| cycle_offsets(ch, receptive_h, receptive_w)).collect();
    let src = z.data();
    let mut out = vec![pad; b * h * w * c];
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let row = base + (i * w + j) * c;
                for (ch, &(di, dj)) in offsets.iter().enumerate() {
                    let (si, sj) = (i as isize + di, j as isize + dj);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        out[row + ch] = src[base + (si as usize * w + sj as usize) * c + ch];
                    }
                }
            }
        }
    }
    FloatTensor::new(&[b * h * w, c], out)
}

/// Adjoint of [`cycle_gather`]: routes row gradients back to the positions
/// they were read from. Padded reads receive nothing.
pub fn cycle_scatter<T: Real>(grad: &FloatTensor<T>, input_shape: &[usize], receptive_h: usize, receptive_w: usize) -> Result<FloatTensor<T>> {
    let probe = FloatTensor::<T>::zeros(input_shape);
    let (b, h, w, c) = bhwc(&probe)?;
    if grad.len() != b * h * w * c {
        return Err(Error::shape(format!(
            "Cycle-FC gradient {:?} does not match input {input_shape:?}",
            grad.shape()
        )));
    }
    let offsets: Vec<(isize, isize)> = (0..c).map(|ch| cycle_offsets(ch, receptive_h, receptive_w)).collect();
    let g = grad.data();
    let mut out = probe.into_data();
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let row = base + (i * w + j) * c;
                for (ch, &(di, dj)) in offsets.iter().enumerate() {
                    let (si, sj) = (i as isize + di, j as isize + dj);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        out[base + (si as usize * w + sj as usize) * c + ch] += g[row + ch];
                    }
                }
            }
        }
    }
    FloatTensor::new(input_shape, out)
}

fn output_shape(input: &[usize], c_out: usize) -> Vec<usize> {
    let mut s = input.to_vec();
    *s.last_mut().expect("rank ≥ 3") = c_out;
    s
}

/// `Cycle-FC(Z)[i,j,:] = Σ_c Z[i+δ_i(c), j+δ_j(c), c] · W[c,:]`.
pub fn cycle_fc_forward<T: Real>(z: &FloatTensor<T>, p: &CycleFcParams<T>, pad: T) -> Result<FloatTensor<T>> {
    let (_, _, _, c) = bhwc(z)?;
    if c != p.in_dim() {
        return Err(Error::shape(format!("Cycle-FC expects {} channels, got {c}", p.in_dim())));
    }
    let gathered = cycle_gather(z, p.receptive_h, p.receptive_w, pad)?;
    let (rows, c_out) = (gathered.rows(), p.out_dim());
    let mut out = vec![T::zero(); rows * c_out];
    T::gemm(rows, c, c_out, gathered.data(), false, p.weight.data(), false, T::zero(), &mut out);
    FloatTensor::new(&output_shape(z.shape(), c_out), out)
}

/// Returns `(grad_z, grad_weight)`.
pub fn cycle_fc_backward<T: Real>(
    z: &FloatTensor<T>,
    p: &CycleFcParams<T>,
    pad: T,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, FloatTensor<T>)> {
    let gathered = cycle_gather(z, p.receptive_h, p.receptive_w, pad)?;
    let (rows, c_in, c_out) = (gathered.rows(), p.in_dim(), p.out_dim());
    if grad_out.len() != rows * c_out {
        return Err(Error::shape(format!("Cycle-FC gradient {:?} has the wrong size", grad_out.shape())));
    }
    let mut gw = vec![T::zero(); c_in * c_out];
    T::gemm(c_in, rows, c_out, gathered.data(), true, grad_out.data(), false, T::zero(), &mut gw);
    let mut gg = vec![T::zero(); rows * c_in];
    T::gemm(rows, c_out, c_in, grad_out.data(), false, p.weight.data(), true, T::zero(), &mut gg);
    let gz = cycle_scatter(&FloatTensor::new(&[rows, c_in], gg)?, z.shape(), p.receptive_h, p.receptive_w)?;
    Ok((gz, FloatTensor::new(&[c_in, c_out], gw)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::fc::{channel_fc_forward, ChannelFcParams};

    #[test]
    fn offsets_example() {
        let got: Vec<_> = (0..3).map(|c| cycle_offsets(c, 3, 1)).collect();
        assert_eq!(got, vec![(-1, -1), (0, -1), (1, -1)]);
        for c in 0..10 {
            assert_eq!(cycle_offsets(c, 1, 1), (-1, -1));
        }
    }

    #[test]
    fn unit_receptive_field_is_a_shifted_channel_fc() {
        let (h, w, c, o) = (4, 5, 3, 2);
        let z = FloatTensor::from_fn(&[h, w, c], |i| ((i * 13) % 7) as f64 - 3.0);
        let weight = FloatTensor::from_fn(&[c, o], |i| (i as f64 * 0.3).sin());
        let p = CycleFcParams::new(weight.clone(), 1, 1).unwrap();
        let y = cycle_fc_forward(&z, &p, 0.0).unwrap();
        let plain = channel_fc_forward(&z, &ChannelFcParams::new(weight, None).unwrap()).unwrap();
        for i in 0..h {
            for j in 0..w {
                for k in 0..o {
                    let got = y.data()[(i * w + j) * o + k];
                    let expect = if i >= 1 && j >= 1 { plain.data()[((i - 1) * w + j - 1) * o + k] } else { 0.0 };
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_non_positive_receptive_fields() {
        assert!(CycleFcParams::new(FloatTensor::<f32>::zeros(&[2, 2]), 0, 1).is_err());
        assert!(CycleFcParams::new(FloatTensor::<f32>::zeros(&[2, 2]), 1, 0).is_err());
    }

    #[test]
    fn padding_value_is_used_out_of_range() {
        let z = FloatTensor::<f32>::full(&[1, 1, 2], 5.0);
        let p = CycleFcParams::new(FloatTensor::full(&[2, 1], 1.0), 1, 1).unwrap();
        assert_eq!(cycle_fc_forward(&z, &p, -1.0).unwrap().data(), &[-2.0]);
        assert_eq!(cycle_fc_forward(&z, &p, 0.0).unwrap().data(), &[0.0]);
    }
}
