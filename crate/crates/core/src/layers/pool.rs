//! Max pooling with SAME padding and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Real};

/// `(output extent, padding before)` for SAME padding: the output covers
/// `ceil(input / stride)` positions and any extra padding goes after.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Returns the pooled tensor and, per output element, the flat input index
/// of its maximum.
pub fn maxpool_forward<T: Real>(x: &FloatTensor<T>, kernel: usize, stride: usize) -> Result<(FloatTensor<T>, Vec<u32>)> {
    let [b, h, w, c] = x.shape()[..] else {
        return Err(Error::shape(format!("maxpool input must be [B,H,W,C], got {:?}", x.shape())));
    };
    if kernel == 0 || stride == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("maxpool kernel, stride and extents must be ≥ 1"));
    }
    if x.len() > u32::MAX as usize {
        return Err(Error::invalid("maxpool input too large"));
    }
    let (oh, ph) = same_padding(h, kernel, stride);
    let (ow, pw) = same_padding(w, kernel, stride);
    let src = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - ph as isize;
            let ys = y0.max(0) as usize..((y0 + kernel as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pw as isize;
                let xs = x0.max(0) as usize..((x0 + kernel as isize).min(w as isize)) as usize;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let idx = ((bi * h + iy) * w + ix) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at as u32);
                }
            }
        }
    }
    Ok((FloatTensor::new(&[b, oh, ow, c], out)?, argmax))
}

pub fn maxpool_backward<T: Real>(input_shape: &[usize], argmax: &[u32], grad_out: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool gradient does not match the saved indices"));
    }
    let mut gx = FloatTensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(gx)
}

/// `[B, H, W, C]` → `[B, C]`.
pub fn global_avg_pool_forward<T: Real>(x: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    let [b, h, w, c] = x.shape()[..] else {
        return Err(Error::shape(format!("pool input must be [B,H,W,C], got {:?}", x.shape())));
    };
    let inv = T::one() / T::of((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, img) in x.data().chunks_exact(h * w * c).enumerate() {
        let acc = &mut out[bi * c..(bi + 1) * c];
        for row in img.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    FloatTensor::new(&[b, c], out)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    let [b, h, w, c] = input_shape[..] else {
        return Err(Error::shape("pool input must be [B,H,W,C]"));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::shape(format!("pool gradient {:?} has the wrong shape", grad_out.shape())));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let mut gx = Vec::with_capacity(b * h * w * c);
    for g in grad_out.data().chunks_exact(c) {
        for _ in 0..h * w {
            gx.extend(g.iter().map(|&v| v * inv));
        }
    }
    FloatTensor::new(input_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        assert_eq!(same_padding(56, 3, 2), (28, 0));
        assert_eq!(same_padding(7, 3, 2), (4, 1));
        assert_eq!(same_padding(8, 7, 2), (4, 2));
        assert_eq!(same_padding(1, 5, 2), (1, 2));
    }

    #[test]
    fn maxpool_hand_example() {
        let x = FloatTensor::new(&[1, 2, 2, 1], vec![1.0f32, 4.0, 3.0, 2.0]).unwrap();
        let (y, idx) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![1]);
        let g = maxpool_backward(x.shape(), &idx, &FloatTensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn output_extent_is_ceil_half() {
        for h in 1..12 {
            for k in [3, 5, 7] {
                let x = FloatTensor::<f32>::from_fn(&[1, h, h, 2], |i| i as f32);
                let (y, _) = maxpool_forward(&x, k, 2).unwrap();
                assert_eq!(y.shape(), &[1, h.div_ceil(2), h.div_ceil(2), 2]);
            }
        }
    }

    #[test]
    fn average_pool_round_trip() {
        let x = FloatTensor::from_fn(&[2, 2, 3, 2], |i| i as f64);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 17.0, 18.0]);
        let g = global_avg_pool_backward(x.shape(), &FloatTensor::full(&[2, 2], 6.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }
}
