//! Full-precision 2-D convolution over `[B, H, W, C]` tensors via im2col.

use crate::error::{Error, Result};
use crate::kernels::conv_out_extent;
use crate::tensor::{FloatTensor, Real};

/// `weight` is `[kh·kw·c_in, c_out]` with rows ordered `(ky, kx, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Real> {
    pub weight: FloatTensor<T>,
    pub bias: Option<FloatTensor<T>>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dParams<T> {
    pub fn new(weight: FloatTensor<T>, bias: Option<FloatTensor<T>>, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let [rows, c_out] = weight.shape()[..] else {
            return Err(Error::shape(format!("conv weight must be rank 2, got {:?}", weight.shape())));
        };
        if kernel == 0 || stride == 0 || rows % (kernel * kernel) != 0 {
            return Err(Error::invalid(format!(
                "conv weight {:?} does not fit a {kernel}×{kernel} kernel with stride {stride}",
                weight.shape()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.shape() != [c_out]) {
            return Err(Error::shape("conv bias does not match output channels"));
        }
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_extent(h, self.kernel, self.stride, self.padding)?,
            conv_out_extent(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Real>(x: &FloatTensor<T>, p: &Conv2dParams<T>) -> Result<Geometry> {
    let [b, h, w, c] = x.shape()[..] else {
        return Err(Error::shape(format!("conv input must be [B,H,W,C], got {:?}", x.shape())));
    };
    if c != p.in_channels() {
        return Err(Error::shape(format!("conv expects {} channels, got {c}", p.in_channels())));
    }
    let (oh, ow) = p.out_extent(h, w)?;
    Ok(Geometry { b, h, w, c, oh, ow })
}

/// Visits every `(column row, column index, source index)` triple of the im2col
/// matrix whose tap lands inside the image.
fn for_each_tap(g: &Geometry, k: usize, stride: usize, pad: usize, mut f: impl FnMut(usize, usize)) {
    let patch = k * k * g.c;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (bi * g.oh + oy) * g.ow + ox;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let col = row * patch + (ky * k + kx) * g.c;
                        let src = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        f(col, src);
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &FloatTensor<T>, g: &Geometry, p: &Conv2dParams<T>) -> Vec<T> {
    let mut cols = vec![T::zero(); g.b * g.oh * g.ow * p.kernel * p.kernel * g.c];
    let src = x.data();
    for_each_tap(g, p.kernel, p.stride, p.padding, |col, s| {
        cols[col..col + g.c].copy_from_slice(&src[s..s + g.c]);
    });
    cols
}

pub fn conv2d_forward<T: Real>(x: &FloatTensor<T>, p: &Conv2dParams<T>) -> Result<FloatTensor<T>> {
    let g = geometry(x, p)?;
    let cols = im2col(x, &g, p);
    let (rows, patch, c_out) = (g.b * g.oh * g.ow, p.weight.shape()[0], p.out_channels());
    let mut out = vec![T::zero(); rows * c_out];
    if let Some(b) = &p.bias {
        for r in out.chunks_exact_mut(c_out) {
            r.copy_from_slice(b.data());
        }
    }
    T::gemm(rows, patch, c_out, &cols, false, p.weight.data(), false, T::one(), &mut out);
    FloatTensor::new(&[g.b, g.oh, g.ow, c_out], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &FloatTensor<T>,
    p: &Conv2dParams<T>,
    grad_out: &FloatTensor<T>,
) -> Result<(FloatTensor<T>, FloatTensor<T>, Option<FloatTensor<T>>)> {
    let g = geometry(x, p)?;
    let (rows, patch, c_out) = (g.b * g.oh * g.ow, p.weight.shape()[0], p.out_channels());
    if grad_out.shape() != [g.b, g.oh, g.ow, c_out] {
        return Err(Error::shape(format!("conv gradient {:?} has the wrong shape", grad_out.shape())));
    }
    let cols = im2col(x, &g, p);
    let mut gw = vec![T::zero(); patch * c_out];
    T::gemm(patch, rows, c_out, &cols, true, grad_out.data(), false, T::zero(), &mut gw);
    let mut gcols = vec![T::zero(); rows * patch];
    T::gemm(rows, c_out, patch, grad_out.data(), false, p.weight.data(), true, T::zero(), &mut gcols);
    let mut gx = vec![T::zero(); x.len()];
    for_each_tap(&g, p.kernel, p.stride, p.padding, |col, s| {
        for (d, &v) in gx[s..s + g.c].iter_mut().zip(&gcols[col..col + g.c]) {
            *d += v;
        }
    });
    let gb = p.bias.as_ref().map(|_| {
        let mut acc = vec![T::zero(); c_out];
        for r in grad_out.data().chunks_exact(c_out) {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        FloatTensor::new(&[c_out], acc).expect("bias shape")
    });
    Ok((FloatTensor::new(x.shape(), gx)?, FloatTensor::new(&[patch, c_out], gw)?, gb))
}
