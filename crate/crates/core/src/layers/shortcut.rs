//! Uni-shortcut: a residual that bridges channel counts related by an
//! integer factor, averaging chunks when shrinking and tiling when growing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BitTensor, FloatTensor, Real};

/// Residual wiring used inside binary FC layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShortcutKind {
    /// Ratio-aware shortcut on every layer.
    #[default]
    Uni,
    /// Identity shortcut only where input and output widths agree.
    Plain,
    None,
}

impl ShortcutKind {
    /// Whether a layer mapping `c_in` to `c_out` channels gets a shortcut.
    pub fn applies(self, c_in: usize, c_out: usize) -> bool {
        match self {
            ShortcutKind::Uni => true,
            ShortcutKind::Plain => c_in == c_out,
            ShortcutKind::None => false,
        }
    }
}

enum Ratio {
    Reduce(usize),
    Expand(usize),
}

fn ratio(c_in: usize, c_out: usize) -> Result<Ratio> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::invalid("uni-shortcut channel counts must be ≥ 1"));
    }
    if c_in.is_multiple_of(c_out) {
        Ok(Ratio::Reduce(c_in / c_out))
    } else if c_out.is_multiple_of(c_in) {
        Ok(Ratio::Expand(c_out / c_in))
    } else {
        Err(Error::invalid(format!(
            "uni-shortcut needs an integer channel ratio, got {c_in} → {c_out}"
        )))
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(l) = s.last_mut() {
        *l = last;
    }
    s
}

fn apply<T: Real>(src: &[T], shape: &[usize], c_in: usize, c_out: usize) -> Result<FloatTensor<T>> {
    let mut out = Vec::with_capacity(src.len() / c_in * c_out);
    match ratio(c_in, c_out)? {
        Ratio::Reduce(n) => {
            // Division keeps the mean of n equal values exact.
            let n_t = T::of(n as f64);
            for row in src.chunks_exact(c_in) {
                for j in 0..c_out {
                    let s: T = (0..n).map(|i| row[i * c_out + j]).sum();
                    out.push(s / n_t);
                }
            }
        }
        Ratio::Expand(n) => {
            for row in src.chunks_exact(c_in) {
                for _ in 0..n {
                    out.extend_from_slice(row);
                }
            }
        }
    }
    FloatTensor::new(&with_last(shape, c_out), out)
}

/// Maps `x: [..., c_in]` to `[..., c_out]`.
pub fn uni_shortcut<T: Real>(x: &FloatTensor<T>, c_out: usize) -> Result<FloatTensor<T>> {
    apply(x.data(), x.shape(), x.last_dim(), c_out)
}

/// Same map applied to sign-packed input (packed along any axis).
pub fn uni_shortcut_bits<T: Real>(xb: &BitTensor, c_out: usize) -> Result<FloatTensor<T>> {
    let x: FloatTensor<T> = xb.unpack();
    uni_shortcut(&x, c_out)
}

/// Adjoint of [`uni_shortcut`]: maps `[..., c_out]` gradients to `[..., c_in]`.
pub fn uni_shortcut_backward<T: Real>(grad: &FloatTensor<T>, c_in: usize) -> Result<FloatTensor<T>> {
    let c_out = grad.last_dim();
    let mut out = Vec::with_capacity(grad.rows() * c_in);
    match ratio(c_in, c_out)? {
        Ratio::Reduce(n) => {
            let inv = T::one() / T::of(n as f64);
            for row in grad.data().chunks_exact(c_out) {
                for _ in 0..n {
                    out.extend(row.iter().map(|&g| g * inv));
                }
            }
        }
        Ratio::Expand(n) => {
            for row in grad.data().chunks_exact(c_out) {
                for j in 0..c_in {
                    out.push((0..n).map(|i| row[i * c_in + j]).sum());
                }
            }
        }
    }
    FloatTensor::new(&with_last(grad.shape(), c_in), out)
}
