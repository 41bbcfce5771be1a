//! Dense float tensors, sign-packed bit tensors and the flat binary record
//! format shared by parameters and checkpoints.

pub(crate) mod bits;
mod record;

pub use bits::{pack, popcount_dot, unpack, BitLane, BitTensor, WORD_BITS};
pub use record::{read_record, write_record, DType, Record, RECORD_MAGIC};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Largest supported tensor rank (batch, height, width, channels).
pub const MAX_RANK: usize = 4;

/// Element type of a [`FloatTensor`]. `f32` is the working precision; `f64`
/// exists for finite-difference gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = a · b + beta · c` over row-major buffers, with optional transposes
    /// on the operands. `a` is `m×k` after transposition, `b` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn to_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: lengths checked above; strides describe in-bounds
                // row-major (or transposed) views of those buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn to_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor of rank ≤ 4.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> FloatTensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_rank(shape).expect("rank within bounds");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_rank(shape).expect("rank within bounds");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the innermost axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of innermost rows, i.e. `len / last_dim`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Errors with the first offending flat index if any value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::shape(format!("transpose2 needs rank 2, got {:?}", self.shape)));
        };
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Rank-2 matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let ([m, k], [k2, n]) = (&self.shape[..], &rhs.shape[..]) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} · {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(*m, *k, *n, &self.data, false, &rhs.data, false, T::zero(), &mut out);
        Ok(Self {
            shape: vec![*m, *n],
            data: out,
        })
    }

    pub fn cast<U: Real>(&self) -> FloatTensor<U> {
        FloatTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank {} exceeds the supported maximum of {MAX_RANK}",
            shape.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_is_enforced() {
        assert!(FloatTensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(FloatTensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(FloatTensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn check_finite_names_index() {
        let t = FloatTensor::new(&[3], vec![1.0f32, f32::NAN, 2.0]).unwrap();
        match t.check_finite() {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let at = FloatTensor::new(&[m, k], a.clone()).unwrap().transpose2().unwrap();
        let bt = FloatTensor::new(&[k, n], b.clone()).unwrap().transpose2().unwrap();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lhs = if ta { at.data() } else { &a[..] };
            let rhs = if tb { bt.data() } else { &b[..] };
            let mut c = vec![0.0; m * n];
            f64::gemm(m, k, n, lhs, ta, rhs, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&naive) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn matmul_hand_example() {
        let x = FloatTensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = FloatTensor::new(&[2, 2], vec![1.0f32, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(x.matmul(&w).unwrap().data(), &[3.0, 2.0]);
    }
}
