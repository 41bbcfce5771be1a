use super::{FloatTensor, Real};
use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Sign-packed tensor. Bit 1 encodes +1, bit 0 encodes −1.
///
/// Storage is organised in *lanes*: one lane per combination of the indices
/// other than `axis`, each holding the `shape[axis]` elements along the packed
/// axis contiguously in `u64` words. Lanes are padded to a whole number of
/// words and padding bits are always stored as 0 (the encoding of −1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    axis: usize,
    words_per_lane: usize,
    words: Vec<u64>,
}

/// Borrowed view of one packed lane.
#[derive(Clone, Copy, Debug)]
pub struct BitLane<'a> {
    words: &'a [u64],
    len: usize,
}

impl<'a> BitLane<'a> {
    pub fn new(words: &'a [u64], len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(WORD_BITS) {
            return Err(Error::shape(format!(
                "lane of {len} bits needs {} words, got {}",
                len.div_ceil(WORD_BITS),
                words.len()
            )));
        }
        Ok(Self { words, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }
}

/// Mask selecting the logical bits of the last word of a lane of `len` bits.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Dot product of two ±1 vectors: `2·popcount(XNOR(a, b)) − N`.
pub fn popcount_dot(a: BitLane<'_>, b: BitLane<'_>) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::shape(format!(
            "popcount_dot over lanes of length {} and {}",
            a.len, b.len
        )));
    }
    Ok(dot_words(a.words, b.words, a.len))
}

/// Unchecked inner loop shared by the kernels. Padding bits are masked off,
/// so garbage beyond `len` cannot leak into the result.
#[inline]
pub(crate) fn dot_words(a: &[u64], b: &[u64], len: usize) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let Some(last) = a.len().checked_sub(1) else {
        return 0;
    };
    let mut matches = 0u32;
    for i in 0..last {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    matches += (!(a[last] ^ b[last]) & tail_mask(len)).count_ones();
    2 * matches as i32 - len as i32
}

impl BitTensor {
    /// Sign image of `t` packed along `axis`: `x > 0` → +1, otherwise −1.
    pub fn pack<T: Real>(t: &FloatTensor<T>, axis: usize) -> Result<Self> {
        t.check_finite()?;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "pack axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let mut out = Self::minus_ones(shape, axis);
        let (len, inner) = (shape[axis], shape[axis + 1..].iter().product::<usize>());
        let wpl = out.words_per_lane;
        for (flat, v) in t.data().iter().enumerate() {
            if *v > T::zero() {
                let (lane, pos) = split_index(flat, len, inner);
                out.words[lane * wpl + pos / WORD_BITS] |= 1 << (pos % WORD_BITS);
            }
        }
        Ok(out)
    }

    /// Packs a row-major matrix-like tensor along its innermost axis.
    pub fn pack_innermost<T: Real>(t: &FloatTensor<T>) -> Result<Self> {
        if t.rank() == 0 {
            return Err(Error::invalid("cannot pack a rank-0 tensor"));
        }
        Self::pack(t, t.rank() - 1)
    }

    /// Packs rows of `cols` values from a flat slice without an intermediate
    /// tensor. Used on the hot path of binary layers.
    pub(crate) fn pack_rows<T: Real>(data: &[T], cols: usize) -> Self {
        let rows = if cols == 0 { 0 } else { data.len() / cols };
        let mut out = Self::minus_ones(&[rows, cols], 1);
        let wpl = out.words_per_lane;
        for (r, row) in data.chunks_exact(cols.max(1)).enumerate().take(rows) {
            let lane = &mut out.words[r * wpl..(r + 1) * wpl];
            for (w, chunk) in lane.iter_mut().zip(row.chunks(WORD_BITS)) {
                let mut bits = 0u64;
                for (b, v) in chunk.iter().enumerate() {
                    bits |= ((*v > T::zero()) as u64) << b;
                }
                *w = bits;
            }
        }
        out
    }

    /// Packs the columns of a `rows×cols` row-major slice (one lane per column).
    pub(crate) fn pack_cols<T: Real>(data: &[T], rows: usize, cols: usize) -> Self {
        let mut out = Self::minus_ones(&[rows, cols], 0);
        let wpl = out.words_per_lane;
        for r in 0..rows {
            let (word, bit) = (r / WORD_BITS, r % WORD_BITS);
            for c in 0..cols {
                if data[r * cols + c] > T::zero() {
                    out.words[c * wpl + word] |= 1 << bit;
                }
            }
        }
        out
    }

    /// All-(−1) tensor.
    pub fn minus_ones(shape: &[usize], axis: usize) -> Self {
        assert!(axis < shape.len(), "axis within rank");
        let len = shape[axis];
        let lanes = if len == 0 {
            0
        } else {
            shape.iter().product::<usize>() / len
        };
        let words_per_lane = len.div_ceil(WORD_BITS);
        Self {
            shape: shape.to_vec(),
            axis,
            words_per_lane,
            words: vec![0; lanes * words_per_lane],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn lane_len(&self) -> usize {
        self.shape[self.axis]
    }

    pub fn num_lanes(&self) -> usize {
        if self.words_per_lane == 0 {
            let len = self.lane_len();
            if len == 0 {
                0
            } else {
                self.shape.iter().product::<usize>() / len
            }
        } else {
            self.words.len() / self.words_per_lane
        }
    }

    pub fn words_per_lane(&self) -> usize {
        self.words_per_lane
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Raw word access. Callers that write padding bits must follow up with
    /// [`BitTensor::normalize_padding`] before serialising.
    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn lane(&self, i: usize) -> BitLane<'_> {
        let wpl = self.words_per_lane;
        BitLane {
            words: &self.words[i * wpl..(i + 1) * wpl],
            len: self.lane_len(),
        }
    }

    /// Clears every padding bit back to the −1 encoding.
    pub fn normalize_padding(&mut self) {
        if self.words_per_lane == 0 {
            return;
        }
        let mask = tail_mask(self.lane_len());
        let wpl = self.words_per_lane;
        for lane in self.words.chunks_exact_mut(wpl) {
            lane[wpl - 1] &= mask;
        }
    }

    pub fn padding_is_clean(&self) -> bool {
        if self.words_per_lane == 0 {
            return true;
        }
        let mask = tail_mask(self.lane_len());
        self.words
            .chunks_exact(self.words_per_lane)
            .all(|lane| lane[self.words_per_lane - 1] & !mask == 0)
    }

    /// Decoded value (+1 or −1) at a row-major flat index.
    pub fn get_flat(&self, flat: usize) -> i8 {
        let len = self.lane_len();
        let inner: usize = self.shape[self.axis + 1..].iter().product();
        let (lane, pos) = split_index(flat, len, inner);
        let word = self.words[lane * self.words_per_lane + pos / WORD_BITS];
        if (word >> (pos % WORD_BITS)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unpack<T: Real>(&self) -> FloatTensor<T> {
        let len = self.lane_len();
        let inner: usize = self.shape[self.axis + 1..].iter().product();
        let wpl = self.words_per_lane;
        FloatTensor::from_fn(&self.shape, |flat| {
            let (lane, pos) = split_index(flat, len, inner);
            if (self.words[lane * wpl + pos / WORD_BITS] >> (pos % WORD_BITS)) & 1 == 1 {
                T::one()
            } else {
                -T::one()
            }
        })
    }

    /// Same logical tensor packed along a different axis.
    pub fn repack(&self, axis: usize) -> Result<Self> {
        if axis == self.axis {
            return Ok(self.clone());
        }
        Self::pack(&self.unpack::<f32>(), axis)
    }

    pub(crate) fn from_raw(shape: Vec<usize>, axis: usize, words: Vec<u64>) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::invalid(format!("packed axis {axis} out of range")));
        }
        let expected = Self::minus_ones(&shape, axis);
        if expected.words.len() != words.len() {
            return Err(Error::shape(format!(
                "bit tensor {shape:?} needs {} words, got {}",
                expected.words.len(),
                words.len()
            )));
        }
        Ok(Self { words, ..expected })
    }
}

/// Maps a row-major flat index onto (lane, position-in-lane).
#[inline]
fn split_index(flat: usize, len: usize, inner: usize) -> (usize, usize) {
    let i = flat % inner;
    let rest = flat / inner;
    let pos = rest % len;
    let outer = rest / len;
    (outer * inner + i, pos)
}

/// Packs along the innermost axis.
pub fn pack<T: Real>(t: &FloatTensor<T>) -> Result<BitTensor> {
    BitTensor::pack_innermost(t)
}

pub fn unpack<T: Real>(b: &BitTensor) -> FloatTensor<T> {
    b.unpack()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decoded(b: &BitTensor) -> Vec<f32> {
        b.unpack::<f32>().into_data()
    }

    #[test]
    fn sign_of_examples() {
        let t = FloatTensor::new(&[3], vec![0.5f32, -0.3, 2.0]).unwrap();
        assert_eq!(decoded(&pack(&t).unwrap()), vec![1.0, -1.0, 1.0]);
        let zero = FloatTensor::new(&[1], vec![0.0f32]).unwrap();
        assert_eq!(decoded(&pack(&zero).unwrap()), vec![-1.0]);
        let zeros = FloatTensor::<f32>::zeros(&[2, 3]);
        let b = pack(&zeros).unwrap();
        assert_eq!(b.shape(), &[2, 3]);
        assert_eq!(decoded(&b), vec![-1.0; 6]);
    }

    #[test]
    fn round_trips() {
        let t = FloatTensor::new(&[2], vec![1.0f32, -1.0]).unwrap();
        assert_eq!(decoded(&pack(&t).unwrap()), vec![1.0, -1.0]);
        let t = FloatTensor::new(&[1], vec![3.7f32]).unwrap();
        assert_eq!(decoded(&pack(&t).unwrap()), vec![1.0]);
    }

    #[test]
    fn non_finite_input_is_rejected_with_index() {
        let t = FloatTensor::new(&[4], vec![1.0f32, 2.0, f32::INFINITY, 0.0]).unwrap();
        match pack(&t) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn popcount_dot_examples() {
        let a = pack(&FloatTensor::new(&[4], vec![1.0f32, -1.0, 1.0, 1.0]).unwrap()).unwrap();
        let b = pack(&FloatTensor::new(&[4], vec![1.0f32, 1.0, -1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(popcount_dot(a.lane(0), b.lane(0)).unwrap(), 0);

        let n = 77;
        let v: Vec<f32> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let a = pack(&FloatTensor::new(&[n], v).unwrap()).unwrap();
        let b = pack(&FloatTensor::new(&[n], neg).unwrap()).unwrap();
        assert_eq!(popcount_dot(a.lane(0), a.lane(0)).unwrap(), n as i32);
        assert_eq!(popcount_dot(a.lane(0), b.lane(0)).unwrap(), -(n as i32));
    }

    #[test]
    fn length_mismatch_errors() {
        let a = BitTensor::minus_ones(&[3], 0);
        let b = BitTensor::minus_ones(&[4], 0);
        assert!(popcount_dot(a.lane(0), b.lane(0)).is_err());
    }

    #[test]
    fn packing_along_outer_axis_preserves_shape_and_values() {
        let t = FloatTensor::from_fn(&[3, 5, 2], |i| (i as f32 * 0.7).sin());
        for axis in 0..3 {
            let b = BitTensor::pack(&t, axis).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert_eq!(b.lane_len(), t.shape()[axis]);
            let expect: Vec<f32> = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect();
            assert_eq!(decoded(&b), expect);
            for flat in 0..t.len() {
                assert_eq!(b.get_flat(flat) as f32, expect[flat]);
            }
        }
    }

    #[test]
    fn fast_packers_match_generic_pack() {
        let t = FloatTensor::from_fn(&[7, 70], |i| ((i * 37 % 11) as f32) - 5.0);
        assert_eq!(BitTensor::pack_rows(t.data(), 70), BitTensor::pack(&t, 1).unwrap());
        assert_eq!(BitTensor::pack_cols(t.data(), 7, 70), BitTensor::pack(&t, 0).unwrap());
    }

    proptest! {
        #[test]
        fn unpack_pack_is_sign_image(v in proptest::collection::vec(-10.0f32..10.0, 1..200)) {
            let n = v.len();
            let t = FloatTensor::new(&[n], v.clone()).unwrap();
            let b = pack(&t).unwrap();
            prop_assert!(b.padding_is_clean());
            let expect: Vec<f32> = v.iter().map(|&x| if x > 0.0 { 1.0 } else { -1.0 }).collect();
            prop_assert_eq!(decoded(&b), expect);
        }

        #[test]
        fn popcount_dot_matches_float_dot(
            pair in (1usize..200).prop_flat_map(|n| (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            ))
        ) {
            let (a, b) = pair;
            let n = a.len();
            let to_t = |v: &[bool]| FloatTensor::new(&[n], v.iter().map(|&x| if x { 1.0f32 } else { -1.0 }).collect()).unwrap();
            let (ta, tb) = (to_t(&a), to_t(&b));
            let float_dot: f32 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
            let (pa, pb) = (pack(&ta).unwrap(), pack(&tb).unwrap());
            let d = popcount_dot(pa.lane(0), pb.lane(0)).unwrap();
            prop_assert_eq!(d as f32, float_dot);
            prop_assert!(d.unsigned_abs() as usize <= n);
            prop_assert_eq!((d - n as i32).rem_euclid(2), 0);
        }

        #[test]
        fn padding_garbage_never_changes_dot(n in 1usize..300, seed in any::<u64>()) {
            let a = FloatTensor::from_fn(&[n], |i| ((i as u64).wrapping_mul(seed | 1) % 7) as f32 - 3.0);
            let b = FloatTensor::from_fn(&[n], |i| ((i as u64 + seed) % 5) as f32 - 2.0);
            let (pa, mut pb) = (pack(&a).unwrap(), pack(&b).unwrap());
            let clean = popcount_dot(pa.lane(0), pb.lane(0)).unwrap();
            let last = pb.words().len() - 1;
            pb.words_mut()[last] |= !tail_mask(n);
            prop_assert_eq!(popcount_dot(pa.lane(0), pb.lane(0)).unwrap(), clean);
            pb.normalize_padding();
            prop_assert!(pb.padding_is_clean());
            prop_assert_eq!(popcount_dot(pa.lane(0), pb.lane(0)).unwrap(), clean);
        }
    }
}
