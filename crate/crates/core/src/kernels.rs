//! XNOR-popcount kernels and the straight-through estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::bits::dot_words;
use crate::tensor::{BitTensor, FloatTensor, Real};

/// Upper bound on the reduction length of any binary kernel. Keeps the
/// popcount accumulator far away from `i32` overflow.
pub const MAX_REDUCTION: usize = 1 << 20;

/// Extents of a binary matrix product `[m×k] · [k×n]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryGemmPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl BinaryGemmPlan {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self> {
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::invalid(format!("binary gemm extents must be ≥ 1, got {m}×{k}×{n}")));
        }
        if k > MAX_REDUCTION {
            return Err(Error::invalid(format!("reduction length {k} exceeds {MAX_REDUCTION}")));
        }
        Ok(Self { m, k, n })
    }

    pub fn rep_ability(&self) -> RepAbilityReport {
        RepAbilityReport::new(self.k as u64)
    }
}

/// The value set `{−N, −N+2, …, N}` reachable by a binary layer with
/// reduction length `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepAbilityReport {
    pub n: u64,
    pub value_set_size: u64,
    pub min: i64,
    pub max: i64,
}

impl RepAbilityReport {
    pub fn new(n: u64) -> Self {
        Self {
            n,
            value_set_size: n + 1,
            min: -(n as i64),
            max: n as i64,
        }
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.min && v <= self.max && (v - self.min) % 2 == 0
    }

    pub fn values(&self) -> impl Iterator<Item = i64> {
        (self.min..=self.max).step_by(2)
    }
}

/// Representation ability of a binarized layer: `N = C_in·K_h·K_w`.
pub fn representation_ability(layer: &LayerSpec) -> Result<RepAbilityReport> {
    if !layer.binary {
        return Err(Error::invalid(format!("layer `{}` is not binarized", layer.name)));
    }
    let n = layer
        .reduction_len()
        .ok_or_else(|| Error::invalid(format!("layer `{}` has no reduction axis", layer.name)))?;
    Ok(RepAbilityReport::new(n))
}

/// `Wb · Ab` for sign-packed matrices. `wb` is `m×k`, `ab` is `k×n`; operands
/// not already packed along the contraction axis are repacked.
pub fn binary_gemm<T: Real>(wb: &BitTensor, ab: &BitTensor) -> Result<FloatTensor<T>> {
    let ([m, k], [k2, n]) = (wb.shape(), ab.shape()) else {
        return Err(Error::shape(format!(
            "binary_gemm needs rank-2 operands, got {:?} and {:?}",
            wb.shape(),
            ab.shape()
        )));
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "binary_gemm inner extents differ: {:?} · {:?}",
            wb.shape(),
            ab.shape()
        )));
    }
    let plan = BinaryGemmPlan::new(*m, *k, *n)?;
    let rows = wb.repack(1)?;
    let cols = ab.repack(0)?;
    let mut out = vec![T::zero(); plan.m * plan.n];
    gemm_lanes(&rows, &cols, &mut out);
    FloatTensor::new(&[plan.m, plan.n], out)
}

/// Dot products of every lane of `rows` with every lane of `cols`, written
/// row-major into `out`. Both operands must share the lane length.
pub(crate) fn gemm_lanes<T: Real>(rows: &BitTensor, cols: &BitTensor, out: &mut [T]) {
    let (n, k) = (cols.num_lanes(), rows.lane_len());
    debug_assert_eq!(k, cols.lane_len());
    debug_assert_eq!(out.len(), rows.num_lanes() * n);
    if n == 0 {
        return;
    }
    let wpl = rows.words_per_lane();
    let cw = cols.words();
    out.par_chunks_mut(n).enumerate().for_each(|(i, row_out)| {
        let a = &rows.words()[i * wpl..(i + 1) * wpl];
        for (j, o) in row_out.iter_mut().enumerate() {
            *o = T::of(dot_words(a, &cw[j * wpl..(j + 1) * wpl], k) as f64);
        }
    });
}

/// Output extent of a strided, padded window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be ≥ 1"));
    }
    if input + 2 * padding < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Binary convolution of `fb: [C_in×H×W]` with `kb: [C_out×C_in×K_h×K_w]`.
/// Out-of-range taps read −1, so every output stays in `{−N, …, N}`.
pub fn binary_conv2d<T: Real>(fb: &BitTensor, kb: &BitTensor, stride: usize, padding: usize) -> Result<FloatTensor<T>> {
    let ([c_in, h, w], [c_out, kc, kh, kw]) = (fb.shape(), kb.shape()) else {
        return Err(Error::shape(format!(
            "binary_conv2d needs [C,H,W] input and [O,C,Kh,Kw] kernel, got {:?} and {:?}",
            fb.shape(),
            kb.shape()
        )));
    };
    let (c_in, h, w, c_out, kh, kw) = (*c_in, *h, *w, *c_out, *kh, *kw);
    if *kc != c_in {
        return Err(Error::shape(format!("kernel expects {kc} input channels, input has {c_in}")));
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let patch = c_in * kh * kw;
    let plan = BinaryGemmPlan::new(c_out, patch, oh * ow)?;

    // Kernels as lanes over (c, ky, kx).
    let mut kernel_lanes = BitTensor::minus_ones(&[c_out, patch], 1);
    let wpl = kernel_lanes.words_per_lane();
    for o in 0..c_out {
        for q in 0..patch {
            if kb.get_flat(o * patch + q) > 0 {
                kernel_lanes.words_mut()[o * wpl + q / 64] |= 1 << (q % 64);
            }
        }
    }

    // im2col on bits: one lane per output position, padding taps stay 0 (−1).
    let decoded: Vec<i8> = (0..c_in * h * w).map(|i| fb.get_flat(i)).collect();
    let mut patches = BitTensor::minus_ones(&[patch, oh * ow], 0);
    for oy in 0..oh {
        for ox in 0..ow {
            let lane = oy * ow + ox;
            let words = &mut patches.words_mut()[lane * wpl..(lane + 1) * wpl];
            for c in 0..c_in {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        if decoded[(c * h + iy as usize) * w + ix as usize] > 0 {
                            let q = (c * kh + ky) * kw + kx;
                            words[q / 64] |= 1 << (q % 64);
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![T::zero(); plan.m * plan.n];
    gemm_lanes(&kernel_lanes, &patches, &mut out);
    FloatTensor::new(&[c_out, oh, ow], out)
}

/// Backward rule used for the sign function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteMode {
    /// Clip the incoming gradient to [−1, 1] and nothing else.
    Clip,
    /// Clip, and additionally zero the gradient where |input| > 1.
    #[default]
    Windowed,
}

/// Straight-through estimator for `sign`.
pub fn ste_backward<T: Real>(upstream: &FloatTensor<T>, input: &FloatTensor<T>, mode: SteMode) -> Result<FloatTensor<T>> {
    upstream.expect_same_shape(input, "ste_backward")?;
    let mut grad = upstream.clone();
    ste_in_place(grad.data_mut(), input.data(), mode);
    Ok(grad)
}

pub(crate) fn ste_in_place<T: Real>(grad: &mut [T], input: &[T], mode: SteMode) {
    let one = T::one();
    for (g, &x) in grad.iter_mut().zip(input) {
        *g = if mode == SteMode::Windowed && x.abs() > one {
            T::zero()
        } else {
            g.max(-one).min(one)
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerKind, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signs(shape: &[usize], v: &[f32]) -> BitTensor {
        BitTensor::pack_innermost(&FloatTensor::new(shape, v.to_vec()).unwrap()).unwrap()
    }

    fn random_signs(rng: &mut ChaCha8Rng, shape: &[usize]) -> FloatTensor<f32> {
        FloatTensor::from_fn(shape, |_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
    }

    #[test]
    fn identity_pattern_times_ones_is_zero() {
        let w = signs(&[2, 2], &[1.0, -1.0, -1.0, 1.0]);
        let a = signs(&[2, 2], &[1.0; 4]);
        let y: FloatTensor<f32> = binary_gemm(&w, &a).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn random_gemm_matches_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_signs(&mut rng, &[8, 16]);
        let a = random_signs(&mut rng, &[16, 4]);
        let oracle = w.matmul(&a).unwrap();
        let got: FloatTensor<f32> =
            binary_gemm(&BitTensor::pack_innermost(&w).unwrap(), &BitTensor::pack_innermost(&a).unwrap()).unwrap();
        assert_eq!(got, oracle);
    }

    #[test]
    fn k3_outputs_stay_in_value_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_signs(&mut rng, &[40, 3]);
        let a = random_signs(&mut rng, &[3, 40]);
        let y: FloatTensor<f32> =
            binary_gemm(&BitTensor::pack_innermost(&w).unwrap(), &BitTensor::pack_innermost(&a).unwrap()).unwrap();
        for v in y.data() {
            assert!([-3.0, -1.0, 1.0, 3.0].contains(v), "{v}");
        }
    }

    #[test]
    fn gemm_shape_mismatch_errors() {
        let w = BitTensor::minus_ones(&[2, 3], 1);
        let a = BitTensor::minus_ones(&[4, 2], 1);
        assert!(binary_gemm::<f32>(&w, &a).is_err());
    }

    #[test]
    fn conv_1x1_identity() {
        let f = signs(&[1, 2, 3], &[1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let k = signs(&[1, 1, 1, 1], &[1.0]);
        let y: FloatTensor<f32> = binary_conv2d(&f, &k, 1, 0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn conv_3x3_ones_with_minus_one_padding() {
        let f = signs(&[1, 5, 5], &[1.0; 25]);
        let k = signs(&[1, 1, 3, 3], &[1.0; 9]);
        let y: FloatTensor<f32> = binary_conv2d(&f, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], -1.0);
        // edge (non-corner): 6 in range, 3 padded
        assert_eq!(y.data()[2], 3.0);
    }

    #[test]
    fn conv_shape_errors() {
        let f = BitTensor::minus_ones(&[2, 2, 2], 2);
        let k = BitTensor::minus_ones(&[1, 3, 1, 1], 3);
        assert!(binary_conv2d::<f32>(&f, &k, 1, 0).is_err());
        let k = BitTensor::minus_ones(&[1, 2, 5, 5], 3);
        assert!(binary_conv2d::<f32>(&f, &k, 1, 0).is_err());
    }

    #[test]
    fn ste_examples() {
        let g = FloatTensor::new(&[3], vec![0.5f32, 2.0, -3.0]).unwrap();
        let x = FloatTensor::new(&[3], vec![0.1f32, 0.2, -0.3]).unwrap();
        for mode in [SteMode::Clip, SteMode::Windowed] {
            assert_eq!(ste_backward(&g, &x, mode).unwrap().data(), &[0.5, 1.0, -1.0]);
        }
        let zero = FloatTensor::<f32>::zeros(&[3]);
        assert_eq!(ste_backward(&zero, &x, SteMode::Windowed).unwrap(), zero);
        let g = FloatTensor::new(&[1], vec![0.7f32]).unwrap();
        let x = FloatTensor::new(&[1], vec![1.5f32]).unwrap();
        assert_eq!(ste_backward(&g, &x, SteMode::Windowed).unwrap().data(), &[0.0]);
        assert_eq!(ste_backward(&g, &x, SteMode::Clip).unwrap().data(), &[0.7]);
        assert!(ste_backward(&g, &FloatTensor::zeros(&[2]), SteMode::Clip).is_err());
    }

    #[test]
    fn ste_idempotent_and_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = FloatTensor::from_fn(&[20], |_| rng.gen_range(-3.0f64..3.0));
            let x = FloatTensor::from_fn(&[20], |_| rng.gen_range(-2.0f64..2.0));
            for mode in [SteMode::Clip, SteMode::Windowed] {
                let once = ste_backward(&g, &x, mode).unwrap();
                let twice = ste_backward(&once, &x, mode).unwrap();
                assert_eq!(once, twice);
                let neg = ste_backward(&g.map(|v| -v), &x, mode).unwrap();
                assert_eq!(neg, once.map(|v| -v));
            }
        }
    }

    #[test]
    fn representation_ability_examples() {
        let fc = LayerSpec::new("fc", LayerKind::ChannelFc { c_in: 64, c_out: 64, tokens: 1 }, true);
        let r = representation_ability(&fc).unwrap();
        assert_eq!((r.n, r.value_set_size), (64, 65));

        let conv = LayerSpec::new(
            "conv",
            LayerKind::Conv { c_in: 64, c_out: 64, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1, out_h: 8, out_w: 8 },
            true,
        );
        let rc = representation_ability(&conv).unwrap();
        assert_eq!(rc.n, 576);
        assert_eq!(rc.n / r.n, 9);

        let one = LayerSpec::new(
            "1x1",
            LayerKind::Conv { c_in: 3, c_out: 8, kernel_h: 1, kernel_w: 1, stride: 1, padding: 0, out_h: 4, out_w: 4 },
            true,
        );
        let r1 = representation_ability(&one).unwrap();
        assert_eq!(r1.values().collect::<Vec<_>>(), vec![-3, -1, 1, 3]);

        let fp = LayerSpec::new("fp", LayerKind::ChannelFc { c_in: 4, c_out: 4, tokens: 1 }, false);
        assert!(representation_ability(&fp).is_err());
    }

    #[test]
    fn plan_bounds() {
        assert!(BinaryGemmPlan::new(0, 1, 1).is_err());
        assert!(BinaryGemmPlan::new(1, MAX_REDUCTION + 1, 1).is_err());
        assert_eq!(BinaryGemmPlan::new(2, 5, 3).unwrap().rep_ability().value_set_size, 6);
    }
}
