//! Oracle suites behind `bimlp selftest`: binary kernels against dense ±1
//! arithmetic, the STE contract, the Uni-shortcut formulas and central
//! finite-difference gradient checks.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{BiMlp, ModelSpec};
use crate::error::{Error, Result};
use crate::kernels::{binary_conv2d, binary_gemm, conv_out_extent, ste_backward, SteMode};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, channel_fc_backward, channel_fc_forward, cycle_fc_backward,
    cycle_fc_forward, rprelu_backward, rprelu_forward, spatial_fc_backward, spatial_fc_forward, uni_shortcut,
    ActivationKind, BatchNormParams, ChannelFcParams, CycleFcParams, Mode, Parameterized,
    RpreluParams, SpatialFcParams,
};
use crate::tensor::{popcount_dot, BitLane, BitTensor, FloatTensor};
use crate::train::{kd_loss, KdLossConfig};

/// Deliberate corruption of one suite's result, used to prove the harness
/// actually detects failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Gemm,
    Conv,
    Ste,
    Shortcut,
    Gradient,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gemm" => Ok(Fault::Gemm),
            "conv" => Ok(Fault::Conv),
            "ste" => Ok(Fault::Ste),
            "shortcut" => Ok(Fault::Shortcut),
            "gradient" => Ok(Fault::Gradient),
            other => Err(Error::invalid(format!(
                "unknown fault `{other}` (expected gemm, conv, ste, shortcut or gradient)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen (relative for gradient suites, absolute otherwise).
    pub max_error: f64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            failures: 0,
            max_error: 0.0,
            first_failure: None,
        }
    }

    fn record(&mut self, error: f64, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        self.max_error = self.max_error.max(error);
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(format!("case {}: {}", self.cases - 1, detail()));
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<22} {:>6}/{:<6} passed  max error {:.3e}",
            self.name,
            self.cases - self.failures,
            self.cases,
            self.max_error
        )
    }
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn preview(v: &[f64]) -> String {
    let shown: Vec<String> = v.iter().take(32).map(|x| format!("{x}")).collect();
    let more = if v.len() > 32 { format!(", … ({} total)", v.len()) } else { String::new() };
    format!("[{}{more}]", shown.join(", "))
}

fn first_mismatch(want: &[f64], got: &[f64]) -> Option<usize> {
    want.iter().zip(got).position(|(a, b)| a != b)
}

/// `binary_gemm` against a dense triple loop over ±1 values, exact equality.
pub fn gemm_equivalence(cases: usize, max_extent: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("binary-gemm");
    for case in 0..cases {
        let (m, k, n) = (
            rng.gen_range(1..=max_extent),
            rng.gen_range(1..=max_extent),
            rng.gen_range(1..=max_extent),
        );
        let a = signs(&mut rng, m * k);
        let b = signs(&mut rng, k * n);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|q| a[i * k + q] * b[q * n + j]).sum();
            }
        }
        let (ax, bx) = (rng.gen_range(0..2), rng.gen_range(0..2));
        let got = (|| -> Result<Vec<f64>> {
            let wb = BitTensor::pack(&FloatTensor::new(&[m, k], a.clone())?, ax)?;
            let ab = BitTensor::pack(&FloatTensor::new(&[k, n], b.clone())?, bx)?;
            Ok(binary_gemm::<f64>(&wb, &ab)?.into_data())
        })();
        let mut got = got.unwrap_or_else(|_| vec![f64::NAN; m * n]);
        if fault == Some(Fault::Gemm) && case == cases / 2 {
            got[0] += 2.0;
        }
        let bad = first_mismatch(&want, &got);
        let err = want.iter().zip(&got).map(|(w, g)| (w - g).abs()).fold(0.0, f64::max);
        rep.record(err, bad.is_none(), || {
            let i = bad.unwrap_or(0);
            format!(
                "W {m}x{k} (packed axis {ax}) = {}, A {k}x{n} (packed axis {bx}) = {}; out[{},{}] expected {} got {}",
                preview(&a),
                preview(&b),
                i / n,
                i % n,
                want[i],
                got[i]
            )
        });
    }
    rep
}

/// `binary_conv2d` against a direct convolution of ±1 values with −1 padding.
pub fn conv_equivalence(cases: usize, max_extent: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("binary-conv2d");
    let spatial = max_extent.min(12);
    let outs = max_extent.min(16);
    for case in 0..cases {
        let c = rng.gen_range(1..=max_extent);
        let (h, w) = (rng.gen_range(1..=spatial), rng.gen_range(1..=spatial));
        let o = rng.gen_range(1..=outs);
        let padding = rng.gen_range(0..=2usize);
        let stride = rng.gen_range(1..=3usize);
        let kh = rng.gen_range(1..=(h + 2 * padding).min(5));
        let kw = rng.gen_range(1..=(w + 2 * padding).min(5));
        let (oh, ow) = match (conv_out_extent(h, kh, stride, padding), conv_out_extent(w, kw, stride, padding)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        let f = signs(&mut rng, c * h * w);
        let kern = signs(&mut rng, o * c * kh * kw);
        let at = |ch: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                -1.0
            } else {
                f[(ch * h + y as usize) * w + x as usize]
            }
        };
        let mut want = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                s += at(ch, y, x) * kern[((oc * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    want[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        let (fa, ka) = (rng.gen_range(0..3), rng.gen_range(0..4));
        let got = (|| -> Result<Vec<f64>> {
            let fb = BitTensor::pack(&FloatTensor::new(&[c, h, w], f.clone())?, fa)?;
            let kb = BitTensor::pack(&FloatTensor::new(&[o, c, kh, kw], kern.clone())?, ka)?;
            Ok(binary_conv2d::<f64>(&fb, &kb, stride, padding)?.into_data())
        })();
        let mut got = got.unwrap_or_else(|_| vec![f64::NAN; want.len()]);
        if fault == Some(Fault::Conv) && case == cases / 2 {
            let last = got.len() - 1;
            got[last] -= 2.0;
        }
        let bad = first_mismatch(&want, &got);
        let err = want.iter().zip(&got).map(|(w, g)| (w - g).abs()).fold(0.0, f64::max);
        rep.record(err, bad.is_none(), || {
            let i = bad.unwrap_or(0);
            format!(
                "input {c}x{h}x{w} = {}, kernel {o}x{c}x{kh}x{kw} = {}, stride {stride}, padding {padding}; \
                 out[{i}] expected {} got {}",
                preview(&f),
                preview(&kern),
                want[i],
                got[i]
            )
        });
    }
    rep
}

/// Every binary dot product of length `N` lies in `{−N, −N+2, …, N}`.
pub fn output_set(cases: usize, max_len: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("output-set");
    for _ in 0..cases {
        let n = rng.gen_range(1..=max_len);
        let a = signs(&mut rng, n);
        let b = signs(&mut rng, n);
        let want: i64 = a.iter().zip(&b).map(|(x, y)| (x * y) as i64).sum();
        let got = (|| -> Result<i64> {
            let pa = BitTensor::pack(&FloatTensor::new(&[n], a.clone())?, 0)?;
            let pb = BitTensor::pack(&FloatTensor::new(&[n], b.clone())?, 0)?;
            Ok(popcount_dot(BitLane::new(pa.words(), n)?, BitLane::new(pb.words(), n)?)? as i64)
        })()
        .unwrap_or(i64::MIN);
        let in_set = got.abs() <= n as i64 && (got + n as i64) % 2 == 0;
        rep.record((want - got).unsigned_abs() as f64, in_set && got == want, || {
            format!("N = {n}: expected {want}, got {got} (in S_b: {in_set})")
        });
    }
    rep
}

/// `ste_backward` is exactly `clip(g, −1, 1)` (clip mode), and additionally
/// zero where `|x| > 1` (windowed mode).
pub fn ste_contract(cases: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("ste");
    for case in 0..cases {
        let len = rng.gen_range(1..=256);
        let x: Vec<f64> = (0..len)
            .map(|_| match rng.gen_range(0..8) {
                0 => 1.0,
                1 => -1.0,
                _ => rng.gen_range(-3.0..3.0),
            })
            .collect();
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let xt = FloatTensor::new(&[len], x.clone()).expect("shape");
        let gt = FloatTensor::new(&[len], g.clone()).expect("shape");
        let mut worst = 0.0f64;
        let mut detail = None;
        for mode in [SteMode::Clip, SteMode::Windowed] {
            let mut got = ste_backward(&gt, &xt, mode).map(|t| t.into_data()).unwrap_or_default();
            if fault == Some(Fault::Ste) && case == cases / 2 && mode == SteMode::Windowed {
                got[0] = g[0];
            }
            for i in 0..len {
                let clip = g[i].clamp(-1.0, 1.0);
                let want = if mode == SteMode::Windowed && x[i].abs() > 1.0 { 0.0 } else { clip };
                let d = got.get(i).map_or(f64::INFINITY, |v| (v - want).abs());
                worst = worst.max(d);
                if d != 0.0 && detail.is_none() {
                    detail = Some(format!(
                        "{mode:?} mode, element {i}: x = {}, g = {}, expected {want}, got {}",
                        x[i],
                        g[i],
                        got.get(i).copied().unwrap_or(f64::NAN)
                    ));
                }
            }
        }
        rep.record(worst, detail.is_none(), || detail.clone().unwrap_or_default());
    }
    rep
}

/// Uni-shortcut against the chunk-average and repeat-concat formulas for
/// every integer-ratio `(c_in, c_out)` pair up to `max_c`, plus the identity
/// and expand-then-reduce properties.
pub fn uni_shortcut_suite(max_c: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("uni-shortcut");
    let rows = 3;
    for c_in in 1..=max_c {
        for c_out in 1..=max_c {
            if c_in % c_out != 0 && c_out % c_in != 0 {
                continue;
            }
            let x: Vec<f64> = (0..rows * c_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut want = Vec::with_capacity(rows * c_out);
            for r in 0..rows {
                let row = &x[r * c_in..(r + 1) * c_in];
                if c_in >= c_out {
                    // Mean over the n contiguous chunks of width c_out.
                    let n = c_in / c_out;
                    for j in 0..c_out {
                        let chunk_sum: f64 = (0..n).map(|i| row[i * c_out + j]).sum();
                        want.push(chunk_sum / n as f64);
                    }
                } else {
                    // The row repeated n times, concatenated.
                    for _ in 0..c_out / c_in {
                        want.extend_from_slice(row);
                    }
                }
            }
            let xt = FloatTensor::new(&[rows, c_in], x.clone()).expect("shape");
            let mut got = uni_shortcut(&xt, c_out).map(|t| t.into_data()).unwrap_or_default();
            if fault == Some(Fault::Shortcut) && c_in == max_c && c_out == 1 {
                got[0] *= 1.5;
            }
            let mut err = if got.len() == want.len() {
                want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            } else {
                f64::INFINITY
            };
            let mut what = format!("c_in {c_in} → c_out {c_out}");
            if c_in == c_out && got != x {
                err = f64::INFINITY;
                what.push_str(" (identity)");
            }
            if c_out > c_in {
                // Round trip on binarized input, where the shortcut is applied.
                let xb = signs(&mut rng, rows * c_in);
                let round = uni_shortcut(&t(&[rows, c_in], &xb), c_out)
                    .and_then(|up| uni_shortcut(&up, c_in))
                    .map(|t| t.into_data())
                    .unwrap_or_default();
                if round != xb {
                    err = f64::INFINITY;
                    what.push_str(" (expand then reduce)");
                }
            }
            rep.record(err, err <= 1e-12, || {
                format!("{what}: input {} expected {} got {}", preview(&x), preview(&want), preview(&got))
            });
        }
    }
    rep
}

/// Relative error `‖a − f‖ / max(‖a‖, ‖f‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let d: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = numeric.iter().map(|f| f * f).sum::<f64>().sqrt();
    d / na.max(nf).max(floor)
}

/// Central differences of `f` at `x`, step `h`, for every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Layers covered by the finite-difference suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    ChannelFc,
    SpatialFc,
    CycleFc,
    BatchNorm,
    Rprelu,
    KdLoss,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        GradTarget::ChannelFc,
        GradTarget::SpatialFc,
        GradTarget::CycleFc,
        GradTarget::BatchNorm,
        GradTarget::Rprelu,
        GradTarget::KdLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::ChannelFc => "grad-channel-fc",
            GradTarget::SpatialFc => "grad-spatial-fc",
            GradTarget::CycleFc => "grad-cycle-fc",
            GradTarget::BatchNorm => "grad-batchnorm",
            GradTarget::Rprelu => "grad-rprelu",
            GradTarget::KdLoss => "grad-kd-loss",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

fn t(shape: &[usize], v: &[f64]) -> FloatTensor<f64> {
    FloatTensor::new(shape, v.to_vec()).expect("generated shapes are consistent")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One random finite-difference case: returns `(analytic, numeric, description)`
/// over every input and parameter, with the scalar loss `⟨r, layer(x)⟩`.
fn grad_case(target: GradTarget, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>, String)> {
    const H: f64 = 1e-6;
    Ok(match target {
        GradTarget::ChannelFc => {
            let (rows, di, d_o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6));
            let bias = rng.gen::<bool>();
            let x = uniform(rng, rows * di, 1.0);
            let w = uniform(rng, di * d_o, 1.0);
            let b = uniform(rng, d_o, 1.0);
            let r = uniform(rng, rows * d_o, 1.0);
            let build = |w: &[f64], b: &[f64]| {
                ChannelFcParams::new(t(&[di, d_o], w), bias.then(|| t(&[d_o], b))).expect("shapes")
            };
            let p = build(&w, &b);
            let (gx, gp) = channel_fc_backward(&t(&[rows, di], &x), &p, &t(&[rows, d_o], &r))?;
            let mut an = gx.into_data();
            an.extend(gp.weight.into_data());
            let loss = |x: &[f64], w: &[f64], b: &[f64]| {
                dot(&r, channel_fc_forward(&t(&[rows, di], x), &build(w, b)).expect("fwd").data())
            };
            let mut num = numeric_gradient(&x, H, |v| loss(v, &w, &b));
            num.extend(numeric_gradient(&w, H, |v| loss(&x, v, &b)));
            if let Some(gb) = gp.bias {
                an.extend(gb.into_data());
                num.extend(numeric_gradient(&b, H, |v| loss(&x, &w, v)));
            }
            (an, num, format!("x {rows}x{di}, W {di}x{d_o}, bias {bias}"))
        }
        GradTarget::SpatialFc => {
            let (bt, n, n_o, d) =
                (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
            let x = uniform(rng, bt * n * d, 1.0);
            let w = uniform(rng, n * n_o, 1.0);
            let r = uniform(rng, bt * n_o * d, 1.0);
            let p = SpatialFcParams::new(t(&[n, n_o], &w))?;
            let (gx, gw) = spatial_fc_backward(&t(&[bt, n, d], &x), &p, &t(&[bt, n_o, d], &r))?;
            let mut an = gx.into_data();
            an.extend(gw.into_data());
            let loss = |x: &[f64], w: &[f64]| {
                let p = SpatialFcParams::new(t(&[n, n_o], w)).expect("shape");
                dot(&r, spatial_fc_forward(&t(&[bt, n, d], x), &p).expect("fwd").data())
            };
            let mut num = numeric_gradient(&x, H, |v| loss(v, &w));
            num.extend(numeric_gradient(&w, H, |v| loss(&x, v)));
            (an, num, format!("x {bt}x{n}x{d}, W {n}x{n_o}"))
        }
        GradTarget::CycleFc => {
            let (bt, h, w_, c, c_o) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=5),
                rng.gen_range(1..=4),
            );
            let (rh, rw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let pad = if rng.gen::<bool>() { 0.0 } else { -1.0 };
            let shape = [bt, h, w_, c];
            let z = uniform(rng, bt * h * w_ * c, 1.0);
            let wt = uniform(rng, c * c_o, 1.0);
            let r = uniform(rng, bt * h * w_ * c_o, 1.0);
            let p = CycleFcParams::new(t(&[c, c_o], &wt), rh, rw)?;
            let (gz, gw) = cycle_fc_backward(&t(&shape, &z), &p, pad, &t(&[bt, h, w_, c_o], &r))?;
            let mut an = gz.into_data();
            an.extend(gw.into_data());
            let loss = |z: &[f64], wt: &[f64]| {
                let p = CycleFcParams::new(t(&[c, c_o], wt), rh, rw).expect("shape");
                dot(&r, cycle_fc_forward(&t(&shape, z), &p, pad).expect("fwd").data())
            };
            let mut num = numeric_gradient(&z, H, |v| loss(v, &wt));
            num.extend(numeric_gradient(&wt, H, |v| loss(&z, v)));
            (an, num, format!("z {bt}x{h}x{w_}x{c}, W {c}x{c_o}, receptive {rh}x{rw}, pad {pad}"))
        }
        GradTarget::BatchNorm => {
            let (rows, c) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
            let x = uniform(rng, rows * c, 2.0);
            let scale: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
            let shift = uniform(rng, c, 0.5);
            let r = uniform(rng, rows * c, 1.0);
            let build = |s: &[f64], b: &[f64]| {
                let mut p = BatchNormParams::new(c);
                p.scale = t(&[c], s);
                p.shift = t(&[c], b);
                p
            };
            let mut p = build(&scale, &shift);
            let (_, cache) = batchnorm_forward(&t(&[rows, c], &x), &mut p, true)?;
            let (gx, gs, gb) = batchnorm_backward(&cache, &p, &t(&[rows, c], &r))?;
            let mut an = gx.into_data();
            an.extend(gs.into_data());
            an.extend(gb.into_data());
            let loss = |x: &[f64], s: &[f64], b: &[f64]| {
                let mut p = build(s, b);
                dot(&r, batchnorm_forward(&t(&[rows, c], x), &mut p, true).expect("fwd").0.data())
            };
            let mut num = numeric_gradient(&x, H, |v| loss(v, &scale, &shift));
            num.extend(numeric_gradient(&scale, H, |v| loss(&x, v, &shift)));
            num.extend(numeric_gradient(&shift, H, |v| loss(&x, &scale, v)));
            (an, num, format!("x {rows}x{c} (training statistics)"))
        }
        GradTarget::Rprelu => {
            let (rows, c) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let gamma = uniform(rng, c, 0.5);
            let beta = uniform(rng, c, 1.0);
            let zeta = uniform(rng, c, 0.5);
            // Keep every input clear of the kink at x = γ.
            let x: Vec<f64> = (0..rows * c)
                .map(|i| loop {
                    let v = rng.gen_range(-2.0..2.0);
                    if (v - gamma[i % c]).abs() > 1e-2 {
                        break v;
                    }
                })
                .collect();
            let r = uniform(rng, rows * c, 1.0);
            let build = |g: &[f64], b: &[f64], z: &[f64]| {
                let mut p = RpreluParams::new(c, ActivationKind::Rprelu);
                p.gamma = t(&[c], g);
                p.beta = t(&[c], b);
                p.zeta = t(&[c], z);
                p
            };
            let p = build(&gamma, &beta, &zeta);
            let (gx, gp) = rprelu_backward(&t(&[rows, c], &x), &p, &t(&[rows, c], &r))?;
            let mut an = gx.into_data();
            an.extend(gp.gamma.into_data());
            an.extend(gp.beta.into_data());
            an.extend(gp.zeta.into_data());
            let loss = |x: &[f64], g: &[f64], b: &[f64], z: &[f64]| {
                dot(&r, rprelu_forward(&t(&[rows, c], x), &build(g, b, z)).expect("fwd").data())
            };
            let mut num = numeric_gradient(&x, H, |v| loss(v, &gamma, &beta, &zeta));
            num.extend(numeric_gradient(&gamma, H, |v| loss(&x, v, &beta, &zeta)));
            num.extend(numeric_gradient(&beta, H, |v| loss(&x, &gamma, v, &zeta)));
            num.extend(numeric_gradient(&zeta, H, |v| loss(&x, &gamma, &beta, v)));
            (an, num, format!("x {rows}x{c}"))
        }
        GradTarget::KdLoss => {
            let (b, k) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let s = uniform(rng, b * k, 3.0);
            let te = uniform(rng, b * k, 3.0);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let cfg = KdLossConfig {
                alpha: rng.gen_range(0.0..=1.0),
                temperature: [1.0, 2.0, 4.0][rng.gen_range(0..3)],
            };
            let teacher = t(&[b, k], &te);
            let (_, g) = kd_loss(&t(&[b, k], &s), Some(&teacher), &labels, cfg)?;
            let num = numeric_gradient(&s, H, |v| {
                kd_loss(&t(&[b, k], v), Some(&teacher), &labels, cfg).expect("loss").0
            });
            (
                g.into_data(),
                num,
                format!("logits {b}x{k}, alpha {:.3}, temperature {}", cfg.alpha, cfg.temperature),
            )
        }
    })
}

/// `cases` random finite-difference checks of one layer, relative error < `tol`.
pub fn gradient_suite(target: GradTarget, cases: usize, tol: f64, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new(target.name());
    for case in 0..cases {
        match grad_case(target, &mut rng) {
            Ok((mut an, num, what)) => {
                if fault == Some(Fault::Gradient) && case == cases / 2 {
                    an.iter_mut().for_each(|v| *v = -*v);
                }
                let err = relative_error(&an, &num, 1e-10);
                rep.record(err, err < tol, || {
                    format!("{what}: analytic {} vs numeric {} (relative error {err:.3e})", preview(&an), preview(&num))
                });
            }
            Err(e) => rep.record(f64::INFINITY, false, || format!("layer error: {e}")),
        }
    }
    rep
}

/// End-to-end finite differences of the full-precision model (64-bit),
/// sampling `per_tensor` coordinates of every trainable tensor.
pub fn model_gradient(spec: &ModelSpec, seed: u64, per_tensor: usize, tol: f64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("grad-model");
    let mut model = BiMlp::<f64>::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let side = 32;
    let x = FloatTensor::from_fn(&[2, spec.in_channels, side, side], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..spec.num_classes)).collect();
    let cfg = KdLossConfig {
        alpha: 0.0,
        temperature: 1.0,
    };
    let mode = Mode::full_precision(true);
    let loss = |m: &mut BiMlp<f64>| -> Result<(f64, FloatTensor<f64>)> {
        let logits = m.forward(&x, mode)?;
        kd_loss(&logits, None, &labels, cfg)
    };
    model.zero_grad();
    let (_, g) = loss(&mut model)?;
    model.backward(&g)?;
    let mut targets = Vec::new();
    model.visit_params("", &mut |name, p| {
        if p.trainable() {
            let n = p.value.len();
            let picks: Vec<usize> = (0..per_tensor.min(n)).map(|i| i * n / per_tensor.min(n)).collect();
            targets.push((name.to_string(), picks, p.grad.data().to_vec()));
        }
    });
    let h = 1e-5;
    let mut an_all = Vec::new();
    let mut num_all = Vec::new();
    for (name, picks, grad) in &targets {
        let mut an = Vec::new();
        let mut num = Vec::new();
        for &k in picks {
            let nudge = |m: &mut BiMlp<f64>, d: f64| {
                m.visit_params("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[k] += d;
                    }
                })
            };
            nudge(&mut model, h);
            let up = loss(&mut model)?.0;
            nudge(&mut model, -2.0 * h);
            let down = loss(&mut model)?.0;
            nudge(&mut model, h);
            an.push(grad[k]);
            num.push((up - down) / (2.0 * h));
        }
        an_all.extend_from_slice(&an);
        num_all.extend_from_slice(&num);
        // Per-tensor errors are reported relative to the whole gradient's scale.
        let scale = an_all.iter().chain(&num_all).fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        let err = an.iter().zip(&num).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max) / scale;
        rep.record(err, err < tol, || {
            format!("{name} at {picks:?}: analytic {} vs numeric {}", preview(&an), preview(&num))
        });
    }
    let overall = relative_error(&an_all, &num_all, 1e-10);
    rep.record(overall, overall < tol, || format!("whole-model relative error {overall:.3e}"));
    Ok(rep)
}

/// Case counts for the standard selftest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestConfig {
    pub seed: u64,
    pub kernel_cases: usize,
    pub output_set_cases: usize,
    pub ste_cases: usize,
    pub shortcut_max_c: usize,
    pub grad_cases: usize,
    pub grad_tol: f64,
    pub model_check: bool,
    pub fault: Option<Fault>,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            kernel_cases: 1000,
            output_set_cases: 10_000,
            ste_cases: 1000,
            shortcut_max_c: 64,
            grad_cases: 20,
            grad_tol: 1e-4,
            model_check: true,
            fault: None,
        }
    }
}

/// Runs every suite in a fixed order.
pub fn selftest(cfg: &SelftestConfig) -> Result<Vec<SuiteReport>> {
    let s = cfg.seed;
    let mut out = vec![
        gemm_equivalence(cfg.kernel_cases, 64, s, cfg.fault),
        conv_equivalence(cfg.kernel_cases, 64, s.wrapping_add(1), cfg.fault),
        output_set(cfg.output_set_cases, 600, s.wrapping_add(2)),
        ste_contract(cfg.ste_cases, s.wrapping_add(3), cfg.fault),
        uni_shortcut_suite(cfg.shortcut_max_c, s.wrapping_add(4), cfg.fault),
    ];
    for (i, target) in GradTarget::ALL.into_iter().enumerate() {
        out.push(gradient_suite(target, cfg.grad_cases, cfg.grad_tol, s.wrapping_add(10 + i as u64), cfg.fault));
    }
    if cfg.model_check {
        out.push(model_gradient(&ModelSpec::tiny(), s, 2, 1e-3)?);
    }
    Ok(out)
}

/// Per-suite lines followed by the first failure of each failing suite.
pub fn render(reports: &[SuiteReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "{} {}", if r.passed() { "PASS" } else { "FAIL" }, r.summary());
    }
    for r in reports.iter().filter(|r| !r.passed()) {
        let _ = writeln!(s, "first failure in {}: {}", r.name, r.first_failure.as_deref().unwrap_or("no cases ran"));
    }
    s
}
