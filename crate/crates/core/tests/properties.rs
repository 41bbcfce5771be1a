//! Property tests for the library's invariants.

use bimlp::arch::ModelSpec;
use bimlp::complexity::analyze;
use bimlp::kernels::{binary_gemm, ste_backward, SteMode};
use bimlp::layers::{uni_shortcut, uni_shortcut_backward};
use bimlp::tensor::{pack, BitTensor, FloatTensor};
use bimlp::train::checkpoint::{decode, encode};
use bimlp::train::{cosine_lr, kd_loss, Init, KdLossConfig, Stage, TrainConfig, TrainState};
use proptest::collection::vec;
use proptest::prelude::*;

fn pm1(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
}

fn gemm_case() -> impl Strategy<Value = (usize, usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..20, 1usize..150, 1usize..20).prop_flat_map(|(m, k, n)| {
        (Just(m), Just(k), Just(n), vec(any::<bool>(), m * k), vec(any::<bool>(), k * n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_gemm_equals_float_gemm_and_lies_in_value_set((m, k, n, w, a) in gemm_case()) {
        let wt = FloatTensor::new(&[m, k], pm1(&w)).unwrap();
        let at = FloatTensor::new(&[k, n], pm1(&a)).unwrap();
        let got = binary_gemm::<f64>(&pack(&wt).unwrap(), &BitTensor::pack(&at, 0).unwrap()).unwrap();
        let want = wt.matmul(&at).unwrap();
        prop_assert_eq!(got.data(), want.data());
        for &v in got.data() {
            prop_assert!(v.abs() <= k as f64 && (v as i64 + k as i64) % 2 == 0);
        }
    }

    #[test]
    fn ste_gradient_is_clipped_and_windowed(
        pairs in vec((-5.0f64..5.0, -5.0f64..5.0), 1..100)
    ) {
        let n = pairs.len();
        let g = FloatTensor::new(&[n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let x = FloatTensor::new(&[n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let clip = ste_backward(&g, &x, SteMode::Clip).unwrap();
        let win = ste_backward(&g, &x, SteMode::Windowed).unwrap();
        for i in 0..n {
            prop_assert_eq!(clip.data()[i], g.data()[i].clamp(-1.0, 1.0));
            let want = if x.data()[i].abs() <= 1.0 { clip.data()[i] } else { 0.0 };
            prop_assert_eq!(win.data()[i], want);
        }
    }

    #[test]
    fn shortcut_expand_then_reduce_is_identity(
        (c, n, rows, bits) in (1usize..9, 1usize..9, 1usize..4)
            .prop_flat_map(|(c, n, r)| (Just(c), Just(n), Just(r), vec(any::<bool>(), c * r)))
    ) {
        let x = FloatTensor::new(&[rows, c], pm1(&bits)).unwrap();
        let up = uni_shortcut(&x, c * n).unwrap();
        prop_assert_eq!(up.shape(), &[rows, c * n]);
        let down = uni_shortcut(&up, c).unwrap();
        prop_assert_eq!(down.data(), x.data());
    }

    #[test]
    fn shortcut_backward_is_the_adjoint(
        (c_in, c_out, x, y) in prop_oneof![(1usize..6, 1usize..5).prop_map(|(c, n)| (c, c * n)),
                                          (1usize..6, 1usize..5).prop_map(|(c, n)| (c * n, c))]
            .prop_flat_map(|(ci, co)| (Just(ci), Just(co), vec(-2.0f64..2.0, 2 * ci), vec(-2.0f64..2.0, 2 * co)))
    ) {
        let xt = FloatTensor::new(&[2, c_in], x).unwrap();
        let yt = FloatTensor::new(&[2, c_out], y).unwrap();
        let fwd = uni_shortcut(&xt, c_out).unwrap();
        let back = uni_shortcut_backward(&yt, c_in).unwrap();
        let lhs: f64 = fwd.data().iter().zip(yt.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = xt.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn ops_identity_holds_for_any_input(h in 32usize..257, w in 32usize..257) {
        for name in ["bimlp-s", "tiny"] {
            let r = analyze(&ModelSpec::preset(name).unwrap(), h, w).unwrap();
            prop_assert_eq!(r.ops, r.bops as f64 / 64.0 + r.flops as f64);
            prop_assert_eq!(r.flops, r.rows.iter().map(|row| row.flops()).sum::<u64>());
        }
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(base in 1e-5f64..1.0, total in 1u64..10_000) {
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by((total as usize / 50).max(1)) {
            let lr = cosine_lr(base, step, total);
            prop_assert!((0.0..=base).contains(&lr) && lr <= prev);
            prev = lr;
        }
        prop_assert!(cosine_lr(base, total, total).abs() < 1e-12 * base);
    }

    #[test]
    fn kd_loss_gradient_rows_sum_to_zero(
        (k, s, t, labels, alpha) in (2usize..8).prop_flat_map(|k| (
            Just(k),
            vec(-6.0f64..6.0, 3 * k),
            vec(-6.0f64..6.0, 3 * k),
            vec(0..k, 3),
            0.0f64..=1.0,
        ))
    ) {
        let st = FloatTensor::new(&[3, k], s).unwrap();
        let tt = FloatTensor::new(&[3, k], t).unwrap();
        let cfg = KdLossConfig { alpha, temperature: 2.0 };
        let (loss, grad) = kd_loss(&st, Some(&tt), &labels, cfg).unwrap();
        prop_assert!(loss.is_finite() && loss >= -1e-12);
        for row in grad.data().chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn same_teacher_and_student_leaves_only_cross_entropy(
        (k, s, label) in (2usize..8).prop_flat_map(|k| (Just(k), vec(-6.0f64..6.0, k), 0..k))
    ) {
        let st = FloatTensor::new(&[1, k], s).unwrap();
        let kd = KdLossConfig { alpha: 0.9, temperature: 1.0 };
        let ce = KdLossConfig { alpha: 0.0, temperature: 1.0 };
        let (l_kd, _) = kd_loss(&st, Some(&st), &[label], kd).unwrap();
        let (l_ce, _) = kd_loss(&st, None, &[label], ce).unwrap();
        prop_assert!((l_kd - 0.1 * l_ce).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_is_byte_exact(seed in 0..=i64::MAX as u64, stage in 0u8..2) {
        let stage = Stage::from_index(stage).unwrap();
        let model = bimlp::arch::BiMlp::<f32>::new(&ModelSpec::tiny(), seed).unwrap();
        let mut st = TrainState::new(model, stage, Init::Scratch, TrainConfig::for_stage(stage, seed)).unwrap();
        let bytes = encode(&mut st, None).unwrap();
        let (_, mut back) = decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(encode(&mut back, None).unwrap(), bytes);
    }
}

#[test]
fn seeds_beyond_the_manifest_range_are_rejected() {
    let cfg = TrainConfig::for_stage(Stage::FullPrecision, u64::MAX);
    assert!(cfg.validate().unwrap_err().to_string().contains("seed"));
}
