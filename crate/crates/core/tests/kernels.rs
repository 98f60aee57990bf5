//! Loss and attention kernels: independent forward oracles and
//! finite-difference gradient checks.

use csvd_core::kernels::{
    cldice_loss, deep_supervision_aggregate, exclusion_loss, finite_difference_check,
    finite_difference_check_filtered, gated_attention_backward, gated_attention_forward, soft_dilate, soft_erode,
    soft_skeleton, total_loss, tversky_loss, AttentionWeights, FdScheme, SkeletonTape, Tensor4D, TverskyParams,
    UncertaintyState, DEFAULT_DEEP_SUPERVISION_WEIGHTS,
};
use csvd_core::match_eval::dice;
use csvd_core::volume::{BinaryMask, Geometry};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4D {
    let n = shape.iter().product();
    Tensor4D::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, shape: [usize; 4], p: f64) -> Tensor4D {
    let n = shape.iter().product();
    Tensor4D::new(shape, (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, c: usize, r: usize, zero_value: bool) -> AttentionWeights {
    let ci = c / r;
    let mut w = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (wq, wk) = (w(ci * c), w(ci * c));
    let wv = if zero_value { vec![0.0; c * c] } else { w(c * c) };
    AttentionWeights::new(c, r, wq, wk, wv).unwrap()
}

/// Direct per-voxel evaluation of the attention formula with explicit loops.
fn attention_oracle(f_lac: &Tensor4D, f_epvs: &Tensor4D, w: &AttentionWeights) -> (Vec<f64>, Vec<f64>) {
    let [c, d, h, wd] = f_lac.shape();
    let ci = c / w.reduction();
    let mut out = f_lac.data().to_vec();
    let mut gate = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..wd {
                let at = |t: &Tensor4D, ch: usize| t.data()[t.index(ch, z, y, x)];
                let mut s = 0.0;
                for j in 0..ci {
                    let mut q = 0.0;
                    let mut k = 0.0;
                    for ch in 0..c {
                        q += w.wq()[j * c + ch] * at(f_lac, ch);
                        k += w.wk()[j * c + ch] * at(f_epvs, ch);
                    }
                    s += q * k;
                }
                let g = 1.0 / (1.0 + (-s / (ci as f64).sqrt()).exp());
                gate.push(g);
                for o in 0..c {
                    let mut v = 0.0;
                    for ch in 0..c {
                        v += w.wv()[o * c + ch] * at(f_epvs, ch);
                    }
                    out[f_lac.index(o, z, y, x)] += g * v;
                }
            }
        }
    }
    (out, gate)
}

#[test]
fn zero_value_projection_is_an_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let shape = [8, 4, 4, 4];
        let f_lac = uniform(&mut rng, shape, -3.0, 3.0);
        let f_epvs = uniform(&mut rng, shape, -3.0, 3.0);
        let w = random_weights(&mut rng, 8, 4, true);
        let out = gated_attention_forward(&f_lac, &f_epvs, &w).unwrap();
        for (a, b) in out.f_hat.data().iter().zip(f_lac.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let (c, r) = [(4, 4), (8, 4), (4, 2), (6, 3)][case % 4];
        let shape = [c, rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let f_lac = uniform(&mut rng, shape, -2.0, 2.0);
        let f_epvs = uniform(&mut rng, shape, -2.0, 2.0);
        let w = random_weights(&mut rng, c, r, false);
        let out = gated_attention_forward(&f_lac, &f_epvs, &w).unwrap();
        let (want, gate) = attention_oracle(&f_lac, &f_epvs, &w);
        let err = out.f_hat.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "case {case}: {err}");
        for (g, o) in out.gate.data().iter().zip(&gate) {
            assert!((g - o).abs() < 1e-12);
            assert!(*g > 0.0 && *g < 1.0);
        }
    }
}

#[test]
fn attention_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_weights(&mut rng, 4, 4, false);
    let a = uniform(&mut rng, [4, 2, 2, 2], 0.0, 1.0);
    let b = uniform(&mut rng, [4, 2, 2, 3], 0.0, 1.0);
    let c8 = uniform(&mut rng, [8, 2, 2, 2], 0.0, 1.0);
    assert!(gated_attention_forward(&a, &b, &w).is_err());
    assert!(gated_attention_forward(&c8, &c8, &w).is_err());
}

#[test]
fn attention_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let shape = [4, 2, 3, 2];
        let f_lac = uniform(&mut rng, shape, -1.0, 1.0);
        let f_epvs = uniform(&mut rng, shape, -1.0, 1.0);
        let upstream = uniform(&mut rng, shape, -1.0, 1.0);
        let w = random_weights(&mut rng, 4, 2, false);
        let dot = |t: &Tensor4D| t.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum::<f64>();

        let wrt_lac = |x: &Tensor4D| {
            let v = dot(&gated_attention_forward(x, &f_epvs, &w)?.f_hat);
            Ok((v, gated_attention_backward(x, &f_epvs, &w, &upstream)?.f_lac))
        };
        let wrt_epvs = |x: &Tensor4D| {
            let v = dot(&gated_attention_forward(&f_lac, x, &w)?.f_hat);
            Ok((v, gated_attention_backward(&f_lac, x, &w, &upstream)?.f_epvs))
        };
        assert!(finite_difference_check(wrt_lac, &f_lac, 1e-6).unwrap().max_rel_error < 1e-6);
        assert!(finite_difference_check(wrt_epvs, &f_epvs, 1e-6).unwrap().max_rel_error < 1e-6);
    }
}

#[test]
fn tversky_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = TverskyParams::default();
    for case in 0..20 {
        let shape = [1, 4, 4, 4];
        let p = uniform(&mut rng, shape, 0.01, 0.99);
        let g = binary(&mut rng, shape, 0.3);
        let valid = if case % 2 == 0 { None } else { Some(binary(&mut rng, shape, 0.7)) };
        let f = |x: &Tensor4D| tversky_loss(x, &g, valid.as_ref(), &params);
        let report = finite_difference_check(f, &p, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-6, "case {case}: {report:?}");

        if let Some(v) = &valid {
            let (_, grad) = f(&p).unwrap();
            for (gv, vv) in grad.data().iter().zip(v.data()) {
                if *vv == 0.0 {
                    assert_eq!(gv.to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}

#[test]
fn exclusion_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..20 {
        let shape = [1, 3, 4, 5];
        let a = uniform(&mut rng, shape, 0.05, 0.95);
        let b = uniform(&mut rng, shape, 0.05, 0.95);
        let fa = |x: &Tensor4D| exclusion_loss(x, &b).map(|r| (r.value, r.grad_epvs));
        let fb = |x: &Tensor4D| exclusion_loss(&a, x).map(|r| (r.value, r.grad_lac));
        // linear in each coordinate, so a wide stencil is exact and keeps rounding small
        let ra = finite_difference_check(fa, &a, 1e-2).unwrap();
        let rb = finite_difference_check(fb, &b, 1e-2).unwrap();
        assert!(ra.max_rel_error < 1e-9 && rb.max_rel_error < 1e-9, "case {case}: {ra:?} {rb:?}");
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let lambda = rng.gen_range(0.0..2.0);
        // coordinates: L_epvs, L_lac, L_excl, s_epvs, s_lac
        let point = Tensor4D::new(
            [1, 1, 1, 5],
            vec![
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..0.5),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ],
        )
        .unwrap();
        let f = |x: &Tensor4D| {
            let v = x.data();
            let state = UncertaintyState { s_epvs: v[3], s_lac: v[4], lambda_excl: lambda };
            let r = total_loss(v[0], v[1], v[2], &state)?;
            Tensor4D::new([1, 1, 1, 5], vec![r.d_l_epvs, r.d_l_lac, r.d_l_excl, r.d_s_epvs, r.d_s_lac]).map(|g| (r.value, g))
        };
        let report = finite_difference_check(f, &point, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "case {case}: {report:?}");
    }
}

/// Smooth field in (0.01, 0.99): a squashed sigmoid of a few Gaussian bumps.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Tensor4D {
    let bumps: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let c = [0; 3].map(|_| rng.gen_range(0.0..n as f64));
            (c, rng.gen_range(1.0..3.0), rng.gen_range(-3.0..4.0))
        })
        .collect();
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x as f64, y as f64, z as f64];
                let s: f64 = bumps
                    .iter()
                    .map(|(c, w, a)| {
                        let d2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                        a * (-d2 / (2.0 * w * w)).exp()
                    })
                    .sum::<f64>()
                    - 0.5
                    + rng.gen_range(-0.05..0.05);
                data.push(0.01 + 0.98 / (1.0 + (-2.0 * s).exp()));
            }
        }
    }
    Tensor4D::new([1, n, n, n], data).unwrap()
}

/// Smallest gradient component the relative check is applied to.
const RESOLVABLE: f64 = 1e-7;

#[test]
fn cldice_gradient_matches_finite_differences_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let step = 1e-3;
    for case in 0..20 {
        let p = smooth_field(&mut rng, 6);
        // a target that overlaps the prediction; with disjoint skeletons the
        // gradient is ~1e-10 and below what central differences can resolve
        let g = Tensor4D::new(
            p.shape(),
            p.data().iter().map(|v| if v + rng.gen_range(-0.15..0.15) > 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let iters = 3;
        let base = SkeletonTape::record(&p, iters).unwrap().branch_signature();
        let same_branch = |_: usize, plus: &Tensor4D, minus: &Tensor4D| {
            SkeletonTape::record(plus, iters).unwrap().branch_signature() == base
                && SkeletonTape::record(minus, iters).unwrap().branch_signature() == base
        };
        let f = |x: &Tensor4D| cldice_loss(x, &g, iters, 1e-5);
        let (_, analytic) = f(&p).unwrap();
        let an = analytic.data();
        // roundoff in a loss of order 1 puts a ~4e-13 floor on the numeric
        // derivative, so tiny components are compared in absolute terms
        let resolvable = |i: usize| an[i].abs() >= RESOLVABLE;
        let report = finite_difference_check_filtered(f, &p, step, FdScheme::Richardson, |i, a, b| {
            resolvable(i) && same_branch(i, a, b)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "case {case}: {report:?}");
        let tiny = (0..p.len()).filter(|&i| !resolvable(i)).count();
        assert!(report.checked * 2 > p.len() - tiny, "case {case}: too many skipped {report:?}");
        for i in (0..p.len()).filter(|&i| !resolvable(i)) {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.data_mut()[i] += step;
            minus.data_mut()[i] -= step;
            if !same_branch(i, &plus, &minus) {
                continue;
            }
            let numeric = (f(&plus).unwrap().0 - f(&minus).unwrap().0) / (2.0 * step);
            assert!((numeric - an[i]).abs() < 1e-11, "case {case} coord {i}: {numeric} vs {}", an[i]);
        }
    }
}

#[test]
fn loss_anchor_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = binary(&mut rng, [1, 4, 4, 4], 0.4);
    let (l, _) = tversky_loss(&g, &g, None, &TverskyParams::default()).unwrap();
    assert!(l.abs() < 1e-12);
    let half = Tensor4D::filled([2, 3, 3, 3], 0.5).unwrap();
    assert_eq!(exclusion_loss(&half, &half).unwrap().value, 0.25);
    let state = UncertaintyState { s_epvs: 0.0, s_lac: 0.0, lambda_excl: 0.0 };
    for _ in 0..20 {
        let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
        assert_eq!(total_loss(a, b, c, &state).unwrap().value, a + b);
    }
}

#[test]
fn symmetric_tversky_is_one_minus_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = TverskyParams { alpha: 0.5, beta: 0.5, ..Default::default() };
    let geometry = Geometry::from_spacing([5, 5, 5], [1.0; 3]).unwrap();
    for _ in 0..20 {
        let p = binary(&mut rng, [1, 5, 5, 5], 0.3);
        let g = binary(&mut rng, [1, 5, 5, 5], 0.3);
        let (l, _) = tversky_loss(&p, &g, None, &params).unwrap();
        let mask = |t: &Tensor4D| BinaryMask::new(geometry.clone(), t.data().iter().map(|v| *v == 1.0).collect()).unwrap();
        let d = dice(&mask(&p), &mask(&g)).unwrap();
        assert!((l - (1.0 - d)).abs() < 1e-4, "{l} vs {d}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn exclusion_is_symmetric_and_bilinear(seed in any::<u64>(), c in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, [2, 2, 3, 3], 0.0, 1.0);
        let b = uniform(&mut rng, [2, 2, 3, 3], 0.0, 1.0);
        let ab = exclusion_loss(&a, &b).unwrap().value;
        prop_assert_eq!(ab, exclusion_loss(&b, &a).unwrap().value);
        let scaled = Tensor4D::new(a.shape(), a.data().iter().map(|v| v * c).collect()).unwrap();
        prop_assert!((exclusion_loss(&scaled, &b).unwrap().value - c * ab).abs() < 1e-14);
    }

    #[test]
    fn skeleton_stays_in_unit_range(seed in any::<u64>(), iters in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = uniform(&mut rng, [1, 5, 4, 6], 0.0, 1.0);
        let s = soft_skeleton(&p, iters).unwrap();
        prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // erosion never exceeds, dilation never falls below, the input
        for ((e, d), x) in soft_erode(&p).data().iter().zip(soft_dilate(&p).data()).zip(p.data()) {
            prop_assert!(e <= x && x <= d);
        }
    }

    #[test]
    fn validity_mask_zeroes_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3, 3, 3];
        let p = uniform(&mut rng, shape, 0.0, 1.0);
        let g = binary(&mut rng, shape, 0.5);
        let v = binary(&mut rng, shape, 0.5);
        let (_, grad) = tversky_loss(&p, &g, Some(&v), &TverskyParams::default()).unwrap();
        for (gv, vv) in grad.data().iter().zip(v.data()) {
            if *vv == 0.0 {
                prop_assert_eq!(gv.to_bits(), 0u64);
            }
        }
    }
}

#[test]
fn skeleton_of_a_thin_line() {
    let mut p = Tensor4D::zeros([1, 5, 5, 13]).unwrap();
    for w in 2..11 {
        let i = p.index(0, 2, 2, w);
        p.data_mut()[i] = 1.0;
    }
    // a one-voxel line is removed entirely by the first erosion, so its
    // opening is empty and the whole line is residue
    let s = soft_skeleton(&p, 5).unwrap();
    assert_eq!(s, p);
    let s0 = soft_skeleton(&p, 0).unwrap();
    assert_eq!(s0, p);
}

#[test]
fn deep_supervision_defaults() {
    let l = deep_supervision_aggregate(&[0.2, 0.4, 0.8], &DEFAULT_DEEP_SUPERVISION_WEIGHTS).unwrap();
    assert!((l - (0.2 + 0.2 + 0.2) / 1.75).abs() < 1e-15);
}
