use super::*;
use proptest::prelude::*;

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    sab / (saa * sbb).sqrt()
}

#[test]
fn perfectly_correlated_scores_are_proportional() {
    let g = Gram::new(0.5, 2.0, 1.0);
    let (s, st) = score_sampler(&g, 50, &mut rng::stream(1, &[])).unwrap();
    for (a, b) in s.iter().zip(&st) {
        assert!((b - 2.0 * a).abs() < 1e-12);
    }
}

#[test]
fn uncorrelated_scores() {
    let (n, len) = (200, 100);
    let mut rng = rng::stream(2, &[]);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (s, st) = score_sampler(&Gram::new(1.0, 1.0, 0.0), len, &mut rng).unwrap();
        a.extend(s);
        b.extend(st);
    }
    assert!(corr(&a, &b).abs() <= 3.0 / ((n * len) as f64).sqrt());
}

#[test]
fn zero_norm_gives_zero_scores() {
    let (s, _) = score_sampler(&Gram::new(0.0, 1.0, 0.0), 20, &mut rng::stream(3, &[])).unwrap();
    assert!(s.iter().all(|&x| x == 0.0));
}

#[test]
fn non_psd_gram_rejected() {
    assert!(score_sampler(&Gram::new(1.0, 1.0, 1.5), 5, &mut rng::stream(0, &[])).is_err());
    assert!(score_sampler(&Gram::new(-1.0, 1.0, 0.0), 5, &mut rng::stream(0, &[])).is_err());
    assert!(inner_moment_mc(&Gram::new(0.0, 1.0, 0.2), 5, 10, 0).is_err());
}

#[test]
fn zero_gram_is_exactly_uniform() {
    let e = inner_moment_mc(&Gram::same(0.0), 37, 1000, 5).unwrap();
    assert_eq!(e.value, 1.0 / 37.0);
    assert_eq!(e.stderr, 0.0);
}

#[test]
fn inner_moment_in_exponential_regime() {
    let e = inner_moment_mc(&Gram::same(1.0), 1000, 100_000, 11).unwrap();
    let target = 1f64.exp() / 1000.0;
    assert!((e.value - target).abs() <= 3.0 * e.stderr + 0.05 * target, "{e:?}");
}

#[test]
fn independent_heads_give_inverse_length() {
    for (a, b) in [(0.5, 1.0), (1.0, 1.0), (0.2, 0.8)] {
        let e = inner_moment_mc(&Gram::new(a, b, 0.0), 500, 20_000, 12).unwrap();
        // error budget O(L^{-2(1-ε)}) at ε = 1/4
        let budget = 500f64.powf(-1.5);
        assert!((e.value - 1.0 / 500.0).abs() <= 3.0 * e.stderr + budget, "{e:?}");
    }
}

#[test]
fn fixed_point_constant() {
    let r = Regime::default();
    assert!((fixed_point_lhs(r.c) - 0.25).abs() < 1e-12);
    assert!(r.c > 19.0 && r.c < 20.5);
    assert!(Regime::from_eps(1.5).is_err());
}

#[test]
fn exp_regime_values_and_flag() {
    let r = Regime::default();
    assert_eq!(exp_regime_approx(&Gram::same(0.0), 100, &r).value, 0.01);
    let v = exp_regime_approx(&Gram::new(0.5, 0.5, 1.0 / 2.0), 10_000, &r);
    assert!((v.value - 0.5f64.exp() / 1e4).abs() < 1e-18);
    let v = exp_regime_approx(&Gram::new(0.0, 0.0, 0.0), 10_000, &r);
    assert!(v.warning.is_none());
    let g = Gram::new(1.0, 1.0, 1.0);
    assert!((exp_regime_approx(&g, 10_000, &Regime::with_c(0.25, 1.0).unwrap()).value - 1f64.exp() / 1e4).abs() < 1e-18);
    let len = 1000;
    let b = r.budget(len);
    assert!(exp_regime_approx(&Gram::same(b), len, &r).warning.is_none());
    assert!(exp_regime_approx(&Gram::same(b * (1.0 + 1e-9)), len, &r).warning.is_some());
}

#[test]
fn trace_form_values() {
    let d = 64;
    let w = vec![1.0 / (d as f64).sqrt(); d];
    let r = Regime::default();
    let t = trace_form_approx(&w, &w, 100, &r, r.eps);
    assert!((t.value - 1f64.exp() / 100.0).abs() < 1e-15);
    // ‖ω‖∞ = 1/8 clears L^{-1/4}(log L)^{-1/2}; the ℓ₂ and ℓ₄ limits need a
    // smaller c and a larger ε₀ than the defaults
    assert!(t.sup_ok);
    assert!(!t.l2_ok && !t.l4_ok);
    let loose = Regime::with_c(0.25, 1.5).unwrap();
    assert!(trace_form_approx(&w, &w, 100, &loose, 0.5).eligible());
    let zero = vec![0.0; d];
    assert!((trace_form_approx(&w, &zero, 100, &r, r.eps).value - 0.01).abs() < 1e-15);
}

#[test]
fn stein_first_zero_weights() {
    let w = DMatrix::zeros(4, 4);
    let c = stein_first_moment(&w, &[0.3, -1.0, 0.5, 2.0], 50, 2000, 1).unwrap();
    assert!(c.closed.iter().all(|&v| v == 0.0));
    assert!(c.max_z() <= 4.0);
}

#[test]
fn stein_first_identity() {
    let d = 8;
    let w = DMatrix::identity(d, d) * 0.3;
    let q: Vec<f64> = (0..d).map(|i| 0.5 - 0.15 * i as f64).collect();
    let c = stein_first_moment(&w, &q, 200, 20_000, 2).unwrap();
    assert!(c.max_z() <= 4.0, "{:?}", c.z_scores());
}

#[test]
fn stein_first_rank_one_is_parallel() {
    let d = 6;
    let u = DVector::from_fn(d, |i, _| (i as f64 + 1.0) / 4.0);
    let v = DVector::from_fn(d, |i, _| if i % 2 == 0 { 0.5 } else { -0.3 });
    let w = &u * v.transpose();
    let q: Vec<f64> = (0..d).map(|i| 1.0 - 0.2 * i as f64).collect();
    let c = stein_first_moment(&w, &q, 100, 20_000, 3).unwrap();
    let wq = &w * DVector::from_column_slice(&q);
    let cos = dot(&c.mc, wq.as_slice()) / (dot(&c.mc, &c.mc).sqrt() * wq.norm());
    assert!(cos >= 0.999, "cos {cos}");
}

#[test]
fn stein_second_zero_weights() {
    let d = 4;
    let w = DMatrix::zeros(d, d);
    let c = stein_second_moment(&w, &w, &[1.0, 0.0, -1.0, 0.5], 40, 5000, 4).unwrap();
    for i in 0..d {
        for j in 0..d {
            let want = if i == j { 1.0 / 40.0 } else { 0.0 };
            assert!((c.closed[i * d + j] - want).abs() < 1e-15);
        }
    }
    assert!(c.max_z() <= 4.0);
}

#[test]
fn stein_second_identity_equal_heads() {
    let d = 8;
    let w = DMatrix::identity(d, d) * 0.3;
    let q: Vec<f64> = (0..d).map(|i| 0.5 - 0.15 * i as f64).collect();
    let c = stein_second_moment(&w, &w, &q, 200, 20_000, 5).unwrap();
    assert!(c.frobenius_z() <= 4.0);
    assert!(c.max_z() <= 4.5, "{}", c.max_z());
    // the trace of the closed form against the MC inner product (Xp)ᵀ(Xp̃)
    let tr_mc: f64 = (0..d).map(|i| c.mc[i * d + i]).sum();
    let tr_cf: f64 = (0..d).map(|i| c.closed[i * d + i]).sum();
    let se: f64 = (0..d).map(|i| c.diff_stderr[i * d + i]).sum();
    assert!((tr_mc - tr_cf).abs() <= 3.0 * se);
}

#[test]
fn stein_second_distinct_heads() {
    let d = 5;
    let w = DMatrix::from_fn(d, d, |i, j| if i == j { 0.4 } else { 0.05 * (i as f64 - j as f64) });
    let wt = DMatrix::from_fn(d, d, |i, j| if i == j { 0.2 } else if i + 1 == j { 0.3 } else { 0.0 });
    let q: Vec<f64> = (0..d).map(|i| 1.0 - 0.4 * i as f64).collect();
    let c = stein_second_moment(&w, &wt, &q, 60, 40_000, 6).unwrap();
    assert!(c.max_z() <= 4.5, "{:?}", c.z_scores());
}

#[test]
fn saturation_at_zero_is_exact() {
    let rows = saturation_profile(&[0.0, 1.0], 50, 100, 1).unwrap();
    assert_eq!(rows[0].deficit.value, 1.0 - 1.0 / 50.0);
    assert_eq!(rows[0].sq_norm.stderr, 0.0);
    assert!(saturation_profile(&[-1.0], 50, 10, 1).is_err());
}

#[test]
fn saturation_profile_monotone_and_decaying() {
    let rs: Vec<f64> = (0..16).map(|k| 0.5 * k as f64).collect();
    let rows = saturation_profile(&rs, 1000, 1000, 2).unwrap();
    assert!(max_monotone_violation(&rows) <= 3.0);
    let tail: Vec<f64> = (0..6).map(|k| 20.0 * 2f64.powi(k)).collect();
    let rows = saturation_profile(&tail, 1000, 1000, 2).unwrap();
    assert!(tail_slope(&rows, 0.0).unwrap() <= -0.5);
}

#[test]
fn stable_deficit_matches_naive_when_spread() {
    let mut s = vec![0.1, -0.3, 0.7, 0.2];
    let mut p = s.clone();
    softmax_in_place(&mut p);
    let (sq, def) = sq_norm_and_deficit(&mut s);
    let naive = dot(&p, &p);
    assert!((sq - naive).abs() < 1e-15);
    assert!((def - (1.0 - naive)).abs() < 1e-15);
}

#[test]
fn exp_curve_saturates() {
    assert_eq!(exp_regime_curve(0.0, 100), 0.01);
    assert_eq!(exp_regime_curve(10.0, 100), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psd_grams_accepted(a in 0.0f64..4.0, b in 0.0f64..4.0, t in -1.0f64..1.0) {
        let g = Gram::new(a, b, t * (a * b).sqrt());
        let (s, st) = score_sampler(&g, 8, &mut rng::stream(9, &[])).unwrap();
        prop_assert!(s.iter().chain(&st).all(|x| x.is_finite()));
    }

    #[test]
    fn inner_moment_bounded(a in 0.0f64..3.0, t in -1.0f64..1.0) {
        let e = inner_moment_mc(&Gram::new(a, a, t * a), 20, 64, 1).unwrap();
        prop_assert!(e.value > 0.0 && e.value <= 1.0);
    }
}
