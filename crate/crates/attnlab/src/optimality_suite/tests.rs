use super::*;
use crate::attention_core::population_loss;
use crate::data_model::{target_energy, Rotation};
use proptest::prelude::*;

fn one_task() -> TaskSpec {
    TaskSpec::homogeneous(1, 10, 1.0, 0.0).unwrap()
}

#[test]
fn cl_sim_examples() {
    let spec = TaskSpec::new(vec![4, 6], vec![1.0, 0.5], 0.2, Rotation::Identity).unwrap();
    let zero = BudgetAllocation::new(vec![0.0, 0.0]).unwrap();
    assert!((cl_sim(&zero, &spec, 50).unwrap() - target_energy(&spec)).abs() < 1e-15);
    let a = BudgetAllocation::new(vec![1.0]).unwrap();
    assert!((cl_sim(&a, &one_task(), 100).unwrap() - 0.2137).abs() < 1e-4);
}

#[test]
fn cl_sim_permutation_invariant() {
    let spec = TaskSpec::homogeneous(3, 5, 1.0, 0.1).unwrap();
    let a = BudgetAllocation::new(vec![0.1, 0.5, 0.2]).unwrap();
    let b = BudgetAllocation::new(vec![0.5, 0.2, 0.1]).unwrap();
    assert!((cl_sim(&a, &spec, 80).unwrap() - cl_sim(&b, &spec, 80).unwrap()).abs() < 1e-15);
}

#[test]
fn single_task_budget_is_one() {
    let wf = solve_water_filling(&one_task(), 100, default_budget_cap(100)).unwrap();
    assert!((wf.b_star - 1.0).abs() < 1e-6, "{}", wf.b_star);
    assert!((wf.value - 0.2137).abs() < 1e-4);
    let (_, grid) = water_filling_grid(&one_task(), 100, default_budget_cap(100), 10_000);
    assert!((grid - wf.value).abs() < 1e-6);
}

#[test]
fn homogeneous_tasks_split_evenly() {
    let spec = TaskSpec::homogeneous(2, 8, 1.0, 0.3).unwrap();
    let wf = solve_water_filling(&spec, 200, default_budget_cap(200)).unwrap();
    assert!((wf.b[0] - wf.b_star / 2.0).abs() < 1e-8);
    assert!((wf.b[1] - wf.b_star / 2.0).abs() < 1e-8);
    assert!(wf.simplex_residual < 1e-10);
}

#[test]
fn zero_signal_task_gets_nothing() {
    let spec = TaskSpec::new(vec![5, 5], vec![1.0, 0.0], 0.0, Rotation::Identity).unwrap();
    let wf = solve_water_filling(&spec, 100, default_budget_cap(100)).unwrap();
    assert_eq!(wf.b[1], 0.0);
    assert!((wf.b[0] - wf.b_star).abs() < 1e-12);
}

#[test]
fn kkt_and_grid_agree_on_heterogeneous_specs() {
    for (dims, sig, s2, len) in [
        (vec![4, 10, 6], vec![1.0, 0.4, 2.0], 0.1, 120usize),
        (vec![20, 3], vec![0.2, 1.5], 0.0, 60),
        (vec![7, 7, 7, 7], vec![1.0, 0.9, 0.1, 0.05], 0.5, 400),
    ] {
        let spec = TaskSpec::new(dims, sig, s2, Rotation::Identity).unwrap();
        let cap = default_budget_cap(len);
        let wf = solve_water_filling(&spec, len, cap).unwrap();
        assert!(wf.kkt_residual <= 1e-8, "{}", wf.kkt_residual);
        assert!(wf.simplex_residual <= 1e-10);
        let (_, grid) = water_filling_grid(&spec, len, cap, 10_000);
        assert!(wf.value <= grid + 1e-12 && grid - wf.value < 1e-6);
    }
}

#[test]
fn bad_cap_rejected() {
    assert!(solve_water_filling(&one_task(), 100, 0.0).is_err());
}

#[test]
fn construction_recombines() {
    let spec = TaskSpec::new(vec![3, 4], vec![1.0, 0.5], 0.0, Rotation::Random(3)).unwrap();
    let b = [0.4, 0.3];
    let u = [1.2, 0.7];
    let p = single_head_from(&spec, &b, &u).unwrap();
    let cw = p.combined();
    let w = cw.heads[0].w_x(7);
    let mut blk = DMatrix::zeros(7, 7);
    for k in 0..7 {
        let i = if k < 3 { 0 } else { 1 };
        blk[(k, k)] = (b[i] / spec.dims[i] as f64).sqrt();
    }
    let want = &spec.phi_rot * blk * spec.phi_rot.transpose();
    assert!((w - want).abs().max() < 1e-12);
    let uy = cw.heads[0].u_y(7);
    let want = &spec.psi_rot * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&u)) * spec.psi_rot.transpose();
    assert!((uy - want).abs().max() < 1e-12);
    assert!(cw.heads[0].u_x(7).abs().max() < 1e-15);
    assert!(cw.heads[0].w_y(7).abs().max() < 1e-15);
}

#[test]
fn single_task_construction_matches_convergence_point() {
    let (p, wf) = optimal_single_head(&one_task(), 100, default_budget_cap(100)).unwrap();
    let w = p.combined().heads[0].w_x(10);
    for k in 0..10 {
        assert!((w[(k, k)] - wf.b_star.sqrt() / 10f64.sqrt()).abs() < 1e-12);
        assert!((w[(k, k)] - 1.0 / 10f64.sqrt()).abs() < 1e-8);
    }
    let mu = 10f64.sqrt() / (1.0 + std::f64::consts::E * 10.0 / 100.0);
    assert!((wf.u[0] - mu).abs() < 1e-7);
}

#[test]
fn construction_loss_matches_objective() {
    let spec = TaskSpec::homogeneous(1, 30, 1.0, 0.0).unwrap();
    let (p, wf) = optimal_single_head(&spec, 100, default_budget_cap(100)).unwrap();
    let mc = population_loss(&p, &spec, 100, 4000, 5, false).unwrap();
    assert!((mc.value - wf.value).abs() <= 3.0 * mc.stderr + 0.01, "{mc:?} vs {}", wf.value);
}

#[test]
fn closed_form_loss_identities() {
    let spec = TaskSpec::new(vec![4, 6], vec![1.0, 0.5], 0.2, Rotation::Identity).unwrap();
    let len = 90;
    let cf = closed_form_loss(&[0.3, 0.2], &[0.0, 0.0], &spec, len).unwrap();
    assert!((cf.value - target_energy(&spec)).abs() < 1e-15);

    let omega = [0.25, 0.15];
    let b: Vec<f64> = omega.iter().zip(&spec.dims).map(|(w, &di)| di as f64 * w * w).collect();
    let alloc = BudgetAllocation::new(b.clone()).unwrap();
    let ustar = optimal_u(&alloc, &spec, len);
    let at_star = closed_form_loss(&omega, &ustar, &spec, len).unwrap();
    assert!((at_star.value - cl_sim(&alloc, &spec, len).unwrap()).abs() < 1e-12);

    let delta = 0.3;
    let u: Vec<f64> = ustar.iter().map(|u| u * (1.0 + delta)).collect();
    let pert = closed_form_loss(&omega, &u, &spec, len).unwrap();
    let e = alloc.total.exp() / len as f64;
    let phi = spec.phi();
    let excess: f64 = (0..2)
        .map(|i| spec.signals[i] / 10.0 * (b[i] + spec.dims[i] as f64 * phi[i] * e) * (u[i] - ustar[i]).powi(2))
        .sum();
    assert!((pert.value - at_star.value - excess).abs() < 1e-10);
}

#[test]
fn closed_form_flags_regime() {
    let spec = TaskSpec::homogeneous(1, 10, 1.0, 0.0).unwrap();
    let cf = closed_form_loss(&[1.0], &[10.0], &spec, 100).unwrap();
    assert_eq!(cf.flags.len(), 3);
}

#[test]
fn gf_icl_examples() {
    assert!((gf_icl_loss(&one_task(), 100, 1).unwrap() - 0.2137).abs() < 1e-4);
    assert!(gf_icl_loss(&one_task(), 1 << 40, 1).unwrap() < 1e-9);
    let spec = TaskSpec::homogeneous(3, 10, 1.0, 0.0).unwrap();
    let one = gf_icl_loss(&one_task(), 100, 1).unwrap();
    // three tasks: each carries a third of the energy, at the per-task rate
    assert!((gf_icl_loss(&spec, 100, 3).unwrap() - one).abs() < 1e-15);
    assert!(gf_icl_loss(&spec, 100, 2).is_err());
}

#[test]
fn equiangular_examples() {
    let spec = TaskSpec::homogeneous(3, 10, 1.0, 0.0).unwrap();
    let lb = equiangular_lower_bound(&spec, 100, 3).unwrap();
    assert!((lb - 1.0 / (100.0 / 30.0 * 2.0 + 1.0)).abs() < 1e-15);
    assert!((lb - 0.1304).abs() < 1e-4);
    assert!(equiangular_lower_bound(&spec, 100, 1 << 30).unwrap() < 1e-7);
    assert!(equiangular_lower_bound(&spec, 100, 1).is_err());
}

#[test]
fn gf_over_lb_between_one_and_e() {
    for ratio in [0.03, 0.1, 0.3] {
        for h in [2usize, 3, 5] {
            let len = 3000;
            let dbar = ((ratio * len as f64) / h as f64).round() as usize;
            let spec = TaskSpec::homogeneous(h, dbar, 1.0, 0.0).unwrap();
            let q = gf_icl_loss(&spec, len, h).unwrap() / equiangular_lower_bound(&spec, len, h).unwrap();
            assert!((1.0..=std::f64::consts::E).contains(&q), "d/L {ratio} H {h}: {q}");
        }
    }
}

#[test]
fn single_vs_multi_head_efficiency() {
    for i in [2usize, 3, 5] {
        let spec = TaskSpec::homogeneous(i, 30, 1.0, 0.0).unwrap();
        let len = (spec.d() as f64 / 0.03).round() as usize;
        let q = opts_icl(&spec, len).unwrap() / gf_icl_loss(&spec, len, i).unwrap();
        assert!((q / i as f64 - 1.0).abs() <= 0.2, "I {i}: {q}");
    }
}

#[test]
fn opts_matches_solver() {
    for ratio in [0.05, 0.1, 0.3] {
        let spec = TaskSpec::homogeneous(2, 15, 1.0, 0.2).unwrap();
        let len = (30.0 / ratio) as usize;
        let wf = solve_water_filling(&spec, len, default_budget_cap(len)).unwrap();
        let f = opts_icl(&spec, len).unwrap();
        assert!((wf.value - f).abs() <= 0.02 * f);
    }
}

#[test]
fn mmse_small_ratio_limits() {
    for (i, b) in [(1usize, 1.0), (1, 0.5), (2, 0.25)] {
        let (v, bias) = mmse_asymptotic(b, 0.01, i, b, 1.0, MmseConvention::Integral).unwrap();
        let limit = b * i as f64 * 0.01;
        assert!((v / limit - 1.0).abs() <= 0.02, "{v} vs {limit}");
        // the bias is second order, λ x² m₂ with x = bIr
        let x = b * i as f64 * 0.01;
        assert!(bias <= 1.1 * x * x);
        let (_, b0) = mmse_asymptotic(b, 1e-8, i, b, 1.0, MmseConvention::Integral).unwrap();
        assert!(b0 < 1e-12);
    }
}

#[test]
fn resolvent_matches_quadrature_like_identities() {
    // m solves r x m² + (1 − r + x) m − 1 = 0 on both sides of r = 1
    for (r, x) in [(0.1, 0.5), (0.9, 1e-3), (2.0, 0.3), (5.0, 1e-4)] {
        let (m, m2) = mp_resolvent(r, x);
        assert!((r * x * m * m + (1.0 - r + x) * m - 1.0).abs() < 1e-9 * (1.0 + m));
        let h = 1e-6 * x;
        let dm = (mp_resolvent(r, x + h).0 - mp_resolvent(r, x - h).0) / (2.0 * h);
        assert!((m2 + dm).abs() <= 1e-5 * m2, "r {r} x {x}");
    }
}

#[test]
fn mmse_mc_noiseless_and_underdetermined() {
    let m = mmse_mc(1, 20, 400, 1.0, &[0.0], 20, 3).unwrap();
    assert!(m[0].total.value < 1e-9);
    let m = mmse_mc(1, 100, 50, 1.0, &[0.0, 1e-3], 10, 4).unwrap();
    assert!((m[0].bias.value - 0.5).abs() < 1e-9);
    assert!((m[1].bias.value - 0.5).abs() < 0.01);
}

#[test]
fn mmse_integral_selected_by_oracle() {
    let bs = [0.5, 1.0, 2.0];
    let mc = mmse_mc(10, 200, 2000, 1.0, &bs, 40, 7).unwrap();
    let pts: Vec<_> = bs.iter().map(|&b| (b, 0.1, 10, b, 1.0)).collect();
    let sel = select_convention(&pts, &mc, 0.05).unwrap();
    assert_eq!(sel.len(), 1);
    assert_eq!(sel[0].0, MmseConvention::Integral);
}

#[test]
fn mmse_integral_above_one() {
    let bs = [0.1, 1.0];
    let mc = mmse_mc(1, 200, 100, 1.0, &bs, 20, 8).unwrap();
    for (b, m) in bs.iter().zip(&mc) {
        let (v, bias) = mmse_asymptotic(*b, 2.0, 1, *b, 1.0, MmseConvention::Integral).unwrap();
        assert!(((v + bias) / m.total.value - 1.0).abs() < 0.02);
    }
}

#[test]
fn bounds_table_rows() {
    let spec = TaskSpec::homogeneous(4, 10, 1.0, 0.1).unwrap();
    let rows = bounds_table(&spec, 400, 2).unwrap();
    let labels: Vec<_> = rows.iter().map(|r| r.label).collect();
    assert_eq!(labels, vec![BoundLabel::OptS, BoundLabel::Lb, BoundLabel::Mmse, BoundLabel::Const]);
    assert!(rows.iter().all(|r| r.value >= 0.0 && r.case == "H<I"));
    let rows = bounds_table(&spec, 400, 4).unwrap();
    assert!(rows.iter().any(|r| r.label == BoundLabel::Gf));
    let rows = bounds_table(&spec, 400, 1).unwrap();
    let c = rows.iter().find(|r| r.label == BoundLabel::Const).unwrap();
    assert!((c.value - rows[0].value).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cl_sim_convex_in_b(b1 in 0.0f64..1.0, b2 in 0.0f64..1.0, t in 0.0f64..1.0) {
        let spec = TaskSpec::new(vec![3, 9], vec![1.0, 0.6], 0.2, Rotation::Identity).unwrap();
        let total = 0.8;
        let x = [b1 * total, (1.0 - b1) * total];
        let y = [b2 * total, (1.0 - b2) * total];
        let z = [t * x[0] + (1.0 - t) * y[0], t * x[1] + (1.0 - t) * y[1]];
        let f = |v: [f64; 2]| cl_sim(&BudgetAllocation::new(v.to_vec()).unwrap(), &spec, 70).unwrap();
        prop_assert!(f(z) <= t * f(x) + (1.0 - t) * f(y) + 1e-14);
    }

    #[test]
    fn raising_a_signal_raises_its_resolved_fraction(l in 0.2f64..2.0, bump in 0.01f64..0.5) {
        let len = 150;
        let frac = |l0: f64| {
            let spec = TaskSpec::new(vec![6, 6], vec![l0, 1.0], 0.1, Rotation::Identity).unwrap();
            let wf = solve_water_filling(&spec, len, default_budget_cap(len)).unwrap();
            let k = 6.0 * spec.phi()[0] * wf.b_star.exp() / len as f64;
            wf.b[0] / (wf.b[0] + k)
        };
        prop_assert!(frac(l + bump) >= frac(l) - 1e-9);
    }

    #[test]
    fn outer_objective_unimodal(l in 0.1f64..2.0, s2 in 0.0f64..1.0) {
        let spec = TaskSpec::new(vec![5, 8], vec![l, 1.0], s2, Rotation::Identity).unwrap();
        let len = 100;
        let cap = default_budget_cap(len);
        let vals: Vec<f64> = (0..=200).map(|j| outer_value(&spec, len, cap * j as f64 / 200.0)).collect();
        let m = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        prop_assert!(vals[..=m].windows(2).all(|w| w[1] <= w[0] + 1e-14));
        prop_assert!(vals[m..].windows(2).all(|w| w[1] >= w[0] - 1e-14));
    }
}
