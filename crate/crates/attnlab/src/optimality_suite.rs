//! Single-head water-filling optimum, closed-form losses, and the lower
//! bounds they are compared against (equiangular multi-head bound, Bayes risk).
//!
//! Losses here are full squared errors (no ½ factor).

use crate::attention_core::AttentionParams;
use crate::data_model::TaskSpec;
use crate::rng;
use crate::stats::{MomentEstimate, VecWelford};
use crate::{invalid, Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Total attention budget `B` split across tasks as `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub total: f64,
    pub b: Vec<f64>,
}

impl BudgetAllocation {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.iter().any(|&x| !(x >= 0.0)) {
            return invalid("budget shares must be nonnegative");
        }
        Ok(BudgetAllocation { total: b.iter().sum(), b })
    }
}

/// `d_i φ_i e^B / L` per task: the noise floor each share competes with.
fn floors(spec: &TaskSpec, len: usize, total: f64) -> Vec<f64> {
    let e = total.exp() / len as f64;
    spec.dims.iter().zip(spec.phi()).map(|(&di, ph)| di as f64 * ph * e).collect()
}

/// `λ_i d_i / d` per task.
fn weights(spec: &TaskSpec) -> Vec<f64> {
    let d = spec.d() as f64;
    spec.dims.iter().zip(&spec.signals).map(|(&di, &l)| l * di as f64 / d).collect()
}

/// `Σ_i (λ_i d_i/d)(1 − b_i/(b_i + d_iφ_i e^B/L))`.
pub fn cl_sim(alloc: &BudgetAllocation, spec: &TaskSpec, len: usize) -> Result<f64> {
    if alloc.b.len() != spec.tasks() {
        return invalid(format!("allocation has {} shares for {} tasks", alloc.b.len(), spec.tasks()));
    }
    let k = floors(spec, len, alloc.total);
    Ok(weights(spec).iter().zip(&alloc.b).zip(&k).map(|((c, b), k)| c * k / (b + k)).sum())
}

/// `u_i* = √(b_i d_i)/(b_i + d_iφ_i e^B/L)`.
pub fn optimal_u(alloc: &BudgetAllocation, spec: &TaskSpec, len: usize) -> Vec<f64> {
    let k = floors(spec, len, alloc.total);
    alloc.b.iter().zip(&spec.dims).zip(&k).map(|((b, &di), k)| (b * di as f64).sqrt() / (b + k)).collect()
}

/// Optimal single-head allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterFilling {
    pub b_star: f64,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub value: f64,
    /// Max relative KKT violation of the inner problem at `B*`.
    pub kkt_residual: f64,
    /// Absolute simplex violation `|Σb − B*|`.
    pub simplex_residual: f64,
    pub b_max: f64,
}

/// Default outer search cap `c⁻²·2 log L`, with `c = 3`.
pub fn default_budget_cap(len: usize) -> f64 {
    2.0 * (len as f64).ln() / 9.0
}

/// Inner problem at fixed `B`: minimize `Σ c_i k_i/(b_i + k_i)` on the simplex.
/// Stationarity gives `b_i = (√(c_i k_i/ν) − k_i)_+`; `ν` is found by bisection
/// in log space.
fn inner(c: &[f64], k: &[f64], total: f64) -> (Vec<f64>, f64) {
    let n = c.len();
    if total <= 0.0 {
        return (vec![0.0; n], f64::INFINITY);
    }
    let share = |nu: f64| -> Vec<f64> { (0..n).map(|i| ((c[i] * k[i] / nu).sqrt() - k[i]).max(0.0)).collect() };
    let top = (0..n).map(|i| if c[i] > 0.0 { c[i] / k[i] } else { 0.0 }).fold(0.0, f64::max);
    if top == 0.0 {
        // no signal anywhere: spread evenly, the objective is flat
        return (vec![total / n as f64; n], 0.0);
    }
    let (mut lo, mut hi) = ((top * 1e-300).ln(), top.ln());
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if share(mid.exp()).iter().sum::<f64>() > total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let nu = (0.5 * (lo + hi)).exp();
    let mut b = share(nu);
    // absorb the bisection residue into the active shares
    let active: Vec<usize> = (0..n).filter(|&i| b[i] > 0.0).collect();
    let gap = total - b.iter().sum::<f64>();
    for &i in &active {
        b[i] += gap / active.len() as f64;
    }
    (b, nu)
}

fn inner_value(c: &[f64], k: &[f64], b: &[f64]) -> f64 {
    (0..c.len()).map(|i| c[i] * k[i] / (b[i] + k[i])).sum()
}

fn outer_value(spec: &TaskSpec, len: usize, total: f64) -> f64 {
    let c = weights(spec);
    let k = floors(spec, len, total);
    let (b, _) = inner(&c, &k, total);
    inner_value(&c, &k, &b)
}

/// KKT violation of an inner solution, relative to the multiplier.
fn kkt(c: &[f64], k: &[f64], b: &[f64]) -> f64 {
    let marg: Vec<f64> = (0..c.len()).map(|i| c[i] * k[i] / (b[i] + k[i]).powi(2)).collect();
    let active: Vec<usize> = (0..c.len()).filter(|&i| b[i] > 0.0).collect();
    if active.is_empty() {
        return 0.0;
    }
    let nu = active.iter().map(|&i| marg[i]).sum::<f64>() / active.len() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..c.len() {
        let v = if b[i] > 0.0 { (marg[i] - nu).abs() } else { (marg[i] - nu).max(0.0) };
        worst = worst.max(v / nu);
    }
    worst
}

/// Minimize `V(B)` over `[0, b_max]`: a 256-point grid, then golden section on
/// the bracket around the best grid point.
pub fn solve_water_filling(spec: &TaskSpec, len: usize, b_max: f64) -> Result<WaterFilling> {
    if !(b_max > 0.0) || !b_max.is_finite() {
        return invalid(format!("budget cap must be positive, got {b_max}"));
    }
    if len == 0 {
        return invalid("L must be positive");
    }
    let f = |x: f64| outer_value(spec, len, x);
    let grid = 256;
    let xs: Vec<f64> = (0..=grid).map(|j| b_max * j as f64 / grid as f64).collect();
    let vs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    if vs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("water-filling objective is not finite on the grid".into()));
    }
    let j = (0..vs.len()).min_by(|&a, &b| vs[a].total_cmp(&vs[b])).unwrap();
    let (mut a, mut b) = (xs[j.saturating_sub(1)], xs[(j + 1).min(grid)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if b - a < 1e-13 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    let mut best = 0.5 * (a + b);
    // the grid endpoint may beat the interior bracket when the optimum sits on the cap
    for x in [xs[j], 0.0, b_max] {
        if f(x) < f(best) {
            best = x;
        }
    }
    if !(b - a < 1e-6) {
        return Err(Error::Numerical(format!("golden section did not converge: bracket [{a}, {b}]")));
    }
    let c = weights(spec);
    let k = floors(spec, len, best);
    let (bv, _) = inner(&c, &k, best);
    let alloc = BudgetAllocation { total: best, b: bv.clone() };
    let simplex_residual = (bv.iter().sum::<f64>() - best).abs();
    Ok(WaterFilling {
        b_star: best,
        u: optimal_u(&alloc, spec, len),
        value: inner_value(&c, &k, &bv),
        kkt_residual: kkt(&c, &k, &bv),
        simplex_residual,
        b: bv,
        b_max,
    })
}

/// Value of the water-filling objective by brute force on an `n`-point grid in `B`.
pub fn water_filling_grid(spec: &TaskSpec, len: usize, b_max: f64, n: usize) -> (f64, f64) {
    (0..=n)
        .map(|j| {
            let x = b_max * j as f64 / n as f64;
            (x, outer_value(spec, len, x))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// The single-head construction `W_X = Φ blockdiag(√(b_i/d_i) I) Φᵀ`,
/// `U_Y = Ψ diag(u_i) Ψᵀ`, factored with `d_e = d`.
pub fn single_head_from(spec: &TaskSpec, b: &[f64], u: &[f64]) -> Result<AttentionParams> {
    let (d, dy) = (spec.d(), spec.d_y());
    if b.len() != dy || u.len() != dy {
        return invalid("one share and one output gain per task are required");
    }
    if b.iter().chain(u).any(|&x| !(x >= 0.0)) {
        return invalid("shares and output gains must be nonnegative");
    }
    let d_e = d;
    let root4 = (d_e as f64).sqrt().sqrt();
    let task = spec.task_of_coord();
    let mut e = DMatrix::zeros(d_e, d);
    for k in 0..d {
        let i = task[k];
        e[(k, k)] = root4 * (b[i] / spec.dims[i] as f64).sqrt().sqrt();
    }
    let kx = e * spec.phi_rot.transpose();
    let mut f = DMatrix::zeros(d_e, dy);
    for j in 0..dy {
        f[(j, j)] = u[j].sqrt();
    }
    let vy = f * spec.psi_rot.transpose();
    let mut params = AttentionParams::zeros(1, d, dy, d_e);
    let hd = &mut params.heads[0];
    hd.k.columns_mut(0, d).copy_from(&kx);
    hd.q.columns_mut(0, d).copy_from(&kx);
    hd.v.columns_mut(d, dy).copy_from(&vy);
    hd.o = vy.transpose();
    Ok(params)
}

/// The optimal single-head attention for `spec` at length `len`.
pub fn optimal_single_head(spec: &TaskSpec, len: usize, b_max: f64) -> Result<(AttentionParams, WaterFilling)> {
    let wf = solve_water_filling(spec, len, b_max)?;
    Ok((single_head_from(spec, &wf.b, &wf.u)?, wf))
}

/// Leading-order loss of a single head with per-task eigenvalues `ω̄` and gains `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormLoss {
    pub value: f64,
    pub budget: f64,
    /// Per task, `(λ_i d_i/d)(ω̄_i² + φ_i e^B/L)`: the curvature of the loss in `u_i`.
    pub curvature: Vec<f64>,
    /// Regime flags: `B ≤ 2 log L / 9`, `u_i ω̄_i ≤ 2`, `u_i² ≤ 4 d_i`.
    pub flags: Vec<String>,
}

pub fn closed_form_loss(omega_bar: &[f64], u: &[f64], spec: &TaskSpec, len: usize) -> Result<ClosedFormLoss> {
    let n = spec.tasks();
    if omega_bar.len() != n || u.len() != n {
        return invalid(format!("expected {n} eigenvalues and gains"));
    }
    let budget: f64 = omega_bar.iter().zip(&spec.dims).map(|(w, &di)| di as f64 * w * w).sum();
    let e = budget.exp() / len as f64;
    let c = weights(spec);
    let phi = spec.phi();
    let mut value = 0.0;
    let mut curvature = Vec::with_capacity(n);
    let mut flags = Vec::new();
    if budget > default_budget_cap(len) {
        flags.push(format!("budget B = {budget:.4} exceeds 2 log L / 9"));
    }
    for i in 0..n {
        let (w, ui) = (omega_bar[i], u[i]);
        let curv = w * w + phi[i] * e;
        value += c[i] * (1.0 - 2.0 * ui * w + ui * ui * curv);
        curvature.push(c[i] * curv);
        if (ui * w).abs() > 2.0 {
            flags.push(format!("task {i}: u ω̄ = {:.3} is not O(1)", ui * w));
        }
        if ui * ui > 4.0 * spec.dims[i] as f64 {
            flags.push(format!("task {i}: u² = {:.3} exceeds O(d_i)", ui * ui));
        }
    }
    Ok(ClosedFormLoss { value, budget, curvature, flags })
}

fn require_homogeneous(spec: &TaskSpec) -> Result<(f64, f64)> {
    if !spec.is_homogeneous() {
        return invalid("tasks must be homogeneous");
    }
    Ok((spec.signals[0], spec.phi()[0]))
}

/// Loss of the gradient-flow convergence point with `H ≥ I` heads.
pub fn gf_icl_loss(spec: &TaskSpec, len: usize, h: usize) -> Result<f64> {
    if h < spec.tasks() {
        return invalid(format!("GF-ICL needs H ≥ I, got H = {h}, I = {}", spec.tasks()));
    }
    let c = weights(spec);
    let lf = len as f64;
    Ok(spec
        .dims
        .iter()
        .zip(spec.phi())
        .zip(&c)
        .map(|((&di, ph), c)| {
            let x = std::f64::consts::E * di as f64 * ph / lf;
            c * x / (1.0 + x)
        })
        .sum())
}

/// Lower bound for equiangular multi-head attention, `λ/(φ⁻¹d⁻¹L(H − 1) + 1)`.
pub fn equiangular_lower_bound(spec: &TaskSpec, len: usize, h: usize) -> Result<f64> {
    if h < 2 {
        return invalid("the equiangular bound needs H ≥ 2");
    }
    let (lambda, phi) = require_homogeneous(spec)?;
    let x = len as f64 / (phi * spec.d() as f64);
    Ok(lambda / (x * (h - 1) as f64 + 1.0))
}

/// Which closed form of the asymptotic Bayes risk to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmseConvention {
    /// Radicand `(br − 1 + r)² + 4b` in both denominators.
    Statement4b,
    /// Radicand `(br − 1 + r)² + 4br` throughout.
    Proof4br,
    /// Marchenko–Pastur evaluation of the variance/bias integrals with `x = bIr`.
    Integral,
}

impl MmseConvention {
    pub const ALL: [MmseConvention; 3] = [MmseConvention::Statement4b, MmseConvention::Proof4br, MmseConvention::Integral];

    pub fn name(&self) -> &'static str {
        match self {
            MmseConvention::Statement4b => "statement-4b",
            MmseConvention::Proof4br => "proof-4br",
            MmseConvention::Integral => "integral",
        }
    }
}

/// `(m, m₂) = (E[1/(s + x)], E[1/(s + x)²])` under Marchenko–Pastur with ratio `r`
/// (unit variance, including the atom at zero when `r > 1`).
pub fn mp_resolvent(r: f64, x: f64) -> (f64, f64) {
    let a = 1.0 - r + x;
    let big = (a * a + 4.0 * r * x).sqrt();
    let dr = (a + 2.0 * r) / big;
    if a >= 0.0 {
        let s = big + a;
        (2.0 / s, 2.0 * (dr + 1.0) / (s * s))
    } else {
        let m = (big - a) / (2.0 * r * x);
        let dm = ((dr - 1.0) * x - (big - a)) / (2.0 * r * x * x);
        (m, -dm)
    }
}

/// Asymptotic `(variance, bias)` of the Bayes risk for `I` homogeneous tasks of
/// dimension `d̄` with `b = σ²/λ`, `r = d̄/L`.
pub fn mmse_asymptotic(b: f64, r: f64, tasks: usize, sigma2: f64, lambda: f64, conv: MmseConvention) -> Result<(f64, f64)> {
    if !(r > 0.0) || !(b >= 0.0) {
        return invalid(format!("need r > 0 and b ≥ 0, got r = {r}, b = {b}"));
    }
    let it = tasks as f64;
    let floor = if r > 1.0 { 1.0 - 1.0 / r } else { 0.0 };
    Ok(match conv {
        MmseConvention::Statement4b | MmseConvention::Proof4br => {
            let t = b * r - 1.0 + r;
            let den = if conv == MmseConvention::Statement4b { t * t + 4.0 * b } else { t * t + 4.0 * b * r };
            let den = den.sqrt();
            let num_rad = (t * t + 4.0 * b * r).sqrt();
            let var = it * sigma2 * (b * r + 1.0 + r - den) / (2.0 * den);
            let bias = lambda * ((b * r * (1.0 + r) + (1.0 - r).powi(2) - (1.0 - r).abs() * num_rad) / (2.0 * den) + floor);
            (var, bias)
        }
        MmseConvention::Integral => {
            let x = b * it * r;
            if x == 0.0 {
                // noiseless limit: the minimum-norm interpolator
                (0.0, lambda * floor)
            } else {
                let (m, m2) = mp_resolvent(r, x);
                (sigma2 * it * r * (m - x * m2), lambda * x * x * m2)
            }
        }
    })
}

/// Monte Carlo Bayes risk split into variance and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmseMc {
    pub variance: MomentEstimate,
    pub bias: MomentEstimate,
    pub total: MomentEstimate,
}

/// Risk of the posterior mean (per-task ridge with penalty `σ²d/λ`) at the
/// query, one entry per value of `b`.
///
/// Each trial draws one task design `X` (`d̄ × L`) and uses the exact
/// conditional risk given `X`, from the spectrum of `XXᵀ`; tasks are
/// exchangeable, so the total is `I` times the per-task risk. The same designs
/// serve every `b` (common random numbers).
pub fn mmse_mc(tasks: usize, dbar: usize, len: usize, lambda: f64, b_values: &[f64], n_trials: usize, seed: u64) -> Result<Vec<MmseMc>> {
    if tasks == 0 || dbar == 0 || len == 0 || n_trials == 0 {
        return invalid("mmse_mc needs positive I, d̄, L and trial count");
    }
    if b_values.iter().any(|&b| !(b >= 0.0)) || !(lambda > 0.0) {
        return invalid("need λ > 0 and b ≥ 0");
    }
    let d = (tasks * dbar) as f64;
    let nb = b_values.len();
    let acc = rng::chunked(
        n_trials,
        seed,
        &[0x3e],
        |rng, count| {
            let mut acc = VecWelford::new(2 * nb);
            let mut x = vec![0.0; dbar * len];
            let mut row = vec![0.0; 2 * nb];
            for _ in 0..count {
                rng::fill_normal(rng, &mut x);
                let xm = DMatrix::from_column_slice(dbar, len, &x);
                let gram = &xm * xm.transpose();
                let eig = SymmetricEigen::new(gram).eigenvalues;
                // numerically zero eigenvalues (rank-deficient designs when L < d̄)
                let cut = 1e-9 * eig.iter().fold(0.0f64, |m, &v| m.max(v));
                for (j, &b) in b_values.iter().enumerate() {
                    let (sigma2, pen) = (b * lambda, b * d);
                    let (mut var, mut bias) = (0.0, 0.0);
                    for &s in eig.iter() {
                        let s = if s <= cut { 0.0 } else { s };
                        let den = s + pen;
                        if den > 0.0 {
                            var += sigma2 * s / (den * den);
                            bias += lambda / d * (pen / den).powi(2);
                        } else {
                            bias += lambda / d;
                        }
                    }
                    row[j] = tasks as f64 * var;
                    row[nb + j] = tasks as f64 * bias;
                }
                acc.push(&row);
            }
            acc
        },
        VecWelford::merge,
    )
    .unwrap_or_else(|| VecWelford::new(2 * nb));
    let se = acc.stderr();
    let est = |v: f64, s: f64| MomentEstimate { value: v, stderr: s, n_samples: acc.n, method: "mc-design-exact-conditional".into() };
    Ok((0..nb)
        .map(|j| {
            // the variance and bias are computed on the same designs; their sum's
            // stderr is bounded by the sum of stderrs
            MmseMc {
                variance: est(acc.mean[j], se[j]),
                bias: est(acc.mean[nb + j], se[nb + j]),
                total: est(acc.mean[j] + acc.mean[nb + j], se[j] + se[nb + j]),
            }
        })
        .collect())
}

/// Conventions whose total agrees with every Monte Carlo total within `rel_tol`.
pub fn select_convention(
    points: &[(f64, f64, usize, f64, f64)],
    mc: &[MmseMc],
    rel_tol: f64,
) -> Result<Vec<(MmseConvention, f64)>> {
    let mut out = Vec::new();
    for conv in MmseConvention::ALL {
        let mut worst: f64 = 0.0;
        for (&(b, r, it, s2, l), m) in points.iter().zip(mc) {
            let (v, bi) = mmse_asymptotic(b, r, it, s2, l, conv)?;
            let rel = ((v + bi) - m.total.value).abs() / m.total.value;
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
        out.push((conv, worst));
    }
    Ok(out.into_iter().filter(|(_, w)| *w <= rel_tol).collect())
}

/// Small-`d̄/L` limit `σ²/(d⁻¹L + I⁻¹(SNR⁻¹ − 1))` with `SNR = λ/(Iσ²)`.
pub fn mmse_small_ratio(d: usize, len: usize, tasks: usize, sigma2: f64, lambda: f64) -> f64 {
    let snr = lambda / (tasks as f64 * sigma2);
    sigma2 / (len as f64 / d as f64 + (1.0 / snr - 1.0) / tasks as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundLabel {
    #[serde(rename = "OptS-ICL")]
    OptS,
    #[serde(rename = "GF-ICL")]
    Gf,
    #[serde(rename = "LB-ICL")]
    Lb,
    #[serde(rename = "MMSE")]
    Mmse,
    #[serde(rename = "Const-ICL")]
    Const,
}

impl BoundLabel {
    pub fn name(&self) -> &'static str {
        match self {
            BoundLabel::OptS => "OptS-ICL",
            BoundLabel::Gf => "GF-ICL",
            BoundLabel::Lb => "LB-ICL",
            BoundLabel::Mmse => "MMSE",
            BoundLabel::Const => "Const-ICL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub label: BoundLabel,
    pub value: f64,
    pub h: usize,
    pub i: usize,
    pub d: usize,
    pub len: usize,
    pub lambda: f64,
    pub sigma2: f64,
    /// `H = 1`, `H < I`, `H = I` or `H > I`.
    pub case: String,
}

/// `λ/(e⁻¹φ⁻¹d⁻¹L + 1)`: one head over all tasks.
pub fn opts_icl(spec: &TaskSpec, len: usize) -> Result<f64> {
    let (lambda, phi) = require_homogeneous(spec)?;
    Ok(lambda / (len as f64 / (std::f64::consts::E * phi * spec.d() as f64) + 1.0))
}

/// `λ/(H e⁻¹φ⁻¹d⁻¹L + 1)` for `I = kH`.
pub fn const_icl(spec: &TaskSpec, len: usize, h: usize) -> Result<f64> {
    let (lambda, phi) = require_homogeneous(spec)?;
    if h == 0 || spec.tasks() % h != 0 {
        return invalid("Const-ICL needs I to be a multiple of H");
    }
    Ok(lambda / (h as f64 * len as f64 / (std::f64::consts::E * phi * spec.d() as f64) + 1.0))
}

/// Every bound applicable to `(spec, L, H)`.
pub fn bounds_table(spec: &TaskSpec, len: usize, h: usize) -> Result<Vec<BoundsRow>> {
    let (lambda, _) = require_homogeneous(spec)?;
    let i = spec.tasks();
    let case = match h {
        1 => "H=1",
        _ if h < i => "H<I",
        _ if h == i => "H=I",
        _ => "H>I",
    }
    .to_string();
    let row = |label, value| BoundsRow {
        label,
        value,
        h,
        i,
        d: spec.d(),
        len,
        lambda,
        sigma2: spec.noise_var,
        case: case.clone(),
    };
    let mut rows = vec![row(BoundLabel::OptS, opts_icl(spec, len)?)];
    if h >= i {
        rows.push(row(BoundLabel::Gf, gf_icl_loss(spec, len, h)?));
    }
    if h >= 2 {
        rows.push(row(BoundLabel::Lb, equiangular_lower_bound(spec, len, h)?));
    }
    let b = spec.noise_var / lambda;
    let r = spec.dims[0] as f64 / len as f64;
    let (v, bi) = mmse_asymptotic(b, r, i, spec.noise_var, lambda, MmseConvention::Integral)?;
    rows.push(row(BoundLabel::Mmse, v + bi));
    if h < i && i % h == 0 {
        rows.push(row(BoundLabel::Const, const_icl(spec, len, h)?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
