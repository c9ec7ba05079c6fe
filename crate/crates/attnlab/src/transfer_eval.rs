//! Length generalization and linear-to-nonlinear transfer.
//!
//! Both evaluators take a model trained on linear tasks and probe it on a
//! different context length or on a nonlinear target `f = Σ f̂_α He_α`.
//! Hermite polynomials use the probabilists' convention.

use crate::attention_core::{population_loss_keyed, AttentionParams};
use crate::data_model::TaskSpec;
use crate::moments_lab::Regime;
use crate::optimality_suite::single_head_from;
use crate::rng;
use crate::stats::{MomentEstimate, VecWelford, Welford};
use crate::{invalid, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::E;

/// Largest total degree accepted by [`HermiteSpec`].
pub const MAX_DEGREE: usize = 4;

/// Sparse Hermite expansion `f(x) = Σ_α f̂_α He_α(x)` on `ℝ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteSpec {
    pub d: usize,
    pub degree: usize,
    pub coeffs: BTreeMap<Vec<usize>, f64>,
}

impl HermiteSpec {
    /// Build from `(α, f̂_α)` pairs; repeated multi-indices are summed and
    /// zero coefficients dropped.
    pub fn new(d: usize, terms: impl IntoIterator<Item = (Vec<usize>, f64)>) -> Result<Self> {
        if d == 0 {
            return invalid("Hermite spec needs d ≥ 1");
        }
        let mut coeffs = BTreeMap::new();
        for (alpha, c) in terms {
            if alpha.len() != d {
                return invalid(format!("multi-index of length {} in dimension {d}", alpha.len()));
            }
            let deg: usize = alpha.iter().sum();
            if deg > MAX_DEGREE {
                return invalid(format!("degree {deg} exceeds the cap {MAX_DEGREE}"));
            }
            if !c.is_finite() {
                return invalid("coefficients must be finite");
            }
            *coeffs.entry(alpha).or_insert(0.0) += c;
        }
        coeffs.retain(|_, c| *c != 0.0);
        let degree = coeffs.keys().map(|a| a.iter().sum()).max().unwrap_or(0);
        Ok(HermiteSpec { d, degree, coeffs })
    }

    pub fn constant(d: usize, c: f64) -> Result<Self> {
        Self::new(d, [(vec![0; d], c)])
    }

    /// `c·He_k(x_j)`.
    pub fn coordinate(d: usize, j: usize, k: usize, c: f64) -> Result<Self> {
        if j >= d {
            return invalid(format!("coordinate {j} out of range for d = {d}"));
        }
        let mut alpha = vec![0; d];
        alpha[j] = k;
        Self::new(d, [(alpha, c)])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|(a, c)| c * hermite_eval(a, x)).sum()
    }
}

/// `He_n(x)` by `He_{n+1} = x He_n − n He_{n−1}`.
pub fn hermite_1d(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `He_α(x) = Π_j He_{α_j}(x_j)`.
pub fn hermite_eval(alpha: &[usize], x: &[f64]) -> f64 {
    alpha.iter().zip(x).filter(|(&a, _)| a > 0).map(|(&a, &xj)| hermite_1d(a, xj)).product()
}

/// `q^α = Π_j q_j^{α_j}`.
pub fn monomial(alpha: &[usize], q: &[f64]) -> f64 {
    alpha.iter().zip(q).map(|(&a, &qj)| qj.powi(a as i32)).product()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Hermite re-expansion of a monomial: `x^n = Σ_k n!/(k! 2^k (n−2k)!) He_{n−2k}(x)`,
/// taken coordinatewise. Returns `(β, coefficient)` pairs with `β = α − 2k`.
pub fn monomial_in_hermite(alpha: &[usize]) -> Vec<(Vec<usize>, f64)> {
    let mut out = vec![(Vec::with_capacity(alpha.len()), 1.0)];
    for &n in alpha {
        let mut next = Vec::new();
        for (beta, c) in &out {
            for k in 0..=n / 2 {
                let w = factorial(n) / (factorial(k) * 2f64.powi(k as i32) * factorial(n - 2 * k));
                let mut b = beta.clone();
                b.push(n - 2 * k);
                next.push((b, c * w));
            }
        }
        out = next;
    }
    out
}

/// One entry of the leakage table: source term `α` feeds output Hermite
/// component `β` with weight `μ f̂_α d^{−|α|/2}·coef`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub weight: f64,
}

/// The predicted output `μ Σ f̂_α d^{−|α|/2} q^α` written in the Hermite basis
/// of `q`. High-degree terms leak into lower degrees; this is reported, not corrected.
pub fn leakage_table(f: &HermiteSpec, mu: f64) -> Vec<LeakageRow> {
    let d = f.d as f64;
    let mut rows = Vec::new();
    for (alpha, c) in &f.coeffs {
        let deg: usize = alpha.iter().sum();
        let scale = mu * c * d.powf(-(deg as f64) / 2.0);
        for (beta, w) in monomial_in_hermite(alpha) {
            rows.push(LeakageRow { source: alpha.clone(), target: beta, weight: scale * w });
        }
    }
    rows
}

/// Output gain of the optimal single-head linear construction, `√d/(1 + e dφ/L)`.
pub fn linear_optimal_gain(d: usize, len: usize, phi: f64) -> f64 {
    let d = d as f64;
    d.sqrt() / (1.0 + E * d * phi / len as f64)
}

/// Per-α contribution: prediction `μ f̂_α d^{−|α|/2} q^α` and its MC share
/// `μ f̂_α E[Σ_l p_l He_α(x_l) | q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub alpha: Vec<usize>,
    pub coeff: f64,
    pub predicted: f64,
    pub mc_share: MomentEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub mu: f64,
    pub prediction: f64,
    pub mc: MomentEstimate,
    /// `E[‖p‖² | q]`, the size of the finite-L corrections.
    pub sq_norm_p: MomentEstimate,
    pub rows: Vec<TransferRow>,
}

/// MC of `E[ŷ_q | q]` for the model `W_X = d^{−1/2} I`, `U_Y = μ` on the target `f`.
///
/// Noise in `y` has mean zero and is left out: it does not move the conditional mean.
pub fn nonlinear_transfer(f: &HermiteSpec, len: usize, q: &[f64], phi: f64, n: usize, seed: u64) -> Result<Transfer> {
    let d = f.d;
    if q.len() != d {
        return invalid(format!("query has length {}, expected {d}", q.len()));
    }
    if len == 0 || n == 0 {
        return invalid("L and n must be at least 1");
    }
    if !(phi > 0.0) {
        return invalid("φ must be positive");
    }
    let mu = linear_optimal_gain(d, len, phi);
    let terms: Vec<(&Vec<usize>, f64)> = f.coeffs.iter().map(|(a, &c)| (a, c)).collect();
    let sparse: Vec<Vec<(usize, usize)>> = terms
        .iter()
        .map(|(a, _)| a.iter().enumerate().filter(|(_, &k)| k > 0).map(|(j, &k)| (j, k)).collect())
        .collect();
    let inv_sqrt_d = (d as f64).sqrt().recip();
    let nt = terms.len();
    // slots: one per term, then the total, then ‖p‖²
    let acc = rng::chunked(
        n,
        seed,
        &[0x7a],
        |rng, count| {
            let mut vw = VecWelford::new(nt + 2);
            let mut x = vec![0.0; d * len];
            let mut s = vec![0.0; len];
            let mut row = vec![0.0; nt + 2];
            for _ in 0..count {
                rng::fill_normal(rng, &mut x);
                for (l, sl) in s.iter_mut().enumerate() {
                    let xl = &x[l * d..(l + 1) * d];
                    *sl = inv_sqrt_d * xl.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
                }
                crate::attention_core::softmax_in_place(&mut s);
                row.iter_mut().for_each(|v| *v = 0.0);
                for (l, &p) in s.iter().enumerate() {
                    let xl = &x[l * d..(l + 1) * d];
                    for (t, sp) in sparse.iter().enumerate() {
                        let he: f64 = sp.iter().map(|&(j, k)| hermite_1d(k, xl[j])).product();
                        row[t] += p * he;
                    }
                    row[nt + 1] += p * p;
                }
                for (t, (_, c)) in terms.iter().enumerate() {
                    row[t] *= mu * c;
                    row[nt] += row[t];
                }
                vw.push(&row);
            }
            vw
        },
        VecWelford::merge,
    )
    .expect("n ≥ 1");
    let se = acc.stderr();
    let est = |t: usize, method: &str| MomentEstimate {
        value: acc.mean[t],
        stderr: se[t],
        n_samples: acc.n,
        method: method.to_string(),
    };
    let mut rows = Vec::with_capacity(nt);
    let mut prediction = 0.0;
    for (t, (alpha, c)) in terms.iter().enumerate() {
        let deg: usize = alpha.iter().sum();
        let predicted = mu * c * inv_sqrt_d.powi(deg as i32) * monomial(alpha, q);
        prediction += predicted;
        rows.push(TransferRow { alpha: (*alpha).clone(), coeff: *c, predicted, mc_share: est(t, "mc") });
    }
    Ok(Transfer { mu, prediction, mc: est(nt, "mc"), sq_norm_p: est(nt + 1, "mc"), rows })
}

/// Monitor of the high-probability event behind the transfer lemma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessEvent {
    /// `c⁻²·2 log L`.
    pub threshold: f64,
    /// Fraction of queries with `‖W_X q‖² = ‖q‖²/d` above the threshold.
    pub fraction: MomentEstimate,
    /// `exp(−((c⁻² log L − 1)² ∧ d/2))`.
    pub bound: f64,
}

impl SuccessEvent {
    pub fn holds(&self) -> bool {
        self.fraction.value <= self.bound
    }
}

pub fn success_event(d: usize, len: usize, regime: &Regime, n: usize, seed: u64) -> Result<SuccessEvent> {
    if d == 0 || len < 2 || n == 0 {
        return invalid("success event needs d ≥ 1, L ≥ 2, n ≥ 1");
    }
    let threshold = regime.budget(len);
    let lnl = (len as f64).ln();
    let a = lnl / (regime.c * regime.c) - 1.0;
    let bound = (-(a * a).min(d as f64 / 2.0)).exp();
    let w = rng::chunked(
        n,
        seed,
        &[0x7b],
        |rng, count| {
            let mut w = Welford::default();
            let mut q = vec![0.0; d];
            for _ in 0..count {
                rng::fill_normal(rng, &mut q);
                let r2 = q.iter().map(|v| v * v).sum::<f64>() / d as f64;
                w.push(if r2 > threshold { 1.0 } else { 0.0 });
            }
            w
        },
        Welford::merge,
    )
    .expect("n ≥ 1");
    Ok(SuccessEvent { threshold, fraction: w.estimate("mc"), bound })
}

/// Convergence point of the multi-head flow with `H = I` heads: head `i`
/// holds `ω̄ = d_i^{−1/2}` on task `i` and gain `√d_i/(1 + e d_iφ_i/L)`.
pub fn convergence_point(spec: &TaskSpec, len: usize) -> Result<AttentionParams> {
    if len == 0 {
        return invalid("L must be at least 1");
    }
    let tasks = spec.tasks();
    let phi = spec.phi();
    let mut out: Option<AttentionParams> = None;
    for i in 0..tasks {
        let mut b = vec![0.0; tasks];
        let mut u = vec![0.0; tasks];
        b[i] = 1.0;
        u[i] = linear_optimal_gain(spec.dims[i], len, phi[i]);
        let head = single_head_from(spec, &b, &u)?;
        match out.as_mut() {
            None => out = Some(head),
            Some(p) => p.heads.extend(head.heads),
        }
    }
    out.ok_or_else(|| crate::Error::Invalid("spec has no tasks".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthGen {
    pub l_train: usize,
    pub l_test: usize,
    pub empirical: MomentEstimate,
    /// `Σ (λ_i d_i/d)·a_i/(1 + a_i)`, `a_i = e d_iφ_i/L_test`.
    pub intrinsic: f64,
    /// `Σ (λ_i d_i/d)(e φ_i d_i |1/L_train − 1/L_test|)²`.
    pub mismatch: f64,
    /// `intrinsic + mismatch`; the O-constants are taken as 1 and the
    /// initialization and convergence slacks vanish for the exact convergence point.
    pub bound: f64,
}

/// Loss at `L_test` of the convergence point trained at `L_train`.
pub fn length_gen_loss(spec: &TaskSpec, l_train: usize, l_test: usize, n_mc: usize, seed: u64) -> Result<LengthGen> {
    if l_train == 0 || l_test == 0 {
        return invalid("both lengths must be at least 1");
    }
    let params = convergence_point(spec, l_train)?;
    let empirical = population_loss_keyed(&params, spec, l_test, n_mc, seed, &[0x7c, l_test as u64], false)?;
    let d = spec.d() as f64;
    let (mut intrinsic, mut mismatch) = (0.0, 0.0);
    let gap = (1.0 / l_train as f64 - 1.0 / l_test as f64).abs();
    for ((&di, &lam), ph) in spec.dims.iter().zip(&spec.signals).zip(spec.phi()) {
        let w = lam * di as f64 / d;
        let a = E * di as f64 * ph / l_test as f64;
        intrinsic += w * a / (1.0 + a);
        mismatch += w * (E * ph * di as f64 * gap).powi(2);
    }
    Ok(LengthGen { l_train, l_test, empirical, intrinsic, mismatch, bound: intrinsic + mismatch })
}
