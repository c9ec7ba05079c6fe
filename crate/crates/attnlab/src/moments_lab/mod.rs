//! Monte Carlo oracles for softmax-probability moments, their closed-form
//! approximations, and the effective-order calculus on graph polynomials.
//!
//! Conditional on the query, the attention probabilities of two heads depend
//! only on the Gram matrix of `(Wq, W̃q)`, so the probability oracles sample
//! scores directly (`L` iid bivariate normals per draw) and never build `X`.
//! The Stein oracles do need `X` and sample it in full.

pub mod graph;

pub use graph::{graph_partial, low_order_partial, prune, PolyGraph, Term, Which};

use crate::attention_core::softmax_in_place;
use crate::data_model::dot;
use crate::rng::{self, Stream};
use crate::stats::{ols_slope, MomentEstimate, VecWelford, Welford};
use crate::{invalid, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Gram matrix `[[‖Wq‖², ⟨Wq, W̃q⟩], [⟨Wq, W̃q⟩, ‖W̃q‖²]]` of two score directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gram {
    pub norm_w2: f64,
    pub norm_wt2: f64,
    pub cross: f64,
}

impl Gram {
    pub fn new(norm_w2: f64, norm_wt2: f64, cross: f64) -> Self {
        Gram { norm_w2, norm_wt2, cross }
    }

    /// Both heads equal: `W = W̃` with `‖Wq‖² = r2`.
    pub fn same(r2: f64) -> Self {
        Gram { norm_w2: r2, norm_wt2: r2, cross: r2 }
    }

    pub fn of(wq: &[f64], wtq: &[f64]) -> Self {
        Gram { norm_w2: dot(wq, wq), norm_wt2: dot(wtq, wtq), cross: dot(wq, wtq) }
    }

    pub fn is_zero(&self) -> bool {
        self.norm_w2 == 0.0 && self.norm_wt2 == 0.0 && self.cross == 0.0
    }

    /// Cholesky factors `(a, b, c)` with `s = a·z₁`, `s̃ = b·z₁ + c·z₂`.
    fn factor(&self) -> Result<(f64, f64, f64)> {
        let tol = 1e-12 * (1.0 + self.norm_w2.abs() + self.norm_wt2.abs());
        let det = self.norm_w2 * self.norm_wt2 - self.cross * self.cross;
        if !(self.norm_w2 >= 0.0 && self.norm_wt2 >= 0.0 && det >= -tol * (1.0 + self.norm_w2 + self.norm_wt2)) {
            return invalid(format!("Gram matrix not PSD: {self:?}"));
        }
        if self.norm_w2 == 0.0 {
            if self.cross.abs() > tol {
                return invalid(format!("Gram matrix not PSD: {self:?}"));
            }
            return Ok((0.0, 0.0, self.norm_wt2.sqrt()));
        }
        let a = self.norm_w2.sqrt();
        let b = self.cross / a;
        let rest = self.norm_wt2 - b * b;
        // rank-one Gram: snap rounding residue to zero
        let c = if rest <= 1e-12 * self.norm_wt2 { 0.0 } else { rest.sqrt() };
        Ok((a, b, c))
    }
}

/// `L` iid draws of the bivariate score pair `(s_l, s̃_l)` with covariance `gram`.
pub fn score_sampler(gram: &Gram, len: usize, rng: &mut Stream) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b, c) = gram.factor()?;
    let mut s = vec![0.0; len];
    let mut st = vec![0.0; len];
    fill_scores(a, b, c, rng, &mut s, &mut st);
    Ok((s, st))
}

fn fill_scores(a: f64, b: f64, c: f64, rng: &mut Stream, s: &mut [f64], st: &mut [f64]) {
    for (x, y) in s.iter_mut().zip(st.iter_mut()) {
        let z1 = rng::normal(rng);
        let z2 = rng::normal(rng);
        *x = a * z1;
        *y = b * z1 + c * z2;
    }
}

/// Monte Carlo `E[pᵀp̃ | q]` with `p = softmax(s)`, `p̃ = softmax(s̃)`.
///
/// A zero Gram matrix makes both probability vectors uniform and the value
/// `1/L` is returned exactly.
pub fn inner_moment_mc(gram: &Gram, len: usize, n: usize, seed: u64) -> Result<MomentEstimate> {
    if len == 0 || n == 0 {
        return invalid("inner_moment_mc needs L ≥ 1 and n ≥ 1");
    }
    let (a, b, c) = gram.factor()?;
    if gram.is_zero() {
        return Ok(MomentEstimate::exact(1.0 / len as f64, "exact-uniform"));
    }
    let w = rng::chunked(
        n,
        seed,
        &[0x1d],
        |rng, count| {
            let mut s = vec![0.0; len];
            let mut st = vec![0.0; len];
            let mut w = Welford::default();
            for _ in 0..count {
                fill_scores(a, b, c, rng, &mut s, &mut st);
                softmax_in_place(&mut s);
                softmax_in_place(&mut st);
                w.push(dot(&s, &st));
            }
            w
        },
        Welford::merge,
    )
    .unwrap_or_default();
    Ok(w.estimate("mc-score-space"))
}

/// The constants `(ε, c)` of the exponential regime.
///
/// `c` solves `1/c + 3/(1 + √(1 + c²/2)) = ε`; the regime is
/// `max(‖Wq‖², ‖W̃q‖²) ≤ c⁻²·2 log L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub eps: f64,
    pub c: f64,
}

impl Default for Regime {
    fn default() -> Self {
        Regime::from_eps(0.25).expect("ε = 0.25 is valid")
    }
}

fn fixed_point_lhs(c: f64) -> f64 {
    1.0 / c + 3.0 / (1.0 + (1.0 + 0.5 * c * c).sqrt())
}

impl Regime {
    /// Solve the fixed-point equation for `c` by bisection. The left side is
    /// decreasing in `c`, so the root is unique for `ε ∈ (0, 1)`.
    pub fn from_eps(eps: f64) -> Result<Regime> {
        if !(eps > 0.0 && eps < 1.0) {
            return invalid(format!("ε must lie in (0, 1), got {eps}"));
        }
        let (mut lo, mut hi) = (1e-6, 1.0);
        while fixed_point_lhs(hi) > eps {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if fixed_point_lhs(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Regime { eps, c: 0.5 * (lo + hi) })
    }

    /// A user-chosen `c` (the lemmas use slightly different conventions).
    pub fn with_c(eps: f64, c: f64) -> Result<Regime> {
        if !(c > 0.0) {
            return invalid(format!("c must be positive, got {c}"));
        }
        Ok(Regime { eps, c })
    }

    /// `c⁻²·2 log L`.
    pub fn budget(&self, len: usize) -> f64 {
        2.0 * (len as f64).ln() / (self.c * self.c)
    }

    /// Whether the pseudo-dynamics precondition `τ² ≤ c⁻²·2 log L` holds.
    pub fn pseudo_dynamics_ok(&self, gram: &Gram, len: usize) -> bool {
        gram.norm_w2.max(gram.norm_wt2) <= self.budget(len)
    }
}

/// `exp(cross)/L` with a regime flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpApprox {
    pub value: f64,
    pub warning: Option<String>,
}

pub fn exp_regime_approx(gram: &Gram, len: usize, regime: &Regime) -> ExpApprox {
    let value = gram.cross.exp() / len as f64;
    let warning = (!regime.pseudo_dynamics_ok(gram, len)).then(|| {
        format!(
            "max score norm {} exceeds the exponential-regime budget {} (c = {}, L = {len})",
            gram.norm_w2.max(gram.norm_wt2),
            regime.budget(len),
            regime.c
        )
    });
    ExpApprox { value, warning }
}

/// Trace-form approximation `exp(⟨ω, ω̃⟩)/L` and the three norm conditions
/// under which it holds in mean square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceForm {
    pub value: f64,
    pub sup_ok: bool,
    pub l2_ok: bool,
    pub l4_ok: bool,
    /// `(max ‖·‖∞, max ‖·‖₂², max ‖·‖₄⁴)` over the pair.
    pub norms: [f64; 3],
    /// The matching thresholds.
    pub limits: [f64; 3],
}

impl TraceForm {
    pub fn eligible(&self) -> bool {
        self.sup_ok && self.l2_ok && self.l4_ok
    }
}

/// `eps0` is the fourth-moment slack constant; pass `regime.eps` to reuse ε.
pub fn trace_form_approx(omega: &[f64], omega_t: &[f64], len: usize, regime: &Regime, eps0: f64) -> TraceForm {
    let lf = len as f64;
    let ll = lf.ln();
    let sup = |w: &[f64]| w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let p = |w: &[f64], k: i32| w.iter().map(|x| x.abs().powi(k)).sum::<f64>();
    let norms = [
        sup(omega).max(sup(omega_t)),
        p(omega, 2).max(p(omega_t, 2)),
        p(omega, 4).max(p(omega_t, 4)),
    ];
    let limits = [
        lf.powf(-0.25) / ll.sqrt(),
        2.0 * ll / (3.0 * regime.c * regime.c),
        lf.powf(-(1.0 - eps0)) / ll,
    ];
    TraceForm {
        value: dot(omega, omega_t).exp() / lf,
        sup_ok: norms[0] <= limits[0],
        l2_ok: norms[1] <= limits[1],
        l4_ok: norms[2] <= limits[2],
        norms,
        limits,
    }
}

/// Root-mean-square over `q ~ N(0, I)` of `E[pᵀp̃ | q] − exp(⟨ω, ω̃⟩)/L` for
/// diagonal `W = diag(ω)`, `W̃ = diag(ω̃)`.
///
/// The inner expectation is itself estimated with `n_inner` score draws; its
/// Monte Carlo variance is subtracted from the mean square.
pub fn trace_form_rms(omega: &[f64], omega_t: &[f64], len: usize, n_q: usize, n_inner: usize, seed: u64) -> Result<f64> {
    if omega.len() != omega_t.len() {
        return invalid("ω and ω̃ lengths differ");
    }
    let target = dot(omega, omega_t).exp() / len as f64;
    let mut ms = 0.0;
    let mut noise = 0.0;
    let mut q = vec![0.0; omega.len()];
    let mut qrng = rng::stream(seed, &[0x7f]);
    for k in 0..n_q {
        rng::fill_normal(&mut qrng, &mut q);
        let wq: Vec<f64> = q.iter().zip(omega).map(|(a, b)| a * b).collect();
        let wtq: Vec<f64> = q.iter().zip(omega_t).map(|(a, b)| a * b).collect();
        let est = inner_moment_mc(&Gram::of(&wq, &wtq), len, n_inner, seed ^ (k as u64 + 1).wrapping_mul(0x9e37))?;
        ms += (est.value - target).powi(2);
        noise += est.stderr * est.stderr;
    }
    Ok(((ms - noise) / n_q as f64).max(0.0).sqrt())
}

/// Monte Carlo and closed-form sides of a Stein identity, with the closed
/// form's expectation estimated from the same draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SteinCheck {
    pub mc: Vec<f64>,
    pub closed: Vec<f64>,
    /// Stderr of the per-draw difference, entrywise.
    pub diff_stderr: Vec<f64>,
    pub n_samples: usize,
}

impl SteinCheck {
    /// Entrywise |mc − closed| / stderr of the difference.
    pub fn z_scores(&self) -> Vec<f64> {
        self.mc
            .iter()
            .zip(&self.closed)
            .zip(&self.diff_stderr)
            .map(|((a, b), s)| {
                let d = (a - b).abs();
                if d == 0.0 {
                    0.0
                } else if *s == 0.0 {
                    f64::INFINITY
                } else {
                    d / s
                }
            })
            .collect()
    }

    pub fn max_z(&self) -> f64 {
        self.z_scores().into_iter().fold(0.0, f64::max)
    }

    /// ‖mc − closed‖_F over the root sum of squared stderrs.
    pub fn frobenius_z(&self) -> f64 {
        let num: f64 = self.mc.iter().zip(&self.closed).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = self.diff_stderr.iter().map(|s| s * s).sum();
        if num == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }
}

fn check_stein_shapes(w: &DMatrix<f64>, q: &[f64], len: usize) -> Result<()> {
    if !w.is_square() || w.ncols() != q.len() {
        return invalid(format!("W is {}x{}, q has length {}", w.nrows(), w.ncols(), q.len()));
    }
    if len == 0 {
        return invalid("L must be positive");
    }
    Ok(())
}

/// Draw `X` (columns iid `N(0, I_d)`), and return `(X, p)` for scores `Xᵀw`.
fn draw_x(rng: &mut Stream, x: &mut [f64], d: usize, w: &[f64], p: &mut [f64]) {
    rng::fill_normal(rng, x);
    for (l, pl) in p.iter_mut().enumerate() {
        *pl = dot(&x[l * d..(l + 1) * d], w);
    }
    softmax_in_place(p);
}

fn weighted_sum(x: &[f64], d: usize, p: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (l, pl) in p.iter().enumerate() {
        crate::data_model::axpy(*pl, &x[l * d..(l + 1) * d], out);
    }
}

/// `E[Xp | q]` against `Wq · E[1 − ‖p‖² | q]`.
pub fn stein_first_moment(w: &DMatrix<f64>, q: &[f64], len: usize, n: usize, seed: u64) -> Result<SteinCheck> {
    check_stein_shapes(w, q, len)?;
    let d = q.len();
    let wq: Vec<f64> = (w * DVector::from_column_slice(q)).iter().copied().collect();
    // per draw: [Xp, Wq(1 − ‖p‖²)]
    let acc = rng::chunked(
        n,
        seed,
        &[0x51],
        |rng, count| {
            let mut x = vec![0.0; d * len];
            let mut p = vec![0.0; len];
            let mut row = vec![0.0; 2 * d];
            let mut acc = VecWelford::new(3 * d);
            let mut buf = vec![0.0; 3 * d];
            for _ in 0..count {
                draw_x(rng, &mut x, d, &wq, &mut p);
                weighted_sum(&x, d, &p, &mut row[..d]);
                let f = 1.0 - dot(&p, &p);
                for i in 0..d {
                    row[d + i] = wq[i] * f;
                }
                buf[..2 * d].copy_from_slice(&row);
                for i in 0..d {
                    buf[2 * d + i] = row[i] - row[d + i];
                }
                acc.push(&buf);
            }
            acc
        },
        VecWelford::merge,
    )
    .unwrap_or_else(|| VecWelford::new(3 * d));
    let se = acc.stderr();
    Ok(SteinCheck {
        mc: acc.mean[..d].to_vec(),
        closed: acc.mean[d..2 * d].to_vec(),
        diff_stderr: se[2 * d..].to_vec(),
        n_samples: acc.n,
    })
}

/// `E[X p p̃ᵀ Xᵀ | q]` against its Stein expansion; matrices are row-major `d×d`.
pub fn stein_second_moment(
    w: &DMatrix<f64>,
    wt: &DMatrix<f64>,
    q: &[f64],
    len: usize,
    n: usize,
    seed: u64,
) -> Result<SteinCheck> {
    check_stein_shapes(w, q, len)?;
    check_stein_shapes(wt, q, len)?;
    let d = q.len();
    let qv = DVector::from_column_slice(q);
    let a: Vec<f64> = (w * &qv).iter().copied().collect();
    let at: Vec<f64> = (wt * &qv).iter().copied().collect();
    let dd = d * d;
    let acc = rng::chunked(
        n,
        seed,
        &[0x52],
        |rng, count| {
            let mut x = vec![0.0; d * len];
            let mut p = vec![0.0; len];
            let mut pt = vec![0.0; len];
            let mut xp = vec![0.0; d];
            let mut xpt = vec![0.0; d];
            let mut buf = vec![0.0; 3 * dd];
            let mut acc = VecWelford::new(3 * dd);
            for _ in 0..count {
                rng::fill_normal(rng, &mut x);
                for l in 0..len {
                    let col = &x[l * d..(l + 1) * d];
                    p[l] = dot(col, &a);
                    pt[l] = dot(col, &at);
                }
                softmax_in_place(&mut p);
                softmax_in_place(&mut pt);
                weighted_sum(&x, d, &p, &mut xp);
                weighted_sum(&x, d, &pt, &mut xpt);
                let (mut ip, mut pp, mut tt, mut p2t, mut t2p) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for l in 0..len {
                    let (u, v) = (p[l], pt[l]);
                    ip += u * v;
                    pp += u * u;
                    tt += v * v;
                    p2t += u * u * v;
                    t2p += u * v * v;
                }
                let c_aa = 2.0 * (-p2t + ip * pp);
                let c_tt = 2.0 * (-t2p + ip * tt);
                // Wq (W̃q)ᵀ carries (1 − ‖p‖²)(1 − ‖p̃‖²), so that the product of
                // first moments E[Xp] E[Xp̃]ᵀ is the leading term
                let c_ta = (1.0 - pp) * (1.0 - tt);
                let c_at = ip - t2p - p2t + ip * ip;
                for i in 0..d {
                    for j in 0..d {
                        let k = i * d + j;
                        let mc = xp[i] * xpt[j];
                        let mut cf = c_aa * a[i] * a[j] + c_tt * at[i] * at[j] + c_ta * a[i] * at[j] + c_at * at[i] * a[j];
                        if i == j {
                            cf += ip;
                        }
                        buf[k] = mc;
                        buf[dd + k] = cf;
                        buf[2 * dd + k] = mc - cf;
                    }
                }
                acc.push(&buf);
            }
            acc
        },
        VecWelford::merge,
    )
    .unwrap_or_else(|| VecWelford::new(3 * dd));
    let se = acc.stderr();
    Ok(SteinCheck {
        mc: acc.mean[..dd].to_vec(),
        closed: acc.mean[dd..2 * dd].to_vec(),
        diff_stderr: se[2 * dd..].to_vec(),
        n_samples: acc.n,
    })
}

/// One row of the saturation profile at score scale `r = ‖Wq‖`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub r: f64,
    /// `E[‖p‖² | r]`.
    pub sq_norm: MomentEstimate,
    /// `E[1 − ‖p‖² | r]`, computed without cancellation near one-hot `p`.
    pub deficit: MomentEstimate,
}

/// `(‖p‖², 1 − ‖p‖²)` for `p = softmax(s)`, accurate when `p` is nearly one-hot.
fn sq_norm_and_deficit(s: &mut [f64]) -> (f64, f64) {
    let (imax, m) = s
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let mut rest = 0.0;
    for (i, v) in s.iter_mut().enumerate() {
        *v = (*v - m).exp();
        if i != imax {
            rest += *v;
        }
    }
    let tot = 1.0 + rest;
    let mut sq = 0.0;
    let mut def = 0.0;
    for (i, v) in s.iter().enumerate() {
        let p = v / tot;
        sq += p * p;
        // p(1 − p), with 1 − p_max = rest/tot
        def += if i == imax { p * rest / tot } else { p * (1.0 - p) };
    }
    (sq, def)
}

/// `E[‖p‖² | r]` and its deficit on a grid of `r`, with common random numbers
/// across the grid (the same standard scores are rescaled by each `r`).
pub fn saturation_profile(r_values: &[f64], len: usize, n: usize, seed: u64) -> Result<Vec<SaturationRow>> {
    if len == 0 || n == 0 {
        return invalid("saturation_profile needs L ≥ 1 and n ≥ 1");
    }
    if let Some(r) = r_values.iter().find(|r| !(**r >= 0.0)) {
        return invalid(format!("r must be nonnegative, got {r}"));
    }
    let k = r_values.len();
    let acc = rng::chunked(
        n,
        seed,
        &[0x5a],
        |rng, count| {
            let mut z = vec![0.0; len];
            let mut s = vec![0.0; len];
            let mut row = vec![0.0; 2 * k];
            let mut acc = VecWelford::new(2 * k);
            for _ in 0..count {
                rng::fill_normal(rng, &mut z);
                for (j, &r) in r_values.iter().enumerate() {
                    s.iter_mut().zip(&z).for_each(|(a, b)| *a = r * b);
                    let (sq, def) = sq_norm_and_deficit(&mut s);
                    row[j] = sq;
                    row[k + j] = def;
                }
                acc.push(&row);
            }
            acc
        },
        VecWelford::merge,
    )
    .unwrap_or_else(|| VecWelford::new(2 * k));
    let se = acc.stderr();
    let inv_l = 1.0 / len as f64;
    Ok(r_values
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            if r == 0.0 {
                SaturationRow {
                    r,
                    sq_norm: MomentEstimate::exact(inv_l, "exact-uniform"),
                    deficit: MomentEstimate::exact(1.0 - inv_l, "exact-uniform"),
                }
            } else {
                let est = |v, s| MomentEstimate { value: v, stderr: s, n_samples: acc.n, method: "mc-score-space".into() };
                SaturationRow { r, sq_norm: est(acc.mean[j], se[j]), deficit: est(acc.mean[k + j], se[k + j]) }
            }
        })
        .collect())
}

/// Start of the saturation regime, `(2 log L)^{3/(2ε)}`.
pub fn saturation_threshold(len: usize, eps: f64) -> f64 {
    (2.0 * (len as f64).ln()).powf(1.5 / eps)
}

/// Log-log slope of the deficit over rows with `r ≥ r_min`; `None` with fewer than two rows.
pub fn tail_slope(rows: &[SaturationRow], r_min: f64) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|row| row.r >= r_min && row.r > 0.0 && row.deficit.value > 0.0)
        .map(|row| (row.r.ln(), row.deficit.value.ln()))
        .unzip();
    (x.len() >= 2).then(|| ols_slope(&x, &y))
}

/// Largest drop of `E‖p‖²` between consecutive grid points, in units of the
/// combined stderr (nonpositive when the profile is nondecreasing).
pub fn max_monotone_violation(rows: &[SaturationRow]) -> f64 {
    rows.windows(2)
        .map(|w| {
            let drop = w[0].sq_norm.value - w[1].sq_norm.value;
            let se = (w[0].sq_norm.stderr.powi(2) + w[1].sq_norm.stderr.powi(2)).sqrt();
            if drop <= 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                drop / se
            }
        })
        .fold(0.0, f64::max)
}

/// Exponential-regime approximation of `E‖p‖²` at scale `r`: `min(e^{r²}/L, 1)`.
pub fn exp_regime_curve(r: f64, len: usize) -> f64 {
    ((r * r).exp() / len as f64).min(1.0)
}

#[cfg(test)]
mod tests;
