//! Full-parameter population gradient flow with Monte Carlo gradients.
//!
//! The flow of the halved loss is driven by two per-head expectations,
//! `A_h = E[Z P_h Zᵀ U_hᵀ r z_qᵀ]` and `B_h = E[r p_hᵀ Zᵀ]` with
//! `r = ŷ_q − y_q` and `P_h = diag(p_h) − p_h p_hᵀ`:
//! `Ȯ = −BVᵀ`, `V̇ = −OᵀB`, `K̇ = −QAᵀ/√d_e`, `Q̇ = −KA/√d_e`.

use crate::attention_core::{check_shapes, population_loss_keyed, AttentionParams, Kernel};
use crate::data_model::{Draw, TaskSpec};
use crate::ode::{self, Integrator};
use crate::rng;
use crate::spectral_engine::{rescale_factor, SpectralState};
use crate::stats::{MomentEstimate, Welford};
use crate::{invalid, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Per-head expectation matrices: `A_h` is `D × D`, `B_h` is `d_y × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AB {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

/// Monte Carlo estimate of [`AB`] with entrywise standard errors and the
/// halved loss measured on the same samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AbEstimate {
    pub ab: AB,
    pub a_se: Vec<DMatrix<f64>>,
    pub b_se: Vec<DMatrix<f64>>,
    pub loss: MomentEstimate,
}

struct Acc {
    a: Vec<f64>,
    b: Vec<f64>,
    a_sq: Vec<f64>,
    b_sq: Vec<f64>,
    loss: Welford,
}

/// Monte Carlo estimate of the per-head `A` and `B` matrices.
pub fn estimate_ab(params: &AttentionParams, spec: &TaskSpec, len: usize, n_mc: usize, seed: u64) -> Result<AbEstimate> {
    estimate_ab_keyed(params, spec, len, n_mc, seed, &[], true)
}

pub(crate) fn estimate_ab_keyed(
    params: &AttentionParams,
    spec: &TaskSpec,
    len: usize,
    n_mc: usize,
    seed: u64,
    key: &[u64],
    with_se: bool,
) -> Result<AbEstimate> {
    check_shapes(params, spec, len, n_mc)?;
    let kernel = Kernel::new(&params.combined());
    let (d, dy, h) = (params.d, params.d_y, params.h());
    let dd = d + dy;
    let (na, nb) = (h * dd * d, h * dy * dd);
    let acc = rng::chunked(
        n_mc,
        seed,
        key,
        |rng, count| {
            let mut draw = Draw::new(spec, len);
            let mut sc = kernel.scratch(len);
            let mut acc = Acc {
                a: vec![0.0; na],
                b: vec![0.0; nb],
                a_sq: vec![0.0; if with_se { na } else { 0 }],
                b_sq: vec![0.0; if with_se { nb } else { 0 }],
                loss: Welford::default(),
            };
            for _ in 0..count {
                draw.sample(spec, rng);
                if !kernel.forward(&draw, &mut sc) {
                    return Err(Error::Numerical("attention scores overflowed".into()));
                }
                acc.loss.push(0.5 * sc.r.iter().map(|r| r * r).sum::<f64>());
                let sq = if with_se { Some((&mut acc.a_sq[..], &mut acc.b_sq[..])) } else { None };
                kernel.backward(&draw, &mut sc, &mut acc.a, &mut acc.b, sq);
            }
            Ok(acc)
        },
        |x, y| {
            let (mut x, y) = (x?, y?);
            for (a, b) in [(&mut x.a, &y.a), (&mut x.b, &y.b), (&mut x.a_sq, &y.a_sq), (&mut x.b_sq, &y.b_sq)] {
                a.iter_mut().zip(b).for_each(|(u, v)| *u += v);
            }
            x.loss = x.loss.merge(y.loss);
            Ok(x)
        },
    )
    .expect("n_mc ≥ 1")?;
    let n = n_mc as f64;
    let se = |sum: f64, sq: f64| {
        let m = sum / n;
        if n_mc < 2 {
            0.0
        } else {
            ((sq / n - m * m).max(0.0) / (n - 1.0)).sqrt()
        }
    };
    let mut out = AbEstimate {
        ab: AB { a: Vec::new(), b: Vec::new() },
        a_se: Vec::new(),
        b_se: Vec::new(),
        loss: acc.loss.estimate("mc-half"),
    };
    for k in 0..h {
        let ra = k * dd * d..(k + 1) * dd * d;
        let rb = k * dy * dd..(k + 1) * dy * dd;
        let mut a = DMatrix::zeros(dd, dd);
        a.columns_mut(0, d).copy_from_slice(&acc.a[ra.clone()].iter().map(|v| v / n).collect::<Vec<_>>());
        out.ab.a.push(a);
        out.ab.b.push(DMatrix::from_iterator(dy, dd, acc.b[rb.clone()].iter().map(|v| v / n)));
        let mut ase = DMatrix::zeros(dd, dd);
        let mut bse = DMatrix::zeros(dy, dd);
        if with_se {
            let v: Vec<f64> = ra.clone().map(|i| se(acc.a[i], acc.a_sq[i])).collect();
            ase.columns_mut(0, d).copy_from_slice(&v);
            bse = DMatrix::from_iterator(dy, dd, rb.map(|i| se(acc.b[i], acc.b_sq[i])));
        }
        out.a_se.push(ase);
        out.b_se.push(bse);
    }
    Ok(out)
}

/// Time derivative of the parameters (negative gradient of the halved loss).
pub fn velocity(params: &AttentionParams, ab: &AB) -> AttentionParams {
    let s = 1.0 / (params.d_e as f64).sqrt();
    let mut out = params.clone();
    for ((v, hd), (a, b)) in out.heads.iter_mut().zip(&params.heads).zip(ab.a.iter().zip(&ab.b)) {
        v.o = -(b * hd.v.transpose());
        v.v = -(hd.o.transpose() * b);
        v.k = -(&hd.q * a.transpose()) * s;
        v.q = -(&hd.k * a) * s;
    }
    out
}

/// `⟨∇ℓ, Δ⟩` for the halved loss, assembled from `(A, B)`.
pub fn directional_derivative(params: &AttentionParams, ab: &AB, dir: &AttentionParams) -> f64 {
    let v = velocity(params, ab);
    -v.flat().iter().zip(dir.flat()).map(|(a, b)| a * b).sum::<f64>()
}

/// Analytic versus finite-difference directional derivative of the halved loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares `⟨∇ℓ, Δ⟩` from `(A, B)` with the central difference of the
/// Monte Carlo loss at `params ± hΔ`. All three evaluations share samples,
/// so the check is exact up to the difference formula and rounding.
pub fn gradient_check(
    params: &AttentionParams,
    dir: &AttentionParams,
    spec: &TaskSpec,
    len: usize,
    n_mc: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheck> {
    let est = estimate_ab_keyed(params, spec, len, n_mc, seed, &[], false)?;
    let analytic = directional_derivative(params, &est.ab, dir);
    let mut plus = params.clone();
    plus.add_scaled(dir, h);
    let mut minus = params.clone();
    minus.add_scaled(dir, -h);
    let lp = population_loss_keyed(&plus, spec, len, n_mc, seed, &[], true)?.value;
    let lm = population_loss_keyed(&minus, spec, len, n_mc, seed, &[], true)?.value;
    let numeric = (lp - lm) / (2.0 * h);
    let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
    Ok(GradCheck { analytic, numeric, rel_err })
}

/// One integrator step; `field` re-estimates `(A, B)` at every stage.
pub fn flow_step<F>(params: &AttentionParams, dt: f64, integrator: Integrator, mut field: F) -> Result<AttentionParams>
where
    F: FnMut(&AttentionParams) -> Result<AB>,
{
    let mut work = params.clone();
    let x = params.flat();
    let next = ode::step(integrator, &x, dt, |y| {
        work.set_flat(y);
        let ab = field(&work)?;
        Ok(velocity(&work, &ab).flat())
    })?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite parameters after a flow step".into()));
    }
    let mut out = params.clone();
    out.set_flat(&next);
    Ok(out)
}

/// Residuals of the decomposable structure (all zero for exact structure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposabilityReport {
    /// ‖U_X‖_F per head.
    pub ux_norm: Vec<f64>,
    /// ‖W_Y‖_F per head.
    pub wy_norm: Vec<f64>,
    /// Largest |⟨col(M_X), col(M_Y)⟩| over M ∈ {K, Q, V} and heads.
    pub ortho_kv: f64,
    /// Largest off-diagonal Frobenius norm of ΦᵀW_XΦ or ΨᵀU_YΨ.
    pub simdiag_resid: f64,
    /// Largest within-task spread of diag(ΦᵀW_XΦ).
    pub homog_spread: f64,
    pub tol: f64,
    pub pass: bool,
}

impl DecomposabilityReport {
    /// The five residual families, each maximized over heads.
    pub fn fields(&self) -> [f64; 5] {
        let mx = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        [mx(&self.ux_norm), mx(&self.wy_norm), self.ortho_kv, self.simdiag_resid, self.homog_spread]
    }

    pub const FIELD_NAMES: [&'static str; 5] = ["ux_norm", "wy_norm", "ortho_kv", "simdiag_resid", "homog_spread"];

    pub fn max_residual(&self) -> f64 {
        self.fields().into_iter().fold(0.0, f64::max)
    }
}

fn off_diag_norm(m: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Measures every decomposability condition.
pub fn check_decomposability(params: &AttentionParams, spec: &TaskSpec, tol: f64) -> DecomposabilityReport {
    let (d, dy) = (params.d, params.d_y);
    let cw = params.combined();
    let mut rep = DecomposabilityReport {
        ux_norm: Vec::new(),
        wy_norm: Vec::new(),
        ortho_kv: 0.0,
        simdiag_resid: 0.0,
        homog_spread: 0.0,
        tol,
        pass: false,
    };
    for (hd, hw) in params.heads.iter().zip(&cw.heads) {
        rep.ux_norm.push(hw.u_x(d).norm());
        rep.wy_norm.push(hw.w_y(d).norm());
        for m in [&hd.k, &hd.q, &hd.v] {
            let cross = m.columns(0, d).transpose() * m.columns(d, dy);
            rep.ortho_kv = rep.ortho_kv.max(cross.amax());
        }
        let wx = spec.phi_rot.transpose() * hw.w_x(d) * &spec.phi_rot;
        let uy = spec.psi_rot.transpose() * hw.u_y(d) * &spec.psi_rot;
        rep.simdiag_resid = rep.simdiag_resid.max(off_diag_norm(&wx)).max(off_diag_norm(&uy));
        for (&o, &di) in spec.offsets().iter().zip(&spec.dims) {
            let diag: Vec<f64> = (o..o + di).map(|k| wx[(k, k)]).collect();
            let hi = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
            rep.homog_spread = rep.homog_spread.max(hi - lo);
        }
    }
    rep.pass = rep.max_residual() <= tol;
    rep
}

/// Spectra read from (approximately) decomposable parameters, plus a
/// warning when the simultaneous-diagonalizability residual exceeds `tol`.
pub fn extract_spectra(params: &AttentionParams, spec: &TaskSpec, tol: f64) -> (SpectralState, Option<String>) {
    let (d, i_n) = (params.d, spec.tasks());
    let cw = params.combined();
    let mut st = SpectralState::zeros(params.h(), i_n);
    for (h, hw) in cw.heads.iter().enumerate() {
        let wx = spec.phi_rot.transpose() * hw.w_x(d) * &spec.phi_rot;
        let uy = spec.psi_rot.transpose() * hw.u_y(d) * &spec.psi_rot;
        for (i, (&o, &di)) in spec.offsets().iter().zip(&spec.dims).enumerate() {
            st.omega_bar[(h, i)] = (o..o + di).map(|k| wx[(k, k)]).sum::<f64>() / di as f64;
            st.mu[(h, i)] = uy[(i, i)];
        }
    }
    let rep = check_decomposability(params, spec, tol);
    let warn = (rep.simdiag_resid > tol || rep.homog_spread > tol).then(|| {
        format!(
            "parameters are not decomposable to tolerance {tol:e}: off-diagonal {:.3e}, spread {:.3e}",
            rep.simdiag_resid, rep.homog_spread
        )
    });
    (st, warn)
}

/// Unique best head per task with its relative margin over the runner-up.
pub fn optimal_heads(mu: &DMatrix<f64>) -> Vec<(usize, f64)> {
    (0..mu.ncols())
        .map(|i| {
            let col: Vec<f64> = mu.column(i).iter().copied().collect();
            let best = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            let second = (0..col.len()).filter(|&h| h != best).map(|h| col[h]).fold(f64::NEG_INFINITY, f64::max);
            let gap = if second.is_finite() { (col[best] - second) / col[best].abs() } else { f64::INFINITY };
            (best, gap)
        })
        .collect()
}

/// Diagonal decomposable initialization.
///
/// `K_X = Q_X = κ [I_d; 0] Φᵀ` with `κ² = ω₀ √d_e`, so `W_X = ω₀ I`;
/// `V_Y = F diag(√μ₀) Ψᵀ`, `O = Ψ diag(√μ₀) Fᵀ` with `F` the first `d_y`
/// embedding directions, so `U_Y = Ψ diag(μ₀) Ψᵀ`. `K_Y`, `Q_Y`, `V_X` are zero.
pub fn build_decomposable_init(
    spec: &TaskSpec,
    d_e: usize,
    omega0: f64,
    mu0: &[Vec<f64>],
    gap_eps: f64,
) -> Result<AttentionParams> {
    let (d, dy) = (spec.d(), spec.d_y());
    if d_e < d {
        return invalid(format!("embedding dimension d_e = {d_e} is below d = {d}"));
    }
    if !(omega0 > 0.0) {
        return invalid("omega0 must be positive");
    }
    if mu0.is_empty() || mu0.iter().any(|m| m.len() != dy) {
        return invalid(format!("mu0 must hold one length-{dy} vector per head"));
    }
    if mu0.iter().flatten().any(|&m| !(m > 0.0)) {
        return invalid("mu0 entries must be positive");
    }
    let h = mu0.len();
    let mu = DMatrix::from_fn(h, dy, |a, b| mu0[a][b]);
    if h > 1 {
        for (i, (_, gap)) in optimal_heads(&mu).into_iter().enumerate() {
            if gap < gap_eps - 1e-12 {
                return invalid(format!("task {i}: optimal-head margin {gap:.3} is below {gap_eps}"));
            }
        }
    }
    let kappa = (omega0 * (d_e as f64).sqrt()).sqrt();
    let mut e = DMatrix::zeros(d_e, d);
    for k in 0..d {
        e[(k, k)] = kappa;
    }
    let kx = e * spec.phi_rot.transpose();
    let mut params = AttentionParams::zeros(h, d, dy, d_e);
    for (hd, m) in params.heads.iter_mut().zip(mu0) {
        hd.k.columns_mut(0, d).copy_from(&kx);
        hd.q.columns_mut(0, d).copy_from(&kx);
        let mut f = DMatrix::zeros(d_e, dy);
        for j in 0..dy {
            f[(j, j)] = m[j].sqrt();
        }
        let vy = &f * spec.psi_rot.transpose();
        hd.v.columns_mut(d, dy).copy_from(&vy);
        hd.o = vy.transpose();
    }
    Ok(params)
}

/// Flow run settings. Time is raw gradient-flow time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dt: f64,
    pub integrator: Integrator,
    pub n_mc: usize,
    pub horizon: f64,
    pub seed: u64,
    pub report_rescaled: bool,
    /// Steps between recorded checkpoints.
    pub checkpoint_every: usize,
    /// Tolerance passed to the decomposability checks.
    pub tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dt: 1.0,
            integrator: Integrator::Heun,
            n_mc: 4096,
            horizon: 100.0,
            seed: 0,
            report_rescaled: true,
            checkpoint_every: 1,
            tol: 1e-2,
        }
    }
}

/// One recorded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPoint {
    pub step: usize,
    pub t_raw: f64,
    pub t_rescaled: f64,
    pub state: SpectralState,
    /// Halved loss at the checkpoint parameters.
    pub loss: MomentEstimate,
    pub report: DecomposabilityReport,
}

#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub points: Vec<FlowPoint>,
    pub final_params: AttentionParams,
}

impl FlowTrajectory {
    /// Spectral states with their rescaled times.
    pub fn states(&self) -> Vec<SpectralState> {
        self.points.iter().map(|p| p.state.clone()).collect()
    }
}

/// Integrates the Monte Carlo gradient flow from `init` and records spectra.
///
/// Step `k` draws its samples from key `[k]`; integrator stages within a
/// step reuse them (common random numbers).
pub fn run_flow(init: &AttentionParams, spec: &TaskSpec, len: usize, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    if !(cfg.dt > 0.0) || cfg.n_mc == 0 || cfg.checkpoint_every == 0 {
        return invalid("dt must be positive, n_mc and checkpoint_every at least 1");
    }
    check_shapes(init, spec, len, cfg.n_mc)?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let clock = rescale_factor(spec);
    let mut params = init.clone();
    let mut points = Vec::new();
    let record = |params: &AttentionParams, step: usize, loss: MomentEstimate| {
        let t_raw = step as f64 * cfg.dt;
        let (mut state, _) = extract_spectra(params, spec, cfg.tol);
        state.t = t_raw * clock;
        FlowPoint {
            step,
            t_raw,
            t_rescaled: t_raw * clock,
            state,
            loss,
            report: check_decomposability(params, spec, cfg.tol),
        }
    };
    for step in 0..steps {
        let mut first_loss = None;
        let next = flow_step(&params, cfg.dt, cfg.integrator, |p| {
            let est = estimate_ab_keyed(p, spec, len, cfg.n_mc, cfg.seed, &[step as u64], false)?;
            first_loss.get_or_insert(est.loss);
            Ok(est.ab)
        })
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} (step {step}, t_raw {:.4})", step as f64 * cfg.dt)),
            other => other,
        })?;
        if step % cfg.checkpoint_every == 0 {
            points.push(record(&params, step, first_loss.expect("at least one stage")));
        }
        params = next;
    }
    let loss = population_loss_keyed(&params, spec, len, cfg.n_mc, cfg.seed, &[steps as u64], true)?;
    points.push(record(&params, steps, loss));
    Ok(FlowTrajectory { points, final_params: params })
}
