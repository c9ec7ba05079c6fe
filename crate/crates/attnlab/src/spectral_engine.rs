//! Reduced dynamics on per-head, per-task eigenvalues.
//!
//! `ω̄_i^{(h)}` is the task-`i` eigenvalue of head `h`'s `W_X` and `μ_i^{(h)}`
//! the task-`i` eigenvalue of its `U_Y`. Everything here runs on the
//! rescaled clock returned by [`rescale_factor`].

use crate::data_model::TaskSpec;
use crate::ode::{self, Integrator};
use crate::{invalid, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::E;

/// Eigenvalues `ω̄` and `μ`, both `H × I`, at rescaled time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub omega_bar: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub t: f64,
}

impl SpectralState {
    pub fn zeros(h: usize, i: usize) -> Self {
        SpectralState { omega_bar: DMatrix::zeros(h, i), mu: DMatrix::zeros(h, i), t: 0.0 }
    }

    /// `ω̄ = ω₀` everywhere and the given `μ₀` rows.
    pub fn init(omega0: f64, mu0: &[Vec<f64>]) -> Self {
        let h = mu0.len();
        let i = mu0[0].len();
        SpectralState {
            omega_bar: DMatrix::from_element(h, i, omega0),
            mu: DMatrix::from_fn(h, i, |a, b| mu0[a][b]),
            t: 0.0,
        }
    }

    pub fn heads(&self) -> usize {
        self.mu.nrows()
    }

    pub fn tasks(&self) -> usize {
        self.mu.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.omega_bar.iter().chain(self.mu.iter()).all(|v| v.is_finite())
    }

    /// `ω̄` then `μ`, each column-major.
    pub fn flat(&self) -> Vec<f64> {
        self.omega_bar.iter().chain(self.mu.iter()).copied().collect()
    }

    pub fn from_flat(h: usize, i: usize, x: &[f64], t: f64) -> Self {
        let n = h * i;
        SpectralState {
            omega_bar: DMatrix::from_column_slice(h, i, &x[..n]),
            mu: DMatrix::from_column_slice(h, i, &x[n..2 * n]),
            t,
        }
    }

    /// Optimal head per task: the argmax of `μ_i^{(h)}`.
    pub fn optimal_heads(&self) -> Vec<usize> {
        (0..self.tasks())
            .map(|i| (0..self.heads()).max_by(|&a, &b| self.mu[(a, i)].total_cmp(&self.mu[(b, i)])).unwrap())
            .collect()
    }
}

/// Rescaled time per unit of raw gradient-flow time, `t' = (2/d)·t`.
pub fn rescale_factor(spec: &TaskSpec) -> f64 {
    2.0 / spec.d() as f64
}

/// `⟨ω^{(h)}, ω^{(h')}⟩ = Σ_i d_i ω̄_i^{(h)} ω̄_i^{(h')}` for all head pairs.
fn head_inner(state: &SpectralState, dims: &[usize]) -> DMatrix<f64> {
    let h = state.heads();
    DMatrix::from_fn(h, h, |a, b| {
        dims.iter()
            .enumerate()
            .map(|(i, &di)| di as f64 * state.omega_bar[(a, i)] * state.omega_bar[(b, i)])
            .sum()
    })
}

/// Time derivative `(∂ω̄, ∂μ)` of the central spectral system.
pub fn full_spectral_rhs(state: &SpectralState, spec: &TaskSpec, len: usize, d_e: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (h, ni) = (state.heads(), state.tasks());
    let phi = spec.phi();
    let lf = len as f64;
    let inner = head_inner(state, &spec.dims);
    // e^{⟨ω,ω'⟩}/L and ⟨d⊙λ⊙φ, μ⊙μ'⟩
    let ex = inner.map(|v| v.exp() / lf);
    let c = DMatrix::from_fn(h, h, |a, b| {
        (0..ni)
            .map(|i| spec.dims[i] as f64 * spec.signals[i] * phi[i] * state.mu[(a, i)] * state.mu[(b, i)])
            .sum::<f64>()
    });
    let sde = (d_e as f64).sqrt();
    let mut dw = DMatrix::zeros(h, ni);
    let mut dm = DMatrix::zeros(h, ni);
    for i in 0..ni {
        let (di, li) = (spec.dims[i] as f64, spec.signals[i]);
        let signal: f64 = (0..h).map(|b| state.mu[(b, i)] * state.omega_bar[(b, i)]).sum();
        for a in 0..h {
            let (w, m) = (state.omega_bar[(a, i)], state.mu[(a, i)]);
            let interf_w: f64 = (0..h).map(|b| ex[(a, b)] * c[(a, b)] * state.omega_bar[(b, i)]).sum();
            dw[(a, i)] = (li * m * w - li * signal * m * w - interf_w * w) / sde;
            let interf_m: f64 = (0..h).map(|b| ex[(a, b)] * state.mu[(b, i)]).sum();
            dm[(a, i)] = di * li * w * m - di * li * w * signal * m - di * li * phi[i] * interf_m * m;
        }
    }
    (dw, dm)
}

/// Small-ω̄ split of `∂_t log μ`: the signal `d_i λ_i ω̄` and the cross-head
/// interference `Σ_h' (e^{⟨ω,ω'⟩}/L) d_i λ_i φ_i μ'`, both `H × I`.
pub fn log_mu_split(state: &SpectralState, spec: &TaskSpec, len: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (h, ni) = (state.heads(), state.tasks());
    let phi = spec.phi();
    let inner = head_inner(state, &spec.dims);
    let mut sig = DMatrix::zeros(h, ni);
    let mut inter = DMatrix::zeros(h, ni);
    for i in 0..ni {
        let (di, li) = (spec.dims[i] as f64, spec.signals[i]);
        for a in 0..h {
            sig[(a, i)] = di * li * state.omega_bar[(a, i)];
            inter[(a, i)] = (0..h)
                .map(|b| (inner[(a, b)].exp() / len as f64) * di * li * phi[i] * state.mu[(b, i)])
                .sum();
        }
    }
    (sig, inter)
}

/// Warm-up comparison of head `h` against the optimal head of each task.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioRates {
    pub task: usize,
    pub head: usize,
    /// `∂_t log(μ*/μ)`.
    pub log_mu_ratio: f64,
    /// `∂_t log(ω̄*/ω̄)`.
    pub log_omega_ratio: f64,
}

/// `∂_t log(μ*/μ_h) ≈ λ_i d_i (ω̄* − ω̄_h)` and `∂_t log(ω̄*/ω̄_h) ≈ λ_i (μ* − μ_h)/√d_e`
/// for every task and non-optimal head.
pub fn warmup_ratio_rhs(state: &SpectralState, spec: &TaskSpec, d_e: usize) -> Vec<RatioRates> {
    let opt = state.optimal_heads();
    let sde = (d_e as f64).sqrt();
    let mut out = Vec::new();
    for (i, &hs) in opt.iter().enumerate() {
        let (di, li) = (spec.dims[i] as f64, spec.signals[i]);
        for h in (0..state.heads()).filter(|&h| h != hs) {
            out.push(RatioRates {
                task: i,
                head: h,
                log_mu_ratio: li * di * (state.omega_bar[(hs, i)] - state.omega_bar[(h, i)]),
                log_omega_ratio: li * (state.mu[(hs, i)] - state.mu[(h, i)]) / sde,
            });
        }
    }
    out
}

/// One task's parameters for the single-head reductions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub d_i: f64,
    pub lambda: f64,
    pub phi: f64,
}

impl TaskParams {
    pub fn of(spec: &TaskSpec, i: usize) -> Self {
        TaskParams { d_i: spec.dims[i] as f64, lambda: spec.signals[i], phi: spec.phi()[i] }
    }

    /// Converged eigenvalues `(d_i^{-1/2}, √d_i/(1 + e d_i φ_i/L))`.
    pub fn fixed_point(&self, len: usize) -> (f64, f64) {
        (1.0 / self.d_i.sqrt(), self.d_i.sqrt() / (1.0 + E * self.d_i * self.phi / len as f64))
    }
}

/// Fast-variable equilibrium `μ* = ω̄*/(ω̄*² + φ e^{d ω̄*²}/L)`.
pub fn mu_equilibrium(omega_star: f64, t: TaskParams, len: usize) -> f64 {
    omega_star / (omega_star * omega_star + t.phi * (t.d_i * omega_star * omega_star).exp() / len as f64)
}

/// Optimal-head system, returns `(∂μ*, ∂ω̄*)`.
pub fn optimal_head_rhs(omega_star: f64, mu_star: f64, t: TaskParams, len: usize, d_e: usize) -> (f64, f64) {
    let (w, m) = (omega_star, mu_star);
    let ex = (t.d_i * w * w).exp() / len as f64;
    let dmu = t.lambda * t.d_i * (-ex * t.phi * m * m + (1.0 - w * m) * w * m);
    let dw = (1.0 - (1.0 + ex * t.d_i * t.phi) * m * w) * t.lambda * w * m / (d_e as f64).sqrt();
    (dmu, dw)
}

/// Slow-variable rate after eliminating `μ*`.
pub fn omega_effective_rhs(omega_star: f64, t: TaskParams, len: usize, d_e: usize) -> f64 {
    let w2 = omega_star * omega_star;
    let g = t.phi * (t.d_i * w2).exp() / (len as f64 * w2);
    (1.0 - t.d_i * w2) * t.lambda / (d_e as f64).sqrt() / (2.0 + g + 1.0 / g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    OptimalHead,
    TwoTimescale,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "full" => Some(Mode::Full),
            "optimal-head" => Some(Mode::OptimalHead),
            "two-timescale" => Some(Mode::TwoTimescale),
            _ => None,
        }
    }
}

/// Integrates the selected reduction from `state0` over `[0, horizon]`,
/// recording every `every`-th step and the last one.
///
/// The reduced modes move only the optimal head of each task (fixed at
/// `state0`); the other entries keep their initial values. Two-timescale mode
/// integrates `ω̄*` and sets `μ* = mu_equilibrium(ω̄*)` at every record.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    state0: &SpectralState,
    spec: &TaskSpec,
    len: usize,
    d_e: usize,
    dt: f64,
    horizon: f64,
    mode: Mode,
    integrator: Integrator,
    every: usize,
) -> Result<Vec<SpectralState>> {
    if !(dt > 0.0) || every == 0 {
        return invalid("dt must be positive and the record interval at least 1");
    }
    if state0.tasks() != spec.tasks() {
        return invalid("state task count does not match the spec");
    }
    let (h, ni) = (state0.heads(), state0.tasks());
    let opt = state0.optimal_heads();
    let tasks: Vec<TaskParams> = (0..ni).map(|i| TaskParams::of(spec, i)).collect();
    let steps = (horizon / dt).round() as usize;
    let mut x = match mode {
        Mode::Full => state0.flat(),
        Mode::OptimalHead => (0..ni).flat_map(|i| [state0.omega_bar[(opt[i], i)], state0.mu[(opt[i], i)]]).collect(),
        Mode::TwoTimescale => (0..ni).map(|i| state0.omega_bar[(opt[i], i)]).collect(),
    };
    let unpack = |x: &[f64], t: f64| -> SpectralState {
        match mode {
            Mode::Full => SpectralState::from_flat(h, ni, x, t),
            Mode::OptimalHead | Mode::TwoTimescale => {
                let mut s = state0.clone();
                s.t = t;
                for i in 0..ni {
                    let (w, m) = if mode == Mode::OptimalHead {
                        (x[2 * i], x[2 * i + 1])
                    } else {
                        (x[i], mu_equilibrium(x[i], tasks[i], len))
                    };
                    s.omega_bar[(opt[i], i)] = w;
                    s.mu[(opt[i], i)] = m;
                }
                s
            }
        }
    };
    let rhs = |x: &[f64]| -> Result<Vec<f64>> {
        Ok(match mode {
            Mode::Full => {
                let s = SpectralState::from_flat(h, ni, x, 0.0);
                let (dw, dm) = full_spectral_rhs(&s, spec, len, d_e);
                dw.iter().chain(dm.iter()).copied().collect()
            }
            Mode::OptimalHead => (0..ni)
                .flat_map(|i| {
                    let (dm, dw) = optimal_head_rhs(x[2 * i], x[2 * i + 1], tasks[i], len, d_e);
                    [dw, dm]
                })
                .collect(),
            Mode::TwoTimescale => (0..ni).map(|i| omega_effective_rhs(x[i], tasks[i], len, d_e)).collect(),
        })
    };
    let mut out = vec![unpack(&x, 0.0)];
    for k in 1..=steps {
        x = ode::step(integrator, &x, dt, rhs)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("spectral dynamics diverged at t = {:.4}", k as f64 * dt)));
        }
        if k % every == 0 || k == steps {
            out.push(unpack(&x, k as f64 * dt));
        }
    }
    Ok(out)
}

/// Predicted emergence time `T₀ = √d_e φ_i/(λ_i L ω₀)` on the rescaled clock.
pub fn predicted_t0(spec: &TaskSpec, len: usize, d_e: usize, omega0: f64) -> Vec<f64> {
    spec.phi()
        .iter()
        .zip(&spec.signals)
        .map(|(&phi, &l)| (d_e as f64).sqrt() * phi / (l * len as f64 * omega0))
        .collect()
}

/// `π_i = μ*(ω̄* + φ_i e^{d_i ω̄*²}/(L ω̄*))`.
pub fn pi_diagnostic(omega_star: f64, mu_star: f64, t: TaskParams, len: usize) -> f64 {
    mu_star * (omega_star + t.phi * (t.d_i * omega_star * omega_star).exp() / (len as f64 * omega_star))
}

/// Crossing times and diagnostics for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPhases {
    pub task: usize,
    pub optimal_head: usize,
    pub t0_predicted: f64,
    /// First time with `ω̄* ≥ 4ω₀`.
    pub warmup_end: Option<f64>,
    /// First time with `d_i ω̄*² ≥ α`.
    pub emergence: Option<f64>,
    /// First time both convergence errors are at most `δ`.
    pub convergence: Option<f64>,
    /// Range of `π_i` between warm-up end and convergence (or the horizon).
    pub pi_min: Option<f64>,
    pub pi_max: Option<f64>,
    /// `ρ_i = μ*/(L ω̄*)` at the last record.
    pub rho_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub alpha: f64,
    pub delta: f64,
    pub omega0: f64,
    /// Earliest warm-up end over tasks.
    pub warmup_end: Option<f64>,
    pub tasks: Vec<TaskPhases>,
}

/// Measures warm-up end, emergence and convergence on a recorded trajectory.
#[allow(clippy::too_many_arguments)]
pub fn detect_phases(
    traj: &[SpectralState],
    spec: &TaskSpec,
    len: usize,
    d_e: usize,
    omega0: f64,
    alpha: f64,
    delta: f64,
) -> Result<PhaseReport> {
    let first = match traj.first() {
        Some(s) => s,
        None => return invalid("empty trajectory"),
    };
    let opt = first.optimal_heads();
    let t0 = predicted_t0(spec, len, d_e, omega0);
    let mut tasks = Vec::new();
    for (i, &hs) in opt.iter().enumerate() {
        let tp = TaskParams::of(spec, i);
        let (w_fix, m_fix) = tp.fixed_point(len);
        let cross = |pred: &dyn Fn(&SpectralState) -> bool| traj.iter().find(|s| pred(s)).map(|s| s.t);
        let warmup_end = cross(&|s| s.omega_bar[(hs, i)] >= 4.0 * omega0);
        let emergence = cross(&|s| tp.d_i * s.omega_bar[(hs, i)].powi(2) >= alpha);
        let convergence = cross(&|s| {
            (s.omega_bar[(hs, i)] / w_fix - 1.0).abs() <= delta && (s.mu[(hs, i)] / m_fix - 1.0).abs() <= delta
        });
        let (mut pi_min, mut pi_max) = (None::<f64>, None::<f64>);
        if let Some(start) = warmup_end {
            let stop = convergence.unwrap_or(f64::INFINITY);
            for s in traj.iter().filter(|s| s.t >= start && s.t <= stop) {
                let p = pi_diagnostic(s.omega_bar[(hs, i)], s.mu[(hs, i)], tp, len);
                pi_min = Some(pi_min.map_or(p, |v| v.min(p)));
                pi_max = Some(pi_max.map_or(p, |v| v.max(p)));
            }
        }
        let last = traj.last().unwrap();
        tasks.push(TaskPhases {
            task: i,
            optimal_head: hs,
            t0_predicted: t0[i],
            warmup_end,
            emergence,
            convergence,
            pi_min,
            pi_max,
            rho_final: last.mu[(hs, i)] / (len as f64 * last.omega_bar[(hs, i)]),
        });
    }
    let warmup_end = tasks.iter().filter_map(|t| t.warmup_end).reduce(f64::min);
    Ok(PhaseReport { alpha, delta, omega0, warmup_end, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> TaskSpec {
        TaskSpec::homogeneous(3, 10, 1.0, 0.0).unwrap()
    }

    fn single() -> (TaskSpec, TaskParams) {
        let s = TaskSpec::homogeneous(1, 10, 1.0, 0.0).unwrap();
        let t = TaskParams::of(&s, 0);
        (s, t)
    }

    fn fig1_init(mu_star: f64) -> SpectralState {
        let mu0: Vec<Vec<f64>> =
            (0..3).map(|h| (0..3).map(|i| if h == i { mu_star } else { 0.8 * mu_star }).collect()).collect();
        SpectralState::init(0.01, &mu0)
    }

    #[test]
    fn zero_state_is_fixed() {
        let s = SpectralState::zeros(3, 3);
        let (dw, dm) = full_spectral_rhs(&s, &fig1(), 100, 30);
        assert_eq!(dw.amax(), 0.0);
        assert_eq!(dm.amax(), 0.0);
    }

    #[test]
    fn single_task_fixed_point() {
        let (spec, t) = single();
        let (w, m) = t.fixed_point(100);
        assert!((m - 2.486).abs() < 1e-3);
        let s = SpectralState { omega_bar: DMatrix::from_element(1, 1, w), mu: DMatrix::from_element(1, 1, m), t: 0.0 };
        let (dw, dm) = full_spectral_rhs(&s, &spec, 100, 30);
        assert!(dw[(0, 0)].abs() <= 1e-8 * w, "{dw}");
        assert!(dm[(0, 0)].abs() <= 1e-8 * m, "{dm}");
        let (a, b) = optimal_head_rhs(w, m, t, 100, 30);
        assert!(a.abs() <= 1e-8 * m && b.abs() <= 1e-8 * w);
    }

    #[test]
    fn log_mu_regrouping_is_exact() {
        let spec = fig1();
        let mut s = fig1_init(0.3);
        s.omega_bar.fill(0.01);
        let (_, dm) = full_spectral_rhs(&s, &spec, 100, 30);
        let (sig, inter) = log_mu_split(&s, &spec, 100);
        for h in 0..3 {
            for i in 0..3 {
                let signal: f64 = (0..3).map(|b| s.mu[(b, i)] * s.omega_bar[(b, i)]).sum();
                let self_term = spec.dims[i] as f64 * s.omega_bar[(h, i)] * signal;
                let want = sig[(h, i)] - self_term - inter[(h, i)];
                let got = dm[(h, i)] / s.mu[(h, i)];
                assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn mu_equilibrium_examples() {
        let (_, t) = single();
        assert!((mu_equilibrium(10f64.sqrt().recip(), t, 100) - 2.486).abs() < 1e-3);
        let w = 0.2;
        assert!((mu_equilibrium(w, t, usize::MAX) - 1.0 / w).abs() < 1e-9);
        for &w in &[0.01, 0.1, 0.3, 0.5] {
            let m = mu_equilibrium(w, t, 100);
            assert!(optimal_head_rhs(w, m, t, 100, 30).0.abs() < 1e-10);
        }
        assert_eq!(optimal_head_rhs(0.2, 0.0, t, 100, 30).0, 0.0);
    }

    #[test]
    fn omega_effective_examples() {
        let (_, t) = single();
        let w_fix = 10f64.sqrt().recip();
        assert!(omega_effective_rhs(w_fix, t, 100, 30).abs() < 1e-15);
        let grid: Vec<f64> = (1..400).map(|k| w_fix * k as f64 / 400.0).collect();
        let vals: Vec<f64> = grid.iter().map(|&w| omega_effective_rhs(w, t, 100, 30)).collect();
        assert!(vals.iter().all(|&v| v > 0.0));
        let arg = (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        assert!(arg > 0 && arg < vals.len() - 1);
    }

    #[test]
    fn two_timescale_gap() {
        let (_, t) = single();
        for &w in &[0.05, 0.1, 0.2] {
            for &m in &[0.5, 1.0, 2.0] {
                let (dm, dw) = optimal_head_rhs(w, m, t, 100, 30);
                let scale_m = t.lambda * t.d_i * w * m;
                let scale_w = t.lambda * w * m / 30f64.sqrt();
                assert!((scale_m / scale_w - 10.0 * 30f64.sqrt()).abs() < 1e-9);
                assert!(dm.is_finite() && dw.is_finite());
            }
        }
    }

    #[test]
    fn ratio_rates_vanish_on_ties() {
        let spec = fig1();
        let mut s = fig1_init(0.3);
        s.omega_bar.fill(0.02);
        for r in warmup_ratio_rhs(&s, &spec, 30) {
            assert_eq!(r.log_mu_ratio, 0.0);
        }
        s.mu.fill(0.3);
        s.mu[(0, 0)] = 0.31;
        s.omega_bar[(1, 0)] = 0.03;
        for r in warmup_ratio_rhs(&s, &spec, 30).into_iter().filter(|r| r.task > 0) {
            assert_eq!(r.log_omega_ratio, 0.0);
        }
    }

    #[test]
    fn ratio_rates_track_full_rhs_when_small() {
        let spec = fig1();
        let mut s = fig1_init(0.3);
        for h in 0..3 {
            for i in 0..3 {
                s.omega_bar[(h, i)] = 0.01 * (1.0 + 0.3 * ((h * 3 + i) as f64 / 8.0));
            }
        }
        let (dw, dm) = full_spectral_rhs(&s, &spec, 100, 30);
        for r in warmup_ratio_rhs(&s, &spec, 30) {
            let hs = s.optimal_heads()[r.task];
            let i = r.task;
            let full_mu = dm[(hs, i)] / s.mu[(hs, i)] - dm[(r.head, i)] / s.mu[(r.head, i)];
            let full_w = dw[(hs, i)] / s.omega_bar[(hs, i)] - dw[(r.head, i)] / s.omega_bar[(r.head, i)];
            assert!((r.log_mu_ratio - full_mu).abs() <= 0.05 * r.log_mu_ratio.abs().max(full_mu.abs()) + 1e-3 * 10.0 * 0.01);
            assert!((r.log_omega_ratio - full_w).abs() <= 0.05 * r.log_omega_ratio.abs().max(full_w.abs()));
        }
    }

    #[test]
    fn full_mode_converges_to_fixed_point() {
        let spec = fig1();
        let traj = integrate(&fig1_init(0.25), &spec, 100, 30, 0.01, 80.0, Mode::Full, Integrator::Rk4, 50).unwrap();
        let last = traj.last().unwrap();
        let (w_fix, m_fix) = TaskParams::of(&spec, 0).fixed_point(100);
        for i in 0..3 {
            assert!((last.omega_bar[(i, i)] / w_fix - 1.0).abs() < 0.02);
            assert!((last.mu[(i, i)] / m_fix - 1.0).abs() < 0.05);
            for h in (0..3).filter(|&h| h != i) {
                assert!(last.mu[(h, i)] <= 1e-3 * last.mu[(i, i)], "{}", last.mu);
            }
        }
        // optimal head fixed and ω̄* non-decreasing
        for w in traj.windows(2) {
            assert_eq!(w[1].optimal_heads(), vec![0, 1, 2]);
            for i in 0..3 {
                assert!(w[1].omega_bar[(i, i)] >= w[0].omega_bar[(i, i)] - 1e-12);
            }
        }
    }

    #[test]
    fn two_timescale_tracks_full_after_warmup() {
        let spec = fig1();
        let init = fig1_init(0.25);
        let full = integrate(&init, &spec, 100, 30, 0.01, 60.0, Mode::Full, Integrator::Rk4, 10).unwrap();
        let rep = detect_phases(&full, &spec, 100, 30, 0.01, 0.25, 0.05).unwrap();
        let start = rep.tasks[0].emergence.unwrap();
        // restart the slow variable from the full state at the end of warm-up
        let s0 = full.iter().find(|s| s.t >= start).unwrap();
        let slow = integrate(s0, &spec, 100, 30, 0.01, 60.0 - s0.t, Mode::TwoTimescale, Integrator::Rk4, 10).unwrap();
        let mut worst: f64 = 0.0;
        for s in &slow {
            let f = full.iter().min_by(|a, b| (a.t - s.t - s0.t).abs().total_cmp(&(b.t - s.t - s0.t).abs())).unwrap();
            worst = worst.max((s.omega_bar[(0, 0)] / f.omega_bar[(0, 0)] - 1.0).abs());
        }
        assert!(worst <= 0.10, "{worst}");
    }

    #[test]
    fn frozen_trajectory_reaches_nothing() {
        let spec = fig1();
        let s = fig1_init(0.25);
        let traj = vec![s.clone(), SpectralState { t: 1.0, ..s }];
        let rep = detect_phases(&traj, &spec, 100, 30, 0.01, 0.25, 0.05).unwrap();
        assert!(rep.warmup_end.is_none());
        for t in &rep.tasks {
            assert!(t.emergence.is_none() && t.convergence.is_none());
        }
    }

    #[test]
    fn t0_example() {
        let t0 = predicted_t0(&fig1(), 100, 30, 0.01);
        assert!((t0[0] - 30f64.sqrt()).abs() < 1e-12);
    }
}
