//! Experiment setups shared by the commands and the acceptance harness.

use crate::config::{Config, TimeUnit};
use crate::CliError;
use attnlab::attention_core::AttentionParams;
use attnlab::data_model::TaskSpec;
use attnlab::flow_engine::{build_decomposable_init, run_flow, FlowConfig, FlowTrajectory};
use attnlab::ode::Integrator;
use attnlab::spectral_engine::{integrate, rescale_factor, Mode, SpectralState};
use serde::{Deserialize, Serialize};

/// The bundled Fig-1 configuration.
pub const FIG1: &str = include_str!("../configs/fig1.cfg");

pub fn fig1_config() -> Config {
    Config::parse(FIG1).expect("bundled config parses")
}

const DYNAMICS_KEYS: &[&str] = &[
    "H",
    "d_e",
    "omega0",
    "mu0",
    "mu_star0",
    "gap",
    "min_gap",
    "dt",
    "horizon",
    "time",
    "n_mc",
    "integrator",
    "checkpoint_every",
    "substeps",
    "spectral_mode",
    "alpha",
    "delta",
    "tol",
];

/// Everything a flow or spectral run needs.
#[derive(Clone, Debug)]
pub struct DynamicsSetup {
    pub spec: TaskSpec,
    pub len: usize,
    pub d_e: usize,
    pub omega0: f64,
    pub mu0: Vec<Vec<f64>>,
    pub min_gap: f64,
    /// Raw-clock step and horizon.
    pub dt_raw: f64,
    pub horizon_raw: f64,
    pub n_mc: usize,
    pub integrator: Integrator,
    pub checkpoint_every: usize,
    /// Spectral sub-steps per flow step.
    pub substeps: usize,
    pub spectral_mode: Mode,
    pub alpha: f64,
    pub delta: f64,
    pub tol: f64,
}

fn cfg_err(msg: String) -> CliError {
    CliError::Config(msg)
}

impl DynamicsSetup {
    pub fn from_config(cfg: &Config) -> Result<Self, CliError> {
        let spec = cfg.task_spec()?;
        let len = cfg.len()?;
        let s = cfg.section("dynamics");
        s.only(DYNAMICS_KEYS)?;
        let h: usize = s.req("H")?;
        if h == 0 {
            return Err(cfg_err("config key `dynamics.H` must be at least 1".into()));
        }
        let ni = spec.tasks();
        let mu0: Vec<Vec<f64>> = if s.has("mu0") {
            let m: Vec<Vec<f64>> = s.req("mu0")?;
            if m.len() != h {
                return Err(cfg_err(format!("config key `dynamics.mu0` needs {h} rows, got {}", m.len())));
            }
            m
        } else {
            let mu_star: f64 = s.req("mu_star0")?;
            let gap: f64 = s.req("gap")?;
            if !(gap > 0.0 && gap < 1.0) {
                return Err(cfg_err(format!("config key `dynamics.gap` must lie in (0, 1), got {gap}")));
            }
            (0..h)
                .map(|hh| (0..ni).map(|i| if i % h == hh { mu_star } else { (1.0 - gap) * mu_star }).collect())
                .collect()
        };
        let unit = TimeUnit::parse(&s.req::<String>("time")?, "dynamics.time")?;
        let clock = rescale_factor(&spec);
        let to_raw = |x: f64| if unit == TimeUnit::Raw { x } else { x / clock };
        let dt: f64 = s.req("dt")?;
        let horizon: f64 = s.req("horizon")?;
        if !(dt > 0.0) || !(horizon >= 0.0) {
            return Err(cfg_err("`dynamics.dt` must be positive and `dynamics.horizon` nonnegative".into()));
        }
        let integ: String = s.opt("integrator", "heun".to_string())?;
        let integrator = Integrator::parse(&integ)
            .ok_or_else(|| cfg_err(format!("config key `dynamics.integrator`: unknown integrator {integ:?}")))?;
        let sm: String = s.opt("spectral_mode", "full".to_string())?;
        let spectral_mode =
            Mode::parse(&sm).ok_or_else(|| cfg_err(format!("config key `dynamics.spectral_mode`: unknown mode {sm:?}")))?;
        let setup = DynamicsSetup {
            len,
            d_e: s.req("d_e")?,
            omega0: s.req("omega0")?,
            mu0,
            min_gap: s.opt("min_gap", 0.2)?,
            dt_raw: to_raw(dt),
            horizon_raw: to_raw(horizon),
            n_mc: s.req("n_mc")?,
            integrator,
            checkpoint_every: s.opt("checkpoint_every", 1)?,
            substeps: s.opt("substeps", 1)?,
            spectral_mode,
            alpha: s.opt("alpha", 0.25)?,
            delta: s.opt("delta", 0.05)?,
            tol: s.opt("tol", 1e-2)?,
            spec,
        };
        if setup.checkpoint_every == 0 || setup.substeps == 0 || setup.n_mc == 0 {
            return Err(cfg_err("`checkpoint_every`, `substeps` and `n_mc` must be at least 1".into()));
        }
        // validates the init against the spec now, as a config error
        setup.init_params()?;
        Ok(setup)
    }

    pub fn heads(&self) -> usize {
        self.mu0.len()
    }

    pub fn clock(&self) -> f64 {
        rescale_factor(&self.spec)
    }

    pub fn init_params(&self) -> Result<AttentionParams, CliError> {
        build_decomposable_init(&self.spec, self.d_e, self.omega0, &self.mu0, self.min_gap)
            .map_err(|e| cfg_err(format!("flow_engine: {e}")))
    }

    pub fn init_state(&self) -> SpectralState {
        SpectralState::init(self.omega0, &self.mu0)
    }

    pub fn flow_config(&self, seed: u64, n_mc: usize) -> FlowConfig {
        FlowConfig {
            dt: self.dt_raw,
            integrator: self.integrator,
            n_mc,
            horizon: self.horizon_raw,
            seed,
            report_rescaled: true,
            checkpoint_every: self.checkpoint_every,
            tol: self.tol,
        }
    }

    /// Full-parameter Monte Carlo flow with `n_mc` samples per step.
    pub fn run_flow(&self, seed: u64, n_mc: usize) -> Result<FlowTrajectory, CliError> {
        run_flow(&self.init_params()?, &self.spec, self.len, &self.flow_config(seed, n_mc))
            .map_err(|e| CliError::module("flow_engine", e))
    }

    /// Spectral dynamics recorded on the flow's checkpoint times.
    pub fn run_spectral(&self, mode: Mode) -> Result<Vec<SpectralState>, CliError> {
        let dt = self.dt_raw * self.clock() / self.substeps as f64;
        let horizon = self.horizon_raw * self.clock();
        integrate(
            &self.init_state(),
            &self.spec,
            self.len,
            self.d_e,
            dt,
            horizon,
            mode,
            self.integrator,
            self.checkpoint_every * self.substeps,
        )
        .map_err(|e| CliError::module("spectral_engine", e))
    }
}

/// Relative sup-norm gap of one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub t_rescaled: f64,
    /// `‖ω̄_flow − ω̄_ode‖_∞ / ‖ω̄_ode‖_∞`.
    pub omega_rel: f64,
    pub mu_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub sup_rel_err: f64,
    pub worst_t: f64,
}

fn sup(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.amax()
}

/// Compares two trajectories recorded at the same times.
pub fn compare_states(flow: &[SpectralState], ode: &[SpectralState]) -> Result<Comparison, CliError> {
    if flow.len() != ode.len() {
        return Err(CliError::Numerical(format!("trajectories have {} and {} records", flow.len(), ode.len())));
    }
    let mut rows = Vec::with_capacity(flow.len());
    let (mut worst, mut worst_t) = (0.0, 0.0);
    for (a, b) in flow.iter().zip(ode) {
        if (a.t - b.t).abs() > 1e-9 * (1.0 + a.t.abs()) {
            return Err(CliError::Numerical(format!("record times differ: {} vs {}", a.t, b.t)));
        }
        let omega_rel = sup(&(&a.omega_bar - &b.omega_bar)) / sup(&b.omega_bar);
        let mu_rel = sup(&(&a.mu - &b.mu)) / sup(&b.mu);
        let m = omega_rel.max(mu_rel);
        if m > worst {
            worst = m;
            worst_t = a.t;
        }
        rows.push(CompareRow { t_rescaled: a.t, omega_rel, mu_rel });
    }
    Ok(Comparison { rows, sup_rel_err: worst, worst_t })
}
