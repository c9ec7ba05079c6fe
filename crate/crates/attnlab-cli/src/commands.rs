//! The subcommands. Each returns printable summary lines; artifacts land in
//! the output directory together with one manifest line per run.

use crate::config::Config;
use crate::experiments::{compare_states, DynamicsSetup};
use crate::output::{num, run_id, save_params, Output, RunManifest};
use crate::CliError;
use attnlab::attention_core::{population_loss, AttentionParams};
use attnlab::data_model::TaskSpec;
use attnlab::flow_engine::{build_decomposable_init, check_decomposability, extract_spectra, gradient_check, DecomposabilityReport};
use attnlab::moments_lab::{
    exp_regime_approx, inner_moment_mc, max_monotone_violation, saturation_profile, stein_first_moment,
    stein_second_moment, tail_slope, Gram, Regime, SteinCheck,
};
use attnlab::optimality_suite::{
    bounds_table, default_budget_cap, mmse_asymptotic, optimal_single_head, solve_water_filling, water_filling_grid,
    MmseConvention,
};
use attnlab::rng;
use attnlab::spectral_engine::{detect_phases, SpectralState, TaskParams};
use attnlab::stats::MomentEstimate;
use attnlab::transfer_eval::{
    hermite_1d, leakage_table, length_gen_loss, nonlinear_transfer, success_event, HermiteSpec, Transfer,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// `spectral = true` is `dynamics --mode spectral`.
    Dynamics { spectral: bool },
    Spectral,
    Moments,
    Optimal,
    Compare,
    Transfer,
    Check,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Dynamics { .. } => "dynamics",
            Command::Spectral => "spectral",
            Command::Moments => "moments",
            Command::Optimal => "optimal",
            Command::Compare => "compare",
            Command::Transfer => "transfer",
            Command::Check => "check",
        }
    }

    /// Artifact subdirectory, e.g. `dynamics-spectral`.
    pub fn subdir(&self) -> String {
        match self.mode() {
            Some(m) => format!("{}-{m}", self.name()),
            None => self.name().to_string(),
        }
    }

    fn mode(&self) -> Option<&'static str> {
        match self {
            Command::Dynamics { spectral: true } => Some("spectral"),
            Command::Dynamics { spectral: false } => Some("flow"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunContext {
    pub out: PathBuf,
    /// Overrides the config seed.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Summary lines and, for `check`, the failure that sets the exit code.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub failure: Option<CliError>,
}

struct Run {
    out: Output,
    manifest: RunManifest,
    seed: u64,
    started: Instant,
}

impl Run {
    fn start(cmd: Command, cfg: Option<&Config>, ctx: &RunContext) -> Result<Run, CliError> {
        let cfg_seed = match cfg {
            Some(c) => c.seed()?,
            None => 0,
        };
        let seed = ctx.seed.unwrap_or(cfg_seed);
        let canon = cfg.map(Config::canonical).unwrap_or_default();
        let id = run_id(cmd.name(), cmd.mode(), &canon, seed);
        let json = cfg.map(Config::to_json).unwrap_or(serde_json::Value::Null);
        Ok(Run {
            out: Output::new(&ctx.out, &cmd.subdir(), id)?,
            manifest: RunManifest::new(cmd.name(), cmd.mode(), json, seed, ctx.threads),
            seed,
            started: Instant::now(),
        })
    }

    fn finish(self) -> Result<(), CliError> {
        let mut m = self.manifest;
        m.wall_clock_s = self.started.elapsed().as_secs_f64();
        self.out.manifest(m)
    }
}

fn require(cfg: Option<&Config>) -> Result<&Config, CliError> {
    cfg.ok_or_else(|| CliError::Config("this command needs --config".into()))
}

/// Runs `cmd`.
pub fn execute(cmd: Command, cfg: Option<&Config>, ctx: &RunContext) -> Result<Report, CliError> {
    match cmd {
        Command::Dynamics { spectral: false } => dynamics_flow(require(cfg)?, ctx),
        Command::Dynamics { spectral: true } => dynamics_spectral(cmd, require(cfg)?, ctx),
        Command::Spectral => dynamics_spectral(cmd, require(cfg)?, ctx),
        Command::Compare => compare(require(cfg)?, ctx),
        Command::Moments => moments(require(cfg)?, ctx),
        Command::Optimal => optimal(require(cfg)?, ctx),
        Command::Transfer => transfer(require(cfg)?, ctx),
        Command::Check => check(cfg, ctx),
    }
}

// ---- dynamics -------------------------------------------------------------

pub const TRAJECTORY_SCHEMA: &str = "attnlab.trajectory/1";

fn trajectory_header(h: usize, i: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t_raw", "t_rescaled", "loss", "loss_stderr"].iter().map(|s| s.to_string()).collect();
    for name in ["omega_bar", "mu"] {
        for hh in 0..h {
            for ii in 0..i {
                cols.push(format!("{name}_h{hh}_i{ii}"));
            }
        }
    }
    cols
}

fn trajectory_row(t_raw: f64, state: &SpectralState, loss: Option<&MomentEstimate>) -> Vec<String> {
    let mut row = vec![num(t_raw), num(state.t)];
    match loss {
        Some(l) => row.extend([num(l.value), num(l.stderr)]),
        None => row.extend([String::new(), String::new()]),
    }
    for m in [&state.omega_bar, &state.mu] {
        for hh in 0..m.nrows() {
            for ii in 0..m.ncols() {
                row.push(num(m[(hh, ii)]));
            }
        }
    }
    row
}

fn write_trajectory(
    out: &mut Output,
    name: &str,
    setup: &DynamicsSetup,
    rows: Vec<(f64, &SpectralState, Option<&MomentEstimate>)>,
) -> Result<(), CliError> {
    let header = trajectory_header(setup.heads(), setup.spec.tasks());
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(name, TRAJECTORY_SCHEMA, &h, rows.into_iter().map(|(t, s, l)| trajectory_row(t, s, l)))
}

fn write_phases(out: &mut Output, setup: &DynamicsSetup, states: &[SpectralState]) -> Result<Vec<String>, CliError> {
    let rep = detect_phases(states, &setup.spec, setup.len, setup.d_e, setup.omega0, setup.alpha, setup.delta)
        .map_err(|e| CliError::module("spectral_engine", e))?;
    out.json("phases.json", "attnlab.phases/1", &rep)?;
    Ok(rep
        .tasks
        .iter()
        .map(|t| {
            format!(
                "task {}: head {}, emergence {}, T0 {:.4}",
                t.task,
                t.optimal_head,
                t.emergence.map_or("none".into(), |v| format!("{v:.4}")),
                t.t0_predicted
            )
        })
        .collect())
}

fn final_summary(state: &SpectralState) -> String {
    let opt = state.optimal_heads();
    let parts: Vec<String> = opt
        .iter()
        .enumerate()
        .map(|(i, &h)| format!("task {i}: head {h} ω̄ {:.4} μ {:.4}", state.omega_bar[(h, i)], state.mu[(h, i)]))
        .collect();
    parts.join("; ")
}

const DECOMP_SCHEMA: &str = "attnlab.decomposability/1";

fn decomp_row(t: f64, r: &DecomposabilityReport) -> Vec<String> {
    let mut row = vec![num(t)];
    row.extend(r.fields().iter().map(|v| num(*v)));
    row
}

fn dynamics_flow(cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let cmd = Command::Dynamics { spectral: false };
    let setup = DynamicsSetup::from_config(cfg)?;
    let mut run = Run::start(cmd, Some(cfg), ctx)?;
    let traj = setup.run_flow(run.seed, setup.n_mc)?;
    let rows = traj.points.iter().map(|p| (p.t_raw, &p.state, Some(&p.loss))).collect();
    write_trajectory(&mut run.out, "trajectory.csv", &setup, rows)?;
    let mut header = vec!["t_rescaled"];
    header.extend(DecomposabilityReport::FIELD_NAMES);
    run.out.csv(
        "decomposability.csv",
        DECOMP_SCHEMA,
        &header,
        traj.points.iter().map(|p| decomp_row(p.t_rescaled, &p.report)),
    )?;
    let states = traj.states();
    let mut lines = write_phases(&mut run.out, &setup, &states)?;
    save_params(&mut run.out, "params", &traj.final_params, run.seed, "dynamics")?;
    lines.insert(0, final_summary(states.last().expect("at least one record")));
    run.finish()?;
    Ok(Report { lines, failure: None })
}

fn dynamics_spectral(cmd: Command, cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let setup = DynamicsSetup::from_config(cfg)?;
    let mut run = Run::start(cmd, Some(cfg), ctx)?;
    let states = setup.run_spectral(setup.spectral_mode)?;
    let clock = setup.clock();
    let rows = states.iter().map(|s| (s.t / clock, s, None)).collect();
    write_trajectory(&mut run.out, "trajectory.csv", &setup, rows)?;
    let mut lines = write_phases(&mut run.out, &setup, &states)?;
    lines.insert(0, final_summary(states.last().expect("at least one record")));
    run.finish()?;
    Ok(Report { lines, failure: None })
}

fn compare(cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let setup = DynamicsSetup::from_config(cfg)?;
    let mut run = Run::start(Command::Compare, Some(cfg), ctx)?;
    let traj = setup.run_flow(run.seed, setup.n_mc)?;
    let flow_states = traj.states();
    let ode = setup.run_spectral(attnlab::spectral_engine::Mode::Full)?;
    let cmp = compare_states(&flow_states, &ode)?;
    let rows = traj.points.iter().map(|p| (p.t_raw, &p.state, Some(&p.loss))).collect();
    write_trajectory(&mut run.out, "trajectory_flow.csv", &setup, rows)?;
    let clock = setup.clock();
    let rows = ode.iter().map(|s| (s.t / clock, s, None)).collect();
    write_trajectory(&mut run.out, "trajectory_spectral.csv", &setup, rows)?;
    run.out.csv(
        "compare.csv",
        "attnlab.compare/1",
        &["t_rescaled", "omega_bar_rel_err", "mu_rel_err"],
        cmp.rows.iter().map(|r| vec![num(r.t_rescaled), num(r.omega_rel), num(r.mu_rel)]),
    )?;
    #[derive(Serialize)]
    struct Summary {
        sup_rel_err: f64,
        worst_t_rescaled: f64,
    }
    run.out.json("compare.json", "attnlab.compare-summary/1", &Summary { sup_rel_err: cmp.sup_rel_err, worst_t_rescaled: cmp.worst_t })?;
    run.finish()?;
    Ok(Report {
        lines: vec![format!("sup relative error {:.4} at t' = {:.3}", cmp.sup_rel_err, cmp.worst_t)],
        failure: None,
    })
}

// ---- moments --------------------------------------------------------------

const MOMENTS_KEYS: &[&str] = &[
    "lengths",
    "norms",
    "n",
    "c",
    "eps",
    "regime_len",
    "regime_r",
    "regime_n",
    "saturation_len",
    "saturation_r",
    "saturation_n",
    "saturation_r_min",
    "stein_d",
    "stein_len",
    "stein_n",
    "stein_scale",
];

/// `eps` and `c` from a section; `c` defaults to the bisection root.
fn regime_from(s: &crate::config::Section<'_>) -> Result<Regime, CliError> {
    let eps: f64 = s.opt("eps", 0.25)?;
    let r = if s.has("c") { Regime::with_c(eps, s.req("c")?) } else { Regime::from_eps(eps) };
    r.map_err(|e| CliError::module("moments_lab", e))
}

/// Random Stein inputs: `W = s·G/√d`, `W̃ = s·G̃/√d`, `q ~ N(0, I)`.
pub fn stein_inputs(d: usize, scale: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let draw = |k: u64, r: usize, c: usize| {
        let mut m = DMatrix::zeros(r, c);
        rng::fill_normal(&mut rng::stream(seed, &[0x5e, k]), m.as_mut_slice());
        m
    };
    let s = scale / (d as f64).sqrt();
    let w = draw(0, d, d) * s;
    let wt = draw(1, d, d) * s;
    let q = draw(2, d, 1).as_slice().to_vec();
    (w, wt, q)
}

fn stein_rows(c: &SteinCheck, d: usize, second: bool) -> Vec<Vec<String>> {
    let z = c.z_scores();
    (0..c.mc.len())
        .map(|k| {
            let idx = if second { format!("{}:{}", k / d, k % d) } else { k.to_string() };
            vec![idx, num(c.mc[k]), num(c.diff_stderr[k]), num(c.closed[k]), num(z[k])]
        })
        .collect()
}

fn moments(cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let s = cfg.section("moments");
    s.only(MOMENTS_KEYS)?;
    let lengths: Vec<usize> = s.opt("lengths", vec![1000, 10_000])?;
    let norms: Vec<f64> = s.opt("norms", vec![0.0, 0.5, 1.0, 1.5])?;
    let n: usize = s.opt("n", 100_000)?;
    let regime = regime_from(&s)?;
    let regime_len: usize = s.opt("regime_len", 1000)?;
    let regime_r: Vec<f64> = s.opt("regime_r", (0..=12).map(|k| 0.2 * k as f64).collect())?;
    let regime_n: usize = s.opt("regime_n", 20_000)?;
    let sat_len: usize = s.opt("saturation_len", 10_000)?;
    let sat_r: Vec<f64> = s.opt("saturation_r", (0..8).map(|k| 10.0 * 2f64.powi(k)).collect())?;
    let sat_n: usize = s.opt("saturation_n", 2000)?;
    let sat_rmin: f64 = s.opt("saturation_r_min", 10.0)?;
    let stein_d: usize = s.opt("stein_d", 8)?;
    let stein_len: usize = s.opt("stein_len", 200)?;
    let stein_n: usize = s.opt("stein_n", 100_000)?;
    let stein_scale: f64 = s.opt("stein_scale", 1.0)?;
    let mut run = Run::start(Command::Moments, Some(cfg), ctx)?;
    let seed = run.seed;
    let m = |e| CliError::module("moments_lab", e);

    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for &len in &lengths {
        for (k, &r2) in norms.iter().enumerate() {
            let g = Gram::same(r2);
            let mc = inner_moment_mc(&g, len, n, seed.wrapping_add(k as u64)).map_err(m)?;
            let cf = exp_regime_approx(&g, len, &regime);
            let rel = (mc.value - cf.value).abs() / cf.value;
            worst = worst.max(rel);
            rows.push(vec![
                len.to_string(),
                num(g.norm_w2),
                num(g.norm_wt2),
                num(g.cross),
                num(mc.value),
                num(mc.stderr),
                num(cf.value),
                num(mc.z_score(cf.value)),
                (cf.warning.is_none()).to_string(),
            ]);
        }
    }
    run.out.csv(
        "moments_inner.csv",
        "attnlab.moments-inner/1",
        &["L", "norm_w2", "norm_wt2", "cross", "mc", "stderr", "closed_form", "z_score", "in_regime"],
        rows,
    )?;

    let exp_rows = saturation_profile(&regime_r, regime_len, regime_n, seed).map_err(m)?;
    run.out.csv(
        "regime_exponential.csv",
        "attnlab.regime-exponential/1",
        &["r", "sq_norm_p"],
        exp_rows.iter().map(|r| vec![num(r.r), num(r.sq_norm.value)]),
    )?;
    let sat_rows = saturation_profile(&sat_r, sat_len, sat_n, seed).map_err(m)?;
    run.out.csv(
        "regime_saturation.csv",
        "attnlab.regime-saturation/1",
        &["r", "one_minus_sq_norm_p"],
        sat_rows.iter().map(|r| vec![num(r.r), num(r.deficit.value)]),
    )?;
    let slope = tail_slope(&sat_rows, sat_rmin);
    let violation = max_monotone_violation(&sat_rows);

    let (w, wt, q) = stein_inputs(stein_d, stein_scale, seed);
    let first = stein_first_moment(&w, &q, stein_len, stein_n, seed).map_err(m)?;
    let second = stein_second_moment(&w, &wt, &q, stein_len, stein_n, seed).map_err(m)?;
    let header = ["index", "mc", "stderr", "closed_form", "z_score"];
    run.out.csv("stein_first.csv", "attnlab.stein-first/1", &header, stein_rows(&first, stein_d, false))?;
    run.out.csv("stein_second.csv", "attnlab.stein-second/1", &header, stein_rows(&second, stein_d, true))?;

    #[derive(Serialize)]
    struct Summary {
        worst_inner_rel_err: f64,
        saturation_slope: Option<f64>,
        monotone_violation: f64,
        stein_first_max_z: f64,
        stein_second_max_z: f64,
        regime: Regime,
    }
    let sum = Summary {
        worst_inner_rel_err: worst,
        saturation_slope: slope,
        monotone_violation: violation,
        stein_first_max_z: first.max_z(),
        stein_second_max_z: second.max_z(),
        regime,
    };
    run.out.json("moments_summary.json", "attnlab.moments-summary/1", &sum)?;
    run.finish()?;
    Ok(Report {
        lines: vec![
            format!("inner moment worst relative error {worst:.4}"),
            format!("saturation slope {}", slope.map_or("n/a".into(), |v| format!("{v:.3}"))),
            format!("Stein max z: first {:.2}, second {:.2}", sum.stein_first_max_z, sum.stein_second_max_z),
        ],
        failure: None,
    })
}

// ---- optimal --------------------------------------------------------------

const OPTIMAL_KEYS: &[&str] = &["H", "b_max", "grid", "ratios", "construction_n"];

fn optimal(cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let spec = cfg.task_spec()?;
    let len = cfg.len()?;
    let s = cfg.section("optimal");
    s.only(OPTIMAL_KEYS)?;
    let h: usize = s.opt("H", spec.tasks())?;
    let b_max: f64 = s.opt("b_max", default_budget_cap(len))?;
    let grid: usize = s.opt("grid", 10_000)?;
    let ratios: Vec<f64> = s.opt("ratios", vec![0.01, 0.03, 0.1, 0.3, 1.0])?;
    let construction_n: usize = s.opt("construction_n", 4000)?;
    let mut run = Run::start(Command::Optimal, Some(cfg), ctx)?;
    let m = |e| CliError::module("optimality_suite", e);

    let wf = solve_water_filling(&spec, len, b_max).map_err(m)?;
    let (grid_b, grid_value) = water_filling_grid(&spec, len, b_max, grid);
    let construction = if construction_n > 0 {
        let (params, _) = optimal_single_head(&spec, len, b_max).map_err(m)?;
        Some(population_loss(&params, &spec, len, construction_n, run.seed, false).map_err(m)?)
    } else {
        None
    };
    #[derive(Serialize)]
    struct Solver<'a> {
        #[serde(flatten)]
        solution: &'a attnlab::optimality_suite::WaterFilling,
        grid_points: usize,
        grid_b_star: f64,
        grid_value: f64,
        construction_mc: Option<MomentEstimate>,
    }
    run.out.json(
        "solver.json",
        "attnlab.solver/1",
        &Solver { solution: &wf, grid_points: grid, grid_b_star: grid_b, grid_value, construction_mc: construction.clone() },
    )?;
    let mut lines = vec![format!("B* = {:.8}, value = {:.6}", wf.b_star, wf.value)];
    if let Some(c) = &construction {
        lines.push(format!("construction MC loss {:.5} ± {:.5}", c.value, c.stderr));
    }

    if spec.is_homogeneous() {
        let dbar = spec.dims[0] as f64;
        let mut rows = Vec::new();
        for &ratio in &ratios {
            if !(ratio > 0.0) {
                return Err(CliError::Config(format!("config key `optimal.ratios`: ratio must be positive, got {ratio}")));
            }
            let l = ((dbar / ratio).round() as usize).max(1);
            for r in bounds_table(&spec, l, h).map_err(m)? {
                rows.push(vec![
                    r.label.name().to_string(),
                    num(dbar / l as f64),
                    num(r.value),
                    r.h.to_string(),
                    r.i.to_string(),
                    r.d.to_string(),
                    r.len.to_string(),
                    num(r.lambda),
                    num(r.sigma2),
                    r.case.clone(),
                ]);
            }
        }
        run.out.csv(
            "bounds.csv",
            "attnlab.bounds/1",
            &["label", "dbar_over_L", "value", "H", "I", "d", "L", "lambda", "sigma2", "case"],
            rows,
        )?;
    } else {
        lines.push("bounds skipped: the bound formulas need homogeneous tasks".into());
    }
    run.finish()?;
    Ok(Report { lines, failure: None })
}

// ---- transfer -------------------------------------------------------------

const TRANSFER_KEYS: &[&str] =
    &["d", "n", "phi", "q", "functions", "length_tests", "length_n", "c", "eps", "success_n"];

#[derive(Clone, Debug, Deserialize)]
struct TermDecl {
    coeff: f64,
    /// `(coordinate, degree)` pairs.
    alpha: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum FnDecl {
    Builtin(String),
    Custom { name: String, terms: Vec<TermDecl> },
}

/// Builds a named target: `constant`, `linear` (He₁ on coordinate 0),
/// `he2` (He₂ on coordinate 0), or explicit terms.
fn build_function(decl: &FnDecl, d: usize) -> Result<(String, HermiteSpec), CliError> {
    let m = |e| CliError::module("transfer_eval", e);
    match decl {
        FnDecl::Builtin(name) => {
            let f = match name.as_str() {
                "constant" => HermiteSpec::constant(d, 1.0),
                "linear" => HermiteSpec::coordinate(d, 0, 1, 1.0),
                "he2" => HermiteSpec::coordinate(d, 0, 2, 1.0),
                other => {
                    return Err(CliError::Config(format!("config key `transfer.functions`: unknown function {other:?}")))
                }
            }
            .map_err(m)?;
            Ok((name.clone(), f))
        }
        FnDecl::Custom { name, terms } => {
            let mut out = Vec::new();
            for t in terms {
                let mut alpha = vec![0; d];
                for &(j, k) in &t.alpha {
                    if j >= d {
                        return Err(CliError::Config(format!("function {name}: coordinate {j} out of range")));
                    }
                    alpha[j] += k;
                }
                out.push((alpha, t.coeff));
            }
            Ok((name.clone(), HermiteSpec::new(d, out).map_err(m)?))
        }
    }
}

/// `0:2 3:1`, or `const` for the empty multi-index.
pub fn alpha_label(alpha: &[usize]) -> String {
    let parts: Vec<String> = alpha.iter().enumerate().filter(|(_, &k)| k > 0).map(|(j, k)| format!("{j}:{k}")).collect();
    if parts.is_empty() {
        "const".into()
    } else {
        parts.join(" ")
    }
}

fn transfer(cfg: &Config, ctx: &RunContext) -> Result<Report, CliError> {
    let spec = cfg.task_spec()?;
    let len = cfg.len()?;
    let s = cfg.section("transfer");
    s.only(TRANSFER_KEYS)?;
    let d: usize = s.opt("d", spec.d())?;
    let n: usize = s.opt("n", 100_000)?;
    let phi: f64 = s.opt("phi", 1.0)?;
    let q: Vec<f64> = s.opt("q", vec![1.0; d])?;
    if q.len() != d {
        return Err(CliError::Config(format!("config key `transfer.q` needs {d} entries, got {}", q.len())));
    }
    let decls: Vec<FnDecl> = s.opt(
        "functions",
        vec![FnDecl::Builtin("constant".into()), FnDecl::Builtin("linear".into()), FnDecl::Builtin("he2".into())],
    )?;
    let tests: Vec<usize> = s.opt("length_tests", vec![50, 100, 200, 400])?;
    let length_n: usize = s.opt("length_n", 100_000)?;
    let regime = Regime::with_c(s.opt("eps", 0.25)?, s.opt("c", 3.0)?).map_err(|e| CliError::module("moments_lab", e))?;
    let success_n: usize = s.opt("success_n", 100_000)?;
    let functions: Vec<(String, HermiteSpec)> = decls.iter().map(|f| build_function(f, d)).collect::<Result<_, _>>()?;
    let mut run = Run::start(Command::Transfer, Some(cfg), ctx)?;
    let m = |e| CliError::module("transfer_eval", e);
    let mut lines = Vec::new();

    let mut summary = Vec::new();
    for (k, (name, f)) in functions.iter().enumerate() {
        let t: Transfer = nonlinear_transfer(f, len, &q, phi, n, run.seed.wrapping_add(k as u64)).map_err(m)?;
        run.out.csv(
            &format!("transfer_{name}.csv"),
            "attnlab.transfer-terms/1",
            &["alpha", "coeff", "predicted", "mc_share", "mc_stderr"],
            t.rows.iter().map(|r| {
                vec![alpha_label(&r.alpha), num(r.coeff), num(r.predicted), num(r.mc_share.value), num(r.mc_share.stderr)]
            }),
        )?;
        run.out.csv(
            &format!("leakage_{name}.csv"),
            "attnlab.transfer-leakage/1",
            &["source", "target", "weight"],
            leakage_table(f, t.mu).iter().map(|r| vec![alpha_label(&r.source), alpha_label(&r.target), num(r.weight)]),
        )?;
        lines.push(format!(
            "{name}: MC {:.5} ± {:.5}, prediction {:.5}, z {:.2}",
            t.mc.value,
            t.mc.stderr,
            t.prediction,
            t.mc.z_score(t.prediction)
        ));
        summary.push(vec![
            name.clone(),
            num(t.prediction),
            num(t.mc.value),
            num(t.mc.stderr),
            num(t.mc.z_score(t.prediction)),
            num(t.sq_norm_p.value),
        ]);
    }
    run.out.csv(
        "transfer_summary.csv",
        "attnlab.transfer-summary/1",
        &["function", "prediction", "mc", "mc_stderr", "z_score", "sq_norm_p"],
        summary,
    )?;

    let mut rows = Vec::new();
    for &lt in &tests {
        let r = length_gen_loss(&spec, len, lt, length_n, run.seed).map_err(m)?;
        rows.push(vec![
            r.l_train.to_string(),
            r.l_test.to_string(),
            num(r.empirical.value),
            num(r.empirical.stderr),
            num(r.intrinsic),
            num(r.mismatch),
            num(r.bound),
        ]);
    }
    run.out.csv(
        "length_gen.csv",
        "attnlab.length-gen/1",
        &["L_train", "L_test", "empirical", "stderr", "intrinsic", "mismatch", "bound"],
        rows,
    )?;
    let ev = success_event(d, len, &regime, success_n, run.seed).map_err(m)?;
    run.out.json("success_event.json", "attnlab.success-event/1", &ev)?;
    lines.push(format!("success-event violation fraction {:.4} (bound {:.4})", ev.fraction.value, ev.bound));
    run.finish()?;
    Ok(Report { lines, failure: None })
}

// ---- check ----------------------------------------------------------------

/// Outcome of one quick invariant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

type CheckFn = fn(u64) -> Result<(bool, String), attnlab::Error>;

fn check_hermite(seed: u64) -> Result<(bool, String), attnlab::Error> {
    let mut r = rng::stream(seed, &[0xc0]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = 3.0 * rng::normal(&mut r);
        for n in 1..10 {
            let lhs = hermite_1d(n + 1, x);
            let rhs = x * hermite_1d(n, x) - n as f64 * hermite_1d(n - 1, x);
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
    }
    Ok((worst <= 1e-12, format!("max rel err {worst:.2e}")))
}

fn check_gradient(seed: u64) -> Result<(bool, String), attnlab::Error> {
    let spec = TaskSpec::new(vec![2, 2], vec![1.0, 0.5], 0.1, attnlab::data_model::Rotation::Random(seed))?;
    let mut r = rng::stream(seed, &[0xc1]);
    let mut worst = 0.0f64;
    for k in 0..5 {
        let p = AttentionParams::random(2, 4, 2, 4, 0.4, &mut r);
        let dir = AttentionParams::random(2, 4, 2, 4, 1.0, &mut r);
        worst = worst.max(gradient_check(&p, &dir, &spec, 6, 256, seed.wrapping_add(k), 1e-5)?.rel_err);
    }
    Ok((worst <= 1e-4, format!("max rel err {worst:.2e}")))
}

fn check_init(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    let spec = TaskSpec::homogeneous(3, 4, 1.0, 0.0)?;
    let mu0 = vec![vec![0.25, 0.2, 0.2], vec![0.2, 0.25, 0.2], vec![0.2, 0.2, 0.25]];
    let p = build_decomposable_init(&spec, 12, 0.01, &mu0, 0.2)?;
    let rep = check_decomposability(&p, &spec, 1e-10);
    let (st, _) = extract_spectra(&p, &spec, 1e-10);
    let round = (st.omega_bar.add_scalar(-0.01)).amax().max((0..3).map(|h| (st.mu[(h, h)] - 0.25).abs()).fold(0.0, f64::max));
    Ok((rep.max_residual() <= 1e-12 && round <= 1e-14, format!("residual {:.1e}, round trip {round:.1e}", rep.max_residual())))
}

fn check_water_filling(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    let spec = TaskSpec::homogeneous(1, 10, 1.0, 0.0)?;
    let wf = solve_water_filling(&spec, 100, default_budget_cap(100))?;
    let ok = (wf.b_star - 1.0).abs() <= 1e-6 && (wf.value - 0.2137).abs() <= 1e-4;
    let hom = solve_water_filling(&TaskSpec::homogeneous(3, 5, 1.0, 0.0)?, 100, default_budget_cap(100))?;
    let spread = hom.b.iter().cloned().fold(f64::MIN, f64::max) - hom.b.iter().cloned().fold(f64::MAX, f64::min);
    Ok((ok && spread <= 1e-9, format!("B* {:.8}, value {:.6}, homogeneous spread {spread:.1e}", wf.b_star, wf.value)))
}

fn check_fixed_point(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    let spec = TaskSpec::homogeneous(1, 10, 1.0, 0.0)?;
    let (w, m) = TaskParams::of(&spec, 0).fixed_point(100);
    let ok = (w - 0.31623).abs() < 1e-5 && (m - 2.486).abs() < 1e-3;
    Ok((ok, format!("ω̄* {w:.5}, μ* {m:.4}")))
}

fn check_uniform_moment(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    let v = inner_moment_mc(&Gram::same(0.0), 1000, 10, 1)?;
    Ok((v.value == 1.0 / 1000.0, format!("{}", v.value)))
}

fn check_stein(seed: u64) -> Result<(bool, String), attnlab::Error> {
    let (w, _, q) = stein_inputs(4, 1.0, seed);
    let c = stein_first_moment(&w, &q, 50, 20_000, seed)?;
    Ok((c.max_z() <= 4.0, format!("max z {:.2}", c.max_z())))
}

fn check_graph(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    use attnlab::moments_lab::{graph_partial, PolyGraph, Which};
    let mut count = 0;
    let mut ok = true;
    for a in 0..=2u32 {
        for b in 0..=2u32 {
            for edge in [false, true] {
                let edges = if edge { vec![(0, 1)] } else { vec![] };
                let g = PolyGraph::with_edges(vec![(a, b), (1, 0)], edges);
                let k = g.effective_order();
                for u in 0..2 {
                    for which in [Which::P, Which::PTilde] {
                        for t in graph_partial(&g, u, which) {
                            ok &= t.graph.effective_order() >= k;
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((ok, format!("{count} derivative terms keep or raise the effective order")))
}

fn check_transfer(seed: u64) -> Result<(bool, String), attnlab::Error> {
    let f = HermiteSpec::constant(5, 2.0)?;
    let t = nonlinear_transfer(&f, 40, &[1.0; 5], 1.0, 500, seed)?;
    let gap = (t.mc.value - t.prediction).abs();
    let spec = TaskSpec::homogeneous(1, 5, 1.0, 0.0)?;
    let lg = length_gen_loss(&spec, 50, 50, 100, seed)?;
    Ok((gap <= 1e-12 * t.prediction && lg.mismatch == 0.0, format!("constant gap {gap:.1e}")))
}

fn check_mmse(_seed: u64) -> Result<(bool, String), attnlab::Error> {
    let (v, _) = mmse_asymptotic(0.5, 0.01, 1, 0.5, 1.0, MmseConvention::Integral)?;
    let target = 0.5 * 0.01;
    let rel = (v / target - 1.0).abs();
    Ok((rel <= 0.02, format!("variance / σ²d/L − 1 = {rel:.4}")))
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("hermite_recurrence", check_hermite),
    ("gradient_finite_difference", check_gradient),
    ("decomposable_init", check_init),
    ("water_filling_single_task", check_water_filling),
    ("spectral_fixed_point", check_fixed_point),
    ("uniform_inner_moment", check_uniform_moment),
    ("stein_first_moment", check_stein),
    ("graph_derivative_order", check_graph),
    ("transfer_constant_and_length", check_transfer),
    ("mmse_small_ratio", check_mmse),
];

/// Runs the quick invariant suite.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| match f(seed) {
            Ok((pass, detail)) => CheckResult { name: name.to_string(), pass, detail },
            Err(e) => CheckResult { name: name.to_string(), pass: false, detail: e.to_string() },
        })
        .collect()
}

fn check(cfg: Option<&Config>, ctx: &RunContext) -> Result<Report, CliError> {
    let mut run = Run::start(Command::Check, cfg, ctx)?;
    let results = run_checks(run.seed);
    run.out.json("check.json", "attnlab.check/1", &results)?;
    run.finish()?;
    let failed = results.iter().filter(|r| !r.pass).count();
    let lines = results
        .iter()
        .map(|r| format!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail))
        .collect();
    let failure = (failed > 0).then(|| CliError::Numerical(format!("{failed} invariant check(s) failed")));
    Ok(Report { lines, failure })
}
