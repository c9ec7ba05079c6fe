//! Multi-task linear-regression prompts.
//!
//! Task `i` owns a block of `d_i` covariate coordinates and one label
//! coordinate. The coefficient matrix is
//! `G = d^{-1/2} Φ blockdiag(g_1, …, g_I) Ψᵀ` with `g_i ~ N(0, λ_i I)`,
//! labels are `Y = GᵀX + ε` and the target is `y_q = Gᵀq`.

use crate::rng::{self, Stream};
use crate::{invalid, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// How the task rotations (Φ, Ψ) are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    Identity,
    Random(u64),
    /// Supplied directly through [`TaskSpec::with_rotations`].
    Custom,
}

impl Rotation {
    pub fn parse(s: &str) -> Result<Rotation> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Rotation::Identity);
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .trim()
                .parse::<u64>()
                .map(Rotation::Random)
                .or_else(|_| invalid(format!("rotation seed is not an integer: {seed:?}")));
        }
        invalid(format!("rotation must be \"identity\" or \"random:<seed>\", got {s:?}"))
    }

    pub fn label(&self) -> String {
        match self {
            Rotation::Identity => "identity".into(),
            Rotation::Random(s) => format!("random:{s}"),
            Rotation::Custom => "custom".into(),
        }
    }
}

/// Flat configuration form of a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(rename = "I")]
    pub i: usize,
    pub dims: Vec<usize>,
    pub signals: Vec<f64>,
    pub noise_var: f64,
    #[serde(default = "default_rotation")]
    pub rotation: String,
}

fn default_rotation() -> String {
    "identity".into()
}

/// A multi-task in-context regression problem.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub dims: Vec<usize>,
    pub signals: Vec<f64>,
    pub noise_var: f64,
    pub rotation: Rotation,
    pub phi_rot: DMatrix<f64>,
    pub psi_rot: DMatrix<f64>,
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Stream) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    rng::fill_normal(rng, a.as_mut_slice());
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl TaskSpec {
    pub fn new(dims: Vec<usize>, signals: Vec<f64>, noise_var: f64, rotation: Rotation) -> Result<Self> {
        if dims.is_empty() {
            return invalid("at least one task is required");
        }
        if dims.len() != signals.len() {
            return invalid(format!(
                "dims has {} entries but signals has {}",
                dims.len(),
                signals.len()
            ));
        }
        if dims.contains(&0) {
            return invalid("task dimensions must be positive");
        }
        if signals.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return invalid("signals must be finite and nonnegative");
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return invalid("noise_var must be finite and nonnegative");
        }
        let d: usize = dims.iter().sum();
        let i = dims.len();
        let (phi_rot, psi_rot) = match rotation {
            Rotation::Identity | Rotation::Custom => (DMatrix::identity(d, d), DMatrix::identity(i, i)),
            Rotation::Random(seed) => (
                random_orthogonal(d, &mut rng::stream(seed, &[0])),
                random_orthogonal(i, &mut rng::stream(seed, &[1])),
            ),
        };
        Ok(TaskSpec { dims, signals, noise_var, rotation, phi_rot, psi_rot })
    }

    /// `I` identical tasks of dimension `d_i` and signal `lambda`.
    pub fn homogeneous(i: usize, d_i: usize, lambda: f64, noise_var: f64) -> Result<Self> {
        TaskSpec::new(vec![d_i; i], vec![lambda; i], noise_var, Rotation::Identity)
    }

    pub fn from_config(c: &TaskConfig) -> Result<Self> {
        if c.i != c.dims.len() || c.i != c.signals.len() {
            return invalid(format!(
                "I = {} but dims has {} and signals has {} entries",
                c.i,
                c.dims.len(),
                c.signals.len()
            ));
        }
        TaskSpec::new(c.dims.clone(), c.signals.clone(), c.noise_var, Rotation::parse(&c.rotation)?)
    }

    pub fn to_config(&self) -> TaskConfig {
        TaskConfig {
            i: self.tasks(),
            dims: self.dims.clone(),
            signals: self.signals.clone(),
            noise_var: self.noise_var,
            rotation: self.rotation.label(),
        }
    }

    /// Replace the rotations (must be orthogonal).
    pub fn with_rotations(mut self, phi: DMatrix<f64>, psi: DMatrix<f64>) -> Result<Self> {
        if phi.shape() != (self.d(), self.d()) || psi.shape() != (self.d_y(), self.d_y()) {
            return invalid("rotation shapes do not match the spec");
        }
        for (m, name) in [(&phi, "Φ"), (&psi, "Ψ")] {
            let n = m.nrows();
            if (m.transpose() * m - DMatrix::<f64>::identity(n, n)).amax() > 1e-10 {
                return invalid(format!("{name} is not orthogonal"));
            }
        }
        self.phi_rot = phi;
        self.psi_rot = psi;
        self.rotation = Rotation::Custom;
        Ok(self)
    }

    /// Task count `I`.
    pub fn tasks(&self) -> usize {
        self.dims.len()
    }

    /// Covariate dimension `d = Σ d_i`.
    pub fn d(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Label dimension, equal to the task count.
    pub fn d_y(&self) -> usize {
        self.dims.len()
    }

    /// First covariate coordinate of each task.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.dims
            .iter()
            .map(|&di| {
                let o = acc;
                acc += di;
                o
            })
            .collect()
    }

    /// Task index owning each covariate coordinate.
    pub fn task_of_coord(&self) -> Vec<usize> {
        self.dims.iter().enumerate().flat_map(|(i, &di)| std::iter::repeat_n(i, di)).collect()
    }

    /// Per-task SNR_i = λ_i d_i / (d σ²); infinite when σ² = 0.
    pub fn snr(&self) -> Vec<f64> {
        let d = self.d() as f64;
        self.dims
            .iter()
            .zip(&self.signals)
            .map(|(&di, &l)| {
                if self.noise_var == 0.0 {
                    f64::INFINITY
                } else {
                    l * di as f64 / (d * self.noise_var)
                }
            })
            .collect()
    }

    /// Per-task φ_i = 1 + SNR_i⁻¹, with φ_i = 1 when σ² = 0.
    pub fn phi(&self) -> Vec<f64> {
        self.snr().into_iter().map(|s| if s.is_infinite() { 1.0 } else { 1.0 + 1.0 / s }).collect()
    }

    /// True when all tasks share dimension and signal.
    pub fn is_homogeneous(&self) -> bool {
        self.dims.iter().all(|&x| x == self.dims[0]) && self.signals.iter().all(|&x| x == self.signals[0])
    }

    /// True when both Φ and Ψ are exactly the identity.
    pub fn is_identity_rotation(&self) -> bool {
        let eye = |m: &DMatrix<f64>| {
            (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| m[(i, j)] == if i == j { 1.0 } else { 0.0 }))
        };
        eye(&self.phi_rot) && eye(&self.psi_rot)
    }
}

/// Closed form of E‖y_q‖² = Σ λ_i d_i / d.
pub fn target_energy(spec: &TaskSpec) -> f64 {
    let d = spec.d() as f64;
    spec.dims.iter().zip(&spec.signals).map(|(&di, &l)| l * di as f64).sum::<f64>() / d
}

/// Draws `G = d^{-1/2} Φ blockdiag(g_i) Ψᵀ`.
pub fn sample_coefficient(spec: &TaskSpec, rng: &mut Stream) -> DMatrix<f64> {
    let d = spec.d();
    let dy = spec.d_y();
    let mut g = vec![0.0; d * dy];
    sample_coefficient_into(spec, rng, &mut g);
    DMatrix::from_column_slice(d, dy, &g)
}

/// Column-major `d × d_y` coefficient draw written into `out`.
pub(crate) fn sample_coefficient_into(spec: &TaskSpec, rng: &mut Stream, out: &mut [f64]) {
    let d = spec.d();
    let dy = spec.d_y();
    let scale = 1.0 / (d as f64).sqrt();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut off = 0;
    for (i, (&di, &l)) in spec.dims.iter().zip(&spec.signals).enumerate() {
        let sd = l.sqrt() * scale;
        for k in 0..di {
            out[i * d + off + k] = sd * rng::normal(rng);
        }
        off += di;
    }
    if !spec.is_identity_rotation() {
        let block = DMatrix::from_column_slice(d, dy, out);
        let g = &spec.phi_rot * block * spec.psi_rot.transpose();
        out.copy_from_slice(g.as_slice());
    }
}

/// One prompt: covariates, labels, query and the coefficient that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSample {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub q: DVector<f64>,
    pub y_q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub eps: DMatrix<f64>,
}

impl ContextSample {
    /// Stacked prompt `Z = [X; Y]`, shape `D × L`.
    pub fn z(&self) -> DMatrix<f64> {
        let (d, l) = self.x.shape();
        let dy = self.y.nrows();
        let mut z = DMatrix::zeros(d + dy, l);
        z.rows_mut(0, d).copy_from(&self.x);
        z.rows_mut(d, dy).copy_from(&self.y);
        z
    }

    /// Query token `z_q = [q; 0]`.
    pub fn z_q(&self) -> DVector<f64> {
        let d = self.q.len();
        let mut z = DVector::zeros(d + self.y_q.len());
        z.rows_mut(0, d).copy_from(&self.q);
        z
    }
}

/// Flat buffers for one prompt, reused across Monte Carlo draws.
///
/// `z` is the column-major `D × L` prompt, so each token `(x_l, y_l)` is a
/// contiguous slice.
#[derive(Clone, Debug)]
pub struct Draw {
    pub d: usize,
    pub dy: usize,
    pub len: usize,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub q: Vec<f64>,
    pub y_q: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl Draw {
    pub fn new(spec: &TaskSpec, len: usize) -> Self {
        let d = spec.d();
        let dy = spec.d_y();
        Draw {
            d,
            dy,
            len,
            g: vec![0.0; d * dy],
            z: vec![0.0; (d + dy) * len],
            eps: vec![0.0; dy * len],
            q: vec![0.0; d],
            y_q: vec![0.0; dy],
            support: if spec.is_identity_rotation() {
                spec.offsets().iter().zip(&spec.dims).map(|(&o, &di)| (o, o + di)).collect()
            } else {
                vec![(0, d); dy]
            },
        }
    }

    /// Token `l` as a `D`-slice.
    #[inline]
    pub fn token(&self, l: usize) -> &[f64] {
        let dd = self.d + self.dy;
        &self.z[l * dd..(l + 1) * dd]
    }

    /// Fresh draw: G, then X column by column, then q, then ε.
    pub fn sample(&mut self, spec: &TaskSpec, rng: &mut Stream) {
        sample_coefficient_into(spec, rng, &mut self.g);
        let (d, dy) = (self.d, self.dy);
        let dd = d + dy;
        for l in 0..self.len {
            rng::fill_normal(rng, &mut self.z[l * dd..l * dd + d]);
        }
        rng::fill_normal(rng, &mut self.q);
        let sd = spec.noise_var.sqrt();
        if sd > 0.0 {
            rng::fill_normal(rng, &mut self.eps);
            self.eps.iter_mut().for_each(|e| *e *= sd);
        } else {
            self.eps.iter_mut().for_each(|e| *e = 0.0);
        }
        self.fill_labels();
    }

    /// Recompute `Y = GᵀX + ε` and `y_q = Gᵀq` from the stored draws.
    pub fn fill_labels(&mut self) {
        let (d, dy) = (self.d, self.dy);
        let dd = d + dy;
        // column j of G is supported on rows[j]; the whole range unless rotations are trivial
        let rows = &self.support;
        for l in 0..self.len {
            let (x, y) = self.z[l * dd..(l + 1) * dd].split_at_mut(d);
            for j in 0..dy {
                let (a, b) = rows[j];
                y[j] = dot(&self.g[j * d + a..j * d + b], &x[a..b]) + self.eps[l * dy + j];
            }
        }
        for j in 0..dy {
            self.y_q[j] = dot(&self.g[j * d..(j + 1) * d], &self.q);
        }
    }

    pub fn to_sample(&self) -> ContextSample {
        let (d, dy, len) = (self.d, self.dy, self.len);
        let dd = d + dy;
        let x = DMatrix::from_fn(d, len, |r, c| self.z[c * dd + r]);
        let y = DMatrix::from_fn(dy, len, |r, c| self.z[c * dd + d + r]);
        ContextSample {
            x,
            y,
            q: DVector::from_column_slice(&self.q),
            y_q: DVector::from_column_slice(&self.y_q),
            g: DMatrix::from_column_slice(d, dy, &self.g),
            eps: DMatrix::from_column_slice(dy, len, &self.eps),
        }
    }
}

/// Draws one prompt of length `len`.
pub fn sample_context(spec: &TaskSpec, len: usize, rng: &mut Stream) -> Result<ContextSample> {
    if len == 0 {
        return invalid("context length L must be at least 1");
    }
    let mut draw = Draw::new(spec, len);
    draw.sample(spec, rng);
    Ok(draw.to_sample())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
