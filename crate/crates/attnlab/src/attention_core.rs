//! One-layer multi-head softmax attention.
//!
//! Head `h` reads the prompt `Z = [X; Y]` with probabilities
//! `p_h = softmax(Zᵀ K_hᵀ Q_h z_q / √d_e)` and writes `U_h Z p_h`, where
//! `U_h = O_h V_h`. The prediction is the sum over heads.

use crate::data_model::{axpy, dot, Draw, TaskSpec};
use crate::rng::{self, Stream};
use crate::stats::{MomentEstimate, Welford};
use crate::{invalid, Error, Result};
use nalgebra::{DMatrix, DVector};

/// Per-head projections: `O` is `d_y × d_e`; `V`, `K`, `Q` are `d_e × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub o: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// Full parameter set of the multi-head model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub d: usize,
    pub d_y: usize,
    pub d_e: usize,
    pub heads: Vec<Head>,
}

/// Combined weights of one head: `U = OV` and `W = KᵀQ/√d_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// Combined weights of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedWeights {
    pub d: usize,
    pub d_y: usize,
    pub heads: Vec<HeadWeights>,
}

impl HeadWeights {
    pub fn u_x(&self, d: usize) -> DMatrix<f64> {
        self.u.columns(0, d).into_owned()
    }
    pub fn u_y(&self, d: usize) -> DMatrix<f64> {
        let dy = self.u.nrows();
        self.u.columns(d, dy).into_owned()
    }
    pub fn w_x(&self, d: usize) -> DMatrix<f64> {
        self.w.view((0, 0), (d, d)).into_owned()
    }
    /// Label rows of the query-facing columns, `d_y × d`.
    pub fn w_y(&self, d: usize) -> DMatrix<f64> {
        let dy = self.w.nrows() - d;
        self.w.view((d, 0), (dy, d)).into_owned()
    }
}

impl AttentionParams {
    /// All-zero parameters.
    pub fn zeros(h: usize, d: usize, d_y: usize, d_e: usize) -> Self {
        let dd = d + d_y;
        let head = Head {
            o: DMatrix::zeros(d_y, d_e),
            v: DMatrix::zeros(d_e, dd),
            k: DMatrix::zeros(d_e, dd),
            q: DMatrix::zeros(d_e, dd),
        };
        AttentionParams { d, d_y, d_e, heads: vec![head; h] }
    }

    /// Independent N(0, scale²) entries.
    pub fn random(h: usize, d: usize, d_y: usize, d_e: usize, scale: f64, rng: &mut Stream) -> Self {
        let mut p = AttentionParams::zeros(h, d, d_y, d_e);
        p.for_each_mut(|x| *x = scale * rng::normal(rng));
        p
    }

    pub fn h(&self) -> usize {
        self.heads.len()
    }

    /// Prompt token dimension `D = d + d_y`.
    pub fn big_d(&self) -> usize {
        self.d + self.d_y
    }

    pub fn validate(&self) -> Result<()> {
        let dd = self.big_d();
        if self.heads.is_empty() {
            return invalid("at least one head is required");
        }
        if self.d_e < self.d {
            return invalid(format!("embedding dimension d_e = {} is below d = {}", self.d_e, self.d));
        }
        for (i, hd) in self.heads.iter().enumerate() {
            let ok = hd.o.shape() == (self.d_y, self.d_e)
                && hd.v.shape() == (self.d_e, dd)
                && hd.k.shape() == (self.d_e, dd)
                && hd.q.shape() == (self.d_e, dd);
            if !ok {
                return invalid(format!("head {i} has inconsistent shapes"));
            }
        }
        Ok(())
    }

    pub fn combined(&self) -> CombinedWeights {
        let s = 1.0 / (self.d_e as f64).sqrt();
        CombinedWeights {
            d: self.d,
            d_y: self.d_y,
            heads: self
                .heads
                .iter()
                .map(|hd| HeadWeights { u: &hd.o * &hd.v, w: hd.k.transpose() * &hd.q * s })
                .collect(),
        }
    }

    /// Visit every parameter entry (head by head, O, V, K, Q).
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for hd in &mut self.heads {
            for m in [&mut hd.o, &mut hd.v, &mut hd.k, &mut hd.q] {
                m.iter_mut().for_each(&mut f);
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for hd in &self.heads {
            for m in [&hd.o, &hd.v, &hd.k, &hd.q] {
                out.extend_from_slice(m.as_slice());
            }
        }
        out
    }

    pub fn set_flat(&mut self, x: &[f64]) {
        let mut it = x.iter();
        self.for_each_mut(|v| *v = *it.next().expect("flat vector too short"));
    }

    /// `self += a · other` entrywise.
    pub fn add_scaled(&mut self, other: &AttentionParams, a: f64) {
        for (h, g) in self.heads.iter_mut().zip(&other.heads) {
            h.o += &g.o * a;
            h.v += &g.v * a;
            h.k += &g.k * a;
            h.q += &g.q * a;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(|h| [&h.o, &h.v, &h.k, &h.q].iter().all(|m| m.iter().all(|x| x.is_finite())))
    }

    /// Conjugate by the prompt rotation `R = blockdiag(Φ, Ψ)`: `K, Q, V ↦ ·R`, `O ↦ ΨᵀO`.
    ///
    /// With prompts mapped to `Rᵀ Z` the scores are unchanged and the output is `Ψᵀ ŷ`.
    pub fn conjugate(&self, phi: &DMatrix<f64>, psi: &DMatrix<f64>) -> AttentionParams {
        let (d, dy) = (self.d, self.d_y);
        let mut r = DMatrix::zeros(d + dy, d + dy);
        r.view_mut((0, 0), (d, d)).copy_from(phi);
        r.view_mut((d, d), (dy, dy)).copy_from(psi);
        let mut out = self.clone();
        for hd in &mut out.heads {
            hd.k = &hd.k * &r;
            hd.q = &hd.q * &r;
            hd.v = &hd.v * &r;
            hd.o = psi.transpose() * &hd.o;
        }
        out
    }
}

/// Scores and probabilities of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProbs {
    pub s: DVector<f64>,
    pub p: DVector<f64>,
}

/// Max-shifted softmax in place; returns false on non-finite scores.
pub fn softmax_in_place(s: &mut [f64]) -> bool {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return false;
    }
    let mut tot = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        tot += *v;
    }
    let inv = 1.0 / tot;
    s.iter_mut().for_each(|v| *v *= inv);
    true
}

/// Per-head scores `s_h = Zᵀ K_hᵀ Q_h z_q / √d_e` and probabilities `softmax(s_h)`.
pub fn attention_probs(params: &AttentionParams, z: &DMatrix<f64>, z_q: &DVector<f64>) -> Result<Vec<HeadProbs>> {
    params.validate()?;
    let dd = params.big_d();
    if z.nrows() != dd || z_q.len() != dd || z.ncols() == 0 {
        return invalid(format!("prompt must be {dd} × L with L ≥ 1 and query of length {dd}"));
    }
    let cw = params.combined();
    cw.heads
        .iter()
        .map(|hw| {
            let s = z.transpose() * (&hw.w * z_q);
            let mut p = s.clone();
            if !softmax_in_place(p.as_mut_slice()) {
                return Err(Error::Numerical("attention scores overflowed".into()));
            }
            Ok(HeadProbs { s, p })
        })
        .collect()
}

/// Prediction `ŷ_q = Σ_h O_h V_h Z p_h`.
pub fn forward(params: &AttentionParams, z: &DMatrix<f64>, z_q: &DVector<f64>) -> Result<DVector<f64>> {
    let probs = attention_probs(params, z, z_q)?;
    let mut y = DVector::zeros(params.d_y);
    for (hd, hp) in params.heads.iter().zip(&probs) {
        y += &hd.o * (&hd.v * (z * &hp.p));
    }
    Ok(y)
}

/// Flat per-head weights for the Monte Carlo inner loops.
pub(crate) struct Kernel {
    pub d: usize,
    pub dy: usize,
    pub h: usize,
    /// Per head, the query-facing columns `W[:, :d]`, column-major `D × d`.
    wq: Vec<Vec<f64>>,
    /// Per head, `U` row-major `d_y × D`.
    u: Vec<Vec<f64>>,
}

/// Scratch buffers for one sample.
pub(crate) struct Scratch {
    pub p: Vec<f64>,
    pub zp: Vec<f64>,
    pub r: Vec<f64>,
    w: Vec<f64>,
    v: Vec<f64>,
    zg: Vec<f64>,
}

impl Kernel {
    pub fn new(cw: &CombinedWeights) -> Self {
        let (d, dy) = (cw.d, cw.d_y);
        let dd = d + dy;
        Kernel {
            d,
            dy,
            h: cw.heads.len(),
            wq: cw.heads.iter().map(|hw| hw.w.columns(0, d).iter().copied().collect()).collect(),
            u: cw
                .heads
                .iter()
                .map(|hw| (0..dy).flat_map(|j| (0..dd).map(move |k| hw.u[(j, k)])).collect())
                .collect(),
        }
    }

    pub fn scratch(&self, len: usize) -> Scratch {
        let dd = self.d + self.dy;
        Scratch {
            p: vec![0.0; self.h * len],
            zp: vec![0.0; self.h * dd],
            r: vec![0.0; self.dy],
            w: vec![0.0; dd],
            v: vec![0.0; dd],
            zg: vec![0.0; dd],
        }
    }

    /// Fills `p`, `Zp` per head and the residual `r = ŷ − y_q`; false on overflow.
    pub fn forward(&self, draw: &Draw, sc: &mut Scratch) -> bool {
        let (d, dy, len) = (self.d, self.dy, draw.len);
        let dd = d + dy;
        sc.r.iter_mut().zip(&draw.y_q).for_each(|(r, y)| *r = -y);
        for h in 0..self.h {
            let wq = &self.wq[h];
            sc.w.iter_mut().for_each(|x| *x = 0.0);
            for (c, &qc) in draw.q.iter().enumerate() {
                if qc != 0.0 {
                    axpy(qc, &wq[c * dd..(c + 1) * dd], &mut sc.w);
                }
            }
            let p = &mut sc.p[h * len..(h + 1) * len];
            for (l, pl) in p.iter_mut().enumerate() {
                *pl = dot(draw.token(l), &sc.w);
            }
            if !softmax_in_place(p) {
                return false;
            }
            let zp = &mut sc.zp[h * dd..(h + 1) * dd];
            zp.iter_mut().for_each(|x| *x = 0.0);
            for (l, &pl) in p.iter().enumerate() {
                axpy(pl, draw.token(l), zp);
            }
            let u = &self.u[h];
            for j in 0..dy {
                sc.r[j] += dot(&u[j * dd..(j + 1) * dd], zp);
            }
        }
        true
    }

    /// Adds this sample's `A_h` (`D × d`, column-major) and `B_h` (`d_y × D`,
    /// column-major) into the accumulators; squares go to `*_sq` when given.
    pub fn backward(
        &self,
        draw: &Draw,
        sc: &mut Scratch,
        a_acc: &mut [f64],
        b_acc: &mut [f64],
        mut sq: Option<(&mut [f64], &mut [f64])>,
    ) {
        let (d, dy, len) = (self.d, self.dy, draw.len);
        let dd = d + dy;
        let (na, nb) = (dd * d, dy * dd);
        for h in 0..self.h {
            let zp = &sc.zp[h * dd..(h + 1) * dd];
            let b = &mut b_acc[h * nb..(h + 1) * nb];
            for k in 0..dd {
                for j in 0..dy {
                    b[k * dy + j] += sc.r[j] * zp[k];
                }
            }
            if let Some((_, bsq)) = sq.as_mut() {
                let bsq = &mut bsq[h * nb..(h + 1) * nb];
                for k in 0..dd {
                    for j in 0..dy {
                        let x = sc.r[j] * zp[k];
                        bsq[k * dy + j] += x * x;
                    }
                }
            }
            let u = &self.u[h];
            sc.v.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..dy {
                axpy(sc.r[j], &u[j * dd..(j + 1) * dd], &mut sc.v);
            }
            let p = &sc.p[h * len..(h + 1) * len];
            // Zg with g_l = p_l (a_l − pᵀa), a_l = z_lᵀ v
            let mut pa = 0.0;
            sc.zg.iter_mut().for_each(|x| *x = 0.0);
            for (l, &pl) in p.iter().enumerate() {
                let al = dot(draw.token(l), &sc.v);
                pa += pl * al;
                axpy(pl * al, draw.token(l), &mut sc.zg);
            }
            axpy(-pa, zp, &mut sc.zg);
            let a = &mut a_acc[h * na..(h + 1) * na];
            for (c, &qc) in draw.q.iter().enumerate() {
                axpy(qc, &sc.zg, &mut a[c * dd..(c + 1) * dd]);
            }
            if let Some((asq, _)) = sq.as_mut() {
                let asq = &mut asq[h * na..(h + 1) * na];
                for (c, &qc) in draw.q.iter().enumerate() {
                    for k in 0..dd {
                        let x = qc * sc.zg[k];
                        asq[c * dd + k] += x * x;
                    }
                }
            }
        }
    }
}

/// Squared prediction error of one sample, halved when `half`.
fn sample_loss(sc: &Scratch, half: bool) -> f64 {
    let e: f64 = sc.r.iter().map(|r| r * r).sum();
    if half {
        0.5 * e
    } else {
        e
    }
}

/// Monte Carlo population loss `E‖ŷ_q − y_q‖²` (times ½ when `half`).
pub fn population_loss(
    params: &AttentionParams,
    spec: &TaskSpec,
    len: usize,
    n_mc: usize,
    seed: u64,
    half: bool,
) -> Result<MomentEstimate> {
    population_loss_keyed(params, spec, len, n_mc, seed, &[], half)
}

pub(crate) fn check_shapes(params: &AttentionParams, spec: &TaskSpec, len: usize, n_mc: usize) -> Result<()> {
    params.validate()?;
    if params.d != spec.d() || params.d_y != spec.d_y() {
        return invalid("parameter shapes do not match the task spec");
    }
    if len == 0 || n_mc == 0 {
        return invalid("L and n_mc must be at least 1");
    }
    Ok(())
}

pub(crate) fn population_loss_keyed(
    params: &AttentionParams,
    spec: &TaskSpec,
    len: usize,
    n_mc: usize,
    seed: u64,
    key: &[u64],
    half: bool,
) -> Result<MomentEstimate> {
    check_shapes(params, spec, len, n_mc)?;
    let kernel = Kernel::new(&params.combined());
    let out = rng::chunked(
        n_mc,
        seed,
        key,
        |rng, count| {
            let mut draw = Draw::new(spec, len);
            let mut sc = kernel.scratch(len);
            let mut w = Welford::default();
            for _ in 0..count {
                draw.sample(spec, rng);
                if !kernel.forward(&draw, &mut sc) {
                    return Err(Error::Numerical("attention scores overflowed".into()));
                }
                w.push(sample_loss(&sc, half));
            }
            Ok(w)
        },
        |a, b| Ok(a?.merge(b?)),
    )
    .expect("n_mc ≥ 1")?;
    Ok(out.estimate(if half { "mc-half" } else { "mc" }))
}
