//! Graph-induced polynomials in attention probabilities and their effective order.
//!
//! A vertex is an index variable carrying weights `(a_v, b_v)`; an edge
//! `(v, v')` is the constraint `δ_{vv'}`. Given an index assignment
//! `ι : V → [L]`, the induced polynomial is
//! `Π_v p_{ι(v)}^{a_v} p̃_{ι(v)}^{b_v} · Π_{(v,v')} δ_{ι(v)ι(v')}`.
//! Summing over all assignments gives a product over connected components of
//! `Σ_l p_l^{A_c} p̃_l^{B_c}`, of order `L^{−κ}` for the effective order `κ`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyGraph {
    /// `(a_v, b_v)` per vertex.
    pub weights: Vec<(u32, u32)>,
    /// Undirected edges; self-loops and repeats allowed.
    pub edges: Vec<(usize, usize)>,
}

/// Which probability vector a derivative acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    P,
    PTilde,
}

/// One term `sign · coeff · f_graph` of a derivative expansion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub sign: i8,
    pub coeff: u32,
    pub graph: PolyGraph,
}

/// Vertex weights plus a vertex partition.
pub type ClassKey = (Vec<(u32, u32)>, Vec<Vec<usize>>);

/// Every graph on `n ≤ 3` vertices with `a_v, b_v ≤ max_w` and any subset of
/// the six possible edges (self-loops included).
pub fn all_graphs(n: usize, max_w: u32) -> Vec<PolyGraph> {
    const PAIRS3: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2)];
    assert!(n <= 3, "enumeration covers at most three vertices");
    let pairs: Vec<(usize, usize)> = PAIRS3.iter().copied().filter(|&(u, v)| u < n && v < n).collect();
    let opts = (max_w + 1) * (max_w + 1);
    let mut out = Vec::new();
    for code in 0..opts.pow(n as u32) {
        let mut c = code;
        let weights: Vec<(u32, u32)> = (0..n)
            .map(|_| {
                let w = c % opts;
                c /= opts;
                (w % (max_w + 1), w / (max_w + 1))
            })
            .collect();
        for mask in 0..(1u32 << pairs.len()) {
            let edges = (0..pairs.len()).filter(|k| mask >> k & 1 == 1).map(|k| pairs[k]).collect();
            out.push(PolyGraph::with_edges(weights.clone(), edges));
        }
    }
    out
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl PolyGraph {
    pub fn new(weights: Vec<(u32, u32)>) -> Self {
        PolyGraph { weights, edges: Vec::new() }
    }

    pub fn with_edges(weights: Vec<(u32, u32)>, edges: Vec<(usize, usize)>) -> Self {
        let g = PolyGraph { weights, edges };
        assert!(g.edges.iter().all(|&(u, v)| u < g.n() && v < g.n()), "edge endpoint out of range");
        g
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn add_vertex(&mut self, a: u32, b: u32) -> usize {
        self.weights.push((a, b));
        self.n() - 1
    }

    pub fn add_edge(&mut self, u: usize, v: usize) {
        assert!(u < self.n() && v < self.n(), "edge endpoint out of range");
        self.edges.push((u, v));
    }

    fn vertex_weight(&self, v: usize) -> u32 {
        self.weights[v].0 + self.weights[v].1
    }

    /// `W(G) = Σ_v (a_v + b_v)`.
    pub fn total_weight(&self) -> u32 {
        (0..self.n()).map(|v| self.vertex_weight(v)).sum()
    }

    /// Total weight of a vertex subset.
    pub fn weight_of(&self, set: &[usize]) -> u32 {
        set.iter().map(|&v| self.vertex_weight(v)).sum()
    }

    /// Connected components, each sorted, ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n()).collect();
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..self.n() {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        groups.into_values().collect()
    }

    /// `R(u)`: the vertices reachable from `u`, including `u`.
    pub fn reachable(&self, u: usize) -> Vec<usize> {
        self.components().into_iter().find(|c| c.contains(&u)).unwrap_or_default()
    }

    /// `CC_{≥n}(G)`.
    pub fn components_ge(&self, n: u32) -> Vec<Vec<usize>> {
        self.components().into_iter().filter(|c| self.weight_of(c) >= n).collect()
    }

    /// `κ(G) = W(G) − |CC_{≥1}(G)|`.
    pub fn effective_order(&self) -> u32 {
        self.total_weight() - self.components_ge(1).len() as u32
    }

    /// Weights and the full component partition; two graphs induce the same
    /// polynomial exactly when their keys agree.
    pub fn poly_key(&self) -> ClassKey {
        (self.weights.clone(), self.components())
    }

    /// Same vertex weights and same weighted components. Edges between
    /// weightless vertices are invisible to this relation even though they
    /// constrain free indices, so it is coarser than polynomial identity.
    pub fn equivalent(&self, other: &PolyGraph) -> bool {
        self.weights == other.weights && self.components_ge(1) == other.components_ge(1)
    }

    /// `f_G` at index assignment `assign`.
    pub fn eval_at(&self, p: &[f64], pt: &[f64], assign: &[usize]) -> f64 {
        if self.edges.iter().any(|&(u, v)| assign[u] != assign[v]) {
            return 0.0;
        }
        self.weights
            .iter()
            .zip(assign)
            .map(|(&(a, b), &l)| p[l].powi(a as i32) * pt[l].powi(b as i32))
            .product()
    }

    /// `Σ_ι f_G(ι)` over all `L^{|V|}` assignments, as a product over components.
    pub fn eval_summed(&self, p: &[f64], pt: &[f64]) -> f64 {
        self.components()
            .iter()
            .map(|c| {
                let a: i32 = c.iter().map(|&v| self.weights[v].0 as i32).sum();
                let b: i32 = c.iter().map(|&v| self.weights[v].1 as i32).sum();
                p.iter().zip(pt).map(|(x, y)| x.powi(a) * y.powi(b)).sum::<f64>()
            })
            .product()
    }
}

/// Effective order of `‖p‖_a^b`, i.e. `(a − 1)·b/a`.
pub fn norm_power_order(a: f64, b: f64) -> f64 {
    (a - 1.0) * b / a
}

fn weight_on(g: &PolyGraph, v: usize, which: Which) -> u32 {
    match which {
        Which::P => g.weights[v].0,
        Which::PTilde => g.weights[v].1,
    }
}

fn bump(g: &mut PolyGraph, v: usize, which: Which) {
    match which {
        Which::P => g.weights[v].0 += 1,
        Which::PTilde => g.weights[v].1 += 1,
    }
}

/// `∂_u f_G` (or `∂̃_u`): one edge term `+a_s·(G + (u, s))` per vertex with
/// `a_s > 0`, and `−(Σ_s a_s)·(G with a_u + 1)`.
pub fn graph_partial(g: &PolyGraph, u: usize, which: Which) -> Vec<Term> {
    assert!(u < g.n(), "vertex {u} out of range");
    let mut out = Vec::new();
    let mut total = 0;
    for s in 0..g.n() {
        let a = weight_on(g, s, which);
        if a == 0 {
            continue;
        }
        total += a;
        let mut h = g.clone();
        h.edges.push((u, s));
        out.push(Term { sign: 1, coeff: a, graph: h });
    }
    if total > 0 {
        let mut h = g.clone();
        bump(&mut h, u, which);
        out.push(Term { sign: -1, coeff: total, graph: h });
    }
    out
}

/// Keep the terms with `κ ≤ k`.
pub fn prune(terms: &[Term], k: u32) -> Vec<Term> {
    terms.iter().filter(|t| t.graph.effective_order() <= k).cloned().collect()
}

/// Lowest-order part of `∂_u f_G`, read off from the reachable set of `u`:
/// when `W(R(u)) = 0` every term keeps the order of `G`; otherwise only
/// `(Σ_{s ∈ R(u)} a_s)·f_G` does.
pub fn low_order_partial(g: &PolyGraph, u: usize, which: Which) -> Vec<Term> {
    let r = g.reachable(u);
    if g.weight_of(&r) == 0 {
        return graph_partial(g, u, which);
    }
    let coeff: u32 = r.iter().map(|&s| weight_on(g, s, which)).sum();
    if coeff == 0 {
        return Vec::new();
    }
    vec![Term { sign: 1, coeff, graph: g.clone() }]
}

/// Signed coefficient per distinct polynomial, zero entries dropped.
pub fn collect(terms: &[Term]) -> BTreeMap<ClassKey, i64> {
    let mut m: BTreeMap<ClassKey, i64> = BTreeMap::new();
    for t in terms {
        *m.entry(t.graph.poly_key()).or_default() += t.sign as i64 * t.coeff as i64;
    }
    m.retain(|_, c| *c != 0);
    m
}

/// `Σ sign·coeff·f_G(ι)` over a term list.
pub fn eval_terms_at(terms: &[Term], p: &[f64], pt: &[f64], assign: &[usize]) -> f64 {
    terms.iter().map(|t| t.sign as f64 * t.coeff as f64 * t.graph.eval_at(p, pt, assign)).sum()
}
