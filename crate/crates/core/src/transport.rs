//! Discrete optimal transport on the circle and the torus: ground costs,
//! an exact network-simplex solver with a duality certificate, log-domain
//! Sinkhorn, and the closed-form circle `W1`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{circle_dist, compensated_sum, torus_delta, torus_dist, wrap, TORUS_DIAMETER};
use crate::maps::DirectionField;

/// Support-size cap of [`exact_plan`].
pub const EXACT_CAP: usize = 2000;

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted point cloud on the circle (`dim == 1`, second coordinate zero)
/// or the torus (`dim == 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: u8,
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Points are wrapped into `[0, 1)`; weights must be nonnegative and sum to 1.
    pub fn new(dim: u8, points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidInput(format!("dimension {dim} is not 1 or 2")));
        }
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} points with {} weights",
                points.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {w} is negative or not finite")));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        let points = points
            .into_iter()
            .map(|p| if dim == 1 { [wrap(p[0]), 0.0] } else { [wrap(p[0]), wrap(p[1])] })
            .collect();
        Ok(DiscreteMeasure { dim, points, weights })
    }

    /// Like [`DiscreteMeasure::new`] but rescales the weights to unit mass first.
    pub fn normalized(dim: u8, points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        let total = compensated_sum(weights.iter().copied());
        if !(total > 0.0) {
            return Err(Error::InvalidInput("total weight must be positive".into()));
        }
        Self::new(dim, points, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn circle(points: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::new(1, points.iter().map(|&x| [x, 0.0]).collect(), weights)
    }

    pub fn dirac(dim: u8, p: [f64; 2]) -> Self {
        Self::new(dim, vec![p], vec![1.0]).expect("a unit dirac is valid")
    }

    /// Uniform weights on the nodes `i / n` (circle) or `(i / n, j / n)` (torus).
    pub fn uniform_grid(dim: u8, n: usize) -> Self {
        let points: Vec<[f64; 2]> = if dim == 1 {
            (0..n).map(|i| [i as f64 / n as f64, 0.0]).collect()
        } else {
            (0..n * n)
                .map(|k| [(k % n) as f64 / n as f64, (k / n) as f64 / n as f64])
                .collect()
        };
        let w = 1.0 / points.len() as f64;
        let len = points.len();
        DiscreteMeasure {
            dim,
            points,
            weights: vec![w; len],
        }
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Drop points whose weight is exactly zero.
    pub fn pruned(&self) -> Self {
        let (points, weights) = self
            .points
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, w)| (*p, *w))
            .unzip();
        DiscreteMeasure {
            dim: self.dim,
            points,
            weights,
        }
    }

    /// Aggregate a torus measure onto the `n x n` node grid, assigning each
    /// point to its nearest node.
    pub fn aggregate(&self, n: usize) -> Self {
        let mut acc = vec![0.0; if self.dim == 1 { n } else { n * n }];
        for (p, w) in self.points.iter().zip(&self.weights) {
            let i = (p[0] * n as f64).round() as usize % n;
            let k = if self.dim == 1 {
                i
            } else {
                i + n * ((p[1] * n as f64).round() as usize % n)
            };
            acc[k] += w;
        }
        let mut grid = Self::uniform_grid(self.dim, n);
        grid.weights = acc;
        grid.pruned()
    }
}

/// Ground cost between support points.
#[derive(Debug, Clone)]
pub enum CostSpec {
    /// Wrap-around Euclidean distance `d`.
    TorusDistance,
    /// `d^beta`.
    TorusDistancePower { beta: f64 },
    /// `|s|^beta` when the target lies in the tube of half-width `half_width`
    /// around the local stable line through the source (`s` the signed
    /// stable offset), `penalty` otherwise.
    StableRestricted {
        beta: f64,
        field: Arc<DirectionField>,
        half_width: f64,
        penalty: f64,
    },
}

impl CostSpec {
    pub fn power(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(CostSpec::TorusDistancePower { beta })
    }

    /// Stable tube surrogate with the default penalty `4 diam^beta`.
    pub fn stable(beta: f64, field: Arc<DirectionField>, half_width: f64) -> Result<Self> {
        Self::stable_with_penalty(beta, field, half_width, 4.0 * TORUS_DIAMETER.powf(beta))
    }

    pub fn stable_with_penalty(beta: f64, field: Arc<DirectionField>, half_width: f64, penalty: f64) -> Result<Self> {
        check_beta(beta)?;
        if !(half_width > 0.0) {
            return Err(Error::InvalidInput(format!("tube half-width {half_width} must be positive")));
        }
        if !(penalty > TORUS_DIAMETER.powf(beta)) {
            return Err(Error::InvalidInput(format!("penalty {penalty} must exceed diam^beta")));
        }
        Ok(CostSpec::StableRestricted {
            beta,
            field,
            half_width,
            penalty,
        })
    }

    pub fn beta(&self) -> f64 {
        match self {
            CostSpec::TorusDistance => 1.0,
            CostSpec::TorusDistancePower { beta } | CostSpec::StableRestricted { beta, .. } => *beta,
        }
    }

    pub fn cost(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        match self {
            CostSpec::TorusDistance => torus_dist(p, q),
            CostSpec::TorusDistancePower { beta } => torus_dist(p, q).powf(*beta),
            CostSpec::StableRestricted {
                beta,
                field,
                half_width,
                penalty,
            } => {
                let d = torus_delta(p, q);
                let e = field.dir_at(p);
                let across = (d[0] * e[1] - d[1] * e[0]).abs();
                if across <= *half_width {
                    (d[0] * e[0] + d[1] * e[1]).abs().powf(*beta)
                } else {
                    *penalty
                }
            }
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("exponent {beta} outside (0, 1]")))
    }
}

/// Dense row-major cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

pub fn cost_matrix(source: &DiscreteMeasure, target: &DiscreteMeasure, spec: &CostSpec) -> CostMatrix {
    let cols = target.len();
    let mut data = vec![0.0; source.len() * cols];
    data.par_chunks_mut(cols.max(1)).enumerate().for_each(|(i, row)| {
        let p = source.points[i];
        for (c, q) in row.iter_mut().zip(&target.points) {
            *c = spec.cost(p, *q);
        }
    });
    CostMatrix {
        rows: source.len(),
        cols,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMethod {
    Exact,
    Sinkhorn,
}

/// Sparse coupling with its cost and dual potentials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportPlan {
    pub entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
    pub source_potential: Vec<f64>,
    pub target_potential: Vec<f64>,
    pub method: PlanMethod,
}

impl TransportPlan {
    pub fn dual_objective(&self, source: &DiscreteMeasure, target: &DiscreteMeasure) -> f64 {
        compensated_sum(
            self.source_potential
                .iter()
                .zip(&source.weights)
                .map(|(p, w)| p * w)
                .chain(self.target_potential.iter().zip(&target.weights).map(|(p, w)| p * w)),
        )
    }

    /// `primal - dual`.
    pub fn duality_gap(&self, source: &DiscreteMeasure, target: &DiscreteMeasure) -> f64 {
        self.cost - self.dual_objective(source, target)
    }

    /// Largest absolute row or column marginal error.
    pub fn marginal_error(&self, source: &DiscreteMeasure, target: &DiscreteMeasure) -> f64 {
        let mut rows = vec![0.0; source.len()];
        let mut cols = vec![0.0; target.len()];
        for &(i, j, m) in &self.entries {
            rows[i] += m;
            cols[j] += m;
        }
        rows.iter()
            .zip(&source.weights)
            .chain(cols.iter().zip(&target.weights))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const NONE: usize = usize::MAX;

/// Primal network simplex on the transportation graph with an artificial
/// root, block-search pivoting and a thread-indexed spanning tree.
struct NetworkSimplex<'a> {
    cost: &'a CostMatrix,
    m: usize,
    n: usize,
    real_arcs: usize,
    art_cost: f64,
    // arcs beyond real_arcs are the artificial ones, one per node
    art_source: Vec<usize>,
    art_target: Vec<usize>,
    flow: Vec<f64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i8>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    dirty_revs: Vec<usize>,
    block_size: usize,
    next_arc: usize,
    eps: f64,
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: f64,
}

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a CostMatrix) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let nodes = m + n;
        let root = nodes;
        let real_arcs = m * n;
        let cmax = cost.max();
        let art_cost = (cmax + 1.0) * (nodes as f64 + 1.0);
        let mut s = NetworkSimplex {
            cost,
            m,
            n,
            real_arcs,
            art_cost,
            art_source: vec![0; nodes],
            art_target: vec![0; nodes],
            flow: vec![0.0; real_arcs + nodes],
            state: vec![STATE_LOWER; real_arcs + nodes],
            pi: vec![0.0; nodes + 1],
            parent: vec![root; nodes + 1],
            pred: vec![0; nodes + 1],
            pred_dir: vec![DIR_UP; nodes + 1],
            thread: vec![0; nodes + 1],
            rev_thread: vec![0; nodes + 1],
            succ_num: vec![1; nodes + 1],
            last_succ: vec![0; nodes + 1],
            dirty_revs: Vec::new(),
            block_size: ((real_arcs as f64).sqrt().ceil() as usize).max(10),
            next_arc: 0,
            eps: 1e-14 * (cmax + 1.0),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0.0,
        };
        s.parent[root] = NONE;
        s.pred[root] = NONE;
        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = nodes + 1;
        s.last_succ[root] = root - 1;
        for u in 0..nodes {
            let e = real_arcs + u;
            let b = if u < m { supply[u] } else { -demand[u - m] };
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.last_succ[u] = u;
            s.pred[u] = e;
            s.state[e] = STATE_TREE;
            if b >= 0.0 {
                s.art_source[u] = u;
                s.art_target[u] = root;
                s.flow[e] = b;
                s.pred_dir[u] = DIR_UP;
                s.pi[u] = -art_cost;
            } else {
                s.art_source[u] = root;
                s.art_target[u] = u;
                s.flow[e] = -b;
                s.pred_dir[u] = DIR_DOWN;
                s.pi[u] = art_cost;
            }
        }
        s.thread[nodes - 1] = root;
        s.rev_thread[root] = nodes - 1;
        s
    }

    fn source(&self, e: usize) -> usize {
        if e < self.real_arcs {
            e / self.n
        } else {
            self.art_source[e - self.real_arcs]
        }
    }

    fn target(&self, e: usize) -> usize {
        if e < self.real_arcs {
            self.m + e % self.n
        } else {
            self.art_target[e - self.real_arcs]
        }
    }

    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.real_arcs {
            self.cost.data[e]
        } else {
            self.art_cost
        }
    }

    fn reduced(&self, e: usize) -> f64 {
        let (i, j) = (e / self.n, self.m + e % self.n);
        self.state[e] as f64 * (self.cost.data[e] + self.pi[i] - self.pi[j])
    }

    fn find_entering_arc(&mut self) -> bool {
        let mut min = -self.eps;
        let mut found = false;
        let mut cnt = self.block_size;
        let total = self.real_arcs;
        let mut e = self.next_arc;
        for _ in 0..total {
            let c = self.reduced(e);
            if c < min {
                min = c;
                self.in_arc = e;
                found = true;
            }
            e += 1;
            if e == total {
                e = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if found {
                    self.next_arc = e;
                    return true;
                }
                cnt = self.block_size;
            }
        }
        if found {
            self.next_arc = e;
        }
        found
    }

    fn find_join_node(&mut self) {
        let mut u = self.source(self.in_arc);
        let mut v = self.target(self.in_arc);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    fn find_leaving_arc(&mut self) -> bool {
        // entering arcs are always at their lower bound
        let first = self.source(self.in_arc);
        let second = self.target(self.in_arc);
        self.delta = f64::INFINITY;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            if self.pred_dir[u] == DIR_UP {
                let d = self.flow[self.pred[u]];
                if d < self.delta {
                    self.delta = d;
                    self.u_out = u;
                    result = 1;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != self.join {
            if self.pred_dir[u] == DIR_DOWN {
                let d = self.flow[self.pred[u]];
                if d <= self.delta {
                    self.delta = d;
                    self.u_out = u;
                    result = 2;
                }
            }
            u = self.parent[u];
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self) {
        let val = self.delta.max(0.0);
        if val > 0.0 {
            self.flow[self.in_arc] += val;
            let mut u = self.source(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as f64 * val;
                u = self.parent[u];
            }
            let mut u = self.target(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as f64 * val;
                u = self.parent[u];
            }
        }
        self.state[self.in_arc] = STATE_TREE;
        let out = self.pred[self.u_out];
        self.state[out] = STATE_LOWER;
        self.flow[out] = 0.0;
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];
        let in_dir = if u_in == self.source(self.in_arc) { DIR_UP } else { DIR_DOWN };

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = in_dir;
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);
                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;
                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;
                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;
            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }
            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = in_dir;
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[self.join] == v_in { self.join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }
        if self.join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }
        let mut u = v_in;
        while u != self.join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != self.join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let sigma = self.pi[self.v_in] - self.pi[self.u_in] - self.pred_dir[self.u_in] as f64 * self.arc_cost(self.in_arc);
        let end = self.thread[self.last_succ[self.u_in]];
        let mut u = self.u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    fn run(&mut self) -> Result<()> {
        while self.find_entering_arc() {
            self.find_join_node();
            if !self.find_leaving_arc() || !self.delta.is_finite() {
                return Err(Error::Infeasible("unbounded transportation problem".into()));
            }
            self.change_flow();
            self.update_tree_structure();
            self.update_potential();
        }
        Ok(())
    }
}

/// Optimal plan by the network simplex method; deterministic for fixed input.
pub fn exact_plan(source: &DiscreteMeasure, target: &DiscreteMeasure, cost: &CostMatrix) -> Result<TransportPlan> {
    let (m, n) = (source.len(), target.len());
    if m > EXACT_CAP || n > EXACT_CAP {
        return Err(Error::ScaleExceeded {
            size: m.max(n),
            cap: EXACT_CAP,
        });
    }
    check_table(source, target, cost)?;
    let mut ns = NetworkSimplex::new(&source.weights, &target.weights, cost);
    ns.run()?;
    let art_left: f64 = ns.flow[ns.real_arcs..].iter().map(|f| f.abs()).sum();
    if art_left > 1e-9 {
        return Err(Error::Infeasible(format!("{art_left:e} mass left on artificial arcs")));
    }
    let mut entries = Vec::new();
    let mut terms = Vec::new();
    for e in 0..ns.real_arcs {
        let f = ns.flow[e];
        if f > 0.0 {
            entries.push((e / n, e % n, f));
            terms.push(f * cost.data[e]);
        }
    }
    Ok(TransportPlan {
        entries,
        cost: compensated_sum(terms),
        source_potential: ns.pi[..m].iter().map(|p| -p).collect(),
        target_potential: ns.pi[m..m + n].to_vec(),
        method: PlanMethod::Exact,
    })
}

fn check_table(source: &DiscreteMeasure, target: &DiscreteMeasure, cost: &CostMatrix) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("empty measure".into()));
    }
    if cost.rows != source.len() || cost.cols != target.len() {
        return Err(Error::InvalidInput(format!(
            "cost table is {}x{}, measures are {}x{}",
            cost.rows,
            cost.cols,
            source.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Exact transport cost with the given ground cost.
pub fn exact_cost(source: &DiscreteMeasure, target: &DiscreteMeasure, spec: &CostSpec) -> Result<f64> {
    exact_plan(source, target, &cost_matrix(source, target, spec)).map(|p| p.cost)
}

/// Iteration budget and annealing schedule of [`sinkhorn_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub max_iterations: usize,
    /// Factor applied to the regularization between annealing stages.
    pub anneal_factor: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iterations: 200_000,
            anneal_factor: 0.5,
        }
    }
}

pub fn sinkhorn_plan(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    cost: &CostMatrix,
    regularization: f64,
    tol: f64,
) -> Result<TransportPlan> {
    sinkhorn_plan_with(source, target, cost, regularization, tol, SinkhornOptions::default())
}

// marginal tolerance of the annealing stages before the last
const INTERMEDIATE_TOL: f64 = 1e-4;

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with geometric annealing of the regularization from
/// the largest cost down to `regularization`, followed by rounding onto the
/// exact marginals.
pub fn sinkhorn_plan_with(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    cost: &CostMatrix,
    regularization: f64,
    tol: f64,
    options: SinkhornOptions,
) -> Result<TransportPlan> {
    if !(regularization > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidInput("regularization and tolerance must be positive".into()));
    }
    check_table(source, target, cost)?;
    let (m, n) = (source.len(), target.len());
    let log_a: Vec<f64> = source.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = target.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut eps = cost.max().max(regularization);
    let mut iterations = 0;
    let row_sums = |f: &[f64], g: &[f64], eps: f64| -> Vec<f64> {
        (0..m)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| log_b[j].is_finite())
                    .map(|j| (log_a[i] + log_b[j] + (f[i] + g[j] - cost.get(i, j)) / eps).exp())
                    .sum()
            })
            .collect()
    };
    loop {
        let last_stage = eps <= regularization;
        let stage_tol = if last_stage { tol } else { tol.max(INTERMEDIATE_TOL) };
        loop {
            g = (0..n)
                .into_par_iter()
                .map(|j| -eps * log_sum_exp((0..m).map(|i| log_a[i] + (f[i] - cost.get(i, j)) / eps)))
                .collect();
            f = (0..m)
                .into_par_iter()
                .map(|i| -eps * log_sum_exp((0..n).map(|j| log_b[j] + (g[j] - cost.get(i, j)) / eps)))
                .collect();
            iterations += 1;
            // rows are exact after the f update; check the columns
            let cols: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|j| {
                    (0..m)
                        .map(|i| (log_a[i] + log_b[j] + (f[i] + g[j] - cost.get(i, j)) / eps).exp())
                        .sum()
                })
                .collect();
            let err: f64 = cols.iter().zip(&target.weights).map(|(c, b)| (c - b).abs()).sum();
            if err <= stage_tol {
                break;
            }
            if iterations >= options.max_iterations {
                return Err(Error::NoConvergence(format!(
                    "sinkhorn marginal error {err:e} after {iterations} iterations at regularization {eps:e}"
                )));
            }
        }
        if last_stage {
            break;
        }
        eps = (eps * options.anneal_factor).max(regularization);
    }
    // rounding onto the exact marginals
    let mut plan: Vec<f64> = (0..m * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (log_a[i] + log_b[j] + (f[i] + g[j] - cost.get(i, j)) / eps).exp()
        })
        .collect();
    let rows = row_sums(&f, &g, eps);
    for i in 0..m {
        let x = if rows[i] > 0.0 { (source.weights[i] / rows[i]).min(1.0) } else { 0.0 };
        plan[i * n..(i + 1) * n].iter_mut().for_each(|p| *p *= x);
    }
    let mut cols = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            cols[j] += plan[i * n + j];
        }
    }
    for j in 0..n {
        let y = if cols[j] > 0.0 { (target.weights[j] / cols[j]).min(1.0) } else { 0.0 };
        for i in 0..m {
            plan[i * n + j] *= y;
        }
    }
    let mut err_r = source.weights.clone();
    let mut err_c = target.weights.clone();
    for i in 0..m {
        for j in 0..n {
            err_r[i] -= plan[i * n + j];
            err_c[j] -= plan[i * n + j];
        }
    }
    let total: f64 = err_r.iter().map(|v| v.max(0.0)).sum();
    if total > 0.0 {
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] += err_r[i].max(0.0) * err_c[j].max(0.0) / total;
            }
        }
    }
    let mut entries = Vec::new();
    let mut terms = Vec::new();
    for (k, p) in plan.into_iter().enumerate() {
        if p > 0.0 {
            entries.push((k / n, k % n, p));
            terms.push(p * cost.data[k]);
        }
    }
    Ok(TransportPlan {
        entries,
        cost: compensated_sum(terms),
        source_potential: f,
        target_potential: g,
        method: PlanMethod::Sinkhorn,
    })
}

/// Exact `W1` between two measures on the circle.
///
/// With `F`, `G` the cumulative functions, `W1 = min_t int |F - G - t|`; the
/// minimizer is a weighted median of the piecewise constant `F - G`.
pub fn circle_w1(source: &DiscreteMeasure, target: &DiscreteMeasure) -> f64 {
    let mut events: Vec<(f64, f64)> = source
        .points
        .iter()
        .zip(&source.weights)
        .map(|(p, w)| (p[0], *w))
        .chain(target.points.iter().zip(&target.weights).map(|(p, w)| (p[0], -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (value of F - G, interval length)
    let mut pieces = Vec::with_capacity(events.len());
    let mut level = 0.0;
    for k in 0..events.len() {
        level += events[k].1;
        let next = if k + 1 < events.len() { events[k + 1].0 } else { events[0].0 + 1.0 };
        let len = next - events[k].0;
        if len > 0.0 {
            pieces.push((level, len));
        }
    }
    if pieces.is_empty() {
        return 0.0;
    }
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * pieces.iter().map(|p| p.1).sum::<f64>();
    let mut acc = 0.0;
    let mut t = pieces[pieces.len() - 1].0;
    for p in &pieces {
        acc += p.1;
        if acc >= half {
            t = p.0;
            break;
        }
    }
    compensated_sum(pieces.iter().map(|(v, len)| (v - t).abs() * len))
}

/// Distance between two circle points, re-exported for callers building 1D costs.
pub fn circle_cost(a: f64, b: f64) -> f64 {
    circle_dist(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_measure(rng: &mut ChaCha8Rng, dim: u8, n: usize) -> DiscreteMeasure {
        let points = (0..n)
            .map(|_| if dim == 1 { [rng.gen(), 0.0] } else { [rng.gen(), rng.gen()] })
            .collect();
        let weights = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        DiscreteMeasure::normalized(dim, points, weights).unwrap()
    }

    fn brute_force_assignment(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols], 0.0, &mut best);
        best / cost.rows as f64
    }

    #[test]
    fn cost_examples() {
        let p = [0.0, 0.0];
        let q = [0.9, 0.0];
        assert!((CostSpec::TorusDistance.cost(p, q) - 0.1).abs() < 1e-15);
        let c = CostSpec::power(0.5).unwrap().cost(p, q);
        assert!((c - 0.31623).abs() < 1e-5);
        assert!(CostSpec::power(0.0).is_err());
        assert!(CostSpec::power(1.5).is_err());
    }

    #[test]
    fn stable_cost_penalizes_off_tube() {
        let es = [0.850651, -0.525731];
        let field = Arc::new(DirectionField::constant(8, es));
        let spec = CostSpec::stable(1.0, field.clone(), 0.01).unwrap();
        let p = [0.2, 0.3];
        let on = [0.2 + 0.1 * es[0], 0.3 + 0.1 * es[1]];
        assert!((spec.cost(p, on) - 0.1).abs() < 1e-6);
        let off = [0.2 - 0.1 * es[1], 0.3 + 0.1 * es[0]];
        assert_eq!(spec.cost(p, off), 4.0 * TORUS_DIAMETER);
        assert!(CostSpec::stable_with_penalty(1.0, field, 0.01, 0.5).is_err());
    }

    #[test]
    fn identical_measures_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = random_measure(&mut rng, 2, 30);
        let plan = exact_plan(&mu, &mu, &cost_matrix(&mu, &mu, &CostSpec::TorusDistance)).unwrap();
        assert!(plan.cost.abs() < 1e-15);
        assert!(plan.entries.iter().all(|(i, j, _)| i == j));
    }

    #[test]
    fn forced_plan() {
        let a = DiscreteMeasure::dirac(2, [0.0, 0.0]);
        let b = DiscreteMeasure::dirac(2, [0.5, 0.0]);
        let plan = exact_plan(&a, &b, &cost_matrix(&a, &b, &CostSpec::TorusDistance)).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert!((plan.cost - 0.5).abs() < 1e-15);
        let s = sinkhorn_plan(&a, &b, &cost_matrix(&a, &b, &CostSpec::TorusDistance), 1e-2, 1e-9).unwrap();
        assert!((s.cost - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duality_certificate_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 0..20 {
            let mu = random_measure(&mut rng, 2, 20 + k);
            let nu = random_measure(&mut rng, 2, 25);
            let spec = if k % 2 == 0 { CostSpec::TorusDistance } else { CostSpec::power(0.5).unwrap() };
            let cost = cost_matrix(&mu, &nu, &spec);
            let plan = exact_plan(&mu, &nu, &cost).unwrap();
            assert!(plan.duality_gap(&mu, &nu).abs() <= 1e-9);
            assert!(plan.marginal_error(&mu, &nu) <= 1e-8);
            for i in 0..mu.len() {
                for j in 0..nu.len() {
                    assert!(plan.source_potential[i] + plan.target_potential[j] <= cost.get(i, j) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts = |rng: &mut ChaCha8Rng| (0..6).map(|_| [rng.gen(), rng.gen()]).collect::<Vec<_>>();
            let mu = DiscreteMeasure::normalized(2, pts(&mut rng), vec![1.0; 6]).unwrap();
            let nu = DiscreteMeasure::normalized(2, pts(&mut rng), vec![1.0; 6]).unwrap();
            let cost = cost_matrix(&mu, &nu, &CostSpec::TorusDistance);
            let plan = exact_plan(&mu, &nu, &cost).unwrap();
            assert!((plan.cost - brute_force_assignment(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_measure(&mut rng, 2, 50);
        let nu = random_measure(&mut rng, 2, 50);
        let cost = cost_matrix(&mu, &nu, &CostSpec::TorusDistance);
        let exact = exact_plan(&mu, &nu, &cost).unwrap().cost;
        let s = sinkhorn_plan(&mu, &nu, &cost, 1e-3, 1e-9).unwrap();
        assert!(s.marginal_error(&mu, &nu) <= 1e-8);
        assert!((s.cost - exact).abs() <= 0.01 * exact, "{} vs {exact}", s.cost);
        let same = sinkhorn_plan(&mu, &mu, &cost_matrix(&mu, &mu, &CostSpec::TorusDistance), 1e-3, 1e-9).unwrap();
        assert!(same.cost <= 1e-3);
    }

    #[test]
    fn sinkhorn_budget_exhaustion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = random_measure(&mut rng, 2, 20);
        let nu = random_measure(&mut rng, 2, 20);
        let cost = cost_matrix(&mu, &nu, &CostSpec::TorusDistance);
        let opts = SinkhornOptions {
            max_iterations: 2,
            anneal_factor: 0.5,
        };
        let r = sinkhorn_plan_with(&mu, &nu, &cost, 1e-4, 1e-12, opts);
        assert!(matches!(r, Err(Error::NoConvergence(_))));
    }

    #[test]
    fn circle_examples() {
        let a = DiscreteMeasure::dirac(1, [0.1, 0.0]);
        let b = DiscreteMeasure::dirac(1, [0.85, 0.0]);
        assert!((circle_w1(&a, &b) - 0.25).abs() < 1e-15);
        let grid = DiscreteMeasure::uniform_grid(1, 400);
        let zero = DiscreteMeasure::dirac(1, [0.0, 0.0]);
        assert!((circle_w1(&grid, &zero) - 0.25).abs() <= 1.0 / 400.0);
    }

    #[test]
    fn circle_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mu = random_measure(&mut rng, 1, 100);
            let nu = random_measure(&mut rng, 1, 100);
            let exact = exact_cost(&mu, &nu, &CostSpec::TorusDistance).unwrap();
            assert!((circle_w1(&mu, &nu) - exact).abs() <= 1e-8);
        }
    }

    #[test]
    fn scale_cap() {
        let big = DiscreteMeasure::uniform_grid(1, EXACT_CAP + 1);
        let one = DiscreteMeasure::dirac(1, [0.0, 0.0]);
        let cost = CostMatrix {
            rows: big.len(),
            cols: 1,
            data: vec![0.0; big.len()],
        };
        assert!(matches!(exact_plan(&big, &one, &cost), Err(Error::ScaleExceeded { .. })));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(DiscreteMeasure::new(2, vec![[0.0, 0.0]], vec![0.5]).is_err());
        assert!(DiscreteMeasure::new(2, vec![[0.0, 0.0], [0.1, 0.1]], vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::new(3, vec![[0.0, 0.0]], vec![1.0]).is_err());
    }
}
