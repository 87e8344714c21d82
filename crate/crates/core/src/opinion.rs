//! Stubborn-agent opinion dynamics at equilibrium.
//!
//! Non-stubborn accounts settle at the posting-rate-weighted average of the
//! opinions they follow. Writing `V1` for the non-stubborn nodes and `V0` for
//! the stubborn ones, the equilibrium `θ` solves the sparse system `G θ = F Ψ`
//! where
//!
//! ```text
//! G_ii = -Σ_{k ∈ following(i)} λ_k          i ∈ V1
//! G_ij =  λ_j    if (j, i) ∈ E, i, j ∈ V1, i ≠ j
//! F_ij = -λ_j    if (j, i) ∈ E, i ∈ V1, j ∈ V0
//! ```
//!
//! The solver is checked against [`fixed_point_oracle`], which iterates the
//! averaging map directly on the graph and never forms a matrix.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DirectedWeightedGraph, NodeId};

pub const DEFAULT_LOW_PERCENTILE: f64 = 0.10;
pub const DEFAULT_HIGH_PERCENTILE: f64 = 0.90;

#[derive(Debug, Error, PartialEq)]
pub enum OpinionError {
    #[error("no opinions supplied")]
    NoOpinions,
    #[error("percentiles must satisfy 0 <= low < high <= 1, got low={low} high={high}")]
    BadPercentiles { low: f64, high: f64 },
    #[error("opinion {value} for `{account}` outside [0,1]")]
    OpinionOutOfRange { account: String, value: f64 },
    #[error("every account is stubborn; the equilibrium is vacuous")]
    AllStubborn,
    #[error("account `{0}` has no opinion in the stubborn assignment")]
    UnknownAccount(String),
    #[error("rate vector has {got} entries for a graph with {expected} nodes")]
    RateLength { expected: usize, got: usize },
    #[error("negative or non-finite rate {rate} for `{account}`")]
    BadRate { account: String, rate: f64 },
    #[error("no non-stubborn nodes to solve for")]
    NoFreeNodes,
    #[error("non-stubborn node `{0}` receives no influence; run preprocess_wellposed first")]
    IllPosed(String),
    #[error("solver did not converge in {iterations} iterations (relative residual {residual:e}); history tail {history:?}")]
    NotConverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("equilibrium opinion {value} of `{account}` leaves [0,1] beyond numerical slack")]
    ModelViolation { account: String, value: f64 },
    #[error("fixed-point oracle hit the sweep cap {sweeps} with last change {last_change:e}")]
    OracleSweepCap { sweeps: usize, last_change: f64 },
}

/// Posting rate per node of one graph, in tweets per day.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityRates {
    rates: Vec<f64>,
}

impl ActivityRates {
    pub fn new(graph: &DirectedWeightedGraph, rates: Vec<f64>) -> Result<Self, OpinionError> {
        if rates.len() != graph.node_count() {
            return Err(OpinionError::RateLength {
                expected: graph.node_count(),
                got: rates.len(),
            });
        }
        if let Some((i, &r)) = rates.iter().enumerate().find(|(_, r)| !(**r >= 0.0 && r.is_finite())) {
            return Err(OpinionError::BadRate {
                account: graph.label(NodeId(i as u64)).to_owned(),
                rate: r,
            });
        }
        Ok(Self { rates })
    }

    pub fn from_fn<F>(graph: &DirectedWeightedGraph, rate_of: F) -> Result<Self, OpinionError>
    where
        F: Fn(&str) -> f64,
    {
        Self::new(graph, graph.node_ids().map(|id| rate_of(graph.label(id))).collect())
    }

    #[inline]
    pub fn get(&self, id: NodeId) -> f64 {
        self.rates[id.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rates: self.rates.iter().map(|r| r * c).collect(),
        }
    }

    /// Restriction to `sub`, matching nodes by external id.
    pub fn restrict(&self, parent: &DirectedWeightedGraph, sub: &DirectedWeightedGraph) -> Self {
        Self {
            rates: sub
                .node_ids()
                .map(|id| {
                    let p = parent.node(sub.label(id)).expect("subgraph node exists in parent");
                    self.rates[p.index()]
                })
                .collect(),
        }
    }
}

/// Nearest-rank tail thresholds: the low threshold is the `ceil(low·n)`-th
/// smallest opinion and the high threshold the `ceil((1-high)·n)`-th largest.
/// Opinions at or beyond a threshold are extreme. A tail of size zero has no
/// threshold.
pub fn tail_thresholds(sorted: &[f64], low_pct: f64, high_pct: f64) -> (Option<f64>, Option<f64>) {
    let n = sorted.len();
    let rank = |p: f64| -> usize {
        // Guard against 0.1 * 100 landing a hair above an integer.
        let x = p * n as f64;
        (x - 1e-9).ceil().max(0.0) as usize
    };
    let k_low = rank(low_pct).min(n);
    let k_high = rank(1.0 - high_pct).min(n);
    let low = (k_low > 0).then(|| sorted[k_low - 1]);
    let high = (k_high > 0).then(|| sorted[n - k_high]);
    (low, high)
}

/// Dataset-wide stubborn set: every bot plus humans with extreme opinions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubbornAssignment {
    opinions: BTreeMap<String, f64>,
    stubborn: BTreeSet<String>,
    pub low_threshold: Option<f64>,
    pub high_threshold: Option<f64>,
}

/// One account's measured opinion and bot flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountOpinion {
    pub account: String,
    pub opinion: f64,
    pub bot: bool,
}

pub fn identify_stubborn(
    accounts: &[AccountOpinion],
    low_pct: f64,
    high_pct: f64,
) -> Result<StubbornAssignment, OpinionError> {
    if accounts.is_empty() {
        return Err(OpinionError::NoOpinions);
    }
    if !(0.0 <= low_pct && low_pct < high_pct && high_pct <= 1.0) {
        return Err(OpinionError::BadPercentiles {
            low: low_pct,
            high: high_pct,
        });
    }
    if let Some(a) = accounts.iter().find(|a| !(0.0..=1.0).contains(&a.opinion)) {
        return Err(OpinionError::OpinionOutOfRange {
            account: a.account.clone(),
            value: a.opinion,
        });
    }
    let mut sorted: Vec<f64> = accounts.iter().map(|a| a.opinion).collect();
    sorted.sort_by(f64::total_cmp);
    let (low, high) = tail_thresholds(&sorted, low_pct, high_pct);
    let extreme = |x: f64| low.is_some_and(|t| x <= t) || high.is_some_and(|t| x >= t);
    let stubborn: BTreeSet<String> = accounts
        .iter()
        .filter(|a| a.bot || extreme(a.opinion))
        .map(|a| a.account.clone())
        .collect();
    let opinions: BTreeMap<String, f64> =
        accounts.iter().map(|a| (a.account.clone(), a.opinion)).collect();
    if stubborn.len() == opinions.len() {
        return Err(OpinionError::AllStubborn);
    }
    Ok(StubbornAssignment {
        opinions,
        stubborn,
        low_threshold: low,
        high_threshold: high,
    })
}

impl StubbornAssignment {
    /// Builds an assignment from explicit stubborn accounts, bypassing the
    /// percentile rule.
    pub fn from_parts(opinions: BTreeMap<String, f64>, stubborn: BTreeSet<String>) -> Self {
        Self {
            opinions,
            stubborn,
            low_threshold: None,
            high_threshold: None,
        }
    }

    pub fn is_stubborn(&self, account: &str) -> bool {
        self.stubborn.contains(account)
    }

    pub fn opinion(&self, account: &str) -> Option<f64> {
        self.opinions.get(account).copied()
    }

    pub fn stubborn(&self) -> &BTreeSet<String> {
        &self.stubborn
    }

    pub fn accounts(&self) -> impl Iterator<Item = &str> {
        self.opinions.keys().map(String::as_str)
    }

    /// Per-node roles on one graph.
    pub fn roles_for(&self, graph: &DirectedWeightedGraph) -> Result<NodeRoles, OpinionError> {
        let mut measured = Vec::with_capacity(graph.node_count());
        let mut psi = Vec::with_capacity(graph.node_count());
        for id in graph.node_ids() {
            let label = graph.label(id);
            let op = self
                .opinion(label)
                .ok_or_else(|| OpinionError::UnknownAccount(label.to_owned()))?;
            measured.push(op);
            psi.push(self.is_stubborn(label).then_some(op));
        }
        Ok(NodeRoles { psi, measured })
    }
}

/// Stubborn opinion (`Some(Ψ)`) or free (`None`) for every node of one graph,
/// plus each node's measured opinion.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRoles {
    psi: Vec<Option<f64>>,
    measured: Vec<f64>,
}

impl NodeRoles {
    pub fn new(psi: Vec<Option<f64>>, measured: Vec<f64>) -> Self {
        assert_eq!(psi.len(), measured.len());
        Self { psi, measured }
    }

    /// Convenience for hand-built instances: free nodes get measured opinion 0.5.
    pub fn from_psi(psi: Vec<Option<f64>>) -> Self {
        let measured = psi.iter().map(|p| p.unwrap_or(0.5)).collect();
        Self { psi, measured }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    #[inline]
    pub fn psi(&self, id: NodeId) -> Option<f64> {
        self.psi[id.index()]
    }

    #[inline]
    pub fn is_stubborn(&self, id: NodeId) -> bool {
        self.psi[id.index()].is_some()
    }

    pub fn measured(&self, id: NodeId) -> f64 {
        self.measured[id.index()]
    }

    pub fn free_nodes(&self) -> Vec<NodeId> {
        (0..self.psi.len() as u64)
            .map(NodeId)
            .filter(|id| !self.is_stubborn(*id))
            .collect()
    }

    pub fn stubborn_nodes(&self) -> Vec<NodeId> {
        (0..self.psi.len() as u64)
            .map(NodeId)
            .filter(|id| self.is_stubborn(*id))
            .collect()
    }

    pub fn set_stubborn(&mut self, id: NodeId, psi: f64) {
        self.psi[id.index()] = Some(psi);
    }

    /// `(min Ψ, max Ψ)` over stubborn nodes.
    pub fn psi_range(&self) -> Option<(f64, f64)> {
        self.psi.iter().flatten().fold(None, |acc, &p| match acc {
            None => Some((p, p)),
            Some((lo, hi)) => Some((lo.min(p), hi.max(p))),
        })
    }

    /// Roles restricted to `sub`, matching nodes by external id.
    pub fn restrict(&self, parent: &DirectedWeightedGraph, sub: &DirectedWeightedGraph) -> Self {
        let (psi, measured) = sub
            .node_ids()
            .map(|id| {
                let p = parent.node(sub.label(id)).expect("subgraph node exists in parent");
                (self.psi[p.index()], self.measured[p.index()])
            })
            .unzip();
        Self { psi, measured }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReclassifyReason {
    /// Follows nobody with a positive posting rate.
    NoInfluence,
    /// Member of a closed group that no stubborn node reaches.
    UnanchoredGroup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    pub reclassified: Vec<(NodeId, ReclassifyReason)>,
}

/// Moves degenerate free nodes to the stubborn set at their measured opinion.
///
/// (a) nodes whose followings have zero total rate, and (b) closed groups of
/// free nodes that no stubborn node reaches through positive-rate followings.
/// Afterwards every free node is reachable from a stubborn node, so `G` is a
/// nonsingular M-matrix (up to sign).
pub fn preprocess_wellposed(
    graph: &DirectedWeightedGraph,
    rates: &ActivityRates,
    roles: &NodeRoles,
) -> (NodeRoles, PreprocessReport) {
    let mut out = roles.clone();
    let mut report = PreprocessReport::default();
    let influence = |i: NodeId| -> f64 { graph.in_neighbors(i).ids().map(|j| rates.get(j)).sum() };

    for i in roles.free_nodes() {
        if influence(i) <= 0.0 {
            out.set_stubborn(i, roles.measured(i));
            report.reclassified.push((i, ReclassifyReason::NoInfluence));
        }
    }

    // Forward reachability from stubborn nodes along positive-rate edges.
    let n = graph.node_count();
    let mut reached = vec![false; n];
    let mut queue: VecDeque<NodeId> = out.stubborn_nodes().into();
    for id in &queue {
        reached[id.index()] = true;
    }
    while let Some(j) = queue.pop_front() {
        if rates.get(j) <= 0.0 {
            continue;
        }
        for i in graph.out_neighbors(j).ids() {
            if !reached[i.index()] {
                reached[i.index()] = true;
                queue.push_back(i);
            }
        }
    }
    let unreached: Vec<NodeId> = graph.node_ids().filter(|id| !reached[id.index()]).collect();
    if !unreached.is_empty() {
        for group in closed_groups(graph, rates, &unreached) {
            for i in group {
                out.set_stubborn(i, roles.measured(i));
                report.reclassified.push((i, ReclassifyReason::UnanchoredGroup));
            }
        }
    }
    report.reclassified.sort_by_key(|r| r.0);
    (out, report)
}

/// Strongly connected components of the positive-rate influence graph on
/// `nodes` that receive no influence from outside themselves.
fn closed_groups(graph: &DirectedWeightedGraph, rates: &ActivityRates, nodes: &[NodeId]) -> Vec<Vec<NodeId>> {
    let n = graph.node_count();
    let mut local = vec![usize::MAX; n];
    for (k, id) in nodes.iter().enumerate() {
        local[id.index()] = k;
    }
    // Influence edges j -> i restricted to `nodes` (unreached nodes only follow
    // unreached nodes with positive rate).
    let succ = |k: usize| -> Vec<usize> {
        let j = nodes[k];
        if rates.get(j) <= 0.0 {
            return Vec::new();
        }
        graph
            .out_neighbors(j)
            .ids()
            .filter_map(|i| (local[i.index()] != usize::MAX).then(|| local[i.index()]))
            .collect()
    };
    let comp = tarjan_scc(nodes.len(), succ);
    let ncomp = comp.iter().copied().max().map_or(0, |c| c + 1);
    let mut has_outside_input = vec![false; ncomp];
    for (k, &i) in nodes.iter().enumerate() {
        for j in graph.in_neighbors(i).ids() {
            if rates.get(j) <= 0.0 {
                continue;
            }
            let lj = local[j.index()];
            if lj == usize::MAX || comp[lj] != comp[k] {
                has_outside_input[comp[k]] = true;
            }
        }
    }
    let mut groups = vec![Vec::new(); ncomp];
    for (k, &id) in nodes.iter().enumerate() {
        if !has_outside_input[comp[k]] {
            groups[comp[k]].push(id);
        }
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Iterative Tarjan; returns a component index per node.
fn tarjan_scc<F: Fn(usize) -> Vec<usize>>(n: usize, succ: F) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut index = vec![UNSET; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut comp = vec![UNSET; n];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut next_comp = 0;
    for root in 0..n {
        if index[root] != UNSET {
            continue;
        }
        let mut call: Vec<(usize, Vec<usize>, usize)> = vec![(root, succ(root), 0)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some((v, children, pos)) = call.last_mut() {
            let v = *v;
            if *pos < children.len() {
                let w = children[*pos];
                *pos += 1;
                if index[w] == UNSET {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, succ(w), 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some((parent, _, _)) = call.last() {
                    low[*parent] = low[*parent].min(low[v]);
                }
                if low[v] == index[v] {
                    loop {
                        let w = stack.pop().expect("scc stack");
                        on_stack[w] = false;
                        comp[w] = next_comp;
                        if w == v {
                            break;
                        }
                    }
                    next_comp += 1;
                }
            }
        }
    }
    comp
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// `G θ = F Ψ` over the free nodes of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    /// Graph nodes of the unknowns, ascending.
    pub free: Vec<NodeId>,
    /// Graph nodes of the stubborn columns of `F`, ascending.
    pub stubborn: Vec<NodeId>,
    pub g: SparseMatrix,
    pub f: SparseMatrix,
    pub psi: Vec<f64>,
    /// `F Ψ`.
    pub rhs: Vec<f64>,
}

impl LinearSystem {
    /// Largest violation of `|G_ii| = Σ_{j≠i} G_ij + Σ_j |F_ij|`, relative to `|G_ii|`.
    pub fn row_balance_error(&self) -> f64 {
        (0..self.g.nrows())
            .map(|i| {
                let mut diag = 0.0;
                let mut off = 0.0;
                for (j, v) in self.g.row(i) {
                    if j == i {
                        diag += v;
                    } else {
                        off += v;
                    }
                }
                let f_sum: f64 = self.f.row(i).map(|(_, v)| v.abs()).sum();
                (diag.abs() - off - f_sum).abs() / diag.abs().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

pub fn assemble_system(
    graph: &DirectedWeightedGraph,
    rates: &ActivityRates,
    roles: &NodeRoles,
) -> Result<LinearSystem, OpinionError> {
    let free = roles.free_nodes();
    if free.is_empty() {
        return Err(OpinionError::NoFreeNodes);
    }
    let stubborn = roles.stubborn_nodes();
    let n = graph.node_count();
    let mut row_of = vec![usize::MAX; n];
    for (r, id) in free.iter().enumerate() {
        row_of[id.index()] = r;
    }
    let mut col_of = vec![usize::MAX; n];
    for (c, id) in stubborn.iter().enumerate() {
        col_of[id.index()] = c;
    }
    let psi: Vec<f64> = stubborn.iter().map(|&id| roles.psi(id).expect("stubborn")).collect();

    let mut g_ptr = vec![0];
    let mut g_col = Vec::new();
    let mut g_val = Vec::new();
    let mut f_ptr = vec![0];
    let mut f_col = Vec::new();
    let mut f_val = Vec::new();
    for (r, &i) in free.iter().enumerate() {
        let mut total = 0.0;
        let mut g_entries: Vec<(usize, f64)> = Vec::new();
        for j in graph.in_neighbors(i).ids() {
            let lam = rates.get(j);
            total += lam;
            if lam == 0.0 {
                continue;
            }
            if roles.is_stubborn(j) {
                f_col.push(col_of[j.index()]);
                f_val.push(-lam);
            } else {
                g_entries.push((row_of[j.index()], lam));
            }
        }
        if total <= 0.0 {
            return Err(OpinionError::IllPosed(graph.label(i).to_owned()));
        }
        g_entries.push((r, -total));
        g_entries.sort_by_key(|e| e.0);
        for (c, v) in g_entries {
            g_col.push(c);
            g_val.push(v);
        }
        g_ptr.push(g_col.len());
        f_ptr.push(f_col.len());
    }
    let g = SparseMatrix {
        nrows: free.len(),
        ncols: free.len(),
        row_ptr: g_ptr,
        col_idx: g_col,
        values: g_val,
    };
    let f = SparseMatrix {
        nrows: free.len(),
        ncols: stubborn.len(),
        row_ptr: f_ptr,
        col_idx: f_col,
        values: f_val,
    };
    let mut rhs = vec![0.0; free.len()];
    f.matvec(&psi, &mut rhs);
    Ok(LinearSystem {
        free,
        stubborn,
        g,
        f,
        psi,
        rhs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Relative residual target `‖Gθ − FΨ‖ / ‖FΨ‖`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Systems with fewer unknowns than this use dense LU.
    pub dense_fallback: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 20_000,
            dense_fallback: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    DenseLu,
    BiCgStab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub nodes: Vec<NodeId>,
    pub theta: Vec<f64>,
    pub residual_norm: f64,
    pub solver_iterations: usize,
    pub method: SolveMethod,
}

impl EquilibriumSolution {
    pub fn get(&self, id: NodeId) -> Option<f64> {
        self.nodes.binary_search(&id).ok().map(|k| self.theta[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.nodes.iter().copied().zip(self.theta.iter().copied())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(g: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; b.len()];
    g.matvec(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    r
}

/// Relative residual, or absolute when the right-hand side vanishes.
fn scaled_residual(g: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let rn = norm(&residual(g, x, b));
    let bn = norm(b);
    if bn > 0.0 {
        rn / bn
    } else {
        rn
    }
}

pub fn solve_equilibrium(system: &LinearSystem, settings: &SolverSettings) -> Result<EquilibriumSolution, OpinionError> {
    let n = system.free.len();
    if n == 0 {
        return Err(OpinionError::NoFreeNodes);
    }
    let (mut theta, iterations, method) = if n < settings.dense_fallback {
        let lu = system.g.to_dense().lu();
        let b = DVector::from_column_slice(&system.rhs);
        match lu.solve(&b) {
            Some(x) => (x.as_slice().to_vec(), 1, SolveMethod::DenseLu),
            None => bicgstab(&system.g, &system.rhs, settings)?,
        }
    } else {
        bicgstab(&system.g, &system.rhs, settings)?
    };
    let mut res = scaled_residual(&system.g, &theta, &system.rhs);
    if res > settings.tolerance && method == SolveMethod::DenseLu {
        // One step of iterative refinement for badly scaled dense solves.
        let r = residual(&system.g, &theta, &system.rhs);
        if let Some(dx) = system.g.to_dense().lu().solve(&DVector::from_column_slice(&r)) {
            theta.iter_mut().zip(dx.iter()).for_each(|(t, d)| *t += d);
            res = scaled_residual(&system.g, &theta, &system.rhs);
        }
    }
    if res > settings.tolerance {
        return Err(OpinionError::NotConverged {
            iterations,
            residual: res,
            history: vec![res],
        });
    }
    let slack = 10.0 * settings.tolerance;
    for (k, t) in theta.iter_mut().enumerate() {
        if *t < 0.0 || *t > 1.0 {
            if *t < -slack || *t > 1.0 + slack || t.is_nan() {
                return Err(OpinionError::ModelViolation {
                    account: format!("{}", system.free[k]),
                    value: *t,
                });
            }
            *t = t.clamp(0.0, 1.0);
        }
    }
    Ok(EquilibriumSolution {
        nodes: system.free.clone(),
        theta,
        residual_norm: res,
        solver_iterations: iterations,
        method,
    })
}

/// Jacobi-preconditioned BiCGSTAB from the neutral guess θ ≡ 0.5, restarting
/// on breakdown.
fn bicgstab(
    a: &SparseMatrix,
    b: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<f64>, usize, SolveMethod), OpinionError> {
    let n = b.len();
    let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / a.get(i, i)).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let bnorm = norm(b);
    let scale = if bnorm > 0.0 { bnorm } else { 1.0 };
    let target = settings.tolerance * 0.5;

    let mut x = vec![0.5; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut tmp = vec![0.0; n];

    'restart: while iterations < settings.max_iterations {
        let mut r = residual(a, &x, b);
        let mut rel = norm(&r) / scale;
        history.push(rel);
        if rel <= target {
            return Ok((x, iterations, SolveMethod::BiCgStab));
        }
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        while iterations < settings.max_iterations {
            iterations += 1;
            let rho_next = dot(&r_hat, &r);
            if rho_next.abs() < 1e-300 {
                continue 'restart;
            }
            let beta = (rho_next / rho) * (alpha / omega);
            rho = rho_next;
            for k in 0..n {
                p[k] = r[k] + beta * (p[k] - omega * v[k]);
            }
            let p_hat = precond(&p);
            a.matvec(&p_hat, &mut v);
            let denom = dot(&r_hat, &v);
            if denom.abs() < 1e-300 {
                continue 'restart;
            }
            alpha = rho / denom;
            let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
            if norm(&s) / scale <= target {
                x.iter_mut().zip(&p_hat).for_each(|(xi, pi)| *xi += alpha * pi);
                continue 'restart;
            }
            let s_hat = precond(&s);
            a.matvec(&s_hat, &mut tmp);
            let tt = dot(&tmp, &tmp);
            if tt < 1e-300 {
                continue 'restart;
            }
            omega = dot(&tmp, &s) / tt;
            for k in 0..n {
                x[k] += alpha * p_hat[k] + omega * s_hat[k];
                r[k] = s[k] - omega * tmp[k];
            }
            rel = norm(&r) / scale;
            history.push(rel);
            if rel <= target {
                // Confirm against the true residual before accepting.
                continue 'restart;
            }
            if omega.abs() < 1e-300 {
                continue 'restart;
            }
        }
    }
    let tail = history.iter().rev().take(10).rev().copied().collect();
    Err(OpinionError::NotConverged {
        iterations,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history: tail,
    })
}

/// Preprocess, assemble and solve in one call. Returns the solution together
/// with the roles actually used.
pub fn equilibrium(
    graph: &DirectedWeightedGraph,
    rates: &ActivityRates,
    roles: &NodeRoles,
    settings: &SolverSettings,
) -> Result<(EquilibriumSolution, NodeRoles, PreprocessReport), OpinionError> {
    let (roles, report) = preprocess_wellposed(graph, rates, roles);
    let system = assemble_system(graph, rates, &roles)?;
    let solution = solve_equilibrium(&system, settings)?;
    Ok((solution, roles, report))
}

/// Synchronous averaging sweeps `θ_i ← Σ λ_j x_j / Σ λ_j` from θ ≡ 0.5 until
/// the largest change drops below `1e-12`. Independent of [`assemble_system`].
pub fn fixed_point_oracle(
    graph: &DirectedWeightedGraph,
    rates: &ActivityRates,
    roles: &NodeRoles,
    max_sweeps: usize,
) -> Result<BTreeMap<NodeId, f64>, OpinionError> {
    let free = roles.free_nodes();
    let mut value: Vec<f64> = (0..graph.node_count())
        .map(|k| roles.psi(NodeId(k as u64)).unwrap_or(0.5))
        .collect();
    let mut next = value.clone();
    let mut last_change = f64::INFINITY;
    for _ in 0..max_sweeps {
        last_change = 0.0;
        for &i in &free {
            let (mut num, mut den) = (0.0, 0.0);
            for j in graph.in_neighbors(i).ids() {
                let lam = rates.get(j);
                num += lam * value[j.index()];
                den += lam;
            }
            if den <= 0.0 {
                return Err(OpinionError::IllPosed(graph.label(i).to_owned()));
            }
            let v = num / den;
            last_change = f64::max(last_change, (v - value[i.index()]).abs());
            next[i.index()] = v;
        }
        std::mem::swap(&mut value, &mut next);
        if last_change < 1e-12 {
            return Ok(free.iter().map(|&i| (i, value[i.index()])).collect());
        }
    }
    Err(OpinionError::OracleSweepCap {
        sweeps: max_sweeps,
        last_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    /// Builds a follower graph from `(followee, follower)` pairs.
    fn follow(nodes: &[&str], edges: &[(&str, &str)]) -> DirectedWeightedGraph {
        let mut b = GraphBuilder::new();
        for n in nodes {
            b.add_node(n);
        }
        for (s, t) in edges {
            b.add_interaction(s, t, 1.0).unwrap();
        }
        b.build()
    }

    fn roles(g: &DirectedWeightedGraph, stubborn: &[(&str, f64)]) -> NodeRoles {
        let psi = g
            .node_ids()
            .map(|id| stubborn.iter().find(|(l, _)| *l == g.label(id)).map(|s| s.1))
            .collect();
        NodeRoles::from_psi(psi)
    }

    fn rates(g: &DirectedWeightedGraph, r: &[(&str, f64)]) -> ActivityRates {
        ActivityRates::from_fn(g, |l| r.iter().find(|(x, _)| *x == l).map_or(1.0, |p| p.1)).unwrap()
    }

    #[test]
    fn percentile_example() {
        let mut accts = Vec::new();
        for (k, op) in std::iter::repeat_n(0.0, 10)
            .chain(std::iter::repeat_n(0.5, 80))
            .chain(std::iter::repeat_n(1.0, 10))
            .enumerate()
        {
            accts.push(AccountOpinion { account: format!("a{k:03}"), opinion: op, bot: false });
        }
        // Hand-sorted: positions 0..10 are 0.0, 90..100 are 1.0.
        let s = identify_stubborn(&accts, 0.1, 0.9).unwrap();
        assert_eq!((s.low_threshold, s.high_threshold), (Some(0.0), Some(1.0)));
        let expected: BTreeSet<String> = accts
            .iter()
            .filter(|a| a.opinion != 0.5)
            .map(|a| a.account.clone())
            .collect();
        assert_eq!(s.stubborn(), &expected);
    }

    #[test]
    fn bots_always_stubborn_and_extreme_thresholds() {
        let accts = vec![
            AccountOpinion { account: "bot".into(), opinion: 0.5, bot: true },
            AccountOpinion { account: "h1".into(), opinion: 0.1, bot: false },
            AccountOpinion { account: "h2".into(), opinion: 0.9, bot: false },
        ];
        let s = identify_stubborn(&accts, 0.0, 1.0).unwrap();
        assert_eq!(s.stubborn().iter().collect::<Vec<_>>(), vec!["bot"]);

        let humans = &accts[1..];
        let s = identify_stubborn(humans, 0.0, 1.0).unwrap();
        assert!(s.stubborn().is_empty());

        assert_eq!(identify_stubborn(humans, 0.5, 0.5), Err(OpinionError::BadPercentiles { low: 0.5, high: 0.5 }));
        assert_eq!(identify_stubborn(&[], 0.1, 0.9), Err(OpinionError::NoOpinions));
        let all_bots = vec![AccountOpinion { account: "b".into(), opinion: 0.2, bot: true }];
        assert_eq!(identify_stubborn(&all_bots, 0.1, 0.9), Err(OpinionError::AllStubborn));
    }

    #[test]
    fn one_by_one_system() {
        let g = follow(&["i", "j"], &[("j", "i")]);
        let r = rates(&g, &[("j", 2.0)]);
        let ro = roles(&g, &[("j", 1.0)]);
        let sys = assemble_system(&g, &r, &ro).unwrap();
        assert_eq!(sys.g.get(0, 0), -2.0);
        assert_eq!(sys.rhs, vec![-2.0]);
        let sol = solve_equilibrium(&sys, &SolverSettings::default()).unwrap();
        assert_eq!(sol.theta, vec![1.0]);
    }

    #[test]
    fn mixed_entries() {
        let g = follow(&["i", "j", "k", "x"], &[("j", "i"), ("k", "i"), ("x", "j")]);
        let r = rates(&g, &[("j", 1.0), ("k", 3.0)]);
        let ro = roles(&g, &[("k", 0.0), ("x", 1.0)]);
        let sys = assemble_system(&g, &r, &ro).unwrap();
        let row_i = sys.free.iter().position(|&n| g.label(n) == "i").unwrap();
        let row_j = sys.free.iter().position(|&n| g.label(n) == "j").unwrap();
        let col_k = sys.stubborn.iter().position(|&n| g.label(n) == "k").unwrap();
        assert_eq!(sys.g.get(row_i, row_i), -4.0);
        assert_eq!(sys.g.get(row_i, row_j), 1.0);
        assert_eq!(sys.f.get(row_i, col_k), -3.0);
        assert!(sys.row_balance_error() < 1e-15);
    }

    #[test]
    fn weighted_average_of_two_stubborn() {
        let g = follow(&["a", "b", "c"], &[("a", "b"), ("c", "b")]);
        let r = rates(&g, &[("a", 1.0), ("c", 3.0)]);
        let ro = roles(&g, &[("a", 0.0), ("c", 1.0)]);
        let oracle = fixed_point_oracle(&g, &r, &ro, 10_000).unwrap();
        let b = g.node("b").unwrap();
        assert!((oracle[&b] - 0.75).abs() < 1e-12);
        let (sol, _, _) = equilibrium(&g, &r, &ro, &SolverSettings::default()).unwrap();
        assert!((sol.get(b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn chain_example() {
        let g = follow(&["a", "b", "c", "d"], &[("a", "b"), ("b", "c"), ("d", "c")]);
        let r = rates(&g, &[]);
        let ro = roles(&g, &[("a", 0.0), ("d", 1.0)]);
        let oracle = fixed_point_oracle(&g, &r, &ro, 10_000).unwrap();
        let (b, c) = (g.node("b").unwrap(), g.node("c").unwrap());
        assert!(oracle[&b].abs() < 1e-12);
        assert!((oracle[&c] - 0.5).abs() < 1e-12);
        let (sol, _, _) = equilibrium(&g, &r, &ro, &SolverSettings::default()).unwrap();
        assert!(sol.get(b).unwrap().abs() < 1e-12);
        assert!((sol.get(c).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn preprocess_rules() {
        // (a) isolated free node.
        let g = follow(&["s", "h", "iso"], &[("s", "h")]);
        let r = rates(&g, &[]);
        let ro = roles(&g, &[("s", 1.0)]);
        let (fixed, rep) = preprocess_wellposed(&g, &r, &ro);
        let iso = g.node("iso").unwrap();
        assert_eq!(rep.reclassified, vec![(iso, ReclassifyReason::NoInfluence)]);
        assert_eq!(fixed.psi(iso), Some(0.5));

        // (b) two free nodes following only each other.
        let g = follow(&["s", "h", "p", "q"], &[("s", "h"), ("p", "q"), ("q", "p")]);
        let ro = roles(&g, &[("s", 1.0)]);
        let (fixed, rep) = preprocess_wellposed(&g, &rates(&g, &[]), &ro);
        let (p, q) = (g.node("p").unwrap(), g.node("q").unwrap());
        assert_eq!(
            rep.reclassified,
            vec![(p, ReclassifyReason::UnanchoredGroup), (q, ReclassifyReason::UnanchoredGroup)]
        );
        assert!(fixed.is_stubborn(p) && fixed.is_stubborn(q));

        // Downstream of a closed group only the group itself moves.
        let g = follow(&["p", "q", "d"], &[("p", "q"), ("q", "p"), ("q", "d")]);
        let ro = NodeRoles::from_psi(vec![None, None, None]);
        let (fixed, rep) = preprocess_wellposed(&g, &rates(&g, &[]), &ro);
        assert_eq!(rep.reclassified.len(), 2);
        assert!(!fixed.is_stubborn(g.node("d").unwrap()));

        // Fully connected with a stubborn source reaching everyone: untouched.
        let names = ["s", "a", "b", "c"];
        let mut edges = Vec::new();
        for x in names {
            for y in names {
                if x != y {
                    edges.push((x, y));
                }
            }
        }
        let g = follow(&names, &edges);
        let ro = roles(&g, &[("s", 0.0)]);
        let (fixed, rep) = preprocess_wellposed(&g, &rates(&g, &[]), &ro);
        assert!(rep.reclassified.is_empty());
        assert_eq!(fixed, ro);
    }

    #[test]
    fn zero_rate_following_counts_as_no_influence() {
        let g = follow(&["s", "h"], &[("s", "h")]);
        let r = rates(&g, &[("s", 0.0)]);
        let ro = roles(&g, &[("s", 1.0)]);
        assert!(matches!(assemble_system(&g, &r, &ro), Err(OpinionError::IllPosed(_))));
        let (_, rep) = preprocess_wellposed(&g, &r, &ro);
        assert_eq!(rep.reclassified.len(), 1);
    }

    #[test]
    fn consensus_absorption() {
        let g = follow(&["s1", "s2", "a", "b"], &[("s1", "a"), ("s2", "b"), ("a", "b"), ("b", "a")]);
        let r = rates(&g, &[("s1", 2.0), ("a", 0.3)]);
        let ro = roles(&g, &[("s1", 0.7), ("s2", 0.7)]);
        let oracle = fixed_point_oracle(&g, &r, &ro, 100_000).unwrap();
        assert!(oracle.values().all(|v| (v - 0.7).abs() < 1e-11));
        let (sol, _, _) = equilibrium(&g, &r, &ro, &SolverSettings::default()).unwrap();
        assert!(sol.theta.iter().all(|v| (v - 0.7).abs() < 1e-11));
    }

    #[test]
    fn krylov_path_matches_dense() {
        let g = follow(
            &["s0", "s1", "a", "b", "c", "d"],
            &[("s0", "a"), ("a", "b"), ("b", "c"), ("c", "a"), ("s1", "c"), ("c", "d"), ("b", "d")],
        );
        let r = rates(&g, &[("a", 0.5), ("b", 4.0), ("s1", 2.0)]);
        let ro = roles(&g, &[("s0", 0.0), ("s1", 1.0)]);
        let dense = equilibrium(&g, &r, &ro, &SolverSettings::default()).unwrap().0;
        let krylov_settings = SolverSettings { dense_fallback: 0, ..Default::default() };
        let krylov = equilibrium(&g, &r, &ro, &krylov_settings).unwrap().0;
        assert_eq!(krylov.method, SolveMethod::BiCgStab);
        for (x, y) in dense.theta.iter().zip(&krylov.theta) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(krylov.residual_norm <= 1e-10);
    }

    #[test]
    fn oracle_sweep_cap_reported() {
        let g = follow(&["s", "a"], &[("s", "a"), ("a", "s")]);
        let ro = roles(&g, &[("s", 1.0)]);
        assert!(fixed_point_oracle(&g, &rates(&g, &[]), &ro, 2).is_ok());
        let g = follow(&["s", "a", "b"], &[("s", "a"), ("a", "b"), ("b", "a")]);
        let r = rates(&g, &[("s", 1e-3)]);
        let ro = roles(&g, &[("s", 1.0)]);
        assert!(matches!(
            fixed_point_oracle(&g, &r, &ro, 3),
            Err(OpinionError::OracleSweepCap { sweeps: 3, .. })
        ));
    }

    #[test]
    fn tail_threshold_edges() {
        let sorted = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(tail_thresholds(&sorted, 0.1, 0.9), (Some(0.1), Some(1.0)));
        assert_eq!(tail_thresholds(&sorted, 0.25, 0.75), (Some(0.3), Some(0.8)));
        assert_eq!(tail_thresholds(&sorted, 0.0, 1.0), (None, None));
        assert_eq!(tail_thresholds(&[0.4], 0.1, 0.9), (Some(0.4), Some(0.4)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Random follower graph with 2..14 nodes, per-node rates and roles.
        fn instance() -> impl Strategy<Value = (DirectedWeightedGraph, ActivityRates, NodeRoles)> {
            (2usize..14).prop_flat_map(|n| {
                (
                    proptest::collection::vec((0..n, 0..n), 0..n * 3),
                    proptest::collection::vec(0.05f64..5.0, n),
                    proptest::collection::vec(proptest::option::weighted(0.35, 0.0f64..=1.0), n),
                )
                    .prop_map(move |(edges, rates, psi)| {
                        let mut b = GraphBuilder::new();
                        for k in 0..n {
                            b.add_node(&format!("n{k}"));
                        }
                        for (s, t) in edges {
                            if s != t {
                                b.add_interaction(&format!("n{s}"), &format!("n{t}"), 1.0).unwrap();
                            }
                        }
                        let g = b.build();
                        let r = ActivityRates::new(&g, rates).unwrap();
                        let mut psi = psi;
                        if psi.iter().all(Option::is_none) {
                            psi[0] = Some(0.3);
                        }
                        (g, r, NodeRoles::from_psi(psi))
                    })
            })
        }

        fn solve(g: &DirectedWeightedGraph, r: &ActivityRates, ro: &NodeRoles) -> Option<(EquilibriumSolution, NodeRoles)> {
            match equilibrium(g, r, ro, &SolverSettings::default()) {
                Ok((sol, roles, _)) => Some((sol, roles)),
                Err(OpinionError::NoFreeNodes) => None,
                Err(e) => panic!("unexpected failure: {e}"),
            }
        }

        proptest! {
            #[test]
            fn agrees_with_fixed_point((g, r, ro) in instance()) {
                if let Some((sol, roles)) = solve(&g, &r, &ro) {
                    let oracle = fixed_point_oracle(&g, &r, &roles, 2_000_000).unwrap();
                    for (id, theta) in sol.iter() {
                        prop_assert!((theta - oracle[&id]).abs() < 1e-8, "{} vs {}", theta, oracle[&id]);
                    }
                }
            }

            #[test]
            fn within_stubborn_range((g, r, ro) in instance()) {
                if let Some((sol, roles)) = solve(&g, &r, &ro) {
                    let (lo, hi) = roles.psi_range().unwrap();
                    for &t in &sol.theta {
                        prop_assert!(t >= lo - 1e-9 && t <= hi + 1e-9);
                    }
                }
            }

            #[test]
            fn rate_scale_invariant((g, r, ro) in instance(), c in 0.01f64..100.0) {
                if let Some((a, _)) = solve(&g, &r, &ro) {
                    let (b, _) = solve(&g, &r.scaled(c), &ro).unwrap();
                    for (x, y) in a.theta.iter().zip(&b.theta) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn monotone_in_stubborn_opinions((g, r, ro) in instance(), bump in 0.0f64..0.5) {
                let (fixed, _) = preprocess_wellposed(&g, &r, &ro);
                if fixed.free_nodes().is_empty() {
                    return Ok(());
                }
                let raised = NodeRoles::from_psi(
                    (0..fixed.len()).map(|k| fixed.psi(NodeId(k as u64)).map(|p| (p + bump).min(1.0))).collect(),
                );
                let a = solve_equilibrium(&assemble_system(&g, &r, &fixed).unwrap(), &SolverSettings::default()).unwrap();
                let b = solve_equilibrium(&assemble_system(&g, &r, &raised).unwrap(), &SolverSettings::default()).unwrap();
                for (x, y) in a.theta.iter().zip(&b.theta) {
                    prop_assert!(*y >= x - 1e-9);
                }
            }

            #[test]
            fn rows_balance((g, r, ro) in instance()) {
                let (fixed, _) = preprocess_wellposed(&g, &r, &ro);
                if let Ok(sys) = assemble_system(&g, &r, &fixed) {
                    prop_assert!(sys.row_balance_error() < 1e-12);
                }
            }
        }
    }
}
