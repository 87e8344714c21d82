//! Bot probabilities from retweet structure via sum-product belief propagation
//! on a pairwise binary Markov random field.
//!
//! Labels are `H` (human, index 0) and `B` (bot, index 1). An edge `(u, v)` of
//! weight `w` (v retweeted u `w` times) contributes `ψ(x_u, x_v)^min(w, cap)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DirectedWeightedGraph, NodeId};
use crate::ingest::{daily_retweet_networks, Day, TweetRecord};

pub const DEFAULT_BOT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;
pub const MAX_ORACLE_NODES: usize = 20;

const H: usize = 0;
const B: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BotDetectError {
    #[error("prior_bot must lie in (0,1), got {0}")]
    BadPrior(f64),
    #[error("potential {name} must be positive and finite, got {value}")]
    BadPotential { name: &'static str, value: f64 },
    #[error("weight cap must be positive, got {0}")]
    BadCap(f64),
    #[error("damping must lie in [0,1), got {0}")]
    BadDamping(f64),
    #[error("threshold must lie in (0.5, 1], got {0}")]
    BadThreshold(f64),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("exhaustive enumeration supports at most {MAX_ORACLE_NODES} nodes, got {0}")]
    TooManyNodes(usize),
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("AUC needs both classes present")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorGraphParams {
    pub prior_bot: f64,
    /// ψ(source = H, retweeter = H)
    pub psi_hh: f64,
    /// ψ(source = H, retweeter = B)
    pub psi_hb: f64,
    /// ψ(source = B, retweeter = H)
    pub psi_bh: f64,
    /// ψ(source = B, retweeter = B)
    pub psi_bb: f64,
    pub weight_cap: f64,
    pub damping: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FactorGraphParams {
    fn default() -> Self {
        Self {
            prior_bot: 0.5,
            psi_hh: 1.0,
            psi_hb: 1.5,
            psi_bh: 0.5,
            psi_bb: 0.5,
            weight_cap: 5.0,
            damping: 0.5,
            max_iterations: 200,
            tolerance: 1e-8,
        }
    }
}

impl FactorGraphParams {
    /// Label-symmetric potentials, under which every marginal equals the prior 0.5.
    pub fn symmetric(same: f64, different: f64) -> Self {
        Self {
            psi_hh: same,
            psi_bb: same,
            psi_hb: different,
            psi_bh: different,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BotDetectError> {
        if !(self.prior_bot > 0.0 && self.prior_bot < 1.0) {
            return Err(BotDetectError::BadPrior(self.prior_bot));
        }
        for (name, value) in [
            ("psi_hh", self.psi_hh),
            ("psi_hb", self.psi_hb),
            ("psi_bh", self.psi_bh),
            ("psi_bb", self.psi_bb),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(BotDetectError::BadPotential { name, value });
            }
        }
        if !(self.weight_cap > 0.0 && self.weight_cap.is_finite()) {
            return Err(BotDetectError::BadCap(self.weight_cap));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(BotDetectError::BadDamping(self.damping));
        }
        Ok(())
    }

    /// Bots retweet humans rather than bots, and humans favor humans.
    pub fn respects_behavioral_ordering(&self) -> bool {
        self.psi_hb > self.psi_bb && self.psi_hh > self.psi_bh
    }

    /// `log ψ(source, retweeter)` indexed `[source][retweeter]`.
    fn log_psi(&self) -> [[f64; 2]; 2] {
        [
            [self.psi_hh.ln(), self.psi_hb.ln()],
            [self.psi_bh.ln(), self.psi_bb.ln()],
        ]
    }

    fn log_prior(&self) -> [f64; 2] {
        [(1.0 - self.prior_bot).ln(), self.prior_bot.ln()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BotPosterior {
    /// Marginal probability of `B`, indexed by node.
    pub probabilities: Vec<f64>,
    pub converged: bool,
    /// Largest message change in the final sweep (0 for exact passes).
    pub residual: f64,
    pub iterations: usize,
}

impl BotPosterior {
    pub fn get(&self, id: NodeId) -> f64 {
        self.probabilities[id.index()]
    }
}

/// One factor per unordered node pair; `table[x_a][x_b]` in log domain.
struct PairFactor {
    a: usize,
    b: usize,
    table: [[f64; 2]; 2],
}

fn pair_factors(graph: &DirectedWeightedGraph, params: &FactorGraphParams) -> Vec<PairFactor> {
    let lp = params.log_psi();
    let mut pairs: BTreeMap<(usize, usize), [[f64; 2]; 2]> = BTreeMap::new();
    for (u, v, w) in graph.edges() {
        let w = w.min(params.weight_cap);
        let (u, v) = (u.index(), v.index());
        let (a, b) = (u.min(v), u.max(v));
        let t = pairs.entry((a, b)).or_insert([[0.0; 2]; 2]);
        for xa in 0..2 {
            for xb in 0..2 {
                // Orient the factor: source label first.
                let (xs, xr) = if u == a { (xa, xb) } else { (xb, xa) };
                t[xa][xb] += w * lp[xs][xr];
            }
        }
    }
    pairs
        .into_iter()
        .map(|((a, b), table)| PairFactor { a, b, table })
        .collect()
}

fn log_sum_exp(x: f64, y: f64) -> f64 {
    let m = x.max(y);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((x - m).exp() + (y - m).exp()).ln()
}

fn normalize(m: [f64; 2]) -> [f64; 2] {
    let z = log_sum_exp(m[0], m[1]);
    [m[0] - z, m[1] - z]
}

fn prob_bot(belief: [f64; 2]) -> f64 {
    1.0 / (1.0 + (belief[H] - belief[B]).exp())
}

/// Message from `from` across a factor whose table is oriented `[x_from][x_to]`,
/// given the sum of everything else `from` has heard.
fn message(table: &[[f64; 2]; 2], from_belief: [f64; 2]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (x_to, o) in out.iter_mut().enumerate() {
        *o = log_sum_exp(from_belief[H] + table[H][x_to], from_belief[B] + table[B][x_to]);
    }
    normalize(out)
}

/// Adjacent factor list entry: (factor index, neighbor, this node is side `a`).
type Incidence = (usize, usize, bool);

pub fn infer_bot_probabilities(
    graph: &DirectedWeightedGraph,
    params: &FactorGraphParams,
) -> Result<BotPosterior, BotDetectError> {
    params.validate()?;
    let n = graph.node_count();
    let prior = params.log_prior();
    let factors = pair_factors(graph, params);
    let mut adj: Vec<Vec<Incidence>> = vec![Vec::new(); n];
    for (k, f) in factors.iter().enumerate() {
        adj[f.a].push((k, f.b, true));
        adj[f.b].push((k, f.a, false));
    }
    // Oriented table for a message sent by the `a` side or the `b` side.
    let oriented = |k: usize, sender_is_a: bool| -> [[f64; 2]; 2] {
        let t = factors[k].table;
        if sender_is_a {
            t
        } else {
            [[t[0][0], t[1][0]], [t[0][1], t[1][1]]]
        }
    };
    // msg[k][0]: a -> b, msg[k][1]: b -> a
    let mut msg = vec![[[0.0f64; 2]; 2]; factors.len()];
    let slot = |sender_is_a: bool| if sender_is_a { 0 } else { 1 };

    let mut comp = vec![usize::MAX; n];
    let mut converged = true;
    let mut residual = 0.0f64;
    let mut iterations = 0usize;
    for root in 0..n {
        if comp[root] != usize::MAX {
            continue;
        }
        // BFS order of the component.
        let mut order = vec![root];
        comp[root] = root;
        let mut queue = VecDeque::from([0usize]);
        let mut edge_ids = BTreeSet::new();
        let mut parent_of = BTreeMap::new();
        while let Some(pos) = queue.pop_front() {
            let v = order[pos];
            for &(k, w, v_is_a) in &adj[v] {
                edge_ids.insert(k);
                if comp[w] == usize::MAX {
                    comp[w] = root;
                    parent_of.insert(w, (k, v, !v_is_a));
                    order.push(w);
                    queue.push_back(order.len() - 1);
                }
            }
        }
        if edge_ids.is_empty() {
            continue;
        }
        let belief_without = |msg: &Vec<[[f64; 2]; 2]>, v: usize, skip: usize| -> [f64; 2] {
            let mut b = prior;
            for &(k, _, v_is_a) in &adj[v] {
                if k != skip {
                    let m = msg[k][slot(!v_is_a)];
                    b[0] += m[0];
                    b[1] += m[1];
                }
            }
            b
        };
        if edge_ids.len() == order.len() - 1 {
            // Tree: leaves to root, then root to leaves.
            for &v in order.iter().skip(1).rev() {
                let (k, _, v_is_a) = parent_of[&v];
                let m = message(&oriented(k, v_is_a), belief_without(&msg, v, k));
                msg[k][slot(v_is_a)] = m;
            }
            for &v in &order {
                for &(k, w, v_is_a) in &adj[v] {
                    if parent_of.get(&w).is_some_and(|p| p.0 == k) {
                        let m = message(&oriented(k, v_is_a), belief_without(&msg, v, k));
                        msg[k][slot(v_is_a)] = m;
                    }
                }
            }
        } else {
            let ks: Vec<usize> = edge_ids.into_iter().collect();
            let mut comp_converged = false;
            let mut last = f64::INFINITY;
            for it in 0..params.max_iterations {
                let mut next = msg.clone();
                let mut change = 0.0f64;
                for &k in &ks {
                    let f = &factors[k];
                    for (sender, sender_is_a) in [(f.a, true), (f.b, false)] {
                        let fresh = message(&oriented(k, sender_is_a), belief_without(&msg, sender, k));
                        let old = msg[k][slot(sender_is_a)];
                        let damped = normalize([
                            params.damping * old[0] + (1.0 - params.damping) * fresh[0],
                            params.damping * old[1] + (1.0 - params.damping) * fresh[1],
                        ]);
                        change = change.max((damped[0] - old[0]).abs()).max((damped[1] - old[1]).abs());
                        next[k][slot(sender_is_a)] = damped;
                    }
                }
                msg = next;
                last = change;
                iterations = iterations.max(it + 1);
                if change < params.tolerance {
                    comp_converged = true;
                    break;
                }
            }
            converged &= comp_converged;
            residual = residual.max(last);
        }
    }

    let probabilities = (0..n)
        .map(|v| {
            let mut b = prior;
            for &(k, _, v_is_a) in &adj[v] {
                let m = msg[k][slot(!v_is_a)];
                b[0] += m[0];
                b[1] += m[1];
            }
            prob_bot(b)
        })
        .collect();
    Ok(BotPosterior {
        probabilities,
        converged,
        residual,
        iterations,
    })
}

/// Exact marginals by summing the joint over all `2^n` labelings.
pub fn exhaustive_oracle(graph: &DirectedWeightedGraph, params: &FactorGraphParams) -> Result<Vec<f64>, BotDetectError> {
    params.validate()?;
    let n = graph.node_count();
    if n > MAX_ORACLE_NODES {
        return Err(BotDetectError::TooManyNodes(n));
    }
    let lp = params.log_psi();
    let prior = params.log_prior();
    let edges: Vec<(usize, usize, f64)> = graph
        .edges()
        .map(|(u, v, w)| (u.index(), v.index(), w.min(params.weight_cap)))
        .collect();
    let log_joint = |mask: u32| -> f64 {
        let label = |i: usize| ((mask >> i) & 1) as usize;
        let mut s: f64 = (0..n).map(|i| prior[label(i)]).sum();
        for &(u, v, w) in &edges {
            s += w * lp[label(u)][label(v)];
        }
        s
    };
    let total = 1u32 << n;
    let max = (0..total).map(log_joint).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut bot_mass = vec![0.0; n];
    for mask in 0..total {
        let p = (log_joint(mask) - max).exp();
        z += p;
        for (i, m) in bot_mass.iter_mut().enumerate() {
            if (mask >> i) & 1 == 1 {
                *m += p;
            }
        }
    }
    Ok(bot_mass.into_iter().map(|m| m / z).collect())
}

/// Nodes whose bot probability strictly exceeds `threshold`.
pub fn threshold_bots(posterior: &BotPosterior, threshold: f64) -> Result<BTreeSet<NodeId>, BotDetectError> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(BotDetectError::BadThreshold(threshold));
    }
    Ok(posterior
        .probabilities
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > threshold)
        .map(|(i, _)| NodeId(i as u64))
        .collect())
}

pub fn union_daily_bots<'a, I>(daily: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a BTreeSet<String>>,
{
    daily.into_iter().flatten().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram {
    /// Counts over equal-width bins of [0,1]; the last bin is closed on the right.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.counts.len() as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn probability_histogram(probabilities: &[f64], bins: usize) -> Result<Histogram, BotDetectError> {
    if bins < 2 {
        return Err(BotDetectError::TooFewBins(bins));
    }
    let mut counts = vec![0; bins];
    for &p in probabilities {
        let k = ((p * bins as f64).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { counts })
}

/// Area under the ROC curve: the probability that a random positive outranks
/// a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, BotDetectError> {
    if scores.len() != labels.len() {
        return Err(BotDetectError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(BotDetectError::SingleClass);
    }
    // Mid-ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Posterior, flagged accounts and network for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayDetection {
    pub day: Day,
    pub network: DirectedWeightedGraph,
    pub posterior: BotPosterior,
    pub bots: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BotDetection {
    pub days: Vec<DayDetection>,
    pub bots: BTreeSet<String>,
}

/// Runs inference on each day's retweet network and unions the flagged accounts.
pub fn detect_bots_daily<'a, I>(tweets: I, params: &FactorGraphParams, threshold: f64) -> Result<BotDetection, BotDetectError>
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    params.validate()?;
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(BotDetectError::BadThreshold(threshold));
    }
    let networks: Vec<(Day, DirectedWeightedGraph)> = daily_retweet_networks(tweets).into_iter().collect();
    let run = |(day, network): (Day, DirectedWeightedGraph)| -> Result<DayDetection, BotDetectError> {
        let posterior = infer_bot_probabilities(&network, params)?;
        let bots = threshold_bots(&posterior, threshold)?
            .into_iter()
            .map(|id| network.label(id).to_owned())
            .collect();
        Ok(DayDetection {
            day,
            network,
            posterior,
            bots,
        })
    };
    #[cfg(feature = "parallel")]
    let days: Vec<DayDetection> = {
        use rayon::prelude::*;
        networks.into_par_iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let days: Vec<DayDetection> = networks.into_iter().map(run).collect::<Result<_, _>>()?;
    let bots = union_daily_bots(days.iter().map(|d| &d.bots));
    Ok(BotDetection { days, bots })
}

/// `account_id,bot_probability,converged`, rows sorted by account id.
pub fn write_posterior_csv<W: Write>(graph: &DirectedWeightedGraph, posterior: &BotPosterior, mut out: W) -> io::Result<()> {
    writeln!(out, "account_id,bot_probability,converged")?;
    let mut rows: Vec<(&str, f64)> = graph.node_ids().map(|id| (graph.label(id), posterior.get(id))).collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    for (label, p) in rows {
        writeln!(out, "{label},{p},{}", posterior.converged)?;
    }
    Ok(())
}
