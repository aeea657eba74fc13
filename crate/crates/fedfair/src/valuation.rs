//! Per-iteration Shapley contributions, the cumulative contribution ledger,
//! and the convergence fluctuation diagnostic.
//!
//! The coalition utility is the alignment of a coalition's aggregated update
//! with the full-coalition aggregate, either as a raw inner product (exact
//! efficiency identity) or as cosine similarity (scale-robust, used in the
//! protocol loop). Exact Shapley values enumerate all coalitions and are
//! capped at a small node count; past the cap callers use the linear-time
//! unbiased estimator that samples one coalition per size.

use crate::error::{Error, Result};
use crate::learner::GradientUpdate;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Coalition utility flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMode {
    InnerProduct,
    CosineSimilarity,
}

/// Largest node count for which exact Shapley enumeration is allowed.
pub const EXACT_CAP: usize = 12;

fn weighted_aggregate(
    coalition_mask: u64,
    updates: &[GradientUpdate],
    weights: &[f64],
) -> Vec<f64> {
    let len = updates.first().map_or(0, |u| u.delta.len());
    let mut agg = vec![0.0; len];
    for (idx, u) in updates.iter().enumerate() {
        if coalition_mask & (1 << idx) == 0 {
            continue;
        }
        let p = weights[u.node_id];
        for (a, x) in agg.iter_mut().zip(&u.delta) {
            *a += p * x;
        }
    }
    agg
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn utility_of_aggregate(agg_s: &[f64], agg_full: &[f64], mode: UtilityMode) -> f64 {
    match mode {
        UtilityMode::InnerProduct => dot(agg_s, agg_full),
        UtilityMode::CosineSimilarity => {
            let ns = dot(agg_s, agg_s).sqrt();
            let nf = dot(agg_full, agg_full).sqrt();
            if ns == 0.0 || nf == 0.0 {
                0.0
            } else {
                dot(agg_s, agg_full) / (ns * nf)
            }
        }
    }
}

/// Utility of a coalition given by member indices into `updates`.
///
/// `updates` must cover the full node set; the full-coalition aggregate is the
/// reference both modes compare against. The empty coalition has utility 0 in
/// both modes.
pub fn utility(
    coalition: &[usize],
    updates: &[GradientUpdate],
    weights: &[f64],
    mode: UtilityMode,
) -> Result<f64> {
    let n = updates.len();
    let mut mask: u64 = 0;
    for &i in coalition {
        if i >= n {
            return Err(Error::Contract(format!("coalition member {i} out of range")));
        }
        mask |= 1 << i;
    }
    let full = weighted_aggregate((1 << n) - 1, updates, weights);
    let sub = weighted_aggregate(mask, updates, weights);
    Ok(utility_of_aggregate(&sub, &full, mode))
}

/// Exact Shapley value of every node by full coalition enumeration.
///
/// For the inner-product utility the values satisfy efficiency:
/// `sum_i phi_i = ||sum_i p_i delta_i||^2`.
pub fn exact_shapley(
    updates: &[GradientUpdate],
    weights: &[f64],
    mode: UtilityMode,
) -> Result<Vec<f64>> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Contract("no updates".into()));
    }
    if n > EXACT_CAP {
        return Err(Error::Capacity(format!(
            "exact Shapley enumeration capped at {EXACT_CAP} nodes (got {n}); use linear_shapley"
        )));
    }
    let full = weighted_aggregate((1u64 << n) - 1, updates, weights);
    // Utility of every coalition, indexed by bitmask over update positions.
    let utilities: Vec<f64> = (0u64..(1 << n))
        .map(|mask| {
            let agg = weighted_aggregate(mask, updates, weights);
            utility_of_aggregate(&agg, &full, mode)
        })
        .collect();
    let mut binom = vec![vec![0.0f64; n]; n];
    for (m, row) in binom.iter_mut().enumerate() {
        row[0] = 1.0;
        for k in 1..=m.min(n - 1) {
            row[k] = row[k - 1] * (m - k + 1) as f64 / k as f64;
        }
    }
    let mut phi = vec![0.0; n];
    for (idx, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << idx;
        let mut total = 0.0;
        for mask in 0u64..(1 << n) {
            if mask & bit != 0 {
                continue;
            }
            let size = mask.count_ones() as usize;
            let marginal = utilities[(mask | bit) as usize] - utilities[mask as usize];
            total += marginal / binom[n - 1][size];
        }
        *p = total / n as f64;
    }
    Ok(phi)
}

/// Linear-time unbiased Shapley estimate: for each node, average the marginal
/// contribution to one uniformly random coalition of each size, then average
/// over `repeats` independent draws.
pub fn linear_shapley(
    updates: &[GradientUpdate],
    weights: &[f64],
    mode: UtilityMode,
    rng: &mut ChaCha8Rng,
    repeats: usize,
) -> Result<Vec<f64>> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Contract("no updates".into()));
    }
    if repeats == 0 {
        return Err(Error::Contract("repeats must be >= 1".into()));
    }
    let full = weighted_aggregate(if n == 64 { u64::MAX } else { (1u64 << n) - 1 }, updates, weights);
    let mut phi = vec![0.0; n];
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for _ in 0..repeats {
        for (i, phi_i) in phi.iter_mut().enumerate() {
            others.clear();
            others.extend((0..n).filter(|&j| j != i));
            let mut total = 0.0;
            for m in 0..n {
                // Uniform size-m coalition via shuffle prefix.
                others.shuffle(rng);
                let mut mask: u64 = 0;
                for &j in others.iter().take(m) {
                    mask |= 1 << j;
                }
                let without = weighted_aggregate(mask, updates, weights);
                let with = weighted_aggregate(mask | (1 << i), updates, weights);
                total += utility_of_aggregate(&with, &full, mode)
                    - utility_of_aggregate(&without, &full, mode);
            }
            *phi_i += total / n as f64;
        }
    }
    for p in phi.iter_mut() {
        *p /= repeats as f64;
    }
    Ok(phi)
}

/// Per-iteration contribution history and its running mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLedger {
    phi_history: Vec<Vec<f64>>,
    psi: Vec<f64>,
    n_nodes: usize,
}

impl ContributionLedger {
    pub fn new(n_nodes: usize) -> Self {
        ContributionLedger { phi_history: Vec::new(), psi: vec![0.0; n_nodes], n_nodes }
    }

    /// Appends one iteration's contribution vector and refreshes the mean.
    pub fn push(&mut self, phi_t: Vec<f64>) -> Result<()> {
        if phi_t.len() != self.n_nodes {
            return Err(Error::Contract(format!(
                "phi length {} does not match node count {}",
                phi_t.len(),
                self.n_nodes
            )));
        }
        self.phi_history.push(phi_t);
        let t = self.phi_history.len() as f64;
        let last = self.phi_history.last().unwrap();
        for (m, &x) in self.psi.iter_mut().zip(last) {
            *m += (x - *m) / t;
        }
        Ok(())
    }

    pub fn t_count(&self) -> usize {
        self.phi_history.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Running mean contribution per node.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.phi_history
    }

    /// History restricted to a subset of node columns.
    pub fn restricted_history(&self, nodes: &[usize]) -> Vec<Vec<f64>> {
        self.phi_history
            .iter()
            .map(|row| nodes.iter().map(|&i| row[i]).collect())
            .collect()
    }

    /// Max-norm shift of the running mean caused by the latest row.
    pub fn fluctuation(&self) -> Result<f64> {
        let t = self.phi_history.len();
        if t < 2 {
            return Err(Error::Precondition("fluctuation needs at least 2 rows".into()));
        }
        let mut prev = vec![0.0; self.n_nodes];
        for row in &self.phi_history[..t - 1] {
            for (m, &x) in prev.iter_mut().zip(row) {
                *m += x;
            }
        }
        let denom = (t - 1) as f64;
        let mut max = 0.0f64;
        for (p, &cur) in prev.iter().zip(&self.psi) {
            max = max.max((cur - *p / denom).abs());
        }
        Ok(max)
    }
}
