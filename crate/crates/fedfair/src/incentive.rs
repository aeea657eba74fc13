//! Incentive realization: contribution-proportional sampling, selection
//! probabilities, expected-staleness closed forms, the temperature range
//! solver, and live staleness bookkeeping.
//!
//! The chain is `psi -> rho (softmax at temperature beta) -> q = 1-(1-rho)^k
//! -> Gamma = (1-q)/q^2 -> C = base + Gamma`. Every link is monotone, which
//! is what the fairness ordering guarantees reduce to.

use crate::error::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Softmax of `psi / beta`, stabilized by max subtraction.
pub fn sampling_distribution(psi: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
    }
    if psi.is_empty() {
        return Err(Error::Contract("empty psi vector".into()));
    }
    if psi.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("psi must be finite".into()));
    }
    let max = psi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = psi.iter().map(|&x| ((x - max) / beta).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Probability that a node with per-draw probability `rho` appears at least
/// once among `k` with-replacement draws: `1 - (1 - rho)^k`, evaluated as
/// `-expm1(k ln(1 - rho))` so q stays positive for per-draw probabilities far
/// below machine epsilon.
pub fn selection_probability(rho: f64, k: usize) -> f64 {
    -f64::exp_m1(k as f64 * f64::ln_1p(-rho))
}

/// Expected staleness `(1 - q) / q^2` accumulated by the geometric selection
/// process; 0 for a node selected every iteration.
pub fn expected_staleness(q: f64) -> Result<f64> {
    if q.is_nan() || q <= 0.0 {
        return Err(Error::Divergence(
            "expected staleness diverges for a never-selected node (q = 0)".into(),
        ));
    }
    if q > 1.0 {
        return Err(Error::Contract(format!("q must lie in (0,1], got {q}")));
    }
    Ok((1.0 - q) / (q * q))
}

/// Convergence complexity: the model's own convergence budget plus the node's
/// expected staleness.
pub fn convergence_complexity(gamma: f64, base: f64) -> f64 {
    base + gamma
}

/// Limit of every node's expected staleness as the temperature grows without
/// bound: `(1 - 1/N)^k / [1 - (1 - 1/N)^k]^2`.
pub fn limit_staleness(n: usize, k: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Config("limit staleness needs n >= 2".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("k must lie in [1, {n}], got {k}")));
    }
    let x = (1.0 - 1.0 / n as f64).powi(k as i32);
    Ok(x / ((1.0 - x) * (1.0 - x)))
}

/// Staleness bound kernel from the temperature-range analysis:
/// `g(delta, beta) = (1 - e^{delta/beta}/N)^k / [1 - (1 - e^{delta/beta}/N)^k]^2`.
fn staleness_bound_kernel(delta: f64, beta: f64, n: usize, k: usize) -> f64 {
    let x = 1.0 - (delta / beta).exp() / n as f64;
    let xk = x.powi(k as i32);
    xk / ((1.0 - xk) * (1.0 - xk))
}

const BISECT_MAX_ITERS: usize = 200;
/// Search bracket for temperature solvers; outside it the sampling
/// distribution is numerically indistinguishable from its extremes.
pub const BETA_BRACKET_HI: f64 = 1e6;

/// Bisection for a monotone function on [lo, hi]; `increasing` states the
/// direction. Returns an infeasibility error when the target is not bracketed.
fn bisect_monotone(
    f: impl Fn(f64) -> f64,
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    increasing: bool,
    what: &str,
) -> Result<f64> {
    let sign = |v: f64| if increasing { v - target } else { target - v };
    let flo = sign(f(lo));
    let fhi = sign(f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::Infeasible(format!(
            "{what}: target {target} not bracketed on [{lo}, {hi}]"
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..BISECT_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if sign(f(mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solves the temperature range whose staleness bounds pin the
/// contribution-to-staleness proportionality `psi_i * Gamma_i` inside
/// `[r1, r2]`, given contribution bounds `M1 <= psi_i <= M2`.
///
/// The two boundary equations are `M1 * g(M2 - M1, beta) = r1` (lower bound,
/// increasing in beta) and `M2 * g(M1 - M2, beta) = r2` (upper bound,
/// decreasing in beta). The lower bound is only meaningful for
/// `beta >= (M2 - M1) / ln N`: below that temperature the bracketed per-draw
/// probability hits zero and the kernel leaves its monotone branch, so the
/// search runs on the valid branch only. Degenerate `M1 == M2` makes the
/// kernel beta-independent: any beta works when `r1 <= M1 * limit <= r2`.
pub fn beta_range(
    m1: f64,
    m2: f64,
    n: usize,
    k: usize,
    r1: f64,
    r2: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    if m1.is_nan() || m2.is_nan() || m1 > m2 {
        return Err(Error::Config(format!("need M1 <= M2, got {m1} > {m2}")));
    }
    if r1.is_nan() || r2.is_nan() || r1 <= 0.0 || r1 > r2 {
        return Err(Error::Config(format!("need 0 < r1 <= r2, got ({r1}, {r2})")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config("tol must be positive".into()));
    }
    let limit = limit_staleness(n, k)?;
    if m1 == m2 {
        let pinned = m1 * limit;
        if r1 <= pinned && pinned <= r2 {
            return Ok((tol, BETA_BRACKET_HI));
        }
        return Err(Error::Infeasible(format!(
            "equal contribution bounds pin psi*Gamma at {pinned}, outside [{r1}, {r2}]"
        )));
    }
    let lower_bound = |beta: f64| m1 * staleness_bound_kernel(m2 - m1, beta, n, k);
    let upper_bound = |beta: f64| m2 * staleness_bound_kernel(m1 - m2, beta, n, k);
    let valid_floor = ((m2 - m1) / (n as f64).ln()).max(tol);
    if valid_floor >= BETA_BRACKET_HI {
        return Err(Error::Infeasible(
            "contribution spread too wide for the searchable temperature bracket".into(),
        ));
    }
    let beta_lo_eq = bisect_monotone(
        lower_bound,
        r1,
        valid_floor,
        BETA_BRACKET_HI,
        tol,
        true,
        "lower proportionality bound",
    )?;
    let beta_hi_eq = bisect_monotone(
        upper_bound,
        r2,
        tol,
        BETA_BRACKET_HI,
        tol,
        false,
        "upper proportionality bound",
    )?;
    Ok((beta_lo_eq.min(beta_hi_eq), beta_lo_eq.max(beta_hi_eq)))
}

/// Expected staleness of the lowest-contribution node at temperature `beta`.
fn worst_node_staleness(psi: &[f64], beta: f64, k: usize) -> Result<f64> {
    let rho = sampling_distribution(psi, beta)?;
    let worst = argmin(psi);
    expected_staleness(selection_probability(rho[worst], k))
}

/// Finds the temperature at which the worst node's expected staleness equals
/// `gamma_target`, using that this staleness decreases in beta. Targets at or
/// below the infinite-temperature floor are infeasible.
pub fn beta_for_target(
    psi: &[f64],
    n: usize,
    k: usize,
    gamma_target: f64,
    tol: f64,
) -> Result<f64> {
    if psi.len() != n {
        return Err(Error::Contract(format!("psi length {} != n {n}", psi.len())));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config("tol must be positive".into()));
    }
    let floor = limit_staleness(n, k)?;
    if gamma_target.is_nan() || gamma_target <= floor {
        return Err(Error::Infeasible(format!(
            "gamma target {gamma_target} is at or below the infinite-temperature floor {floor}"
        )));
    }
    let gamma = |beta: f64| worst_node_staleness(psi, beta, k).unwrap_or(f64::INFINITY);
    bisect_monotone(gamma, gamma_target, tol, BETA_BRACKET_HI, tol, false, "worst-node staleness")
}

/// `k` i.i.d. draws from the sampling distribution; duplicates allowed. A
/// node counts as selected when it appears at least once.
pub fn sample_subset(rho: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let dist = WeightedIndex::new(rho)
        .map_err(|e| Error::Contract(format!("invalid sampling distribution: {e}")))?;
    Ok((0..k).map(|_| dist.sample(rng)).collect())
}

/// Frozen incentive-realization plan derived from the converged contribution
/// estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub psi_frozen: Vec<f64>,
    pub beta: f64,
    pub k: usize,
    pub base_complexity: f64,
    /// Per-draw sampling probabilities (softmax of psi / beta).
    pub rho: Vec<f64>,
    /// Per-iteration selection probabilities `1 - (1 - rho)^k`.
    pub q: Vec<f64>,
    /// Expected staleness `(1 - q) / q^2`.
    pub gamma: Vec<f64>,
    /// Convergence complexities `base + gamma`.
    pub complexity: Vec<f64>,
}

impl SamplingPlan {
    pub fn build(
        psi: &[f64],
        beta: f64,
        k: usize,
        base_complexity: f64,
    ) -> Result<SamplingPlan> {
        if k == 0 || k > psi.len() {
            return Err(Error::Config(format!(
                "k must lie in [1, {}], got {k}",
                psi.len()
            )));
        }
        if base_complexity.is_nan() || base_complexity < 0.0 {
            return Err(Error::Config("base_complexity must be nonnegative".into()));
        }
        let rho = sampling_distribution(psi, beta)?;
        let q: Vec<f64> = rho.iter().map(|&r| selection_probability(r, k)).collect();
        let gamma: Vec<f64> = q
            .iter()
            .map(|&qi| expected_staleness(qi))
            .collect::<Result<_>>()?;
        let complexity: Vec<f64> =
            gamma.iter().map(|&g| convergence_complexity(g, base_complexity)).collect();
        Ok(SamplingPlan {
            psi_frozen: psi.to_vec(),
            beta,
            k,
            base_complexity,
            rho,
            q,
            gamma,
            complexity,
        })
    }
}

/// Index of the smallest value, ties broken by lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest value, ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-node last-synchronization bookkeeping and staleness averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessTracker {
    /// Iteration at which each node last received the coordinator model.
    last_sync: Vec<u64>,
    /// gamma_{i,t} per recorded iteration, one row per step.
    gamma_history: Vec<Vec<u64>>,
    last_t: u64,
}

impl StalenessTracker {
    /// All nodes count as synchronized at `start_iteration`.
    pub fn new(n_nodes: usize, start_iteration: u64) -> Self {
        StalenessTracker {
            last_sync: vec![start_iteration; n_nodes],
            gamma_history: Vec::new(),
            last_t: start_iteration,
        }
    }

    /// Records iteration `t`: selected nodes reset to staleness 0, everyone
    /// else ages by `t - last_sync`.
    pub fn step(&mut self, selected: &BTreeSet<usize>, t: u64) -> Result<()> {
        if t <= self.last_t {
            return Err(Error::Contract(format!(
                "iterations must strictly increase (got {t} after {})",
                self.last_t
            )));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= self.last_sync.len()) {
            return Err(Error::Contract(format!("selected node {bad} out of range")));
        }
        let row: Vec<u64> = (0..self.last_sync.len())
            .map(|i| {
                if selected.contains(&i) {
                    self.last_sync[i] = t;
                    0
                } else {
                    t - self.last_sync[i]
                }
            })
            .collect();
        self.gamma_history.push(row);
        self.last_t = t;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.gamma_history.len()
    }

    pub fn history(&self) -> &[Vec<u64>] {
        &self.gamma_history
    }

    /// Time-averaged staleness per node over the recorded steps.
    pub fn running_avg(&self) -> Vec<f64> {
        let n = self.last_sync.len();
        let steps = self.gamma_history.len();
        if steps == 0 {
            return vec![0.0; n];
        }
        let mut avg = vec![0.0; n];
        for row in &self.gamma_history {
            for (a, &g) in avg.iter_mut().zip(row) {
                *a += g as f64;
            }
        }
        for a in avg.iter_mut() {
            *a /= steps as f64;
        }
        avg
    }

    /// Mean staleness accumulated per renewal cycle (selection to selection).
    /// This is the simulated counterpart of the closed form `(1-q)/q^2`;
    /// the plain time average `running_avg` differs from it by a renewal
    /// factor and equals `(1-q)/q` in the i.i.d. regime.
    pub fn cycle_staleness_mean(&self, node: usize) -> Option<f64> {
        let mut total = 0.0;
        let mut cycles = 0usize;
        let mut current = 0.0;
        for row in &self.gamma_history {
            let g = row[node];
            if g == 0 {
                // Selection closes the running cycle.
                total += current;
                cycles += 1;
                current = 0.0;
            } else {
                current += g as f64;
            }
        }
        // The trailing partial cycle is discarded.
        if cycles == 0 {
            None
        } else {
            Some(total / cycles as f64)
        }
    }
}
