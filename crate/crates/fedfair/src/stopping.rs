//! Exploration stopping criterion: a one-sample Hotelling T-squared test on
//! the contribution history, evaluated through the F-distribution, plus the
//! node sub-sampling mitigation and the recall-fraction diagnostic.
//!
//! The statistic compares the running mean of all contribution rows against
//! the mean of the rows older than the test window; a small statistic (large
//! p-value) is read as "the contribution estimates have converged" and stops
//! the exploration phase.

use crate::error::{Error, Result};
use crate::rngs;
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Degrees-of-freedom convention for the reference T-squared distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfMode {
    /// `m = 2 (t_s - 1)`, growing with the observed history.
    History,
    /// `m = 2 tau - 2`, fixed by the test window.
    Window,
}

/// Stopping-test configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingConfig {
    /// Significance level in (0,1); the phase stops once p-value >= alpha.
    pub alpha: f64,
    /// Test window: number of trailing iterations excluded from the baseline mean.
    pub tau: usize,
    /// Optional sub-sampled node count for the test (drawn once, then frozen).
    pub subsample_m: Option<usize>,
    /// First iteration at which the test may fire; default `tau + dim + 2`.
    pub min_iterations: Option<usize>,
    /// Covariance ridge coefficient; the diagonal gets `ridge * tr(S)/dim`.
    pub ridge: f64,
    pub df: DfMode,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            alpha: 0.5,
            tau: 20,
            subsample_m: None,
            min_iterations: None,
            ridge: 1e-8,
            df: DfMode::History,
        }
    }
}

impl StoppingConfig {
    /// Dimension of the tested contribution sub-vector.
    pub fn test_dim(&self, n_nodes: usize) -> usize {
        self.subsample_m.unwrap_or(n_nodes)
    }

    /// Effective first testable iteration.
    pub fn min_iters(&self, n_nodes: usize) -> usize {
        self.min_iterations.unwrap_or(self.tau + self.test_dim(n_nodes) + 2)
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        let dim = self.test_dim(n_nodes);
        if let Some(m) = self.subsample_m {
            if m == 0 || m > n_nodes {
                return Err(Error::Config(format!(
                    "subsample_m must lie in [1, {n_nodes}], got {m}"
                )));
            }
        }
        if self.tau <= dim {
            return Err(Error::Config(format!(
                "tau must exceed the tested dimension ({dim}), got {}",
                self.tau
            )));
        }
        if self.min_iters(n_nodes) <= self.tau {
            return Err(Error::Config("min_iterations must exceed tau".into()));
        }
        Ok(())
    }
}

/// Outcome of one stopping-test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub t2: f64,
    pub p_value: f64,
    pub stop: bool,
    pub tested_nodes: Vec<usize>,
}

/// Draws the frozen sub-sampled node set: `m` distinct indices, uniform.
pub fn subsample_nodes(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot sub-sample {m} of {n} nodes")));
    }
    let mut picked = rand::seq::index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Sample covariance (unbiased) with a relative ridge on the diagonal.
/// Returns `None` when the history carries no variance at all.
fn ridged_covariance(rows: &[Vec<f64>], ridge: f64) -> Option<DMatrix<f64>> {
    let t_s = rows.len();
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= t_s as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for row in rows {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in i..dim {
                let dj = row[j] - mean[j];
                cov[(i, j)] += di * dj;
            }
        }
    }
    let denom = (t_s - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[(i, i)]).sum();
    if trace <= 0.0 {
        return None;
    }
    let bump = ridge * trace / dim as f64;
    for i in 0..dim {
        cov[(i, i)] += bump;
    }
    Some(cov)
}

fn quadratic_form(rows: &[Vec<f64>], displacement: &[f64], ridge: f64) -> Result<f64> {
    let t_s = rows.len();
    // A perfectly constant history has zero displacement by definition;
    // short-circuit before accumulated rounding in the two means (and a
    // covariance at rounding scale) can blow the quadratic form up.
    if rows.windows(2).all(|w| w[0] == w[1]) {
        return Ok(0.0);
    }
    let cov = match ridged_covariance(rows, ridge) {
        Some(c) => c,
        None => return Ok(0.0),
    };
    let d = DVector::from_column_slice(displacement);
    let chol = cov.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "covariance not positive definite after ridging (dim {}, t_s {t_s}, trace {:.3e})",
            d.len(),
            cov.trace()
        ))
    })?;
    let solved = chol.solve(&d);
    Ok((t_s as f64) * d.dot(&solved))
}

/// Hotelling statistic of a contribution history (already restricted to the
/// tested nodes): `t_s * (psi - mu0)' S^-1 (psi - mu0)` where `psi` is the
/// mean of all rows, `mu0` the mean of the rows before the test window, and
/// `S` the ridged covariance of all rows.
pub fn hotelling_t2(rows: &[Vec<f64>], tau: usize, ridge: f64) -> Result<f64> {
    let t_s = rows.len();
    if t_s == 0 {
        return Err(Error::Precondition("empty history".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Contract("ragged history rows".into()));
    }
    if t_s <= tau {
        return Err(Error::Precondition(format!("need more than tau={tau} rows, have {t_s}")));
    }
    if tau <= dim {
        return Err(Error::Precondition(format!("tau={tau} must exceed dimension {dim}")));
    }
    let head = t_s - tau;
    let mut psi = vec![0.0; dim];
    let mut mu0 = vec![0.0; dim];
    for (idx, row) in rows.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            psi[j] += x;
            if idx < head {
                mu0[j] += x;
            }
        }
    }
    let displacement: Vec<f64> = (0..dim)
        .map(|j| psi[j] / t_s as f64 - mu0[j] / head as f64)
        .collect();
    quadratic_form(rows, &displacement, ridge)
}

/// One-sample statistic against an externally supplied mean, used by the
/// calibration harness where the true mean is known.
pub fn hotelling_t2_fixed_mean(rows: &[Vec<f64>], mu0: &[f64], ridge: f64) -> Result<f64> {
    let t_s = rows.len();
    if t_s < 2 {
        return Err(Error::Precondition("need at least 2 rows".into()));
    }
    let dim = rows[0].len();
    if mu0.len() != dim {
        return Err(Error::Contract("mean length mismatch".into()));
    }
    let mut psi = vec![0.0; dim];
    for row in rows {
        for (j, x) in row.iter().enumerate() {
            psi[j] += x;
        }
    }
    let displacement: Vec<f64> =
        (0..dim).map(|j| psi[j] / t_s as f64 - mu0[j]).collect();
    quadratic_form(rows, &displacement, ridge)
}

/// Survival probability of `t2` under the T-squared reference distribution
/// with dimension `dim` and `m` degrees of freedom, via the standard identity
/// `T2_{p,m} = (p m / (m - p + 1)) F_{p, m-p+1}`.
pub fn hotelling_pvalue_df(t2: f64, dim: usize, m: usize) -> Result<f64> {
    if t2.is_nan() || t2 < 0.0 {
        return Err(Error::Contract(format!("t2 must be nonnegative, got {t2}")));
    }
    if m <= dim {
        return Err(Error::Precondition(format!(
            "degrees of freedom m={m} must exceed dimension {dim} (window too short)"
        )));
    }
    let p = dim as f64;
    let mf = m as f64;
    let f_stat = t2 * (mf - p + 1.0) / (p * mf);
    Ok(1.0 - f_cdf(f_stat, p, mf - p + 1.0)?)
}

/// p-value with the history-sized degrees of freedom `m = 2 (t_s - 1)`.
pub fn hotelling_pvalue(t2: f64, dim: usize, t_s: usize) -> Result<f64> {
    if t_s < 2 {
        return Err(Error::Precondition("t_s must be at least 2".into()));
    }
    hotelling_pvalue_df(t2, dim, 2 * (t_s - 1))
}

/// Evaluates the stopping criterion on a full contribution history.
///
/// `history` carries one row per explored iteration with all node columns;
/// `tested_nodes` is the frozen (sub-sampled or full) column set.
pub fn should_stop(
    history: &[Vec<f64>],
    tested_nodes: &[usize],
    config: &StoppingConfig,
) -> Result<TestVerdict> {
    let t_s = history.len();
    let dim = tested_nodes.len();
    if t_s < config.min_iters(dim) {
        return Err(Error::Precondition(format!(
            "stopping test not armed before iteration {}",
            config.min_iters(dim)
        )));
    }
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|row| tested_nodes.iter().map(|&i| row[i]).collect())
        .collect();
    let t2 = hotelling_t2(&rows, config.tau, config.ridge)?;
    let m = match config.df {
        DfMode::History => 2 * (t_s - 1),
        DfMode::Window => 2 * config.tau - 2,
    };
    let p_value = hotelling_pvalue_df(t2, dim, m)?;
    Ok(TestVerdict { t2, p_value, stop: p_value >= config.alpha, tested_nodes: tested_nodes.to_vec() })
}

/// Fraction of the designated low-quality nodes recovered among the
/// `|designated|` lowest contribution estimates. Ties break by node index.
pub fn recall_fraction(psi: &[f64], designated_low: &BTreeSet<usize>) -> Result<f64> {
    if designated_low.is_empty() {
        return Err(Error::Contract("designated_low must be nonempty".into()));
    }
    if let Some(&bad) = designated_low.iter().find(|&&i| i >= psi.len()) {
        return Err(Error::Contract(format!("designated node {bad} out of range")));
    }
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[a].total_cmp(&psi[b]).then(a.cmp(&b)));
    let k = designated_low.len();
    let hits = order.iter().take(k).filter(|i| designated_low.contains(i)).count();
    Ok(hits as f64 / k as f64)
}

// ---------------------------------------------------------------------------
// F-distribution CDF via the regularized incomplete beta function.
// ---------------------------------------------------------------------------

/// Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEFFS[0];
        for (i, c) in COEFFS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn betainc_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::Numerical(format!(
        "incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}"
    )))
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn betainc(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Contract(format!("betainc needs a, b > 0 (got {a}, {b})")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Contract(format!("betainc needs x in [0,1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // Symmetry switch keeps the continued fraction in its fast-convergence zone.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * betainc_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * betainc_cf(b, a, 1.0 - x)? / b)
    }
}

/// CDF of the F distribution with `d1`, `d2` degrees of freedom:
/// `I_{d1 x / (d1 x + d2)}(d1/2, d2/2)`.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> Result<f64> {
    if !x.is_finite() || !d1.is_finite() || !d2.is_finite() {
        return Err(Error::Contract("f_cdf needs finite inputs".into()));
    }
    if d1 <= 0.0 || d2 <= 0.0 {
        return Err(Error::Contract("f_cdf needs positive degrees of freedom".into()));
    }
    if x < 0.0 {
        return Err(Error::Contract(format!("f_cdf needs x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

// ---------------------------------------------------------------------------
// p-value calibration harness.
// ---------------------------------------------------------------------------

/// Null rejection rates per significance level over synthetic i.i.d. Gaussian
/// histories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub dim: usize,
    pub t_s: usize,
    pub tau: usize,
    pub histories: usize,
    pub alphas: Vec<f64>,
    /// Rejection rates of the one-sample statistic against the known true
    /// mean; this is the setting whose calibration the p-value machinery
    /// promises.
    pub fixed_mean_rates: Vec<f64>,
    /// Rejection rates of the windowed protocol statistic on the same
    /// histories. The baseline window overlaps the full history, which damps
    /// the statistic, so these run conservative (below alpha).
    pub windowed_rates: Vec<f64>,
}

/// Simulates null histories and measures how often each statistic's p-value
/// falls below each significance level.
pub fn calibrate_pvalues(
    dim: usize,
    t_s: usize,
    tau: usize,
    alphas: &[f64],
    histories: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    if dim == 0 || t_s <= tau || tau <= dim || histories == 0 {
        return Err(Error::Config("calibration needs t_s > tau > dim >= 1".into()));
    }
    if alphas.iter().any(|a| !(&0.0..&1.0).contains(&a)) {
        return Err(Error::Config("alphas must lie in (0,1)".into()));
    }
    let ridge = 1e-8;
    let m = 2 * (t_s - 1);
    let mut fixed_hits = vec![0usize; alphas.len()];
    let mut windowed_hits = vec![0usize; alphas.len()];
    for h in 0..histories {
        let mut rng = rngs::stream(seed, "calibrate", 0, h as u64);
        // Random mean and a random SPD covariance shared by the history.
        let mu: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
        let a = DMatrix::from_fn(dim, dim, |_, _| normal(&mut rng));
        let sigma = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5;
        let chol = sigma.cholesky().expect("constructed SPD matrix");
        let l = chol.l();
        let rows: Vec<Vec<f64>> = (0..t_s)
            .map(|_| {
                let z = DVector::from_fn(dim, |_, _| normal(&mut rng));
                let x = &l * z;
                (0..dim).map(|j| mu[j] + x[j]).collect()
            })
            .collect();
        let t2_fixed = hotelling_t2_fixed_mean(&rows, &mu, ridge)?;
        let p_fixed = hotelling_pvalue_df(t2_fixed, dim, m)?;
        let t2_win = hotelling_t2(&rows, tau, ridge)?;
        let p_win = hotelling_pvalue_df(t2_win, dim, m)?;
        for (i, &alpha) in alphas.iter().enumerate() {
            if p_fixed < alpha {
                fixed_hits[i] += 1;
            }
            if p_win < alpha {
                windowed_hits[i] += 1;
            }
        }
    }
    Ok(CalibrationReport {
        dim,
        t_s,
        tau,
        histories,
        alphas: alphas.to_vec(),
        fixed_mean_rates: fixed_hits.iter().map(|&c| c as f64 / histories as f64).collect(),
        windowed_rates: windowed_hits.iter().map(|&c| c as f64 / histories as f64).collect(),
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
