//! Convex local models: loss/gradient evaluation, weighted aggregation, and
//! the coordinator update rule.
//!
//! Two model families are supported, both convex so descent and optima are
//! unambiguous at desk scale:
//! * multinomial logistic regression, parameters laid out as
//!   `[W (C x d, row-major), b (C)]`, softmax cross-entropy loss;
//! * linear regression, parameters `[w (d), b]`, mean squared error.
//!
//! The learning rate is folded into the gradient update: `delta` already
//! carries the step size, and the coordinator applies `theta - delta`.

use crate::datagen::{Batch, Labels};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Flattened model parameters plus the iteration of the last synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub version: u64,
}

impl ModelParams {
    pub fn zeros(len: usize) -> Self {
        ModelParams { theta: vec![0.0; len], version: 0 }
    }
}

/// A node's scaled gradient for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub delta: Vec<f64>,
    pub node_id: usize,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

/// Loss family plus optimizer constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub l2_reg: f64,
    pub learning_rate: f64,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.l2_reg < 0.0 {
            return Err(Error::Config("l2_reg must be nonnegative".into()));
        }
        Ok(())
    }

    /// Parameter vector length for a model on `d` features / `n_classes`.
    pub fn param_len(&self, d: usize, n_classes: usize) -> usize {
        match self.kind {
            LossKind::SoftmaxCrossEntropy => n_classes * (d + 1),
            LossKind::SquaredError => d + 1,
        }
    }
}

/// Mean per-sample loss plus `l2_reg * ||theta||^2 / 2`.
pub fn loss(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<f64> {
    let per_sample = match spec.kind {
        LossKind::SoftmaxCrossEntropy => cross_entropy_mean(params, batch)?,
        LossKind::SquaredError => squared_error_mean(params, batch)?,
    };
    let reg: f64 = 0.5 * spec.l2_reg * params.theta.iter().map(|x| x * x).sum::<f64>();
    Ok(per_sample + reg)
}

/// Scaled gradient `learning_rate * grad(loss)` on the batch.
pub fn grad(
    params: &ModelParams,
    batch: &Batch,
    spec: &LossSpec,
    node_id: usize,
    iteration: u64,
) -> Result<GradientUpdate> {
    let mut g = match spec.kind {
        LossKind::SoftmaxCrossEntropy => cross_entropy_grad(params, batch)?,
        LossKind::SquaredError => squared_error_grad(params, batch)?,
    };
    for (gi, ti) in g.iter_mut().zip(&params.theta) {
        *gi += spec.l2_reg * ti;
        *gi *= spec.learning_rate;
        if !gi.is_finite() {
            return Err(Error::Numerical("non-finite gradient entry".into()));
        }
    }
    Ok(GradientUpdate { delta: g, node_id, iteration })
}

/// Weighted sum of the participants' updates: `sum_{i in participants} p_i delta_i`.
/// An empty participant set yields the zero vector, the empty-sum convention
/// the coalition utility relies on.
pub fn aggregate(
    updates: &[GradientUpdate],
    weights: &[f64],
    participants: &BTreeSet<usize>,
) -> Result<GradientUpdate> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Contract("aggregate needs at least one update".into()))?;
    let len = first.delta.len();
    let iteration = first.iteration;
    let available: BTreeSet<usize> = updates.iter().map(|u| u.node_id).collect();
    if let Some(missing) = participants.iter().find(|i| !available.contains(i)) {
        return Err(Error::Contract(format!("participant {missing} has no update")));
    }
    let mut delta = vec![0.0; len];
    for u in updates {
        if u.iteration != iteration {
            return Err(Error::Contract("updates from mixed iterations".into()));
        }
        if u.delta.len() != len {
            return Err(Error::Contract("updates with mixed lengths".into()));
        }
        if !participants.contains(&u.node_id) {
            continue;
        }
        let p = weights
            .get(u.node_id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no weight for node {}", u.node_id)))?;
        for (acc, x) in delta.iter_mut().zip(&u.delta) {
            *acc += p * x;
        }
    }
    Ok(GradientUpdate { delta, node_id: usize::MAX, iteration })
}

/// Coordinator step: `theta <- theta - delta`, version bumped to the update's
/// iteration.
pub fn apply_update(params: &ModelParams, agg: &GradientUpdate) -> Result<ModelParams> {
    if params.theta.len() != agg.delta.len() {
        return Err(Error::Contract("parameter/update length mismatch".into()));
    }
    let theta = params.theta.iter().zip(&agg.delta).map(|(t, d)| t - d).collect();
    Ok(ModelParams { theta, version: agg.iteration })
}

fn check_batch(params: &ModelParams, batch: &Batch, n_classes: usize) -> Result<usize> {
    if batch.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let d = batch.dim();
    let expected = if n_classes > 0 { n_classes * (d + 1) } else { d + 1 };
    if params.theta.len() != expected {
        return Err(Error::Contract(format!(
            "theta length {} does not match expected {expected} for d={d}",
            params.theta.len()
        )));
    }
    Ok(d)
}

fn infer_classes(params: &ModelParams, batch: &Batch) -> Result<usize> {
    let d = batch.dim();
    if d == 0 || !params.theta.len().is_multiple_of(d + 1) {
        return Err(Error::Contract("theta length is not a multiple of d + 1".into()));
    }
    let c = params.theta.len() / (d + 1);
    if c < 2 {
        return Err(Error::Contract("softmax model needs at least 2 classes".into()));
    }
    Ok(c)
}

fn logits(theta: &[f64], x: &[f64], c: usize, d: usize) -> Vec<f64> {
    let (w, b) = theta.split_at(c * d);
    (0..c)
        .map(|class| {
            let row = &w[class * d..(class + 1) * d];
            row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[class]
        })
        .collect()
}

/// log(sum(exp(z))) with max subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn cross_entropy_mean(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let c = infer_classes(params, batch)?;
    let d = check_batch(params, batch, c)?;
    let ys = match &batch.labels {
        Labels::Classes(v) => v,
        Labels::Values(_) => {
            return Err(Error::Contract("cross-entropy needs class labels".into()))
        }
    };
    let mut total = 0.0;
    for (x, &y) in batch.features.iter().zip(ys) {
        if y >= c {
            return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
        }
        let z = logits(&params.theta, x, c, d);
        total += log_sum_exp(&z) - z[y];
    }
    Ok(total / batch.rows() as f64)
}

fn cross_entropy_grad(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let c = infer_classes(params, batch)?;
    let d = check_batch(params, batch, c)?;
    let ys = match &batch.labels {
        Labels::Classes(v) => v,
        Labels::Values(_) => {
            return Err(Error::Contract("cross-entropy needs class labels".into()))
        }
    };
    let mut g = vec![0.0; params.theta.len()];
    let n = batch.rows() as f64;
    for (x, &y) in batch.features.iter().zip(ys) {
        let z = logits(&params.theta, x, c, d);
        let lse = log_sum_exp(&z);
        for class in 0..c {
            let residual = (z[class] - lse).exp() - if class == y { 1.0 } else { 0.0 };
            for (j, xj) in x.iter().enumerate() {
                g[class * d + j] += residual * xj / n;
            }
            g[c * d + class] += residual / n;
        }
    }
    Ok(g)
}

fn squared_error_mean(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let d = check_batch(params, batch, 0)?;
    let ys = match &batch.labels {
        Labels::Values(v) => v,
        Labels::Classes(_) => {
            return Err(Error::Contract("squared error needs real targets".into()))
        }
    };
    let (w, b) = params.theta.split_at(d);
    let mut total = 0.0;
    for (x, &y) in batch.features.iter().zip(ys) {
        let pred = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[0];
        total += (pred - y) * (pred - y);
    }
    Ok(total / batch.rows() as f64)
}

fn squared_error_grad(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let d = check_batch(params, batch, 0)?;
    let ys = match &batch.labels {
        Labels::Values(v) => v,
        Labels::Classes(_) => {
            return Err(Error::Contract("squared error needs real targets".into()))
        }
    };
    let (w, b) = params.theta.split_at(d);
    let mut g = vec![0.0; params.theta.len()];
    let n = batch.rows() as f64;
    for (x, &y) in batch.features.iter().zip(ys) {
        let pred = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[0];
        let residual = 2.0 * (pred - y) / n;
        for (j, xj) in x.iter().enumerate() {
            g[j] += residual * xj;
        }
        g[d] += residual;
    }
    Ok(g)
}
