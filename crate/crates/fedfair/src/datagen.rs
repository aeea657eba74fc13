//! Synthetic streaming data with controlled per-node quality degradation.
//!
//! Each node owns a stationary stream: a fresh batch at iteration `t` is a
//! pure function of `(stream_seed, t)`, so any iteration can be replayed
//! exactly. Quality degradation (feature noise, label flips, missing values,
//! reduced quantity) is applied on top of the clean draw, with the degraded
//! fraction controlled by the node's quality level so that true contributions
//! are ordered by a known quality vector.

use crate::error::{Error, Result};
use crate::rngs;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Learning task of the experiment; decides label semantics and loss kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Kind of data-quality degradation applied to a node's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityKind {
    /// A `zeta` fraction of rows receive i.i.d. N(0,1) added to every feature.
    FeatureNoise,
    /// A `zeta` fraction of rows have the label flipped to a random other class.
    LabelNoise,
    /// Batch size is scaled by the multiplier stored in `zeta`.
    Quantity,
    /// A `zeta` fraction of rows have a random 50% of their features zeroed.
    MissingValues,
    /// No degradation.
    Clean,
}

/// Per-node degradation level.
///
/// For noise/missing kinds `zeta` is the affected fraction in [0,1]; for
/// `Quantity` it is a positive relative batch-size multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitySpec {
    pub kind: QualityKind,
    pub zeta: f64,
}

impl QualitySpec {
    pub fn clean() -> Self {
        QualitySpec { kind: QualityKind::Clean, zeta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            QualityKind::Quantity => {
                if !self.zeta.is_finite() || self.zeta <= 0.0 {
                    return Err(Error::Config(format!(
                        "quantity multiplier must be positive and finite, got {}",
                        self.zeta
                    )));
                }
            }
            QualityKind::Clean => {}
            _ => {
                if !(0.0..=1.0).contains(&self.zeta) {
                    return Err(Error::Config(format!(
                        "zeta must lie in [0,1], got {}",
                        self.zeta
                    )));
                }
            }
        }
        Ok(())
    }

    /// Quality level as reported in fairness metrics: for `Quantity` the
    /// recorded level is the negative of the size multiplier (less data means
    /// lower quality), for everything else it is `zeta` itself.
    pub fn recorded_zeta(&self) -> f64 {
        match self.kind {
            QualityKind::Quantity => -self.zeta,
            _ => self.zeta,
        }
    }
}

/// A simulated participant's data-side identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: usize,
    pub quality: QualitySpec,
    /// Data-size weighted aggregation coefficient; the profiles of one
    /// experiment must sum to 1.
    pub weight_p: f64,
    pub stream_seed: u64,
}

/// Batch labels: class indices for classification, real targets for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One iteration's worth of data for a single node (or a pooled union).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `rows x d` feature matrix.
    pub features: Vec<Vec<f64>>,
    pub labels: Labels,
    pub iteration: u64,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Concatenates batches (used for the pooled evaluation set).
    pub fn pooled(batches: &[Batch], iteration: u64) -> Batch {
        let mut features = Vec::new();
        let mut classes: Vec<usize> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut is_classes = true;
        for b in batches {
            features.extend(b.features.iter().cloned());
            match &b.labels {
                Labels::Classes(v) => classes.extend(v.iter().copied()),
                Labels::Values(v) => {
                    is_classes = false;
                    values.extend(v.iter().copied());
                }
            }
        }
        let labels = if is_classes { Labels::Classes(classes) } else { Labels::Values(values) };
        Batch { features, labels, iteration }
    }
}

/// Stationary base sampler shared by all nodes of an experiment.
#[derive(Debug, Clone)]
pub enum BaseGenerator {
    /// One Gaussian component per class, fixed means, unit within-class variance.
    GaussianMixture { dim: usize, n_classes: usize, means: Vec<Vec<f64>> },
    /// Fixed linear model with Gaussian residual.
    LinearModel { dim: usize, weights: Vec<f64>, bias: f64, noise_sigma: f64 },
    /// In-memory table sampled i.i.d. with replacement (CSV ingestion).
    Table { dim: usize, n_classes: usize, features: Vec<Vec<f64>>, labels: Labels },
}

/// Within-class standard deviation of the Gaussian mixture.
const MIXTURE_SIGMA: f64 = 1.0;
/// Spread of the mixture's class means.
const MIXTURE_MEAN_SCALE: f64 = 2.5;
/// Residual standard deviation of the linear regression generator.
pub const REGRESSION_NOISE_SIGMA: f64 = 0.1;

/// Builds the experiment's stationary sampler. Identical
/// `(task, d, n_classes, seed)` produce identical streams.
pub fn make_base_generator(
    task: Task,
    d: usize,
    n_classes: usize,
    seed: u64,
) -> Result<BaseGenerator> {
    if d < 1 {
        return Err(Error::Config("feature dimension must be >= 1".into()));
    }
    let mut rng = rngs::stream(seed, "genmodel", 0, 0);
    match task {
        Task::Classification => {
            if n_classes < 2 {
                return Err(Error::Config("classification needs n_classes >= 2".into()));
            }
            let means = (0..n_classes)
                .map(|_| {
                    (0..d)
                        .map(|_| MIXTURE_MEAN_SCALE * sample_normal(&mut rng))
                        .collect()
                })
                .collect();
            Ok(BaseGenerator::GaussianMixture { dim: d, n_classes, means })
        }
        Task::Regression => {
            let weights = (0..d).map(|_| sample_normal(&mut rng)).collect();
            let bias = 0.5 * sample_normal(&mut rng);
            Ok(BaseGenerator::LinearModel {
                dim: d,
                weights,
                bias,
                noise_sigma: REGRESSION_NOISE_SIGMA,
            })
        }
    }
}

/// Loads a CSV table as a base generator: first row is a header, last column
/// is the label, all other columns are real-valued features.
pub fn generator_from_csv(path: &Path, task: Task) -> Result<BaseGenerator> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Config(
                "csv rows need at least one feature column and one label column".into(),
            ));
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for field in record.iter().take(record.len() - 1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!("non-numeric feature value {field:?} in csv"))
            })?;
            if !v.is_finite() {
                return Err(Error::Config("non-finite feature value in csv".into()));
            }
            row.push(v);
        }
        let label: f64 = record
            .iter()
            .next_back()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Config("non-numeric label value in csv".into()))?;
        features.push(row);
        raw_labels.push(label);
    }
    if features.is_empty() {
        return Err(Error::Config("csv contains no data rows".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|r| r.len() != dim) {
        return Err(Error::Config("csv rows have inconsistent column counts".into()));
    }
    match task {
        Task::Classification => {
            let classes: Vec<usize> = raw_labels
                .iter()
                .map(|&l| {
                    if l.fract() == 0.0 && l >= 0.0 {
                        Ok(l as usize)
                    } else {
                        Err(Error::Config(format!(
                            "classification label {l} is not a nonnegative integer"
                        )))
                    }
                })
                .collect::<Result<_>>()?;
            let n_classes = classes.iter().max().copied().unwrap_or(0) + 1;
            if n_classes < 2 {
                return Err(Error::Config("csv labels contain fewer than 2 classes".into()));
            }
            Ok(BaseGenerator::Table { dim, n_classes, features, labels: Labels::Classes(classes) })
        }
        Task::Regression => Ok(BaseGenerator::Table {
            dim,
            n_classes: 0,
            features,
            labels: Labels::Values(raw_labels),
        }),
    }
}

impl BaseGenerator {
    pub fn dim(&self) -> usize {
        match self {
            BaseGenerator::GaussianMixture { dim, .. }
            | BaseGenerator::LinearModel { dim, .. }
            | BaseGenerator::Table { dim, .. } => *dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            BaseGenerator::GaussianMixture { n_classes, .. }
            | BaseGenerator::Table { n_classes, .. } => *n_classes,
            BaseGenerator::LinearModel { .. } => 0,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            BaseGenerator::GaussianMixture { .. } => Task::Classification,
            BaseGenerator::LinearModel { .. } => Task::Regression,
            BaseGenerator::Table { labels, .. } => match labels {
                Labels::Classes(_) => Task::Classification,
                Labels::Values(_) => Task::Regression,
            },
        }
    }

    /// Draws `rows` fresh samples from the stationary distribution.
    pub fn sample(&self, rng: &mut ChaCha8Rng, rows: usize, iteration: u64) -> Batch {
        match self {
            BaseGenerator::GaussianMixture { dim, n_classes, means } => {
                let mut features = Vec::with_capacity(rows);
                let mut classes = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let c = rng.gen_range(0..*n_classes);
                    let x: Vec<f64> = (0..*dim)
                        .map(|j| means[c][j] + MIXTURE_SIGMA * sample_normal(rng))
                        .collect();
                    features.push(x);
                    classes.push(c);
                }
                Batch { features, labels: Labels::Classes(classes), iteration }
            }
            BaseGenerator::LinearModel { dim, weights, bias, noise_sigma } => {
                let mut features = Vec::with_capacity(rows);
                let mut values = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let x: Vec<f64> = (0..*dim).map(|_| sample_normal(rng)).collect();
                    let y = dot(weights, &x) + bias + noise_sigma * sample_normal(rng);
                    features.push(x);
                    values.push(y);
                }
                Batch { features, labels: Labels::Values(values), iteration }
            }
            BaseGenerator::Table { features, labels, .. } => {
                let n = features.len();
                let mut out_features = Vec::with_capacity(rows);
                let mut classes = Vec::new();
                let mut values = Vec::new();
                for _ in 0..rows {
                    let idx = rng.gen_range(0..n);
                    out_features.push(features[idx].clone());
                    match labels {
                        Labels::Classes(v) => classes.push(v[idx]),
                        Labels::Values(v) => values.push(v[idx]),
                    }
                }
                let labels = match labels {
                    Labels::Classes(_) => Labels::Classes(classes),
                    Labels::Values(_) => Labels::Values(values),
                };
                Batch { features: out_features, labels, iteration }
            }
        }
    }
}

/// Fresh degraded batch for node `profile` at iteration `t`. A pure function
/// of `(profile, generator, t, batch_size)`: the draw and the degradation use
/// streams derived from `(stream_seed, t)`, never shared sequential state.
pub fn next_batch(
    profile: &NodeProfile,
    generator: &BaseGenerator,
    t: u64,
    batch_size: usize,
) -> Result<Batch> {
    if t < 1 {
        return Err(Error::Contract("iterations are 1-based".into()));
    }
    let rows = match profile.quality.kind {
        QualityKind::Quantity => {
            ((batch_size as f64) * profile.quality.zeta).round().max(1.0) as usize
        }
        _ => batch_size,
    };
    let mut data_rng = rngs::stream(profile.stream_seed, "batch", profile.node_id as u64, t);
    let raw = generator.sample(&mut data_rng, rows, t);
    let mut degrade_rng = rngs::stream(profile.stream_seed, "degrade", profile.node_id as u64, t);
    degrade(raw, &profile.quality, generator.n_classes(), &mut degrade_rng)
}

/// Applies the quality degradation to a batch. Row selection is per-row
/// Bernoulli(zeta), so the affected fraction matches zeta in expectation and
/// is stationary across iterations.
pub fn degrade(
    mut batch: Batch,
    quality: &QualitySpec,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    quality.validate()?;
    match quality.kind {
        QualityKind::Clean | QualityKind::Quantity => Ok(batch),
        QualityKind::FeatureNoise => {
            for row in batch.features.iter_mut() {
                if rng.gen::<f64>() < quality.zeta {
                    for x in row.iter_mut() {
                        *x += sample_normal(rng);
                    }
                }
            }
            Ok(batch)
        }
        QualityKind::LabelNoise => {
            let classes = match &mut batch.labels {
                Labels::Classes(v) => v,
                Labels::Values(_) => {
                    return Err(Error::Config(
                        "label noise is undefined for regression targets".into(),
                    ))
                }
            };
            if n_classes < 2 {
                return Err(Error::Config("label noise needs at least 2 classes".into()));
            }
            for label in classes.iter_mut() {
                if rng.gen::<f64>() < quality.zeta {
                    // Resample uniformly among the n_classes - 1 wrong labels.
                    let shift = rng.gen_range(1..n_classes);
                    *label = (*label + shift) % n_classes;
                }
            }
            Ok(batch)
        }
        QualityKind::MissingValues => {
            let d = batch.dim();
            let zeroed = d / 2;
            let mut positions: Vec<usize> = (0..d).collect();
            for row in batch.features.iter_mut() {
                if rng.gen::<f64>() < quality.zeta {
                    positions.shuffle(rng);
                    for &j in positions.iter().take(zeroed) {
                        row[j] = 0.0;
                    }
                }
            }
            Ok(batch)
        }
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
