//! Experiment configuration: TOML schema, validation, and derived objects.
//!
//! One experiment per file. Unknown keys are rejected so typos fail loudly
//! instead of silently running a different experiment.

use crate::datagen::{NodeProfile, QualityKind, QualitySpec, Task};
use crate::error::{Error, Result};
use crate::learner::{LossKind, LossSpec};
use crate::rngs;
use crate::stopping::StoppingConfig;
use crate::valuation::UtilityMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Explore (contribution evaluation) then exploit (incentive sampling).
    Ours,
    /// Uniform-random k-subset every iteration, no valuation or stopping.
    FedavgUniform,
    /// Every node trains alone on its own stream.
    Standalone,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::FedavgUniform => "fedavg_uniform",
            Mode::Standalone => "standalone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DishonestStrategy {
    /// Honest: keep contributing until the end (identity policy).
    Nonstop,
    /// Predicted stopping iteration drawn uniformly from {0..t_max}.
    Random,
    /// Predicted stopping iteration drawn Poisson with the realized stopping
    /// iteration of the honest run as its rate.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DishonestSection {
    pub node_id: usize,
    pub strategy: DishonestStrategy,
}

fn default_participation() -> f64 {
    1.0
}
fn default_exact_cap() -> usize {
    crate::valuation::EXACT_CAP
}
fn default_repeats() -> usize {
    1
}
fn default_utility() -> UtilityMode {
    UtilityMode::CosineSimilarity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    pub n_nodes: usize,
    /// Nodes sampled per exploitation iteration (with replacement).
    pub k: usize,
    /// Softmax temperature of the incentive sampling distribution.
    pub beta: f64,
    /// Abstract global convergence budget added to every staleness term.
    #[serde(default)]
    pub base_complexity: f64,
    /// Total iteration horizon across both phases.
    pub t_max: u64,
    pub master_seed: u64,
    /// Renormalize aggregation weights over the participating subset instead
    /// of the literal partial sum.
    #[serde(default)]
    pub renormalize_weights: bool,
    /// Per-node per-iteration participation probability during exploration.
    #[serde(default = "default_participation")]
    pub participation_prob: f64,
    #[serde(default = "default_utility")]
    pub utility: UtilityMode,
    /// Largest node count evaluated by exact Shapley enumeration.
    #[serde(default = "default_exact_cap")]
    pub exact_cap: usize,
    /// Independent draws averaged by the linear Shapley estimator.
    #[serde(default = "default_repeats")]
    pub shapley_repeats: usize,
    /// Size of the designated low-quality set for the recall diagnostic;
    /// defaults to 30% of the nodes.
    #[serde(default)]
    pub designated_low: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub task: Task,
    pub input_dim: usize,
    #[serde(default)]
    pub n_classes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: QualityKind,
    /// Per-node degradation level (fraction, or size multiplier for quantity
    /// runs). May be omitted for clean data.
    #[serde(default)]
    pub zeta: Vec<f64>,
    /// Optional CSV table replacing the synthetic generator.
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub stopping: StoppingConfig,
    pub data: DataSection,
    #[serde(default)]
    pub dishonest: Option<DishonestSection>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be positive".into()));
        }
        if e.k == 0 || e.k > e.n_nodes {
            return Err(Error::Config(format!(
                "k must lie in [1, {}], got {}",
                e.n_nodes, e.k
            )));
        }
        if !e.beta.is_finite() || e.beta <= 0.0 {
            return Err(Error::Config("beta must be positive and finite".into()));
        }
        if e.base_complexity < 0.0 {
            return Err(Error::Config("base_complexity must be nonnegative".into()));
        }
        if e.participation_prob.is_nan()
            || e.participation_prob <= 0.0
            || e.participation_prob > 1.0
        {
            return Err(Error::Config("participation_prob must lie in (0,1]".into()));
        }
        if e.shapley_repeats == 0 {
            return Err(Error::Config("shapley_repeats must be at least 1".into()));
        }
        if let Some(d) = e.designated_low {
            if d == 0 || d > e.n_nodes {
                return Err(Error::Config("designated_low must lie in [1, n_nodes]".into()));
            }
        }
        self.loss_spec().validate()?;
        if self.model.task == Task::Classification
            && self.data.csv_path.is_none() && self.model.n_classes < 2 {
                return Err(Error::Config("classification needs n_classes >= 2".into()));
            }
        if self.model.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.input_dim == 0 && self.data.csv_path.is_none() {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        for spec in self.quality_specs()? {
            spec.validate()?;
        }
        if matches!(self.experiment.mode, Mode::Ours) {
            self.stopping.validate(e.n_nodes)?;
            let dim = self.stopping.test_dim(e.n_nodes);
            if e.t_max <= self.stopping.min_iters(dim) as u64 {
                return Err(Error::Config(format!(
                    "t_max must exceed the first testable iteration {}",
                    self.stopping.min_iters(dim)
                )));
            }
        }
        if let Some(d) = &self.dishonest {
            if !matches!(self.experiment.mode, Mode::Ours) {
                return Err(Error::Config(
                    "dishonest-node variants require the explore/exploit mode".into(),
                ));
            }
            if d.node_id >= e.n_nodes {
                return Err(Error::Config(format!(
                    "dishonest node {} out of range",
                    d.node_id
                )));
            }
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: match self.model.task {
                Task::Classification => LossKind::SoftmaxCrossEntropy,
                Task::Regression => LossKind::SquaredError,
            },
            l2_reg: self.model.l2_reg,
            learning_rate: self.model.learning_rate,
        }
    }

    /// Per-node quality specs from the data section.
    pub fn quality_specs(&self) -> Result<Vec<QualitySpec>> {
        let n = self.experiment.n_nodes;
        if self.data.zeta.is_empty() {
            if self.data.kind != QualityKind::Clean {
                return Err(Error::Config(
                    "non-clean data kinds need a per-node zeta vector".into(),
                ));
            }
            return Ok(vec![QualitySpec::clean(); n]);
        }
        if self.data.zeta.len() != n {
            return Err(Error::Config(format!(
                "zeta vector length {} does not match n_nodes {}",
                self.data.zeta.len(),
                n
            )));
        }
        Ok(self
            .data
            .zeta
            .iter()
            .map(|&z| QualitySpec { kind: self.data.kind, zeta: z })
            .collect())
    }

    /// Node profiles with data-size weights: proportional to the quantity
    /// multipliers for quantity runs, uniform otherwise.
    pub fn profiles(&self) -> Result<Vec<NodeProfile>> {
        let specs = self.quality_specs()?;
        let n = self.experiment.n_nodes;
        let weights: Vec<f64> = if self.data.kind == QualityKind::Quantity {
            let total: f64 = specs.iter().map(|s| s.zeta).sum();
            specs.iter().map(|s| s.zeta / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        Ok(specs
            .into_iter()
            .enumerate()
            .map(|(i, quality)| NodeProfile {
                node_id: i,
                quality,
                weight_p: weights[i],
                stream_seed: rngs::subseed(self.experiment.master_seed, "stream", i as u64),
            })
            .collect())
    }

    /// Designated low-quality node set: the configured count (default 30% of
    /// nodes, at least 1) with the highest recorded quality level, ties broken
    /// by node index.
    pub fn designated_low_set(&self) -> Result<Vec<usize>> {
        let n = self.experiment.n_nodes;
        let count = self
            .experiment
            .designated_low
            .unwrap_or_else(|| ((0.3 * n as f64).round() as usize).max(1));
        let specs = self.quality_specs()?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            specs[b]
                .recorded_zeta()
                .total_cmp(&specs[a].recorded_zeta())
                .then(a.cmp(&b))
        });
        let mut set: Vec<usize> = order.into_iter().take(count).collect();
        set.sort_unstable();
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[experiment]
mode = "ours"
n_nodes = 4
k = 2
beta = 0.05
t_max = 60
master_seed = 7

[model]
task = "classification"
input_dim = 3
n_classes = 3
batch_size = 8
learning_rate = 0.05

[stopping]
alpha = 0.5
tau = 6
min_iterations = 12

[data]
kind = "label_noise"
zeta = [0.0, 0.1, 0.2, 0.3]
"#;

    #[test]
    fn sample_config_parses_and_validates() {
        let config = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(config.experiment.n_nodes, 4);
        assert_eq!(config.experiment.participation_prob, 1.0);
        let profiles = config.profiles().unwrap();
        let total: f64 = profiles.iter().map(|p| p.weight_p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(config.designated_low_set().unwrap(), vec![3]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replace("master_seed = 7", "master_seed = 7\nbogus_key = 1");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(matches!(err, Error::TomlParse(_)), "got {err}");
    }

    #[test]
    fn zeta_length_must_match() {
        let bad = SAMPLE.replace("zeta = [0.0, 0.1, 0.2, 0.3]", "zeta = [0.0, 0.1]");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn k_bounds_are_checked() {
        let bad = SAMPLE.replace("k = 2", "k = 9");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn quantity_weights_follow_multipliers() {
        let toml = SAMPLE
            .replace("kind = \"label_noise\"", "kind = \"quantity\"")
            .replace("zeta = [0.0, 0.1, 0.2, 0.3]", "zeta = [1.0, 1.0, 2.0, 4.0]");
        let config = ExperimentConfig::from_toml_str(&toml).unwrap();
        let profiles = config.profiles().unwrap();
        assert!((profiles[3].weight_p - 0.5).abs() < 1e-12);
        // Recorded quality is the negative multiplier: the smallest nodes are
        // the designated low-quality ones.
        assert_eq!(config.designated_low_set().unwrap(), vec![0]);
    }

    #[test]
    fn dishonest_requires_ours_mode() {
        let full = format!("{SAMPLE}\n[dishonest]\nnode_id = 0\nstrategy = \"random\"\n");
        assert!(ExperimentConfig::from_toml_str(&full).is_ok());
        let off = full.replace("mode = \"ours\"", "mode = \"standalone\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&off), Err(Error::Config(_))));
    }
}
