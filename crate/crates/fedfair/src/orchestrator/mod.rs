//! The explore-then-exploit protocol loop, baselines, and variant handling.
//!
//! An experiment is a pure function of its configuration: every random draw
//! comes from a stream derived from the master seed and a purpose label, so
//! identical configurations reproduce identical reports byte for byte.
//!
//! Exploration runs with full participation (or a Bernoulli subset under the
//! unstable-connection variant), evaluates per-iteration Shapley
//! contributions, and ends when the Hotelling stopping test fires.
//! Exploitation freezes the contribution estimates, builds the sampling plan,
//! and synchronizes a sampled subset of nodes each iteration while tracking
//! staleness.

pub mod config;

use crate::datagen::{next_batch, make_base_generator, generator_from_csv, BaseGenerator, Batch, NodeProfile};
use crate::error::{Error, Result};
use crate::incentive::{sample_subset, SamplingPlan, StalenessTracker};
use crate::learner::{aggregate, apply_update, grad, loss, GradientUpdate, LossSpec, ModelParams};
use crate::metrics::{
    equality_spread, online_performance, pearson, AggregateReport, NodeReport, RunReport, TraceRow,
};
use crate::rngs;
use crate::stopping::{recall_fraction, should_stop, subsample_nodes};
use crate::valuation::{exact_shapley, linear_shapley, ContributionLedger};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::BTreeSet;

pub use config::{DishonestSection, DishonestStrategy, ExperimentConfig, Mode};

/// Gradient-upload transform of the dishonest-node policy: the true gradient
/// up to and including the predicted stopping iteration, the zero vector
/// afterwards. `policy` is `(node_id, predicted_stop)`.
pub fn apply_dishonest_policy(
    update: GradientUpdate,
    policy: Option<(usize, u64)>,
    t: u64,
) -> GradientUpdate {
    match policy {
        Some((node, cutoff)) if node == update.node_id && t > cutoff => GradientUpdate {
            delta: vec![0.0; update.delta.len()],
            node_id: update.node_id,
            iteration: update.iteration,
        },
        _ => update,
    }
}

/// Executes the configured experiment and assembles its report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let engine = Engine::new(config)?;
    match config.experiment.mode {
        Mode::Ours => engine.run_ours(),
        Mode::FedavgUniform => engine.run_fedavg(),
        Mode::Standalone => engine.run_standalone(),
    }
}

struct Engine<'a> {
    config: &'a ExperimentConfig,
    generator: BaseGenerator,
    profiles: Vec<NodeProfile>,
    weights: Vec<f64>,
    loss_spec: LossSpec,
    n: usize,
    param_len: usize,
}

/// Mutable per-run bookkeeping shared by all modes.
struct RunState {
    coordinator: ModelParams,
    node_params: Vec<ModelParams>,
    tracker: StalenessTracker,
    trace: Vec<TraceRow>,
    node_loss_hist: Vec<Vec<f64>>,
    ledger: Option<ContributionLedger>,
}

impl RunState {
    fn new(n: usize, param_len: usize) -> Self {
        RunState {
            coordinator: ModelParams::zeros(param_len),
            node_params: vec![ModelParams::zeros(param_len); n],
            tracker: StalenessTracker::new(n, 0),
            trace: Vec::new(),
            node_loss_hist: vec![Vec::new(); n],
            ledger: None,
        }
    }
}

impl<'a> Engine<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let generator = match &config.data.csv_path {
            Some(path) => generator_from_csv(path, config.model.task)?,
            None => make_base_generator(
                config.model.task,
                config.model.input_dim,
                config.model.n_classes,
                rngs::subseed(config.experiment.master_seed, "generator", 0),
            )?,
        };
        let profiles = config.profiles()?;
        let weights: Vec<f64> = profiles.iter().map(|p| p.weight_p).collect();
        let loss_spec = config.loss_spec();
        let param_len = loss_spec.param_len(generator.dim(), generator.n_classes());
        Ok(Engine {
            config,
            generator,
            profiles,
            weights,
            loss_spec,
            n: config.experiment.n_nodes,
            param_len,
        })
    }

    fn seed(&self) -> u64 {
        self.config.experiment.master_seed
    }

    fn batches_at(&self, t: u64) -> Result<Vec<Batch>> {
        self.profiles
            .iter()
            .map(|p| next_batch(p, &self.generator, t, self.config.model.batch_size))
            .collect()
    }

    /// Evaluates every node's current model and the coordinator model on the
    /// pooled batch, recording the per-node validation losses.
    fn evaluate(&self, state: &mut RunState, pooled: &Batch) -> Result<(Vec<f64>, f64)> {
        let mut node_losses = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let l = loss(&state.node_params[i], pooled, &self.loss_spec)?;
            state.node_loss_hist[i].push(l);
            node_losses.push(l);
        }
        let global = loss(&state.coordinator, pooled, &self.loss_spec)?;
        Ok((node_losses, global))
    }

    /// Aggregation weights over a participant set, renormalized when the
    /// configuration asks for it (the literal protocol sums the raw p_i).
    fn aggregation_weights(&self, participants: &BTreeSet<usize>) -> Vec<f64> {
        if !self.config.experiment.renormalize_weights {
            return self.weights.clone();
        }
        let total: f64 = participants.iter().map(|&i| self.weights[i]).sum();
        if total <= 0.0 {
            return self.weights.clone();
        }
        self.weights.iter().map(|w| w / total).collect()
    }

    /// One synchronize-train-upload round for a participant set: local models
    /// sync to the coordinator, train one batch step, and upload their scaled
    /// gradients (zeroed past the dishonest node's predicted cutoff).
    fn local_round(
        &self,
        state: &mut RunState,
        batches: &[Batch],
        participants: &BTreeSet<usize>,
        t: u64,
        dishonest_cutoff: Option<(usize, u64)>,
    ) -> Result<Vec<GradientUpdate>> {
        let mut uploads = Vec::with_capacity(participants.len());
        for &i in participants {
            let true_update = grad(&state.coordinator, &batches[i], &self.loss_spec, i, t)?;
            // The node trains its own replica with its true gradient; only
            // the upload is subject to the dishonest policy.
            state.node_params[i] = apply_update(&state.coordinator, &true_update)?;
            uploads.push(apply_dishonest_policy(true_update, dishonest_cutoff, t));
        }
        Ok(uploads)
    }

    fn apply_aggregate(
        &self,
        state: &mut RunState,
        uploads: &[GradientUpdate],
        participants: &BTreeSet<usize>,
        t: u64,
    ) -> Result<()> {
        let agg = if participants.is_empty() {
            GradientUpdate { delta: vec![0.0; self.param_len], node_id: usize::MAX, iteration: t }
        } else {
            let weights = self.aggregation_weights(participants);
            aggregate(uploads, &weights, participants)?
        };
        state.coordinator = apply_update(&state.coordinator, &agg)?;
        Ok(())
    }

    /// Per-iteration Shapley contributions over the participating sub-game;
    /// absent nodes contribute zero this iteration.
    fn contributions(
        &self,
        uploads: &[GradientUpdate],
        participants: &BTreeSet<usize>,
        t: u64,
    ) -> Result<Vec<f64>> {
        let mut phi = vec![0.0; self.n];
        if participants.is_empty() {
            return Ok(phi);
        }
        let mode = self.config.experiment.utility;
        let values = if participants.len() <= self.config.experiment.exact_cap {
            exact_shapley(uploads, &self.weights, mode)?
        } else {
            let mut rng = rngs::stream(self.seed(), "shapley", 0, t);
            linear_shapley(
                uploads,
                &self.weights,
                mode,
                &mut rng,
                self.config.experiment.shapley_repeats,
            )?
        };
        for (u, v) in uploads.iter().zip(values) {
            phi[u.node_id] = v;
        }
        Ok(phi)
    }

    fn explore_participants(&self, t: u64) -> BTreeSet<usize> {
        let p = self.config.experiment.participation_prob;
        if p >= 1.0 {
            return (0..self.n).collect();
        }
        (0..self.n)
            .filter(|&i| rngs::stream(self.seed(), "participate", i as u64, t).gen::<f64>() < p)
            .collect()
    }

    /// Predicted contribution-stop iteration for the dishonest node, if any.
    fn dishonest_cutoff(&self) -> Result<Option<(usize, u64)>> {
        let section = match &self.config.dishonest {
            Some(s) => s,
            None => return Ok(None),
        };
        let t_max = self.config.experiment.t_max;
        let cutoff = match section.strategy {
            DishonestStrategy::Nonstop => u64::MAX,
            DishonestStrategy::Random => {
                let mut rng = rngs::stream(self.seed(), "dishonest", section.node_id as u64, 0);
                rng.gen_range(0..=t_max)
            }
            DishonestStrategy::Poisson => {
                // Clairvoyant rate: the stopping iteration of the honest run
                // under the same seeds.
                let honest_t_alpha = self.pilot_honest_t_alpha()?;
                let mut rng = rngs::stream(self.seed(), "dishonest", section.node_id as u64, 0);
                let draw: f64 = Poisson::new(honest_t_alpha as f64)
                    .map_err(|e| Error::Config(format!("poisson rate: {e}")))?
                    .sample(&mut rng);
                (draw.round() as u64).min(t_max)
            }
        };
        Ok(Some((section.node_id, cutoff)))
    }

    /// Runs the exploration phase honestly to learn its stopping iteration.
    fn pilot_honest_t_alpha(&self) -> Result<u64> {
        let mut state = RunState::new(self.n, self.param_len);
        let (t_alpha, _) = self.explore_phase(&mut state, None)?;
        Ok(t_alpha)
    }

    /// Exploration: full (or Bernoulli-subset) participation with
    /// contribution evaluation until the stopping test fires or the horizon
    /// runs out. Returns the stopping iteration and whether it was truncated.
    fn explore_phase(
        &self,
        state: &mut RunState,
        dishonest_cutoff: Option<(usize, u64)>,
    ) -> Result<(u64, bool)> {
        let stopping = &self.config.stopping;
        let tested_nodes = match stopping.subsample_m {
            Some(m) => {
                let mut rng = rngs::stream(self.seed(), "subsample", 0, 0);
                subsample_nodes(self.n, m, &mut rng)?
            }
            None => (0..self.n).collect(),
        };
        let min_t = stopping.min_iters(self.n) as u64;
        let mut ledger = ContributionLedger::new(self.n);
        let t_max = self.config.experiment.t_max;
        for t in 1..=t_max {
            let batches = self.batches_at(t)?;
            let pooled = Batch::pooled(&batches, t);
            let (node_losses, global_loss) = self.evaluate(state, &pooled)?;
            let participants = self.explore_participants(t);
            let uploads = self.local_round(state, &batches, &participants, t, dishonest_cutoff)?;
            let phi = self.contributions(&uploads, &participants, t)?;
            ledger.push(phi)?;
            let delta_psi = if ledger.t_count() >= 2 { Some(ledger.fluctuation()?) } else { None };
            self.apply_aggregate(state, &uploads, &participants, t)?;
            state.tracker.step(&participants, t)?;
            let verdict = if t >= min_t {
                Some(should_stop(ledger.history(), &tested_nodes, stopping)?)
            } else {
                None
            };
            let stop = verdict.as_ref().is_some_and(|v| v.stop);
            state.trace.push(TraceRow {
                iteration: t,
                phase: "explore".into(),
                global_loss,
                p_value: verdict.map(|v| v.p_value),
                delta_psi,
                node_loss: node_losses,
                node_staleness: state.tracker.history().last().unwrap().clone(),
            });
            if stop {
                state.ledger = Some(ledger);
                return Ok((t, false));
            }
        }
        state.ledger = Some(ledger);
        Ok((t_max, true))
    }

    /// Exploitation: contribution-proportional sampling with frozen
    /// estimates; selected nodes synchronize, train, and upload.
    fn exploit_phase(
        &self,
        state: &mut RunState,
        plan: &SamplingPlan,
        t_alpha: u64,
        dishonest_cutoff: Option<(usize, u64)>,
    ) -> Result<()> {
        let t_max = self.config.experiment.t_max;
        let k = self.config.experiment.k;
        for t in t_alpha + 1..=t_max {
            let batches = self.batches_at(t)?;
            let pooled = Batch::pooled(&batches, t);
            let (node_losses, global_loss) = self.evaluate(state, &pooled)?;
            // k == N degenerates to full participation: with-replacement
            // sampling cannot cover all nodes, but a full-size subset means
            // everyone synchronizes.
            let selected: BTreeSet<usize> = if k == self.n {
                (0..self.n).collect()
            } else {
                let mut rng = rngs::stream(self.seed(), "select", 0, t);
                sample_subset(&plan.rho, k, &mut rng)?.into_iter().collect()
            };
            let uploads = self.local_round(state, &batches, &selected, t, dishonest_cutoff)?;
            self.apply_aggregate(state, &uploads, &selected, t)?;
            state.tracker.step(&selected, t)?;
            state.trace.push(TraceRow {
                iteration: t,
                phase: "exploit".into(),
                global_loss,
                p_value: None,
                delta_psi: None,
                node_loss: node_losses,
                node_staleness: state.tracker.history().last().unwrap().clone(),
            });
        }
        Ok(())
    }

    fn run_ours(&self) -> Result<RunReport> {
        let dishonest_cutoff = self.dishonest_cutoff()?;
        let mut state = RunState::new(self.n, self.param_len);
        let (t_alpha, truncated) = self.explore_phase(&mut state, dishonest_cutoff)?;
        let ledger = state.ledger.take().expect("explore phase installs the ledger");
        let psi_frozen = ledger.psi().to_vec();
        let plan = SamplingPlan::build(
            &psi_frozen,
            self.config.experiment.beta,
            self.config.experiment.k,
            self.config.experiment.base_complexity,
        )?;
        self.exploit_phase(&mut state, &plan, t_alpha, dishonest_cutoff)?;
        self.build_report(state, Some(psi_frozen), Some(t_alpha), truncated, true)
    }

    fn run_fedavg(&self) -> Result<RunReport> {
        let mut state = RunState::new(self.n, self.param_len);
        let k = self.config.experiment.k;
        for t in 1..=self.config.experiment.t_max {
            let batches = self.batches_at(t)?;
            let pooled = Batch::pooled(&batches, t);
            let (node_losses, global_loss) = self.evaluate(&mut state, &pooled)?;
            let selected: BTreeSet<usize> = {
                let mut rng = rngs::stream(self.seed(), "select", 0, t);
                rand::seq::index::sample(&mut rng, self.n, k).into_iter().collect()
            };
            let uploads = self.local_round(&mut state, &batches, &selected, t, None)?;
            self.apply_aggregate(&mut state, &uploads, &selected, t)?;
            state.tracker.step(&selected, t)?;
            state.trace.push(TraceRow {
                iteration: t,
                phase: "fedavg".into(),
                global_loss,
                p_value: None,
                delta_psi: None,
                node_loss: node_losses,
                node_staleness: state.tracker.history().last().unwrap().clone(),
            });
        }
        self.build_report(state, None, None, false, true)
    }

    fn run_standalone(&self) -> Result<RunReport> {
        let mut state = RunState::new(self.n, self.param_len);
        for t in 1..=self.config.experiment.t_max {
            let batches = self.batches_at(t)?;
            let pooled = Batch::pooled(&batches, t);
            let mut node_losses = Vec::with_capacity(self.n);
            for i in 0..self.n {
                let l = loss(&state.node_params[i], &pooled, &self.loss_spec)?;
                state.node_loss_hist[i].push(l);
                node_losses.push(l);
            }
            // No coordinator model: report the p-weighted local loss.
            let global_loss: f64 =
                node_losses.iter().zip(&self.weights).map(|(l, w)| l * w).sum();
            for (i, (params, batch)) in state.node_params.iter_mut().zip(&batches).enumerate() {
                let update = grad(params, batch, &self.loss_spec, i, t)?;
                *params = apply_update(params, &update)?;
            }
            state.trace.push(TraceRow {
                iteration: t,
                phase: "standalone".into(),
                global_loss,
                p_value: None,
                delta_psi: None,
                node_loss: node_losses,
                node_staleness: vec![0; self.n],
            });
        }
        self.build_report(state, None, None, false, false)
    }

    fn build_report(
        &self,
        state: RunState,
        psi_final: Option<Vec<f64>>,
        t_alpha: Option<u64>,
        truncated: bool,
        staleness_tracked: bool,
    ) -> Result<RunReport> {
        let zetas: Vec<f64> =
            self.profiles.iter().map(|p| p.quality.recorded_zeta()).collect();
        let staleness_avgs = state.tracker.running_avg();
        let final_window = 10usize;
        let mut per_node = Vec::with_capacity(self.n);
        let mut online = Vec::with_capacity(self.n);
        let mut finals = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let hist = &state.node_loss_hist[i];
            let online_loss = online_performance(hist)?;
            let tail = &hist[hist.len().saturating_sub(final_window)..];
            let final_loss = online_performance(tail)?;
            online.push(online_loss);
            finals.push(final_loss);
            per_node.push(NodeReport {
                node_id: i,
                zeta: zetas[i],
                psi_final: psi_final.as_ref().map(|p| p[i]),
                avg_staleness: staleness_tracked.then(|| staleness_avgs[i]),
                online_loss,
                final_loss,
            });
        }
        let recall = match &psi_final {
            Some(psi) => {
                let low: BTreeSet<usize> =
                    self.config.designated_low_set()?.into_iter().collect();
                Some(recall_fraction(psi, &low)?)
            }
            None => None,
        };
        let online_spread = equality_spread(&online)?;
        let final_spread = equality_spread(&finals)?;
        let aggregate = AggregateReport {
            pearson_loss_zeta: pearson(&online, &zetas).ok(),
            pearson_staleness_zeta: if staleness_tracked {
                pearson(&staleness_avgs, &zetas).ok()
            } else {
                None
            },
            recall_fraction: recall,
            std_online_loss: online_spread.std,
            min_online_loss: online_spread.min,
            max_online_loss: online_spread.max,
            std_final_loss: final_spread.std,
            t_alpha,
            t_total: state.trace.len() as u64,
            exploration_truncated: truncated,
        };
        Ok(RunReport {
            mode: self.config.experiment.mode.as_str().to_string(),
            seed: self.seed(),
            per_node,
            aggregate,
            trajectories: state.trace,
        })
    }
}
