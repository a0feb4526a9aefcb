//! Counterfactual policy optimization: mini-batch gradient descent on any
//! objective, with SGD or Adadelta and validation-based checkpoint selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance, LogEntry, Split};
use crate::error::{Error, Result};
use crate::estimators::{estimate_with_gradient, Batch, Objective};
use crate::metrics::{corpus_bleu_from_stats, BleuStats};
use crate::numeric::{norm, seeded_rng};
use crate::policy::GibbsPolicy;
use crate::reward_model::{RewardPredictor, Tabulated};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { learning_rate: f64 },
    Adadelta { rho: f64, epsilon: f64 },
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd { learning_rate }
    }

    pub fn adadelta() -> Self {
        OptimizerConfig::Adadelta {
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    /// Record a checkpoint every this many batches.
    pub eval_every: usize,
    pub seed: u64,
    /// Normalize probabilities over at most this many top-scoring candidates.
    pub nbest_cap: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::ChatDc,
            batch_size: 500,
            optimizer: OptimizerConfig::sgd(0.5),
            max_epochs: 20,
            eval_every: 1,
            seed: 0,
            nbest_cap: Some(1000),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        match self.optimizer {
            OptimizerConfig::Sgd { learning_rate } if !(learning_rate >= 0.0) => {
                Err(Error::Config(format!("learning rate must be >= 0, got {learning_rate}")))
            }
            OptimizerConfig::Adadelta { rho, epsilon }
                if !(0.0..1.0).contains(&rho) || !(epsilon > 0.0) =>
            {
                Err(Error::Config("adadelta needs rho in [0, 1) and epsilon > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Smallest trailing batch that is still used.
    pub fn min_partial_batch(&self) -> usize {
        2.max(self.batch_size / 10)
    }
}

/// `w − η g`
pub fn sgd_step(weights: &[f64], gradient: &[f64], learning_rate: f64) -> Result<Vec<f64>> {
    check_finite(weights, gradient)?;
    if weights.len() != gradient.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: gradient.len(),
        });
    }
    Ok(weights
        .iter()
        .zip(gradient)
        .map(|(w, g)| w - learning_rate * g)
        .collect())
}

fn check_finite(weights: &[f64], gradient: &[f64]) -> Result<()> {
    if weights.iter().chain(gradient).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optimizer input".into()));
    }
    Ok(())
}

/// Running averages `E[g²]` and `E[Δw²]` per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaState {
    pub rho: f64,
    pub epsilon: f64,
    pub mean_sq_grad: Vec<f64>,
    pub mean_sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(dim: usize, rho: f64, epsilon: f64) -> Self {
        Self {
            rho,
            epsilon,
            mean_sq_grad: vec![0.0; dim],
            mean_sq_update: vec![0.0; dim],
        }
    }
}

pub fn adadelta_step(
    mut state: AdadeltaState,
    weights: &[f64],
    gradient: &[f64],
) -> Result<(AdadeltaState, Vec<f64>)> {
    check_finite(weights, gradient)?;
    if weights.len() != gradient.len() || state.mean_sq_grad.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: gradient.len(),
        });
    }
    let (rho, eps) = (state.rho, state.epsilon);
    let mut out = weights.to_vec();
    for j in 0..weights.len() {
        let g = gradient[j];
        state.mean_sq_grad[j] = rho * state.mean_sq_grad[j] + (1.0 - rho) * g * g;
        let update = -((state.mean_sq_update[j] + eps).sqrt() / (state.mean_sq_grad[j] + eps).sqrt()) * g;
        state.mean_sq_update[j] = rho * state.mean_sq_update[j] + (1.0 - rho) * update * update;
        out[j] += update;
    }
    Ok((state, out))
}

enum Optimizer {
    Sgd(f64),
    Adadelta(Option<AdadeltaState>),
}

impl Optimizer {
    fn new(config: &OptimizerConfig, dim: usize) -> Self {
        match *config {
            OptimizerConfig::Sgd { learning_rate } => Optimizer::Sgd(learning_rate),
            OptimizerConfig::Adadelta { rho, epsilon } => {
                Optimizer::Adadelta(Some(AdadeltaState::new(dim, rho, epsilon)))
            }
        }
    }

    fn step(&mut self, weights: &[f64], gradient: &[f64]) -> Result<Vec<f64>> {
        match self {
            Optimizer::Sgd(eta) => sgd_step(weights, gradient, *eta),
            Optimizer::Adadelta(state) => {
                let (next, w) = adadelta_step(state.take().expect("state present"), weights, gradient)?;
                *state = Some(next);
                Ok(w)
            }
        }
    }
}

/// One-best corpus BLEU of policies on a fixed set of instances, with
/// per-candidate BLEU statistics precomputed.
#[derive(Debug, Clone)]
pub struct OneBestScorer<'a> {
    instances: Vec<&'a Instance>,
    stats: Vec<Vec<BleuStats>>,
    max_order: usize,
}

impl<'a> OneBestScorer<'a> {
    pub fn new(instances: impl IntoIterator<Item = &'a Instance>) -> Result<Self> {
        let max_order = crate::metrics::BleuConfig::default().max_order;
        let instances: Vec<&Instance> = instances.into_iter().collect();
        let stats = instances
            .iter()
            .map(|inst| {
                let reference = inst.reference()?;
                if reference.is_empty() {
                    return Err(Error::Empty("reference"));
                }
                Ok(inst
                    .candidates
                    .iter()
                    .map(|c| BleuStats::new(&c.tokens, reference, max_order))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instances,
            stats,
            max_order,
        })
    }

    pub fn for_split(dataset: &'a Dataset, split: Split) -> Result<Self> {
        Self::new(dataset.split(split))
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn onebest(&self, policy: &GibbsPolicy) -> Result<Vec<usize>> {
        self.instances.iter().map(|i| policy.argmax(i)).collect()
    }

    pub fn score(&self, policy: &GibbsPolicy) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let best = self.onebest(policy)?;
        Ok(corpus_bleu_from_stats(
            self.stats.iter().zip(&best).map(|(s, &k)| &s[k]),
            self.max_order,
        ))
    }

    /// Per-segment statistics of the policy's one-best outputs.
    pub fn segment_stats(&self, policy: &GibbsPolicy) -> Result<Vec<BleuStats>> {
        let best = self.onebest(policy)?;
        Ok(self.stats.iter().zip(&best).map(|(s, &k)| s[k].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of optimizer steps taken so far (0 is the initial policy).
    pub batch: usize,
    pub epoch: usize,
    pub objective_value: Option<f64>,
    pub validation_bleu: Option<f64>,
    pub c_hat: Option<f64>,
    pub weight_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub records: Vec<Checkpoint>,
    /// Index into `records` with the highest validation BLEU (earliest on ties).
    pub best_checkpoint: usize,
    pub best_policy: GibbsPolicy,
    pub last_policy: GibbsPolicy,
}

impl TrainTrajectory {
    pub fn best(&self) -> &Checkpoint {
        &self.records[self.best_checkpoint]
    }
}

/// Trains from `initial` on `log`. Checkpoints are scored by one-best corpus
/// BLEU on the dataset's validation split; without validation instances the
/// last checkpoint is returned as best.
pub fn train(
    log: &[LogEntry],
    dataset: &Dataset,
    initial: &GibbsPolicy,
    config: &TrainConfig,
    reward_model: Option<&dyn RewardPredictor>,
) -> Result<TrainTrajectory> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::Empty("training log"));
    }
    let cached;
    let model: Option<&dyn RewardPredictor> = if config.objective.needs_reward_model() {
        let m = reward_model.ok_or(Error::MissingRewardModel(
            config.objective.label(crate::data::LogMode::Deterministic),
        ))?;
        cached = tabulate_logged(m, log, dataset)?;
        Some(&cached)
    } else {
        None
    };
    // validate entries up front
    Batch::new(log, dataset)?;

    let scorer = OneBestScorer::for_split(dataset, Split::Validation)?;
    let validate = |p: &GibbsPolicy| -> Result<Option<f64>> {
        if scorer.is_empty() {
            Ok(None)
        } else {
            scorer.score(p).map(Some)
        }
    };
    let uses_c = config.objective.needs_reward_model();
    let record = |records: &mut Vec<Checkpoint>,
                  best: &mut (usize, GibbsPolicy),
                  policy: &GibbsPolicy,
                  steps: usize,
                  epoch: usize,
                  est: &crate::estimators::Estimate|
     -> Result<()> {
        let bleu = validate(policy)?;
        records.push(Checkpoint {
            batch: steps,
            epoch,
            objective_value: Some(est.value),
            validation_bleu: bleu,
            c_hat: uses_c.then_some(est.diagnostics.c_hat),
            weight_norm: norm(&policy.weights),
        });
        let improves = match (bleu, records[best.0].validation_bleu) {
            (Some(b), Some(cur)) => b > cur,
            _ => true,
        };
        if improves {
            *best = (records.len() - 1, policy.clone());
        }
        Ok(())
    };

    let mut policy = initial.clone().with_nbest_cap(config.nbest_cap.or(initial.nbest_cap))?;
    let mut optimizer = Optimizer::new(&config.optimizer, policy.dim());
    let mut records = vec![Checkpoint {
        batch: 0,
        epoch: 0,
        objective_value: None,
        validation_bleu: validate(&policy)?,
        c_hat: None,
        weight_norm: norm(&policy.weights),
    }];
    let mut best = (0usize, policy.clone());

    let mut rng = seeded_rng(config.seed, 0);
    let mut order: Vec<usize> = (0..log.len()).collect();
    let mut steps = 0;
    let mut pending = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < config.batch_size && chunk.len() < config.min_partial_batch() {
                continue;
            }
            let batch = Batch::new(chunk.iter().map(|&i| &log[i]), dataset)?;
            let (est, grad) = estimate_with_gradient(config.objective, &policy, &batch, model)?;
            policy.weights = optimizer.step(&policy.weights, &grad)?;
            steps += 1;
            pending = Some((epoch, est));
            if steps % config.eval_every == 0 {
                let (epoch, est) = pending.take().expect("just set");
                record(&mut records, &mut best, &policy, steps, epoch, &est)?;
            }
        }
    }
    if let Some((epoch, est)) = pending {
        record(&mut records, &mut best, &policy, steps, epoch, &est)?;
    }
    Ok(TrainTrajectory {
        records,
        best_checkpoint: best.0,
        best_policy: best.1,
        last_policy: policy,
    })
}

/// Evaluates a reward model once on every candidate of every logged instance.
fn tabulate_logged(model: &dyn RewardPredictor, log: &[LogEntry], dataset: &Dataset) -> Result<Tabulated> {
    let mut table = BTreeMap::new();
    for e in log {
        if table.contains_key(&e.instance_id) {
            continue;
        }
        let inst = dataset.instance(e.instance_id)?;
        let row = (0..inst.num_candidates())
            .map(|k| model.predict_candidate(inst, k))
            .collect::<Result<Vec<_>>>()?;
        table.insert(e.instance_id, row);
    }
    Ok(Tabulated::new(table))
}
