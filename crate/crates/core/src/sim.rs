//! Synthetic structured-prediction tasks with enumerable candidate sets.
//!
//! Each input has a hidden reference token sequence. Its candidates are
//! corruptions of the reference at varied noise levels; their features are
//! n-gram overlap statistics against a *noisy proxy* of the reference plus
//! pure-noise dimensions, so a linear policy can only partially order them.
//! Rewards are smoothed sentence BLEU against the true reference, which makes
//! every expected reward exactly computable by enumeration.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, Dataset, Instance, LogEntry, LogMode, Split, Token};
use crate::error::{Error, Result};
use crate::estimators::Objective;
use crate::metrics::{sentence_bleu, BleuConfig, BleuStats};
use crate::numeric::{mean, seeded_rng, CompensatedSum};
use crate::policy::GibbsPolicy;
use crate::reward_model::Tabulated;
use crate::trainer::{train, OneBestScorer, OptimizerConfig, TrainConfig};

/// Number of quality-correlated feature dimensions.
pub const QUALITY_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_train: usize,
    pub num_validation: usize,
    pub num_test: usize,
    /// Candidates per instance (K).
    pub candidates: usize,
    /// Feature dimension (d); dimensions beyond the quality features are noise.
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub ref_length_min: usize,
    pub ref_length_max: usize,
    /// Candidate corruption levels are drawn uniformly from this range.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Corruption level of the proxy reference that features are computed against.
    pub proxy_noise: f64,
    /// Std. dev. of Gaussian jitter added to quality features.
    pub feature_noise: f64,
    /// Std. dev. of the pure-noise features.
    pub noise_feature_scale: f64,
    /// Norm of the oracle weights; the full-information fit sets only their direction.
    pub oracle_weight_scale: f64,
    /// Full-information refinement epochs for the oracle policy.
    pub oracle_epochs: usize,
    pub oracle_learning_rate: f64,
    /// Std. dev. of the perturbation turning oracle weights into logging weights.
    pub logging_weight_perturbation: f64,
    pub alpha: f64,
    /// Required expected-reward advantage of the oracle over the logging policy.
    pub min_margin: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_train: 5000,
            num_validation: 500,
            num_test: 500,
            candidates: 20,
            feature_dim: 16,
            vocab_size: 1000,
            ref_length_min: 8,
            ref_length_max: 24,
            noise_min: 0.0,
            noise_max: 0.6,
            proxy_noise: 0.5,
            feature_noise: 0.15,
            noise_feature_scale: 0.2,
            oracle_weight_scale: 4.0,
            oracle_epochs: 40,
            oracle_learning_rate: 10.0,
            logging_weight_perturbation: 2.0,
            alpha: 5.0,
            min_margin: 0.05,
            max_attempts: 10,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_train == 0 || self.num_validation == 0 || self.num_test == 0 {
            return fail("split sizes must be >= 1");
        }
        if self.candidates == 0 {
            return fail("candidates must be >= 1");
        }
        if self.feature_dim < QUALITY_FEATURES {
            return fail("feature_dim must cover the 6 quality features");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2");
        }
        if self.ref_length_min == 0 || self.ref_length_min > self.ref_length_max {
            return fail("need 1 <= ref_length_min <= ref_length_max");
        }
        if !(0.0 <= self.noise_min && self.noise_min <= self.noise_max && self.noise_max <= 1.0) {
            return fail("need 0 <= noise_min <= noise_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.proxy_noise) {
            return fail("proxy_noise must be in [0, 1]");
        }
        if !(self.feature_noise >= 0.0 && self.noise_feature_scale >= 0.0 && self.logging_weight_perturbation >= 0.0) {
            return fail("noise scales must be >= 0");
        }
        if !(self.oracle_learning_rate >= 0.0) {
            return fail("oracle_learning_rate must be >= 0");
        }
        if !(self.alpha > 0.0) {
            return fail("alpha must be positive");
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Mean over instances of `Σ_y π(y|x) Δ(y)`.
    pub expected_reward: f64,
    /// Corpus BLEU of the policy's one-best outputs.
    pub onebest_corpus_bleu: f64,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub dataset: Dataset,
    pub oracle: GibbsPolicy,
    pub logging: GibbsPolicy,
    /// Seed actually used (differs from the configured one after regeneration).
    pub seed: u64,
}

fn random_token<R: Rng>(rng: &mut R, vocab: usize) -> Token {
    format!("w{}", rng.random_range(0..vocab))
}

/// Substitutes, deletes and inserts tokens at rate `noise`.
fn corrupt<R: Rng>(rng: &mut R, reference: &[Token], noise: f64, vocab: usize) -> Vec<Token> {
    let mut out = Vec::with_capacity(reference.len() + 2);
    for tok in reference {
        let u: f64 = rng.random();
        if u < 0.6 * noise {
            out.push(random_token(rng, vocab));
        } else if u >= 0.8 * noise {
            out.push(tok.clone());
        }
        if rng.random_bool(0.2 * noise) {
            out.push(random_token(rng, vocab));
        }
    }
    if out.is_empty() {
        out.push(random_token(rng, vocab));
    }
    out
}

/// Clipped n-gram precisions (orders 1..4) and unigram recall against
/// `proxy`, plus the length ratio.
fn quality_features(hyp: &[Token], proxy: &[Token]) -> [f64; QUALITY_FEATURES] {
    let s = BleuStats::new(hyp, proxy, 4);
    let prec = |n: usize| {
        if s.totals[n] == 0 {
            0.0
        } else {
            s.matches[n] as f64 / s.totals[n] as f64
        }
    };
    [
        prec(0),
        prec(1),
        prec(2),
        prec(3),
        s.matches[0] as f64 / proxy.len() as f64,
        hyp.len() as f64 / proxy.len() as f64,
    ]
}

fn make_instance(config: &TaskConfig, seed: u64, id: u64, split: Split) -> Instance {
    let mut rng = seeded_rng(seed, id);
    let vocab = config.vocab_size;
    let len = rng.random_range(config.ref_length_min..=config.ref_length_max);
    let reference: Vec<Token> = (0..len).map(|_| random_token(&mut rng, vocab)).collect();
    let proxy = corrupt(&mut rng, &reference, config.proxy_noise, vocab);
    let jitter = Normal::new(0.0, config.feature_noise.max(0.0)).expect("finite std");
    let candidates = (0..config.candidates)
        .map(|_| {
            let noise = if config.noise_max > config.noise_min {
                rng.random_range(config.noise_min..config.noise_max)
            } else {
                config.noise_min
            };
            let tokens = corrupt(&mut rng, &reference, noise, vocab);
            let mut features: Vec<f64> = quality_features(&tokens, &proxy)
                .iter()
                .map(|f| f + jitter.sample(&mut rng))
                .collect();
            features.extend((QUALITY_FEATURES..config.feature_dim).map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                z * config.noise_feature_scale
            }));
            Candidate { tokens, features }
        })
        .collect();
    Instance {
        id,
        split,
        reference: Some(reference),
        candidates,
    }
}

/// Builds the dataset alone (no policies).
pub fn generate_dataset(config: &TaskConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let splits = std::iter::repeat_n(Split::Train, config.num_train)
        .chain(std::iter::repeat_n(Split::Validation, config.num_validation))
        .chain(std::iter::repeat_n(Split::Test, config.num_test));
    let specs: Vec<(u64, Split)> = splits.enumerate().map(|(i, s)| (i as u64, s)).collect();
    let instances: Vec<Instance> = specs
        .par_iter()
        .map(|&(id, split)| make_instance(config, seed, id, split))
        .collect();
    Dataset::new(instances)
}

/// Exact sentence-level rewards of every candidate.
pub fn true_rewards(dataset: &Dataset) -> Result<Tabulated> {
    let bleu = BleuConfig::default();
    let rows = dataset
        .instances()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|inst| {
            let reference = inst.reference()?;
            let row = inst
                .candidates
                .iter()
                .map(|c| sentence_bleu(&c.tokens, reference, &bleu))
                .collect::<Result<Vec<_>>>()?;
            Ok((inst.id, row))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Tabulated::new(rows))
}

/// A reward model built from the truth: `m + scale·(Δ − m) + N(0, noise²)` per
/// candidate, where `m` is the mean true reward. `scale < 1` mimics the
/// shrinkage of fitted regressors.
pub fn synthetic_reward_model(dataset: &Dataset, scale: f64, noise: f64, seed: u64) -> Result<Tabulated> {
    if !(scale.is_finite() && noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("need finite scale and noise >= 0, got {scale}, {noise}")));
    }
    let truth = true_rewards(dataset)?;
    let all: Vec<f64> = dataset.instances().flat_map(|i| truth.row(i.id).expect("tabulated above").to_vec()).collect();
    if all.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let m = mean(&all);
    let dist = Normal::new(0.0, noise).expect("finite std");
    let rows = dataset
        .instances()
        .map(|inst| {
            let mut rng = seeded_rng(seed, inst.id);
            let row = truth.row(inst.id).expect("tabulated above");
            (inst.id, row.iter().map(|r| m + scale * (r - m) + dist.sample(&mut rng)).collect())
        })
        .collect();
    Ok(Tabulated::new(rows))
}

/// Least-squares direction of reward on within-instance centred features,
/// scaled to norm `scale`.
fn regression_direction(dataset: &Dataset, rewards: &Tabulated, scale: f64) -> Result<Vec<f64>> {
    let mut samples = Vec::new();
    for inst in dataset.instances() {
        let row = rewards.row(inst.id).expect("tabulated");
        let d = inst.feature_dim();
        let k = inst.num_candidates() as f64;
        let centre: Vec<f64> = (0..d)
            .map(|j| inst.candidates.iter().map(|c| c.features[j]).sum::<f64>() / k)
            .collect();
        let r_mean = row.iter().sum::<f64>() / k;
        for (c, r) in inst.candidates.iter().zip(row) {
            samples.push(crate::reward_model::Sample {
                features: c.features.iter().zip(&centre).map(|(f, m)| f - m).collect(),
                // shift keeps the target inside [0, 1] for the fitter
                reward: ((r - r_mean) * 0.5 + 0.5).clamp(0.0, 1.0),
            });
        }
    }
    let model = crate::reward_model::RewardModel::fit(&crate::reward_model::RewardModelConfig::ridge(1e-3), &samples)?;
    let crate::reward_model::RewardModel::Ridge(r) = model else {
        unreachable!("ridge config")
    };
    let n = crate::numeric::norm(&r.weights);
    if n == 0.0 {
        return Ok(r.weights);
    }
    Ok(r.weights.iter().map(|w| w * scale / n).collect())
}

/// Full-information policy: starts from the regression direction, maximizes
/// exact expected reward over all instances and is rescaled to
/// `oracle_weight_scale`.
fn fit_oracle(config: &TaskConfig, dataset: &Dataset, rewards: &Tabulated, seed: u64) -> Result<GibbsPolicy> {
    let init = regression_direction(dataset, rewards, config.oracle_weight_scale)?;
    let policy = GibbsPolicy::new(init, config.alpha)?;
    if config.oracle_epochs == 0 {
        return Ok(policy);
    }
    // with an exact reward table the DC objective is the exact expected reward
    let log: Vec<LogEntry> = dataset
        .instances()
        .map(|inst| {
            Ok(LogEntry {
                instance_id: inst.id,
                candidate_id: 0,
                reward: rewards.row(inst.id).expect("tabulated")[0],
                propensity: 1.0,
                mode: LogMode::Deterministic,
            })
        })
        .collect::<Result<_>>()?;
    let train_config = TrainConfig {
        objective: Objective::Dc,
        batch_size: 500,
        optimizer: OptimizerConfig::sgd(config.oracle_learning_rate),
        max_epochs: config.oracle_epochs,
        eval_every: 1,
        seed,
        nbest_cap: None,
    };
    let fitted = train(&log, dataset, &policy, &train_config, Some(rewards))?.last_policy;
    let n = crate::numeric::norm(&fitted.weights);
    if n == 0.0 {
        return Ok(fitted);
    }
    GibbsPolicy::new(
        fitted.weights.iter().map(|w| w * config.oracle_weight_scale / n).collect(),
        config.alpha,
    )
}

/// Generates a dataset with its oracle and logging policies. Regenerates
/// with derived seeds until the oracle beats the logging policy by
/// `min_margin` expected reward on the training split.
pub fn generate_task(config: &TaskConfig) -> Result<Task> {
    config.validate()?;
    let mut best: Option<(f64, Task)> = None;
    for attempt in 0..config.max_attempts {
        let seed = if attempt == 0 {
            config.seed
        } else {
            crate::numeric::derive_seed(config.seed, attempt as u64)
        };
        let dataset = generate_dataset(config, seed)?;
        let rewards = true_rewards(&dataset)?;
        let oracle = fit_oracle(config, &dataset, &rewards, seed)?;
        let mut rng = seeded_rng(seed, u64::MAX);
        let perturb = Normal::new(0.0, config.logging_weight_perturbation).expect("finite std");
        let logging_weights = oracle
            .weights
            .iter()
            .map(|w| w + perturb.sample(&mut rng))
            .collect();
        let logging = GibbsPolicy::new(logging_weights, config.alpha)?;
        let margin = expected_reward(&oracle, &dataset, Split::Train, &rewards)?
            - expected_reward(&logging, &dataset, Split::Train, &rewards)?;
        let task = Task {
            dataset,
            oracle,
            logging,
            seed,
        };
        if margin >= config.min_margin || config.candidates == 1 {
            return Ok(task);
        }
        if best.as_ref().is_none_or(|(m, _)| margin > *m) {
            best = Some((margin, task));
        }
    }
    let (margin, _) = best.expect("at least one attempt");
    Err(Error::Config(format!(
        "no task reached the required margin {} after {} attempts (best {margin:.4})",
        config.min_margin, config.max_attempts
    )))
}

/// Exact `E_x E_{π(y|x)}[Δ(y)]` over a split.
pub fn expected_reward(policy: &GibbsPolicy, dataset: &Dataset, split: Split, rewards: &Tabulated) -> Result<f64> {
    let values = dataset
        .split(split)
        .map(|inst| {
            let probs = policy.probabilities(inst)?;
            let row = rewards
                .row(inst.id)
                .ok_or_else(|| Error::Validation(format!("no rewards for instance {}", inst.id)))?;
            Ok(probs.iter().zip(row).map(|(p, r)| p * r).collect::<CompensatedSum>().value())
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Err(Error::Empty("split"));
    }
    Ok(mean(&values))
}

pub fn ground_truth(policy: &GibbsPolicy, dataset: &Dataset, split: Split) -> Result<GroundTruth> {
    let scoped = Dataset::new(dataset.split(split).cloned().collect())?;
    let rewards = true_rewards(&scoped)?;
    Ok(GroundTruth {
        expected_reward: expected_reward(policy, &scoped, split, &rewards)?,
        onebest_corpus_bleu: OneBestScorer::new(scoped.instances())?.score(policy)?,
    })
}

/// Logs one interaction per instance. Stochastic draws use a per-instance
/// stream derived from `seed`.
pub fn simulate_log_on<'a>(
    policy: &GibbsPolicy,
    instances: impl IntoIterator<Item = &'a Instance>,
    mode: LogMode,
    seed: u64,
) -> Result<Vec<LogEntry>> {
    let bleu = BleuConfig::default();
    let instances: Vec<&Instance> = instances.into_iter().collect();
    instances
        .par_iter()
        .map(|inst| {
            let reference = inst.reference()?;
            let (candidate_id, propensity) = match mode {
                LogMode::Deterministic => (policy.argmax(inst)?, 1.0),
                LogMode::Stochastic => policy.sample(inst, &mut seeded_rng(seed, inst.id))?,
            };
            let reward = sentence_bleu(&inst.candidates[candidate_id].tokens, reference, &bleu)?;
            Ok(LogEntry {
                instance_id: inst.id,
                candidate_id,
                reward,
                propensity,
                mode,
            })
        })
        .collect()
}

/// One logged interaction per training instance.
pub fn simulate_log(policy: &GibbsPolicy, dataset: &Dataset, mode: LogMode, seed: u64) -> Result<Vec<LogEntry>> {
    simulate_log_on(policy, dataset.split(Split::Train), mode, seed)
}

/// Number of distinct logged feature patterns after quantizing every
/// feature to `resolution`.
pub fn distinct_feature_patterns(log: &[LogEntry], dataset: &Dataset, resolution: f64) -> Result<usize> {
    let mut seen = BTreeSet::new();
    for e in log {
        let c = dataset.instance(e.instance_id)?.candidate(e.candidate_id)?;
        let key: Vec<i64> = c.features.iter().map(|f| (f / resolution).round() as i64).collect();
        seen.insert(key);
    }
    Ok(seen.len())
}
