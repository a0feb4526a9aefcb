//! Direct reward estimation `Δ̂(x, y)`: regression from candidate features to
//! rewards, plus cross-validated macro/micro error reporting.
//!
//! Two model families are provided. The random forest is the one used in
//! learning runs; ridge regression is a transparent closed-form baseline.
//! Any [`RewardPredictor`] can back the doubly controlled estimators, which
//! lets tests plug in an exact [`Tabulated`] model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance, LogEntry};
use crate::error::{Error, Result};
use crate::numeric::{mean, seeded_rng};

/// Anything that can score a candidate of an instance with an estimated reward.
pub trait RewardPredictor: Sync {
    fn predict_candidate(&self, instance: &Instance, candidate: usize) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Forest,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelConfig {
    pub kind: ModelKind,
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Forest,
            trees: 10,
            max_depth: 12,
            min_leaf: 5,
            features_per_split: 1.0 / 3.0,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl RewardModelConfig {
    pub fn ridge(lambda: f64) -> Self {
        Self {
            kind: ModelKind::Ridge,
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.kind == ModelKind::Forest {
            if self.trees == 0 {
                return Err(Error::Config("forest needs at least one tree".into()));
            }
            if self.min_leaf == 0 {
                return Err(Error::Config("min_leaf must be >= 1".into()));
            }
            if !(self.features_per_split > 0.0 && self.features_per_split <= 1.0) {
                return Err(Error::Config("features_per_split must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// A regression sample: candidate features and observed reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub reward: f64,
}

/// Collects `(φ(x_t, y_t), Δ_t)` pairs from a log.
pub fn samples_from_log(log: &[LogEntry], dataset: &Dataset) -> Result<Vec<Sample>> {
    log.iter()
        .map(|e| {
            let c = dataset.instance(e.instance_id)?.candidate(e.candidate_id)?;
            Ok(Sample {
                features: c.features.clone(),
                reward: e.reward,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Nodes in preorder; the root is node 0.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct TreeBuilder<'a, R> {
    x: &'a [Sample],
    max_depth: usize,
    min_leaf: usize,
    features_per_node: usize,
    rng: R,
    nodes: Vec<Node>,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = mean(&idx.iter().map(|&i| self.x[i].reward).collect::<Vec<_>>());
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let dim = self.x[0].features.len();
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.x[i].reward).sum();
        // baseline: no split
        let mut best_score = total * total / n as f64 + 1e-12;
        let mut best = None;
        let features = index::sample(&mut self.rng, dim, self.features_per_node.min(dim));
        let mut order = idx.to_vec();
        for f in features.iter() {
            order.sort_by(|&a, &b| {
                self.x[a].features[f]
                    .total_cmp(&self.x[b].features[f])
                    .then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.x[order[k]].reward;
                let n_left = k + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let lo = self.x[order[k]].features[f];
                let hi = self.x[order[k + 1]].features[f];
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score =
                    left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64;
                if score > best_score {
                    best_score = score;
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((f, threshold));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i].features[feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    Forest(Forest),
    Ridge(Ridge),
}

impl RewardModel {
    pub fn fit(config: &RewardModelConfig, data: &[Sample]) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("reward model training data"));
        }
        let dim = data[0].features.len();
        for s in data {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if !(0.0..=1.0).contains(&s.reward) {
                return Err(Error::Validation(format!("reward {} outside [0, 1]", s.reward)));
            }
        }
        match config.kind {
            ModelKind::Forest => Ok(RewardModel::Forest(fit_forest(config, data))),
            ModelKind::Ridge => Ok(RewardModel::Ridge(fit_ridge(config.lambda, data)?)),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            RewardModel::Ridge(r) => Some(r.weights.len()),
            RewardModel::Forest(_) => None,
        }
    }

    /// Unclamped mean of the individual tree outputs, or the affine ridge output.
    pub fn raw_predict(&self, x: &[f64]) -> f64 {
        match self {
            RewardModel::Forest(f) => {
                f.trees.iter().map(|t| t.predict(x)).sum::<f64>() / f.trees.len() as f64
            }
            RewardModel::Ridge(r) => r.intercept + crate::numeric::dot(&r.weights, x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if let Some(d) = self.dim() {
            if d != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x.len(),
                });
            }
        }
        if let RewardModel::Forest(f) = self {
            let needed = f
                .trees
                .iter()
                .flat_map(|t| &t.nodes)
                .filter_map(|n| match n {
                    Node::Split { feature, .. } => Some(*feature + 1),
                    Node::Leaf { .. } => None,
                })
                .max()
                .unwrap_or(0);
            if x.len() < needed {
                return Err(Error::DimensionMismatch {
                    expected: needed,
                    got: x.len(),
                });
            }
        }
        Ok(self.raw_predict(x).clamp(0.0, 1.0))
    }
}

impl RewardPredictor for RewardModel {
    fn predict_candidate(&self, instance: &Instance, candidate: usize) -> Result<f64> {
        self.predict(&instance.candidate(candidate)?.features)
    }
}

fn fit_forest(config: &RewardModelConfig, data: &[Sample]) -> Forest {
    let dim = data[0].features.len().max(1);
    let per_node = ((config.features_per_split * dim as f64).round() as usize).clamp(1, dim);
    let trees = (0..config.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded_rng(config.seed, t as u64);
            let n = data.len();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = TreeBuilder {
                x: data,
                max_depth: config.max_depth,
                min_leaf: config.min_leaf,
                features_per_node: per_node,
                rng,
                nodes: Vec::new(),
            };
            b.grow(&idx, 0);
            RegressionTree { nodes: b.nodes }
        })
        .collect();
    Forest { trees }
}

fn fit_ridge(lambda: f64, data: &[Sample]) -> Result<Ridge> {
    let n = data.len();
    let d = data[0].features.len();
    let x_mean: Vec<f64> = (0..d)
        .map(|j| mean(&data.iter().map(|s| s.features[j]).collect::<Vec<_>>()))
        .collect();
    let y: Vec<f64> = data.iter().map(|s| s.reward).collect();
    let y_mean = mean(&y);
    let xc = DMatrix::from_fn(n, d, |i, j| data[i].features[j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
    let rhs = xc.transpose() * yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numerical(format!("ridge solve failed: {e}")))?,
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge weights".into()));
    }
    let intercept = y_mean - crate::numeric::dot(&weights, &x_mean);
    Ok(Ridge {
        weights,
        intercept,
        lambda,
    })
}

/// Exact per-candidate reward table, e.g. the true sentence-level rewards of
/// a simulated task, or a cache of another model's predictions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tabulated {
    table: BTreeMap<u64, Vec<f64>>,
}

impl Tabulated {
    pub fn new(table: BTreeMap<u64, Vec<f64>>) -> Self {
        Self { table }
    }

    /// Evaluates `model` once on every candidate of `dataset`.
    pub fn from_predictor<P: RewardPredictor + ?Sized>(model: &P, dataset: &Dataset) -> Result<Self> {
        let mut table = BTreeMap::new();
        for inst in dataset.instances() {
            let row = (0..inst.num_candidates())
                .map(|k| model.predict_candidate(inst, k))
                .collect::<Result<Vec<_>>>()?;
            table.insert(inst.id, row);
        }
        Ok(Self { table })
    }

    pub fn row(&self, instance_id: u64) -> Option<&[f64]> {
        self.table.get(&instance_id).map(Vec::as_slice)
    }
}

impl RewardPredictor for Tabulated {
    fn predict_candidate(&self, instance: &Instance, candidate: usize) -> Result<f64> {
        self.table
            .get(&instance.id)
            .and_then(|r| r.get(candidate))
            .copied()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "no tabulated reward for instance {} candidate {candidate}",
                    instance.id
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldError {
    pub macro_avg: f64,
    pub micro_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelReport {
    pub macro_avg: f64,
    pub micro_avg: f64,
    pub per_fold: Vec<FoldError>,
}

/// Macro `|mean Δ − mean Δ̂|` and micro `mean |Δ − Δ̂|` errors.
pub fn fold_errors(observed: &[f64], predicted: &[f64]) -> FoldError {
    let diffs: Vec<f64> = observed.iter().zip(predicted).map(|(a, b)| (a - b).abs()).collect();
    FoldError {
        macro_avg: (mean(observed) - mean(predicted)).abs(),
        micro_avg: mean(&diffs),
    }
}

pub fn cross_validate(
    config: &RewardModelConfig,
    data: &[Sample],
    folds: usize,
    seed: u64,
) -> Result<RewardModelReport> {
    if folds < 2 {
        return Err(Error::Config(format!("cross-validation needs >= 2 folds, got {folds}")));
    }
    if data.len() < folds {
        return Err(Error::Config(format!(
            "{} samples cannot fill {folds} folds",
            data.len()
        )));
    }
    let assignment = fold_assignment(data.len(), folds, seed);
    let per_fold = (0..folds)
        .map(|f| {
            let mut held = Vec::new();
            let mut train = Vec::new();
            for (s, &a) in data.iter().zip(&assignment) {
                if a == f {
                    held.push(s);
                } else {
                    train.push(s.clone());
                }
            }
            let model = RewardModel::fit(config, &train)?;
            let observed: Vec<f64> = held.iter().map(|s| s.reward).collect();
            let predicted = held
                .iter()
                .map(|s| model.predict(&s.features))
                .collect::<Result<Vec<_>>>()?;
            Ok(fold_errors(&observed, &predicted))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardModelReport {
        macro_avg: mean(&per_fold.iter().map(|f| f.macro_avg).collect::<Vec<_>>()),
        micro_avg: mean(&per_fold.iter().map(|f| f.micro_avg).collect::<Vec<_>>()),
        per_fold,
    })
}

/// Fold assignment used by [`cross_validate`]: held-out fold of every sample.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed, 0);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}
