//! Counterfactual policy evaluation against enumerated ground truth.
//!
//! Each fold draws a fresh stochastic log from the logging policy over a
//! fixed instance set and estimates the target policy's expected reward
//! from that log as a single batch. Estimates are compared with the exact
//! expected reward of the target policy on the same instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LogMode, Split};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Batch, Objective};
use crate::numeric::{derive_seed, mean, sample_variance};
use crate::policy::GibbsPolicy;
use crate::reward_model::{RewardPredictor, Tabulated};
use crate::sim::{expected_reward, simulate_log_on, true_rewards};
use crate::trainer::OneBestScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    /// Number of training instances logged per fold (capped by the split size).
    pub eval_log_size: usize,
    pub estimators: Vec<Objective>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            eval_log_size: 10_000,
            estimators: vec![Objective::DpmR, Objective::Dc, Objective::ChatDc],
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if self.eval_log_size == 0 {
            return Err(Error::Config("eval_log_size must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if !matches!(e, Objective::DpmR | Objective::Dc | Objective::ChatDc) {
                return Err(Error::Config(format!(
                    "{} is not a policy-evaluation estimator (use ips+r, dr or chat_dr)",
                    e.label(LogMode::Stochastic)
                )));
            }
            if self.estimators[..i].contains(e) {
                return Err(Error::Config(format!("estimator {e} listed twice")));
            }
        }
        Ok(())
    }

    /// Seed of the stochastic log drawn for `fold`.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        derive_seed(self.seed, fold as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: Objective,
    pub label: String,
    /// Mean of `estimate − truth` over effective folds, ×100.
    pub avg_estimate_minus_truth: f64,
    /// Sample standard deviation of `estimate − truth`, ×100.
    pub std_dev: f64,
    /// Raw estimate per fold; `None` for degenerate folds.
    pub fold_estimates: Vec<Option<f64>>,
    pub effective_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: usize,
    pub log_size: usize,
    /// Exact expected reward of the target policy on the logged instances.
    pub ground_truth: f64,
    /// Corpus BLEU of the target policy's one-best outputs on the same instances.
    pub onebest_corpus_bleu: f64,
    pub estimators: Vec<EstimatorReport>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, estimator: Objective) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|r| r.estimator == estimator)
    }
}

pub fn evaluate_policy(
    target: &GibbsPolicy,
    logging: &GibbsPolicy,
    dataset: &Dataset,
    reward_model: &dyn RewardPredictor,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let instances: Vec<_> = dataset.split(Split::Train).take(config.eval_log_size).collect();
    if instances.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let scoped = Dataset::new(instances.iter().map(|&i| i.clone()).collect())?;
    let truth = expected_reward(target, &scoped, Split::Train, &true_rewards(&scoped)?)?;
    let onebest = OneBestScorer::new(scoped.instances())?.score(target)?;
    let model = Tabulated::from_predictor(reward_model, &scoped)?;

    let per_fold: Vec<Vec<Result<f64>>> = (0..config.folds)
        .into_par_iter()
        .map(|fold| {
            let log = simulate_log_on(logging, scoped.instances(), LogMode::Stochastic, config.fold_seed(fold))?;
            let batch = Batch::new(&log, &scoped)?;
            Ok(config
                .estimators
                .iter()
                .map(|&obj| estimate(obj, target, &batch, Some(&model)).map(|e| e.value))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut columns: Vec<Vec<Result<f64>>> = config.estimators.iter().map(|_| Vec::new()).collect();
    for row in per_fold {
        for (column, r) in columns.iter_mut().zip(row) {
            column.push(r);
        }
    }
    let mut warnings = Vec::new();
    let mut reports = Vec::with_capacity(config.estimators.len());
    for (&obj, column) in config.estimators.iter().zip(columns) {
        let label = obj.label(LogMode::Stochastic).to_string();
        let mut fold_estimates = Vec::with_capacity(config.folds);
        for (fold, result) in column.into_iter().enumerate() {
            match result {
                Ok(v) => fold_estimates.push(Some(v)),
                Err(Error::DegenerateBatch) => {
                    warnings.push(format!("{label}: fold {fold} is degenerate and was excluded"));
                    fold_estimates.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let diffs: Vec<f64> = fold_estimates.iter().flatten().map(|v| (v - truth) * 100.0).collect();
        if diffs.is_empty() {
            return Err(Error::Numerical(format!("{label}: every fold is degenerate")));
        }
        reports.push(EstimatorReport {
            estimator: obj,
            label,
            avg_estimate_minus_truth: mean(&diffs),
            std_dev: sample_variance(&diffs).sqrt(),
            effective_folds: diffs.len(),
            fold_estimates,
        });
    }
    Ok(EvalReport {
        folds: config.folds,
        log_size: scoped.len(),
        ground_truth: truth,
        onebest_corpus_bleu: onebest,
        estimators: reports,
        warnings,
    })
}

/// One rendered table row, values rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub avg_estimate_minus_truth: f64,
    pub std_dev: f64,
    pub effective_folds: usize,
    pub folds: usize,
}

/// Rounds half away from zero to two decimals and never yields `-0.0`.
pub fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 { 0.0 } else { r }
}

pub fn render_report(report: &EvalReport) -> (Vec<ReportRow>, String) {
    let rows: Vec<ReportRow> = report
        .estimators
        .iter()
        .map(|e| ReportRow {
            estimator: e.label.clone(),
            avg_estimate_minus_truth: round2(e.avg_estimate_minus_truth),
            std_dev: round2(e.std_dev),
            effective_folds: e.effective_folds,
            folds: report.folds,
        })
        .collect();
    let mut table = format!(
        "ground truth {:.2}  (log size {}, one-best corpus BLEU {:.2})\n",
        round2(report.ground_truth * 100.0),
        report.log_size,
        round2(report.onebest_corpus_bleu * 100.0),
    );
    table.push_str(&format!("{:<10}{:>16}{:>10}{:>8}\n", "estimator", "avg(est-truth)", "std", "folds"));
    for r in &rows {
        table.push_str(&format!(
            "{:<10}{:>16.2}{:>10.2}{:>8}\n",
            r.estimator,
            r.avg_estimate_minus_truth,
            r.std_dev,
            format!("{}/{}", r.effective_folds, r.folds)
        ));
    }
    (rows, table)
}
