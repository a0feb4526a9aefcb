mod common;

use cflearn::evaluator::{evaluate_policy, EvalConfig};
use cflearn::numeric::{mean, sample_variance, seeded_rng};
use cflearn::reward_model::samples_from_log;
use cflearn::sim::{
    distinct_feature_patterns, expected_reward, generate_task, simulate_log, true_rewards, Task, TaskConfig,
};
use cflearn::trainer::{train, OneBestScorer, TrainConfig};
use cflearn::{Dataset, Error, GibbsPolicy, LogMode, Objective, RewardModel, RewardModelConfig, Split};
use rand::Rng;

use common::instance;

fn small_task(seed: u64) -> Task {
    generate_task(&TaskConfig {
        num_train: 300,
        num_validation: 60,
        num_test: 60,
        candidates: 8,
        feature_dim: 8,
        oracle_epochs: 5,
        min_margin: 0.0,
        seed,
        ..TaskConfig::default()
    })
    .unwrap()
}

#[test]
fn enumerated_truth_matches_monte_carlo() {
    let task = small_task(1);
    let d = &task.dataset;
    let rewards = true_rewards(d).unwrap();
    let truth = expected_reward(&task.logging, d, Split::Train, &rewards).unwrap();
    let instances: Vec<_> = d.split(Split::Train).collect();
    let mut rng = seeded_rng(11, 0);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| {
            let inst = instances[rng.random_range(0..instances.len())];
            let (y, _) = task.logging.sample(inst, &mut rng).unwrap();
            rewards.row(inst.id).unwrap()[y]
        })
        .collect();
    let se = (sample_variance(&draws) / draws.len() as f64).sqrt();
    assert!((mean(&draws) - truth).abs() <= 3.0 * se, "mc {} truth {truth} se {se}", mean(&draws));
}

#[test]
fn logs_depend_only_on_policy_and_seed() {
    let task = small_task(2);
    let d = &task.dataset;
    let det = |seed| simulate_log(&task.logging, d, LogMode::Deterministic, seed).unwrap();
    let sto = |seed| simulate_log(&task.logging, d, LogMode::Stochastic, seed).unwrap();
    assert_eq!(det(0), det(5));
    assert_eq!(sto(3), sto(3));
    assert_ne!(sto(3), sto(4));
}

#[test]
fn deterministic_logs_explore_feature_space() {
    let task = generate_task(&TaskConfig {
        num_train: 1000,
        num_validation: 10,
        num_test: 10,
        oracle_epochs: 2,
        min_margin: 0.0,
        ..TaskConfig::default()
    })
    .unwrap();
    let log = simulate_log(&task.logging, &task.dataset, LogMode::Deterministic, 0).unwrap();
    let distinct = distinct_feature_patterns(&log, &task.dataset, 0.05).unwrap();
    assert!(distinct * 2 >= log.len(), "{distinct} patterns for {} entries", log.len());
}

#[test]
fn training_is_reproducible_and_keeps_the_best_checkpoint() {
    let task = small_task(3);
    let d = &task.dataset;
    let log = simulate_log(&task.logging, d, LogMode::Stochastic, 1).unwrap();
    let model = RewardModel::fit(&RewardModelConfig::default(), &samples_from_log(&log, d).unwrap()).unwrap();
    let config = TrainConfig {
        batch_size: 50,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let a = train(&log, d, &task.logging, &config, Some(&model)).unwrap();
    let b = train(&log, d, &task.logging, &config, Some(&model)).unwrap();
    assert_eq!(a, b);
    let best = a
        .records
        .iter()
        .filter_map(|r| r.validation_bleu)
        .fold(f64::MIN, f64::max);
    assert_eq!(a.best().validation_bleu, Some(best));
    let val = OneBestScorer::for_split(d, Split::Validation).unwrap();
    assert_eq!(val.score(&a.best_policy).unwrap(), best);
    assert_eq!(a.records[0].batch, 0);
}

#[test]
fn training_never_loses_more_than_half_a_bleu_point() {
    let task = generate_task(&TaskConfig::default()).unwrap();
    let d = &task.dataset;
    let log = simulate_log(&task.logging, d, LogMode::Deterministic, 0).unwrap();
    let model = RewardModel::fit(&RewardModelConfig::default(), &samples_from_log(&log, d).unwrap()).unwrap();
    let initial = OneBestScorer::for_split(d, Split::Validation).unwrap().score(&task.logging).unwrap();
    for objective in [Objective::DpmR, Objective::Dc, Objective::ChatDc] {
        let config = TrainConfig {
            objective,
            ..TrainConfig::default()
        };
        let t = train(&log, d, &task.logging, &config, Some(&model)).unwrap();
        assert!(t.best().validation_bleu.unwrap() >= initial - 0.005, "{objective}");
    }
}

fn one_instance(k: usize) -> Dataset {
    let mut inst = instance(0, (0..k).map(|i| vec![i as f64]).collect());
    inst.reference = Some(vec!["w0".into()]);
    Dataset::new(vec![inst]).unwrap()
}

#[test]
fn degenerate_folds_are_excluded_and_counted() {
    let d = one_instance(3);
    let logging = GibbsPolicy::uniform(1, 5.0).unwrap();
    let target = GibbsPolicy::new(vec![1.0], 5.0).unwrap().with_nbest_cap(Some(1)).unwrap();
    let model = true_rewards(&d).unwrap();
    let config = EvalConfig {
        folds: 12,
        ..EvalConfig::default()
    };
    let report = evaluate_policy(&target, &logging, &d, &model, &config).unwrap();
    for e in &report.estimators {
        let kept = e.fold_estimates.iter().flatten().count();
        assert_eq!(e.effective_folds, kept);
        assert!(kept > 0 && kept < 12, "{kept}");
    }
    assert_eq!(report.warnings.len(), 3 * (12 - report.estimators[0].effective_folds));
}

#[test]
fn all_degenerate_folds_are_a_numerical_error() {
    let d = one_instance(3);
    let logging = GibbsPolicy::new(vec![-5.0], 5.0).unwrap();
    let target = GibbsPolicy::new(vec![5.0], 5.0).unwrap().with_nbest_cap(Some(1)).unwrap();
    let model = true_rewards(&d).unwrap();
    let err = evaluate_policy(&target, &logging, &d, &model, &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}
