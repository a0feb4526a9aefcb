mod common;

use cflearn::data::{read_dataset, read_log, write_dataset, write_log, MissingCandidate};
use cflearn::estimators::{estimate, Objective};
use cflearn::metrics::{corpus_bleu, sentence_bleu, BleuConfig};
use cflearn::reward_model::{fold_assignment, Sample};
use cflearn::{Batch, Dataset, GibbsPolicy, LogEntry, RewardModel, RewardModelConfig};
use proptest::prelude::*;

use common::{instance, random_case};

fn features(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), k)
}

fn instance_and_weights(max_k: usize, max_d: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1..=max_k, 1..=max_d).prop_flat_map(|(k, d)| (features(k, d), prop::collection::vec(-3.0..3.0f64, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_and_log_round_trip(seed in 0u64..10_000) {
        let c = random_case(seed, 6, 3, 12);
        let dir = tempfile::tempdir().unwrap();
        let dpath = dir.path().join("d.jsonl");
        let lpath = dir.path().join("l.jsonl");
        write_dataset(&c.dataset, &dpath).unwrap();
        write_log(&c.log, &lpath).unwrap();
        let dataset = read_dataset(&dpath).unwrap();
        prop_assert_eq!(&dataset, &c.dataset);
        let loaded = read_log(&lpath, &dataset, MissingCandidate::Error).unwrap();
        prop_assert_eq!(&loaded.entries, &c.log);
        prop_assert_eq!(loaded.skipped, 0);
        prop_assert!(loaded
            .entries
            .iter()
            .all(|e| e.mode != cflearn::LogMode::Deterministic || e.propensity == 1.0));
    }

    #[test]
    fn probabilities_are_normalized(
        (feats, w) in instance_and_weights(64, 4),
        alpha in 0.01..10.0f64,
    ) {
        let inst = instance(0, feats);
        let p = GibbsPolicy::new(w, alpha).unwrap().probabilities(&inst).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn extreme_scores_stay_normalized(k in 1usize..64, spread in 0.0..100.0f64, alpha in 0.01..10.0f64) {
        let feats: Vec<Vec<f64>> = (0..k).map(|i| vec![spread * (i as f64 / k as f64 - 0.5) * 2.0]).collect();
        let p = GibbsPolicy::new(vec![1.0], alpha).unwrap().probabilities(&instance(0, feats)).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn constant_feature_does_not_change_probabilities(
        (feats, w) in instance_and_weights(12, 4),
        constant in -5.0..5.0f64,
        extra_weight in -5.0..5.0f64,
    ) {
        let base = GibbsPolicy::new(w.clone(), 5.0).unwrap().probabilities(&instance(0, feats.clone())).unwrap();
        let shifted_feats: Vec<Vec<f64>> = feats.into_iter().map(|mut f| { f.push(constant); f }).collect();
        let mut shifted_w = w;
        shifted_w.push(extra_weight);
        let shifted = GibbsPolicy::new(shifted_w, 5.0).unwrap().probabilities(&instance(0, shifted_feats)).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_probability_grows_with_alpha(scores in prop::collection::vec(-1.0..1.0f64, 2..10)) {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[sorted.len() - 1] - sorted[sorted.len() - 2] > 1e-3);
        let inst = instance(0, scores.iter().map(|&s| vec![s]).collect());
        let best = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let mut previous = 0.0;
        for alpha in [1.0, 5.0, 50.0, 500.0, 50_000.0] {
            let p = GibbsPolicy::new(vec![1.0], alpha).unwrap().probabilities(&inst).unwrap()[best];
            prop_assert!(p >= previous);
            previous = p;
        }
        prop_assert!(previous > 1.0 - 1e-9);
    }

    #[test]
    fn expected_score_gradient_is_zero((feats, w) in instance_and_weights(12, 4)) {
        let inst = instance(0, feats);
        let policy = GibbsPolicy::new(w, 5.0).unwrap();
        let p = policy.probabilities(&inst).unwrap();
        let mut expectation = vec![0.0; policy.dim()];
        for (y, py) in p.iter().enumerate() {
            for (e, g) in expectation.iter_mut().zip(policy.grad_log_prob(&inst, y).unwrap()) {
                *e += py * g;
            }
        }
        prop_assert!(expectation.iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn grad_log_prob_matches_finite_differences((feats, w) in instance_and_weights(8, 4), pick in 0usize..8) {
        let inst = instance(0, feats);
        let y = pick % inst.num_candidates();
        let policy = GibbsPolicy::new(w.clone(), 5.0).unwrap();
        let g = policy.grad_log_prob(&inst, y).unwrap();
        let h = 1e-5;
        let logp = |w: Vec<f64>| GibbsPolicy::new(w, 5.0).unwrap().probabilities(&inst).unwrap()[y].ln();
        for i in 0..w.len() {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[i] += h;
            minus[i] -= h;
            let fd = (logp(plus) - logp(minus)) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn scaling_importance_ratios_leaves_reweighted_estimates(seed in 0u64..10_000, k in 0.01..100.0f64) {
        let c = random_case(seed, 6, 3, 12);
        let scaled: Vec<LogEntry> = c.log.iter().map(|e| LogEntry { propensity: e.propensity / k, ..e.clone() }).collect();
        let a = Batch::new(&c.log, &c.dataset).unwrap();
        let b = Batch::new(&scaled, &c.dataset).unwrap();
        let ra = estimate(Objective::DpmR, &c.target, &a, None).unwrap().value;
        let rb = estimate(Objective::DpmR, &c.target, &b, None).unwrap().value;
        prop_assert!((ra - rb).abs() < 1e-12);
        for obj in [Objective::Dc, Objective::ChatDc] {
            let ea = estimate(obj, &c.target, &a, Some(&c.model)).unwrap();
            let eb = estimate(obj, &c.target, &b, Some(&c.model)).unwrap();
            let residual = |e: &cflearn::Estimate| e.value - e.diagnostics.direct_term_value;
            prop_assert!((residual(&ea) - residual(&eb)).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_is_exact_with_a_perfect_model(seed in 0u64..10_000) {
        let c = random_case(seed, 8, 4, 16);
        let batch = Batch::new(&c.log, &c.dataset).unwrap();
        let value = estimate(Objective::Dc, &c.target, &batch, Some(&c.rewards)).unwrap().value;
        let truth: f64 = c.log.iter().map(|e| {
            let inst = c.dataset.instance(e.instance_id).unwrap();
            cflearn::numeric::dot(&c.target.probabilities(inst).unwrap(), c.rewards.row(inst.id).unwrap())
        }).sum::<f64>() / c.log.len() as f64;
        prop_assert!((value - truth).abs() < 1e-12);
    }

    #[test]
    fn reward_predictions_are_in_unit_interval(
        data in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 3), 0.0..=1.0f64), 2..40),
        probe in prop::collection::vec(-50.0..50.0f64, 3),
        ridge in any::<bool>(),
    ) {
        let samples: Vec<Sample> = data.into_iter().map(|(features, reward)| Sample { features, reward }).collect();
        let config = if ridge { RewardModelConfig::ridge(1e-3) } else { RewardModelConfig::default() };
        let model = RewardModel::fit(&config, &samples).unwrap();
        let p = model.predict(&probe).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn folds_partition_samples(n in 1usize..200, folds in 1usize..10, seed in any::<u64>()) {
        let folds = folds.min(n);
        let assignment = fold_assignment(n, folds, seed);
        prop_assert_eq!(assignment.len(), n);
        prop_assert!(assignment.iter().all(|&f| f < folds));
    }

    #[test]
    fn bleu_ignores_token_identity(
        hyp in prop::collection::vec(0u8..6, 0..12),
        reference in prop::collection::vec(0u8..6, 1..12),
        shift in 1u8..50,
    ) {
        let relabel = |v: &[u8]| v.iter().map(|t| t.wrapping_mul(7).wrapping_add(shift)).collect::<Vec<u8>>();
        for config in [BleuConfig::default(), BleuConfig::unsmoothed()] {
            let a = sentence_bleu(&hyp, &reference, &config).unwrap();
            let b = sentence_bleu(&relabel(&hyp), &relabel(&reference), &config).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }
        let pairs = vec![(hyp.clone(), reference.clone())];
        let relabeled = vec![(relabel(&hyp), relabel(&reference))];
        let plain = BleuConfig::unsmoothed();
        prop_assert_eq!(corpus_bleu(&pairs, &plain).unwrap(), corpus_bleu(&relabeled, &plain).unwrap());
    }

    #[test]
    fn duplicating_the_corpus_keeps_bleu(
        pairs in prop::collection::vec((prop::collection::vec(0u8..5, 0..10), prop::collection::vec(0u8..5, 1..10)), 1..8),
    ) {
        let plain = BleuConfig::unsmoothed();
        let once = corpus_bleu(&pairs, &plain).unwrap();
        let twice: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        prop_assert!((once - corpus_bleu(&twice, &plain).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&once));
    }
}

#[test]
fn validation_rejects_malformed_entries() {
    let c = random_case(3, 4, 2, 4);
    let good = c.log[0].clone();
    assert!(good.validate(&c.dataset).is_ok());
    let bad = [
        LogEntry { reward: 1.5, ..good.clone() },
        LogEntry { reward: -0.1, ..good.clone() },
        LogEntry { propensity: 0.0, ..good.clone() },
        LogEntry { propensity: 1.5, ..good.clone() },
        LogEntry { candidate_id: 99, ..good.clone() },
        LogEntry { instance_id: 999, ..good.clone() },
    ];
    for entry in bad {
        assert!(entry.validate(&c.dataset).is_err(), "{entry:?}");
    }
    let det = LogEntry {
        mode: cflearn::LogMode::Deterministic,
        propensity: 0.5,
        ..good
    };
    assert!(det.validate(&c.dataset).is_err());
}

#[test]
fn dataset_rejects_duplicate_ids() {
    let a = instance(1, vec![vec![0.0]]);
    assert!(Dataset::new(vec![a.clone(), a]).is_err());
}
