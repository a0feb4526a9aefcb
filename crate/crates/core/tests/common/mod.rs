#![allow(dead_code)]

use std::collections::BTreeMap;

use cflearn::numeric::seeded_rng;
use cflearn::{Candidate, Dataset, GibbsPolicy, Instance, LogEntry, LogMode, Split, Tabulated};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn instance(id: u64, features: Vec<Vec<f64>>) -> Instance {
    Instance {
        id,
        split: Split::Train,
        reference: None,
        candidates: features
            .into_iter()
            .enumerate()
            .map(|(k, features)| Candidate {
                tokens: vec![format!("w{k}")],
                features,
            })
            .collect(),
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng, id: u64, k: usize, d: usize) -> Instance {
    instance(id, (0..k).map(|_| (0..d).map(|_| gaussian(rng)).collect()).collect())
}

pub fn random_policy(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> GibbsPolicy {
    GibbsPolicy::new((0..d).map(|_| scale * gaussian(rng)).collect(), 5.0).unwrap()
}

/// A small random problem: instances, a log from `logging`, the true reward
/// table and a noisy reward model of it.
pub struct Case {
    pub dataset: Dataset,
    pub log: Vec<LogEntry>,
    pub rewards: Tabulated,
    pub model: Tabulated,
    pub logging: GibbsPolicy,
    pub target: GibbsPolicy,
}

pub fn random_case(seed: u64, max_k: usize, max_d: usize, max_batch: usize) -> Case {
    let mut rng = seeded_rng(seed, 0);
    let k = rng.random_range(2..=max_k);
    let d = rng.random_range(1..=max_d);
    let n = rng.random_range(1..=max_batch);
    let instances: Vec<Instance> = (0..n as u64).map(|id| random_instance(&mut rng, id, k, d)).collect();
    let rewards: BTreeMap<u64, Vec<f64>> =
        (0..n as u64).map(|id| (id, (0..k).map(|_| rng.random::<f64>()).collect())).collect();
    let model: BTreeMap<u64, Vec<f64>> = rewards
        .iter()
        .map(|(&id, row)| (id, row.iter().map(|r| r + 0.3 * gaussian(&mut rng)).collect()))
        .collect();
    let logging = random_policy(&mut rng, d, 0.2);
    let target = random_policy(&mut rng, d, 0.2);
    let deterministic = rng.random_bool(0.5);
    let log = instances
        .iter()
        .map(|inst| {
            let (candidate_id, propensity, mode) = if deterministic {
                (logging.argmax(inst).unwrap(), 1.0, LogMode::Deterministic)
            } else {
                let (y, p) = logging.sample(inst, &mut rng).unwrap();
                (y, p, LogMode::Stochastic)
            };
            LogEntry {
                instance_id: inst.id,
                candidate_id,
                reward: rewards[&inst.id][candidate_id],
                propensity,
                mode,
            }
        })
        .collect();
    Case {
        dataset: Dataset::new(instances).unwrap(),
        log,
        rewards: Tabulated::new(rewards),
        model: Tabulated::new(model),
        logging,
        target,
    }
}
