//! A crafted deterministic log with one high-reward entry and many
//! mid-reward entries. DPM+R drains probability from the mid-reward outputs;
//! ĉDC keeps them because its direct term covers every candidate.

use cflearn::trainer::{train, TrainConfig};
use cflearn::{Candidate, Dataset, GibbsPolicy, Instance, LogEntry, LogMode, Objective, Result, Split, Tabulated};

fn main() -> Result<()> {
    let k = 4;
    let instances = (0..100u64)
        .map(|id| {
            let logged = if id == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            let mut features = vec![logged];
            features.extend((1..k).map(|_| vec![0.0, 0.0]));
            Instance {
                id,
                split: Split::Train,
                reference: None,
                candidates: features
                    .into_iter()
                    .enumerate()
                    .map(|(j, features)| Candidate {
                        tokens: vec![format!("y{j}")],
                        features,
                    })
                    .collect(),
            }
        })
        .collect();
    let dataset = Dataset::new(instances)?;
    let log: Vec<LogEntry> = (0..100u64)
        .map(|id| LogEntry {
            instance_id: id,
            candidate_id: 0,
            reward: if id == 0 { 1.0 } else { 0.5 },
            propensity: 1.0,
            mode: LogMode::Deterministic,
        })
        .collect();
    let model = Tabulated::new(
        log.iter()
            .map(|e| {
                let mut row = vec![0.2; k];
                row[0] = e.reward;
                (e.instance_id, row)
            })
            .collect(),
    );
    let start = GibbsPolicy::uniform(2, 5.0)?;
    for objective in [Objective::DpmR, Objective::ChatDc] {
        let config = TrainConfig {
            objective,
            batch_size: 100,
            max_epochs: 200,
            ..TrainConfig::default()
        };
        let policy = train(&log, &dataset, &start, &config, Some(&model))?.last_policy;
        let p_high = policy.probabilities(dataset.instance(0)?)?[0];
        let p_mid = policy.probabilities(dataset.instance(1)?)?[0];
        println!(
            "{:<6} weights [{:+.2}, {:+.2}]  p(high logged) {p_high:.3e}  p(mid logged) {p_mid:.3e}",
            objective.label(LogMode::Deterministic),
            policy.weights[0],
            policy.weights[1]
        );
    }
    println!("uniform probability: {:.3e}", 1.0 / k as f64);
    Ok(())
}
