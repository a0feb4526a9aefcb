//! A synthetic structured task with deterministic and stochastic logs and the
//! enumerated ground truth of its oracle and logging policies.

use cflearn::numeric::mean;
use cflearn::sim::{distinct_feature_patterns, generate_task, ground_truth, simulate_log, TaskConfig};
use cflearn::{LogMode, Result, Split};

fn main() -> Result<()> {
    let task = generate_task(&TaskConfig::default())?;
    let d = &task.dataset;
    println!(
        "{} instances, {} candidates each, {} features (task seed {})",
        d.len(),
        d.instances().next().map_or(0, |i| i.num_candidates()),
        d.feature_dim(),
        task.seed
    );
    for (name, policy) in [("oracle", &task.oracle), ("logging", &task.logging)] {
        let g = ground_truth(policy, d, Split::Validation)?;
        println!(
            "{name:<8} validation expected reward {:.4}, one-best corpus BLEU {:.2}",
            g.expected_reward,
            100.0 * g.onebest_corpus_bleu
        );
    }
    for mode in [LogMode::Deterministic, LogMode::Stochastic] {
        let log = simulate_log(&task.logging, d, mode, 0)?;
        let rewards: Vec<f64> = log.iter().map(|e| e.reward).collect();
        let unit = log.iter().filter(|e| e.propensity == 1.0).count();
        println!(
            "{mode:?} log: {} entries, mean reward {:.4}, propensity 1.0 in {unit}, {} distinct feature patterns",
            log.len(),
            mean(&rewards),
            distinct_feature_patterns(&log, d, 0.05)?
        );
    }
    Ok(())
}
