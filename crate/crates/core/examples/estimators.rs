//! The five counterfactual estimators on one stochastic log, next to the
//! exact expected reward of the target policy.

use cflearn::estimators::estimate;
use cflearn::sim::{expected_reward, generate_task, simulate_log, synthetic_reward_model, true_rewards, TaskConfig};
use cflearn::{Batch, GibbsPolicy, LogMode, Objective, Result, Split};

fn main() -> Result<()> {
    let task = generate_task(&TaskConfig {
        num_train: 2000,
        num_validation: 100,
        num_test: 100,
        ..TaskConfig::default()
    })?;
    let d = &task.dataset;
    let weights = task
        .logging
        .weights
        .iter()
        .zip(&task.oracle.weights)
        .map(|(l, o)| 0.7 * l + 0.3 * o)
        .collect();
    let target = GibbsPolicy::new(weights, task.logging.alpha)?;
    let truth = expected_reward(&target, d, Split::Train, &true_rewards(d)?)?;
    let model = synthetic_reward_model(d, 0.5, 0.03, 1)?;

    let log = simulate_log(&task.logging, d, LogMode::Stochastic, 7)?;
    let batch = Batch::new(&log, d)?;
    println!("exact expected reward of the target: {truth:.4}");
    for obj in [Objective::Ips, Objective::Dpm, Objective::DpmR, Objective::Dc, Objective::ChatDc] {
        let e = estimate(obj, &target, &batch, Some(&model))?;
        println!(
            "{:<6} estimate {:.4}  error {:+.4}  c_hat {:.3}",
            obj.label(LogMode::Stochastic),
            e.value,
            e.value - truth,
            e.diagnostics.c_hat
        );
    }
    Ok(())
}
