//! Five-fold policy evaluation: estimates of a target policy's expected reward
//! from fresh stochastic logs, compared with the enumerated truth.

use cflearn::evaluator::{evaluate_policy, render_report, EvalConfig};
use cflearn::reward_model::samples_from_log;
use cflearn::sim::{generate_task, simulate_log, synthetic_reward_model, TaskConfig};
use cflearn::{GibbsPolicy, LogMode, Result, RewardModel, RewardModelConfig};

fn main() -> Result<()> {
    let task = generate_task(&TaskConfig::default())?;
    let d = &task.dataset;
    let weights = task
        .logging
        .weights
        .iter()
        .zip(&task.oracle.weights)
        .map(|(l, o)| l + 0.35 * (o - l))
        .collect();
    let target = GibbsPolicy::new(weights, task.logging.alpha)?;
    let config = EvalConfig::default();

    let shrunk = synthetic_reward_model(d, 0.5, 0.03, 1)?;
    let report = evaluate_policy(&target, &task.logging, d, &shrunk, &config)?;
    println!("reward model: truth shrunk by half plus small noise");
    print!("{}", render_report(&report).1);

    let log = simulate_log(&task.logging, d, LogMode::Stochastic, 1000)?;
    let forest = RewardModel::fit(&RewardModelConfig::default(), &samples_from_log(&log, d)?)?;
    let report = evaluate_policy(&target, &task.logging, d, &forest, &config)?;
    println!("\nreward model: forest fit on a separate stochastic log");
    print!("{}", render_report(&report).1);
    Ok(())
}
