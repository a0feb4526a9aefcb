//! Direct reward estimation: a regression forest and a ridge model fit on
//! logged feedback, scored by cross-validated macro and micro errors.

use cflearn::reward_model::{cross_validate, samples_from_log};
use cflearn::sim::{generate_task, simulate_log, TaskConfig};
use cflearn::{LogMode, Result, RewardModel, RewardModelConfig};

fn main() -> Result<()> {
    let task = generate_task(&TaskConfig {
        num_train: 2000,
        num_validation: 100,
        num_test: 100,
        ..TaskConfig::default()
    })?;
    let log = simulate_log(&task.logging, &task.dataset, LogMode::Stochastic, 1)?;
    let samples = samples_from_log(&log, &task.dataset)?;

    for (name, config) in [("forest", RewardModelConfig::default()), ("ridge", RewardModelConfig::ridge(1.0))] {
        let report = cross_validate(&config, &samples, 5, 0)?;
        println!(
            "{name:<6} 5-fold macro {:.4}  micro {:.4}",
            report.macro_avg, report.micro_avg
        );
    }

    let forest = RewardModel::fit(&RewardModelConfig::default(), &samples)?;
    let first = &samples[0];
    println!(
        "first logged sample: observed {:.3}, predicted {:.3}",
        first.reward,
        forest.predict(&first.features)?
    );
    Ok(())
}
