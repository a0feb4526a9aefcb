//! Learning from a deterministic log: DPM+R, DC and ĉDC trained from the
//! logging policy, compared by validation one-best BLEU.

use cflearn::reward_model::samples_from_log;
use cflearn::sim::{generate_task, simulate_log, TaskConfig};
use cflearn::trainer::{train, OneBestScorer, TrainConfig};
use cflearn::{LogMode, Objective, Result, RewardModel, RewardModelConfig, Split};

fn main() -> Result<()> {
    let task = generate_task(&TaskConfig::default())?;
    let d = &task.dataset;
    let log = simulate_log(&task.logging, d, LogMode::Deterministic, 0)?;
    let model = RewardModel::fit(&RewardModelConfig::default(), &samples_from_log(&log, d)?)?;
    let val = OneBestScorer::for_split(d, Split::Validation)?;
    println!("logging policy  BLEU {:.2}", 100.0 * val.score(&task.logging)?);
    println!("oracle policy   BLEU {:.2}", 100.0 * val.score(&task.oracle)?);

    for objective in [Objective::DpmR, Objective::Dc, Objective::ChatDc] {
        let config = TrainConfig {
            objective,
            ..TrainConfig::default()
        };
        let t = train(&log, d, &task.logging, &config, Some(&model))?;
        let best = t.best();
        println!(
            "{:<6} best BLEU {:.2} at step {} (epoch {}), c_hat {}",
            objective.label(LogMode::Deterministic),
            100.0 * best.validation_bleu.unwrap_or(0.0),
            best.batch,
            best.epoch,
            best.c_hat.map_or("-".into(), |c| format!("{c:.3}"))
        );
    }
    Ok(())
}
