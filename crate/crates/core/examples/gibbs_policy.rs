//! Gibbs policy over a fixed candidate set: probabilities at several
//! temperatures, sampling with propensities, and the score-function gradient.

use cflearn::numeric::seeded_rng;
use cflearn::{Candidate, GibbsPolicy, Instance, Result, Split};

fn main() -> Result<()> {
    let instance = Instance {
        id: 0,
        split: Split::Train,
        reference: None,
        candidates: [[1.0, 0.2], [0.6, 0.9], [0.1, 0.1], [0.5, 0.5]]
            .iter()
            .enumerate()
            .map(|(k, f)| Candidate {
                tokens: vec![format!("y{k}")],
                features: f.to_vec(),
            })
            .collect(),
    };
    let weights = vec![1.0, 0.5];

    for alpha in [0.1, 1.0, 5.0, 50.0] {
        let p = GibbsPolicy::new(weights.clone(), alpha)?.probabilities(&instance)?;
        let shown: Vec<String> = p.iter().map(|x| format!("{x:.4}")).collect();
        println!("alpha {alpha:>4}: [{}]", shown.join(", "));
    }

    let policy = GibbsPolicy::new(weights, 5.0)?;
    println!("one-best candidate: {}", policy.argmax(&instance)?);
    let mut rng = seeded_rng(0, 0);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let (y, _propensity) = policy.sample(&instance, &mut rng)?;
        counts[y] += 1;
    }
    println!("sample counts over 10000 draws: {counts:?}");

    for y in 0..instance.num_candidates() {
        let g = policy.grad_log_prob(&instance, y)?;
        println!("grad log pi(y{y}) = [{:+.4}, {:+.4}]", g[0], g[1]);
    }

    let capped = policy.clone().with_nbest_cap(Some(2))?;
    println!("probabilities with a 2-best cap: {:?}", capped.probabilities(&instance)?);
    Ok(())
}
