//! Counterfactual objectives and their score-function gradients.
//!
//! Values are reported on the reward scale (an estimate of the target
//! policy's expected reward). Gradients are of the loss-scale risk
//! `R̂ = −value`, so a descent step is `w − η·gradient`.
//!
//! Deterministic logging is the special case `π_0 ≡ 1`: the reweighted
//! objectives share one implementation, so DPM+R is IPS+R and DC is DR
//! once the logged propensities are below one. Reweighting and `ĉ` are
//! computed within the batch that is passed in.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance, LogEntry, LogMode};
use crate::error::{Error, Result};
use crate::numeric::{CompensatedSum, VectorSum};
use crate::policy::GibbsPolicy;
use crate::reward_model::RewardPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `(1/β) Σ Δ_t π_w(y_t|x_t)`
    Dpm,
    /// `(1/β) Σ Δ_t ρ̄_t`
    DpmR,
    /// Doubly controlled with `ĉ = 1`.
    Dc,
    /// Doubly controlled with the variance-optimal `ĉ`.
    ChatDc,
    /// `(1/β) Σ Δ_t ρ_t`
    Ips,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Dpm,
        Objective::DpmR,
        Objective::Dc,
        Objective::ChatDc,
        Objective::Ips,
    ];

    pub fn uses_optimal_c(self) -> bool {
        self == Objective::ChatDc
    }

    pub fn needs_reward_model(self) -> bool {
        matches!(self, Objective::Dc | Objective::ChatDc)
    }

    pub fn is_reweighted(self) -> bool {
        matches!(self, Objective::DpmR | Objective::Dc | Objective::ChatDc)
    }

    /// Report label; stochastic-log names for stochastic data.
    pub fn label(self, mode: LogMode) -> &'static str {
        match (self, mode) {
            (Objective::Dpm, _) => "DPM",
            (Objective::DpmR, LogMode::Deterministic) => "DPM+R",
            (Objective::DpmR, LogMode::Stochastic) => "IPS+R",
            (Objective::Dc, LogMode::Deterministic) => "DC",
            (Objective::Dc, LogMode::Stochastic) => "DR",
            (Objective::ChatDc, LogMode::Deterministic) => "ĉDC",
            (Objective::ChatDc, LogMode::Stochastic) => "ĉDR",
            (Objective::Ips, _) => "IPS",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Objective::Dpm => "dpm",
            Objective::DpmR => "dpm_r",
            Objective::Dc => "dc",
            Objective::ChatDc => "chat_dc",
            Objective::Ips => "ips",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['+', '-'], "_");
        Ok(match norm.as_str() {
            "dpm" => Objective::Dpm,
            "dpm_r" | "ips_r" => Objective::DpmR,
            "dc" | "dr" => Objective::Dc,
            "chat_dc" | "chat_dr" | "ĉdc" | "ĉdr" | "cdc" | "cdr" => Objective::ChatDc,
            "ips" => Objective::Ips,
            _ => return Err(Error::Config(format!("unknown objective {s:?}"))),
        })
    }
}

/// Log entries resolved against their instances.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    entries: Vec<(&'a LogEntry, &'a Instance)>,
}

impl<'a> Batch<'a> {
    pub fn new(entries: impl IntoIterator<Item = &'a LogEntry>, dataset: &'a Dataset) -> Result<Self> {
        let entries = entries
            .into_iter()
            .map(|e| {
                let inst = dataset.instance(e.instance_id)?;
                inst.candidate(e.candidate_id)?;
                Ok((e, inst))
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(&'a LogEntry, &'a Instance)] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalC {
    pub value: f64,
    /// Set when `Var(Y)` was too small and `ĉ = 1` was used instead.
    pub fallback: bool,
}

/// `ĉ = Cov(X, Y) / Var(Y)`, falling back to 1 when `Var(Y) < 1e-12`.
pub fn optimal_c(observed: &[f64], predicted: &[f64]) -> OptimalC {
    let n = observed.len().min(predicted.len());
    let fallback = OptimalC {
        value: 1.0,
        fallback: true,
    };
    if n < 2 {
        return fallback;
    }
    let (x, y) = (&observed[..n], &predicted[..n]);
    let mx = crate::numeric::mean(x);
    let my = crate::numeric::mean(y);
    let denom = (n - 1) as f64;
    let cov = crate::numeric::sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my))) / denom;
    let var = crate::numeric::sum(y.iter().map(|b| (b - my) * (b - my))) / denom;
    if var < 1e-12 {
        return fallback;
    }
    OptimalC {
        value: cov / var,
        fallback: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDiagnostics {
    /// `ĉ` used for the additive control variate; 0 when there is none.
    pub c_hat: f64,
    pub c_fallback: bool,
    /// `Σ_t ρ_t`
    pub weight_sum: f64,
    pub min_normalized_weight: f64,
    pub max_normalized_weight: f64,
    /// `(1/β) Σ_t ĉ Σ_y Δ̂(x_t, y) π_w(y|x_t)`
    pub direct_term_value: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub diagnostics: EstimatorDiagnostics,
}

/// Importance ratios `ρ_t = π_w(y_t|x_t) / π_0(y_t|x_t)` and their
/// batch-normalized version `ρ̄_t = ρ_t / ((1/β) Σ_u ρ_u)`.
pub fn importance_weights(policy: &GibbsPolicy, batch: &Batch<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let rho = batch
        .entries
        .iter()
        .map(|(e, inst)| Ok(policy.probabilities(inst)?[e.candidate_id] / e.propensity))
        .collect::<Result<Vec<f64>>>()?;
    let rho_bar = normalize(&rho)?;
    Ok((rho, rho_bar))
}

fn normalize(rho: &[f64]) -> Result<Vec<f64>> {
    let total = crate::numeric::sum(rho.iter().copied());
    if !(total > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    let m = total / rho.len() as f64;
    Ok(rho.iter().map(|r| r / m).collect())
}

pub fn estimate(
    objective: Objective,
    policy: &GibbsPolicy,
    batch: &Batch<'_>,
    reward_model: Option<&dyn RewardPredictor>,
) -> Result<Estimate> {
    compute(objective, policy, batch, reward_model, false).map(|(e, _)| e)
}

/// Loss-scale gradient `∇_w R̂`.
pub fn gradient(
    objective: Objective,
    policy: &GibbsPolicy,
    batch: &Batch<'_>,
    reward_model: Option<&dyn RewardPredictor>,
) -> Result<Vec<f64>> {
    compute(objective, policy, batch, reward_model, true).map(|(_, g)| g.expect("requested"))
}

/// Value and loss-scale gradient in one pass.
pub fn estimate_with_gradient(
    objective: Objective,
    policy: &GibbsPolicy,
    batch: &Batch<'_>,
    reward_model: Option<&dyn RewardPredictor>,
) -> Result<(Estimate, Vec<f64>)> {
    compute(objective, policy, batch, reward_model, true).map(|(e, g)| (e, g.expect("requested")))
}

struct EntryTerms {
    prob: f64,
    rho: f64,
    grad_log: Vec<f64>,
    predicted: f64,
    /// `Σ_y Δ̂(x, y) π(y|x)`
    direct: f64,
    /// `Σ_y Δ̂(x, y) π(y|x) ∇log π(y|x)`
    direct_grad: Vec<f64>,
}

fn entry_terms(
    policy: &GibbsPolicy,
    entry: &LogEntry,
    inst: &Instance,
    model: Option<&dyn RewardPredictor>,
    want_grad: bool,
) -> Result<EntryTerms> {
    let dist = policy.distribution(inst)?;
    let prob = dist.probs[entry.candidate_id];
    let grad_log = if want_grad {
        dist.grad_log_prob(inst, entry.candidate_id)?
    } else {
        Vec::new()
    };
    let mut predicted = 0.0;
    let mut direct = CompensatedSum::new();
    let mut direct_grad = VectorSum::zeros(if want_grad { policy.dim() } else { 0 });
    if let Some(model) = model {
        predicted = model.predict_candidate(inst, entry.candidate_id)?;
        for (k, &p) in dist.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let r = model.predict_candidate(inst, k)?;
            direct.add(r * p);
            if want_grad {
                direct_grad.add_scaled(r * p, &dist.grad_log_prob(inst, k)?);
            }
        }
    }
    Ok(EntryTerms {
        prob,
        rho: prob / entry.propensity,
        grad_log,
        predicted,
        direct: direct.value(),
        direct_grad: direct_grad.into_vec(),
    })
}

fn compute(
    objective: Objective,
    policy: &GibbsPolicy,
    batch: &Batch<'_>,
    reward_model: Option<&dyn RewardPredictor>,
    want_grad: bool,
) -> Result<(Estimate, Option<Vec<f64>>)> {
    let model = if objective.needs_reward_model() {
        Some(reward_model.ok_or(Error::MissingRewardModel(objective.label(LogMode::Deterministic)))?)
    } else {
        None
    };
    let terms = batch
        .entries
        .iter()
        .map(|(e, inst)| entry_terms(policy, e, inst, model, want_grad))
        .collect::<Result<Vec<_>>>()?;
    let beta = terms.len() as f64;
    let rho: Vec<f64> = terms.iter().map(|t| t.rho).collect();
    let weight_sum = crate::numeric::sum(rho.iter().copied());

    let rho_bar = if objective.is_reweighted() || weight_sum > 0.0 {
        normalize(&rho)?
    } else {
        vec![0.0; rho.len()]
    };

    let rewards: Vec<f64> = batch.entries.iter().map(|(e, _)| e.reward).collect();
    let c = match objective {
        Objective::Dc => OptimalC {
            value: 1.0,
            fallback: false,
        },
        Objective::ChatDc => {
            let predicted: Vec<f64> = terms.iter().map(|t| t.predicted).collect();
            optimal_c(&rewards, &predicted)
        }
        _ => OptimalC {
            value: 0.0,
            fallback: false,
        },
    };

    // per-entry weight on the observed residual
    let weights: Vec<f64> = match objective {
        Objective::Dpm => terms.iter().map(|t| t.prob).collect(),
        Objective::Ips => rho.clone(),
        _ => rho_bar.clone(),
    };
    let residuals: Vec<f64> = terms
        .iter()
        .zip(&rewards)
        .map(|(t, r)| r - c.value * t.predicted)
        .collect();

    let mut value = CompensatedSum::new();
    let mut direct_value = CompensatedSum::new();
    for ((t, w), a) in terms.iter().zip(&weights).zip(&residuals) {
        value.add(a * w);
        if objective.needs_reward_model() {
            value.add(c.value * t.direct);
            direct_value.add(c.value * t.direct);
        }
    }

    let grad = want_grad.then(|| {
        let dim = policy.dim();
        // centering term of the self-normalized weights: (1/β) Σ_u ρ̄_u ∇log π_u
        let centre = if objective.is_reweighted() {
            let mut s = VectorSum::zeros(dim);
            for (t, rb) in terms.iter().zip(&rho_bar) {
                s.add_scaled(*rb / beta, &t.grad_log);
            }
            s.into_vec()
        } else {
            vec![0.0; dim]
        };
        let mut g = VectorSum::zeros(dim);
        for ((t, w), a) in terms.iter().zip(&weights).zip(&residuals) {
            let centred: Vec<f64> = t.grad_log.iter().zip(&centre).map(|(x, m)| x - m).collect();
            g.add_scaled(a * w, &centred);
            if objective.needs_reward_model() {
                g.add_scaled(c.value, &t.direct_grad);
            }
        }
        // loss = −value
        g.into_vec().into_iter().map(|v| -v / beta).collect::<Vec<f64>>()
    });
    if let Some(g) = &grad {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("objective gradient".into()));
        }
    }

    let (min_w, max_w) = rho_bar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let estimate = Estimate {
        value: value.value() / beta,
        diagnostics: EstimatorDiagnostics {
            c_hat: c.value,
            c_fallback: c.fallback,
            weight_sum,
            min_normalized_weight: min_w,
            max_normalized_weight: max_w,
            direct_term_value: direct_value.value() / beta,
            batch_size: terms.len(),
        },
    };
    if !estimate.value.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    Ok((estimate, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Candidate, Split};

    fn inst(id: u64, features: &[&[f64]]) -> Instance {
        Instance {
            id,
            split: Split::Train,
            reference: None,
            candidates: features
                .iter()
                .map(|f| Candidate {
                    tokens: vec!["t".into()],
                    features: f.to_vec(),
                })
                .collect(),
        }
    }

    fn entry(instance_id: u64, candidate_id: usize, reward: f64, propensity: f64) -> LogEntry {
        LogEntry {
            instance_id,
            candidate_id,
            reward,
            propensity,
            mode: if propensity == 1.0 {
                LogMode::Deterministic
            } else {
                LogMode::Stochastic
            },
        }
    }

    /// Two instances whose logged candidates get π_w = 0.4 and 0.2 under w = (1).
    fn two_point_log() -> (Dataset, Vec<LogEntry>, GibbsPolicy) {
        // K = 2 with scores s0, s1: π(0) = 1 / (1 + e^{s1 - s0})
        let a = (1.5f64).ln(); // π(0) = 0.4 when s1 - s0 = ln 1.5
        let b = (4.0f64).ln(); // π(0) = 0.2
        let ds = Dataset::new(vec![inst(0, &[&[0.0], &[a]]), inst(1, &[&[0.0], &[b]])]).unwrap();
        let log = vec![entry(0, 0, 0.5, 1.0), entry(1, 0, 1.0, 1.0)];
        (ds, log, GibbsPolicy::new(vec![1.0], 1.0).unwrap())
    }

    #[test]
    fn reweighting_hand_values() {
        let (ds, log, pol) = two_point_log();
        let batch = Batch::new(&log, &ds).unwrap();
        let (rho, rho_bar) = importance_weights(&pol, &batch).unwrap();
        assert!((rho[0] - 0.4).abs() < 1e-12 && (rho[1] - 0.2).abs() < 1e-12);
        assert!((rho_bar[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((rho_bar[1] - 2.0 / 3.0).abs() < 1e-12);
        let v = estimate(Objective::DpmR, &pol, &batch, None).unwrap().value;
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ips_single_entry() {
        let ds = Dataset::new(vec![inst(0, &[&[0.0], &[(7.0f64 / 3.0).ln()]])]).unwrap();
        // π(0) = 1 / (1 + 7/3) = 0.3
        let log = vec![entry(0, 0, 0.5, 0.6)];
        let pol = GibbsPolicy::new(vec![1.0], 1.0).unwrap();
        let v = estimate(Objective::Ips, &pol, &Batch::new(&log, &ds).unwrap(), None)
            .unwrap()
            .value;
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_give_unit_weights() {
        let ds = Dataset::new(vec![inst(0, &[&[0.3], &[0.1], &[-0.2]])]).unwrap();
        let pol = GibbsPolicy::new(vec![2.0], 1.0).unwrap();
        let p = pol.probabilities(ds.instance(0).unwrap()).unwrap();
        let log: Vec<LogEntry> = (0..3).map(|k| entry(0, k, 0.5, p[k])).collect();
        let (_, rb) = importance_weights(&pol, &Batch::new(&log, &ds).unwrap()).unwrap();
        for v in rb {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_c_cases() {
        let c = optimal_c(&[0.2, 0.4, 0.6], &[0.1, 0.2, 0.3]);
        assert!((c.value - 2.0).abs() < 1e-12 && !c.fallback);
        let c = optimal_c(&[0.2, 0.4, 0.6], &[0.3, 0.3, 0.3]);
        assert_eq!(c, OptimalC { value: 1.0, fallback: true });
    }

    #[test]
    fn dc_requires_model() {
        let (ds, log, pol) = two_point_log();
        let batch = Batch::new(&log, &ds).unwrap();
        for obj in [Objective::Dc, Objective::ChatDc] {
            assert!(matches!(
                estimate(obj, &pol, &batch, None),
                Err(Error::MissingRewardModel(_))
            ));
        }
    }

    #[test]
    fn degenerate_batch_is_reported() {
        let ds = Dataset::new(vec![inst(0, &[&[1.0], &[0.0]])]).unwrap();
        let pol = GibbsPolicy::new(vec![1.0], 1.0).unwrap().with_nbest_cap(Some(1)).unwrap();
        let log = vec![entry(0, 1, 0.5, 0.5)];
        let batch = Batch::new(&log, &ds).unwrap();
        assert!(matches!(importance_weights(&pol, &batch), Err(Error::DegenerateBatch)));
        assert!(matches!(
            estimate(Objective::DpmR, &pol, &batch, None),
            Err(Error::DegenerateBatch)
        ));
        assert_eq!(estimate(Objective::Ips, &pol, &batch, None).unwrap().value, 0.0);
    }

    #[test]
    fn objective_names_parse() {
        for o in Objective::ALL {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        assert_eq!("IPS+R".parse::<Objective>().unwrap(), Objective::DpmR);
        assert_eq!("ĉDR".parse::<Objective>().unwrap(), Objective::ChatDc);
        assert!("foo".parse::<Objective>().is_err());
    }
}
