//! Linear Gibbs policy over closed candidate sets.
//!
//! `π_w(y|x) ∝ exp(α · w·φ(x, y))`, normalized over the candidate set of `x`
//! or, with an n-best cap `m`, over the `m` highest-scoring candidates only.
//! Ties are broken by lower candidate id everywhere.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numeric::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsPolicy {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest_cap: Option<usize>,
    pub weights: Vec<f64>,
}

/// The policy's distribution over one instance's candidates.
#[derive(Debug, Clone)]
pub struct CandidateDistribution {
    pub probs: Vec<f64>,
    /// `E_π[φ]` under `probs`.
    pub mean_features: Vec<f64>,
    alpha: f64,
}

impl CandidateDistribution {
    /// `∇_w log π_w(y|x) = α (φ(x, y) − E_π[φ])`.
    pub fn grad_log_prob(&self, instance: &Instance, candidate: usize) -> Result<Vec<f64>> {
        let phi = &instance.candidate(candidate)?.features;
        Ok(phi
            .iter()
            .zip(&self.mean_features)
            .map(|(f, m)| self.alpha * (f - m))
            .collect())
    }
}

impl GibbsPolicy {
    pub fn new(weights: Vec<f64>, alpha: f64) -> Result<Self> {
        let p = Self {
            alpha,
            nbest_cap: None,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(dim: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], alpha)
    }

    pub fn with_nbest_cap(mut self, cap: Option<usize>) -> Result<Self> {
        self.nbest_cap = cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weights".into()));
        }
        if self.nbest_cap == Some(0) {
            return Err(Error::Config("nbest_cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Linear scores `w·φ` for every candidate.
    pub fn scores(&self, instance: &Instance) -> Result<Vec<f64>> {
        instance
            .candidates
            .iter()
            .map(|c| {
                if c.features.len() != self.weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.weights.len(),
                        got: c.features.len(),
                    });
                }
                let s = dot(&self.weights, &c.features);
                if s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::NonFinite(format!("score of instance {}", instance.id)))
                }
            })
            .collect()
    }

    fn active_mask(&self, scores: &[f64]) -> Vec<bool> {
        match self.nbest_cap {
            Some(m) if m < scores.len() => {
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut mask = vec![false; scores.len()];
                for &k in &order[..m] {
                    mask[k] = true;
                }
                mask
            }
            _ => vec![true; scores.len()],
        }
    }

    pub fn probabilities(&self, instance: &Instance) -> Result<Vec<f64>> {
        let scores = self.scores(instance)?;
        Ok(self.softmax(&scores))
    }

    fn softmax(&self, scores: &[f64]) -> Vec<f64> {
        let mask = self.active_mask(scores);
        let max = scores
            .iter()
            .zip(&mask)
            .filter(|(_, &on)| on)
            .map(|(s, _)| self.alpha * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores
            .iter()
            .zip(&mask)
            .map(|(s, &on)| if on { (self.alpha * s - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        probs
    }

    pub fn distribution(&self, instance: &Instance) -> Result<CandidateDistribution> {
        let probs = self.probabilities(instance)?;
        let mut mean_features = vec![0.0; self.dim()];
        for (c, &p) in instance.candidates.iter().zip(&probs) {
            if p == 0.0 {
                continue;
            }
            for (m, f) in mean_features.iter_mut().zip(&c.features) {
                *m += p * f;
            }
        }
        Ok(CandidateDistribution {
            probs,
            mean_features,
            alpha: self.alpha,
        })
    }

    /// Id of the highest-scoring candidate, lowest id on ties.
    pub fn argmax(&self, instance: &Instance) -> Result<usize> {
        let scores = self.scores(instance)?;
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Draws a candidate and returns it with its exact probability.
    pub fn sample<R: Rng + ?Sized>(&self, instance: &Instance, rng: &mut R) -> Result<(usize, f64)> {
        let probs = self.probabilities(instance)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            last = k;
            acc += p;
            if u < acc {
                return Ok((k, p));
            }
        }
        Ok((last, probs[last]))
    }

    pub fn grad_log_prob(&self, instance: &Instance, candidate: usize) -> Result<Vec<f64>> {
        self.distribution(instance)?.grad_log_prob(instance, candidate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Candidate, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(features: &[&[f64]]) -> Instance {
        Instance {
            id: 0,
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

    fn two() -> Instance {
        instance(&[&[1.0, 0.0], &[0.0, 1.0]])
    }

    #[test]
    fn zero_weights_are_uniform() {
        let inst = instance(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let p = GibbsPolicy::uniform(2, 5.0).unwrap().probabilities(&inst).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_softmax() {
        let w = vec![2f64.ln(), 0.0];
        let p = GibbsPolicy::new(w.clone(), 1.0).unwrap().probabilities(&two()).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = GibbsPolicy::new(w, 5.0).unwrap().probabilities(&two()).unwrap();
        assert!((p[0] - 32.0 / 33.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let inst = instance(&[&[700.0], &[-700.0], &[699.0]]);
        let p = GibbsPolicy::new(vec![1.0], 1.0).unwrap().probabilities(&inst).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nbest_cap_masks_low_scores() {
        let inst = instance(&[&[1.0], &[3.0], &[3.0], &[2.0]]);
        let policy = GibbsPolicy::new(vec![1.0], 1.0)
            .unwrap()
            .with_nbest_cap(Some(2))
            .unwrap();
        let p = policy.probabilities(&inst).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p[1] - 0.5).abs() < 1e-15 && (p[2] - 0.5).abs() < 1e-15);
        // tie at the cutoff goes to the lower id
        let capped = policy.with_nbest_cap(Some(1)).unwrap();
        assert_eq!(capped.probabilities(&inst).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_ties_and_singletons() {
        let p = GibbsPolicy::new(vec![2f64.ln(), 0.0], 1.0).unwrap();
        assert_eq!(p.argmax(&two()).unwrap(), 0);
        assert_eq!(p.argmax(&instance(&[&[5.0, 5.0]])).unwrap(), 0);
        let tied = instance(&[&[2.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(GibbsPolicy::new(vec![1.0, 0.0], 1.0).unwrap().argmax(&tied).unwrap(), 0);
    }

    #[test]
    fn singleton_sample_has_unit_propensity() {
        let inst = instance(&[&[0.3, 0.1]]);
        let p = GibbsPolicy::new(vec![1.0, 1.0], 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(p.sample(&inst, &mut rng).unwrap(), (0, 1.0));
        }
    }

    #[test]
    fn uniform_sampling_frequency() {
        let p = GibbsPolicy::uniform(2, 5.0).unwrap();
        let inst = two();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| p.sample(&inst, &mut rng).unwrap().0 == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = GibbsPolicy::new(vec![0.2, -0.4], 3.0).unwrap();
        let inst = instance(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| p.sample(&inst, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn grad_log_prob_hand_values() {
        let g = GibbsPolicy::uniform(2, 1.0).unwrap().grad_log_prob(&two(), 0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
        let single = instance(&[&[0.3, -2.0]]);
        let g = GibbsPolicy::new(vec![1.0, 1.0], 5.0).unwrap().grad_log_prob(&single, 0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GibbsPolicy::new(vec![1.0], 0.0).is_err());
        assert!(GibbsPolicy::new(vec![f64::NAN], 1.0).is_err());
        assert!(GibbsPolicy::new(vec![1.0], 1.0).unwrap().with_nbest_cap(Some(0)).is_err());
        let err = GibbsPolicy::new(vec![1.0], 1.0).unwrap().probabilities(&two()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, got: 2 }));
    }
}
