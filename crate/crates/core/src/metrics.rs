//! BLEU (sentence-level with add-one smoothing, corpus-level) and the
//! approximate randomization significance test.
//!
//! All scores are on the `[0, 1]` scale; the ×100 convention is applied only
//! when rendering reports.

use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Add one to numerator and denominator of precisions of order >= 2 and
    /// to the reference length in the brevity penalty.
    NakovAdd1,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: Smoothing::NakovAdd1,
        }
    }
}

impl BleuConfig {
    pub fn unsmoothed() -> Self {
        Self {
            smoothing: Smoothing::None,
            ..Self::default()
        }
    }
}

/// Sufficient statistics of one hypothesis/reference pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    /// Clipped n-gram matches for orders `1..=max_order`.
    pub matches: Vec<u64>,
    /// Hypothesis n-gram counts for orders `1..=max_order`.
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn new<T: Eq + Hash>(hypothesis: &[T], reference: &[T], max_order: usize) -> Self {
        let mut matches = Vec::with_capacity(max_order);
        let mut totals = Vec::with_capacity(max_order);
        for n in 1..=max_order {
            let hyp = ngram_counts(hypothesis, n);
            let refs = ngram_counts(reference, n);
            let m = hyp
                .iter()
                .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
                .sum();
            matches.push(m);
            totals.push(hypothesis.len().saturating_sub(n - 1) as u64);
        }
        Self {
            matches,
            totals,
            hyp_len: hypothesis.len() as u64,
            ref_len: reference.len() as u64,
        }
    }

    pub fn zeros(max_order: usize) -> Self {
        Self {
            matches: vec![0; max_order],
            totals: vec![0; max_order],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn accumulate(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU from these statistics.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (i, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, t) = match smoothing {
                Smoothing::NakovAdd1 if i > 0 => (m as f64 + 1.0, t as f64 + 1.0),
                _ => (m as f64, t as f64),
            };
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln();
        }
        let precision = (log_sum / self.matches.len() as f64).exp();
        let r = match smoothing {
            Smoothing::NakovAdd1 => self.ref_len as f64 + 1.0,
            Smoothing::None => self.ref_len as f64,
        };
        let c = self.hyp_len as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (bp * precision).clamp(0.0, 1.0)
    }
}

pub fn sentence_bleu<T: Eq + Hash>(hypothesis: &[T], reference: &[T], config: &BleuConfig) -> Result<f64> {
    check_config(config)?;
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(BleuStats::new(hypothesis, reference, config.max_order).score(config.smoothing))
}

fn check_config(config: &BleuConfig) -> Result<()> {
    if config.max_order == 0 {
        return Err(Error::Config("BLEU max_order must be >= 1".into()));
    }
    Ok(())
}

/// Corpus BLEU with pooled n-gram counts and a single brevity penalty.
pub fn corpus_bleu<T, H, R>(pairs: &[(H, R)], config: &BleuConfig) -> Result<f64>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_config(config)?;
    if config.smoothing != Smoothing::None {
        return Err(Error::Config("corpus BLEU is unsmoothed".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = BleuStats::zeros(config.max_order);
    for (h, r) in pairs {
        if r.as_ref().is_empty() {
            return Err(Error::Empty("reference"));
        }
        total.accumulate(&BleuStats::new(h.as_ref(), r.as_ref(), config.max_order));
    }
    Ok(total.score(Smoothing::None))
}

/// Corpus BLEU from precomputed per-segment statistics.
pub fn corpus_bleu_from_stats<'a>(stats: impl IntoIterator<Item = &'a BleuStats>, max_order: usize) -> f64 {
    let mut total = BleuStats::zeros(max_order);
    for s in stats {
        total.accumulate(s);
    }
    total.score(Smoothing::None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub iterations: usize,
    pub observed_diff: f64,
}

/// Approximate randomization test on the absolute corpus-BLEU difference.
///
/// Each iteration swaps every segment pair independently with probability
/// 1/2. The p-value is `(#{shuffled >= observed} + 1) / (iterations + 1)`.
pub fn ar_test<T, S>(
    outputs_a: &[S],
    outputs_b: &[S],
    references: &[S],
    iterations: usize,
    seed: u64,
) -> Result<SignificanceResult>
where
    T: Eq + Hash,
    S: AsRef<[T]> + Sync,
{
    if outputs_a.len() != outputs_b.len() {
        return Err(Error::LengthMismatch(outputs_a.len(), outputs_b.len()));
    }
    if outputs_a.len() != references.len() {
        return Err(Error::LengthMismatch(outputs_a.len(), references.len()));
    }
    if iterations == 0 {
        return Err(Error::Config("ar_test needs at least one iteration".into()));
    }
    if references.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if references.iter().any(|r| r.as_ref().is_empty()) {
        return Err(Error::Empty("reference"));
    }
    let order = BleuConfig::default().max_order;
    let sa: Vec<BleuStats> = outputs_a
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::new(h.as_ref(), r.as_ref(), order))
        .collect();
    let sb: Vec<BleuStats> = outputs_b
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::new(h.as_ref(), r.as_ref(), order))
        .collect();
    Ok(ar_test_from_stats(&sa, &sb, iterations, seed))
}

/// [`ar_test`] over precomputed per-segment statistics.
pub fn ar_test_from_stats(
    stats_a: &[BleuStats],
    stats_b: &[BleuStats],
    iterations: usize,
    seed: u64,
) -> SignificanceResult {
    let order = stats_a.first().map_or(4, |s| s.matches.len());
    let observed = (corpus_bleu_from_stats(stats_a, order) - corpus_bleu_from_stats(stats_b, order)).abs();
    let at_least = (0..iterations)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = seeded_rng(seed, i as u64);
            let mut ta = BleuStats::zeros(order);
            let mut tb = BleuStats::zeros(order);
            for (a, b) in stats_a.iter().zip(stats_b) {
                if rng.random_bool(0.5) {
                    ta.accumulate(b);
                    tb.accumulate(a);
                } else {
                    ta.accumulate(a);
                    tb.accumulate(b);
                }
            }
            let diff = (ta.score(Smoothing::None) - tb.score(Smoothing::None)).abs();
            diff >= observed
        })
        .count();
    SignificanceResult {
        p_value: (at_least as f64 + 1.0) / (iterations as f64 + 1.0),
        iterations,
        observed_diff: observed,
    }
}
