//! Expected utility of a candidate batch under a particle posterior.
//!
//! A batch of `k` groups has `2^k` joint outcomes; outcome `i` has bit `t`
//! equal to the result of test `t`. Particles only enter the test likelihood
//! through their status pattern on the batch (bit `t` = `[g_t, x]`), so most
//! computations aggregate particle weights per pattern first.

use crate::error::{Error, Result};
use crate::math::{binary_entropy, xlogx};
use crate::model::{GroupBatch, NoiseModel, StateVector};
use crate::posterior::ParticlePosterior;

pub const K_MAX: usize = 12;
/// Outcomes less likely than this are dropped from expectations.
pub const MIN_OUTCOME_PROB: f64 = 1e-300;

/// Scores a weighted particle cloud.
pub trait UtilityFunctional {
    fn evaluate(&self, weights: &[f64], particles: &[StateVector]) -> f64;
}

impl<F> UtilityFunctional for F
where
    F: Fn(&[f64], &[StateVector]) -> f64,
{
    fn evaluate(&self, weights: &[f64], particles: &[StateVector]) -> f64 {
        self(weights, particles)
    }
}

/// `Σ ω ln ω`, with `0 ln 0 = 0`. Duplicate states are not merged.
#[derive(Clone, Copy, Debug, Default)]
pub struct NegEntropy;

impl UtilityFunctional for NegEntropy {
    fn evaluate(&self, weights: &[f64], _particles: &[StateVector]) -> f64 {
        weights.iter().map(|&w| xlogx(w)).sum()
    }
}

/// Expected AUC of the marginal decoder: `Σ_j ω_j ψ(m(ω), x_j)`, averaged
/// over the particles for which the AUC is defined.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpectedAuc;

impl UtilityFunctional for ExpectedAuc {
    fn evaluate(&self, weights: &[f64], particles: &[StateVector]) -> f64 {
        let Some(first) = particles.first() else {
            return 0.5;
        };
        let n = first.len();
        let mut m = vec![0.0; n];
        for (x, &w) in particles.iter().zip(weights) {
            if w > 0.0 {
                for i in x.ones() {
                    m[i] += w;
                }
            }
        }
        let ranks = midranks(&m);
        let (mut acc, mut mass) = (0.0, 0.0);
        for (x, &w) in particles.iter().zip(weights) {
            if w <= 0.0 {
                continue;
            }
            if let Some(a) = auc_from_ranks(&ranks, x) {
                acc += w * a;
                mass += w;
            }
        }
        if mass > 0.0 {
            acc / mass
        } else {
            0.5
        }
    }
}

pub fn neg_entropy_phi() -> NegEntropy {
    NegEntropy
}

pub fn expected_auc_phi() -> ExpectedAuc {
    ExpectedAuc
}

/// Average 1-based ranks with ties sharing the mean of their positions.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn auc_from_ranks(ranks: &[f64], x: &StateVector) -> Option<f64> {
    let po = x.count_ones();
    let ne = x.len() - po;
    if po == 0 || ne == 0 {
        return None;
    }
    let rank_sum: f64 = x.ones().map(|i| ranks[i]).sum();
    let u = rank_sum - (po * (po + 1)) as f64 / 2.0;
    Some(u / (po * ne) as f64)
}

/// AUC of `scores` against labels `x`, ties counted as one half. `None` when
/// `x` has no positives or no negatives.
pub fn auc_of_scores(scores: &[f64], x: &StateVector) -> Option<f64> {
    assert_eq!(scores.len(), x.len(), "scores and labels differ in length");
    auc_from_ranks(&midranks(scores), x)
}

/// Mutual information between `X` and one test with `f = P([g, X] = 1)`:
/// `h(ρ f + 1 − σ) − γ f − h(σ)`.
pub fn mi_single_group(f: f64, sigma: f64, s: f64) -> f64 {
    let rho = sigma + s - 1.0;
    let gamma = binary_entropy(s) - binary_entropy(sigma);
    binary_entropy(rho * f + 1.0 - sigma) - gamma * f - binary_entropy(sigma)
}

/// Per-particle status pattern on the batch plus per-test `P(y | status)`.
struct BatchLayout {
    k: usize,
    /// `probs[t][y][status]`
    probs: Vec<[[f64; 2]; 2]>,
    patterns: Vec<usize>,
}

impl BatchLayout {
    fn new(p: &ParticlePosterior, batch: &GroupBatch, noise: &NoiseModel) -> Result<Self> {
        let k = batch.len();
        if k > K_MAX {
            return Err(Error::invalid(format!("batch of {k} groups exceeds k_max = {K_MAX}")));
        }
        let mut probs = Vec::with_capacity(k);
        for g in batch.groups() {
            if g.population() != p.num_vars() {
                return Err(Error::invalid("group population does not match the particles"));
            }
            noise.check_size(g.size())?;
            let p1 = [noise.prob_positive(g.size(), false), noise.prob_positive(g.size(), true)];
            probs.push([[1.0 - p1[0], 1.0 - p1[1]], p1]);
        }
        let patterns = p
            .particles()
            .iter()
            .map(|x| {
                batch
                    .groups()
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (t, g)| acc | ((g.status(x) as usize) << t))
            })
            .collect();
        Ok(BatchLayout { k, probs, patterns })
    }

    fn likelihood(&self, outcome: usize, pattern: usize) -> f64 {
        (0..self.k)
            .map(|t| self.probs[t][(outcome >> t) & 1][(pattern >> t) & 1])
            .product()
    }

    /// Posterior mass per status pattern.
    fn pattern_mass(&self, weights: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; 1 << self.k];
        for (&s, &w) in self.patterns.iter().zip(weights) {
            mass[s] += w;
        }
        mass
    }
}

/// `D_i = P(Y_G = i)` for every joint outcome.
pub fn outcome_distribution(p: &ParticlePosterior, batch: &GroupBatch, noise: &NoiseModel) -> Result<Vec<f64>> {
    let layout = BatchLayout::new(p, batch, noise)?;
    let mut d = layout.pattern_mass(p.weights());
    // Apply the 2×2 channel of each test along its bit.
    for (t, m) in layout.probs.iter().enumerate() {
        let bit = 1 << t;
        for lo in 0..d.len() {
            if lo & bit != 0 {
                continue;
            }
            let hi = lo | bit;
            let (a, b) = (d[lo], d[hi]);
            d[lo] = m[0][0] * a + m[0][1] * b;
            d[hi] = m[1][0] * a + m[1][1] * b;
        }
    }
    Ok(d)
}

/// Mutual information `I(X; Y_G)` in nats: `H(Y_G) − Σ_t (h(σ_t) + γ_t f(g_t))`.
pub fn mi_of_batch(p: &ParticlePosterior, batch: &GroupBatch, noise: &NoiseModel) -> Result<f64> {
    let d = outcome_distribution(p, batch, noise)?;
    let h1 = -d.iter().map(|&v| xlogx(v)).sum::<f64>();
    let h2: f64 = batch
        .groups()
        .iter()
        .map(|g| {
            let f: f64 = p
                .particles()
                .iter()
                .zip(p.weights())
                .filter(|(x, _)| g.status(x))
                .map(|(_, &w)| w)
                .sum();
            let size = g.size();
            binary_entropy(noise.specificity(size)) + noise.gamma(size) * f
        })
        .sum();
    Ok(h1 - h2)
}

/// The `2^k` hypothetical posteriors: outcome probabilities `D` and the
/// conditional particle weights `E` (rows with `D_i = 0` are left at zero).
#[derive(Clone, Debug, PartialEq)]
pub struct HypotheticalPosteriorTable {
    pub outcome_probs: Vec<f64>,
    pub conditional: Vec<Vec<f64>>,
}

pub fn hypothetical_posteriors(
    p: &ParticlePosterior,
    batch: &GroupBatch,
    noise: &NoiseModel,
) -> Result<HypotheticalPosteriorTable> {
    let layout = BatchLayout::new(p, batch, noise)?;
    let mut outcome_probs = Vec::with_capacity(1 << layout.k);
    let mut conditional = Vec::with_capacity(1 << layout.k);
    for i in 0..1usize << layout.k {
        let (d, row) = conditional_row(&layout, p.weights(), i);
        outcome_probs.push(d);
        conditional.push(if d > 0.0 { row } else { vec![0.0; p.len()] });
    }
    Ok(HypotheticalPosteriorTable {
        outcome_probs,
        conditional,
    })
}

fn conditional_row(layout: &BatchLayout, weights: &[f64], outcome: usize) -> (f64, Vec<f64>) {
    let lik: Vec<f64> = (0..1usize << layout.k).map(|s| layout.likelihood(outcome, s)).collect();
    let mut row: Vec<f64> = layout.patterns.iter().zip(weights).map(|(&s, &w)| w * lik[s]).collect();
    let d: f64 = row.iter().sum();
    if d > 0.0 {
        row.iter_mut().for_each(|v| *v /= d);
    }
    (d, row)
}

/// `U_Φ(G, π̂) = Σ_i D_i Φ(E_i·)` over outcomes with `D_i ≥ MIN_OUTCOME_PROB`.
pub fn expected_utility<U: UtilityFunctional + ?Sized>(
    p: &ParticlePosterior,
    batch: &GroupBatch,
    noise: &NoiseModel,
    phi: &U,
) -> Result<f64> {
    let layout = BatchLayout::new(p, batch, noise)?;
    let mut total = 0.0;
    for i in 0..1usize << layout.k {
        let (d, row) = conditional_row(&layout, p.weights(), i);
        if d < MIN_OUTCOME_PROB {
            continue;
        }
        total += d * phi.evaluate(&row, p.particles());
    }
    Ok(total)
}
