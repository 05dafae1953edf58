//! Marginal decoders.
//!
//! Loopy belief propagation runs on the bipartite graph of individuals and
//! tests, in the log-ratio parametrization
//!
//! ```text
//! α_ij = −ln(1 + exp(−μ_i − β̄_i + β_ij))
//! β_ij = ln(1 + exp(γ⁰_j + ᾱ_j − α_ij))   if y_j = 0
//! β_ij = ln(1 − exp(γ¹_j + ᾱ_j − α_ij))   if y_j = 1
//! P(x_i = 1) = 1 / (1 + exp(μ_i + β̄_i))
//! ```
//!
//! with `μ_i = ln((1−q_i)/q_i)`, `γ⁰ = ln(ρ/(1−s))`, `γ¹ = ln(ρ/s)`. Messages
//! are updated synchronously starting from `β = 0`, without damping.
//!
//! The hybrid decoder trusts LBP only when its iterates settle; otherwise it
//! falls back to the marginal of an SMC posterior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log1m_exp, softplus};
use crate::model::{GroupBatch, NoiseModel, Prior, TestOutcomes};
use crate::posterior::{prior_particles, smc_update, PosteriorModel, SmcConfig};

/// Stand-in for `s = 1` so that `γ⁰` stays finite.
const NOISELESS_SENSITIVITY: f64 = 1.0 - 1e-9;
/// Largest argument passed to `ln(1 − e^z)`.
const SATURATED_ARG: f64 = -1e-12;
/// Final-iteration delta above which LBP is declared oscillating.
pub const OSCILLATION_DELTA: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct FactorGraph {
    n: usize,
    rates: Vec<f64>,
    mu: Vec<f64>,
    /// `γ⁰_j` or `γ¹_j`, whichever the outcome selects.
    gamma: Vec<f64>,
    positive: Vec<bool>,
    /// Edges of test `j` are `test_start[j]..test_start[j + 1]`.
    test_start: Vec<usize>,
    edge_var: Vec<usize>,
    var_edges: Vec<Vec<usize>>,
}

impl FactorGraph {
    pub fn new(batch: &GroupBatch, outcomes: &TestOutcomes, noise: &NoiseModel, prior: &Prior) -> Result<Self> {
        if batch.len() != outcomes.len() {
            return Err(Error::invalid("batch and outcomes differ in length"));
        }
        let n = prior.len();
        let mu = prior.rates().iter().map(|&q| ((1.0 - q) / q).ln()).collect();
        let mut gamma = Vec::with_capacity(batch.len());
        let mut test_start = vec![0];
        let mut edge_var = Vec::new();
        let mut var_edges = vec![Vec::new(); n];
        for (g, &y) in batch.groups().iter().zip(outcomes.values()) {
            if g.population() != n {
                return Err(Error::invalid("group population does not match the prior"));
            }
            noise.check_size(g.size())?;
            let sigma = noise.specificity(g.size());
            let mut s = noise.sensitivity(g.size());
            if s >= 1.0 {
                s = NOISELESS_SENSITIVITY;
            }
            let rho = sigma + s - 1.0;
            gamma.push(if y { (rho / s).ln() } else { (rho / (1.0 - s)).ln() });
            for &i in g.members() {
                var_edges[i].push(edge_var.len());
                edge_var.push(i);
            }
            test_start.push(edge_var.len());
        }
        Ok(FactorGraph {
            n,
            rates: prior.rates().to_vec(),
            mu,
            gamma,
            positive: outcomes.values().to_vec(),
            test_start,
            edge_var,
            var_edges,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_tests(&self) -> usize {
        self.gamma.len()
    }

    /// Untested individuals keep their prior rate bit-for-bit.
    fn marginal_from(&self, beta_bar: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                if self.var_edges[i].is_empty() {
                    self.rates[i]
                } else {
                    1.0 / (1.0 + (self.mu[i] + beta_bar[i]).exp())
                }
            })
            .collect()
    }
}

/// Log-domain messages on every edge plus their running sums.
#[derive(Clone, Debug)]
pub struct MessageState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
}

impl MessageState {
    fn new(graph: &FactorGraph) -> Self {
        let e = graph.edge_var.len();
        MessageState {
            alpha: vec![0.0; e],
            beta: vec![0.0; e],
            alpha_bar: vec![0.0; graph.num_tests()],
            beta_bar: vec![0.0; graph.n],
        }
    }

    fn step(&mut self, graph: &FactorGraph) {
        for (e, &i) in graph.edge_var.iter().enumerate() {
            self.alpha[e] = -softplus(-graph.mu[i] - self.beta_bar[i] + self.beta[e]);
        }
        for j in 0..graph.num_tests() {
            let edges = graph.test_start[j]..graph.test_start[j + 1];
            let abar: f64 = self.alpha[edges.clone()].iter().sum();
            self.alpha_bar[j] = abar;
            for e in edges {
                let z = graph.gamma[j] + abar - self.alpha[e];
                self.beta[e] = if graph.positive[j] {
                    log1m_exp(if z >= 0.0 { SATURATED_ARG } else { z })
                } else {
                    softplus(z)
                };
            }
        }
        for (i, edges) in graph.var_edges.iter().enumerate() {
            self.beta_bar[i] = edges.iter().map(|&e| self.beta[e]).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbpReport {
    pub marginal: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest per-individual change in the marginal at the last iteration.
    pub max_delta: f64,
}

pub fn lbp_decode(
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    noise: &NoiseModel,
    prior: &Prior,
    max_iter: usize,
    tol: f64,
) -> Result<LbpReport> {
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::invalid("lbp needs max_iter ≥ 1 and tol > 0"));
    }
    let graph = FactorGraph::new(batch, outcomes, noise, prior)?;
    Ok(run_lbp(&graph, max_iter, tol))
}

pub fn run_lbp(graph: &FactorGraph, max_iter: usize, tol: f64) -> LbpReport {
    let mut state = MessageState::new(graph);
    let mut marginal = graph.marginal_from(&state.beta_bar);
    let mut max_delta = 0.0;
    for it in 1..=max_iter {
        state.step(graph);
        let next = graph.marginal_from(&state.beta_bar);
        max_delta = next
            .iter()
            .zip(&marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        marginal = next;
        if max_delta <= tol {
            return LbpReport {
                marginal,
                converged: true,
                iterations: it,
                max_delta,
            };
        }
    }
    LbpReport {
        marginal,
        converged: false,
        iterations: max_iter,
        max_delta,
    }
}

pub fn detect_oscillation(report: &LbpReport) -> bool {
    report.max_delta > OSCILLATION_DELTA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig { max_iter: 1000, tol: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeSource {
    Lbp,
    Smc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridOutput {
    pub marginal: Vec<f64>,
    pub source: DecodeSource,
    pub lbp: LbpReport,
}

/// LBP if it settles, otherwise whatever `fallback` returns.
pub fn hybrid_decode_with<F>(
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    noise: &NoiseModel,
    prior: &Prior,
    cfg: &HybridConfig,
    fallback: F,
) -> Result<HybridOutput>
where
    F: FnOnce() -> Result<Vec<f64>>,
{
    let lbp = lbp_decode(batch, outcomes, noise, prior, cfg.max_iter, cfg.tol)?;
    if lbp.converged {
        return Ok(HybridOutput {
            marginal: lbp.marginal.clone(),
            source: DecodeSource::Lbp,
            lbp,
        });
    }
    Ok(HybridOutput {
        marginal: fallback()?,
        source: DecodeSource::Smc,
        lbp,
    })
}

/// Hybrid decoding whose fallback samples the full posterior from the prior
/// with every test treated as a single batch.
pub fn hybrid_decode<R: Rng + ?Sized>(
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    noise: &NoiseModel,
    prior: &Prior,
    smc: &SmcConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cfg = HybridConfig::default();
    hybrid_decode_with(batch, outcomes, noise, prior, &cfg, || smc_marginal_from_prior(batch, outcomes, noise, prior, smc, rng))
        .map(|o| o.marginal)
}

pub fn smc_marginal_from_prior<R: Rng + ?Sized>(
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    noise: &NoiseModel,
    prior: &Prior,
    smc: &SmcConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let start = prior_particles(prior, smc.num_particles, rng)?;
    let (post, _) = smc_update(&start, PosteriorModel::new(prior, noise, &[]), batch, outcomes, smc, rng)?;
    Ok(post.marginal())
}

/// Concatenates per-stage batches into one list of tests.
pub fn flatten_history(history: &[(GroupBatch, TestOutcomes)]) -> (GroupBatch, TestOutcomes) {
    let mut groups = Vec::new();
    let mut values = Vec::new();
    for (b, y) in history {
        groups.extend(b.groups().iter().cloned());
        values.extend_from_slice(y.values());
    }
    (GroupBatch::new(groups), TestOutcomes::new(values))
}
