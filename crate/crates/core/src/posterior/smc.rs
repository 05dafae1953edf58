//! Tempered SMC update of a particle cloud with one new batch of test results.
//!
//! The bridge `π^γ ∝ π_{t−1} · L^γ` is walked with adaptively chosen `γ`:
//! each step picks the largest increment keeping the reweighted ESS at the
//! target, then resamples systematically and moves every particle with an
//! MCMC kernel invariant for `π^γ`. `π_{t−1}` is evaluated pointwise as the
//! prior times the likelihood of every earlier batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::{batch_log_likelihood, GroupBatch, NoiseModel, Prior, StateVector, TestOutcomes};

use super::kernels::{FlipTarget, LogPmf, McmcKernel};
use super::{ess, ParticlePosterior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub num_particles: usize,
    pub target_ess: f64,
    pub mcmc_sweeps: usize,
    pub kernel: McmcKernel,
    pub bisection_tol: f64,
    pub bisection_max_iter: usize,
    /// Safety cap on bridge steps per update; the last step jumps to `γ = 1`.
    pub max_bridge_steps: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            num_particles: 10_000,
            target_ess: 0.9,
            mcmc_sweeps: 4,
            kernel: McmcKernel::ModifiedGibbs,
            bisection_tol: 1e-4,
            bisection_max_iter: 60,
            max_bridge_steps: 1000,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(Error::config("smc.num_particles must be at least 1"));
        }
        // A single particle always has ESS 1, so only the upper bound applies.
        let lo = if self.num_particles == 1 { 0.0 } else { 1.0 / self.num_particles as f64 };
        if !(self.target_ess > lo && self.target_ess < 1.0) {
            return Err(Error::config(format!(
                "smc.target_ess must lie in (1/N, 1), got {}",
                self.target_ess
            )));
        }
        if !(self.bisection_tol > 0.0) || self.bisection_max_iter == 0 {
            return Err(Error::config("smc bisection settings must be positive"));
        }
        if self.max_bridge_steps == 0 {
            return Err(Error::config("smc.max_bridge_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeStep {
    pub gamma: f64,
    /// ESS of the weights right after reweighting to `gamma`.
    pub ess: f64,
    /// Fraction of accepted single-site flips during the MCMC move that
    /// followed this step; `None` for the final step, which is not moved.
    pub acceptance_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemperingTrace {
    pub steps: Vec<BridgeStep>,
    /// Set when the incoming cloud was resampled before bridging because its
    /// ESS was already below target.
    pub presampled: bool,
}

impl TemperingTrace {
    pub fn gammas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.gamma).collect()
    }
}

/// Everything needed to evaluate the unnormalized posterior before the new
/// batch: prior times the likelihood of each past batch.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorModel<'a> {
    pub prior: &'a Prior,
    pub noise: &'a NoiseModel,
    pub history: &'a [(GroupBatch, TestOutcomes)],
}

impl<'a> PosteriorModel<'a> {
    pub fn new(prior: &'a Prior, noise: &'a NoiseModel, history: &'a [(GroupBatch, TestOutcomes)]) -> Self {
        PosteriorModel { prior, noise, history }
    }
}

impl LogPmf for PosteriorModel<'_> {
    fn num_vars(&self) -> usize {
        self.prior.len()
    }

    fn log_pmf(&self, x: &StateVector) -> f64 {
        let mut lp = self.prior.log_pmf(x);
        for (b, y) in self.history {
            if lp == f64::NEG_INFINITY {
                break;
            }
            lp += batch_log_likelihood(b, y, x, self.noise).unwrap_or(f64::NEG_INFINITY);
        }
        lp
    }
}

/// `π_{t−1}(x) · L(x)^γ` with incremental single-flip evaluation.
///
/// Each test `t` contributes `w_t · ℓ_t([g_t, x])` where `w_t` is 1 for past
/// tests and `γ` for the new batch. Only the status-dependent part
/// `d_t = w_t (ℓ_t(1) − ℓ_t(0))` matters for flip ratios; the cursor keeps,
/// per test, how many members are currently infected.
pub struct TemperedTarget<'a> {
    model: PosteriorModel<'a>,
    batch: &'a GroupBatch,
    outcomes: &'a TestOutcomes,
    gamma: f64,
    logit: Vec<f64>,
    members: Vec<&'a [usize]>,
    delta: Vec<f64>,
    incidence: Vec<Vec<u32>>,
}

impl<'a> TemperedTarget<'a> {
    pub fn new(model: PosteriorModel<'a>, batch: &'a GroupBatch, outcomes: &'a TestOutcomes, gamma: f64) -> Self {
        let n = model.prior.len();
        let logit = model.prior.log_odds();
        let mut members = Vec::new();
        let mut delta = Vec::new();
        let mut add = |g: &'a crate::model::Group, y: bool, w: f64| {
            let size = g.size();
            let d = model.noise.log_likelihood(size, true, y) - model.noise.log_likelihood(size, false, y);
            members.push(g.members());
            delta.push(w * d);
        };
        for (b, y) in model.history {
            for (g, &v) in b.groups().iter().zip(y.values()) {
                add(g, v, 1.0);
            }
        }
        if gamma > 0.0 {
            for (g, &v) in batch.groups().iter().zip(outcomes.values()) {
                add(g, v, gamma);
            }
        }
        let mut incidence = vec![Vec::new(); n];
        for (t, m) in members.iter().enumerate() {
            for &i in m.iter() {
                incidence[i].push(t as u32);
            }
        }
        TemperedTarget {
            model,
            batch,
            outcomes,
            gamma,
            logit,
            members,
            delta,
            incidence,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl LogPmf for TemperedTarget<'_> {
    fn num_vars(&self) -> usize {
        self.model.prior.len()
    }

    fn log_pmf(&self, x: &StateVector) -> f64 {
        let base = self.model.log_pmf(x);
        if self.gamma == 0.0 || base == f64::NEG_INFINITY {
            return base;
        }
        let ll = batch_log_likelihood(self.batch, self.outcomes, x, self.model.noise).unwrap_or(f64::NEG_INFINITY);
        base + self.gamma * ll
    }
}

impl FlipTarget for TemperedTarget<'_> {
    type Cursor = Vec<u16>;

    fn num_vars(&self) -> usize {
        self.model.prior.len()
    }

    fn cursor(&self, x: &StateVector) -> Vec<u16> {
        self.members
            .iter()
            .map(|m| m.iter().filter(|&&i| x.get(i)).count() as u16)
            .collect()
    }

    fn flip_log_ratio(&self, x: &StateVector, cursor: &Vec<u16>, j: usize) -> f64 {
        let on = x.get(j);
        let mut r = if on { -self.logit[j] } else { self.logit[j] };
        for &t in &self.incidence[j] {
            let c = cursor[t as usize];
            if !on && c == 0 {
                r += self.delta[t as usize];
            } else if on && c == 1 {
                r -= self.delta[t as usize];
            }
        }
        r
    }

    fn apply_flip(&self, x: &mut StateVector, cursor: &mut Vec<u16>, j: usize) {
        let on = x.get(j);
        x.flip(j);
        for &t in &self.incidence[j] {
            let c = &mut cursor[t as usize];
            if on {
                *c -= 1;
            } else {
                *c += 1;
            }
        }
    }
}

fn reweight(weights: &[f64], log_lik: &[f64], delta: f64, out: &mut [f64]) -> f64 {
    let logw: Vec<f64> = weights
        .iter()
        .zip(log_lik)
        .map(|(&w, &ll)| if w > 0.0 { w.ln() + delta * ll } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(&logw);
    for (o, lw) in out.iter_mut().zip(&logw) {
        *o = (lw - lse).exp();
    }
    lse
}

fn reweighted_ess(weights: &[f64], log_lik: &[f64], delta: f64, scratch: &mut [f64]) -> f64 {
    let lse = reweight(weights, log_lik, delta, scratch);
    if lse.is_finite() {
        ess(scratch)
    } else {
        0.0
    }
}

fn check_evidence(weights: &[f64], log_lik: &[f64]) -> Result<()> {
    let alive = weights.iter().zip(log_lik).any(|(&w, &ll)| w > 0.0 && ll > f64::NEG_INFINITY);
    if alive {
        Ok(())
    } else {
        Err(Error::degenerate("every particle has zero likelihood under the new outcomes"))
    }
}

/// Next tempering exponent with the default bisection settings.
pub fn next_temperature(gamma: f64, weights: &[f64], log_lik: &[f64], target_ess: f64) -> Result<f64> {
    let cfg = SmcConfig::default();
    next_temperature_with(gamma, weights, log_lik, target_ess, cfg.bisection_tol, cfg.bisection_max_iter)
}

/// Bisection for `γ' ∈ (γ, 1]` such that reweighting by `L^{γ'−γ}` gives
/// ESS = `target_ess` (within `tol`), or 1 if the full step keeps ESS at or
/// above target.
pub fn next_temperature_with(
    gamma: f64,
    weights: &[f64],
    log_lik: &[f64],
    target_ess: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("current temperature {gamma} outside [0, 1)")));
    }
    if weights.len() != log_lik.len() {
        return Err(Error::invalid("weights and log-likelihoods differ in length"));
    }
    check_evidence(weights, log_lik)?;
    let mut scratch = vec![0.0; weights.len()];
    if reweighted_ess(weights, log_lik, 1.0 - gamma, &mut scratch) >= target_ess {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (gamma, 1.0);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..max_iter {
        mid = 0.5 * (lo + hi);
        let e = reweighted_ess(weights, log_lik, mid - gamma, &mut scratch);
        if (e - target_ess).abs() <= tol {
            break;
        }
        if e > target_ess {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if mid <= gamma {
        mid = f64::min(1.0, gamma + f64::EPSILON);
    }
    Ok(mid)
}

/// Replication counts of the systematic scheme for a given uniform draw `u ∈ [0,1)`.
pub fn systematic_counts(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut counts = vec![0usize; n];
    if n == 0 {
        return counts;
    }
    let mut cum = 0.0;
    let mut i = 0usize;
    for (j, &w) in weights.iter().enumerate() {
        cum += w / total;
        let bound = if j + 1 == n { f64::INFINITY } else { cum };
        while i < n && (u + i as f64) / (n as f64) < bound {
            counts[j] += 1;
            i += 1;
        }
    }
    counts
}

/// Systematic resampling with a single uniform draw from `rng`.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let u: f64 = rng.random();
    systematic_counts(weights, u)
}

fn resample_particles<R: Rng + ?Sized>(particles: &[StateVector], weights: &[f64], rng: &mut R) -> Vec<StateVector> {
    let counts = systematic_resample(weights, rng);
    let mut out = Vec::with_capacity(particles.len());
    for (x, &c) in particles.iter().zip(&counts) {
        for _ in 0..c {
            out.push(x.clone());
        }
    }
    out
}

/// Moves every particle `sweeps` times; returns the acceptance rate.
fn mcmc_move<R: Rng + ?Sized>(
    particles: &mut [StateVector],
    target: &TemperedTarget<'_>,
    kernel: McmcKernel,
    sweeps: usize,
    rng: &mut R,
) -> f64 {
    let mut accepted = 0usize;
    for x in particles.iter_mut() {
        let mut cursor = target.cursor(x);
        for _ in 0..sweeps {
            accepted += kernel.sweep(x, target, &mut cursor, rng);
        }
    }
    let proposals = particles.len() * sweeps * target.model.prior.len();
    if proposals == 0 {
        0.0
    } else {
        accepted as f64 / proposals as f64
    }
}

fn batch_log_liks(particles: &[StateVector], batch: &GroupBatch, outcomes: &TestOutcomes, noise: &NoiseModel) -> Result<Vec<f64>> {
    particles.iter().map(|x| batch_log_likelihood(batch, outcomes, x, noise)).collect()
}

/// Moves `p ≈ π_{t−1}` to `≈ π_t ∝ π_{t−1} · P(y | x)`.
pub fn smc_update<R: Rng + ?Sized>(
    p: &ParticlePosterior,
    model: PosteriorModel<'_>,
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    cfg: &SmcConfig,
    rng: &mut R,
) -> Result<(ParticlePosterior, TemperingTrace)> {
    if batch.len() != outcomes.len() {
        return Err(Error::invalid("batch and outcomes differ in length"));
    }
    if p.num_vars() != model.prior.len() {
        return Err(Error::invalid("particle length does not match the prior"));
    }
    let mut trace = TemperingTrace::default();
    if batch.is_empty() {
        return Ok((p.clone(), trace));
    }
    let with_batch = |e: Error| match e {
        Error::DegenerateEvidence { context } => Error::degenerate(format!(
            "{context}; batch {:?} with outcomes {:?}",
            batch.member_lists(),
            outcomes.values()
        )),
        other => other,
    };

    let mut particles = p.particles().to_vec();
    let mut weights = p.weights().to_vec();
    let mut log_lik = batch_log_liks(&particles, batch, outcomes, model.noise)?;
    check_evidence(&weights, &log_lik).map_err(with_batch)?;

    if ess(&weights) < cfg.target_ess {
        particles = resample_particles(&particles, &weights, rng);
        weights = vec![1.0 / particles.len() as f64; particles.len()];
        log_lik = batch_log_liks(&particles, batch, outcomes, model.noise)?;
        trace.presampled = true;
    }

    let mut gamma = 0.0;
    loop {
        let forced = trace.steps.len() + 1 >= cfg.max_bridge_steps;
        let next = if forced {
            1.0
        } else {
            next_temperature_with(gamma, &weights, &log_lik, cfg.target_ess, cfg.bisection_tol, cfg.bisection_max_iter)
                .map_err(with_batch)?
        };
        let mut fresh = vec![0.0; weights.len()];
        let lse = reweight(&weights, &log_lik, next - gamma, &mut fresh);
        if !lse.is_finite() {
            return Err(with_batch(Error::degenerate("reweighting annihilated every particle")));
        }
        weights = fresh;
        gamma = next;
        trace.steps.push(BridgeStep {
            gamma,
            ess: ess(&weights),
            acceptance_rate: None,
        });
        if gamma >= 1.0 {
            break;
        }
        particles = resample_particles(&particles, &weights, rng);
        weights = vec![1.0 / particles.len() as f64; particles.len()];
        let target = TemperedTarget::new(model, batch, outcomes, gamma);
        let rate = mcmc_move(&mut particles, &target, cfg.kernel, cfg.mcmc_sweeps, rng);
        if let Some(last) = trace.steps.last_mut() {
            last.acceptance_rate = Some(rate);
        }
        log_lik = batch_log_liks(&particles, batch, outcomes, model.noise)?;
    }
    Ok((ParticlePosterior::from_parts_unchecked(particles, weights), trace))
}
