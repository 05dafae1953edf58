//! Posterior over infection states.
//!
//! [`ExactPosterior`] enumerates all `2^n` states and is only usable for small
//! populations; it serves as the reference for the particle approximation.
//! [`ParticlePosterior`] is the weighted cloud maintained by the SMC sampler in
//! [`smc`].

mod exact;
pub mod kernels;
pub mod smc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::xlogx;
use crate::model::{Prior, StateVector};

pub use exact::{ExactPosterior, MAX_EXACT_POPULATION};
pub use kernels::{gibbs_sweep, modified_gibbs_sweep, FlipTarget, LogPmf, McmcKernel, PmfTarget};
pub use smc::{
    next_temperature, smc_update, systematic_counts, systematic_resample, BridgeStep,
    PosteriorModel, SmcConfig, TemperingTrace,
};

/// Weighted particle approximation `Σ ω_i δ_{x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePosterior {
    particles: Vec<StateVector>,
    weights: Vec<f64>,
}

impl ParticlePosterior {
    /// Weights must be non-negative with a positive sum; they are normalized here.
    pub fn new(particles: Vec<StateVector>, weights: Vec<f64>) -> Result<Self> {
        let total = Self::check(&particles, &weights)?;
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(ParticlePosterior { particles, weights })
    }

    fn check(particles: &[StateVector], weights: &[f64]) -> Result<f64> {
        if particles.is_empty() {
            return Err(Error::invalid("particle cloud must hold at least one particle"));
        }
        if particles.len() != weights.len() {
            return Err(Error::invalid("particle and weight counts differ"));
        }
        let n = particles[0].len();
        if particles.iter().any(|x| x.len() != n) {
            return Err(Error::invalid("particles have inconsistent lengths"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        Ok(total)
    }

    /// Equal weights `1/N`.
    pub fn uniform(particles: Vec<StateVector>) -> Result<Self> {
        let w = 1.0 / particles.len().max(1) as f64;
        let weights = vec![w; particles.len()];
        Self::check(&particles, &weights)?;
        Ok(ParticlePosterior { particles, weights })
    }

    pub(crate) fn from_parts_unchecked(particles: Vec<StateVector>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(particles.len(), weights.len());
        ParticlePosterior { particles, weights }
    }

    /// Population size `n`.
    pub fn num_vars(&self) -> usize {
        self.particles[0].len()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[StateVector] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mean particle: `Σ_j ω_j x_j`.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_vars()];
        for (x, &w) in self.particles.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for i in x.ones() {
                m[i] += w;
            }
        }
        m
    }

    /// `−Σ ω ln ω` over the weights as stored (duplicate states are not merged).
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().map(|&w| xlogx(w)).sum::<f64>()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }

    /// Merges duplicate states, summing their weights. Keeps first-seen order.
    pub fn compress(&self) -> ParticlePosterior {
        let mut index = std::collections::HashMap::with_capacity(self.particles.len());
        let mut particles = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (x, &w) in self.particles.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            match index.get(x) {
                Some(&slot) => weights[slot] += w,
                None => {
                    index.insert(x.clone(), particles.len());
                    particles.push(x.clone());
                    weights.push(w);
                }
            }
        }
        ParticlePosterior { particles, weights }
    }

    pub fn to_snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot {
            version: PosteriorSnapshot::VERSION,
            n: self.num_vars(),
            num_particles: self.len(),
            particles: self
                .particles
                .iter()
                .map(|x| x.words().iter().map(|w| format!("{w:016x}")).collect())
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_snapshot(s: &PosteriorSnapshot) -> Result<Self> {
        if s.version != PosteriorSnapshot::VERSION {
            return Err(Error::invalid(format!("unsupported snapshot version {}", s.version)));
        }
        if s.particles.len() != s.num_particles || s.weights.len() != s.num_particles {
            return Err(Error::invalid("snapshot particle count mismatch"));
        }
        let words_per = s.n.div_ceil(64);
        let particles = s
            .particles
            .iter()
            .map(|hex| {
                if hex.len() != words_per * 16 {
                    return Err(Error::invalid("snapshot particle has wrong packed length"));
                }
                let words = (0..words_per)
                    .map(|k| {
                        u64::from_str_radix(&hex[k * 16..(k + 1) * 16], 16)
                            .map_err(|e| Error::invalid(format!("bad packed bits: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                StateVector::from_words(s.n, words)
            })
            .collect::<Result<Vec<_>>>()?;
        let total = Self::check(&particles, &s.weights)?;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("snapshot weights are not normalized"));
        }
        Ok(ParticlePosterior {
            particles,
            weights: s.weights.clone(),
        })
    }
}

/// Versioned serialization of a particle cloud. Each particle is its packed
/// 64-bit words (little-endian bit order) written as 16 hex digits per word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub version: u32,
    pub n: usize,
    pub num_particles: usize,
    pub particles: Vec<String>,
    pub weights: Vec<f64>,
}

impl PosteriorSnapshot {
    pub const VERSION: u32 = 1;
}

/// `N` i.i.d. draws from the prior with uniform weights.
pub fn prior_particles<R: Rng + ?Sized>(prior: &Prior, num_particles: usize, rng: &mut R) -> Result<ParticlePosterior> {
    if num_particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let particles = (0..num_particles).map(|_| prior.sample(rng)).collect();
    ParticlePosterior::uniform(particles)
}

/// Normalized effective sample size `1 / (N Σ ω²)`.
pub fn ess(weights: &[f64]) -> f64 {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / (weights.len() as f64 * sq)
}

/// Total-variation style distance between marginal vectors: mean absolute difference.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}
