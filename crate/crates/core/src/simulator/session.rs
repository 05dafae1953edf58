//! One adaptive testing session: propose a batch, observe its outcomes,
//! update beliefs. The simulator and live campaigns both drive this type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::SessionParams;
use crate::decoder::{flatten_history, hybrid_decode_with, smc_marginal_from_prior, DecodeSource};
use crate::error::{Error, Result};
use crate::model::{GroupBatch, TestOutcomes};
use crate::policies::{Policy, SelectionContext};
use crate::posterior::{prior_particles, smc_update, ParticlePosterior, PosteriorModel};

/// Seed for stream `label` of run `run` under `master`.
pub fn stream_seed(master: u64, run: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"groupwise-stream-v1");
    h.update(master.to_le_bytes());
    h.update(run.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream(master: u64, run: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(master, run, label))
}

/// Independent random streams of one run. Truth and lab noise never share a
/// stream with anything a policy does.
pub struct RunStreams {
    pub truth: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub session: SessionStreams,
}

impl RunStreams {
    pub fn new(master: u64, run: u64) -> Self {
        RunStreams {
            truth: stream(master, run, "truth"),
            noise: stream(master, run, "noise"),
            session: SessionStreams::new(master, run),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionStreams {
    pub smc: ChaCha8Rng,
    pub selector: ChaCha8Rng,
    pub decoder: ChaCha8Rng,
}

impl SessionStreams {
    pub fn new(master: u64, run: u64) -> Self {
        SessionStreams {
            smc: stream(master, run, "smc"),
            selector: stream(master, run, "selector"),
            decoder: stream(master, run, "decoder"),
        }
    }
}

/// What one observed batch changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleUpdate {
    pub cycle: usize,
    pub source: DecodeSource,
    pub lbp_iterations: usize,
    /// Tempering steps of the particle update, when a posterior is kept.
    pub bridge_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Session {
    params: SessionParams,
    policy: Policy,
    history: Vec<(GroupBatch, TestOutcomes)>,
    posterior: Option<ParticlePosterior>,
    marginal: Vec<f64>,
    cycle: usize,
    streams: SessionStreams,
}

fn with_cycle(e: Error, cycle: usize) -> Error {
    match e {
        Error::DegenerateEvidence { context } => Error::DegenerateEvidence {
            context: format!("cycle {cycle}: {context}"),
        },
        other => other,
    }
}

impl Session {
    /// A particle posterior is kept only for policies that design from it;
    /// it starts as prior draws from the SMC stream.
    pub fn new(params: SessionParams, mut streams: SessionStreams) -> Result<Self> {
        let policy = Policy::new(&params.policy, params.n, params.n_max, params.assay.as_deref())?;
        if params.noise.max_group_size() < params.n_max {
            return Err(Error::config("noise tables are shorter than n_max"));
        }
        let posterior = if policy.needs_posterior() {
            Some(prior_particles(&params.prior, params.smc.num_particles, &mut streams.smc)?)
        } else {
            None
        };
        let marginal = params.prior.rates().to_vec();
        Ok(Session {
            params,
            policy,
            history: Vec::new(),
            posterior,
            marginal,
            cycle: 0,
            streams,
        })
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    /// Number of observed batches.
    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn history(&self) -> &[(GroupBatch, TestOutcomes)] {
        &self.history
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn posterior(&self) -> Option<&ParticlePosterior> {
        self.posterior.as_ref()
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn tests_used(&self) -> usize {
        self.history.iter().map(|(b, _)| b.len()).sum()
    }

    /// Next batch of at most `k` groups; empty once the policy has run dry.
    pub fn propose(&mut self) -> Result<GroupBatch> {
        let ctx = SelectionContext {
            cycle: self.cycle + 1,
            history: &self.history,
            prior: &self.params.prior,
            noise: &self.params.noise,
            marginal: &self.marginal,
            posterior: self.posterior.as_ref(),
        };
        self.policy.step(self.params.k, &ctx, &mut self.streams.selector)
    }

    /// Records outcomes of `batch`, updates the particle posterior (when kept)
    /// and re-decodes the marginal from the full history.
    pub fn observe(&mut self, batch: GroupBatch, outcomes: TestOutcomes) -> Result<CycleUpdate> {
        let cycle = self.cycle + 1;
        if batch.len() != outcomes.len() {
            return Err(Error::invalid(format!(
                "batch has {} groups but {} outcomes were given",
                batch.len(),
                outcomes.len()
            )));
        }
        for g in batch.groups() {
            if g.population() != self.params.n {
                return Err(Error::invalid("group population does not match the session"));
            }
            if g.size() > self.params.n_max {
                return Err(Error::invalid(format!("group of size {} exceeds n_max", g.size())));
            }
        }
        let mut bridge_steps = None;
        if let Some(p) = &self.posterior {
            let model = PosteriorModel::new(&self.params.prior, &self.params.noise, &self.history);
            let (next, trace) = smc_update(p, model, &batch, &outcomes, &self.params.smc, &mut self.streams.smc)
                .map_err(|e| with_cycle(e, cycle))?;
            self.posterior = Some(next);
            bridge_steps = Some(trace.steps.len());
        }
        let tested = !batch.is_empty();
        self.history.push((batch, outcomes));
        self.cycle = cycle;
        if !tested {
            return Ok(CycleUpdate {
                cycle,
                source: DecodeSource::Lbp,
                lbp_iterations: 0,
                bridge_steps,
            });
        }
        let (all, ys) = flatten_history(&self.history);
        let params = &self.params;
        let posterior = self.posterior.as_ref();
        let rng = &mut self.streams.decoder;
        let out = hybrid_decode_with(&all, &ys, &params.noise, &params.prior, &params.decoder, || match posterior {
            Some(p) => Ok(p.marginal()),
            None => smc_marginal_from_prior(&all, &ys, &params.noise, &params.prior, &params.smc, rng),
        })
        .map_err(|e| with_cycle(e, cycle))?;
        self.marginal = out.marginal;
        Ok(CycleUpdate {
            cycle,
            source: out.source,
            lbp_iterations: out.lbp.iterations,
            bridge_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicySpec;
    use crate::simulator::config::{NoiseSpec, RateSpec, SessionConfig};

    fn config(policy: &str, n: usize) -> SessionConfig {
        SessionConfig {
            n,
            q: RateSpec::Uniform(0.1),
            noise: NoiseSpec::constant(0.97, 0.85),
            k: 3,
            n_max: 4,
            policy: PolicySpec::preset(policy).unwrap(),
            assay: None,
            smc: crate::posterior::SmcConfig {
                num_particles: 500,
                ..Default::default()
            },
            decoder: Default::default(),
            seed: 9,
        }
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(stream_seed(1, 2, "truth"), stream_seed(1, 2, "truth"));
        assert_ne!(stream_seed(1, 2, "truth"), stream_seed(1, 2, "noise"));
        assert_ne!(stream_seed(1, 2, "truth"), stream_seed(1, 3, "truth"));
        assert_ne!(stream_seed(1, 2, "truth"), stream_seed(2, 2, "truth"));
    }

    #[test]
    fn posterior_kept_only_for_design_policies() {
        let s = Session::new(config("random", 6).params().unwrap(), SessionStreams::new(0, 0)).unwrap();
        assert!(s.posterior().is_none());
        let s = Session::new(config("g_mimax", 6).params().unwrap(), SessionStreams::new(0, 0)).unwrap();
        assert_eq!(s.posterior().unwrap().len(), 500);
        assert_eq!(s.marginal(), &[0.1; 6]);
    }

    #[test]
    fn negative_outcomes_lower_tested_marginals() {
        let mut s = Session::new(config("g_mimax", 6).params().unwrap(), SessionStreams::new(0, 0)).unwrap();
        let batch = s.propose().unwrap();
        assert!(!batch.is_empty());
        let ys = TestOutcomes::new(vec![false; batch.len()]);
        let tested: Vec<usize> = batch.groups().iter().flat_map(|g| g.members().to_vec()).collect();
        s.observe(batch, ys).unwrap();
        for i in tested {
            assert!(s.marginal()[i] < 0.1);
        }
        assert_eq!(s.cycle(), 1);
    }

    #[test]
    fn rejects_mismatched_outcomes() {
        let mut s = Session::new(config("random", 6).params().unwrap(), SessionStreams::new(0, 0)).unwrap();
        let batch = s.propose().unwrap();
        assert!(s.observe(batch, TestOutcomes::new(vec![true])).is_err());
        assert_eq!(s.cycle(), 0);
    }
}
