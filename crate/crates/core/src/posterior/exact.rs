use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::{batch_log_likelihood, GroupBatch, NoiseModel, Prior, StateVector, TestOutcomes};

use super::ParticlePosterior;

pub const MAX_EXACT_POPULATION: usize = 24;

/// Posterior tabulated over all `2^n` states; state `i` has bit `j` equal to `(i >> j) & 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactPosterior {
    n: usize,
    log_mass: Vec<f64>,
}

impl ExactPosterior {
    pub fn from_prior(prior: &Prior) -> Result<Self> {
        let n = prior.len();
        check_size(n)?;
        let log_mass = (0..1u64 << n)
            .map(|i| prior.log_pmf(&StateVector::from_index(n, i)))
            .collect();
        Self::from_log_mass(n, log_mass)
    }

    /// Normalizes an arbitrary table of unnormalized log-probabilities.
    pub fn from_log_mass(n: usize, mut log_mass: Vec<f64>) -> Result<Self> {
        check_size(n)?;
        if log_mass.len() != 1usize << n {
            return Err(Error::invalid("log-mass table must have 2^n entries"));
        }
        let z = log_sum_exp(&log_mass);
        if !z.is_finite() {
            return Err(Error::degenerate("every state has zero mass"));
        }
        log_mass.iter_mut().for_each(|v| *v -= z);
        Ok(ExactPosterior { n, log_mass })
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn log_mass(&self) -> &[f64] {
        &self.log_mass
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_mass.iter().map(|v| v.exp()).collect()
    }

    /// Bayes update with one batch of outcomes.
    pub fn update(&self, batch: &GroupBatch, outcomes: &TestOutcomes, noise: &NoiseModel) -> Result<Self> {
        if batch.len() != outcomes.len() {
            return Err(Error::invalid("batch and outcomes differ in length"));
        }
        if batch.is_empty() {
            return Ok(self.clone());
        }
        let mut next = Vec::with_capacity(self.log_mass.len());
        for (i, &lm) in self.log_mass.iter().enumerate() {
            let x = StateVector::from_index(self.n, i as u64);
            let ll = if lm == f64::NEG_INFINITY {
                0.0
            } else {
                batch_log_likelihood(batch, outcomes, &x, noise)?
            };
            next.push(lm + ll);
        }
        Self::from_log_mass(self.n, next).map_err(|e| match e {
            Error::DegenerateEvidence { .. } => Error::degenerate(format!(
                "no state is compatible with outcomes {:?} on groups {:?}",
                outcomes.values(),
                batch.member_lists()
            )),
            other => other,
        })
    }

    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for (i, &lm) in self.log_mass.iter().enumerate() {
            let p = lm.exp();
            if p == 0.0 {
                continue;
            }
            for (j, mj) in m.iter_mut().enumerate() {
                if (i >> j) & 1 == 1 {
                    *mj += p;
                }
            }
        }
        m
    }

    /// Every state with positive mass as a particle weighted by its probability.
    pub fn to_particles(&self) -> ParticlePosterior {
        let (particles, weights): (Vec<_>, Vec<_>) = self
            .log_mass
            .iter()
            .enumerate()
            .filter(|(_, lm)| lm.is_finite())
            .map(|(i, lm)| (StateVector::from_index(self.n, i as u64), lm.exp()))
            .unzip();
        ParticlePosterior::new(particles, weights).expect("normalized exact posterior")
    }
}

fn check_size(n: usize) -> Result<()> {
    if n == 0 || n > MAX_EXACT_POPULATION {
        Err(Error::invalid(format!(
            "exact posterior supports 1..={MAX_EXACT_POPULATION} individuals, got {n}"
        )))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(groups: &[Vec<usize>], n: usize) -> GroupBatch {
        GroupBatch::from_members(groups, n).unwrap()
    }

    #[test]
    fn two_state_bayes() {
        let prior = Prior::uniform(1, 0.5).unwrap();
        let noise = NoiseModel::constant(0.97, 0.85, 1).unwrap();
        let post = ExactPosterior::from_prior(&prior)
            .unwrap()
            .update(&batch(&[vec![0]], 1), &TestOutcomes::new(vec![true]), &noise)
            .unwrap();
        let expected = 0.85 / (0.85 + 0.03);
        assert!((post.marginal()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.96591).abs() < 1e-5);
    }

    #[test]
    fn noiseless_positive_individual_is_certain() {
        let prior = Prior::uniform(1, 0.5).unwrap();
        let noise = NoiseModel::noiseless(1).unwrap();
        let post = ExactPosterior::from_prior(&prior)
            .unwrap()
            .update(&batch(&[vec![0]], 1), &TestOutcomes::new(vec![true]), &noise)
            .unwrap();
        assert_eq!(post.marginal()[0], 1.0);
    }

    #[test]
    fn empty_batch_is_identity() {
        let prior = Prior::uniform(3, 0.2).unwrap();
        let noise = NoiseModel::constant(0.9, 0.9, 3).unwrap();
        let p = ExactPosterior::from_prior(&prior).unwrap();
        assert_eq!(p.update(&GroupBatch::empty(), &TestOutcomes::default(), &noise).unwrap(), p);
    }

    #[test]
    fn contradictory_noiseless_evidence_is_degenerate() {
        let prior = Prior::uniform(2, 0.2).unwrap();
        let noise = NoiseModel::noiseless(2).unwrap();
        let b = batch(&[vec![0, 1], vec![0], vec![1]], 2);
        let y = TestOutcomes::new(vec![true, false, false]);
        let err = ExactPosterior::from_prior(&prior).unwrap().update(&b, &y, &noise);
        assert!(matches!(err, Err(Error::DegenerateEvidence { .. })));
    }

    #[test]
    fn updates_commute_and_match_joint() {
        let prior = Prior::new(vec![0.1, 0.2, 0.3, 0.15, 0.05]).unwrap();
        let noise = NoiseModel::from_tables(vec![0.95, 0.93, 0.9], vec![0.9, 0.85, 0.8]).unwrap();
        let a = batch(&[vec![0, 1], vec![2, 3, 4]], 5);
        let ya = TestOutcomes::new(vec![true, false]);
        let b = batch(&[vec![1, 2], vec![4]], 5);
        let yb = TestOutcomes::new(vec![true, true]);
        let p0 = ExactPosterior::from_prior(&prior).unwrap();
        let ab = p0.update(&a, &ya, &noise).unwrap().update(&b, &yb, &noise).unwrap();
        let ba = p0.update(&b, &yb, &noise).unwrap().update(&a, &ya, &noise).unwrap();
        let joint_batch: GroupBatch = a.groups().iter().chain(b.groups()).cloned().collect();
        let joint_y = TestOutcomes::new([ya.values(), yb.values()].concat());
        let joint = p0.update(&joint_batch, &joint_y, &noise).unwrap();
        for ((x, y), z) in ab.log_mass().iter().zip(ba.log_mass()).zip(joint.log_mass()) {
            assert!((x - y).abs() < 1e-12);
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn size_limit() {
        assert!(ExactPosterior::from_prior(&Prior::uniform(25, 0.1).unwrap()).is_err());
    }
}
