//! Single-site MCMC kernels on `{0,1}^n`.
//!
//! Both kernels scan coordinates `0..n` in ascending order. At coordinate `j`
//! the chain moves to the flipped state with a probability that depends only
//! on `Δ = ln π(flip_j x) − ln π(x)`:
//!
//! * Gibbs: the full conditional, `e^Δ / (1 + e^Δ)`;
//! * modified Gibbs (Metropolized): `min(1, e^Δ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::sigmoid;
use crate::model::StateVector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McmcKernel {
    Gibbs,
    #[default]
    ModifiedGibbs,
}

impl McmcKernel {
    /// Probability of moving coordinate `j` to its opposite value.
    #[inline]
    pub fn flip_probability(self, log_ratio: f64) -> f64 {
        if log_ratio.is_nan() {
            return 0.0;
        }
        match self {
            McmcKernel::Gibbs => sigmoid(log_ratio),
            McmcKernel::ModifiedGibbs => {
                if log_ratio >= 0.0 {
                    1.0
                } else {
                    log_ratio.exp()
                }
            }
        }
    }

    /// One full scan. Returns the number of accepted flips.
    pub fn sweep<T, R>(self, x: &mut StateVector, target: &T, cursor: &mut T::Cursor, rng: &mut R) -> usize
    where
        T: FlipTarget + ?Sized,
        R: Rng + ?Sized,
    {
        let mut accepted = 0;
        for j in 0..target.num_vars() {
            let p = self.flip_probability(target.flip_log_ratio(x, cursor, j));
            if p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p) {
                target.apply_flip(x, cursor, j);
                accepted += 1;
            }
        }
        accepted
    }
}

/// Unnormalized log-pmf on `{0,1}^n`.
pub trait LogPmf {
    fn num_vars(&self) -> usize;
    fn log_pmf(&self, x: &StateVector) -> f64;
}

/// A target that can report single-flip log-ratios, optionally backed by an
/// incrementally maintained per-chain cache.
pub trait FlipTarget {
    type Cursor;

    fn num_vars(&self) -> usize;
    fn cursor(&self, x: &StateVector) -> Self::Cursor;
    /// `ln π(x with bit j flipped) − ln π(x)`.
    fn flip_log_ratio(&self, x: &StateVector, cursor: &Self::Cursor, j: usize) -> f64;
    fn apply_flip(&self, x: &mut StateVector, cursor: &mut Self::Cursor, j: usize);
}

/// Adapts any [`LogPmf`] by evaluating the pmf at both states.
pub struct PmfTarget<'a, T: ?Sized>(pub &'a T);

impl<T: LogPmf + ?Sized> FlipTarget for PmfTarget<'_, T> {
    type Cursor = ();

    fn num_vars(&self) -> usize {
        self.0.num_vars()
    }

    fn cursor(&self, _x: &StateVector) {}

    fn flip_log_ratio(&self, x: &StateVector, _cursor: &(), j: usize) -> f64 {
        let here = self.0.log_pmf(x);
        let mut y = x.clone();
        y.flip(j);
        let there = self.0.log_pmf(&y);
        if here == f64::NEG_INFINITY && there == f64::NEG_INFINITY {
            0.0
        } else {
            there - here
        }
    }

    fn apply_flip(&self, x: &mut StateVector, _cursor: &mut (), j: usize) {
        x.flip(j);
    }
}

/// One modified-Gibbs scan over every coordinate.
pub fn modified_gibbs_sweep<T, R>(x: &StateVector, target: &T, rng: &mut R) -> StateVector
where
    T: LogPmf + ?Sized,
    R: Rng + ?Sized,
{
    let mut y = x.clone();
    McmcKernel::ModifiedGibbs.sweep(&mut y, &PmfTarget(target), &mut (), rng);
    y
}

/// One systematic-scan Gibbs sweep over every coordinate.
pub fn gibbs_sweep<T, R>(x: &StateVector, target: &T, rng: &mut R) -> StateVector
where
    T: LogPmf + ?Sized,
    R: Rng + ?Sized,
{
    let mut y = x.clone();
    McmcKernel::Gibbs.sweep(&mut y, &PmfTarget(target), &mut (), rng);
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Table {
        n: usize,
        log_p: Vec<f64>,
    }

    impl LogPmf for Table {
        fn num_vars(&self) -> usize {
            self.n
        }
        fn log_pmf(&self, x: &StateVector) -> f64 {
            self.log_p[x.words()[0] as usize]
        }
    }

    fn toy_target() -> Table {
        let p = [0.05, 0.10, 0.20, 0.05, 0.15, 0.10, 0.30, 0.05];
        Table {
            n: 3,
            log_p: p.iter().map(|v: &f64| v.ln()).collect(),
        }
    }

    #[test]
    fn uniform_target_accepts_every_flip() {
        let t = Table { n: 4, log_p: vec![0.0; 16] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = StateVector::from_index(4, 0b0101);
        let y = modified_gibbs_sweep(&x, &t, &mut rng);
        assert_eq!(y, StateVector::from_index(4, 0b1010));
    }

    #[test]
    fn concentrated_target_keeps_mode() {
        // Mode at 000 with mass 0.9; each single flip has ratio (0.1/7)/0.9.
        let mut log_p = vec![(0.1f64 / 7.0).ln(); 8];
        log_p[0] = 0.9f64.ln();
        let t = Table { n: 3, log_p };
        let alpha = McmcKernel::ModifiedGibbs.flip_probability((0.1f64 / 7.0 / 0.9).ln());
        assert!((alpha - 0.1 / 7.0 / 0.9).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = StateVector::zeros(3);
        let stays = (0..10_000)
            .filter(|_| modified_gibbs_sweep(&start, &t, &mut rng) == start)
            .count();
        // P(stay) over three proposals ≈ (1 − α)^3 ≈ 0.957
        let p_stay = stays as f64 / 10_000.0;
        assert!((p_stay - (1.0 - alpha).powi(3)).abs() < 0.01, "{p_stay}");
    }

    fn long_run_frequencies(kernel: McmcKernel, sweeps: usize) -> Vec<f64> {
        let t = toy_target();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = StateVector::zeros(3);
        let mut counts = [0usize; 8];
        for _ in 0..sweeps {
            kernel.sweep(&mut x, &PmfTarget(&t), &mut (), &mut rng);
            counts[x.words()[0] as usize] += 1;
        }
        counts.iter().map(|&c| c as f64 / sweeps as f64).collect()
    }

    #[test]
    fn modified_gibbs_long_run_matches_target() {
        let freq = long_run_frequencies(McmcKernel::ModifiedGibbs, 1_000_000);
        let target = toy_target();
        for (f, lp) in freq.iter().zip(&target.log_p) {
            assert!((f - lp.exp()).abs() < 0.01, "{f} vs {}", lp.exp());
        }
    }

    #[test]
    fn gibbs_long_run_matches_target() {
        let freq = long_run_frequencies(McmcKernel::Gibbs, 1_000_000);
        let target = toy_target();
        for (f, lp) in freq.iter().zip(&target.log_p) {
            assert!((f - lp.exp()).abs() < 0.01, "{f} vs {}", lp.exp());
        }
    }

    #[test]
    fn gibbs_single_coordinate_bernoulli() {
        let p: f64 = 0.3;
        let t = Table {
            n: 1,
            log_p: vec![(1.0 - p).ln(), p.ln()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = StateVector::zeros(1);
        let mut ones = 0;
        for _ in 0..100_000 {
            x = gibbs_sweep(&x, &t, &mut rng);
            ones += x.get(0) as usize;
        }
        assert!((ones as f64 / 1e5 - p).abs() < 0.01);
    }

    #[test]
    fn gibbs_on_uniform_target_is_uniform() {
        let t = Table { n: 2, log_p: vec![0.0; 4] };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let start = StateVector::zeros(2);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[gibbs_sweep(&start, &t, &mut rng).words()[0] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 40_000.0 - 0.25).abs() < 0.01));
    }

    #[test]
    fn nan_ratio_never_flips() {
        assert_eq!(McmcKernel::Gibbs.flip_probability(f64::NAN), 0.0);
        assert_eq!(McmcKernel::ModifiedGibbs.flip_probability(f64::NEG_INFINITY), 0.0);
        assert_eq!(McmcKernel::ModifiedGibbs.flip_probability(f64::INFINITY), 1.0);
    }
}
