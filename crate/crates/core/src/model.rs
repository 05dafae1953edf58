//! Domain types and the noisy pooled-test model.
//!
//! A pooled test over group `g` reports the OR of its members' infection bits,
//! flipped by device noise: a positive pool reads positive with probability
//! `s_g` (sensitivity) and a negative pool reads negative with probability
//! `σ_g` (specificity). Both may depend on the pool size `g`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::binary_entropy;

/// Largest supported population.
pub const MAX_POPULATION: usize = 1024;

/// One hypothesis `x ∈ {0,1}^n` about who is infected, stored as packed bits.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateVector {
    len: usize,
    words: Vec<u64>,
}

impl StateVector {
    pub fn zeros(len: usize) -> Self {
        assert!(len <= MAX_POPULATION, "population {len} exceeds {MAX_POPULATION}");
        StateVector {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut x = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                x.set(i, true);
            }
        }
        x
    }

    /// State with exactly the listed individuals infected.
    pub fn from_indices(len: usize, ones: &[usize]) -> Result<Self> {
        let mut x = Self::zeros(len);
        for &i in ones {
            if i >= len {
                return Err(Error::invalid(format!("index {i} out of range for n={len}")));
            }
            x.set(i, true);
        }
        Ok(x)
    }

    /// Builds a state from packed little-endian words.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if len > MAX_POPULATION || words.len() != len.div_ceil(64) {
            return Err(Error::invalid("packed word count does not match length"));
        }
        if len % 64 != 0 {
            let tail = words[words.len() - 1] >> (len % 64);
            if tail != 0 {
                return Err(Error::invalid("bits set beyond state length"));
            }
        }
        Ok(StateVector { len, words })
    }

    /// Decodes the `n`-th state of `{0,1}^len` in little-endian bit order.
    pub fn from_index(len: usize, index: u64) -> Self {
        let mut x = Self::zeros(len);
        if len > 0 {
            x.words[0] = if len < 64 { index & ((1u64 << len) - 1) } else { index };
        }
        x
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i & 63);
        if value {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i >> 6] ^= 1u64 << (i & 63);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// True if any bit is set in both vectors.
    #[inline]
    pub fn intersects(&self, other: &StateVector) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .any(|(a, b)| a & b != 0)
    }

    /// Indices of the set bits, ascending.
    pub fn ones(&self) -> Ones<'_> {
        Ones {
            words: &self.words,
            word_index: 0,
            current: self.words.first().copied().unwrap_or(0),
        }
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

pub struct Ones<'a> {
    words: &'a [u64],
    word_index: usize,
    current: u64,
}

impl Iterator for Ones<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let bit = self.current.trailing_zeros() as usize;
                self.current &= self.current - 1;
                return Some(self.word_index * 64 + bit);
            }
            self.word_index += 1;
            if self.word_index >= self.words.len() {
                return None;
            }
            self.current = self.words[self.word_index];
        }
    }
}

impl fmt::Debug for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateVector({self})")
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for StateVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.len() > MAX_POPULATION {
            return Err(serde::de::Error::custom("state vector too long"));
        }
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(serde::de::Error::custom(format!("invalid bit character {c:?}"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(StateVector::from_bits(&bits))
    }
}

/// A non-empty pool of distinct individuals.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Group {
    members: Vec<usize>,
    mask: StateVector,
}

impl Group {
    /// Members are sorted; duplicates, out-of-range indices and empty groups are rejected.
    pub fn new(members: impl IntoIterator<Item = usize>, n: usize) -> Result<Self> {
        let mut members: Vec<usize> = members.into_iter().collect();
        if members.is_empty() {
            return Err(Error::invalid("group must be non-empty"));
        }
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("group has duplicate members"));
        }
        let mask = StateVector::from_indices(n, &members)?;
        Ok(Group { members, mask })
    }

    pub fn singleton(i: usize, n: usize) -> Result<Self> {
        Self::new([i], n)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.members.len()
    }

    #[inline]
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    #[inline]
    pub fn mask(&self) -> &StateVector {
        &self.mask
    }

    pub fn population(&self) -> usize {
        self.mask.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.mask.len() && self.mask.get(i)
    }

    /// `[g, x]`: true iff some member is infected. Lengths must agree.
    #[inline]
    pub fn status(&self, x: &StateVector) -> bool {
        debug_assert_eq!(x.len(), self.mask.len());
        self.mask.intersects(x)
    }
}

impl fmt::Debug for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Group{:?}", self.members)
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.members.serialize(serializer)
    }
}

/// An ordered batch of groups tested together.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct GroupBatch {
    groups: Vec<Group>,
}

impl GroupBatch {
    pub fn new(groups: Vec<Group>) -> Self {
        GroupBatch { groups }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_members(members: &[Vec<usize>], n: usize) -> Result<Self> {
        members
            .iter()
            .map(|m| Group::new(m.iter().copied(), n))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    #[inline]
    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Group> {
        self.groups
    }

    pub fn push(&mut self, g: Group) {
        self.groups.push(g);
    }

    pub fn member_lists(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.members().to_vec()).collect()
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(Group::size).max().unwrap_or(0)
    }
}

impl FromIterator<Group> for GroupBatch {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        GroupBatch::new(iter.into_iter().collect())
    }
}

/// Observed results aligned with a [`GroupBatch`]; `true` is a positive test.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestOutcomes {
    values: Vec<bool>,
}

impl TestOutcomes {
    pub fn new(values: Vec<bool>) -> Self {
        TestOutcomes { values }
    }

    #[inline]
    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Outcome index with test `t` on bit `t` (bit 0 = first group).
    pub fn to_index(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &y)| acc | ((y as usize) << t))
    }
}

/// Per-group-size specificity and sensitivity tables, indexed by size `1..=n_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseTables", into = "NoiseTables")]
pub struct NoiseModel {
    specificity: Vec<f64>,
    sensitivity: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseTables {
    specificity: Vec<f64>,
    sensitivity: Vec<f64>,
}

impl TryFrom<NoiseTables> for NoiseModel {
    type Error = Error;

    fn try_from(t: NoiseTables) -> Result<Self> {
        NoiseModel::from_tables(t.specificity, t.sensitivity)
    }
}

impl From<NoiseModel> for NoiseTables {
    fn from(m: NoiseModel) -> Self {
        NoiseTables {
            specificity: m.specificity,
            sensitivity: m.sensitivity,
        }
    }
}

impl NoiseModel {
    pub fn from_tables(specificity: Vec<f64>, sensitivity: Vec<f64>) -> Result<Self> {
        if specificity.is_empty() || specificity.len() != sensitivity.len() {
            return Err(Error::config(
                "specificity and sensitivity tables must be non-empty and of equal length",
            ));
        }
        for (g, (&sp, &se)) in specificity.iter().zip(&sensitivity).enumerate() {
            let size = g + 1;
            if !(sp > 0.0 && sp <= 1.0) || !(se > 0.0 && se <= 1.0) {
                return Err(Error::config(format!(
                    "noise entries for group size {size} must lie in (0, 1]"
                )));
            }
            if sp + se - 1.0 <= 0.0 {
                return Err(Error::config(format!(
                    "test at group size {size} is no better than chance (specificity + sensitivity <= 1)"
                )));
            }
        }
        Ok(NoiseModel {
            specificity,
            sensitivity,
        })
    }

    /// Same specificity and sensitivity for every size up to `max_group_size`.
    pub fn constant(specificity: f64, sensitivity: f64, max_group_size: usize) -> Result<Self> {
        if max_group_size == 0 {
            return Err(Error::config("max group size must be at least 1"));
        }
        Self::from_tables(
            vec![specificity; max_group_size],
            vec![sensitivity; max_group_size],
        )
    }

    pub fn noiseless(max_group_size: usize) -> Result<Self> {
        Self::constant(1.0, 1.0, max_group_size)
    }

    /// Largest group size with defined noise.
    pub fn max_group_size(&self) -> usize {
        self.specificity.len()
    }

    pub fn check_size(&self, size: usize) -> Result<()> {
        if size == 0 || size > self.max_group_size() {
            Err(Error::invalid(format!(
                "group size {size} outside noise table 1..={}",
                self.max_group_size()
            )))
        } else {
            Ok(())
        }
    }

    #[inline]
    pub fn specificity(&self, size: usize) -> f64 {
        self.specificity[size - 1]
    }

    #[inline]
    pub fn sensitivity(&self, size: usize) -> f64 {
        self.sensitivity[size - 1]
    }

    /// `ρ_g = σ_g + s_g − 1`.
    #[inline]
    pub fn rho(&self, size: usize) -> f64 {
        self.specificity(size) + self.sensitivity(size) - 1.0
    }

    /// `γ_g = h(s_g) − h(σ_g)`.
    #[inline]
    pub fn gamma(&self, size: usize) -> f64 {
        binary_entropy(self.sensitivity(size)) - binary_entropy(self.specificity(size))
    }

    /// `P(Y_g = 1 | [g, x] = status)`.
    #[inline]
    pub fn prob_positive(&self, size: usize, status: bool) -> f64 {
        if status {
            self.sensitivity(size)
        } else {
            1.0 - self.specificity(size)
        }
    }

    /// `ln P(Y_g = y | [g, x] = status)`; `-inf` for outcomes a noiseless device cannot produce.
    #[inline]
    pub fn log_likelihood(&self, size: usize, status: bool, positive: bool) -> f64 {
        let p1 = self.prob_positive(size, status);
        if positive {
            p1.ln()
        } else {
            (1.0 - p1).ln()
        }
    }

    pub fn specificity_table(&self) -> &[f64] {
        &self.specificity
    }

    pub fn sensitivity_table(&self) -> &[f64] {
        &self.sensitivity
    }
}

/// Independent Bernoulli prior with per-individual infection rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prior {
    rates: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Prior {
    type Error = Error;

    fn try_from(rates: Vec<f64>) -> Result<Self> {
        Prior::new(rates)
    }
}

impl From<Prior> for Vec<f64> {
    fn from(p: Prior) -> Self {
        p.rates
    }
}

impl Prior {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() || rates.len() > MAX_POPULATION {
            return Err(Error::config(format!(
                "population size must be in 1..={MAX_POPULATION}"
            )));
        }
        if let Some(i) = rates.iter().position(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::config(format!(
                "prior rate for individual {i} must lie in (0, 1)"
            )));
        }
        Ok(Prior { rates })
    }

    pub fn uniform(n: usize, q: f64) -> Result<Self> {
        Self::new(vec![q; n])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    #[inline]
    pub fn rate(&self, i: usize) -> f64 {
        self.rates[i]
    }

    /// `ln(q_i / (1 − q_i))` for each individual.
    pub fn log_odds(&self) -> Vec<f64> {
        self.rates.iter().map(|&q| (q / (1.0 - q)).ln()).collect()
    }

    pub fn log_pmf(&self, x: &StateVector) -> f64 {
        self.rates
            .iter()
            .enumerate()
            .map(|(i, &q)| if x.get(i) { q.ln() } else { (1.0 - q).ln() })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        let mut x = StateVector::zeros(self.rates.len());
        for (i, &q) in self.rates.iter().enumerate() {
            if rng.random::<f64>() < q {
                x.set(i, true);
            }
        }
        x
    }
}

/// `[g, x]`, checking that the group and state describe the same population.
pub fn group_status(g: &Group, x: &StateVector) -> Result<bool> {
    if g.population() != x.len() {
        return Err(Error::invalid(format!(
            "group over n={} applied to state of length {}",
            g.population(),
            x.len()
        )));
    }
    Ok(g.status(x))
}

/// `ln P(Y_g = y | X = x)`.
pub fn test_log_likelihood(g: &Group, y: bool, x: &StateVector, noise: &NoiseModel) -> Result<f64> {
    noise.check_size(g.size())?;
    let status = group_status(g, x)?;
    Ok(noise.log_likelihood(g.size(), status, y))
}

/// `ln P(Y_G = y | X = x)`: tests are independent given `x`.
pub fn batch_log_likelihood(
    batch: &GroupBatch,
    outcomes: &TestOutcomes,
    x: &StateVector,
    noise: &NoiseModel,
) -> Result<f64> {
    if batch.len() != outcomes.len() {
        return Err(Error::invalid(format!(
            "batch has {} groups but {} outcomes",
            batch.len(),
            outcomes.len()
        )));
    }
    batch
        .groups()
        .iter()
        .zip(outcomes.values())
        .try_fold(0.0, |acc, (g, &y)| Ok(acc + test_log_likelihood(g, y, x, noise)?))
}

/// Draws noisy outcomes for every group of `batch` given the true state.
pub fn sample_outcomes<R: Rng + ?Sized>(
    batch: &GroupBatch,
    truth: &StateVector,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<TestOutcomes> {
    let mut values = Vec::with_capacity(batch.len());
    for g in batch.groups() {
        noise.check_size(g.size())?;
        let p = noise.prob_positive(g.size(), group_status(g, truth)?);
        values.push(rng.random::<f64>() < p);
    }
    Ok(TestOutcomes::new(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(bits: &[u8]) -> StateVector {
        StateVector::from_bits(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
    }

    #[test]
    fn group_status_examples() {
        let g = Group::new([0], 3).unwrap();
        assert!(!group_status(&g, &sv(&[0, 0, 0])).unwrap());
        let g = Group::new([0, 1, 2], 3).unwrap();
        assert!(group_status(&g, &sv(&[0, 0, 1])).unwrap());
        let g = Group::new([1, 2], 3).unwrap();
        assert!(!group_status(&g, &sv(&[1, 0, 0])).unwrap());
    }

    #[test]
    fn empty_and_duplicate_groups_rejected() {
        assert!(matches!(
            Group::new(Vec::<usize>::new(), 3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(Group::new([1, 1], 3).is_err());
        assert!(Group::new([3], 3).is_err());
    }

    #[test]
    fn test_likelihood_examples() {
        let noise = NoiseModel::constant(0.97, 0.85, 10).unwrap();
        let g = Group::new([0, 1], 3).unwrap();
        let pos = sv(&[1, 0, 0]);
        let neg = sv(&[0, 0, 1]);
        assert!((test_log_likelihood(&g, true, &pos, &noise).unwrap() - 0.85f64.ln()).abs() < 1e-15);
        assert!((test_log_likelihood(&g, true, &neg, &noise).unwrap() - 0.03f64.ln()).abs() < 1e-12);
        let noiseless = NoiseModel::noiseless(10).unwrap();
        assert_eq!(
            test_log_likelihood(&g, true, &neg, &noiseless).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn oversized_group_rejected_by_noise_table() {
        let noise = NoiseModel::constant(0.97, 0.85, 2).unwrap();
        let g = Group::new([0, 1, 2], 3).unwrap();
        assert!(matches!(
            test_log_likelihood(&g, true, &sv(&[0, 0, 0]), &noise),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn batch_likelihood_examples() {
        let noise = NoiseModel::constant(0.97, 0.85, 10).unwrap();
        let x = sv(&[0, 0, 0, 1]);
        let single = GroupBatch::from_members(&[vec![0, 3]], 4).unwrap();
        let y1 = TestOutcomes::new(vec![true]);
        assert_eq!(
            batch_log_likelihood(&single, &y1, &x, &noise).unwrap(),
            test_log_likelihood(&single.groups()[0], true, &x, &noise).unwrap()
        );
        let two_neg = GroupBatch::from_members(&[vec![0], vec![1, 2]], 4).unwrap();
        let y = TestOutcomes::new(vec![false, false]);
        let ll = batch_log_likelihood(&two_neg, &y, &x, &noise).unwrap();
        assert!((ll - 2.0 * 0.97f64.ln()).abs() < 1e-15);

        let noiseless = NoiseModel::noiseless(10).unwrap();
        let y = TestOutcomes::new(vec![false, true]);
        assert_eq!(
            batch_log_likelihood(&two_neg, &y, &x, &noiseless).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(batch_log_likelihood(&two_neg, &y1, &x, &noise).is_err());
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::constant(0.5, 0.5, 3).is_err());
        assert!(NoiseModel::constant(0.0, 0.9, 3).is_err());
        assert!(NoiseModel::constant(1.2, 0.9, 3).is_err());
        assert!(NoiseModel::from_tables(vec![0.9], vec![0.9, 0.9]).is_err());
        let m = NoiseModel::from_tables(vec![0.99; 3], vec![0.90, 0.89, 0.88]).unwrap();
        assert_eq!(m.sensitivity(3), 0.88);
        assert!((m.rho(2) - 0.88).abs() < 1e-15);
    }

    #[test]
    fn noiseless_sampling_is_deterministic_status() {
        let noise = NoiseModel::noiseless(5).unwrap();
        let truth = sv(&[0, 1, 0, 0, 1, 0]);
        let batch = GroupBatch::from_members(&[vec![0], vec![1, 2], vec![3, 5], vec![4]], 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = sample_outcomes(&batch, &truth, &noise, &mut rng).unwrap();
        assert_eq!(y.values(), &[false, true, false, true]);
    }

    #[test]
    fn positive_group_empirical_rate() {
        let noise = NoiseModel::constant(0.97, 0.85, 5).unwrap();
        let truth = sv(&[1, 0]);
        let batch = GroupBatch::from_members(&[vec![0, 1]], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let positives = (0..draws)
            .filter(|_| sample_outcomes(&batch, &truth, &noise, &mut rng).unwrap().values()[0])
            .count();
        let rate = positives as f64 / draws as f64;
        assert!((rate - 0.85).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let noise = NoiseModel::constant(0.9, 0.8, 5).unwrap();
        let truth = sv(&[1, 0, 1, 0]);
        let batch = GroupBatch::from_members(&[vec![0], vec![1, 3], vec![2, 3]], 4).unwrap();
        let a = sample_outcomes(&batch, &truth, &noise, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_outcomes(&batch, &truth, &noise, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_outcome_frequencies_pass_chi_square() {
        // Three groups → 8 outcome cells; compare counts to exp(batch_log_likelihood).
        let noise = NoiseModel::constant(0.9, 0.8, 5).unwrap();
        let truth = sv(&[1, 0, 0, 0]);
        let batch = GroupBatch::from_members(&[vec![0, 1], vec![2], vec![1, 3]], 4).unwrap();
        let mut counts = [0usize; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_outcomes(&batch, &truth, &noise, &mut rng).unwrap().to_index()] += 1;
        }
        let mut chi2 = 0.0;
        for (idx, &c) in counts.iter().enumerate() {
            let y = TestOutcomes::new((0..3).map(|t| idx >> t & 1 == 1).collect());
            let p = batch_log_likelihood(&batch, &y, &truth, &noise).unwrap().exp();
            let expected = p * draws as f64;
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 7 degrees of freedom, 99.9% quantile ≈ 24.32
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    #[test]
    fn state_vector_bit_ops() {
        let mut x = StateVector::zeros(130);
        x.set(0, true);
        x.set(64, true);
        x.set(129, true);
        assert_eq!(x.ones().collect::<Vec<_>>(), vec![0, 64, 129]);
        x.flip(64);
        assert_eq!(x.count_ones(), 2);
        let s = serde_json::to_string(&x).unwrap();
        let back: StateVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, x);
        assert!(StateVector::from_words(3, vec![0b1000]).is_err());
    }

    proptest! {
        #[test]
        fn group_status_forms_agree(bits in proptest::collection::vec(any::<bool>(), 1..80),
                                    members in proptest::collection::btree_set(0usize..80, 1..10)) {
            let n = bits.len();
            let members: Vec<usize> = members.into_iter().filter(|&m| m < n).collect();
            prop_assume!(!members.is_empty());
            let x = StateVector::from_bits(&bits);
            let g = Group::new(members.iter().copied(), n).unwrap();
            let product_form = 1 - members.iter().map(|&i| 1 - bits[i] as i32).product::<i32>();
            let any_form = members.iter().any(|&i| bits[i]);
            prop_assert_eq!(group_status(&g, &x).unwrap(), product_form == 1);
            prop_assert_eq!(group_status(&g, &x).unwrap(), any_form);
        }

        #[test]
        fn batch_likelihood_sums_to_one(bits in proptest::collection::vec(any::<bool>(), 4..9),
                                        spec in 0.6f64..1.0, sens in 0.6f64..1.0, k in 1usize..4) {
            let n = bits.len();
            let x = StateVector::from_bits(&bits);
            let noise = NoiseModel::constant(spec, sens, n).unwrap();
            let groups: Vec<Vec<usize>> = (0..k).map(|t| vec![t, (t + 2) % n]).collect();
            let batch = GroupBatch::from_members(&groups, n).unwrap();
            let mut total = 0.0;
            for idx in 0..(1usize << k) {
                let y = TestOutcomes::new((0..k).map(|t| idx >> t & 1 == 1).collect());
                let p = batch_log_likelihood(&batch, &y, &x, &noise).unwrap().exp();
                prop_assert!((0.0..=1.0).contains(&p));
                total += p;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
