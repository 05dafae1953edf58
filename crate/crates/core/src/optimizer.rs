//! Greedy batch construction.
//!
//! Groups are built one at a time. Each group grows in rounds: up to `F`
//! forward steps add the individual that most increases the batch utility,
//! then, if the round added at least two individuals, up to `B` backward
//! steps remove the member whose removal most increases it. A move is taken
//! only when it improves the utility by more than [`TIE_TOL`]. A group stops
//! when a round adds nobody or the group reaches `n_max`. A group that ends
//! empty is dropped and construction stops early.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{binary_entropy, xlogx};
use crate::model::{Group, GroupBatch, NoiseModel, StateVector};
use crate::posterior::ParticlePosterior;
use crate::utility::{expected_utility, UtilityFunctional, K_MAX};

/// Improvements at or below this are treated as ties.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyConfig {
    pub k: usize,
    pub n_max: usize,
    #[serde(default = "default_forward")]
    pub forward: usize,
    #[serde(default = "default_backward")]
    pub backward: usize,
}

fn default_forward() -> usize {
    3
}

fn default_backward() -> usize {
    2
}

impl GreedyConfig {
    pub fn new(k: usize, n_max: usize) -> Self {
        GreedyConfig {
            k,
            n_max,
            forward: default_forward(),
            backward: default_backward(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > K_MAX {
            return Err(Error::config(format!("k must be in 1..={K_MAX}, got {}", self.k)));
        }
        if self.n_max == 0 {
            return Err(Error::config("n_max must be at least 1"));
        }
        if self.forward <= self.backward {
            return Err(Error::config(format!(
                "forward steps ({}) must exceed backward steps ({})",
                self.forward, self.backward
            )));
        }
        Ok(())
    }
}

/// The selected batch and the batch utility after every accepted move.
#[derive(Clone, Debug)]
pub struct GreedyTrace {
    pub batch: GroupBatch,
    pub utility: f64,
    pub moves: Vec<f64>,
}

/// Scores one-member edits of the group under construction, given the groups
/// already accepted into the batch.
trait GroupScorer {
    fn baseline(&self) -> f64;
    /// Utility of the batch with `u` added to `group`, for every `u` not in it.
    fn add_scores(&self, group: &[usize], in_group: &[bool]) -> Result<Vec<Option<f64>>>;
    /// Utility of the batch with `group[i]` removed, for every `i`.
    fn remove_scores(&self, group: &[usize]) -> Result<Vec<f64>>;
    fn accept(&mut self, group: &Group, noise: &NoiseModel) -> Result<()>;
}

fn argmax<I: IntoIterator<Item = (usize, f64)>>(scores: I) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in scores {
        if best.is_none_or(|(_, b)| v > b + TIE_TOL) {
            best = Some((i, v));
        }
    }
    best
}

fn effective_n_max(n: usize, noise: &NoiseModel, cfg: &GreedyConfig) -> usize {
    cfg.n_max.min(n).min(noise.max_group_size())
}

fn run_greedy<S: GroupScorer>(scorer: &mut S, n: usize, noise: &NoiseModel, cfg: &GreedyConfig) -> Result<GreedyTrace> {
    cfg.validate()?;
    let n_max = effective_n_max(n, noise, cfg);
    let mut batch = GroupBatch::empty();
    let mut moves = Vec::new();
    let mut current = scorer.baseline();
    for _ in 0..cfg.k {
        let mut group: Vec<usize> = Vec::new();
        let mut in_group = vec![false; n];
        let mut f = current;
        loop {
            let mut adds = 0;
            for _ in 0..cfg.forward {
                if group.len() >= n_max {
                    break;
                }
                let scores = scorer.add_scores(&group, &in_group)?;
                let best = argmax(scores.iter().enumerate().filter_map(|(u, s)| s.map(|v| (u, v))));
                match best {
                    Some((u, v)) if v > f + TIE_TOL => {
                        let pos = group.partition_point(|&m| m < u);
                        group.insert(pos, u);
                        in_group[u] = true;
                        f = v;
                        moves.push(v);
                        adds += 1;
                    }
                    _ => break,
                }
            }
            if adds >= 2 {
                for _ in 0..cfg.backward {
                    if group.len() <= 1 {
                        break;
                    }
                    let scores = scorer.remove_scores(&group)?;
                    match argmax(scores.into_iter().enumerate()) {
                        Some((i, v)) if v > f + TIE_TOL => {
                            in_group[group.remove(i)] = false;
                            f = v;
                            moves.push(v);
                        }
                        _ => break,
                    }
                }
            }
            if adds == 0 || group.len() >= n_max {
                break;
            }
        }
        if group.is_empty() {
            break;
        }
        let g = Group::new(group, n)?;
        scorer.accept(&g, noise)?;
        batch.push(g);
        current = f;
    }
    Ok(GreedyTrace {
        batch,
        utility: current,
        moves,
    })
}

/// Outcome probabilities of the accepted groups, with particles merged into
/// classes that share a status pattern on those groups.
///
/// `table[b * classes + c]` is `P(Y = b | class c)` for outcome prefix `b`.
#[derive(Clone, Debug)]
pub struct IncrementalMiState {
    class_of: Vec<usize>,
    class_mass: Vec<f64>,
    table: Vec<f64>,
    num_outcomes: usize,
    /// `Σ_t h(σ_t) + γ_t f_t` over accepted groups.
    cond_entropy: f64,
    /// Outcome distribution of the accepted groups.
    outcome_probs: Vec<f64>,
}

impl IncrementalMiState {
    pub fn new(p: &ParticlePosterior) -> Self {
        IncrementalMiState {
            class_of: vec![0; p.len()],
            class_mass: vec![p.weights().iter().sum()],
            table: vec![1.0],
            num_outcomes: 1,
            cond_entropy: 0.0,
            outcome_probs: vec![1.0],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_mass.len()
    }

    pub fn outcome_probs(&self) -> &[f64] {
        &self.outcome_probs
    }

    pub fn conditional_entropy(&self) -> f64 {
        self.cond_entropy
    }

    /// MI of the accepted groups.
    pub fn mutual_information(&self) -> f64 {
        -self.outcome_probs.iter().map(|&v| xlogx(v)).sum::<f64>() - self.cond_entropy
    }

    /// MI after appending a group of `size` whose positive mass per class is
    /// `pos_mass`.
    pub fn score(&self, pos_mass: &[f64], size: usize, noise: &NoiseModel) -> f64 {
        let sigma = noise.specificity(size);
        let rho = noise.rho(size);
        let f: f64 = pos_mass.iter().sum();
        let h2 = binary_entropy(sigma) + noise.gamma(size) * f + self.cond_entropy;
        let classes = self.num_classes();
        let mut h1 = 0.0;
        for (b, &d) in self.outcome_probs.iter().enumerate() {
            let row = &self.table[b * classes..(b + 1) * classes];
            let r: f64 = row.iter().zip(pos_mass).map(|(l, w)| l * w).sum();
            let q1 = (1.0 - sigma) * d + rho * r;
            let q0 = sigma * d - rho * r;
            h1 -= xlogx(q0.max(0.0)) + xlogx(q1.max(0.0));
        }
        h1 - h2
    }

    pub fn accept(&mut self, p: &ParticlePosterior, group: &Group, noise: &NoiseModel) {
        let size = group.size();
        let old_classes = self.num_classes();
        // New class = (old class, status bit).
        let mut remap = vec![usize::MAX; 2 * old_classes];
        let mut class_mass = Vec::new();
        let mut origin = Vec::new();
        let mut pos_mass = 0.0;
        for (v, (x, &w)) in p.particles().iter().zip(p.weights()).enumerate() {
            let status = group.status(x);
            if status {
                pos_mass += w;
            }
            let key = 2 * self.class_of[v] + status as usize;
            if remap[key] == usize::MAX {
                remap[key] = class_mass.len();
                class_mass.push(0.0);
                origin.push((self.class_of[v], status));
            }
            self.class_of[v] = remap[key];
            class_mass[remap[key]] += w;
        }
        let classes = class_mass.len();
        let mut table = vec![0.0; 2 * self.num_outcomes * classes];
        for y in [false, true] {
            let offset = if y { self.num_outcomes } else { 0 };
            for b in 0..self.num_outcomes {
                for (c, &(old, status)) in origin.iter().enumerate() {
                    let lik = if y {
                        noise.prob_positive(size, status)
                    } else {
                        1.0 - noise.prob_positive(size, status)
                    };
                    table[(b + offset) * classes + c] = self.table[b * old_classes + old] * lik;
                }
            }
        }
        self.num_outcomes *= 2;
        self.outcome_probs = (0..self.num_outcomes)
            .map(|b| {
                table[b * classes..(b + 1) * classes]
                    .iter()
                    .zip(&class_mass)
                    .map(|(l, w)| l * w)
                    .sum()
            })
            .collect();
        self.table = table;
        self.class_mass = class_mass;
        self.cond_entropy += binary_entropy(noise.specificity(size)) + noise.gamma(size) * pos_mass;
    }
}

struct MiScorer<'a> {
    p: &'a ParticlePosterior,
    noise: &'a NoiseModel,
    state: IncrementalMiState,
}

impl MiScorer<'_> {
    fn group_mask(&self, group: &[usize]) -> StateVector {
        let mut m = StateVector::zeros(self.p.num_vars());
        for &i in group {
            m.set(i, true);
        }
        m
    }
}

impl GroupScorer for MiScorer<'_> {
    fn baseline(&self) -> f64 {
        self.state.mutual_information()
    }

    fn add_scores(&self, group: &[usize], in_group: &[bool]) -> Result<Vec<Option<f64>>> {
        let n = self.p.num_vars();
        let classes = self.state.num_classes();
        let mask = self.group_mask(group);
        let mut base = vec![0.0; classes];
        let mut extra = vec![0.0; n * classes];
        for (v, (x, &w)) in self.p.particles().iter().zip(self.p.weights()).enumerate() {
            let c = self.state.class_of[v];
            if x.intersects(&mask) {
                base[c] += w;
            } else if w > 0.0 {
                for i in x.ones() {
                    extra[i * classes + c] += w;
                }
            }
        }
        let size = group.len() + 1;
        let mut pos = vec![0.0; classes];
        Ok((0..n)
            .map(|u| {
                if in_group[u] {
                    return None;
                }
                for c in 0..classes {
                    pos[c] = base[c] + extra[u * classes + c];
                }
                Some(self.state.score(&pos, size, self.noise))
            })
            .collect())
    }

    fn remove_scores(&self, group: &[usize]) -> Result<Vec<f64>> {
        let classes = self.state.num_classes();
        let mut base = vec![0.0; classes];
        let mut minus = vec![0.0; group.len() * classes];
        for (v, (x, &w)) in self.p.particles().iter().zip(self.p.weights()).enumerate() {
            let c = self.state.class_of[v];
            let mut hits = group.iter().enumerate().filter(|(_, &i)| x.get(i));
            let Some((first, _)) = hits.next() else {
                continue;
            };
            base[c] += w;
            if hits.next().is_none() {
                minus[first * classes + c] += w;
            }
        }
        let size = group.len() - 1;
        let mut pos = vec![0.0; classes];
        Ok((0..group.len())
            .map(|i| {
                for c in 0..classes {
                    pos[c] = base[c] - minus[i * classes + c];
                }
                self.state.score(&pos, size, self.noise)
            })
            .collect())
    }

    fn accept(&mut self, group: &Group, noise: &NoiseModel) -> Result<()> {
        self.state.accept(self.p, group, noise);
        Ok(())
    }
}

/// Greedy forward/backward maximization of `I(X; Y_G)`.
pub fn greedy_mimax(p: &ParticlePosterior, noise: &NoiseModel, cfg: &GreedyConfig) -> Result<GroupBatch> {
    greedy_mimax_trace(p, noise, cfg).map(|t| t.batch)
}

pub fn greedy_mimax_trace(p: &ParticlePosterior, noise: &NoiseModel, cfg: &GreedyConfig) -> Result<GreedyTrace> {
    let mut scorer = MiScorer {
        p,
        noise,
        state: IncrementalMiState::new(p),
    };
    run_greedy(&mut scorer, p.num_vars(), noise, cfg)
}

struct GenericScorer<'a, U: ?Sized> {
    p: &'a ParticlePosterior,
    noise: &'a NoiseModel,
    phi: &'a U,
    accepted: GroupBatch,
}

impl<U: UtilityFunctional + ?Sized> GenericScorer<'_, U> {
    fn evaluate(&self, members: Vec<usize>) -> Result<f64> {
        let mut batch = self.accepted.clone();
        batch.push(Group::new(members, self.p.num_vars())?);
        expected_utility(self.p, &batch, self.noise, self.phi)
    }
}

impl<U: UtilityFunctional + ?Sized> GroupScorer for GenericScorer<'_, U> {
    fn baseline(&self) -> f64 {
        if self.accepted.is_empty() {
            self.phi.evaluate(self.p.weights(), self.p.particles())
        } else {
            expected_utility(self.p, &self.accepted, self.noise, self.phi).unwrap_or(f64::NEG_INFINITY)
        }
    }

    fn add_scores(&self, group: &[usize], in_group: &[bool]) -> Result<Vec<Option<f64>>> {
        (0..self.p.num_vars())
            .map(|u| {
                if in_group[u] {
                    return Ok(None);
                }
                let mut members = group.to_vec();
                members.push(u);
                self.evaluate(members).map(Some)
            })
            .collect()
    }

    fn remove_scores(&self, group: &[usize]) -> Result<Vec<f64>> {
        (0..group.len())
            .map(|i| {
                let mut members = group.to_vec();
                members.remove(i);
                self.evaluate(members)
            })
            .collect()
    }

    fn accept(&mut self, group: &Group, _noise: &NoiseModel) -> Result<()> {
        self.accepted.push(group.clone());
        Ok(())
    }
}

/// Greedy forward/backward maximization of `U_Φ` computed by
/// [`expected_utility`]. The empty batch scores `Φ(π̂)`.
pub fn greedy_generic<U: UtilityFunctional + ?Sized>(
    p: &ParticlePosterior,
    noise: &NoiseModel,
    cfg: &GreedyConfig,
    phi: &U,
) -> Result<GroupBatch> {
    greedy_generic_trace(p, noise, cfg, phi).map(|t| t.batch)
}

pub fn greedy_generic_trace<U: UtilityFunctional + ?Sized>(
    p: &ParticlePosterior,
    noise: &NoiseModel,
    cfg: &GreedyConfig,
    phi: &U,
) -> Result<GreedyTrace> {
    let mut scorer = GenericScorer {
        p,
        noise,
        phi,
        accepted: GroupBatch::empty(),
    };
    run_greedy(&mut scorer, p.num_vars(), noise, cfg)
}
