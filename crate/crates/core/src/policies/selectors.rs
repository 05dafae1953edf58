//! Group selectors. Each one maps the testing history and current beliefs to
//! a list of new groups.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, GroupBatch, NoiseModel, TestOutcomes};
use crate::optimizer::{greedy_generic, greedy_mimax, GreedyConfig};
use crate::posterior::ParticlePosterior;
use crate::utility::{expected_auc_phi, K_MAX};

/// `min(n_max, 1 + ⌈1/√q⌉)`.
pub fn dorfman_group_size(q: f64, n_max: usize) -> usize {
    let raw = 1.0 + (1.0 / q.sqrt()).ceil();
    (raw as usize).clamp(1, n_max.max(1))
}

/// Contiguous partition of `0..n` into groups of the Dorfman size; the last
/// group may be smaller.
pub fn dorfman_split(n: usize, q: f64, n_max: usize) -> Result<Vec<Group>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("infection rate must be in (0, 1), got {q}")));
    }
    let c = dorfman_group_size(q, n_max);
    (0..n)
        .step_by(c)
        .map(|start| Group::new(start..(start + c).min(n), n))
        .collect()
}

fn tested_individually(history: &[(GroupBatch, TestOutcomes)], pending: &[Group]) -> BTreeSet<usize> {
    history
        .iter()
        .flat_map(|(b, _)| b.groups())
        .chain(pending)
        .filter(|g| g.size() == 1)
        .map(|g| g.members()[0])
        .collect()
}

/// One singleton per individual that appeared in a positive group and has no
/// individual test in the history or the pending stack, in index order.
pub fn split_positives_individual(
    history: &[(GroupBatch, TestOutcomes)],
    pending: &[Group],
    n: usize,
) -> Result<Vec<Group>> {
    let done = tested_individually(history, pending);
    let mut flagged = BTreeSet::new();
    for (batch, outcomes) in history {
        for (g, &y) in batch.groups().iter().zip(outcomes.values()) {
            if y {
                flagged.extend(g.members().iter().copied());
            }
        }
    }
    flagged
        .into_iter()
        .filter(|i| !done.contains(i))
        .map(|i| Group::singleton(i, n))
        .collect()
}

/// Halves (`⌈g/2⌉`, `⌊g/2⌋`) of every positive group of size > 1 among
/// `results`, in test order. Positive singletons are final and produce nothing.
pub fn binary_split_positives<'a, I>(results: I, n: usize) -> Result<Vec<Group>>
where
    I: IntoIterator<Item = (&'a Group, bool)>,
{
    let mut out = Vec::new();
    for (g, y) in results {
        if !y || g.size() < 2 {
            continue;
        }
        let members = g.members();
        let mid = members.len().div_ceil(2);
        out.push(Group::new(members[..mid].iter().copied(), n)?);
        out.push(Group::new(members[mid..].iter().copied(), n)?);
    }
    Ok(out)
}

/// Size giving a positive-test probability of about one half:
/// `⌊ln((s − 1/2)/ρ) / ln(1 − q)⌋`, clamped to `1..=n_max`, using the size-1
/// noise values.
pub fn mt_group_size(q: f64, noise: &NoiseModel, n_max: usize) -> Result<usize> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("infection rate must be in (0, 1), got {q}")));
    }
    let s = noise.sensitivity(1);
    if s <= 0.5 {
        return Err(Error::config(format!(
            "random group size needs sensitivity above 1/2, got {s}"
        )));
    }
    let g = ((s - 0.5) / noise.rho(1)).ln() / (1.0 - q).ln();
    let g = if g.is_finite() && g >= 1.0 { g.floor() as usize } else { 1 };
    Ok(g.min(n_max.max(1)))
}

/// `d` independent uniform subsets of `0..n` of the random-design size.
pub fn mt_random_groups<R: Rng + ?Sized>(
    n: usize,
    q: f64,
    noise: &NoiseModel,
    n_max: usize,
    d: usize,
    rng: &mut R,
) -> Result<Vec<Group>> {
    let g = mt_group_size(q, noise, n_max.min(n))?;
    (0..d)
        .map(|_| Group::new(rand::seq::index::sample(rng, n, g).into_vec(), n))
        .collect()
}

/// Expected tests per individual for pooling the `c` individuals with
/// infection probabilities `p`:
/// `(1/c)(1 + 1[c>1] c (s_c + (1 − s_c − σ_c) Π(1 − p_u)))`.
pub fn informative_dorfman_cost(p: &[f64], noise: &NoiseModel) -> f64 {
    let c = p.len();
    if c <= 1 {
        return 1.0;
    }
    let none = p.iter().map(|v| 1.0 - v).product::<f64>();
    let s = noise.sensitivity(c);
    let sigma = noise.specificity(c);
    (1.0 + c as f64 * (s + (1.0 - s - sigma) * none)) / c as f64
}

/// Pool-specific optimal Dorfman: sort by increasing marginal, then
/// repeatedly pool the cheapest prefix (smallest `c` on ties).
pub fn informative_dorfman(marginal: &[f64], noise: &NoiseModel, n_max: usize) -> Result<Vec<Group>> {
    let n = marginal.len();
    if marginal.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("marginal entries must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| marginal[a].total_cmp(&marginal[b]));
    let cap = n_max.min(noise.max_group_size()).max(1);
    let mut groups = Vec::new();
    let mut rest = &order[..];
    while !rest.is_empty() {
        let limit = cap.min(rest.len());
        let mut best = (1, f64::INFINITY);
        for c in 1..=limit {
            let p: Vec<f64> = rest[..c].iter().map(|&i| marginal[i]).collect();
            let cost = informative_dorfman_cost(&p, noise);
            if cost < best.1 {
                best = (c, cost);
            }
        }
        groups.push(Group::new(rest[..best.0].iter().copied(), n)?);
        rest = &rest[best.0..];
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoedKind {
    Mimax,
    Aucmax,
}

/// Greedy utility maximization with `k = d`.
pub fn boed_selector(
    kind: BoedKind,
    posterior: &ParticlePosterior,
    noise: &NoiseModel,
    d: usize,
    n_max: usize,
    forward: usize,
    backward: usize,
) -> Result<Vec<Group>> {
    if d == 0 {
        return Ok(Vec::new());
    }
    let cfg = GreedyConfig {
        k: d.min(K_MAX),
        n_max,
        forward,
        backward,
    };
    let batch = match kind {
        BoedKind::Mimax => greedy_mimax(posterior, noise, &cfg)?,
        BoedKind::Aucmax => greedy_generic(posterior, noise, &cfg, &expected_auc_phi())?,
    };
    Ok(batch.into_groups())
}
