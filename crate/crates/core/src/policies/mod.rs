//! Policies: staged sequences of group selectors sharing a stack of groups
//! waiting to be tested.
//!
//! At each cycle the policy tops the stack up to `k` groups by calling the
//! active selector (at most once per selector per cycle), advancing to the
//! next selector whenever the active one's switch condition is met, and then
//! pops up to `k` groups for testing.

pub mod assay;
pub mod selectors;

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, GroupBatch, NoiseModel, Prior, TestOutcomes};
use crate::posterior::ParticlePosterior;

pub use assay::{load_assay, parse_assay, parse_test_records, FixedAssay};
pub use selectors::{
    binary_split_positives, boed_selector, dorfman_group_size, dorfman_split, informative_dorfman,
    informative_dorfman_cost, mt_group_size, mt_random_groups, split_positives_individual, BoedKind,
};

fn default_forward() -> usize {
    3
}

fn default_backward() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectorSpec {
    /// Contiguous pools of the Dorfman size.
    Dorfman,
    /// Individual retests of everyone seen in a positive group.
    SplitPositives,
    /// Halving of positive groups.
    BinarySplit,
    /// Uniform random groups sized for a positive rate near one half.
    Random,
    /// A fixed design read from `path`, given inline as `groups`, or taken
    /// from the configuration-level assay when both are absent.
    FixedAssay {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        groups: Option<Vec<Vec<usize>>>,
    },
    /// Pool-specific optimal Dorfman on the current decoded marginal.
    InformativeDorfman,
    /// Every individual once, alone.
    Individual,
    GMimax {
        #[serde(default = "default_forward")]
        forward: usize,
        #[serde(default = "default_backward")]
        backward: usize,
    },
    GAucmax {
        #[serde(default = "default_forward")]
        forward: usize,
        #[serde(default = "default_backward")]
        backward: usize,
    },
}

impl SelectorSpec {
    pub fn is_boed(&self) -> bool {
        matches!(self, SelectorSpec::GMimax { .. } | SelectorSpec::GAucmax { .. })
    }
}

/// When a stage hands over to the next one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchCondition {
    /// After the selector has been called this many times.
    Calls(usize),
    /// After the selector has produced this many groups.
    Groups(usize),
    /// Once the selector has nothing left to propose.
    Exhausted,
    #[default]
    Forever,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyStage {
    pub selector: SelectorSpec,
    #[serde(default)]
    pub until: SwitchCondition,
}

impl PolicyStage {
    fn new(selector: SelectorSpec, until: SwitchCondition) -> Self {
        PolicyStage { selector, until }
    }
}

pub const PRESETS: &[&str] = &[
    "dorfman",
    "binary_dorfman",
    "random",
    "random_id",
    "origami_id",
    "origami_random",
    "g_mimax",
    "g_aucmax",
    "individual",
];

/// A named sequence of stages. Deserializes from a preset name or from an
/// object with `name` and `stages`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicySpecRepr")]
pub struct PolicySpec {
    pub name: String,
    pub stages: Vec<PolicyStage>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PolicySpecRepr {
    Preset(String),
    Full { name: String, stages: Vec<PolicyStage> },
}

impl TryFrom<PolicySpecRepr> for PolicySpec {
    type Error = Error;

    fn try_from(r: PolicySpecRepr) -> Result<Self> {
        let spec = match r {
            PolicySpecRepr::Preset(name) => PolicySpec::preset(&name)?,
            PolicySpecRepr::Full { name, stages } => PolicySpec { name, stages },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl PolicySpec {
    pub fn preset(name: &str) -> Result<Self> {
        use SelectorSpec as S;
        use SwitchCondition as C;
        let assay = || S::FixedAssay { path: None, groups: None };
        let boed = |kind| match kind {
            BoedKind::Mimax => S::GMimax {
                forward: default_forward(),
                backward: default_backward(),
            },
            BoedKind::Aucmax => S::GAucmax {
                forward: default_forward(),
                backward: default_backward(),
            },
        };
        let stages = match name {
            "dorfman" => vec![
                PolicyStage::new(S::Dorfman, C::Calls(1)),
                PolicyStage::new(S::SplitPositives, C::Forever),
            ],
            "binary_dorfman" => vec![
                PolicyStage::new(S::Dorfman, C::Calls(1)),
                PolicyStage::new(S::BinarySplit, C::Forever),
            ],
            "random" => vec![PolicyStage::new(S::Random, C::Forever)],
            "random_id" => vec![
                PolicyStage::new(S::Random, C::Calls(1)),
                PolicyStage::new(S::InformativeDorfman, C::Forever),
            ],
            "origami_id" => vec![
                PolicyStage::new(assay(), C::Exhausted),
                PolicyStage::new(S::InformativeDorfman, C::Forever),
            ],
            "origami_random" => vec![
                PolicyStage::new(assay(), C::Exhausted),
                PolicyStage::new(S::Random, C::Forever),
            ],
            "g_mimax" => vec![PolicyStage::new(boed(BoedKind::Mimax), C::Forever)],
            "g_aucmax" => vec![PolicyStage::new(boed(BoedKind::Aucmax), C::Forever)],
            "individual" => vec![PolicyStage::new(S::Individual, C::Forever)],
            other => {
                return Err(Error::config(format!(
                    "unknown policy {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(PolicySpec {
            name: name.to_string(),
            stages,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config(format!("policy {:?} has no stages", self.name)));
        }
        for stage in &self.stages {
            if let SelectorSpec::GMimax { forward, backward } | SelectorSpec::GAucmax { forward, backward } =
                stage.selector
            {
                if forward <= backward {
                    return Err(Error::config("forward steps must exceed backward steps"));
                }
            }
            if let SelectorSpec::FixedAssay {
                path: Some(_),
                groups: Some(_),
            } = stage.selector
            {
                return Err(Error::config("fixed assay takes either a path or inline groups, not both"));
            }
        }
        Ok(())
    }

    pub fn needs_posterior(&self) -> bool {
        self.stages.iter().any(|s| s.selector.is_boed())
    }

    pub fn needs_assay(&self) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(s.selector, SelectorSpec::FixedAssay { path: None, groups: None }))
    }
}

/// What a selector may look at when proposing groups.
#[derive(Clone, Copy)]
pub struct SelectionContext<'a> {
    /// 1-based cycle index.
    pub cycle: usize,
    pub history: &'a [(GroupBatch, TestOutcomes)],
    /// Prior and noise assumed by the policy.
    pub prior: &'a Prior,
    pub noise: &'a NoiseModel,
    /// Latest decoded marginal (the prior rates before any test).
    pub marginal: &'a [f64],
    pub posterior: Option<&'a ParticlePosterior>,
}

impl SelectionContext<'_> {
    fn mean_rate(&self) -> f64 {
        let r = self.prior.rates();
        r.iter().sum::<f64>() / r.len() as f64
    }
}

#[derive(Clone, Debug)]
enum Selector {
    Dorfman,
    SplitPositives,
    BinarySplit { seen: usize },
    Random,
    Assay(FixedAssay),
    InformativeDorfman,
    Individual,
    Boed { kind: BoedKind, forward: usize, backward: usize },
}

impl Selector {
    fn build(spec: &SelectorSpec, n: usize, n_max: usize, shared_assay: Option<&[Group]>) -> Result<Self> {
        Ok(match spec {
            SelectorSpec::Dorfman => Selector::Dorfman,
            SelectorSpec::SplitPositives => Selector::SplitPositives,
            SelectorSpec::BinarySplit => Selector::BinarySplit { seen: 0 },
            SelectorSpec::Random => Selector::Random,
            SelectorSpec::FixedAssay { path, groups } => {
                let groups = match (path, groups) {
                    (Some(p), _) => load_assay(p, n, n_max)?,
                    (None, Some(g)) => {
                        let text: Vec<String> = g
                            .iter()
                            .map(|m| m.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
                            .collect();
                        parse_assay(&text.join("\n"), n, n_max)?
                    }
                    (None, None) => {
                        let shared = shared_assay.ok_or_else(|| Error::config("policy needs an assay file"))?;
                        if let Some(g) = shared.iter().find(|g| g.size() > n_max || g.population() != n) {
                            return Err(Error::config(format!("assay group {:?} does not fit n = {n}, n_max = {n_max}", g.members())));
                        }
                        shared.to_vec()
                    }
                };
                Selector::Assay(FixedAssay::new(groups))
            }
            SelectorSpec::InformativeDorfman => Selector::InformativeDorfman,
            SelectorSpec::Individual => Selector::Individual,
            SelectorSpec::GMimax { forward, backward } => Selector::Boed {
                kind: BoedKind::Mimax,
                forward: *forward,
                backward: *backward,
            },
            SelectorSpec::GAucmax { forward, backward } => Selector::Boed {
                kind: BoedKind::Aucmax,
                forward: *forward,
                backward: *backward,
            },
        })
    }

    fn is_exhausted(&self) -> bool {
        matches!(self, Selector::Assay(a) if a.is_exhausted())
    }

    fn select<R: Rng + ?Sized>(
        &mut self,
        d: usize,
        n: usize,
        n_max: usize,
        pending: &[Group],
        ctx: &SelectionContext<'_>,
        rng: &mut R,
    ) -> Result<Vec<Group>> {
        match self {
            Selector::Dorfman => dorfman_split(n, ctx.mean_rate(), n_max),
            Selector::SplitPositives => split_positives_individual(ctx.history, pending, n),
            Selector::BinarySplit { seen } => {
                let fresh = &ctx.history[(*seen).min(ctx.history.len())..];
                *seen = ctx.history.len();
                binary_split_positives(
                    fresh
                        .iter()
                        .flat_map(|(b, y)| b.groups().iter().zip(y.values().iter().copied())),
                    n,
                )
            }
            Selector::Random => mt_random_groups(n, ctx.mean_rate(), ctx.noise, n_max, d, rng),
            Selector::Assay(a) => Ok(a.take(d)),
            Selector::InformativeDorfman => informative_dorfman(ctx.marginal, ctx.noise, n_max),
            Selector::Individual => {
                let mut done: BTreeSet<usize> = BTreeSet::new();
                for g in ctx.history.iter().flat_map(|(b, _)| b.groups()).chain(pending) {
                    if g.size() == 1 {
                        done.insert(g.members()[0]);
                    }
                }
                (0..n)
                    .filter(|i| !done.contains(i))
                    .map(|i| Group::singleton(i, n))
                    .collect()
            }
            Selector::Boed {
                kind,
                forward,
                backward,
            } => {
                let p = ctx
                    .posterior
                    .ok_or_else(|| Error::config("design selectors need a particle posterior"))?;
                boed_selector(*kind, p, ctx.noise, d, n_max, *forward, *backward)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    selector: Selector,
    until: SwitchCondition,
    calls: usize,
    produced: usize,
    ran_dry: bool,
}

impl Stage {
    fn done(&self) -> bool {
        match self.until {
            SwitchCondition::Calls(c) => self.calls >= c,
            SwitchCondition::Groups(g) => self.produced >= g,
            SwitchCondition::Exhausted => self.ran_dry || self.selector.is_exhausted(),
            SwitchCondition::Forever => false,
        }
    }
}

/// Runtime state of a policy for one population.
#[derive(Clone, Debug)]
pub struct Policy {
    name: String,
    n: usize,
    n_max: usize,
    stages: Vec<Stage>,
    current: usize,
    stack: VecDeque<Group>,
    needs_posterior: bool,
}

impl Policy {
    /// `shared_assay` backs fixed-assay stages that name no file of their own.
    pub fn new(spec: &PolicySpec, n: usize, n_max: usize, shared_assay: Option<&[Group]>) -> Result<Self> {
        spec.validate()?;
        if n == 0 || n_max == 0 {
            return Err(Error::config("population and n_max must be positive"));
        }
        let stages = spec
            .stages
            .iter()
            .map(|s| {
                Ok(Stage {
                    selector: Selector::build(&s.selector, n, n_max, shared_assay)?,
                    until: s.until,
                    calls: 0,
                    produced: 0,
                    ran_dry: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Policy {
            name: spec.name.clone(),
            n,
            n_max,
            stages,
            current: 0,
            stack: VecDeque::new(),
            needs_posterior: spec.needs_posterior(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn needs_posterior(&self) -> bool {
        self.needs_posterior
    }

    /// Index of the active stage.
    pub fn stage(&self) -> usize {
        self.current
    }

    pub fn pending(&self) -> impl Iterator<Item = &Group> {
        self.stack.iter()
    }

    fn advance(&mut self) {
        while self.current + 1 < self.stages.len() && self.stages[self.current].done() {
            self.current += 1;
        }
    }

    /// Groups to test at this cycle: at most `k`, empty when every selector
    /// has run dry.
    pub fn step<R: Rng + ?Sized>(&mut self, k: usize, ctx: &SelectionContext<'_>, rng: &mut R) -> Result<GroupBatch> {
        if k == 0 {
            return Err(Error::invalid("test budget per cycle must be at least 1"));
        }
        let mut called = vec![false; self.stages.len()];
        while self.stack.len() < k {
            self.advance();
            let i = self.current;
            if called[i] {
                break;
            }
            called[i] = true;
            let pending: Vec<Group> = self.stack.iter().cloned().collect();
            let d = k - self.stack.len();
            let stage = &mut self.stages[i];
            let groups = stage.selector.select(d, self.n, self.n_max, &pending, ctx, rng)?;
            stage.calls += 1;
            stage.produced += groups.len();
            stage.ran_dry |= groups.is_empty();
            self.stack.extend(groups);
        }
        let r = k.min(self.stack.len());
        Ok(GroupBatch::new(self.stack.drain(..r).collect()))
    }
}
