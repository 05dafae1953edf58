use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::HybridConfig;
use crate::error::{Error, Result};
use crate::model::{Group, NoiseModel, Prior, MAX_POPULATION};
use crate::policies::{load_assay, parse_assay, PolicySpec};
use crate::posterior::SmcConfig;

/// A rate given once for every group size, or tabulated by size (entry `i`
/// is for groups of size `i + 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeRate {
    Constant(f64),
    Table(Vec<f64>),
}

impl SizeRate {
    fn expand(&self, n_max: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            SizeRate::Constant(v) => Ok(vec![*v; n_max]),
            SizeRate::Table(t) if t.len() >= n_max => Ok(t.clone()),
            SizeRate::Table(t) => Err(Error::config(format!(
                "{field}: table has {} entries but n_max is {n_max}",
                t.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub specificity: SizeRate,
    pub sensitivity: SizeRate,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            specificity: SizeRate::Constant(0.97),
            sensitivity: SizeRate::Constant(0.85),
        }
    }
}

impl NoiseSpec {
    pub fn constant(specificity: f64, sensitivity: f64) -> Self {
        NoiseSpec {
            specificity: SizeRate::Constant(specificity),
            sensitivity: SizeRate::Constant(sensitivity),
        }
    }

    pub fn build(&self, n_max: usize) -> Result<NoiseModel> {
        NoiseModel::from_tables(
            self.specificity.expand(n_max, "specificity")?,
            self.sensitivity.expand(n_max, "sensitivity")?,
        )
        .map_err(|e| Error::config(e.to_string()))
    }
}

/// Infection prior: one rate for everyone or one per individual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateSpec {
    Uniform(f64),
    PerIndividual(Vec<f64>),
}

impl RateSpec {
    pub fn build(&self, n: usize) -> Result<Prior> {
        let prior = match self {
            RateSpec::Uniform(q) => Prior::uniform(n, *q),
            RateSpec::PerIndividual(r) if r.len() == n => Prior::new(r.clone()),
            RateSpec::PerIndividual(r) => {
                return Err(Error::config(format!("prior lists {} rates for n = {n}", r.len())))
            }
        };
        prior.map_err(|e| Error::config(e.to_string()))
    }
}

/// A fixed design given as a file path or inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AssaySource {
    Path(PathBuf),
    Groups(Vec<Vec<usize>>),
}

impl AssaySource {
    pub fn load(&self, n: usize, n_max: usize) -> Result<Vec<Group>> {
        match self {
            AssaySource::Path(p) => load_assay(p, n, n_max),
            AssaySource::Groups(g) => {
                let text: Vec<String> = g
                    .iter()
                    .map(|m| m.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                parse_assay(&text.join("\n"), n, n_max)
            }
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let AssaySource::Path(p) = self {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Everything a policy-driven session needs; contains no ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub n: usize,
    pub q: RateSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    pub policy: PolicySpec,
    #[serde(default)]
    pub assay: Option<AssaySource>,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub decoder: HybridConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    70
}

fn default_q() -> RateSpec {
    RateSpec::Uniform(0.05)
}

fn default_k() -> usize {
    8
}

fn default_cycles() -> usize {
    5
}

fn default_n_max() -> usize {
    10
}

fn default_thresholds() -> Vec<f64> {
    vec![0.03, 0.10]
}

/// Validated runtime form of a [`SessionConfig`].
#[derive(Clone, Debug)]
pub struct SessionParams {
    pub n: usize,
    pub k: usize,
    pub n_max: usize,
    pub prior: Prior,
    pub noise: NoiseModel,
    pub policy: PolicySpec,
    pub assay: Option<Vec<Group>>,
    pub smc: SmcConfig,
    pub decoder: HybridConfig,
}

fn check_shape(n: usize, k: usize, n_max: usize) -> Result<()> {
    if n == 0 || n > MAX_POPULATION {
        return Err(Error::config(format!("n must be in 1..={MAX_POPULATION}, got {n}")));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if n_max == 0 {
        return Err(Error::config("n_max must be at least 1"));
    }
    Ok(())
}

fn check_decoder(d: &HybridConfig) -> Result<()> {
    if d.max_iter == 0 || !(d.tol > 0.0) {
        return Err(Error::config("decoder needs max_iter ≥ 1 and tol > 0"));
    }
    Ok(())
}

impl SessionConfig {
    pub fn params(&self) -> Result<SessionParams> {
        check_shape(self.n, self.k, self.n_max)?;
        self.smc.validate()?;
        check_decoder(&self.decoder)?;
        self.policy.validate()?;
        let assay = self.assay.as_ref().map(|a| a.load(self.n, self.n_max)).transpose()?;
        Ok(SessionParams {
            n: self.n,
            k: self.k,
            n_max: self.n_max,
            prior: self.q.build(self.n)?,
            noise: self.noise.build(self.n_max)?,
            policy: self.policy.clone(),
            assay,
            smc: self.smc.clone(),
            decoder: self.decoder.clone(),
        })
    }
}

/// A simulation experiment: ground truth, the (possibly different) beliefs
/// handed to the policies, and the policies to compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    /// Infection prior used to draw the ground truth.
    #[serde(default = "default_q")]
    pub q: RateSpec,
    /// Infection prior assumed by policies and decoders; defaults to `q`.
    #[serde(default)]
    pub q_hat: Option<RateSpec>,
    /// Noise of the simulated lab.
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Noise assumed by policies and decoders; defaults to `noise`.
    #[serde(default)]
    pub noise_hat: Option<NoiseSpec>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub assay: Option<AssaySource>,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub decoder: HybridConfig,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on `cycles · k`.
    #[serde(default)]
    pub max_tests: Option<usize>,
}

impl SimulationConfig {
    pub fn new(policies: Vec<PolicySpec>) -> Self {
        SimulationConfig {
            n: default_n(),
            q: default_q(),
            q_hat: None,
            noise: NoiseSpec::default(),
            noise_hat: None,
            k: default_k(),
            cycles: default_cycles(),
            n_max: default_n_max(),
            policies,
            assay: None,
            smc: SmcConfig::default(),
            decoder: HybridConfig::default(),
            thresholds: default_thresholds(),
            seed: 0,
            max_tests: None,
        }
    }

    /// Reads a JSON config; relative assay paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: SimulationConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if let (Some(a), Some(dir)) = (cfg.assay.as_mut(), path.parent()) {
            a.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.n, self.k, self.n_max)?;
        if self.policies.is_empty() {
            return Err(Error::config("at least one policy is required"));
        }
        if let Some(max) = self.max_tests {
            if self.cycles * self.k > max {
                return Err(Error::config(format!(
                    "cycles × k = {} exceeds max_tests = {max}",
                    self.cycles * self.k
                )));
            }
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("thresholds must lie in [0, 1]"));
        }
        self.smc.validate()?;
        check_decoder(&self.decoder)?;
        self.q.build(self.n)?;
        self.noise.build(self.n_max)?;
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }

    pub fn truth_prior(&self) -> Result<Prior> {
        self.q.build(self.n)
    }

    pub fn truth_noise(&self) -> Result<NoiseModel> {
        self.noise.build(self.n_max)
    }

    /// The policy-side view for policy `i`.
    pub fn session(&self, i: usize) -> Result<SessionConfig> {
        let policy = self
            .policies
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no policy at index {i}")))?;
        Ok(SessionConfig {
            n: self.n,
            q: self.q_hat.clone().unwrap_or_else(|| self.q.clone()),
            noise: self.noise_hat.clone().unwrap_or_else(|| self.noise.clone()),
            k: self.k,
            n_max: self.n_max,
            policy: policy.clone(),
            assay: self.assay.clone(),
            smc: self.smc.clone(),
            decoder: self.decoder.clone(),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let cfg: SimulationConfig = serde_json::from_str(r#"{"policies": ["random"]}"#).unwrap();
        assert_eq!((cfg.n, cfg.k, cfg.cycles, cfg.n_max), (70, 8, 5, 10));
        assert_eq!(cfg.q, RateSpec::Uniform(0.05));
        assert_eq!(cfg.thresholds, vec![0.03, 0.10]);
        cfg.validate().unwrap();
        let noise = cfg.truth_noise().unwrap();
        assert_eq!(noise.specificity(10), 0.97);
        assert_eq!(noise.sensitivity(1), 0.85);
    }

    #[test]
    fn misspecified_beliefs_only_affect_session() {
        let cfg: SimulationConfig = serde_json::from_str(
            r#"{"policies": ["dorfman"], "q_hat": 0.08, "noise_hat": {"specificity": 0.97, "sensitivity": 0.78}}"#,
        )
        .unwrap();
        let s = cfg.session(0).unwrap().params().unwrap();
        assert_eq!(s.prior.rate(0), 0.08);
        assert_eq!(s.noise.sensitivity(3), 0.78);
        assert_eq!(cfg.truth_prior().unwrap().rate(0), 0.05);
        assert_eq!(cfg.truth_noise().unwrap().sensitivity(3), 0.85);
    }

    #[test]
    fn rejects_bad_configs() {
        let short = r#"{"policies": ["random"], "noise": {"specificity": [0.9, 0.9], "sensitivity": 0.9}}"#;
        assert!(serde_json::from_str::<SimulationConfig>(short).unwrap().validate().is_err());
        let budget = r#"{"policies": ["random"], "max_tests": 30}"#;
        assert!(serde_json::from_str::<SimulationConfig>(budget).unwrap().validate().is_err());
        assert!(serde_json::from_str::<SimulationConfig>(r#"{"policies": ["random"], "bogus": 1}"#).is_err());
        let none = r#"{"policies": []}"#;
        assert!(serde_json::from_str::<SimulationConfig>(none).unwrap().validate().is_err());
        assert!(serde_json::from_str::<SimulationConfig>(r#"{"policies": ["nope"]}"#).is_err());
    }

    #[test]
    fn size_dependent_tables() {
        let spec: NoiseSpec =
            serde_json::from_str(r#"{"specificity": 0.97, "sensitivity": [0.85, 0.84, 0.83]}"#).unwrap();
        let m = spec.build(3).unwrap();
        assert_eq!(m.sensitivity(2), 0.84);
        assert!(spec.build(4).is_err());
    }
}
