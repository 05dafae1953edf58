//! Simulation harness: draw a ground truth, let a policy test it for a number
//! of cycles through a noisy simulated lab, and score the decoded marginals.

pub mod config;
pub mod metrics;
pub mod session;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DecodeSource;
use crate::error::{Error, Result};
use crate::model::{sample_outcomes, StateVector};

pub use config::{AssaySource, NoiseSpec, RateSpec, SessionConfig, SessionParams, SimulationConfig, SizeRate};
pub use metrics::{frontier, sensitivity_specificity, FrontierPoint, MetricsRow, MetricsTable, CSV_HEADER};
pub use session::{stream, stream_seed, CycleUpdate, RunStreams, Session, SessionStreams};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub groups: Vec<Vec<usize>>,
    pub outcomes: Vec<bool>,
    pub marginal: Vec<f64>,
    pub source: DecodeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge_steps: Option<usize>,
    /// Wall-clock time of the cycle; kept out of exports so they stay
    /// reproducible.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

/// Equality ignores timing.
impl PartialEq for CycleRecord {
    fn eq(&self, other: &Self) -> bool {
        self.cycle == other.cycle
            && self.groups == other.groups
            && self.outcomes == other.outcomes
            && self.marginal == other.marginal
            && self.source == other.source
            && self.bridge_steps == other.bridge_steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: u32,
    pub policy: String,
    pub run: u64,
    pub truth: StateVector,
    pub cycles: Vec<CycleRecord>,
}

impl Trajectory {
    pub const VERSION: u32 = 1;

    pub fn tests_used(&self) -> usize {
        self.cycles.iter().map(|c| c.groups.len()).sum()
    }

    pub fn final_marginal(&self) -> Option<&[f64]> {
        self.cycles.last().map(|c| c.marginal.as_slice())
    }
}

/// Runs policy `policy` of `cfg` once, with the random streams of run `run`.
pub fn run_simulation(cfg: &SimulationConfig, policy: usize, run: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let session_cfg = cfg.session(policy)?;
    run_with_params(cfg, &session_cfg.params()?, &session_cfg.policy.name, run)
}

fn run_with_params(cfg: &SimulationConfig, params: &SessionParams, name: &str, run: u64) -> Result<Trajectory> {
    let truth_prior = cfg.truth_prior()?;
    let truth_noise = cfg.truth_noise()?;
    let RunStreams {
        mut truth,
        mut noise,
        session,
    } = RunStreams::new(cfg.seed, run);
    let x = truth_prior.sample(&mut truth);
    let mut s = Session::new(params.clone(), session)?;
    let mut cycles = Vec::with_capacity(cfg.cycles);
    for _ in 0..cfg.cycles {
        let start = Instant::now();
        let batch = s.propose()?;
        let y = sample_outcomes(&batch, &x, &truth_noise, &mut noise)?;
        let groups = batch.member_lists();
        let outcomes = y.values().to_vec();
        let update = s.observe(batch, y)?;
        cycles.push(CycleRecord {
            cycle: update.cycle,
            groups,
            outcomes,
            marginal: s.marginal().to_vec(),
            source: update.source,
            bridge_steps: update.bridge_steps,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Trajectory {
        version: Trajectory::VERSION,
        policy: name.to_string(),
        run,
        truth: x,
        cycles,
    })
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub metrics: MetricsTable,
    /// Per policy, in run order.
    pub trajectories: Vec<Vec<Trajectory>>,
}

/// `runs` simulations of every policy. Run `i` uses the streams derived from
/// `(cfg.seed, i)`, so results do not depend on `parallelism`.
pub fn run_batch(cfg: &SimulationConfig, runs: usize, parallelism: usize) -> Result<BatchResult> {
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut metrics = MetricsTable::default();
    let mut trajectories = Vec::with_capacity(cfg.policies.len());
    for i in 0..cfg.policies.len() {
        let session_cfg = cfg.session(i)?;
        let params = session_cfg.params()?;
        let name = session_cfg.policy.name.clone();
        let result: Result<Vec<Trajectory>> = pool.install(|| {
            (0..runs as u64)
                .into_par_iter()
                .map(|run| run_with_params(cfg, &params, &name, run))
                .collect()
        });
        let ts = result?;
        metrics.extend(MetricsTable::from_trajectories(&name, &ts, &cfg.thresholds));
        trajectories.push(ts);
    }
    Ok(BatchResult { metrics, trajectories })
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        let line = serde_json::to_string(t).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectories(text: &str) -> Result<Vec<Trajectory>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `metrics.csv` and `trajectories.jsonl` into `dir`.
pub fn export(result: &BatchResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), result.metrics.to_csv())?;
    let file = std::fs::File::create(dir.join("trajectories.jsonl"))?;
    let mut w = std::io::BufWriter::new(file);
    for ts in &result.trajectories {
        write_trajectories(&mut w, ts)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicySpec;
    use crate::posterior::SmcConfig;

    fn small(policies: &[&str]) -> SimulationConfig {
        let mut cfg = SimulationConfig::new(policies.iter().map(|p| PolicySpec::preset(p).unwrap()).collect());
        cfg.n = 12;
        cfg.k = 3;
        cfg.cycles = 3;
        cfg.n_max = 4;
        cfg.q = RateSpec::Uniform(0.1);
        cfg.smc = SmcConfig {
            num_particles: 300,
            ..Default::default()
        };
        cfg
    }

    #[test]
    fn zero_cycles_has_truth_only() {
        let mut cfg = small(&["random"]);
        cfg.cycles = 0;
        let t = run_simulation(&cfg, 0, 0).unwrap();
        assert!(t.cycles.is_empty());
        assert_eq!(t.truth.len(), 12);
    }

    #[test]
    fn one_run_batch_equals_single_run() {
        let cfg = small(&["random", "g_mimax"]);
        let b = run_batch(&cfg, 1, 1).unwrap();
        for i in 0..2 {
            assert_eq!(b.trajectories[i][0], run_simulation(&cfg, i, 0).unwrap());
        }
    }

    #[test]
    fn truth_independent_of_policy_beliefs() {
        let cfg = small(&["dorfman"]);
        let mut other = cfg.clone();
        other.q_hat = Some(RateSpec::Uniform(0.1));
        other.noise_hat = Some(NoiseSpec::constant(0.9, 0.7));
        let a = run_simulation(&cfg, 0, 4).unwrap();
        let b = run_simulation(&other, 0, 4).unwrap();
        assert_eq!(a.truth, b.truth);
        // Dorfman groups ignore noise beliefs, so the lab sees identical groups.
        assert_eq!(a.cycles[0].groups, b.cycles[0].groups);
        assert_eq!(a.cycles[0].outcomes, b.cycles[0].outcomes);
    }

    #[test]
    fn trajectories_round_trip_jsonl() {
        let cfg = small(&["g_mimax"]);
        let b = run_batch(&cfg, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &b.trajectories[0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(read_trajectories(&text).unwrap(), b.trajectories[0]);
    }
}
