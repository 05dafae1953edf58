//! Work behind the command-line tools, kept here so it can be tested.

use std::io::{BufRead, Write};

use groupwise_core::decoder::{hybrid_decode_with, smc_marginal_from_prior, DecodeSource, HybridConfig};
use groupwise_core::model::Prior;
use groupwise_core::policies::parse_test_records;
use groupwise_core::posterior::SmcConfig;
use groupwise_core::simulator::{stream, NoiseSpec};
use serde::Serialize;

use crate::campaign::{CampaignView, MarginalOrder, MarginalView, Status};
use crate::error::CampaignError;
use crate::store::CampaignStore;

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    /// Population size; one past the largest index when absent.
    pub n: Option<usize>,
    pub q: f64,
    pub noise: NoiseSpec,
    /// Largest group size the noise model covers; the largest recorded group
    /// when absent.
    pub n_max: Option<usize>,
    pub decoder: HybridConfig,
    pub smc: SmcConfig,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            n: None,
            q: 0.05,
            noise: NoiseSpec::default(),
            n_max: None,
            decoder: HybridConfig::default(),
            smc: SmcConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeReport {
    pub marginal: Vec<f64>,
    pub source: DecodeSource,
    pub lbp_iterations: usize,
    pub tests: usize,
}

/// Hybrid decode of recorded tests (`members outcome` per line). The
/// particle fallback draws from the decoder stream of run 0 under `seed`.
pub fn decode_records(text: &str, opts: &DecodeOptions) -> groupwise_core::Result<DecodeReport> {
    let (batch, outcomes) = parse_test_records(text, opts.n)?;
    let n = opts.n.unwrap_or_else(|| batch.groups().first().map_or(0, |g| g.population()));
    if n == 0 {
        return Err(groupwise_core::Error::InvalidArgument("no tests recorded".into()));
    }
    let n_max = opts.n_max.unwrap_or(batch.max_group_size()).max(1);
    if batch.max_group_size() > n_max {
        return Err(groupwise_core::Error::InvalidArgument(format!(
            "a recorded group has {} members but n_max is {n_max}",
            batch.max_group_size()
        )));
    }
    let noise = opts.noise.build(n_max)?;
    let prior = Prior::uniform(n, opts.q)?;
    let mut rng = stream(opts.seed, 0, "decoder");
    let out = hybrid_decode_with(&batch, &outcomes, &noise, &prior, &opts.decoder, || {
        smc_marginal_from_prior(&batch, &outcomes, &noise, &prior, &opts.smc, &mut rng)
    })?;
    Ok(DecodeReport {
        marginal: out.marginal,
        source: out.source,
        lbp_iterations: out.lbp.iterations,
        tests: batch.len(),
    })
}

/// Parses one line of lab results: `k` tokens among `0 1 - + n p neg pos
/// false true` separated by spaces or commas, or a single run of `k` digits.
pub fn parse_outcome_line(line: &str, k: usize) -> Result<Vec<bool>, String> {
    let tokens: Vec<&str> = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .collect();
    let tokens: Vec<String> = match tokens.as_slice() {
        [one] if k > 1 && one.len() == k && one.chars().all(|c| c == '0' || c == '1') => {
            one.chars().map(String::from).collect()
        }
        _ => tokens.iter().map(|t| t.to_ascii_lowercase()).collect(),
    };
    let bits = tokens
        .iter()
        .map(|t| match t.as_str() {
            "0" | "-" | "n" | "neg" | "false" => Ok(false),
            "1" | "+" | "p" | "pos" | "true" => Ok(true),
            other => Err(format!("cannot read {other:?} as an outcome")),
        })
        .collect::<Result<Vec<bool>, String>>()?;
    if bits.len() != k {
        return Err(format!("expected {k} outcomes, got {}", bits.len()));
    }
    Ok(bits)
}

fn print_marginal<W: Write>(out: &mut W, view: &CampaignView, top: usize) -> std::io::Result<()> {
    let m = MarginalView::new(view.cycle, &view.marginal, MarginalOrder::Desc);
    writeln!(out, "highest marginals after cycle {}:", view.cycle)?;
    for e in m.entries.iter().take(top) {
        writeln!(out, "  {:>5}  {:.4}", e.individual, e.probability)?;
    }
    Ok(())
}

/// Interactive loop on one stored campaign: propose, read one line of
/// outcomes, submit, repeat. Ends on `q`, end of input or exhaustion.
pub fn run_step_loop<R: BufRead, W: Write>(store: &CampaignStore, id: &str, mut input: R, mut out: W) -> anyhow::Result<()> {
    loop {
        let view = store.view(id)?;
        match view.status {
            Status::Exhausted => {
                writeln!(out, "campaign {id} is exhausted after {} tests", view.tests_used)?;
                return Ok(());
            }
            Status::ReadyToPropose => {
                let p = store.propose(id)?;
                if p.groups.is_empty() {
                    continue;
                }
            }
            Status::AwaitingResults => {}
        }
        let view = store.view(id)?;
        let Some(p) = &view.pending else {
            continue;
        };
        writeln!(out, "cycle {}: test these {} groups", p.cycle, p.groups.len())?;
        for (j, g) in p.groups.iter().enumerate() {
            let members: Vec<String> = g.iter().map(|i| i.to_string()).collect();
            writeln!(out, "  group {:>2}: {}", j + 1, members.join(","))?;
        }
        loop {
            write!(out, "outcomes for {} groups (or q to quit): ", p.groups.len())?;
            out.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 || line.trim() == "q" {
                writeln!(out)?;
                return Ok(());
            }
            let bits = match parse_outcome_line(&line, p.groups.len()) {
                Ok(b) => b,
                Err(msg) => {
                    writeln!(out, "{msg}")?;
                    continue;
                }
            };
            match store.submit(id, &bits, Some(p.seq)) {
                Ok((_, view)) => {
                    print_marginal(&mut out, &view, 10)?;
                    break;
                }
                Err(e @ (CampaignError::Invalid(_) | CampaignError::Degenerate(_))) => {
                    writeln!(out, "rejected: {e}")?;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_lines() {
        assert_eq!(parse_outcome_line("0 1 1", 3).unwrap(), [false, true, true]);
        assert_eq!(parse_outcome_line("0,1, +", 3).unwrap(), [false, true, true]);
        assert_eq!(parse_outcome_line("011", 3).unwrap(), [false, true, true]);
        assert_eq!(parse_outcome_line("neg POS", 2).unwrap(), [false, true]);
        assert_eq!(parse_outcome_line("1", 1).unwrap(), [true]);
        assert!(parse_outcome_line("0 1", 3).is_err());
        assert!(parse_outcome_line("0 x 1", 3).is_err());
    }

    #[test]
    fn decode_disjoint_tests_matches_closed_form() {
        // Two disjoint singleton tests: the posterior of each is Bayes' rule.
        let opts = DecodeOptions {
            q: 0.1,
            noise: NoiseSpec::constant(0.9, 0.8),
            ..Default::default()
        };
        let r = decode_records("0 1\n1 0\n", &opts).unwrap();
        assert_eq!(r.source, DecodeSource::Lbp);
        let pos = 0.1 * 0.8 / (0.1 * 0.8 + 0.9 * 0.1);
        let neg = 0.1 * 0.2 / (0.1 * 0.2 + 0.9 * 0.9);
        assert!((r.marginal[0] - pos).abs() < 1e-9);
        assert!((r.marginal[1] - neg).abs() < 1e-9);
    }

    #[test]
    fn decode_rejects_oversized_groups() {
        let opts = DecodeOptions {
            n_max: Some(1),
            ..Default::default()
        };
        assert!(decode_records("0,1 1\n", &opts).is_err());
        assert!(decode_records("# nothing\n", &DecodeOptions::default()).is_err());
    }
}
