//! Campaign state machine. The state is a fold over the event log: every
//! command is first computed on a copy, then persisted, then committed.

use chrono::{DateTime, Utc};
use groupwise_core::decoder::{DecodeSource, HybridConfig};
use groupwise_core::model::{GroupBatch, TestOutcomes, MAX_POPULATION};
use groupwise_core::posterior::PosteriorSnapshot;
use groupwise_core::simulator::{CycleUpdate, Session, SessionConfig, SessionStreams};
use serde::{Deserialize, Serialize};

use crate::error::{CampaignError, FieldError, Result};
use crate::events::{CampaignEvent, EventKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    ReadyToPropose,
    AwaitingResults,
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Sequence number of the proposal event; results may quote it to guard
    /// against stale submissions.
    pub seq: u64,
    pub cycle: usize,
    pub groups: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleView {
    pub cycle: usize,
    pub groups: Vec<Vec<usize>>,
    pub outcomes: Vec<bool>,
    pub marginal: Vec<f64>,
    pub source: DecodeSource,
}

/// Read-only public state of a campaign.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignView {
    pub id: String,
    pub status: Status,
    pub policy: String,
    pub n: usize,
    pub k: usize,
    pub n_max: usize,
    /// Completed cycles.
    pub cycle: usize,
    pub tests_used: usize,
    pub next_seq: u64,
    pub marginal: Vec<f64>,
    pub pending: Option<Proposal>,
    pub history: Vec<CycleView>,
    pub flag: Option<String>,
    pub config: SessionConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalOrder {
    #[default]
    Index,
    Desc,
    Asc,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalEntry {
    pub individual: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalView {
    pub cycle: usize,
    pub order: MarginalOrder,
    pub entries: Vec<MarginalEntry>,
}

impl MarginalView {
    /// Sorting is stable, so ties keep index order.
    pub fn new(cycle: usize, marginal: &[f64], order: MarginalOrder) -> Self {
        let mut entries: Vec<MarginalEntry> = marginal
            .iter()
            .enumerate()
            .map(|(individual, &probability)| MarginalEntry { individual, probability })
            .collect();
        match order {
            MarginalOrder::Index => {}
            MarginalOrder::Desc => entries.sort_by(|a, b| b.probability.total_cmp(&a.probability)),
            MarginalOrder::Asc => entries.sort_by(|a, b| a.probability.total_cmp(&b.probability)),
        }
        MarginalView { cycle, order, entries }
    }
}

/// Persisted after each accepted result batch; the log stays authoritative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSnapshot {
    pub version: u32,
    pub id: String,
    pub seq: u64,
    pub cycle: usize,
    pub marginal: Vec<f64>,
    pub posterior: Option<PosteriorSnapshot>,
}

impl CampaignSnapshot {
    pub const VERSION: u32 = 1;
}

pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(CampaignError::invalid(
            Some("id"),
            "must be 1 to 64 characters from [A-Za-z0-9_-]",
        ))
    }
}

fn check_decoder(d: &HybridConfig) -> std::result::Result<(), String> {
    if d.max_iter == 0 || !(d.tol > 0.0) {
        return Err("max_iter must be at least 1 and tol positive".into());
    }
    Ok(())
}

/// Field-level problems with `cfg`; empty when it can start a campaign.
pub fn diagnose(cfg: &SessionConfig) -> Vec<FieldError> {
    let mut out = Vec::new();
    let mut check = |field: &str, r: std::result::Result<(), String>| {
        if let Err(message) = r {
            out.push(FieldError::new(Some(field), message));
        }
    };
    let n_ok = cfg.n >= 1 && cfg.n <= MAX_POPULATION;
    check(
        "n",
        if n_ok { Ok(()) } else { Err(format!("must be in 1..={MAX_POPULATION}")) },
    );
    check("k", if cfg.k >= 1 { Ok(()) } else { Err("must be at least 1".into()) });
    check(
        "n_max",
        if cfg.n_max >= 1 { Ok(()) } else { Err("must be at least 1".into()) },
    );
    if n_ok {
        check("q", cfg.q.build(cfg.n).map(|_| ()).map_err(|e| e.to_string()));
    }
    if cfg.n_max >= 1 {
        check("noise", cfg.noise.build(cfg.n_max).map(|_| ()).map_err(|e| e.to_string()));
    }
    check("policy", cfg.policy.validate().map_err(|e| e.to_string()));
    if cfg.policy.needs_assay() && cfg.assay.is_none() {
        check("assay", Err(format!("policy {:?} runs a fixed assay but none is configured", cfg.policy.name)));
    }
    if let (Some(a), true) = (&cfg.assay, n_ok && cfg.n_max >= 1) {
        check("assay", a.load(cfg.n, cfg.n_max).map(|_| ()).map_err(|e| e.to_string()));
    }
    check("smc", cfg.smc.validate().map_err(|e| e.to_string()));
    check("decoder", check_decoder(&cfg.decoder));
    out
}

#[derive(Clone, Debug)]
pub struct Campaign {
    id: String,
    config: SessionConfig,
    session: Session,
    events: Vec<CampaignEvent>,
    pending: Option<(Proposal, GroupBatch)>,
    status: Status,
    history: Vec<CycleView>,
    flag: Option<String>,
}

impl Campaign {
    /// A fresh campaign and its creation event. The session uses the random
    /// streams of simulator run 0 under the configured seed.
    pub fn create(id: &str, config: SessionConfig, now: DateTime<Utc>) -> Result<Self> {
        validate_id(id)?;
        let problems = diagnose(&config);
        if !problems.is_empty() {
            return Err(CampaignError::Invalid(problems));
        }
        let session = config
            .params()
            .and_then(|p| Session::new(p, SessionStreams::new(config.seed, 0)))
            .map_err(|e| CampaignError::invalid(None, e.to_string()))?;
        let created = CampaignEvent {
            seq: 0,
            timestamp: now,
            event: EventKind::Created {
                id: id.to_string(),
                config: config.clone(),
            },
        };
        Ok(Campaign {
            id: id.to_string(),
            config,
            session,
            events: vec![created],
            pending: None,
            status: Status::ReadyToPropose,
            history: Vec::new(),
            flag: None,
        })
    }

    /// Rebuilds a campaign by re-running every command of `events`, checking
    /// that each recomputed event matches the logged one.
    pub fn replay(events: &[CampaignEvent]) -> Result<Self> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| CampaignError::Corrupt("empty log".into()))?;
        let EventKind::Created { id, config } = &first.event else {
            return Err(CampaignError::Corrupt("log does not start with a creation event".into()));
        };
        if first.seq != 0 {
            return Err(CampaignError::Corrupt("first event must have seq 0".into()));
        }
        let mut c = Campaign::create(id, config.clone(), first.timestamp)?;
        for logged in rest {
            let mut recomputed = None;
            let record = |e: &CampaignEvent| {
                recomputed = Some(e.clone());
                Ok(())
            };
            match &logged.event {
                EventKind::Created { .. } => {
                    return Err(CampaignError::Corrupt(format!("second creation event at seq {}", logged.seq)))
                }
                EventKind::Proposed { .. } => {
                    c.propose_with(logged.timestamp, record)?;
                }
                EventKind::Observed { outcomes, .. } => {
                    c.submit_with(outcomes, None, logged.timestamp, record)?;
                }
            }
            if recomputed.as_ref() != Some(logged) || !bit_equal(recomputed.as_ref(), logged) {
                return Err(CampaignError::Corrupt(format!(
                    "event {} does not match its recomputation",
                    logged.seq
                )));
            }
        }
        Ok(c)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn events(&self) -> &[CampaignEvent] {
        &self.events
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn marginal(&self) -> &[f64] {
        self.session.marginal()
    }

    pub fn pending(&self) -> Option<&Proposal> {
        self.pending.as_ref().map(|(p, _)| p)
    }

    pub fn flag(&self) -> Option<&str> {
        self.flag.as_deref()
    }

    fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    /// Asks the policy for the next batch. An empty batch moves the campaign
    /// to `Exhausted`.
    pub fn propose_with<F>(&mut self, now: DateTime<Utc>, persist: F) -> Result<Proposal>
    where
        F: FnOnce(&CampaignEvent) -> Result<()>,
    {
        match self.status {
            Status::ReadyToPropose => {}
            Status::AwaitingResults => {
                return Err(CampaignError::Conflict(
                    "results for the pending batch have not been submitted".into(),
                ))
            }
            Status::Exhausted => return Err(CampaignError::Conflict("the policy has no more groups to propose".into())),
        }
        let mut session = self.session.clone();
        let batch = session.propose()?;
        let proposal = Proposal {
            seq: self.next_seq(),
            cycle: session.cycle() + 1,
            groups: batch.member_lists(),
        };
        let event = CampaignEvent {
            seq: proposal.seq,
            timestamp: now,
            event: EventKind::Proposed {
                cycle: proposal.cycle,
                groups: proposal.groups.clone(),
            },
        };
        persist(&event)?;
        self.session = session;
        self.events.push(event);
        if batch.is_empty() {
            self.status = Status::Exhausted;
        } else {
            self.status = Status::AwaitingResults;
            self.pending = Some((proposal.clone(), batch));
        }
        Ok(proposal)
    }

    /// Records outcomes for the pending batch, in batch order. `expected_seq`,
    /// when given, must name the pending proposal.
    pub fn submit_with<F>(
        &mut self,
        outcomes: &[bool],
        expected_seq: Option<u64>,
        now: DateTime<Utc>,
        persist: F,
    ) -> Result<CycleUpdate>
    where
        F: FnOnce(&CampaignEvent) -> Result<()>,
    {
        let Some((proposal, batch)) = &self.pending else {
            return Err(CampaignError::Conflict("no batch is awaiting results".into()));
        };
        if let Some(seq) = expected_seq {
            if seq != proposal.seq {
                return Err(CampaignError::Conflict(format!(
                    "results refer to proposal {seq} but the pending proposal is {}",
                    proposal.seq
                )));
            }
        }
        if outcomes.len() != batch.len() {
            return Err(CampaignError::invalid(
                Some("outcomes"),
                format!("expected {} outcomes, got {}", batch.len(), outcomes.len()),
            ));
        }
        let mut session = self.session.clone();
        let update = match session.observe(batch.clone(), TestOutcomes::new(outcomes.to_vec())) {
            Ok(u) => u,
            Err(groupwise_core::Error::DegenerateEvidence { context }) => {
                self.flag = Some(context.clone());
                return Err(CampaignError::Degenerate(context));
            }
            Err(e) => return Err(e.into()),
        };
        let event = CampaignEvent {
            seq: self.next_seq(),
            timestamp: now,
            event: EventKind::Observed {
                cycle: update.cycle,
                outcomes: outcomes.to_vec(),
                marginal: session.marginal().to_vec(),
                source: update.source,
            },
        };
        persist(&event)?;
        self.history.push(CycleView {
            cycle: update.cycle,
            groups: proposal.groups.clone(),
            outcomes: outcomes.to_vec(),
            marginal: session.marginal().to_vec(),
            source: update.source,
        });
        self.session = session;
        self.events.push(event);
        self.pending = None;
        self.status = Status::ReadyToPropose;
        self.flag = None;
        Ok(update)
    }

    pub fn propose(&mut self) -> Result<Proposal> {
        self.propose_with(Utc::now(), |_| Ok(()))
    }

    pub fn submit(&mut self, outcomes: &[bool]) -> Result<CycleUpdate> {
        self.submit_with(outcomes, None, Utc::now(), |_| Ok(()))
    }

    pub fn view(&self) -> CampaignView {
        CampaignView {
            id: self.id.clone(),
            status: self.status,
            policy: self.config.policy.name.clone(),
            n: self.config.n,
            k: self.config.k,
            n_max: self.config.n_max,
            cycle: self.session.cycle(),
            tests_used: self.session.tests_used(),
            next_seq: self.next_seq(),
            marginal: self.marginal().to_vec(),
            pending: self.pending().cloned(),
            history: self.history.clone(),
            flag: self.flag.clone(),
            config: self.config.clone(),
        }
    }

    pub fn marginal_view(&self, order: MarginalOrder) -> MarginalView {
        MarginalView::new(self.session.cycle(), self.marginal(), order)
    }

    pub fn snapshot(&self) -> CampaignSnapshot {
        CampaignSnapshot {
            version: CampaignSnapshot::VERSION,
            id: self.id.clone(),
            seq: self.next_seq() - 1,
            cycle: self.session.cycle(),
            marginal: self.marginal().to_vec(),
            posterior: self.session.posterior().map(|p| p.to_snapshot()),
        }
    }
}

/// `PartialEq` on floats treats `0.0 == -0.0`; replay demands identical bits.
fn bit_equal(a: Option<&CampaignEvent>, b: &CampaignEvent) -> bool {
    match (a.map(|e| &e.event), &b.event) {
        (Some(EventKind::Observed { marginal: x, .. }), EventKind::Observed { marginal: y, .. }) => {
            x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use groupwise_core::policies::PolicySpec;
    use groupwise_core::posterior::SmcConfig;
    use groupwise_core::simulator::{NoiseSpec, RateSpec};

    fn config(policy: &str, n: usize) -> SessionConfig {
        SessionConfig {
            n,
            q: RateSpec::Uniform(0.1),
            noise: NoiseSpec::constant(0.97, 0.85),
            k: 2,
            n_max: 3,
            policy: PolicySpec::preset(policy).unwrap(),
            assay: None,
            smc: SmcConfig {
                num_particles: 400,
                ..Default::default()
            },
            decoder: Default::default(),
            seed: 5,
        }
    }

    #[test]
    fn fresh_campaign_shows_prior() {
        let c = Campaign::create("a", config("g_mimax", 6), Utc::now()).unwrap();
        assert_eq!(c.status(), Status::ReadyToPropose);
        assert_eq!(c.marginal(), &[0.1; 6]);
        assert_eq!(c.events().len(), 1);
    }

    #[test]
    fn rejects_bad_ids_and_configs() {
        assert!(matches!(
            Campaign::create("a b", config("random", 6), Utc::now()),
            Err(CampaignError::Invalid(_))
        ));
        let mut cfg = config("random", 6);
        cfg.noise = NoiseSpec {
            specificity: groupwise_core::simulator::SizeRate::Table(vec![0.9, 0.9]),
            sensitivity: groupwise_core::simulator::SizeRate::Constant(0.8),
        };
        cfg.k = 0;
        let Err(CampaignError::Invalid(fields)) = Campaign::create("a", cfg, Utc::now()) else {
            panic!("expected field errors");
        };
        let names: Vec<_> = fields.iter().filter_map(|f| f.field.as_deref()).collect();
        assert_eq!(names, ["k", "noise"]);
    }

    #[test]
    fn status_transitions() {
        let mut c = Campaign::create("a", config("random", 6), Utc::now()).unwrap();
        assert!(matches!(c.submit(&[true, false]), Err(CampaignError::Conflict(_))));
        let p = c.propose().unwrap();
        assert_eq!(p.seq, 1);
        assert_eq!(c.status(), Status::AwaitingResults);
        assert!(matches!(c.propose(), Err(CampaignError::Conflict(_))));
        assert!(matches!(c.submit(&[true]), Err(CampaignError::Invalid(_))));
        assert_eq!(c.events().len(), 2);
        c.submit(&[false, false]).unwrap();
        assert!(matches!(c.submit(&[false, false]), Err(CampaignError::Conflict(_))));
        assert_eq!(c.status(), Status::ReadyToPropose);
        assert_eq!(c.view().history.len(), 1);
    }

    #[test]
    fn stale_sequence_number_is_rejected() {
        let mut c = Campaign::create("a", config("random", 6), Utc::now()).unwrap();
        let p = c.propose().unwrap();
        let r = c.submit_with(&[false, false], Some(p.seq + 1), Utc::now(), |_| Ok(()));
        assert!(matches!(r, Err(CampaignError::Conflict(_))));
        c.submit_with(&[false, false], Some(p.seq), Utc::now(), |_| Ok(())).unwrap();
    }

    #[test]
    fn failed_persistence_leaves_state_untouched() {
        let mut c = Campaign::create("a", config("g_mimax", 6), Utc::now()).unwrap();
        let before = c.view();
        let r = c.propose_with(Utc::now(), |_| Err(CampaignError::Io(std::io::Error::other("disk full"))));
        assert!(r.is_err());
        assert_eq!(c.view(), before);
        // The policy's random stream was not advanced either.
        let mut fresh = Campaign::create("a", config("g_mimax", 6), Utc::now()).unwrap();
        assert_eq!(c.propose().unwrap().groups, fresh.propose().unwrap().groups);
    }

    #[test]
    fn individual_policy_runs_dry() {
        let mut cfg = config("individual", 3);
        cfg.k = 3;
        let mut c = Campaign::create("a", cfg, Utc::now()).unwrap();
        c.propose().unwrap();
        c.submit(&[false, true, false]).unwrap();
        let p = c.propose().unwrap();
        assert!(p.groups.is_empty());
        assert_eq!(c.status(), Status::Exhausted);
        assert!(matches!(c.propose(), Err(CampaignError::Conflict(_))));
    }

    #[test]
    fn replay_reproduces_state() {
        let mut c = Campaign::create("a", config("g_mimax", 6), Utc::now()).unwrap();
        for ys in [[false, true], [true, false]] {
            c.propose().unwrap();
            c.submit(&ys).unwrap();
        }
        c.propose().unwrap();
        let r = Campaign::replay(c.events()).unwrap();
        assert_eq!(r.view(), c.view());
        assert_eq!(r.snapshot(), c.snapshot());
    }

    #[test]
    fn replay_detects_tampering() {
        let mut c = Campaign::create("a", config("random", 6), Utc::now()).unwrap();
        c.propose().unwrap();
        c.submit(&[false, true]).unwrap();
        let mut events = c.events().to_vec();
        if let EventKind::Observed { marginal, .. } = &mut events[2].event {
            marginal[0] += 1e-12;
        }
        assert!(matches!(Campaign::replay(&events), Err(CampaignError::Corrupt(_))));
        let mut events = c.events().to_vec();
        if let EventKind::Proposed { groups, .. } = &mut events[1].event {
            groups.reverse();
        }
        assert!(matches!(Campaign::replay(&events), Err(CampaignError::Corrupt(_))));
    }

    #[test]
    fn marginal_views_sort() {
        let mut c = Campaign::create("a", config("random", 6), Utc::now()).unwrap();
        c.propose().unwrap();
        c.submit(&[true, false]).unwrap();
        let desc = c.marginal_view(MarginalOrder::Desc);
        assert!(desc.entries.windows(2).all(|w| w[0].probability >= w[1].probability));
        let asc = c.marginal_view(MarginalOrder::Asc);
        assert!(asc.entries.windows(2).all(|w| w[0].probability <= w[1].probability));
        let idx = c.marginal_view(MarginalOrder::Index);
        assert!(idx.entries.iter().enumerate().all(|(i, e)| e.individual == i));
    }
}
