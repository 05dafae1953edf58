//! Append-only campaign event log, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use groupwise_core::decoder::DecodeSource;
use groupwise_core::simulator::SessionConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CampaignError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignEvent {
    /// Position in the log, starting at 0 with no gaps.
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub event: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Created {
        id: String,
        config: SessionConfig,
    },
    /// An empty `groups` list means the policy has nothing left to propose.
    Proposed {
        cycle: usize,
        groups: Vec<Vec<usize>>,
    },
    /// `marginal` is the decoded marginal after the update; replay checks it
    /// bit for bit.
    Observed {
        cycle: usize,
        outcomes: Vec<bool>,
        marginal: Vec<f64>,
        source: DecodeSource,
    },
}

impl CampaignEvent {
    pub fn to_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| CampaignError::Corrupt(e.to_string()))
    }
}

/// Writes the first event of a new log; fails if the file already exists.
pub fn create_log(path: &Path, first: &CampaignEvent) -> Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
    write_event(&mut f, first)
}

pub fn append_event(path: &Path, event: &CampaignEvent) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    write_event(&mut f, event)
}

fn write_event(f: &mut File, event: &CampaignEvent) -> Result<()> {
    let mut line = event.to_line()?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

pub fn parse_log(text: &str) -> Result<Vec<CampaignEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CampaignError::Corrupt(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<CampaignEvent>> {
    parse_log(&std::fs::read_to_string(path)?)
}
