//! Campaigns persisted under a data directory: `<id>.events.jsonl` is the
//! append-only log, `<id>.snapshot.json` the latest marginal and particles.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use groupwise_core::simulator::{CycleUpdate, SessionConfig};
use parking_lot::{Mutex, RwLock};

use crate::campaign::{validate_id, Campaign, CampaignView, MarginalOrder, MarginalView, Proposal};
use crate::error::{CampaignError, Result};
use crate::events::{append_event, create_log, read_log, CampaignEvent};

const LOG_SUFFIX: &str = ".events.jsonl";
const SNAPSHOT_SUFFIX: &str = ".snapshot.json";

/// Immutable copy of a campaign's public state.
struct Published {
    view: Arc<CampaignView>,
    events: Arc<Vec<CampaignEvent>>,
}

impl Published {
    fn of(c: &Campaign) -> Self {
        Published {
            view: Arc::new(c.view()),
            events: Arc::new(c.events().to_vec()),
        }
    }
}

struct Entry {
    /// Held for the whole of a command, so commands on one campaign run one
    /// at a time.
    writer: Mutex<Campaign>,
    /// Replaced after every command; readers never wait for a writer.
    published: RwLock<Published>,
}

impl Entry {
    fn new(c: Campaign) -> Self {
        let published = RwLock::new(Published::of(&c));
        Entry {
            writer: Mutex::new(c),
            published,
        }
    }

    fn publish(&self, c: &Campaign) {
        *self.published.write() = Published::of(c);
    }
}

pub struct CampaignStore {
    dir: PathBuf,
    campaigns: RwLock<HashMap<String, Arc<Entry>>>,
}

impl CampaignStore {
    /// Opens `dir`, creating it if needed, and replays every log found there.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut campaigns = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(LOG_SUFFIX) else {
                continue;
            };
            let c = Campaign::replay(&read_log(&path)?)
                .map_err(|e| CampaignError::Corrupt(format!("{}: {e}", path.display())))?;
            if c.id() != id {
                return Err(CampaignError::Corrupt(format!(
                    "{} holds campaign {:?}",
                    path.display(),
                    c.id()
                )));
            }
            campaigns.insert(id.to_string(), Arc::new(Entry::new(c)));
        }
        Ok(CampaignStore {
            dir,
            campaigns: RwLock::new(campaigns),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}{LOG_SUFFIX}"))
    }

    pub fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}{SNAPSHOT_SUFFIX}"))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.campaigns.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Creates a campaign under `id`, or a fresh random id.
    pub fn create(&self, id: Option<String>, config: SessionConfig) -> Result<CampaignView> {
        let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        validate_id(&id)?;
        if self.campaigns.read().contains_key(&id) {
            return Err(CampaignError::Conflict(format!("campaign {id:?} already exists")));
        }
        let c = Campaign::create(&id, config, Utc::now())?;
        let mut map = self.campaigns.write();
        if map.contains_key(&id) {
            return Err(CampaignError::Conflict(format!("campaign {id:?} already exists")));
        }
        create_log(&self.log_path(&id), &c.events()[0]).map_err(|e| match e {
            CampaignError::Io(io) if io.kind() == std::io::ErrorKind::AlreadyExists => {
                CampaignError::Conflict(format!("campaign {id:?} already exists"))
            }
            other => other,
        })?;
        let entry = Arc::new(Entry::new(c));
        let view = entry.published.read().view.as_ref().clone();
        map.insert(id, entry);
        Ok(view)
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>> {
        self.campaigns
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| CampaignError::NotFound(id.to_string()))
    }

    pub fn view(&self, id: &str) -> Result<Arc<CampaignView>> {
        Ok(self.entry(id)?.published.read().view.clone())
    }

    pub fn marginal(&self, id: &str, order: MarginalOrder) -> Result<MarginalView> {
        let view = self.view(id)?;
        Ok(MarginalView::new(view.cycle, &view.marginal, order))
    }

    pub fn events(&self, id: &str) -> Result<Arc<Vec<CampaignEvent>>> {
        Ok(self.entry(id)?.published.read().events.clone())
    }

    pub fn propose(&self, id: &str) -> Result<Proposal> {
        let entry = self.entry(id)?;
        let mut c = entry.writer.lock();
        let path = self.log_path(id);
        let out = c.propose_with(Utc::now(), |e| append_event(&path, e));
        entry.publish(&c);
        out
    }

    pub fn submit(&self, id: &str, outcomes: &[bool], expected_seq: Option<u64>) -> Result<(CycleUpdate, CampaignView)> {
        let entry = self.entry(id)?;
        let mut c = entry.writer.lock();
        let path = self.log_path(id);
        let out = c.submit_with(outcomes, expected_seq, Utc::now(), |e| append_event(&path, e));
        entry.publish(&c);
        let update = out?;
        self.write_snapshot(&c)?;
        Ok((update, c.view()))
    }

    fn write_snapshot(&self, c: &Campaign) -> Result<()> {
        let path = self.snapshot_path(c.id());
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(&c.snapshot()).map_err(|e| CampaignError::Corrupt(e.to_string()))?;
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
