//! Live adaptive group-testing campaigns: an event-sourced state machine,
//! its on-disk store, the HTTP API and the command-line helpers.

pub mod api;
pub mod campaign;
pub mod commands;
pub mod error;
pub mod events;
pub mod store;

pub use campaign::{Campaign, CampaignView, MarginalOrder, MarginalView, Proposal, Status};
pub use error::{CampaignError, FieldError};
pub use events::{CampaignEvent, EventKind};
pub use store::CampaignStore;
