//! Request statuses and the single table of legal transitions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::JobId;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestStatus {
    New,
    Authorized,
    Unauthorized,
    Processing,
    Processed,
    Deleted,
    Incomplete,
    Assigned,
    Unassigned,
    Live,
    Stopped,
    Reminder1,
    Reminder2,
}

impl RequestStatus {
    pub const ALL: [RequestStatus; 13] = [
        RequestStatus::New,
        RequestStatus::Authorized,
        RequestStatus::Unauthorized,
        RequestStatus::Processing,
        RequestStatus::Processed,
        RequestStatus::Deleted,
        RequestStatus::Incomplete,
        RequestStatus::Assigned,
        RequestStatus::Unassigned,
        RequestStatus::Live,
        RequestStatus::Stopped,
        RequestStatus::Reminder1,
        RequestStatus::Reminder2,
    ];

    /// Statuses in which a request holds a capacity reservation.
    pub fn holds_capacity(self) -> bool {
        matches!(
            self,
            RequestStatus::Assigned
                | RequestStatus::Processing
                | RequestStatus::Live
                | RequestStatus::Reminder1
                | RequestStatus::Reminder2
        )
    }

    /// Statuses in which the lease clock runs.
    pub fn is_leased(self) -> bool {
        matches!(
            self,
            RequestStatus::Live | RequestStatus::Reminder1 | RequestStatus::Reminder2
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RequestStatus::Unauthorized | RequestStatus::Deleted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestStatus::New => "NEW",
            RequestStatus::Authorized => "AUTHORIZED",
            RequestStatus::Unauthorized => "UNAUTHORIZED",
            RequestStatus::Processing => "PROCESSING",
            RequestStatus::Processed => "PROCESSED",
            RequestStatus::Deleted => "DELETED",
            RequestStatus::Incomplete => "INCOMPLETE",
            RequestStatus::Assigned => "ASSIGNED",
            RequestStatus::Unassigned => "UNASSIGNED",
            RequestStatus::Live => "LIVE",
            RequestStatus::Stopped => "STOPPED",
            RequestStatus::Reminder1 => "REMINDER1",
            RequestStatus::Reminder2 => "REMINDER2",
        }
    }
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Progress of one provisioning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubStatus {
    Passed,
    Pending,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    Authorized,
    Rejected,
    Placed,
    Queued,
    CapacityFreed,
    ProvisioningStarted,
    AllStepsPassed,
    StepFailed,
    Reassigned,
    NoAlternativeHost,
    Reminder1,
    Reminder2,
    LeaseExpired,
    UserStopped,
    TeardownConfirmed,
    Archived,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 16] = [
        LifecycleEvent::Authorized,
        LifecycleEvent::Rejected,
        LifecycleEvent::Placed,
        LifecycleEvent::Queued,
        LifecycleEvent::CapacityFreed,
        LifecycleEvent::ProvisioningStarted,
        LifecycleEvent::AllStepsPassed,
        LifecycleEvent::StepFailed,
        LifecycleEvent::Reassigned,
        LifecycleEvent::NoAlternativeHost,
        LifecycleEvent::Reminder1,
        LifecycleEvent::Reminder2,
        LifecycleEvent::LeaseExpired,
        LifecycleEvent::UserStopped,
        LifecycleEvent::TeardownConfirmed,
        LifecycleEvent::Archived,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleEvent::Authorized => "authorized",
            LifecycleEvent::Rejected => "rejected",
            LifecycleEvent::Placed => "placed",
            LifecycleEvent::Queued => "queued",
            LifecycleEvent::CapacityFreed => "capacity_freed",
            LifecycleEvent::ProvisioningStarted => "provisioning_started",
            LifecycleEvent::AllStepsPassed => "all_steps_passed",
            LifecycleEvent::StepFailed => "step_failed",
            LifecycleEvent::Reassigned => "reassigned",
            LifecycleEvent::NoAlternativeHost => "no_alternative_host",
            LifecycleEvent::Reminder1 => "reminder1",
            LifecycleEvent::Reminder2 => "reminder2",
            LifecycleEvent::LeaseExpired => "lease_expired",
            LifecycleEvent::UserStopped => "user_stopped",
            LifecycleEvent::TeardownConfirmed => "teardown_confirmed",
            LifecycleEvent::Archived => "archived",
        }
    }
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

use LifecycleEvent as E;
use RequestStatus as S;

/// Every legal (from, event, to) edge. Nothing else may change a status.
pub const TRANSITIONS: &[(RequestStatus, LifecycleEvent, RequestStatus)] = &[
    (S::New, E::Authorized, S::Authorized),
    (S::New, E::Rejected, S::Unauthorized),
    (S::Authorized, E::Placed, S::Assigned),
    (S::Authorized, E::Queued, S::Unassigned),
    (S::Unassigned, E::CapacityFreed, S::Assigned),
    (S::Assigned, E::ProvisioningStarted, S::Processing),
    (S::Processing, E::AllStepsPassed, S::Live),
    (S::Processing, E::StepFailed, S::Incomplete),
    (S::Incomplete, E::Reassigned, S::Assigned),
    (S::Incomplete, E::NoAlternativeHost, S::Unassigned),
    (S::Live, E::Reminder1, S::Reminder1),
    (S::Reminder1, E::Reminder2, S::Reminder2),
    (S::Live, E::LeaseExpired, S::Stopped),
    (S::Reminder1, E::LeaseExpired, S::Stopped),
    (S::Reminder2, E::LeaseExpired, S::Stopped),
    (S::Live, E::UserStopped, S::Stopped),
    (S::Reminder1, E::UserStopped, S::Stopped),
    (S::Reminder2, E::UserStopped, S::Stopped),
    (S::Stopped, E::TeardownConfirmed, S::Processed),
    (S::Processed, E::Archived, S::Deleted),
];

pub fn next_status(from: RequestStatus, event: LifecycleEvent) -> Option<RequestStatus> {
    TRANSITIONS
        .iter()
        .find(|(f, e, _)| *f == from && *e == event)
        .map(|(_, _, to)| *to)
}

/// One entry of the append-only transition log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub seq: u64,
    pub job_id: JobId,
    pub from: RequestStatus,
    pub event: LifecycleEvent,
    pub to: RequestStatus,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("log entry {seq} for {job_id}: no {event} edge out of {from}")]
pub struct ReplayError {
    pub seq: u64,
    pub job_id: JobId,
    pub from: RequestStatus,
    pub event: LifecycleEvent,
}

/// Replays a transition log from NEW through the edge table and returns the
/// final status of every job it mentions.
pub fn replay(log: &[TransitionRecord]) -> Result<BTreeMap<JobId, RequestStatus>, ReplayError> {
    let mut statuses = BTreeMap::new();
    for rec in log {
        let from = *statuses.get(&rec.job_id).unwrap_or(&RequestStatus::New);
        let to = next_status(from, rec.event).ok_or(ReplayError {
            seq: rec.seq,
            job_id: rec.job_id,
            from,
            event: rec.event,
        })?;
        statuses.insert(rec.job_id, to);
    }
    Ok(statuses)
}
