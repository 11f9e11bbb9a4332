//! Requestor notifications. The default sink appends one JSON record per
//! notification to an outbox file; an SMTP adapter would implement the same
//! trait.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{Credentials, JobId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NotificationKind {
    Ready,
    Reminder1,
    Reminder2,
    Stopped,
    Delayed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub job_id: JobId,
    pub recipient: String,
    pub ip_address: String,
    pub credentials: Credentials,
    pub kind: NotificationKind,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub sequence: u64,
    pub job_id: JobId,
    pub kind: NotificationKind,
}

#[derive(Debug, thiserror::Error)]
pub enum NotifyError {
    #[error("READY notification for {0} carries no ip address")]
    MissingAddress(JobId),
    #[error("outbox {path}: {source}")]
    Outbox {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sink rejected notification: {0}")]
    Rejected(String),
}

pub trait NotificationSink: Send + Sync {
    fn deliver(&self, n: &Notification) -> Result<DeliveryRecord, NotifyError>;
}

fn check(n: &Notification) -> Result<(), NotifyError> {
    if n.kind == NotificationKind::Ready && n.ip_address.is_empty() {
        return Err(NotifyError::MissingAddress(n.job_id));
    }
    Ok(())
}

/// Appends notifications as JSON lines to a file.
#[derive(Debug)]
pub struct OutboxSink {
    path: PathBuf,
    sequence: Mutex<u64>,
}

impl OutboxSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            sequence: Mutex::new(0),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(path: &Path) -> std::io::Result<Vec<Notification>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect()
    }
}

impl NotificationSink for OutboxSink {
    fn deliver(&self, n: &Notification) -> Result<DeliveryRecord, NotifyError> {
        check(n)?;
        let mut seq = self.sequence.lock();
        let mut line = serde_json::to_string(n).expect("notification serializes");
        line.push('\n');
        let io_err = |source| NotifyError::Outbox {
            path: self.path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        file.write_all(line.as_bytes()).map_err(io_err)?;
        *seq += 1;
        Ok(DeliveryRecord {
            sequence: *seq,
            job_id: n.job_id,
            kind: n.kind,
        })
    }
}

/// Keeps notifications in memory; used by the simulator and tests.
#[derive(Debug, Default)]
pub struct MemorySink {
    delivered: Mutex<Vec<Notification>>,
    fail: bool,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    /// A sink whose every delivery fails.
    pub fn failing() -> Self {
        Self {
            delivered: Mutex::new(Vec::new()),
            fail: true,
        }
    }

    pub fn delivered(&self) -> Vec<Notification> {
        self.delivered.lock().clone()
    }
}

impl NotificationSink for MemorySink {
    fn deliver(&self, n: &Notification) -> Result<DeliveryRecord, NotifyError> {
        check(n)?;
        if self.fail {
            return Err(NotifyError::Rejected("sink configured to fail".into()));
        }
        let mut delivered = self.delivered.lock();
        delivered.push(n.clone());
        Ok(DeliveryRecord {
            sequence: delivered.len() as u64,
            job_id: n.job_id,
            kind: n.kind,
        })
    }
}

impl<T: NotificationSink + ?Sized> NotificationSink for std::sync::Arc<T> {
    fn deliver(&self, n: &Notification) -> Result<DeliveryRecord, NotifyError> {
        (**self).deliver(n)
    }
}
