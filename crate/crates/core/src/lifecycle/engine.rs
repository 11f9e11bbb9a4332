use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::state::{next_status, LifecycleEvent, RequestStatus, SubStatus, TransitionRecord};
use crate::catalog::{Catalog, DEFAULT_SHARE_PREFIX};
use crate::model::{Credentials, CpuModel, JobId, MemMb, NodeId, RequestType, VmId};
use crate::notify::{Notification, NotificationKind, NotificationSink};
use crate::provisioner::{DriverOutcome, DriverStep, HypervisorDriver, ProvisionPlan};
use crate::registry::{HostRegistry, ReservationToken};
use crate::scheduler::{select_host, PlacementConstraints, PlacementDecision, SchedulerConfig};
use crate::time::Timestamp;

const MAX_REASON: usize = 500;
const MAX_REQUESTOR: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleConfig {
    pub scheduler: SchedulerConfig,
    /// Fraction of the lease elapsed when the first reminder fires.
    pub reminder1_fraction: f64,
    /// Fraction of the lease elapsed when the second reminder fires.
    pub reminder2_fraction: f64,
    pub vm_memory_mb: MemMb,
    pub default_credentials: Credentials,
    pub share_prefix: String,
    pub service_log: String,
    /// How often a refused reservation re-runs selection before queueing.
    pub placement_retries: u32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerConfig::default(),
            reminder1_fraction: 0.75,
            reminder2_fraction: 0.90,
            vm_memory_mb: 1024,
            default_credentials: Credentials::default(),
            share_prefix: DEFAULT_SHARE_PREFIX.to_string(),
            service_log: "vitl.log".to_string(),
            placement_retries: 3,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<(), LifecycleError> {
        let (r1, r2) = (self.reminder1_fraction, self.reminder2_fraction);
        if !(0.0 < r1 && r1 < r2 && r2 < 1.0) {
            return Err(LifecycleError::InvalidRequest(format!(
                "reminder fractions must satisfy 0 < {r1} < {r2} < 1"
            )));
        }
        if self.vm_memory_mb == 0 {
            return Err(LifecycleError::InvalidRequest("vm_memory_mb must be positive".into()));
        }
        if self.default_credentials.username.is_empty() {
            return Err(LifecycleError::InvalidRequest("default username is empty".into()));
        }
        SchedulerConfig::new(self.scheduler.k)
            .map_err(|e| LifecycleError::InvalidRequest(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub requestor: String,
    pub vm_id: VmId,
    pub architecture: CpuModel,
    pub lease_time_hours: u32,
    #[serde(default = "default_request_type")]
    pub request_type: RequestType,
}

fn default_request_type() -> RequestType {
    RequestType::User
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub job_id: JobId,
    pub submitted_at: Timestamp,
    pub assigned_on: Timestamp,
    pub requestor: String,
    pub ip_address: String,
    pub vmx_path: String,
    pub status: RequestStatus,
    pub request_type: RequestType,
    /// Masked; the full token is never stored.
    pub authentication_token: String,
    pub node_id: Option<NodeId>,
    pub log_file_path: String,
    pub vm_id: VmId,
    pub status_copy_vm: SubStatus,
    pub status_vm_up: SubStatus,
    pub status_ip_set: SubStatus,
    pub status_email_sent: SubStatus,
    /// CPU vendor the guest expects.
    pub architecture: CpuModel,
    pub vm_user: String,
    pub status_reason: String,
    pub lease_time_hours: u32,
    pub time_remaining_seconds: u64,
    pub excluded_nodes: BTreeSet<NodeId>,
    pub reservation: Option<ReservationToken>,
    pub attempts: u32,
    pub unique_folder_id: Option<String>,
    pub live_at: Option<Timestamp>,
}

impl RequestRecord {
    pub fn lease_seconds(&self) -> u64 {
        u64::from(self.lease_time_hours) * 3600
    }

    pub fn substatuses(&self) -> [SubStatus; 4] {
        [
            self.status_copy_vm,
            self.status_vm_up,
            self.status_ip_set,
            self.status_email_sent,
        ]
    }

    /// Record-level invariants; returns the first breach.
    pub fn check(&self) -> Result<(), String> {
        if self.time_remaining_seconds > self.lease_seconds() {
            return Err("time remaining exceeds the lease".into());
        }
        if self.status == RequestStatus::Live {
            if self.substatuses().iter().any(|s| *s != SubStatus::Passed) {
                return Err("LIVE with a provisioning step not PASSED".into());
            }
            if self.node_id.is_none() || self.ip_address.is_empty() {
                return Err("LIVE without a host or an ip address".into());
            }
        }
        Ok(())
    }

    fn constraints(&self, vm_memory_mb: MemMb) -> PlacementConstraints {
        PlacementConstraints {
            cpu_model: self.architecture,
            required_mem: vm_memory_mb,
            request_type: self.request_type,
            excluded_nodes: self.excluded_nodes.clone(),
        }
    }

    fn set_sub(&mut self, step: PipelineStep, value: SubStatus) {
        match step {
            PipelineStep::Copy => self.status_copy_vm = value,
            PipelineStep::Boot => self.status_vm_up = value,
            PipelineStep::QueryIp => self.status_ip_set = value,
            PipelineStep::Notify => self.status_email_sent = value,
        }
    }
}

/// The provisioning steps in order; `Notify` is handled by the sink, the
/// rest by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStep {
    Copy,
    Boot,
    QueryIp,
    Notify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseEvent {
    Reminder1,
    Reminder2,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LifecycleError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("image {0} is not in the catalog")]
    UnknownImage(VmId),
    #[error("lease must be at least one hour")]
    InvalidLease,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{job_id} is {from}; no transition for event {event}")]
    IllegalTransition {
        job_id: JobId,
        from: RequestStatus,
        event: LifecycleEvent,
    },
    #[error("{job_id} would break an invariant: {reason}")]
    Invariant { job_id: JobId, reason: String },
}

/// Result of one provisioning step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub step: PipelineStep,
    pub success: bool,
    pub outcome: Option<DriverOutcome>,
    pub duration: Duration,
    pub status: RequestStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub job_id: JobId,
    pub node_id: Option<NodeId>,
    pub status: RequestStatus,
    pub steps: Vec<StepReport>,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntakeOutcome {
    pub record: RequestRecord,
    pub decision: Option<PlacementDecision>,
}

/// Serializable image of the engine's tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineTables {
    pub requests: Vec<RequestRecord>,
    pub queue: Vec<JobId>,
    pub dispatch: Vec<(JobId, Timestamp)>,
    pub events: Vec<TransitionRecord>,
    pub next_job_id: u32,
}

/// The serialized core that owns every request mutation. Callers share it
/// behind a lock; placement (select + reserve) happens inside a single
/// `&mut self` call so no two placements interleave.
pub struct Engine {
    catalog: Arc<Catalog>,
    registry: Arc<HostRegistry>,
    driver: Arc<dyn HypervisorDriver>,
    notifier: Arc<dyn NotificationSink>,
    config: LifecycleConfig,
    tokens: BTreeSet<String>,
    requests: BTreeMap<JobId, RequestRecord>,
    queue: BTreeSet<JobId>,
    dispatch: VecDeque<(JobId, Timestamp)>,
    events: Vec<TransitionRecord>,
    next_job_id: u32,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("requests", &self.requests.len())
            .field("queue", &self.queue)
            .field("events", &self.events.len())
            .finish_non_exhaustive()
    }
}

fn mask_token(token: &str) -> String {
    let tail: String = token
        .chars()
        .rev()
        .take(4)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    format!("****{tail}")
}

fn truncate(mut text: String, max: usize) -> String {
    if let Some((idx, _)) = text.char_indices().nth(max) {
        text.truncate(idx);
    }
    text
}

impl Engine {
    pub fn new(
        catalog: Arc<Catalog>,
        registry: Arc<HostRegistry>,
        driver: Arc<dyn HypervisorDriver>,
        notifier: Arc<dyn NotificationSink>,
        config: LifecycleConfig,
        tokens: impl IntoIterator<Item = String>,
    ) -> Result<Self, LifecycleError> {
        config.validate()?;
        Ok(Self {
            catalog,
            registry,
            driver,
            notifier,
            config,
            tokens: tokens.into_iter().collect(),
            requests: BTreeMap::new(),
            queue: BTreeSet::new(),
            dispatch: VecDeque::new(),
            events: Vec::new(),
            next_job_id: 0,
        })
    }

    pub fn config(&self) -> &LifecycleConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<HostRegistry> {
        &self.registry
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn is_valid_token(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn get(&self, job_id: JobId) -> Option<&RequestRecord> {
        self.requests.get(&job_id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &RequestRecord> {
        self.requests.values()
    }

    pub fn queue(&self) -> Vec<JobId> {
        self.queue.iter().copied().collect()
    }

    pub fn events(&self) -> &[TransitionRecord] {
        &self.events
    }

    pub fn submit_request(
        &mut self,
        req: SubmitRequest,
        now: Timestamp,
    ) -> Result<RequestRecord, LifecycleError> {
        if req.lease_time_hours < 1 {
            return Err(LifecycleError::InvalidLease);
        }
        if req.requestor.trim().is_empty() || req.requestor.chars().count() > MAX_REQUESTOR {
            return Err(LifecycleError::InvalidRequest(format!(
                "requestor must be 1..={MAX_REQUESTOR} characters"
            )));
        }
        if self.catalog.lookup(req.vm_id).is_none() {
            return Err(LifecycleError::UnknownImage(req.vm_id));
        }
        self.next_job_id += 1;
        let job_id = JobId(self.next_job_id);
        let lease_seconds = u64::from(req.lease_time_hours) * 3600;
        let record = RequestRecord {
            job_id,
            submitted_at: now,
            assigned_on: now,
            requestor: req.requestor,
            ip_address: String::new(),
            vmx_path: String::new(),
            status: RequestStatus::New,
            request_type: req.request_type,
            authentication_token: String::new(),
            node_id: None,
            log_file_path: format!("{}#{}", self.config.service_log, job_id),
            vm_id: req.vm_id,
            status_copy_vm: SubStatus::Pending,
            status_vm_up: SubStatus::Pending,
            status_ip_set: SubStatus::Pending,
            status_email_sent: SubStatus::Pending,
            architecture: req.architecture,
            vm_user: self.config.default_credentials.username.clone(),
            status_reason: "submitted".to_string(),
            lease_time_hours: req.lease_time_hours,
            time_remaining_seconds: lease_seconds,
            excluded_nodes: BTreeSet::new(),
            reservation: None,
            attempts: 0,
            unique_folder_id: None,
            live_at: None,
        };
        self.requests.insert(job_id, record.clone());
        Ok(record)
    }

    pub fn authorize(
        &mut self,
        job_id: JobId,
        token: &str,
        now: Timestamp,
    ) -> Result<RequestRecord, LifecycleError> {
        let event = if self.tokens.contains(token) {
            LifecycleEvent::Authorized
        } else {
            LifecycleEvent::Rejected
        };
        self.ensure_edge(job_id, event)?;
        self.record_mut(job_id)?.authentication_token = mask_token(token);
        self.transition(job_id, event, now, "static token check")?;
        Ok(self.requests[&job_id].clone())
    }

    /// Applies one edge of the transition table and nothing else: no
    /// reservation, driver call or notification. The operation methods
    /// below are the normal entry points. Invariant breaches are refused and
    /// leave the record as is.
    pub fn advance_status(
        &mut self,
        job_id: JobId,
        event: LifecycleEvent,
        now: Timestamp,
    ) -> Result<RequestRecord, LifecycleError> {
        self.transition(job_id, event, now, "operator")?;
        Ok(self.requests[&job_id].clone())
    }

    /// Submit, authorize and (if authorized) place in one step.
    pub fn intake(
        &mut self,
        req: SubmitRequest,
        token: &str,
        now: Timestamp,
    ) -> Result<IntakeOutcome, LifecycleError> {
        let record = self.submit_request(req, now)?;
        let record = self.authorize(record.job_id, token, now)?;
        if record.status != RequestStatus::Authorized {
            return Ok(IntakeOutcome {
                record,
                decision: None,
            });
        }
        let decision = self.place(record.job_id, now)?;
        Ok(IntakeOutcome {
            record: self.requests[&record.job_id].clone(),
            decision: Some(decision),
        })
    }

    /// Places an AUTHORIZED request: ASSIGNED on success, otherwise queued.
    pub fn place(&mut self, job_id: JobId, now: Timestamp) -> Result<PlacementDecision, LifecycleError> {
        self.ensure_edge(job_id, LifecycleEvent::Placed)?;
        let constraints = self.requests[&job_id].constraints(self.config.vm_memory_mb);
        match self.select_and_reserve(&constraints) {
            Some((decision, token)) => {
                self.assign(job_id, token, LifecycleEvent::Placed, now)?;
                Ok(decision)
            }
            None => {
                self.enqueue(job_id, LifecycleEvent::Queued, now)?;
                Ok(PlacementDecision::Queue)
            }
        }
    }

    fn select_and_reserve(
        &self,
        c: &PlacementConstraints,
    ) -> Option<(PlacementDecision, ReservationToken)> {
        for _ in 0..=self.config.placement_retries {
            let snapshot = self.registry.snapshot_fleet();
            let decision = select_host(&snapshot, c, &self.config.scheduler);
            let node = decision.node()?;
            if let Ok(token) = self.registry.reserve_capacity(node, c.required_mem) {
                return Some((decision, token));
            }
        }
        None
    }

    fn assign(
        &mut self,
        job_id: JobId,
        token: ReservationToken,
        event: LifecycleEvent,
        now: Timestamp,
    ) -> Result<(), LifecycleError> {
        self.ensure_edge(job_id, event)?;
        let image_path = {
            let vm_id = self.requests[&job_id].vm_id;
            self.catalog
                .lookup(vm_id)
                .map(|i| i.clone_vmx_path)
                .ok_or(LifecycleError::UnknownImage(vm_id))?
        };
        let share_prefix = self.config.share_prefix.clone();
        let rec = self.record_mut(job_id)?;
        rec.attempts += 1;
        let folder = format!("job{:06}-a{}", job_id.0, rec.attempts);
        let file_name = image_path.rsplit('/').next().unwrap_or("clone.vmx");
        rec.vmx_path = format!("{share_prefix}{folder}/{file_name}");
        rec.unique_folder_id = Some(folder);
        rec.node_id = Some(token.node_id);
        rec.reservation = Some(token);
        rec.assigned_on = now;
        rec.ip_address.clear();
        rec.status_copy_vm = SubStatus::Pending;
        rec.status_vm_up = SubStatus::Pending;
        rec.status_ip_set = SubStatus::Pending;
        rec.status_email_sent = SubStatus::Pending;
        self.transition(job_id, event, now, &format!("placed on {}", token.node_id))?;
        self.dispatch.push_back((job_id, now));
        Ok(())
    }

    fn enqueue(&mut self, job_id: JobId, event: LifecycleEvent, now: Timestamp) -> Result<(), LifecycleError> {
        self.transition(job_id, event, now, "no eligible host with capacity")?;
        let rec = self.record_mut(job_id)?;
        rec.node_id = None;
        self.queue.insert(job_id);
        self.notify(job_id, NotificationKind::Delayed, now);
        Ok(())
    }

    /// Jobs that were assigned a host and still need their pipeline run,
    /// with the time they became ready.
    pub fn take_dispatch(&mut self) -> Vec<(JobId, Timestamp)> {
        self.dispatch.drain(..).collect()
    }

    pub fn plan_for(&self, job_id: JobId) -> Result<ProvisionPlan, LifecycleError> {
        let rec = self.requests.get(&job_id).ok_or(LifecycleError::UnknownJob(job_id))?;
        let image = self
            .catalog
            .lookup(rec.vm_id)
            .ok_or(LifecycleError::UnknownImage(rec.vm_id))?;
        let (Some(node), Some(folder), Some(token)) =
            (rec.node_id, rec.unique_folder_id.clone(), rec.reservation)
        else {
            return Err(LifecycleError::InvalidRequest(format!(
                "{job_id} has no active assignment"
            )));
        };
        Ok(ProvisionPlan {
            job_id,
            unique_folder_id: folder,
            image,
            target_node: node,
            credentials: self.config.default_credentials.clone(),
            required_mem: token.mem_mb,
        })
    }

    /// ASSIGNED -> PROCESSING.
    pub fn begin_provisioning(&mut self, job_id: JobId, now: Timestamp) -> Result<ProvisionPlan, LifecycleError> {
        let plan = self.plan_for(job_id)?;
        self.transition(job_id, LifecycleEvent::ProvisioningStarted, now, &plan.unique_folder_id)?;
        Ok(plan)
    }

    /// The next pending step of a PROCESSING request.
    pub fn next_step(&self, job_id: JobId) -> Option<PipelineStep> {
        let rec = self.requests.get(&job_id)?;
        if rec.status != RequestStatus::Processing {
            return None;
        }
        [
            (rec.status_copy_vm, PipelineStep::Copy),
            (rec.status_vm_up, PipelineStep::Boot),
            (rec.status_ip_set, PipelineStep::QueryIp),
            (rec.status_email_sent, PipelineStep::Notify),
        ]
        .into_iter()
        .find(|(s, _)| *s == SubStatus::Pending)
        .map(|(_, step)| step)
    }

    /// Runs the next pending step starting at `at`. Step failures are
    /// reported in the returned value and move the request to INCOMPLETE.
    pub fn execute_step(&mut self, job_id: JobId, at: Timestamp) -> Result<StepReport, LifecycleError> {
        let step = self.next_step(job_id).ok_or_else(|| {
            let from = self.requests.get(&job_id).map(|r| r.status);
            match from {
                Some(from) => LifecycleError::IllegalTransition {
                    job_id,
                    from,
                    event: LifecycleEvent::AllStepsPassed,
                },
                None => LifecycleError::UnknownJob(job_id),
            }
        })?;
        let plan = self.plan_for(job_id)?;

        if step == PipelineStep::Notify {
            let latency = self.driver.notify_latency();
            let done = at + latency;
            let delivered = self.notify(job_id, NotificationKind::Ready, done);
            let status = if delivered {
                let rec = self.record_mut(job_id)?;
                rec.status_email_sent = SubStatus::Passed;
                rec.live_at = Some(done);
                self.transition(job_id, LifecycleEvent::AllStepsPassed, done, "requestor notified")?;
                RequestStatus::Live
            } else {
                self.fail_pipeline(job_id, step, &plan, done, "notification delivery failed")?;
                RequestStatus::Incomplete
            };
            return Ok(StepReport {
                step,
                success: delivered,
                outcome: None,
                duration: latency,
                status,
            });
        }

        let result = match step {
            PipelineStep::Copy => self.driver.copy_clone(&plan, at),
            PipelineStep::Boot => self.driver.boot(&plan, at),
            PipelineStep::QueryIp => self.driver.query_ip(&plan, at),
            PipelineStep::Notify => unreachable!(),
        };
        let outcome = match result {
            Ok(outcome) => outcome,
            Err(e) => DriverOutcome {
                step: match step {
                    PipelineStep::Copy => DriverStep::Copy,
                    PipelineStep::Boot => DriverStep::Boot,
                    _ => DriverStep::QueryIp,
                },
                success: false,
                ip: String::new(),
                detail: format!("driver contract breach: {e}"),
                duration: Duration::ZERO,
            },
        };
        let done = at + outcome.duration;
        let mut success = outcome.success;
        let mut detail = outcome.detail.clone();
        if success && step == PipelineStep::QueryIp && !self.driver.ip_is_valid(&outcome.ip) {
            success = false;
            detail = format!("invalid ip address `{}`", outcome.ip);
        }
        let status = if success {
            let rec = self.record_mut(job_id)?;
            rec.set_sub(step, SubStatus::Passed);
            if step == PipelineStep::QueryIp {
                rec.ip_address.clone_from(&outcome.ip);
            }
            RequestStatus::Processing
        } else {
            self.fail_pipeline(job_id, step, &plan, done, &detail)?;
            RequestStatus::Incomplete
        };
        Ok(StepReport {
            step,
            success,
            duration: outcome.duration,
            outcome: Some(outcome),
            status,
        })
    }

    fn fail_pipeline(
        &mut self,
        job_id: JobId,
        step: PipelineStep,
        plan: &ProvisionPlan,
        at: Timestamp,
        detail: &str,
    ) -> Result<(), LifecycleError> {
        self.record_mut(job_id)?.set_sub(step, SubStatus::Failed);
        if step >= PipelineStep::Boot {
            // teardown never fails in a way that blocks cleanup
            let _ = self.driver.teardown(plan, at);
        }
        self.transition(
            job_id,
            LifecycleEvent::StepFailed,
            at,
            &format!("{step:?} failed on {}: {detail}", plan.target_node),
        )?;
        self.release(job_id, at);
        Ok(())
    }

    /// Runs every remaining step back to back, starting at `start`.
    pub fn run_provision_pipeline(
        &mut self,
        job_id: JobId,
        start: Timestamp,
    ) -> Result<PipelineReport, LifecycleError> {
        let rec = self.requests.get(&job_id).ok_or(LifecycleError::UnknownJob(job_id))?;
        if rec.status == RequestStatus::Assigned {
            self.begin_provisioning(job_id, start)?;
        } else if rec.status != RequestStatus::Processing {
            return Err(LifecycleError::IllegalTransition {
                job_id,
                from: rec.status,
                event: LifecycleEvent::ProvisioningStarted,
            });
        }
        let node_id = self.requests[&job_id].node_id;
        let mut at = start;
        let mut steps = Vec::new();
        while self.next_step(job_id).is_some() {
            let report = self.execute_step(job_id, at)?;
            at += report.duration;
            let done = report.status != RequestStatus::Processing;
            steps.push(report);
            if done {
                break;
            }
        }
        Ok(PipelineReport {
            job_id,
            node_id,
            status: self.requests[&job_id].status,
            steps,
            started_at: start,
            finished_at: at,
        })
    }

    /// Retries an INCOMPLETE request on a different host; the failed host is
    /// excluded for the rest of the request's life.
    pub fn reassign_incomplete(
        &mut self,
        job_id: JobId,
        now: Timestamp,
    ) -> Result<PlacementDecision, LifecycleError> {
        self.ensure_edge(job_id, LifecycleEvent::Reassigned)?;
        let vm_memory = self.config.vm_memory_mb;
        let rec = self.record_mut(job_id)?;
        if let Some(failed) = rec.node_id {
            rec.excluded_nodes.insert(failed);
        }
        let constraints = rec.constraints(vm_memory);
        match self.select_and_reserve(&constraints) {
            Some((decision, token)) => {
                self.assign(job_id, token, LifecycleEvent::Reassigned, now)?;
                Ok(decision)
            }
            None => {
                self.enqueue(job_id, LifecycleEvent::NoAlternativeHost, now)?;
                Ok(PlacementDecision::Queue)
            }
        }
    }

    /// Re-evaluates the waiting queue in job order after capacity was freed.
    /// A request that still cannot be placed does not block later requests
    /// with different constraints.
    pub fn dequeue_on_capacity(&mut self, _freed: NodeId, now: Timestamp) -> Vec<JobId> {
        let mut moved = Vec::new();
        let mut blocked: Vec<PlacementConstraints> = Vec::new();
        let waiting: Vec<JobId> = self.queue.iter().copied().collect();
        for job_id in waiting {
            let constraints = self.requests[&job_id].constraints(self.config.vm_memory_mb);
            if blocked.contains(&constraints) {
                continue;
            }
            match self.select_and_reserve(&constraints) {
                Some((_, token)) => {
                    self.queue.remove(&job_id);
                    if self.assign(job_id, token, LifecycleEvent::CapacityFreed, now).is_ok() {
                        moved.push(job_id);
                    } else {
                        let _ = self.registry.release_capacity(&token);
                    }
                }
                None => blocked.push(constraints),
            }
        }
        moved
    }

    /// Advances every leased request's clock by `elapsed`, firing reminders
    /// and expiry in order. Expired requests are torn down and release
    /// their capacity.
    pub fn tick_leases(&mut self, now: Timestamp, elapsed: Duration) -> Vec<(JobId, LeaseEvent)> {
        let elapsed_s = elapsed.as_secs();
        let leased: Vec<JobId> = self
            .requests
            .values()
            .filter(|r| r.status.is_leased())
            .map(|r| r.job_id)
            .collect();
        let mut emitted = Vec::new();
        for job_id in leased {
            let (remaining, lease) = {
                let rec = self.requests.get_mut(&job_id).expect("listed above");
                rec.time_remaining_seconds = rec.time_remaining_seconds.saturating_sub(elapsed_s);
                (rec.time_remaining_seconds, rec.lease_seconds())
            };
            let first = threshold(lease, self.config.reminder1_fraction);
            let second = threshold(lease, self.config.reminder2_fraction);
            if self.requests[&job_id].status == RequestStatus::Live && remaining <= first {
                if self.transition(job_id, LifecycleEvent::Reminder1, now, "lease reminder").is_ok() {
                    self.notify(job_id, NotificationKind::Reminder1, now);
                    emitted.push((job_id, LeaseEvent::Reminder1));
                }
            }
            if self.requests[&job_id].status == RequestStatus::Reminder1 && remaining <= second {
                if self.transition(job_id, LifecycleEvent::Reminder2, now, "lease reminder").is_ok() {
                    self.notify(job_id, NotificationKind::Reminder2, now);
                    emitted.push((job_id, LeaseEvent::Reminder2));
                }
            }
            if remaining == 0 && self.shutdown(job_id, LifecycleEvent::LeaseExpired, now).is_ok() {
                emitted.push((job_id, LeaseEvent::Expired));
            }
        }
        emitted
    }

    /// User-initiated stop of a running VM.
    pub fn stop_request(&mut self, job_id: JobId, now: Timestamp) -> Result<RequestRecord, LifecycleError> {
        self.shutdown(job_id, LifecycleEvent::UserStopped, now)?;
        Ok(self.requests[&job_id].clone())
    }

    fn shutdown(&mut self, job_id: JobId, event: LifecycleEvent, now: Timestamp) -> Result<(), LifecycleError> {
        self.ensure_edge(job_id, event)?;
        let plan = self.plan_for(job_id).ok();
        self.transition(job_id, event, now, "instance shut down")?;
        if let Some(plan) = plan {
            let _ = self.driver.teardown(&plan, now);
        }
        self.notify(job_id, NotificationKind::Stopped, now);
        self.release(job_id, now);
        Ok(())
    }

    /// STOPPED -> PROCESSED once teardown is confirmed.
    pub fn confirm_teardown(&mut self, job_id: JobId, now: Timestamp) -> Result<RequestRecord, LifecycleError> {
        self.transition(job_id, LifecycleEvent::TeardownConfirmed, now, "resources released")?;
        Ok(self.requests[&job_id].clone())
    }

    /// Confirms teardown of every STOPPED request.
    pub fn confirm_all_stopped(&mut self, now: Timestamp) -> Vec<JobId> {
        let stopped: Vec<JobId> = self
            .requests
            .values()
            .filter(|r| r.status == RequestStatus::Stopped)
            .map(|r| r.job_id)
            .collect();
        stopped
            .into_iter()
            .filter(|j| self.confirm_teardown(*j, now).is_ok())
            .collect()
    }

    pub fn archive(&mut self, job_id: JobId, now: Timestamp) -> Result<RequestRecord, LifecycleError> {
        self.transition(job_id, LifecycleEvent::Archived, now, "archived")?;
        Ok(self.requests[&job_id].clone())
    }

    /// Drives every dispatched pipeline to a resting state on virtual time,
    /// reassigning failed attempts. Returns one report per attempt.
    pub fn drive(&mut self) -> Result<Vec<PipelineReport>, LifecycleError> {
        let mut reports = Vec::new();
        while let Some((job_id, ready)) = self.dispatch.pop_front() {
            if self.requests.get(&job_id).map(|r| r.status) != Some(RequestStatus::Assigned) {
                continue;
            }
            let report = self.run_provision_pipeline(job_id, ready)?;
            if report.status == RequestStatus::Incomplete {
                self.reassign_incomplete(job_id, report.finished_at)?;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Capacity-safety audit: returns every breach found.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let tokens = self.registry.active_reservations();
        for host in self.registry.list() {
            let bound = self
                .requests
                .values()
                .filter(|r| r.status.holds_capacity() && r.node_id == Some(host.node_id))
                .count() as u32;
            if bound != host.runningvms {
                problems.push(format!(
                    "{}: {} requests hold capacity but runningvms = {}",
                    host.node_id, bound, host.runningvms
                ));
            }
            let reserved: MemMb = tokens
                .iter()
                .filter(|t| t.node_id == host.node_id)
                .map(|t| t.mem_mb)
                .sum();
            if host.avail_mem != host.total_mem.saturating_sub(reserved) {
                problems.push(format!("{}: ledger does not balance", host.node_id));
            }
        }
        for rec in self.requests.values() {
            if let Err(e) = rec.check() {
                problems.push(format!("{}: {e}", rec.job_id));
            }
            if let Some(node) = rec.node_id {
                if rec.status.holds_capacity() && rec.excluded_nodes.contains(&node) {
                    problems.push(format!("{} placed on excluded {node}", rec.job_id));
                }
            }
        }
        problems
    }

    pub fn export(&self) -> EngineTables {
        EngineTables {
            requests: self.requests.values().cloned().collect(),
            queue: self.queue.iter().copied().collect(),
            dispatch: self.dispatch.iter().copied().collect(),
            events: self.events.clone(),
            next_job_id: self.next_job_id,
        }
    }

    pub fn import(&mut self, tables: EngineTables) {
        self.requests = tables.requests.into_iter().map(|r| (r.job_id, r)).collect();
        self.queue = tables.queue.into_iter().collect();
        self.dispatch = tables.dispatch.into_iter().collect();
        self.events = tables.events;
        self.next_job_id = tables.next_job_id;
    }

    fn record_mut(&mut self, job_id: JobId) -> Result<&mut RequestRecord, LifecycleError> {
        self.requests.get_mut(&job_id).ok_or(LifecycleError::UnknownJob(job_id))
    }

    fn ensure_edge(&self, job_id: JobId, event: LifecycleEvent) -> Result<RequestStatus, LifecycleError> {
        let from = self
            .requests
            .get(&job_id)
            .ok_or(LifecycleError::UnknownJob(job_id))?
            .status;
        next_status(from, event).ok_or(LifecycleError::IllegalTransition { job_id, from, event })
    }

    fn transition(
        &mut self,
        job_id: JobId,
        event: LifecycleEvent,
        at: Timestamp,
        detail: &str,
    ) -> Result<RequestStatus, LifecycleError> {
        let to = self.ensure_edge(job_id, event)?;
        let rec = self.record_mut(job_id)?;
        let from = rec.status;
        let previous_reason = std::mem::take(&mut rec.status_reason);
        rec.status = to;
        rec.status_reason = truncate(format!("{event}: {detail}"), MAX_REASON);
        if let Err(reason) = rec.check() {
            rec.status = from;
            rec.status_reason = previous_reason;
            return Err(LifecycleError::Invariant { job_id, reason });
        }
        let seq = self.events.len() as u64 + 1;
        self.events.push(TransitionRecord {
            seq,
            job_id,
            from,
            event,
            to,
            at,
        });
        Ok(to)
    }

    fn release(&mut self, job_id: JobId, at: Timestamp) {
        let Some(rec) = self.requests.get_mut(&job_id) else {
            return;
        };
        let Some(token) = rec.reservation.take() else {
            return;
        };
        if self.registry.release_capacity(&token).is_ok() {
            self.dequeue_on_capacity(token.node_id, at);
        }
    }

    /// Delivers a notification; returns whether the sink accepted it.
    fn notify(&self, job_id: JobId, kind: NotificationKind, at: Timestamp) -> bool {
        let Some(rec) = self.requests.get(&job_id) else {
            return false;
        };
        let n = Notification {
            job_id,
            recipient: rec.requestor.clone(),
            ip_address: rec.ip_address.clone(),
            credentials: self.config.default_credentials.clone(),
            kind,
            at,
        };
        self.notifier.deliver(&n).is_ok()
    }
}

/// Remaining seconds at which a reminder for `fraction` of the lease fires.
fn threshold(lease_seconds: u64, fraction: f64) -> u64 {
    (lease_seconds as f64 * (1.0 - fraction)).round() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::tests::image;
    use crate::model::Automation;
    use crate::notify::MemorySink;
    use crate::provisioner::{FaultKind, ScriptedFault, SimDriver, SimDriverConfig};
    use crate::registry::tests::ping;
    use crate::registry::Registration;

    const TOKEN: &str = "secret-token";

    struct Rig {
        engine: Engine,
        registry: Arc<HostRegistry>,
        sink: Arc<MemorySink>,
    }

    fn rig_with(hosts: &[(CpuModel, MemMb, u32)], faults: Vec<ScriptedFault>, sink: MemorySink) -> Rig {
        let catalog = Arc::new(Catalog::default());
        catalog.insert(image(1, "xp")).unwrap();
        let registry = Arc::new(HostRegistry::new());
        for (i, (cpu, total, max)) in hosts.iter().enumerate() {
            let mut p = ping(&format!("10.1.0.{}", i + 1), *total, *total, 0);
            p.cpu_model = *cpu;
            registry
                .register_host(Registration::new(p, Automation::Both, *max))
                .unwrap();
        }
        let driver = SimDriver::new(SimDriverConfig {
            failure_script: faults,
            ..SimDriverConfig::default()
        })
        .unwrap();
        let sink = Arc::new(sink);
        let engine = Engine::new(
            catalog,
            registry.clone(),
            Arc::new(driver),
            sink.clone(),
            LifecycleConfig::default(),
            [TOKEN.to_string()],
        )
        .unwrap();
        Rig {
            engine,
            registry,
            sink,
        }
    }

    fn rig(hosts: &[(CpuModel, MemMb, u32)], faults: Vec<ScriptedFault>) -> Rig {
        rig_with(hosts, faults, MemorySink::new())
    }

    fn req(cpu: CpuModel, hours: u32) -> SubmitRequest {
        SubmitRequest {
            requestor: "alice".into(),
            vm_id: VmId(1),
            architecture: cpu,
            lease_time_hours: hours,
            request_type: RequestType::User,
        }
    }

    fn t(secs: u64) -> Timestamp {
        Timestamp::from_secs(secs)
    }

    const INTEL: CpuModel = CpuModel::Intel;

    #[test]
    fn submission_starts_new_with_pending_steps() {
        let mut r = rig(&[], vec![]);
        let a = r.engine.submit_request(req(INTEL, 2), t(0)).unwrap();
        assert_eq!(a.job_id, JobId(1));
        assert_eq!(a.status, RequestStatus::New);
        assert!(a.substatuses().iter().all(|s| *s == SubStatus::Pending));
        assert_eq!(a.time_remaining_seconds, 7200);
        let b = r.engine.submit_request(req(INTEL, 1), t(1)).unwrap();
        assert!(b.job_id > a.job_id);
    }

    #[test]
    fn submission_guards() {
        let mut r = rig(&[], vec![]);
        let mut bad = req(INTEL, 1);
        bad.vm_id = VmId(9);
        assert_eq!(r.engine.submit_request(bad, t(0)), Err(LifecycleError::UnknownImage(VmId(9))));
        assert_eq!(r.engine.submit_request(req(INTEL, 0), t(0)), Err(LifecycleError::InvalidLease));
        assert_eq!(r.engine.requests().count(), 0);
    }

    #[test]
    fn authorization_outcomes() {
        let mut r = rig(&[], vec![]);
        let a = r.engine.submit_request(req(INTEL, 1), t(0)).unwrap();
        let ok = r.engine.authorize(a.job_id, TOKEN, t(0)).unwrap();
        assert_eq!(ok.status, RequestStatus::Authorized);
        assert_eq!(ok.authentication_token, "****oken");

        let b = r.engine.submit_request(req(INTEL, 1), t(0)).unwrap();
        let denied = r.engine.authorize(b.job_id, "nope", t(0)).unwrap();
        assert_eq!(denied.status, RequestStatus::Unauthorized);
        for event in LifecycleEvent::ALL {
            assert!(r.engine.advance_status(b.job_id, event, t(1)).is_err());
        }
        assert!(matches!(
            r.engine.authorize(a.job_id, TOKEN, t(1)),
            Err(LifecycleError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn happy_path_goes_live_with_ip() {
        let mut r = rig(&[(INTEL, 4096, 2)], vec![]);
        let out = r.engine.intake(req(INTEL, 2), TOKEN, t(0)).unwrap();
        assert_eq!(out.record.status, RequestStatus::Assigned);
        let report = r.engine.run_provision_pipeline(out.record.job_id, t(0)).unwrap();
        assert_eq!(report.status, RequestStatus::Live);
        assert_eq!(report.finished_at, Timestamp::from_secs(81));
        let rec = r.engine.get(out.record.job_id).unwrap();
        assert!(rec.substatuses().iter().all(|s| *s == SubStatus::Passed));
        assert!(rec.ip_address.starts_with("10.20."));
        let ready = r.sink.delivered();
        assert_eq!(ready.len(), 1);
        assert_eq!(ready[0].kind, NotificationKind::Ready);
        assert_eq!(ready[0].ip_address, rec.ip_address);
        assert!(r.engine.audit().is_empty());
    }

    #[test]
    fn boot_failure_marks_step_and_releases() {
        let fault = ScriptedFault::fail(JobId(1), DriverStep::Boot);
        let mut r = rig(&[(INTEL, 4096, 2)], vec![fault]);
        let job = r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap().record.job_id;
        let report = r.engine.run_provision_pipeline(job, t(0)).unwrap();
        assert_eq!(report.status, RequestStatus::Incomplete);
        let rec = r.engine.get(job).unwrap();
        assert_eq!(rec.status_copy_vm, SubStatus::Passed);
        assert_eq!(rec.status_vm_up, SubStatus::Failed);
        assert_eq!(rec.status_ip_set, SubStatus::Pending);
        assert_eq!(rec.status_email_sent, SubStatus::Pending);
        assert!(rec.reservation.is_none());
        let host = r.registry.get(NodeId(1)).unwrap();
        assert_eq!((host.runningvms, host.avail_mem), (0, 4096));
    }

    #[test]
    fn invalid_ip_fails_the_ip_step() {
        let fault = ScriptedFault {
            kind: FaultKind::InvalidIp,
            ..ScriptedFault::fail(JobId(1), DriverStep::QueryIp)
        };
        let mut r = rig(&[(INTEL, 4096, 2)], vec![fault]);
        let job = r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap().record.job_id;
        r.engine.run_provision_pipeline(job, t(0)).unwrap();
        let rec = r.engine.get(job).unwrap();
        assert_eq!(rec.status, RequestStatus::Incomplete);
        assert_eq!(rec.status_ip_set, SubStatus::Failed);
        assert!(rec.status_reason.contains("0.0.0.0"));
    }

    #[test]
    fn sink_failure_fails_the_notify_step() {
        let mut r = rig_with(&[(INTEL, 4096, 2)], vec![], MemorySink::failing());
        let job = r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap().record.job_id;
        let report = r.engine.run_provision_pipeline(job, t(0)).unwrap();
        assert_eq!(report.status, RequestStatus::Incomplete);
        let rec = r.engine.get(job).unwrap();
        assert_eq!(rec.status_email_sent, SubStatus::Failed);
        assert_eq!(rec.status_ip_set, SubStatus::Passed);
    }

    #[test]
    fn reassignment_skips_the_failed_host() {
        // nodes 4 and 7 are the only INTEL hosts
        let amd = (CpuModel::Amd, 4096, 2);
        let intel = (INTEL, 4096, 2);
        let fleet = [amd, amd, amd, intel, amd, amd, intel];
        let faults = vec![
            ScriptedFault::fail(JobId(1), DriverStep::Boot).on_node(NodeId(4)),
            ScriptedFault::fail(JobId(1), DriverStep::Copy).on_node(NodeId(7)),
        ];
        let mut r = rig(&fleet, faults);
        let job = r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap().record.job_id;
        assert_eq!(r.engine.get(job).unwrap().node_id, Some(NodeId(4)));
        r.engine.run_provision_pipeline(job, t(0)).unwrap();
        let d = r.engine.reassign_incomplete(job, t(100)).unwrap();
        assert_eq!(d.node(), Some(NodeId(7)));
        let rec = r.engine.get(job).unwrap();
        assert_eq!(rec.excluded_nodes, BTreeSet::from([NodeId(4)]));
        assert_eq!(rec.job_id, job);
        assert_eq!(rec.attempts, 2);

        r.engine.run_provision_pipeline(job, t(100)).unwrap();
        let d = r.engine.reassign_incomplete(job, t(200)).unwrap();
        assert_eq!(d, PlacementDecision::Queue);
        let rec = r.engine.get(job).unwrap();
        assert_eq!(rec.excluded_nodes, BTreeSet::from([NodeId(4), NodeId(7)]));
        assert_eq!(rec.status, RequestStatus::Unassigned);
        assert_eq!(r.engine.queue(), vec![job]);
        assert!(r.engine.audit().is_empty());
    }

    #[test]
    fn folder_ids_are_fresh_per_attempt() {
        let faults = vec![ScriptedFault::fail(JobId(1), DriverStep::Copy).on_node(NodeId(1))];
        let mut r = rig(&[(INTEL, 4096, 2), (INTEL, 4096, 2)], faults);
        r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap();
        let first = r.engine.get(JobId(1)).unwrap().unique_folder_id.clone();
        r.engine.drive().unwrap();
        let rec = r.engine.get(JobId(1)).unwrap();
        assert_eq!(rec.status, RequestStatus::Live);
        assert_ne!(rec.unique_folder_id, first);
        assert_eq!(rec.node_id, Some(NodeId(2)));
    }

    fn live_job(r: &mut Rig, hours: u32) -> JobId {
        let job = r.engine.intake(req(INTEL, hours), TOKEN, t(0)).unwrap().record.job_id;
        r.engine.drive().unwrap();
        assert_eq!(r.engine.get(job).unwrap().status, RequestStatus::Live);
        job
    }

    #[test]
    fn full_lease_fires_each_event_once() {
        let mut r = rig(&[(INTEL, 4096, 2)], vec![]);
        let job = live_job(&mut r, 1);
        let mut events = Vec::new();
        for i in 1..=60 {
            events.extend(r.engine.tick_leases(t(100 + i * 60), Duration::from_secs(60)));
        }
        let kinds: Vec<LeaseEvent> = events.iter().map(|(_, e)| *e).collect();
        assert_eq!(kinds, vec![LeaseEvent::Reminder1, LeaseEvent::Reminder2, LeaseEvent::Expired]);
        assert!(events.iter().all(|(j, _)| *j == job));
        assert_eq!(r.engine.get(job).unwrap().status, RequestStatus::Stopped);
        let host = r.registry.get(NodeId(1)).unwrap();
        assert_eq!((host.runningvms, host.avail_mem), (0, 4096));
        assert!(r.engine.tick_leases(t(9999), Duration::from_secs(60)).is_empty());
        assert_eq!(
            r.engine.confirm_teardown(job, t(9999)).unwrap().status,
            RequestStatus::Processed
        );
        assert_eq!(r.engine.archive(job, t(9999)).unwrap().status, RequestStatus::Deleted);
    }

    #[test]
    fn two_long_ticks_reach_the_first_threshold_only() {
        let mut r = rig(&[(INTEL, 4096, 2)], vec![]);
        let job = live_job(&mut r, 1);
        assert!(r.engine.tick_leases(t(1500), Duration::from_secs(1350)).is_empty());
        let second = r.engine.tick_leases(t(2900), Duration::from_secs(1350));
        assert_eq!(second, vec![(job, LeaseEvent::Reminder1)]);
        assert_eq!(r.engine.get(job).unwrap().time_remaining_seconds, 900);
    }

    #[test]
    fn one_huge_tick_fires_in_order() {
        let mut r = rig(&[(INTEL, 4096, 2)], vec![]);
        let job = live_job(&mut r, 1);
        let all = r.engine.tick_leases(t(5000), Duration::from_secs(4000));
        assert_eq!(
            all,
            vec![
                (job, LeaseEvent::Reminder1),
                (job, LeaseEvent::Reminder2),
                (job, LeaseEvent::Expired)
            ]
        );
    }

    #[test]
    fn user_stop_releases_and_dequeues_fifo() {
        let mut r = rig(&[(INTEL, 4096, 1)], vec![]);
        let first = live_job(&mut r, 1);
        let a = r.engine.intake(req(INTEL, 1), TOKEN, t(1)).unwrap();
        let b = r.engine.intake(req(INTEL, 1), TOKEN, t(2)).unwrap();
        assert_eq!(a.decision, Some(PlacementDecision::Queue));
        assert_eq!(b.record.status, RequestStatus::Unassigned);
        let delayed = r
            .sink
            .delivered()
            .iter()
            .filter(|n| n.kind == NotificationKind::Delayed)
            .count();
        assert_eq!(delayed, 2);
        r.engine.stop_request(first, t(10)).unwrap();
        assert_eq!(r.engine.get(a.record.job_id).unwrap().status, RequestStatus::Assigned);
        assert_eq!(r.engine.get(b.record.job_id).unwrap().status, RequestStatus::Unassigned);
        assert_eq!(r.engine.queue(), vec![b.record.job_id]);
        assert!(r.engine.audit().is_empty());
    }

    #[test]
    fn incompatible_queued_request_does_not_block() {
        let mut r = rig(&[(INTEL, 4096, 1)], vec![]);
        let first = live_job(&mut r, 1);
        let amd = r.engine.intake(req(CpuModel::Amd, 1), TOKEN, t(1)).unwrap().record.job_id;
        let intel = r.engine.intake(req(INTEL, 1), TOKEN, t(2)).unwrap().record.job_id;
        r.engine.stop_request(first, t(10)).unwrap();
        assert_eq!(r.engine.get(amd).unwrap().status, RequestStatus::Unassigned);
        assert_eq!(r.engine.get(intel).unwrap().status, RequestStatus::Assigned);
    }

    #[test]
    fn live_without_passed_steps_is_refused() {
        let mut r = rig(&[(INTEL, 4096, 1)], vec![]);
        let job = r.engine.intake(req(INTEL, 1), TOKEN, t(0)).unwrap().record.job_id;
        r.engine
            .advance_status(job, LifecycleEvent::ProvisioningStarted, t(1))
            .unwrap();
        let err = r
            .engine
            .advance_status(job, LifecycleEvent::AllStepsPassed, t(2))
            .unwrap_err();
        assert!(matches!(err, LifecycleError::Invariant { .. }));
        assert_eq!(r.engine.get(job).unwrap().status, RequestStatus::Processing);
    }

    #[test]
    fn event_log_replays_to_current_statuses() {
        let faults = vec![ScriptedFault::fail(JobId(2), DriverStep::Boot).on_node(NodeId(1))];
        let mut r = rig(&[(INTEL, 4096, 2), (INTEL, 4096, 1)], faults);
        let a = live_job(&mut r, 1);
        r.engine.intake(req(INTEL, 1), TOKEN, t(3)).unwrap();
        r.engine.intake(req(INTEL, 1), "bad", t(4)).unwrap();
        r.engine.drive().unwrap();
        r.engine.stop_request(a, t(50)).unwrap();
        let replayed = crate::lifecycle::replay(r.engine.events()).unwrap();
        for rec in r.engine.requests() {
            assert_eq!(replayed[&rec.job_id], rec.status, "{}", rec.job_id);
        }
    }

    #[test]
    fn export_import_is_lossless() {
        let mut r = rig(&[(INTEL, 4096, 1)], vec![]);
        live_job(&mut r, 1);
        r.engine.intake(req(INTEL, 1), TOKEN, t(1)).unwrap();
        let tables = r.engine.export();
        let mut other = rig(&[], vec![]);
        other.engine.import(tables.clone());
        assert_eq!(other.engine.export(), tables);
        let next = other.engine.submit_request(req(INTEL, 1), t(2)).unwrap();
        assert_eq!(next.job_id, JobId(3));
    }

    #[test]
    fn reason_is_bounded() {
        assert_eq!(truncate("é".repeat(600), MAX_REASON).chars().count(), MAX_REASON);
        assert_eq!(mask_token("ab"), "****ab");
    }
}
