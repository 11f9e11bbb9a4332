//! The hypervisor driver boundary and its simulated implementation.
//!
//! A driver performs four operations against a target host: copy the linked
//! clone into a per-attempt folder on the shared file server, boot it, query
//! the guest's IP, and tear it down. Drivers report step failures as data
//! (`success = false`); `DriverError` is reserved for contract breaches such
//! as reusing a folder id or booting before a successful copy.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{is_usable_ipv4, Credentials, Ipv4Subnet, JobId, MemMb, NodeId, VmImage};
use crate::time::{millis_duration, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DriverStep {
    Copy,
    Boot,
    QueryIp,
    Teardown,
}

/// Everything a driver needs to bring up one VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionPlan {
    pub job_id: JobId,
    pub unique_folder_id: String,
    pub image: VmImage,
    pub target_node: NodeId,
    pub credentials: Credentials,
    pub required_mem: MemMb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverOutcome {
    pub step: DriverStep,
    pub success: bool,
    /// Set only by a successful `QueryIp`.
    pub ip: String,
    pub detail: String,
    pub duration: Duration,
}

impl DriverOutcome {
    fn ok(step: DriverStep, duration: Duration, detail: impl Into<String>) -> Self {
        Self {
            step,
            success: true,
            ip: String::new(),
            detail: detail.into(),
            duration,
        }
    }

    fn failed(step: DriverStep, duration: Duration, detail: impl Into<String>) -> Self {
        Self {
            success: false,
            ..Self::ok(step, duration, detail)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DriverError {
    #[error("clone folder `{0}` was already used by an earlier attempt")]
    DuplicateFolder(String),
    #[error("{step:?} issued for folder `{folder}` before its prerequisite step succeeded")]
    OutOfOrder { step: DriverStep, folder: String },
}

/// A hypervisor adapter. `at` is the (wall or virtual) time the step starts.
pub trait HypervisorDriver: Send + Sync {
    fn copy_clone(&self, plan: &ProvisionPlan, at: Timestamp) -> Result<DriverOutcome, DriverError>;
    fn boot(&self, plan: &ProvisionPlan, at: Timestamp) -> Result<DriverOutcome, DriverError>;
    fn query_ip(&self, plan: &ProvisionPlan, at: Timestamp) -> Result<DriverOutcome, DriverError>;
    /// Idempotent; safe after a failed or partial bring-up.
    fn teardown(&self, plan: &ProvisionPlan, at: Timestamp) -> Result<DriverOutcome, DriverError>;

    /// Whether an address returned by `query_ip` is usable.
    fn ip_is_valid(&self, ip: &str) -> bool {
        is_usable_ipv4(ip)
    }

    /// Time taken to hand the notification to the sink.
    fn notify_latency(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The step reports failure.
    Fail,
    /// `QueryIp` succeeds but returns `0.0.0.0`.
    InvalidIp,
}

/// Forces a failure of `step` for `job_id`, optionally only on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedFault {
    pub job_id: JobId,
    pub step: DriverStep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    #[serde(default = "default_fault_kind")]
    pub kind: FaultKind,
}

fn default_fault_kind() -> FaultKind {
    FaultKind::Fail
}

impl ScriptedFault {
    pub fn fail(job_id: JobId, step: DriverStep) -> Self {
        Self {
            job_id,
            step,
            node_id: None,
            kind: FaultKind::Fail,
        }
    }

    pub fn on_node(mut self, node_id: NodeId) -> Self {
        self.node_id = Some(node_id);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDriverConfig {
    pub copy_base_seconds: f64,
    pub boot_base_seconds: f64,
    /// Boot-time multiplier per VM already running on the target host.
    pub per_vm_slowdown: f64,
    pub share_bandwidth_mbps: f64,
    pub clone_size_mb: f64,
    pub ip_query_seconds: f64,
    pub notify_seconds: f64,
    pub subnet: Ipv4Subnet,
    pub failure_script: Vec<ScriptedFault>,
    pub seed: u64,
}

impl Default for SimDriverConfig {
    fn default() -> Self {
        Self {
            copy_base_seconds: 5.0,
            boot_base_seconds: 30.0,
            per_vm_slowdown: 1.2,
            share_bandwidth_mbps: 100.0,
            clone_size_mb: 500.0,
            ip_query_seconds: 5.0,
            notify_seconds: 1.0,
            subnet: Ipv4Subnet::new(Ipv4Addr::new(10, 20, 0, 0), 16).expect("valid subnet"),
            failure_script: Vec::new(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid simulated driver configuration: {0}")]
pub struct SimConfigError(String);

impl SimDriverConfig {
    /// Windows XP guest timings.
    pub fn windows_xp() -> Self {
        Self::default()
    }

    /// Ubuntu 10.04 guest timings; boots faster than the XP preset.
    pub fn ubuntu() -> Self {
        Self {
            boot_base_seconds: 22.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let times = [
            ("copy_base_seconds", self.copy_base_seconds),
            ("boot_base_seconds", self.boot_base_seconds),
            ("ip_query_seconds", self.ip_query_seconds),
            ("notify_seconds", self.notify_seconds),
            ("clone_size_mb", self.clone_size_mb),
        ];
        for (name, v) in times {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimConfigError(format!("{name} must be >= 0")));
            }
        }
        if !(self.per_vm_slowdown.is_finite() && self.per_vm_slowdown >= 1.0) {
            return Err(SimConfigError("per_vm_slowdown must be >= 1.0".into()));
        }
        if !(self.share_bandwidth_mbps.is_finite() && self.share_bandwidth_mbps > 0.0) {
            return Err(SimConfigError("share_bandwidth_mbps must be > 0".into()));
        }
        Ok(())
    }

    /// Seconds to push one clone over the shared link with `sharing`
    /// transfers splitting the bandwidth equally.
    pub fn transfer_seconds(&self, sharing: u32) -> f64 {
        self.clone_size_mb * 8.0 / self.share_bandwidth_mbps * f64::from(sharing.max(1))
    }

    pub fn copy_seconds(&self, sharing: u32) -> f64 {
        self.copy_base_seconds + self.transfer_seconds(sharing)
    }

    pub fn boot_seconds(&self, running_on_host: u32) -> f64 {
        self.boot_base_seconds * self.per_vm_slowdown.powi(running_on_host as i32)
    }

    /// Deterministic guest address for a job inside the configured subnet.
    /// Distinct jobs map to distinct addresses until the subnet wraps.
    pub fn guest_ip(&self, job_id: JobId) -> Ipv4Addr {
        let space = u64::from(self.subnet.host_count());
        let offset = splitmix64(self.seed) % space;
        let mult = coprime_multiplier(space);
        let index = ((u64::from(job_id.0) + offset) % space * mult) % space;
        self.subnet.host(index as u32)
    }

    fn fault(&self, job_id: JobId, step: DriverStep, node: NodeId) -> Option<FaultKind> {
        self.failure_script
            .iter()
            .find(|f| f.job_id == job_id && f.step == step && f.node_id.is_none_or(|n| n == node))
            .map(|f| f.kind)
    }
}

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A multiplier near the golden ratio of `space` that is coprime to it, so
/// multiplication modulo `space` is a permutation.
fn coprime_multiplier(space: u64) -> u64 {
    let mut m = ((space as f64 * 0.618_033_988_75) as u64).max(1);
    while gcd(m, space) != 1 {
        m += 1;
    }
    m
}

#[derive(Debug, Clone)]
struct Folder {
    node: NodeId,
    copied: bool,
    booted: bool,
    retired: bool,
}

#[derive(Debug, Default)]
struct SimState {
    folders: BTreeMap<String, Folder>,
    /// (start, end) of every copy issued over the shared link.
    transfers: Vec<(Timestamp, Timestamp)>,
}

/// Deterministic in-process driver: durations come from `SimDriverConfig`,
/// failures from its fault script, nothing touches a real hypervisor.
#[derive(Debug)]
pub struct SimDriver {
    config: SimDriverConfig,
    state: Mutex<SimState>,
}

impl SimDriver {
    pub fn new(config: SimDriverConfig) -> Result<Self, SimConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            state: Mutex::new(SimState::default()),
        })
    }

    pub fn config(&self) -> &SimDriverConfig {
        &self.config
    }

    /// VMs booted (or booting) on `node` and not yet torn down.
    pub fn running_on(&self, node: NodeId) -> u32 {
        let state = self.state.lock();
        Self::count_running(&state, node)
    }

    fn count_running(state: &SimState, node: NodeId) -> u32 {
        state
            .folders
            .values()
            .filter(|f| f.node == node && f.booted && !f.retired)
            .count() as u32
    }
}

impl HypervisorDriver for SimDriver {
    fn copy_clone(&self, plan: &ProvisionPlan, at: Timestamp) -> Result<DriverOutcome, DriverError> {
        let mut state = self.state.lock();
        if state.folders.contains_key(&plan.unique_folder_id) {
            return Err(DriverError::DuplicateFolder(plan.unique_folder_id.clone()));
        }
        let fault = self.config.fault(plan.job_id, DriverStep::Copy, plan.target_node);
        state.folders.insert(
            plan.unique_folder_id.clone(),
            Folder {
                node: plan.target_node,
                copied: fault.is_none(),
                booted: false,
                retired: false,
            },
        );
        if fault.is_some() {
            let took = millis_duration(self.config.copy_base_seconds);
            return Ok(DriverOutcome::failed(DriverStep::Copy, took, "scripted copy failure"));
        }
        let in_flight = state
            .transfers
            .iter()
            .filter(|(start, end)| *start <= at && at < *end)
            .count() as u32;
        let took = millis_duration(self.config.copy_seconds(in_flight + 1));
        state.transfers.push((at, at + took));
        Ok(DriverOutcome::ok(
            DriverStep::Copy,
            took,
            format!("{} copied to {}", plan.image.clone_vmx_path, plan.unique_folder_id),
        ))
    }

    fn boot(&self, plan: &ProvisionPlan, _at: Timestamp) -> Result<DriverOutcome, DriverError> {
        let mut state = self.state.lock();
        let running = Self::count_running(&state, plan.target_node);
        let folder = state
            .folders
            .get_mut(&plan.unique_folder_id)
            .filter(|f| f.copied && !f.retired)
            .ok_or_else(|| DriverError::OutOfOrder {
                step: DriverStep::Boot,
                folder: plan.unique_folder_id.clone(),
            })?;
        let took = millis_duration(self.config.boot_seconds(running));
        if self.config.fault(plan.job_id, DriverStep::Boot, plan.target_node).is_some() {
            return Ok(DriverOutcome::failed(DriverStep::Boot, took, "scripted boot failure"));
        }
        folder.booted = true;
        Ok(DriverOutcome::ok(
            DriverStep::Boot,
            took,
            format!("booted with {running} VMs already on {}", plan.target_node),
        ))
    }

    fn query_ip(&self, plan: &ProvisionPlan, _at: Timestamp) -> Result<DriverOutcome, DriverError> {
        let state = self.state.lock();
        let booted = state
            .folders
            .get(&plan.unique_folder_id)
            .is_some_and(|f| f.booted && !f.retired);
        if !booted {
            return Err(DriverError::OutOfOrder {
                step: DriverStep::QueryIp,
                folder: plan.unique_folder_id.clone(),
            });
        }
        let took = millis_duration(self.config.ip_query_seconds);
        let ip = match self.config.fault(plan.job_id, DriverStep::QueryIp, plan.target_node) {
            Some(FaultKind::Fail) => {
                return Ok(DriverOutcome::failed(
                    DriverStep::QueryIp,
                    took,
                    "scripted ip query failure",
                ))
            }
            Some(FaultKind::InvalidIp) => Ipv4Addr::UNSPECIFIED,
            None => self.config.guest_ip(plan.job_id),
        };
        let mut outcome = DriverOutcome::ok(DriverStep::QueryIp, took, "guest reported address");
        outcome.ip = ip.to_string();
        Ok(outcome)
    }

    fn teardown(&self, plan: &ProvisionPlan, _at: Timestamp) -> Result<DriverOutcome, DriverError> {
        let mut state = self.state.lock();
        let detail = match state.folders.get_mut(&plan.unique_folder_id) {
            Some(f) if !f.retired => {
                f.retired = true;
                f.booted = false;
                "instance shut down, folder retired"
            }
            Some(_) => "already torn down",
            None => "nothing to tear down",
        };
        Ok(DriverOutcome::ok(DriverStep::Teardown, Duration::ZERO, detail))
    }

    fn ip_is_valid(&self, ip: &str) -> bool {
        is_usable_ipv4(ip)
            && ip
                .parse::<Ipv4Addr>()
                .is_ok_and(|addr| self.config.subnet.contains_host(addr))
    }

    fn notify_latency(&self) -> Duration {
        millis_duration(self.config.notify_seconds)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::catalog::tests::image;

    fn plan(job: u32, node: u32, attempt: u32) -> ProvisionPlan {
        ProvisionPlan {
            job_id: JobId(job),
            unique_folder_id: format!("job{job}-a{attempt}"),
            image: image(1, "xp"),
            target_node: NodeId(node),
            credentials: Credentials::default(),
            required_mem: 1024,
        }
    }

    fn driver(cfg: SimDriverConfig) -> SimDriver {
        SimDriver::new(cfg).unwrap()
    }

    #[test]
    fn single_copy_duration_is_base_plus_transfer() {
        let d = driver(SimDriverConfig::default());
        // 500 MB * 8 / 100 Mbps = 40 s on an idle link
        assert_eq!(500.0 * 8.0 / 100.0, 40.0);
        let out = d.copy_clone(&plan(1, 1, 1), Timestamp::ZERO).unwrap();
        assert!(out.success);
        assert_eq!(out.duration, Duration::from_secs(45));
    }

    #[test]
    fn concurrent_copy_doubles_transfer_term() {
        let cfg = SimDriverConfig::default();
        assert_eq!(cfg.transfer_seconds(2), 2.0 * cfg.transfer_seconds(1));
        let d = driver(cfg);
        let first = d.copy_clone(&plan(1, 1, 1), Timestamp::ZERO).unwrap();
        let second = d.copy_clone(&plan(2, 2, 1), Timestamp::from_secs(10)).unwrap();
        let base = Duration::from_secs(5);
        assert_eq!(second.duration - base, 2 * (first.duration - base));
        // once the link is idle again the term drops back
        let third = d.copy_clone(&plan(3, 3, 1), Timestamp::from_secs(500)).unwrap();
        assert_eq!(third.duration, first.duration);
    }

    #[test]
    fn scripted_copy_failure() {
        let mut cfg = SimDriverConfig::default();
        cfg.failure_script.push(ScriptedFault::fail(JobId(9), DriverStep::Copy));
        let d = driver(cfg);
        let out = d.copy_clone(&plan(9, 1, 1), Timestamp::ZERO).unwrap();
        assert!(!out.success);
        assert!(d.copy_clone(&plan(8, 1, 1), Timestamp::ZERO).unwrap().success);
    }

    #[test]
    fn folder_ids_cannot_be_reused() {
        let d = driver(SimDriverConfig::default());
        d.copy_clone(&plan(1, 1, 1), Timestamp::ZERO).unwrap();
        d.teardown(&plan(1, 1, 1), Timestamp::ZERO).unwrap();
        assert_eq!(
            d.copy_clone(&plan(1, 2, 1), Timestamp::ZERO),
            Err(DriverError::DuplicateFolder("job1-a1".into()))
        );
    }

    #[test]
    fn boot_slows_with_running_vms() {
        let cfg = SimDriverConfig::default();
        assert_eq!(cfg.boot_seconds(0), 30.0);
        assert!((cfg.boot_seconds(3) - 30.0 * 1.2f64.powi(3)).abs() < 1e-9);
        assert!((cfg.boot_seconds(3) - 51.84).abs() < 1e-9);

        let d = driver(cfg);
        for job in 1..=3 {
            let p = plan(job, 7, 1);
            d.copy_clone(&p, Timestamp::ZERO).unwrap();
            d.boot(&p, Timestamp::ZERO).unwrap();
        }
        assert_eq!(d.running_on(NodeId(7)), 3);
        let p = plan(4, 7, 1);
        d.copy_clone(&p, Timestamp::ZERO).unwrap();
        assert_eq!(d.boot(&p, Timestamp::ZERO).unwrap().duration, Duration::from_millis(51_840));

        let other = plan(5, 8, 1);
        d.copy_clone(&other, Timestamp::ZERO).unwrap();
        assert_eq!(d.boot(&other, Timestamp::ZERO).unwrap().duration, Duration::from_secs(30));
    }

    #[test]
    fn scripted_boot_failure_and_node_filter() {
        let mut cfg = SimDriverConfig::default();
        cfg.failure_script
            .push(ScriptedFault::fail(JobId(1), DriverStep::Boot).on_node(NodeId(4)));
        let d = driver(cfg);
        let on_four = plan(1, 4, 1);
        d.copy_clone(&on_four, Timestamp::ZERO).unwrap();
        assert!(!d.boot(&on_four, Timestamp::ZERO).unwrap().success);
        let on_seven = plan(1, 7, 2);
        d.copy_clone(&on_seven, Timestamp::ZERO).unwrap();
        assert!(d.boot(&on_seven, Timestamp::ZERO).unwrap().success);
    }

    #[test]
    fn steps_out_of_order_are_contract_errors() {
        let d = driver(SimDriverConfig::default());
        let p = plan(1, 1, 1);
        assert!(matches!(d.boot(&p, Timestamp::ZERO), Err(DriverError::OutOfOrder { step: DriverStep::Boot, .. })));
        d.copy_clone(&p, Timestamp::ZERO).unwrap();
        assert!(matches!(
            d.query_ip(&p, Timestamp::ZERO),
            Err(DriverError::OutOfOrder { step: DriverStep::QueryIp, .. })
        ));
    }

    #[test]
    fn guest_ip_is_stable_and_in_subnet() {
        let cfg = SimDriverConfig::default();
        let a = cfg.guest_ip(JobId(5));
        assert_eq!(a, SimDriverConfig::default().guest_ip(JobId(5)));
        assert!(cfg.subnet.contains_host(a));

        let d = driver(cfg);
        let p = plan(5, 1, 1);
        d.copy_clone(&p, Timestamp::ZERO).unwrap();
        d.boot(&p, Timestamp::ZERO).unwrap();
        let out = d.query_ip(&p, Timestamp::ZERO).unwrap();
        assert_eq!(out.ip, a.to_string());
        assert!(d.ip_is_valid(&out.ip));
        assert!(!d.ip_is_valid("10.21.0.1"));
    }

    #[test]
    fn guest_ips_do_not_collide() {
        let cfg = SimDriverConfig::default();
        let mut seen = HashSet::new();
        for job in 1..=10_000 {
            assert!(seen.insert(cfg.guest_ip(JobId(job))), "collision at job {job}");
        }
        let mut other = cfg.clone();
        other.seed = 7;
        assert_ne!(other.guest_ip(JobId(1)), cfg.guest_ip(JobId(1)));
    }

    #[test]
    fn scripted_invalid_ip_fails_validation() {
        let mut cfg = SimDriverConfig::default();
        cfg.failure_script.push(ScriptedFault {
            job_id: JobId(2),
            step: DriverStep::QueryIp,
            node_id: None,
            kind: FaultKind::InvalidIp,
        });
        let d = driver(cfg);
        let p = plan(2, 1, 1);
        d.copy_clone(&p, Timestamp::ZERO).unwrap();
        d.boot(&p, Timestamp::ZERO).unwrap();
        let out = d.query_ip(&p, Timestamp::ZERO).unwrap();
        assert_eq!(out.ip, "0.0.0.0");
        assert!(!d.ip_is_valid(&out.ip));
    }

    #[test]
    fn teardown_is_idempotent_cleanup() {
        let mut cfg = SimDriverConfig::default();
        cfg.failure_script.push(ScriptedFault::fail(JobId(3), DriverStep::Boot));
        let d = driver(cfg);

        let live = plan(1, 1, 1);
        d.copy_clone(&live, Timestamp::ZERO).unwrap();
        d.boot(&live, Timestamp::ZERO).unwrap();
        assert!(d.teardown(&live, Timestamp::ZERO).unwrap().success);
        assert!(d.teardown(&live, Timestamp::ZERO).unwrap().success);
        assert_eq!(d.running_on(NodeId(1)), 0);

        let failed = plan(3, 1, 1);
        d.copy_clone(&failed, Timestamp::ZERO).unwrap();
        assert!(!d.boot(&failed, Timestamp::ZERO).unwrap().success);
        assert!(d.teardown(&failed, Timestamp::ZERO).unwrap().success);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimDriverConfig::default();
        cfg.per_vm_slowdown = 0.9;
        assert!(SimDriver::new(cfg).is_err());
        let mut cfg = SimDriverConfig::default();
        cfg.boot_base_seconds = -1.0;
        assert!(cfg.validate().is_err());
        assert!(SimDriverConfig::ubuntu().boot_base_seconds < SimDriverConfig::windows_xp().boot_base_seconds);
    }
}
