//! Host selection.
//!
//! Eligible hosts are split into two sets: hosts running no VMs at all, and
//! hosts already running at least one. If any idle host exists the choice is
//! made among idle hosts by free-memory ratio; otherwise loaded hosts are
//! ranked by
//!
//! ```text
//!   k * (avail_mem / total_mem) / (runningvms / cloud_running_total)
//! ```
//!
//! i.e. the most free memory relative to the host's share of all running VMs.
//! Ties go to the lowest node id. Everything here is pure.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, Automation, CpuModel, MachineStatus, MemMb, NodeId, RequestType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostView {
    pub node_id: NodeId,
    pub cpu_model: CpuModel,
    pub architecture: Architecture,
    pub automation: Automation,
    pub machine_status: MachineStatus,
    pub total_mem: MemMb,
    pub avail_mem: MemMb,
    pub runningvms: u32,
    pub max_instances: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetSnapshot {
    pub hosts: Vec<HostView>,
    pub cloud_running_total: u32,
}

impl FleetSnapshot {
    pub fn new(hosts: Vec<HostView>) -> Self {
        let cloud_running_total = hosts.iter().map(|h| h.runningvms).sum();
        Self {
            hosts,
            cloud_running_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementConstraints {
    pub cpu_model: CpuModel,
    pub required_mem: MemMb,
    pub request_type: RequestType,
    #[serde(default)]
    pub excluded_nodes: BTreeSet<NodeId>,
}

impl PlacementConstraints {
    pub fn new(cpu_model: CpuModel, required_mem: MemMb, request_type: RequestType) -> Self {
        assert!(required_mem > 0, "required_mem must be positive");
        Self {
            cpu_model,
            required_mem,
            request_type,
            excluded_nodes: BTreeSet::new(),
        }
    }

    pub fn admits(&self, h: &HostView) -> bool {
        h.machine_status == MachineStatus::Online
            && h.cpu_model == self.cpu_model
            && h.automation.admits(self.request_type)
            && h.avail_mem >= self.required_mem
            && h.runningvms < h.max_instances
            && !self.excluded_nodes.contains(&h.node_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Weight of the memory factor against the VM distribution factor.
    pub k: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { k: 1.0 }
    }
}

impl SchedulerConfig {
    pub fn new(k: f64) -> Result<Self, InvalidWeight> {
        if k.is_finite() && k > 0.0 {
            Ok(Self { k })
        } else {
            Err(InvalidWeight(k))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("scheduler weight k must be a positive finite number, got {0}")]
pub struct InvalidWeight(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetLabel {
    #[serde(rename = "SET_I")]
    SetI,
    #[serde(rename = "SET_II")]
    SetII,
}

impl SetLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SetLabel::SetI => "SET_I",
            SetLabel::SetII => "SET_II",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlacementDecision {
    Chosen {
        node_id: NodeId,
        set_label: SetLabel,
        score: f64,
    },
    Queue,
}

impl PlacementDecision {
    pub fn node(&self) -> Option<NodeId> {
        match self {
            PlacementDecision::Chosen { node_id, .. } => Some(*node_id),
            PlacementDecision::Queue => None,
        }
    }

    pub fn set_label(&self) -> Option<SetLabel> {
        match self {
            PlacementDecision::Chosen { set_label, .. } => Some(*set_label),
            PlacementDecision::Queue => None,
        }
    }
}

/// Scoring hook. The default strategy uses memory ratios only; other
/// strategies may fold in CPU speed or similar host properties.
pub trait ScoringStrategy {
    /// Score for a host running no VMs.
    fn score_idle(&self, h: &HostView) -> f64;
    /// Score for a host running at least one VM.
    fn score_loaded(&self, h: &HostView, cloud_running_total: u32, cfg: &SchedulerConfig) -> f64;

    /// Preference between two hosts of the same set; `Greater` favors `a`.
    /// Defaults to comparing the scores.
    fn prefer(&self, a: &HostView, b: &HostView, loaded: bool, total: u32, cfg: &SchedulerConfig) -> Ordering {
        if loaded {
            self.score_loaded(a, total, cfg)
                .total_cmp(&self.score_loaded(b, total, cfg))
        } else {
            self.score_idle(a).total_cmp(&self.score_idle(b))
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MemoryBalanceScoring;

impl ScoringStrategy for MemoryBalanceScoring {
    fn score_idle(&self, h: &HostView) -> f64 {
        score_set1(h)
    }

    fn score_loaded(&self, h: &HostView, cloud_running_total: u32, cfg: &SchedulerConfig) -> f64 {
        score_set2(h, cloud_running_total, cfg)
    }

    /// Exact comparison on the underlying ratios, so hosts with equal scores
    /// in exact arithmetic tie even when their rounded scores differ. `k`
    /// and the cloud total scale every loaded score alike and drop out.
    fn prefer(&self, a: &HostView, b: &HostView, loaded: bool, _total: u32, _cfg: &SchedulerConfig) -> Ordering {
        let (ra, rb) = if loaded {
            (u128::from(a.runningvms), u128::from(b.runningvms))
        } else {
            (1, 1)
        };
        // a.avail / (a.total * ra)  vs  b.avail / (b.total * rb)
        let lhs = u128::from(a.avail_mem) * u128::from(b.total_mem) * rb;
        let rhs = u128::from(b.avail_mem) * u128::from(a.total_mem) * ra;
        lhs.cmp(&rhs)
    }
}

pub fn eligible_hosts(snapshot: &FleetSnapshot, c: &PlacementConstraints) -> Vec<HostView> {
    snapshot.hosts.iter().filter(|h| c.admits(h)).copied().collect()
}

/// Splits hosts into (idle, loaded).
pub fn partition_sets(eligible: &[HostView]) -> (Vec<HostView>, Vec<HostView>) {
    eligible.iter().partition(|h| h.runningvms == 0)
}

/// Free-memory ratio of an idle host.
pub fn score_set1(h: &HostView) -> f64 {
    assert!(h.total_mem > 0, "{} reports zero total memory", h.node_id);
    h.avail_mem as f64 / h.total_mem as f64
}

/// Memory factor over VM distribution factor, weighted by `k`.
pub fn score_set2(h: &HostView, cloud_running_total: u32, cfg: &SchedulerConfig) -> f64 {
    assert!(h.total_mem > 0, "{} reports zero total memory", h.node_id);
    assert!(
        h.runningvms >= 1,
        "{} runs no VMs; loaded-host scoring would divide by zero",
        h.node_id
    );
    assert!(cloud_running_total >= h.runningvms);
    let memory_factor = h.avail_mem as f64 / h.total_mem as f64;
    let distribution_factor = h.runningvms as f64 / cloud_running_total as f64;
    cfg.k * memory_factor / distribution_factor
}

/// Most preferred host; ties go to the lowest node id.
fn best<S: ScoringStrategy + ?Sized>(
    strategy: &S,
    hosts: &[HostView],
    loaded: bool,
    total: u32,
    cfg: &SchedulerConfig,
) -> Option<HostView> {
    hosts.iter().copied().reduce(|cur, h| {
        match strategy.prefer(&h, &cur, loaded, total, cfg) {
            Ordering::Greater => h,
            Ordering::Equal if h.node_id < cur.node_id => h,
            _ => cur,
        }
    })
}

pub fn select_host(
    snapshot: &FleetSnapshot,
    c: &PlacementConstraints,
    cfg: &SchedulerConfig,
) -> PlacementDecision {
    select_host_with(&MemoryBalanceScoring, snapshot, c, cfg)
}

pub fn select_host_with<S: ScoringStrategy + ?Sized>(
    strategy: &S,
    snapshot: &FleetSnapshot,
    c: &PlacementConstraints,
    cfg: &SchedulerConfig,
) -> PlacementDecision {
    let eligible = eligible_hosts(snapshot, c);
    let (idle, loaded) = partition_sets(&eligible);
    let total = snapshot.cloud_running_total;
    if let Some(h) = best(strategy, &idle, false, total, cfg) {
        return PlacementDecision::Chosen {
            node_id: h.node_id,
            set_label: SetLabel::SetI,
            score: strategy.score_idle(&h),
        };
    }
    match best(strategy, &loaded, true, total, cfg) {
        Some(h) => PlacementDecision::Chosen {
            node_id: h.node_id,
            set_label: SetLabel::SetII,
            score: strategy.score_loaded(&h, total, cfg),
        },
        None => PlacementDecision::Queue,
    }
}

/// Per-host breakdown returned by placement dry runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostScore {
    pub node_id: NodeId,
    pub eligible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_label: Option<SetLabel>,
    pub memory_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm_distribution_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub decision: PlacementDecision,
    pub cloud_running_total: u32,
    pub hosts: Vec<HostScore>,
}

/// The decision together with every host's factors, for operator inspection.
pub fn explain_placement(
    snapshot: &FleetSnapshot,
    c: &PlacementConstraints,
    cfg: &SchedulerConfig,
) -> PlacementReport {
    let decision = select_host(snapshot, c, cfg);
    let total = snapshot.cloud_running_total;
    let hosts = snapshot
        .hosts
        .iter()
        .map(|h| {
            let eligible = c.admits(h);
            let memory_factor = if h.total_mem > 0 {
                h.avail_mem as f64 / h.total_mem as f64
            } else {
                0.0
            };
            let vm_distribution_factor =
                (h.runningvms > 0 && total > 0).then(|| h.runningvms as f64 / total as f64);
            let (set_label, score) = if !eligible {
                (None, None)
            } else if h.runningvms == 0 {
                (Some(SetLabel::SetI), Some(score_set1(h)))
            } else {
                (Some(SetLabel::SetII), Some(score_set2(h, total, cfg)))
            };
            HostScore {
                node_id: h.node_id,
                eligible,
                set_label,
                memory_factor,
                vm_distribution_factor,
                score,
            }
        })
        .collect();
    PlacementReport {
        decision,
        cloud_running_total: total,
        hosts,
    }
}
