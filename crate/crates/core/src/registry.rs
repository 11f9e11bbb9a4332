//! Host registration, heartbeat ingestion, liveness sweeping and the
//! reservation ledger.
//!
//! The ledger is authoritative for scheduling: `avail_mem` on a record is
//! always `total_mem` minus the memory held by active reservations on that
//! host. The free memory a host reports in its heartbeat is kept separately
//! as `reported_avail_mem` for operators.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{Architecture, Automation, CpuModel, MachineStatus, MemMb, NodeId};
use crate::scheduler::{FleetSnapshot, HostView};
use crate::time::Timestamp;

pub const DEFAULT_OFFLINE_THRESHOLD: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostRecord {
    pub node_id: NodeId,
    pub ip_addr: String,
    pub hostname: String,
    pub distro_name: String,
    pub architecture: Architecture,
    pub mac_addr: String,
    pub total_mem: MemMb,
    /// Ledger-derived free memory.
    pub avail_mem: MemMb,
    /// Free memory as last reported by the host itself.
    pub reported_avail_mem: MemMb,
    pub machine_status: MachineStatus,
    pub last_seen: Timestamp,
    pub cpu_model: CpuModel,
    pub runningvms: u32,
    pub automation: Automation,
    pub max_instances: u32,
}

impl HostRecord {
    fn address_key(&self) -> &str {
        if self.ip_addr.is_empty() {
            &self.hostname
        } else {
            &self.ip_addr
        }
    }

    pub fn view(&self) -> HostView {
        HostView {
            node_id: self.node_id,
            cpu_model: self.cpu_model,
            architecture: self.architecture,
            automation: self.automation,
            machine_status: self.machine_status,
            total_mem: self.total_mem,
            avail_mem: self.avail_mem,
            runningvms: self.runningvms,
            max_instances: self.max_instances,
        }
    }
}

/// One status ping from a host agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatPayload {
    pub ip_or_hostname: String,
    pub distro_name: String,
    pub cpu_model: CpuModel,
    pub architecture: Architecture,
    pub total_mem: MemMb,
    pub avail_mem: MemMb,
    pub sent_at: Timestamp,
}

impl HeartbeatPayload {
    fn check(&self) -> Result<(), RegistryError> {
        if self.ip_or_hostname.trim().is_empty() {
            return Err(RegistryError::Malformed("ip_or_hostname is empty".into()));
        }
        if self.total_mem == 0 {
            return Err(RegistryError::Malformed("total_mem must be positive".into()));
        }
        if self.avail_mem > self.total_mem {
            return Err(RegistryError::Malformed(format!(
                "avail_mem {} exceeds total_mem {}",
                self.avail_mem, self.total_mem
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub payload: HeartbeatPayload,
    pub automation: Automation,
    pub max_instances: u32,
    #[serde(default)]
    pub hostname: Option<String>,
    #[serde(default)]
    pub mac_addr: Option<String>,
}

impl Registration {
    pub fn new(payload: HeartbeatPayload, automation: Automation, max_instances: u32) -> Self {
        Self {
            payload,
            automation,
            max_instances,
            hostname: None,
            mac_addr: None,
        }
    }
}

/// Proof of a capacity reservation; handed back to release it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReservationToken {
    pub id: u64,
    pub node_id: NodeId,
    pub mem_mb: MemMb,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("host `{address}` is already registered and online as {existing}")]
    Duplicate { address: String, existing: NodeId },
    #[error("unknown host {0}")]
    NotFound(NodeId),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("reservation {0} is unknown or already released")]
    UnknownReservation(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum Refusal {
    #[error("host {0} is not registered")]
    UnknownHost(NodeId),
    #[error("host is offline")]
    Offline,
    #[error("insufficient memory: {available} MB free, {requested} MB requested")]
    InsufficientMemory { available: MemMb, requested: MemMb },
    #[error("host already runs its maximum of {0} instances")]
    AtCapacity(u32),
}

/// Serializable image of the registry, used for persistence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryTables {
    pub hosts: Vec<HostRecord>,
    pub reservations: Vec<ReservationToken>,
    pub next_node_id: u32,
    pub next_reservation_id: u64,
}

#[derive(Debug, Default)]
struct RegistryState {
    hosts: BTreeMap<NodeId, HostRecord>,
    reservations: BTreeMap<u64, ReservationToken>,
    next_node_id: u32,
    next_reservation_id: u64,
}

impl RegistryState {
    fn reserved_on(&self, node: NodeId) -> MemMb {
        self.reservations
            .values()
            .filter(|r| r.node_id == node)
            .map(|r| r.mem_mb)
            .sum()
    }
}

/// Thread-safe registry of every host in the lab. Each operation takes the
/// registry lock once, so reserve/release are linearizable and sweeps and
/// heartbeats are atomic per record.
#[derive(Debug, Default)]
pub struct HostRegistry {
    state: Mutex<RegistryState>,
}

impl HostRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_host(&self, reg: Registration) -> Result<NodeId, RegistryError> {
        reg.payload.check()?;
        if reg.max_instances == 0 {
            return Err(RegistryError::Malformed("max_instances must be positive".into()));
        }
        let address = reg.payload.ip_or_hostname.trim().to_string();
        let mut state = self.state.lock();
        if let Some(existing) = state
            .hosts
            .values()
            .find(|h| h.machine_status == MachineStatus::Online && h.address_key() == address)
        {
            return Err(RegistryError::Duplicate {
                address,
                existing: existing.node_id,
            });
        }
        state.next_node_id += 1;
        let node_id = NodeId(state.next_node_id);
        let (ip_addr, hostname) = if address.parse::<Ipv4Addr>().is_ok() {
            (address, reg.hostname.unwrap_or_default())
        } else {
            (String::new(), address)
        };
        let p = reg.payload;
        state.hosts.insert(
            node_id,
            HostRecord {
                node_id,
                ip_addr,
                hostname,
                distro_name: p.distro_name,
                architecture: p.architecture,
                mac_addr: reg.mac_addr.unwrap_or_default(),
                total_mem: p.total_mem,
                avail_mem: p.total_mem,
                reported_avail_mem: p.avail_mem,
                machine_status: MachineStatus::Online,
                last_seen: p.sent_at,
                cpu_model: p.cpu_model,
                runningvms: 0,
                automation: reg.automation,
                max_instances: reg.max_instances,
            },
        );
        Ok(node_id)
    }

    /// Refreshes telemetry and marks the host ONLINE, even if it was OFFLINE.
    pub fn apply_heartbeat(
        &self,
        node_id: NodeId,
        payload: &HeartbeatPayload,
    ) -> Result<HostRecord, RegistryError> {
        let mut state = self.state.lock();
        if !state.hosts.contains_key(&node_id) {
            return Err(RegistryError::NotFound(node_id));
        }
        payload.check()?;
        let reserved = state.reserved_on(node_id);
        let host = state.hosts.get_mut(&node_id).expect("checked above");
        host.last_seen = payload.sent_at;
        host.distro_name.clone_from(&payload.distro_name);
        host.total_mem = payload.total_mem;
        host.avail_mem = payload.total_mem.saturating_sub(reserved);
        host.reported_avail_mem = payload.avail_mem;
        host.machine_status = MachineStatus::Online;
        Ok(host.clone())
    }

    /// Marks every ONLINE host silent for at least `threshold` as OFFLINE and
    /// returns the ones that changed.
    pub fn sweep_liveness(&self, now: Timestamp, threshold: Duration) -> Vec<NodeId> {
        let mut state = self.state.lock();
        let mut newly_offline = Vec::new();
        for host in state.hosts.values_mut() {
            if host.machine_status == MachineStatus::Online
                && now.saturating_since(host.last_seen) >= threshold
            {
                host.machine_status = MachineStatus::Offline;
                newly_offline.push(host.node_id);
            }
        }
        newly_offline
    }

    /// Atomically checks eligibility and books `mem_mb` plus one instance slot.
    pub fn reserve_capacity(
        &self,
        node_id: NodeId,
        mem_mb: MemMb,
    ) -> Result<ReservationToken, Refusal> {
        let mut state = self.state.lock();
        let host = state
            .hosts
            .get(&node_id)
            .ok_or(Refusal::UnknownHost(node_id))?;
        if host.machine_status != MachineStatus::Online {
            return Err(Refusal::Offline);
        }
        if host.avail_mem < mem_mb {
            return Err(Refusal::InsufficientMemory {
                available: host.avail_mem,
                requested: mem_mb,
            });
        }
        if host.runningvms >= host.max_instances {
            return Err(Refusal::AtCapacity(host.max_instances));
        }
        state.next_reservation_id += 1;
        let token = ReservationToken {
            id: state.next_reservation_id,
            node_id,
            mem_mb,
        };
        state.reservations.insert(token.id, token);
        let host = state.hosts.get_mut(&node_id).expect("checked above");
        host.avail_mem -= mem_mb;
        host.runningvms += 1;
        Ok(token)
    }

    pub fn release_capacity(&self, token: &ReservationToken) -> Result<HostRecord, RegistryError> {
        let mut state = self.state.lock();
        match state.reservations.get(&token.id) {
            Some(held) if held == token => {}
            _ => return Err(RegistryError::UnknownReservation(token.id)),
        }
        state.reservations.remove(&token.id);
        let reserved = state.reserved_on(token.node_id);
        let host = state
            .hosts
            .get_mut(&token.node_id)
            .ok_or(RegistryError::NotFound(token.node_id))?;
        host.avail_mem = host.total_mem.saturating_sub(reserved);
        host.runningvms -= 1;
        Ok(host.clone())
    }

    pub fn get(&self, node_id: NodeId) -> Option<HostRecord> {
        self.state.lock().hosts.get(&node_id).cloned()
    }

    pub fn list(&self) -> Vec<HostRecord> {
        self.state.lock().hosts.values().cloned().collect()
    }

    pub fn active_reservations(&self) -> Vec<ReservationToken> {
        self.state.lock().reservations.values().copied().collect()
    }

    /// Consistent, immutable view of every host for the scheduler.
    pub fn snapshot_fleet(&self) -> FleetSnapshot {
        let state = self.state.lock();
        FleetSnapshot::new(state.hosts.values().map(HostRecord::view).collect())
    }

    pub fn export(&self) -> RegistryTables {
        let state = self.state.lock();
        RegistryTables {
            hosts: state.hosts.values().cloned().collect(),
            reservations: state.reservations.values().copied().collect(),
            next_node_id: state.next_node_id,
            next_reservation_id: state.next_reservation_id,
        }
    }

    pub fn import(&self, tables: RegistryTables) {
        let mut state = self.state.lock();
        state.hosts = tables.hosts.into_iter().map(|h| (h.node_id, h)).collect();
        state.reservations = tables.reservations.into_iter().map(|r| (r.id, r)).collect();
        state.next_node_id = tables.next_node_id;
        state.next_reservation_id = tables.next_reservation_id;
    }
}
