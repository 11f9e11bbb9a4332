//! Shared test support: an independent brute-force reference for host
//! selection and random fleet generators.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use vitl_core::model::{Architecture, Automation, CpuModel, MachineStatus, NodeId, RequestType};
use vitl_core::scheduler::{FleetSnapshot, HostView, PlacementConstraints};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub node_id: NodeId,
    pub idle: bool,
    pub score: f64,
}

fn host_is_eligible(h: &HostView, c: &PlacementConstraints) -> bool {
    if h.machine_status != MachineStatus::Online {
        return false;
    }
    if h.cpu_model != c.cpu_model {
        return false;
    }
    let automation_ok = match (h.automation, c.request_type) {
        (Automation::Both, _) => true,
        (Automation::No, RequestType::User) => true,
        (Automation::Yes, RequestType::Tod) => true,
        _ => false,
    };
    automation_ok
        && h.avail_mem >= c.required_mem
        && h.runningvms < h.max_instances
        && !c.excluded_nodes.contains(&h.node_id)
}

/// Exact value of a host's ranking ratio as (numerator, denominator):
/// avail/total for idle hosts, (avail/total)/(running/cloud) for loaded ones.
fn ratio(h: &HostView, cloud: u32) -> (u128, u128) {
    if h.runningvms == 0 {
        (h.avail_mem as u128, h.total_mem as u128)
    } else {
        (
            h.avail_mem as u128 * cloud as u128,
            h.total_mem as u128 * h.runningvms as u128,
        )
    }
}

fn beats(a: (u128, u128), b: (u128, u128)) -> std::cmp::Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

/// Brute force: filter, split, then pick the host that no other candidate
/// of its set beats (ties to the lowest id) by pairwise comparison.
pub fn reference_select(fleet: &[HostView], c: &PlacementConstraints, k: f64) -> Option<Reference> {
    let cloud: u32 = fleet.iter().map(|h| h.runningvms).sum();
    let eligible: Vec<&HostView> = fleet.iter().filter(|h| host_is_eligible(h, c)).collect();
    let idle: Vec<&HostView> = eligible.iter().copied().filter(|h| h.runningvms == 0).collect();
    let pool = if idle.is_empty() { eligible.clone() } else { idle };
    let winner = pool.iter().find(|h| {
        pool.iter().all(|o| {
            o.node_id == h.node_id
                || match beats(ratio(h, cloud), ratio(o, cloud)) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => h.node_id < o.node_id,
                    std::cmp::Ordering::Less => false,
                }
        })
    })?;
    let free = winner.avail_mem as f64 / winner.total_mem as f64;
    let score = if winner.runningvms == 0 {
        free
    } else {
        k * free / (winner.runningvms as f64 / cloud as f64)
    };
    Some(Reference {
        node_id: winner.node_id,
        idle: winner.runningvms == 0,
        score,
    })
}

const MEM_STEPS: [u64; 6] = [1024, 2048, 3072, 4096, 8192, 16384];

/// A random host. Memory values are drawn from a small set so exact ties
/// between hosts are common.
pub fn random_host<R: Rng>(rng: &mut R, id: u32) -> HostView {
    let total = *MEM_STEPS.choose(rng).unwrap();
    let max_instances = rng.gen_range(1..=15);
    let runningvms = rng.gen_range(0..=max_instances);
    let avail = if rng.gen_bool(0.3) {
        total
    } else {
        rng.gen_range(0..=total / 512) * 512
    };
    HostView {
        node_id: NodeId(id),
        cpu_model: if rng.gen_bool(0.8) { CpuModel::Intel } else { CpuModel::Amd },
        architecture: if rng.gen_bool(0.5) { Architecture::Bits32 } else { Architecture::Bits64 },
        automation: *[Automation::Yes, Automation::No, Automation::Both].choose(rng).unwrap(),
        machine_status: if rng.gen_bool(0.9) { MachineStatus::Online } else { MachineStatus::Offline },
        total_mem: total,
        avail_mem: avail.min(total),
        runningvms,
        max_instances,
    }
}

/// Random fleet of 1..=max_hosts hosts with shuffled node order.
pub fn random_fleet<R: Rng>(rng: &mut R, max_hosts: usize) -> FleetSnapshot {
    let n = rng.gen_range(1..=max_hosts);
    let mut ids: Vec<u32> = (1..=n as u32 * 2).collect();
    ids.shuffle(rng);
    let hosts = ids[..n].iter().map(|&id| random_host(rng, id)).collect();
    FleetSnapshot::new(hosts)
}

/// A random fleet where every host already runs at least one VM.
pub fn random_loaded_fleet<R: Rng>(rng: &mut R, max_hosts: usize) -> FleetSnapshot {
    let mut fleet = random_fleet(rng, max_hosts);
    for h in &mut fleet.hosts {
        h.max_instances = h.max_instances.max(2);
        h.runningvms = rng.gen_range(1..h.max_instances);
    }
    FleetSnapshot::new(fleet.hosts)
}

pub fn random_constraints<R: Rng>(rng: &mut R, fleet: &FleetSnapshot) -> PlacementConstraints {
    let mut excluded = BTreeSet::new();
    for h in &fleet.hosts {
        if rng.gen_bool(0.1) {
            excluded.insert(h.node_id);
        }
    }
    PlacementConstraints {
        cpu_model: if rng.gen_bool(0.85) { CpuModel::Intel } else { CpuModel::Amd },
        required_mem: *[512u64, 1024, 2048].choose(rng).unwrap(),
        request_type: if rng.gen_bool(0.7) { RequestType::User } else { RequestType::Tod },
        excluded_nodes: excluded,
    }
}

pub mod rig {
    use std::sync::Arc;

    use vitl_core::catalog::{Catalog, DEFAULT_SHARE_PREFIX};
    use vitl_core::lifecycle::{Engine, LifecycleConfig, SubmitRequest};
    use vitl_core::model::{
        Architecture, Automation, CpuModel, MemMb, OsFamily, RequestType, VmId, VmImage,
    };
    use vitl_core::model::PreconfigChecklist;
    use vitl_core::notify::MemorySink;
    use vitl_core::provisioner::{ScriptedFault, SimDriver, SimDriverConfig};
    use vitl_core::registry::{HeartbeatPayload, HostRegistry, Registration};
    use vitl_core::time::Timestamp;

    pub const TOKEN: &str = "lab-token";

    pub struct Rig {
        pub engine: Engine,
        pub registry: Arc<HostRegistry>,
        pub sink: Arc<MemorySink>,
    }

    pub fn image(id: u32) -> VmImage {
        VmImage {
            vm_id: VmId(id),
            os_name: "Windows XP SP3".into(),
            clone_vmx_path: format!("{DEFAULT_SHARE_PREFIX}xp/clone.vmx"),
            os_family: OsFamily::Windows,
            display_name: "XP".into(),
            preconfig: PreconfigChecklist::complete(),
        }
    }

    pub fn build(hosts: &[(CpuModel, MemMb, u32)], faults: Vec<ScriptedFault>) -> Rig {
        let catalog = Arc::new(Catalog::default());
        catalog.insert(image(1)).unwrap();
        let registry = Arc::new(HostRegistry::new());
        for (i, &(cpu, total, max)) in hosts.iter().enumerate() {
            let p = HeartbeatPayload {
                ip_or_hostname: format!("10.3.0.{}", i + 1),
                distro_name: "Ubuntu".into(),
                cpu_model: cpu,
                architecture: Architecture::Bits32,
                total_mem: total,
                avail_mem: total,
                sent_at: Timestamp::ZERO,
            };
            registry
                .register_host(Registration::new(p, Automation::Both, max))
                .unwrap();
        }
        let driver = SimDriver::new(SimDriverConfig {
            failure_script: faults,
            ..SimDriverConfig::default()
        })
        .unwrap();
        let sink = Arc::new(MemorySink::new());
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

    pub fn request(cpu: CpuModel, hours: u32) -> SubmitRequest {
        SubmitRequest {
            requestor: "alice".into(),
            vm_id: VmId(1),
            architecture: cpu,
            lease_time_hours: hours,
            request_type: RequestType::User,
        }
    }
}
