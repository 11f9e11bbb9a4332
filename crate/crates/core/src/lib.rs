//! Core of an on-demand virtual machine lab: image catalog, host registry
//! with capacity reservations, host selection, the request lifecycle, a
//! simulated hypervisor driver and a virtual-time load experiment.

pub mod catalog;
pub mod config;
pub mod lifecycle;
pub mod model;
pub mod notify;
pub mod persist;
pub mod provisioner;
pub mod registry;
pub mod scheduler;
pub mod sim;
pub mod time;

pub use catalog::Catalog;
pub use config::ServiceConfig;
pub use lifecycle::{Engine, LifecycleConfig, RequestRecord, RequestStatus, SubStatus};
pub use model::{
    Architecture, Automation, CpuModel, Credentials, JobId, MachineStatus, MemMb, NodeId,
    OsFamily, RequestType, VmId, VmImage,
};
pub use provisioner::{HypervisorDriver, SimDriver, SimDriverConfig};
pub use registry::{HostRecord, HostRegistry};
pub use scheduler::{select_host, FleetSnapshot, PlacementConstraints, PlacementDecision, SetLabel};
pub use time::{Clock, ManualClock, SystemClock, Timestamp};
