//! Request and response bodies of the HTTP API, shared by the service and
//! the admin client.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use vitl_core::lifecycle::{RequestRecord, RequestStatus};
use vitl_core::model::{
    Architecture, Automation, CpuModel, Credentials, MemMb, NodeId, RequestType, VmId, VmImage,
};
use vitl_core::registry::HostRecord;
use vitl_core::scheduler::PlacementDecision;

/// Header carrying the authentication token. `Authorization: Bearer` is
/// accepted as well.
pub const TOKEN_HEADER: &str = "x-vitl-token";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitBody {
    pub requestor: String,
    pub vm_id: VmId,
    #[serde(alias = "cpu", alias = "cpu_model")]
    pub architecture: CpuModel,
    pub lease_time_hours: u32,
    #[serde(default = "user")]
    pub request_type: RequestType,
}

fn user() -> RequestType {
    RequestType::User
}

/// `GET /requests/{job_id}`: the record, plus the guest login once LIVE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestView {
    #[serde(flatten)]
    pub record: RequestRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<Credentials>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: u32,
    pub status: RequestStatus,
    pub decision: Option<PlacementDecision>,
    pub request: RequestRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatBody {
    pub ip_or_hostname: String,
    pub distro_name: String,
    pub cpu_model: CpuModel,
    pub architecture: Architecture,
    pub total_mem: MemMb,
    pub avail_mem: MemMb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterBody {
    #[serde(flatten)]
    pub heartbeat: HeartbeatBody,
    pub automation: Automation,
    pub max_instances: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hostname: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac_addr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub node_id: NodeId,
    pub host: HostRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulateBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm_id: Option<VmId>,
    #[serde(alias = "cpu", alias = "architecture")]
    pub cpu_model: CpuModel,
    /// Defaults to the service's configured VM memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_mem: Option<MemMb>,
    #[serde(default = "user")]
    pub request_type: RequestType,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub excluded_nodes: BTreeSet<NodeId>,
}

/// `POST /images` accepts one image or a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagesBody {
    Many(Vec<VmImage>),
    One(Box<VmImage>),
}

impl ImagesBody {
    pub fn into_vec(self) -> Vec<VmImage> {
        match self {
            ImagesBody::Many(v) => v,
            ImagesBody::One(i) => vec![*i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagesInserted {
    pub inserted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}
