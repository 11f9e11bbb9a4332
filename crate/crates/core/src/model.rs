//! Domain types shared across the registry, scheduler, lifecycle and provisioner.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// Identifier of a registered host.
    NodeId,
    "node-"
);
id_newtype!(
    /// Identifier of a user or automation request.
    JobId,
    "job-"
);
id_newtype!(
    /// Identifier of a catalog image.
    VmId,
    "vm-"
);

/// Megabytes of RAM.
pub type MemMb = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognized {kind} `{value}`")]
pub struct ParseEnumError {
    kind: &'static str,
    value: String,
}

/// Implements `Display`/`FromStr` over the same tokens serde uses.
macro_rules! token_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $token:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let upper = s.trim().to_ascii_uppercase();
                match upper.as_str() {
                    $($token $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(ParseEnumError { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CpuModel {
    #[serde(rename = "INTEL")]
    Intel,
    #[serde(rename = "AMD")]
    Amd,
}

token_enum!(CpuModel, "cpu model", { Intel => "INTEL", Amd => "AMD" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OsFamily {
    #[serde(rename = "WIN")]
    Windows,
    #[serde(rename = "LINUX")]
    Linux,
    #[serde(rename = "MAC")]
    Mac,
    #[serde(rename = "OPENSOLARIS", alias = "OPEN SOLARIS")]
    OpenSolaris,
}

token_enum!(OsFamily, "os family", {
    Windows => "WIN",
    Linux => "LINUX",
    Mac => "MAC",
    OpenSolaris => "OPENSOLARIS" | "OPEN SOLARIS",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "32-bit")]
    Bits32,
    #[serde(rename = "64-bit")]
    Bits64,
}

token_enum!(Architecture, "architecture", { Bits32 => "32-BIT" | "32", Bits64 => "64-BIT" | "64" });

/// Which request types a host is willing to serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Automation {
    /// Automation (TOD) requests only.
    #[serde(rename = "Y")]
    Yes,
    /// Live user sessions only.
    #[serde(rename = "N")]
    No,
    /// Both.
    #[serde(rename = "B")]
    Both,
}

token_enum!(Automation, "automation flag", { Yes => "Y", No => "N", Both => "B" });

impl Automation {
    pub fn admits(self, request_type: RequestType) -> bool {
        matches!(
            (self, request_type),
            (Automation::Both, _)
                | (Automation::No, RequestType::User)
                | (Automation::Yes, RequestType::Tod)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MachineStatus {
    #[serde(rename = "ONLINE")]
    Online,
    #[serde(rename = "OFFLINE")]
    Offline,
}

token_enum!(MachineStatus, "machine status", { Online => "ONLINE", Offline => "OFFLINE" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestType {
    /// A live, interactive session.
    #[serde(rename = "USER")]
    User,
    /// An automated task run.
    #[serde(rename = "TOD")]
    Tod,
}

token_enum!(RequestType, "request type", { User => "USER", Tod => "TOD" });

/// Image preparation checklist. Stored metadata; an image is servable only
/// when every flag is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreconfigChecklist {
    pub autologin_set: bool,
    pub remote_server_installed: bool,
    pub firewall_configured: bool,
    pub guest_tools_installed: bool,
    pub screensaver_off: bool,
    pub auto_updates_off: bool,
}

impl PreconfigChecklist {
    pub const fn complete() -> Self {
        Self {
            autologin_set: true,
            remote_server_installed: true,
            firewall_configured: true,
            guest_tools_installed: true,
            screensaver_off: true,
            auto_updates_off: true,
        }
    }

    /// Each flag paired with the violation text reported when it is unset.
    pub fn items(&self) -> [(bool, &'static str); 6] {
        [
            (self.autologin_set, "autologin not set"),
            (self.remote_server_installed, "remote login server not installed"),
            (self.firewall_configured, "firewall not configured for remote login"),
            (self.guest_tools_installed, "guest tools not installed"),
            (self.screensaver_off, "screensaver not disabled"),
            (self.auto_updates_off, "automatic updates not disabled"),
        ]
    }
}

impl Default for PreconfigChecklist {
    fn default() -> Self {
        Self::complete()
    }
}

/// A bootable distribution in the image catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmImage {
    pub vm_id: VmId,
    pub os_name: String,
    pub clone_vmx_path: String,
    pub os_family: OsFamily,
    pub display_name: String,
    #[serde(flatten)]
    pub preconfig: PreconfigChecklist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

impl Default for Credentials {
    fn default() -> Self {
        Self {
            username: "vitl".to_string(),
            password: "vitl".to_string(),
        }
    }
}

/// True for a dotted-quad address a guest could actually hold: not the
/// unspecified, broadcast, loopback or multicast address.
pub fn is_usable_ipv4(text: &str) -> bool {
    match text.parse::<Ipv4Addr>() {
        Ok(ip) => !(ip.is_unspecified() || ip.is_broadcast() || ip.is_loopback() || ip.is_multicast()),
        Err(_) => false,
    }
}

/// An IPv4 network in CIDR notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Subnet {
    network: Ipv4Addr,
    prefix_len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid subnet `{0}`")]
pub struct SubnetParseError(String);

impl Ipv4Subnet {
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, SubnetParseError> {
        if !(1..=30).contains(&prefix_len) {
            return Err(SubnetParseError(format!("{addr}/{prefix_len}")));
        }
        let mask = u32::MAX << (32 - prefix_len);
        Ok(Self {
            network: Ipv4Addr::from(u32::from(addr) & mask),
            prefix_len,
        })
    }

    pub fn network(&self) -> Ipv4Addr {
        self.network
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    /// Number of assignable host addresses (network and broadcast excluded).
    pub fn host_count(&self) -> u32 {
        (1u32 << (32 - self.prefix_len)) - 2
    }

    /// The `index`-th assignable address, `index < host_count()`.
    pub fn host(&self, index: u32) -> Ipv4Addr {
        debug_assert!(index < self.host_count());
        Ipv4Addr::from(u32::from(self.network) + 1 + index)
    }

    /// Membership excluding the network and broadcast addresses.
    pub fn contains_host(&self, ip: Ipv4Addr) -> bool {
        let base = u32::from(self.network);
        let raw = u32::from(ip);
        raw > base && raw - base <= self.host_count()
    }
}

impl FromStr for Ipv4Subnet {
    type Err = SubnetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SubnetParseError(s.to_string());
        let (addr, len) = s.split_once('/').ok_or_else(err)?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| err())?;
        let len: u8 = len.parse().map_err(|_| err())?;
        Self::new(addr, len).map_err(|_| err())
    }
}

impl fmt::Display for Ipv4Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix_len)
    }
}

impl Serialize for Ipv4Subnet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Subnet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
