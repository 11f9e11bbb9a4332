//! Virtual-time load experiment: drives sequential requests through the
//! production engine, scheduler and simulated driver and records how long
//! each takes to go live.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, DEFAULT_SHARE_PREFIX};
use crate::lifecycle::{Engine, LifecycleConfig, LifecycleError, SubmitRequest};
use crate::model::{
    Architecture, Automation, CpuModel, JobId, MemMb, NodeId, OsFamily, PreconfigChecklist,
    RequestType, VmId, VmImage,
};
use crate::notify::MemorySink;
use crate::provisioner::{DriverOutcome, SimDriver, SimDriverConfig};
use crate::registry::{HeartbeatPayload, HostRegistry, Registration};
use crate::scheduler::{SchedulerConfig, SetLabel};
use crate::time::{millis_duration, Timestamp};

const SIM_TOKEN: &str = "simulation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetHost {
    pub total_mem: MemMb,
    pub max_instances: u32,
    pub cpu_model: CpuModel,
}

/// One high-end host with fifteen slots and four low-end hosts with two.
pub fn lab_fleet() -> Vec<FleetHost> {
    let mut fleet = vec![FleetHost {
        total_mem: 16 * 1024,
        max_instances: 15,
        cpu_model: CpuModel::Intel,
    }];
    fleet.extend(std::iter::repeat(FleetHost {
        total_mem: 4 * 1024,
        max_instances: 2,
        cpu_model: CpuModel::Intel,
    })
    .take(4));
    fleet
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fleet spec line {line}: {message}")]
pub struct FleetSpecError {
    pub line: usize,
    pub message: String,
}

/// Parses `total_mem_mb max_instances cpu_model` lines; blank lines and
/// `#` comments are skipped.
pub fn parse_fleet(text: &str) -> Result<Vec<FleetHost>, FleetSpecError> {
    let mut fleet = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FleetSpecError {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [mem, max, cpu] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let total_mem: MemMb = mem.parse().map_err(|_| err(format!("bad memory `{mem}`")))?;
        let max_instances: u32 = max
            .parse()
            .map_err(|_| err(format!("bad max_instances `{max}`")))?;
        let cpu_model: CpuModel = cpu.parse().map_err(|e| err(format!("{e}")))?;
        if total_mem == 0 || max_instances == 0 {
            return Err(err("memory and max_instances must be positive".into()));
        }
        fleet.push(FleetHost {
            total_mem,
            max_instances,
            cpu_model,
        });
    }
    Ok(fleet)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fleet: Vec<FleetHost>,
    pub requests: usize,
    pub vm_memory_mb: MemMb,
    pub cpu_model: CpuModel,
    pub inter_arrival_seconds: f64,
    pub lease_hours: u32,
    /// Simulated time kept running after the last arrival.
    pub horizon_seconds: f64,
    pub tick_seconds: u64,
    pub sim: SimDriverConfig,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fleet: lab_fleet(),
            requests: 23,
            vm_memory_mb: 1024,
            cpu_model: CpuModel::Intel,
            inter_arrival_seconds: 300.0,
            lease_hours: 24,
            horizon_seconds: 3600.0,
            tick_seconds: 1,
            sim: SimDriverConfig::default(),
            scheduler: SchedulerConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.requests == 0 {
            return bad("request count must be at least 1");
        }
        if self.vm_memory_mb == 0 {
            return bad("vm memory must be positive");
        }
        if !(self.inter_arrival_seconds.is_finite() && self.inter_arrival_seconds >= 0.0) {
            return bad("inter-arrival must be >= 0");
        }
        if !(self.horizon_seconds.is_finite() && self.horizon_seconds >= 0.0) {
            return bad("horizon must be >= 0");
        }
        if self.lease_hours == 0 || self.tick_seconds == 0 {
            return bad("lease and tick must be positive");
        }
        if self.fleet.iter().any(|h| h.total_mem == 0) {
            return bad("host memory must be positive");
        }
        self.sim
            .validate()
            .map_err(|e| ExperimentError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnaroundPoint {
    /// 1-based request index, i.e. the load level at submission.
    pub load: usize,
    /// Seconds from submission to LIVE; `None` if never served.
    pub turnaround_s: Option<f64>,
    pub node_id: Option<NodeId>,
    /// Set the host was chosen from at submission; `None` if queued.
    pub set_label: Option<SetLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub points: Vec<TurnaroundPoint>,
    /// Every driver outcome in execution order.
    pub outcomes: Vec<(JobId, DriverOutcome)>,
    /// Capacity audit at the end of the run; empty when consistent.
    pub audit: Vec<String>,
}

fn sim_image(vm_id: VmId) -> VmImage {
    VmImage {
        vm_id,
        os_name: "Windows XP SP3".to_string(),
        clone_vmx_path: format!("{DEFAULT_SHARE_PREFIX}base/winxp/clone.vmx"),
        os_family: OsFamily::Windows,
        display_name: "Windows XP".to_string(),
        preconfig: PreconfigChecklist::complete(),
    }
}

struct Harness {
    engine: Engine,
    now: Timestamp,
    tick: Duration,
    outcomes: Vec<(JobId, DriverOutcome)>,
}

impl Harness {
    fn drive(&mut self) -> Result<(), ExperimentError> {
        for report in self.engine.drive()? {
            for step in report.steps {
                if let Some(o) = step.outcome {
                    self.outcomes.push((report.job_id, o));
                }
            }
        }
        Ok(())
    }

    /// Runs the lease clock forward to `until`.
    fn advance(&mut self, until: Timestamp) -> Result<(), ExperimentError> {
        while self.now < until {
            let step = until.saturating_since(self.now).min(self.tick);
            self.now += step;
            if !self.engine.tick_leases(self.now, step).is_empty() {
                self.engine.confirm_all_stopped(self.now);
                self.drive()?;
            }
        }
        Ok(())
    }
}

/// Runs the experiment. Deterministic for a fixed configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, ExperimentError> {
    cfg.validate()?;
    let catalog = Arc::new(Catalog::default());
    let vm_id = VmId(1);
    catalog
        .insert(sim_image(vm_id))
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;

    let registry = Arc::new(HostRegistry::new());
    for (i, host) in cfg.fleet.iter().enumerate() {
        let payload = HeartbeatPayload {
            ip_or_hostname: format!("10.0.{}.{}", i / 250, i % 250 + 1),
            distro_name: "simulated".to_string(),
            cpu_model: host.cpu_model,
            architecture: Architecture::Bits32,
            total_mem: host.total_mem,
            avail_mem: host.total_mem,
            sent_at: Timestamp::ZERO,
        };
        registry
            .register_host(Registration::new(payload, Automation::Both, host.max_instances))
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    }

    let sim = SimDriverConfig {
        seed: cfg.seed,
        ..cfg.sim.clone()
    };
    let driver = Arc::new(SimDriver::new(sim).map_err(|e| ExperimentError::Invalid(e.to_string()))?);
    let lifecycle = LifecycleConfig {
        scheduler: cfg.scheduler,
        vm_memory_mb: cfg.vm_memory_mb,
        ..LifecycleConfig::default()
    };
    let engine = Engine::new(
        catalog,
        registry,
        driver,
        Arc::new(MemorySink::new()),
        lifecycle,
        [SIM_TOKEN.to_string()],
    )?;
    let mut h = Harness {
        engine,
        now: Timestamp::ZERO,
        tick: Duration::from_secs(cfg.tick_seconds),
        outcomes: Vec::new(),
    };

    let mut submitted = Vec::with_capacity(cfg.requests);
    for i in 0..cfg.requests {
        let arrival = Timestamp::ZERO + millis_duration(cfg.inter_arrival_seconds * i as f64);
        h.advance(arrival)?;
        let outcome = h.engine.intake(
            SubmitRequest {
                requestor: format!("load{}", i + 1),
                vm_id,
                architecture: cfg.cpu_model,
                lease_time_hours: cfg.lease_hours,
                request_type: RequestType::User,
            },
            SIM_TOKEN,
            h.now,
        )?;
        h.drive()?;
        let label = outcome.decision.and_then(|d| d.set_label());
        submitted.push((outcome.record.job_id, label));
    }
    let end = h.now + millis_duration(cfg.horizon_seconds);
    h.advance(end)?;

    let points = submitted
        .into_iter()
        .enumerate()
        .map(|(i, (job_id, set_label))| {
            let rec = h.engine.get(job_id).expect("submitted job exists");
            TurnaroundPoint {
                load: i + 1,
                turnaround_s: rec
                    .live_at
                    .map(|t| t.saturating_since(rec.submitted_at).as_secs_f64()),
                node_id: rec.live_at.and(rec.node_id),
                set_label,
            }
        })
        .collect();
    Ok(ExperimentRun {
        points,
        outcomes: h.outcomes,
        audit: h.engine.audit(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSlope {
    pub label: String,
    pub first_load: usize,
    pub last_load: usize,
    pub points: usize,
    /// Least-squares slope in seconds per request; 0 for a single point.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub segments: Vec<SegmentSlope>,
    /// Loads whose turnaround is lower than the previous served load's.
    pub monotone_violations: Vec<usize>,
    /// (max - min) / mean over loads 1..=5, when all five were served.
    pub initial_spread: Option<f64>,
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

const SEGMENTS: [(&str, usize, usize); 3] = [("1-5", 1, 5), ("6-15", 6, 15), ("16+", 16, usize::MAX)];

/// Per-segment slopes over served points. Segments with no points are
/// omitted, so short runs yield one or two segments.
pub fn summarize_curve(points: &[TurnaroundPoint]) -> CurveSummary {
    let served: Vec<(usize, f64)> = points
        .iter()
        .filter_map(|p| p.turnaround_s.map(|t| (p.load, t)))
        .collect();
    let segments = SEGMENTS
        .iter()
        .filter_map(|&(label, lo, hi)| {
            let seg: Vec<&(usize, f64)> =
                served.iter().filter(|(l, _)| (lo..=hi).contains(l)).collect();
            if seg.is_empty() {
                return None;
            }
            let xs: Vec<f64> = seg.iter().map(|(l, _)| *l as f64).collect();
            let ys: Vec<f64> = seg.iter().map(|(_, t)| *t).collect();
            Some(SegmentSlope {
                label: label.to_string(),
                first_load: seg[0].0,
                last_load: seg[seg.len() - 1].0,
                points: seg.len(),
                slope: least_squares_slope(&xs, &ys),
            })
        })
        .collect();
    let monotone_violations = served
        .windows(2)
        .filter(|w| w[1].1 < w[0].1)
        .map(|w| w[1].0)
        .collect();
    let first: Vec<f64> = served
        .iter()
        .filter(|(l, _)| *l <= 5)
        .map(|(_, t)| *t)
        .collect();
    let initial_spread = (first.len() == 5).then(|| {
        let max = first.iter().cloned().fold(f64::MIN, f64::max);
        let min = first.iter().cloned().fold(f64::MAX, f64::min);
        let mean = first.iter().sum::<f64>() / 5.0;
        (max - min) / mean
    });
    CurveSummary {
        segments,
        monotone_violations,
        initial_spread,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Json,
}

impl std::str::FromStr for CurveFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CurveFormat::Csv),
            "json" => Ok(CurveFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: &str = "load,turnaround_s,node_id,set_label";

pub fn render_csv(points: &[TurnaroundPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        let turnaround = p.turnaround_s.map(|t| format!("{t:.3}")).unwrap_or_default();
        let node = p.node_id.map(|n| n.0.to_string()).unwrap_or_default();
        let label = p.set_label.map_or("QUEUE", SetLabel::as_str);
        let _ = writeln!(out, "{},{turnaround},{node},{label}", p.load);
    }
    out
}

pub fn render_json(points: &[TurnaroundPoint]) -> String {
    let mut out = serde_json::to_string_pretty(points).expect("points serialize");
    out.push('\n');
    out
}

pub fn emit_curve(points: &[TurnaroundPoint], format: CurveFormat, path: &Path) -> std::io::Result<()> {
    let body = match format {
        CurveFormat::Csv => render_csv(points),
        CurveFormat::Json => render_json(points),
    };
    std::fs::write(path, body)
}
