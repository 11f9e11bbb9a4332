//! The `vitl` admin client: a thin wrapper over the HTTP API.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use vitl_core::catalog::parse_seed;
use vitl_core::model::{Architecture, Automation, CpuModel, RequestType};

use crate::api::TOKEN_HEADER;

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "vitl", about = "Administer a vitl lab service")]
pub struct Cli {
    /// Base URL of the service.
    #[arg(long, global = true, env = "VITL_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    #[arg(long, global = true, env = "VITL_TOKEN")]
    pub token: Option<String>,
    /// Print raw response bodies.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Images(ImagesCmd),
    #[command(subcommand)]
    Hosts(HostsCmd),
    #[command(subcommand)]
    Requests(RequestsCmd),
    #[command(subcommand)]
    Placements(PlacementsCmd),
    #[command(subcommand)]
    Log(LogCmd),
}

#[derive(Debug, Subcommand)]
pub enum ImagesCmd {
    List,
    /// Load images from a file with one JSON object per line.
    Seed { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum HostsCmd {
    List,
    Register(RegisterArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub address: String,
    #[arg(long, default_value = "INTEL")]
    pub cpu: String,
    #[arg(long, default_value = "64-BIT")]
    pub arch: String,
    #[arg(long)]
    pub total_mem: u64,
    /// Defaults to `total_mem`.
    #[arg(long)]
    pub avail_mem: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pub max_instances: u32,
    #[arg(long, default_value = "B")]
    pub automation: String,
    #[arg(long, default_value = "linux")]
    pub distro: String,
}

#[derive(Debug, Subcommand)]
pub enum RequestsCmd {
    Submit {
        #[arg(long)]
        vm: u32,
        #[arg(long)]
        cpu: String,
        /// Lease in hours.
        #[arg(long)]
        lease: u32,
        #[arg(long, env = "USER", default_value = "admin")]
        requestor: String,
        #[arg(long = "type", default_value = "USER")]
        request_type: String,
    },
    List,
    Get { id: String },
    Stop { id: String },
}

#[derive(Debug, Subcommand)]
pub enum PlacementsCmd {
    /// Dry-run host selection without reserving anything.
    Simulate {
        #[arg(long)]
        vm: Option<u32>,
        #[arg(long)]
        cpu: String,
        #[arg(long)]
        mem: Option<u64>,
        #[arg(long = "type", default_value = "USER")]
        request_type: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum LogCmd {
    Tail {
        #[arg(long)]
        job: Option<u32>,
        #[arg(long)]
        after: Option<u64>,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
}

enum Method {
    Get,
    Post(Option<Value>),
}

struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

enum Failure {
    Unreachable(String),
    Api(String),
    Usage(String),
}

impl Client {
    fn new(server: &str, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .new_agent();
        Self {
            agent,
            base: server.trim_end_matches('/').to_string(),
            token,
        }
    }

    /// Returns the raw body of a 2xx response.
    fn call(&self, method: Method, path: &str) -> Result<String, Failure> {
        let url = format!("{}{}", self.base, path);
        let sent = match method {
            Method::Get => {
                let mut req = self.agent.get(&url);
                if let Some(t) = &self.token {
                    req = req.header(TOKEN_HEADER, t);
                }
                req.call()
            }
            Method::Post(body) => {
                let mut req = self.agent.post(&url).header("content-type", "application/json");
                if let Some(t) = &self.token {
                    req = req.header(TOKEN_HEADER, t);
                }
                req.send(body.unwrap_or(Value::Null).to_string())
            }
        };
        let mut resp = sent.map_err(|e| Failure::Unreachable(format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Unreachable(e.to_string()))?;
        if (200..300).contains(&status) {
            return Ok(text);
        }
        let msg = match serde_json::from_str::<Value>(&text) {
            Ok(v) => format!(
                "error {}: {}",
                v["error"]["code"].as_str().unwrap_or("unknown"),
                v["error"]["message"].as_str().unwrap_or(&text)
            ),
            Err(_) => format!("error http_{status}: {}", text.trim()),
        };
        Err(Failure::Api(msg))
    }
}

fn parse(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or(Value::Null)
}

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

fn render_decision(d: &Value) -> String {
    match d.get("node_id") {
        Some(node) => format!(
            "node {} ({}, score {:.4})",
            s(node),
            s(&d["set_label"]),
            d["score"].as_f64().unwrap_or(f64::NAN)
        ),
        None => "QUEUE".to_string(),
    }
}

fn render_request(r: &Value) -> String {
    format!(
        "job {}  {}  vm {}  node {}  ip {}  remaining {}s  reason {}",
        s(&r["job_id"]),
        s(&r["status"]),
        s(&r["vm_id"]),
        s(&r["node_id"]),
        if r["ip_address"].as_str().is_some_and(|a| !a.is_empty()) {
            s(&r["ip_address"])
        } else {
            "-".into()
        },
        s(&r["time_remaining_seconds"]),
        if r["status_reason"].as_str().is_some_and(|a| !a.is_empty()) {
            s(&r["status_reason"])
        } else {
            "-".into()
        },
    )
}

fn lines<F: Fn(&Value) -> String>(v: &Value, f: F) -> String {
    v.as_array()
        .map(|a| a.iter().map(f).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

fn job_path(id: &str) -> Result<String, Failure> {
    let n = id.strip_prefix("job-").unwrap_or(id);
    n.parse::<u32>()
        .map(|n| n.to_string())
        .map_err(|_| Failure::Usage(format!("`{id}` is not a job id")))
}

fn token<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Value, Failure>
where
    T: serde::Serialize,
    T::Err: std::fmt::Display,
{
    let v: T = text
        .parse()
        .map_err(|e| Failure::Usage(format!("--{flag}: {e}")))?;
    Ok(serde_json::to_value(v).expect("token serializes"))
}

fn run(cli: Cli) -> Result<String, Failure> {
    let c = Client::new(&cli.server, cli.token.clone());
    let json = cli.json;
    let out = |raw: String, human: &dyn Fn(&Value) -> String| -> String {
        if json {
            raw.trim_end().to_string()
        } else {
            human(&parse(&raw))
        }
    };
    Ok(match cli.command {
        Command::Images(ImagesCmd::List) => {
            let raw = c.call(Method::Get, "/images")?;
            out(raw, &|v| {
                lines(v, |i| {
                    format!("{}  {}  {}  {}", s(&i["vm_id"]), s(&i["os_family"]), s(&i["display_name"]), s(&i["clone_vmx_path"]))
                })
            })
        }
        Command::Images(ImagesCmd::Seed { file }) => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
            let images = parse_seed(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            let body = serde_json::to_value(images).expect("images serialize");
            let raw = c.call(Method::Post(Some(body)), "/images")?;
            out(raw, &|v| format!("inserted {}", s(&v["inserted"])))
        }
        Command::Hosts(HostsCmd::List) => {
            let raw = c.call(Method::Get, "/hosts")?;
            out(raw, &|v| {
                lines(v, |h| {
                    format!(
                        "node {}  {}  {}  {}  mem {}/{}  vms {}/{}",
                        s(&h["node_id"]),
                        s(&h["ip_addr"]),
                        s(&h["cpu_model"]),
                        s(&h["machine_status"]),
                        s(&h["avail_mem"]),
                        s(&h["total_mem"]),
                        s(&h["runningvms"]),
                        s(&h["max_instances"])
                    )
                })
            })
        }
        Command::Hosts(HostsCmd::Register(a)) => {
            let body = serde_json::json!({
                "ip_or_hostname": a.address,
                "distro_name": a.distro,
                "cpu_model": token::<CpuModel>("cpu", &a.cpu)?,
                "architecture": token::<Architecture>("arch", &a.arch)?,
                "total_mem": a.total_mem,
                "avail_mem": a.avail_mem.unwrap_or(a.total_mem),
                "automation": token::<Automation>("automation", &a.automation)?,
                "max_instances": a.max_instances,
            });
            let raw = c.call(Method::Post(Some(body)), "/hosts/register")?;
            out(raw, &|v| format!("registered node {}", s(&v["node_id"])))
        }
        Command::Requests(RequestsCmd::Submit {
            vm,
            cpu,
            lease,
            requestor,
            request_type,
        }) => {
            let body = serde_json::json!({
                "requestor": requestor,
                "vm_id": vm,
                "architecture": token::<CpuModel>("cpu", &cpu)?,
                "lease_time_hours": lease,
                "request_type": token::<RequestType>("type", &request_type)?,
            });
            let raw = c.call(Method::Post(Some(body)), "/requests")?;
            out(raw, &|v| {
                format!(
                    "job_id {}  {}  {}",
                    s(&v["job_id"]),
                    s(&v["status"]),
                    render_decision(&v["decision"])
                )
            })
        }
        Command::Requests(RequestsCmd::List) => {
            let raw = c.call(Method::Get, "/requests")?;
            out(raw, &|v| lines(v, render_request))
        }
        Command::Requests(RequestsCmd::Get { id }) => {
            let raw = c.call(Method::Get, &format!("/requests/{}", job_path(&id)?))?;
            out(raw, &render_request)
        }
        Command::Requests(RequestsCmd::Stop { id }) => {
            let raw = c.call(Method::Post(None), &format!("/requests/{}:stop", job_path(&id)?))?;
            out(raw, &render_request)
        }
        Command::Placements(PlacementsCmd::Simulate {
            vm,
            cpu,
            mem,
            request_type,
        }) => {
            let body = serde_json::json!({
                "vm_id": vm,
                "cpu_model": token::<CpuModel>("cpu", &cpu)?,
                "required_mem": mem,
                "request_type": token::<RequestType>("type", &request_type)?,
            });
            let raw = c.call(Method::Post(Some(body)), "/placements:simulate")?;
            out(raw, &|v| {
                let mut text = render_decision(&v["decision"]);
                for h in v["hosts"].as_array().into_iter().flatten() {
                    text.push_str(&format!(
                        "\n  node {}  eligible {}  {}  score {}",
                        s(&h["node_id"]),
                        s(&h["eligible"]),
                        s(&h["set_label"]),
                        h["score"].as_f64().map_or("-".to_string(), |x| format!("{x:.4}"))
                    ));
                }
                text
            })
        }
        Command::Log(LogCmd::Tail { job, after, limit }) => {
            let mut query = format!("/events?limit={limit}");
            if let Some(j) = job {
                query.push_str(&format!("&job_id={j}"));
            }
            if let Some(a) = after {
                query.push_str(&format!("&after={a}"));
            }
            let raw = c.call(Method::Get, &query)?;
            out(raw, &|v| {
                lines(v, |e| {
                    format!(
                        "#{} job {}  {} -> {}  {}",
                        s(&e["seq"]),
                        s(&e["job_id"]),
                        s(&e["from"]),
                        s(&e["to"]),
                        s(&e["event"])
                    )
                })
            })
        }
    })
}

/// Runs one invocation and returns the exit code with the text to print.
pub fn cli_dispatch<I, T>(argv: I) -> (i32, String)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return (code, e.to_string());
        }
    };
    match run(cli) {
        Ok(text) => (EXIT_OK, text),
        Err(Failure::Api(msg)) => (EXIT_API, msg),
        Err(Failure::Usage(msg)) => (EXIT_USAGE, msg),
        Err(Failure::Unreachable(msg)) => (EXIT_UNREACHABLE, format!("unreachable: {msg}")),
    }
}
