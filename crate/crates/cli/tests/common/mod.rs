#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::runtime::Runtime;
use tokio::sync::oneshot;
use vitl_cli::server::{serve, Service};
use vitl_core::config::ServiceConfig;
use vitl_core::time::SystemClock;

pub const TOKEN: &str = "test-token";

pub struct TestServer {
    pub url: String,
    pub dir: PathBuf,
    rt: Option<Runtime>,
    stop: Option<oneshot::Sender<()>>,
}

pub fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        listen_address: "127.0.0.1:0".into(),
        tokens: vec![TOKEN.into()],
        persistence_path: Some(dir.join("state")),
        outbox_path: dir.join("outbox.jsonl"),
        service_log: dir.join("vitl.log"),
        time_scale: 0.0,
        ..ServiceConfig::default()
    }
}

impl TestServer {
    pub fn start(dir: &TempDir) -> Self {
        Self::start_with(config(dir.path()))
    }

    pub fn start_with(cfg: ServiceConfig) -> Self {
        let dir = cfg
            .persistence_path
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let svc = Service::new(cfg, Arc::new(SystemClock)).expect("service starts");
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        rt.spawn(serve(svc, listener, async {
            let _ = rx.await;
        }));
        Self {
            url,
            dir,
            rt: Some(rt),
            stop: Some(tx),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.rt.take() {
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        call(&self.url, "GET", path, None, None)
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        call(&self.url, "POST", path, Some(TOKEN), Some(body))
    }

    pub fn post_as(&self, token: Option<&str>, path: &str, body: Value) -> (u16, Value) {
        call(&self.url, "POST", path, token, Some(body))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let agent = agent();
        let mut resp = agent
            .post(&format!("{}{}", self.url, path))
            .header("x-vitl-token", TOKEN)
            .header("content-type", "application/json")
            .send(body.to_string())
            .unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    /// Polls a request until `pred` holds or five seconds pass.
    pub fn wait_for(&self, job_id: u64, pred: impl Fn(&Value) -> bool) -> Value {
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            let (_, body) = self.get(&format!("/requests/{job_id}"));
            if pred(&body) || Instant::now() > deadline {
                return body;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn seed(&self) {
        let (status, body) = self.post("/images", json!([image(1), image(2)]));
        assert_eq!(status, 201, "{body}");
    }

    pub fn register(&self, address: &str, cpu: &str, mem: u64, max: u32) -> u64 {
        let (status, body) = self.post("/hosts/register", host(address, cpu, mem, max));
        assert_eq!(status, 201, "{body}");
        body["node_id"].as_u64().unwrap()
    }

    pub fn submit(&self, vm: u32, cpu: &str, hours: u32) -> (u16, Value) {
        self.post(
            "/requests",
            json!({"requestor": "alice", "vm_id": vm, "architecture": cpu, "lease_time_hours": hours}),
        )
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .new_agent()
}

pub fn call(
    base: &str,
    method: &str,
    path: &str,
    token: Option<&str>,
    body: Option<Value>,
) -> (u16, Value) {
    let agent = agent();
    let url = format!("{base}{path}");
    let sent = if method == "GET" {
        let mut req = agent.get(&url);
        if let Some(t) = token {
            req = req.header("x-vitl-token", t);
        }
        req.call()
    } else {
        let mut req = agent.post(&url).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("x-vitl-token", t);
        }
        req.send(body.unwrap_or(Value::Null).to_string())
    };
    let mut resp = sent.expect("server reachable");
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

pub fn image(id: u32) -> Value {
    json!({
        "vm_id": id,
        "os_name": "Windows XP SP3",
        "clone_vmx_path": format!("/mnt/vitl-share/xp{id}/clone.vmx"),
        "os_family": "WIN",
        "display_name": format!("XP {id}"),
        "autologin_set": true,
        "remote_server_installed": true,
        "firewall_configured": true,
        "guest_tools_installed": true,
        "screensaver_off": true,
        "auto_updates_off": true,
    })
}

pub fn host(address: &str, cpu: &str, mem: u64, max: u32) -> Value {
    json!({
        "ip_or_hostname": address,
        "distro_name": "Ubuntu",
        "cpu_model": cpu,
        "architecture": "32-bit",
        "total_mem": mem,
        "avail_mem": mem,
        "automation": "B",
        "max_instances": max,
    })
}

pub fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or("")
}
