//! The HTTP service. All mutations go through one lock around the
//! lifecycle engine; pipelines run as tasks that sleep out the simulated
//! step durations and report back through the same lock.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use vitl_core::catalog::{Catalog, CatalogError};
use vitl_core::config::ServiceConfig;
use vitl_core::lifecycle::{
    Engine, LifecycleError, RequestStatus, SubmitRequest, TransitionRecord,
};
use vitl_core::model::{JobId, NodeId, VmImage};
use vitl_core::notify::OutboxSink;
use vitl_core::persist::{self, PersistError, ServiceState};
use vitl_core::provisioner::{SimConfigError, SimDriver};
use vitl_core::registry::{HeartbeatPayload, HostRegistry, Registration, RegistryError};
use vitl_core::scheduler::{explain_placement, PlacementConstraints};
use vitl_core::time::{Clock, Timestamp};

use crate::api::{
    ErrorBody, ErrorDetail, HeartbeatBody, ImagesBody, ImagesInserted, RegisterBody,
    RegisterResponse, RequestView, SimulateBody, SubmitBody, SubmitResponse, TOKEN_HEADER,
};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn code(&self) -> &'static str {
        self.code
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
                details: self.details,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        let status = match &e {
            LifecycleError::UnknownJob(_) => StatusCode::NOT_FOUND,
            LifecycleError::IllegalTransition { .. } | LifecycleError::Invariant { .. } => {
                StatusCode::CONFLICT
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let code = match &e {
            LifecycleError::UnknownJob(_) => "job_not_found",
            LifecycleError::UnknownImage(_) => "unknown_image",
            LifecycleError::InvalidLease => "invalid_lease",
            LifecycleError::InvalidRequest(_) => "invalid_request",
            LifecycleError::IllegalTransition { .. } => "illegal_transition",
            LifecycleError::Invariant { .. } => "invariant_violation",
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match &e {
            RegistryError::Duplicate { existing, .. } => {
                let existing = existing.0;
                ApiError::new(StatusCode::CONFLICT, "duplicate_host", e.to_string())
                    .with_details(serde_json::json!({ "existing_node_id": existing }))
            }
            RegistryError::NotFound(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "host_not_found", e.to_string())
            }
            RegistryError::Malformed(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_heartbeat", e.to_string())
            }
            RegistryError::UnknownReservation(_) => {
                ApiError::new(StatusCode::CONFLICT, "unknown_reservation", e.to_string())
            }
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match &e {
            CatalogError::Duplicate(_) => {
                ApiError::new(StatusCode::CONFLICT, "duplicate_image", e.to_string())
            }
            CatalogError::NotServable { violations, .. } => {
                let violations = serde_json::json!({ "violations": violations });
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "image_not_servable", e.to_string())
                    .with_details(violations)
            }
            CatalogError::Seed { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string())
            }
        }
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.body_text()))
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Driver(#[from] SimConfigError),
    #[error("{0}")]
    Config(String),
    #[error("loading saved state: {0}")]
    Persist(#[from] PersistError),
    #[error("restoring saved state: {0}")]
    Restore(String),
}

struct LeaseClock {
    accounted: Timestamp,
}

/// Appends one line per transition to the service log; the request's
/// `log_file_path` names its section.
struct EventLog {
    path: PathBuf,
    written: usize,
}

pub struct Service {
    engine: Mutex<Engine>,
    registry: Arc<HostRegistry>,
    catalog: Arc<Catalog>,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    lease_clock: Mutex<LeaseClock>,
    event_log: Mutex<EventLog>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("listen", &self.config.listen_address)
            .finish_non_exhaustive()
    }
}

/// Parses `42`, `job-42` or `42:stop` style path segments.
fn parse_job(segment: &str) -> Option<JobId> {
    segment
        .strip_prefix("job-")
        .unwrap_or(segment)
        .parse::<u32>()
        .ok()
        .filter(|n| *n > 0)
        .map(JobId)
}

fn token_from(headers: &HeaderMap) -> Option<String> {
    if let Some(v) = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        return Some(v.trim().to_string());
    }
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|v| v.trim().to_string())
}

impl Service {
    /// Builds the service and restores any saved state.
    pub fn new(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>, ServiceError> {
        config
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let catalog = Arc::new(Catalog::new(config.share_prefix.clone()));
        let registry = Arc::new(HostRegistry::new());
        let driver = Arc::new(SimDriver::new(config.sim_driver.clone()).map_err(ServiceError::Driver)?);
        let sink = Arc::new(OutboxSink::new(config.outbox_path.clone()));
        let mut engine = Engine::new(
            catalog.clone(),
            registry.clone(),
            driver,
            sink,
            config.lifecycle(),
            config.tokens.iter().cloned(),
        )
        .map_err(|e| ServiceError::Config(e.to_string()))?;

        let mut written = 0;
        if let Some(dir) = &config.persistence_path {
            let state = persist::load_or_default(dir).map_err(ServiceError::Persist)?;
            for image in &state.images {
                if let Some(problem) = catalog.validate(image).first() {
                    return Err(ServiceError::Restore(format!("{}: {problem}", image.vm_id)));
                }
            }
            catalog.replace_all(state.images);
            registry.import(state.registry);
            written = state.engine.events.len();
            engine.import(state.engine);
        }
        let now = clock.now();
        Ok(Arc::new(Self {
            engine: Mutex::new(engine),
            registry,
            catalog,
            lease_clock: Mutex::new(LeaseClock { accounted: now }),
            event_log: Mutex::new(EventLog {
                path: config.service_log.clone(),
                written,
            }),
            config,
            clock,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn snapshot(&self, engine: &Engine) -> ServiceState {
        ServiceState {
            images: self.catalog.list(),
            registry: self.registry.export(),
            engine: engine.export(),
        }
    }

    /// Runs `f` under the engine lock. On success the new state is saved
    /// (when persistence is configured) and newly dispatched pipelines are
    /// started; if saving fails the in-memory state is rolled back.
    fn mutate<T>(
        self: &Arc<Self>,
        f: impl FnOnce(&mut Engine, Timestamp) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let mut engine = self.engine.lock();
        let before = self
            .config
            .persistence_path
            .as_ref()
            .map(|_| self.snapshot(&engine));
        let now = self.clock.now();
        let out = f(&mut engine, now)?;
        if let (Some(dir), Some(before)) = (&self.config.persistence_path, before) {
            let after = self.snapshot(&engine);
            if after != before {
                if let Err(e) = persist::persist(dir, &after) {
                    self.catalog.replace_all(before.images);
                    self.registry.import(before.registry);
                    engine.import(before.engine);
                    tracing::error!("save failed, change rolled back: {e}");
                    return Err(ApiError::new(
                        StatusCode::INTERNAL_SERVER_ERROR,
                        "persistence_failed",
                        "the change could not be saved and was not applied",
                    ));
                }
            }
        }
        self.append_event_log(&engine);
        let dispatch = engine.take_dispatch();
        drop(engine);
        for (job_id, _) in dispatch {
            self.spawn_pipeline(job_id);
        }
        Ok(out)
    }

    fn append_event_log(&self, engine: &Engine) {
        let mut log = self.event_log.lock();
        let events = engine.events();
        if log.written >= events.len() {
            return;
        }
        let mut text = String::new();
        for e in &events[log.written..] {
            let section = engine
                .get(e.job_id)
                .map(|r| r.log_file_path.as_str())
                .unwrap_or("");
            text.push_str(&format!(
                "{}\t{}\t{}\t{} -> {}\t{}\n",
                e.at, section, e.seq, e.from, e.to, e.event
            ));
        }
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log.path)
            .and_then(|mut f| f.write_all(text.as_bytes()));
        match written {
            Ok(()) => log.written = events.len(),
            Err(e) => tracing::warn!("service log {}: {e}", log.path.display()),
        }
    }

    fn scaled(&self, d: Duration) -> Duration {
        d.mul_f64(self.config.time_scale)
    }

    fn spawn_pipeline(self: &Arc<Self>, job_id: JobId) {
        let svc = self.clone();
        tokio::spawn(async move { svc.run_pipeline(job_id).await });
    }

    async fn run_pipeline(self: Arc<Self>, job_id: JobId) {
        let started = self.mutate(|engine, now| {
            match engine.get(job_id).map(|r| r.status) {
                Some(RequestStatus::Assigned) => {
                    engine.begin_provisioning(job_id, now)?;
                    Ok(true)
                }
                Some(RequestStatus::Processing) => Ok(true),
                _ => Ok(false),
            }
        });
        if !matches!(started, Ok(true)) {
            return;
        }
        loop {
            let report = self.mutate(|engine, now| {
                if engine.next_step(job_id).is_none() {
                    return Ok(None);
                }
                Ok(Some(engine.execute_step(job_id, now)?))
            });
            let report = match report {
                Ok(Some(r)) => r,
                Ok(None) => return,
                Err(e) => {
                    tracing::warn!("{job_id}: pipeline stopped: {}", e.message);
                    return;
                }
            };
            tokio::time::sleep(self.scaled(report.duration)).await;
            match report.status {
                RequestStatus::Processing => continue,
                RequestStatus::Incomplete => {
                    let _ = self.mutate(|engine, now| Ok(engine.reassign_incomplete(job_id, now)?));
                    return;
                }
                _ => return,
            }
        }
    }

    /// Restarts pipelines for work that was in flight when state was saved.
    pub fn resume(self: &Arc<Self>) {
        let pending: Vec<JobId> = {
            let mut engine = self.engine.lock();
            let mut jobs: Vec<JobId> = engine.take_dispatch().into_iter().map(|(j, _)| j).collect();
            jobs.extend(
                engine
                    .requests()
                    .filter(|r| r.status == RequestStatus::Processing)
                    .map(|r| r.job_id),
            );
            jobs
        };
        for job in pending {
            self.spawn_pipeline(job);
        }
    }

    /// One pass of the periodic work: liveness sweep, lease clock, teardown
    /// confirmation.
    pub fn tick(self: &Arc<Self>) {
        let threshold = self.config.offline_threshold();
        let result = self.mutate(|engine, now| {
            self.registry.sweep_liveness(now, threshold);
            let elapsed = {
                let mut lc = self.lease_clock.lock();
                let secs = now.saturating_since(lc.accounted).as_secs();
                lc.accounted += Duration::from_secs(secs);
                secs
            };
            if elapsed > 0 {
                engine.tick_leases(now, Duration::from_secs(elapsed));
            }
            engine.confirm_all_stopped(now);
            Ok(())
        });
        if let Err(e) = result {
            tracing::warn!("tick: {}", e.message);
        }
    }

    /// Runs [`Service::tick`] forever at the configured period.
    pub fn spawn_ticker(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let svc = self.clone();
        let period = Duration::from_secs(self.config.tick_seconds);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                svc.tick();
            }
        })
    }

    pub fn seed_images(self: &Arc<Self>, images: Vec<VmImage>) -> Result<usize, ApiError> {
        self.mutate(|_, _| Ok(self.catalog.insert_all(images)?))
    }

    fn authorize_mutation(&self, headers: &HeaderMap) -> Result<String, ApiError> {
        let token = token_from(headers).ok_or_else(|| {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "missing_token",
                format!("the {TOKEN_HEADER} header is required"),
            )
        })?;
        let valid = self.engine.lock().is_valid_token(&token);
        if valid {
            Ok(token)
        } else {
            Err(ApiError::new(StatusCode::UNAUTHORIZED, "invalid_token", "token not recognized"))
        }
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/requests", post(submit_request).get(list_requests))
            .route("/requests/{target}", get(get_request).post(request_action))
            .route("/images", get(list_images).post(add_images))
            .route("/hosts", get(list_hosts))
            .route("/hosts/register", post(register_host))
            .route("/hosts/{node_id}/heartbeat", post(heartbeat))
            .route("/placements:simulate", post(simulate_placement))
            .route("/events", get(list_events))
            .route("/healthz", get(|| async { "ok" }))
            .fallback(|| async {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_route", "no such endpoint")
            })
            .with_state(self.clone())
    }
}

type Svc = State<Arc<Service>>;

async fn submit_request(
    State(svc): Svc,
    headers: HeaderMap,
    payload: Result<Json<SubmitBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let token = token_from(&headers).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNAUTHORIZED,
            "missing_token",
            format!("the {TOKEN_HEADER} header is required"),
        )
    })?;
    let b = body(payload)?;
    let req = SubmitRequest {
        requestor: b.requestor,
        vm_id: b.vm_id,
        architecture: b.architecture,
        lease_time_hours: b.lease_time_hours,
        request_type: b.request_type,
    };
    let outcome = svc.mutate(|engine, now| Ok(engine.intake(req, &token, now)?))?;
    let record = outcome.record;
    if record.status == RequestStatus::Unauthorized {
        let job_id = record.job_id.0;
        return Err(
            ApiError::new(StatusCode::UNAUTHORIZED, "invalid_token", "token not recognized")
                .with_details(serde_json::json!({ "job_id": job_id, "status": record.status })),
        );
    }
    let resp = SubmitResponse {
        job_id: record.job_id.0,
        status: record.status,
        decision: outcome.decision,
        request: record,
    };
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn list_requests(State(svc): Svc) -> Response {
    let engine = svc.engine.lock();
    Json(engine.requests().cloned().collect::<Vec<_>>()).into_response()
}

fn job_not_found(segment: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "job_not_found", format!("no request `{segment}`"))
}

async fn get_request(State(svc): Svc, Path(target): Path<String>) -> Result<Response, ApiError> {
    let job = parse_job(&target).ok_or_else(|| job_not_found(&target))?;
    let engine = svc.engine.lock();
    let record = engine.get(job).cloned().ok_or_else(|| job_not_found(&target))?;
    let credentials = (record.status == RequestStatus::Live)
        .then(|| engine.config().default_credentials.clone());
    Ok(Json(RequestView { record, credentials }).into_response())
}

/// `POST /requests/{id}:stop`.
async fn request_action(
    State(svc): Svc,
    headers: HeaderMap,
    Path(target): Path<String>,
) -> Result<Response, ApiError> {
    let Some(id) = target.strip_suffix(":stop") else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_route", "no such endpoint"));
    };
    svc.authorize_mutation(&headers)?;
    let job = parse_job(id).ok_or_else(|| job_not_found(id))?;
    let rec = svc.mutate(|engine, now| Ok(engine.stop_request(job, now)?))?;
    Ok(Json(rec).into_response())
}

async fn list_images(State(svc): Svc) -> Response {
    Json(svc.catalog.list()).into_response()
}

async fn add_images(
    State(svc): Svc,
    headers: HeaderMap,
    payload: Result<Json<ImagesBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    svc.authorize_mutation(&headers)?;
    let images = body(payload)?.into_vec();
    let inserted = svc.seed_images(images)?;
    Ok((StatusCode::CREATED, Json(ImagesInserted { inserted })).into_response())
}

async fn list_hosts(State(svc): Svc) -> Response {
    Json(svc.registry.list()).into_response()
}

fn payload_from(b: HeartbeatBody, now: Timestamp) -> HeartbeatPayload {
    HeartbeatPayload {
        ip_or_hostname: b.ip_or_hostname,
        distro_name: b.distro_name,
        cpu_model: b.cpu_model,
        architecture: b.architecture,
        total_mem: b.total_mem,
        avail_mem: b.avail_mem,
        sent_at: now,
    }
}

async fn register_host(
    State(svc): Svc,
    headers: HeaderMap,
    payload: Result<Json<RegisterBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    svc.authorize_mutation(&headers)?;
    let b = body(payload)?;
    if b.max_instances == 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_heartbeat",
            "max_instances must be positive",
        ));
    }
    let registry = svc.registry.clone();
    let resp = svc.mutate(|engine, now| {
        let reg = Registration {
            payload: payload_from(b.heartbeat, now),
            automation: b.automation,
            max_instances: b.max_instances,
            hostname: b.hostname,
            mac_addr: b.mac_addr,
        };
        let node_id = registry.register_host(reg)?;
        engine.dequeue_on_capacity(node_id, now);
        let host = registry.get(node_id).expect("just registered");
        Ok(RegisterResponse { node_id, host })
    })?;
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn heartbeat(
    State(svc): Svc,
    headers: HeaderMap,
    Path(node): Path<String>,
    payload: Result<Json<HeartbeatBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    svc.authorize_mutation(&headers)?;
    let node_id = node
        .strip_prefix("node-")
        .unwrap_or(&node)
        .parse::<u32>()
        .map(NodeId)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "host_not_found", format!("no host `{node}`")))?;
    let b = body(payload)?;
    let registry = svc.registry.clone();
    let host = svc.mutate(|engine, now| {
        let host = registry.apply_heartbeat(node_id, &payload_from(b, now))?;
        engine.dequeue_on_capacity(node_id, now);
        Ok(host)
    })?;
    Ok(Json(host).into_response())
}

async fn simulate_placement(
    State(svc): Svc,
    payload: Result<Json<SimulateBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let b = body(payload)?;
    if let Some(vm) = b.vm_id {
        if svc.catalog.lookup(vm).is_none() {
            return Err(LifecycleError::UnknownImage(vm).into());
        }
    }
    let required_mem = b.required_mem.unwrap_or(svc.config.vm_memory_mb);
    if required_mem == 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            "required_mem must be positive",
        ));
    }
    let c = PlacementConstraints {
        cpu_model: b.cpu_model,
        required_mem,
        request_type: b.request_type,
        excluded_nodes: b.excluded_nodes,
    };
    let snapshot = svc.registry.snapshot_fleet();
    let report = explain_placement(&snapshot, &c, &svc.config.lifecycle().scheduler);
    Ok(Json(report).into_response())
}

#[derive(Debug, Default, Deserialize, Serialize)]
pub struct EventQuery {
    /// Only events with a sequence number above this.
    pub after: Option<u64>,
    pub job_id: Option<u32>,
    /// Keep only the last `limit` matching events.
    pub limit: Option<usize>,
}

async fn list_events(State(svc): Svc, Query(q): Query<EventQuery>) -> Response {
    let engine = svc.engine.lock();
    let mut events: Vec<TransitionRecord> = engine
        .events()
        .iter()
        .filter(|e| q.after.is_none_or(|a| e.seq > a))
        .filter(|e| q.job_id.is_none_or(|j| e.job_id.0 == j))
        .cloned()
        .collect();
    if let Some(limit) = q.limit {
        let skip = events.len().saturating_sub(limit);
        events.drain(..skip);
    }
    Json(events).into_response()
}

/// Binds the listener and serves until `shutdown` resolves.
pub async fn serve(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    svc.resume();
    let ticker = svc.spawn_ticker();
    let result = axum::serve(listener, svc.router())
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    result
}
