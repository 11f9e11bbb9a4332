//! On-disk tables.
//!
//! Each table is a line-delimited file: a header line naming the format,
//! table, version and record count, then one JSON record per line. A save
//! writes a complete new generation directory and then atomically swaps the
//! `CURRENT` pointer, so a crash mid-save leaves the previous generation
//! intact. Loading is all-or-nothing.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::lifecycle::{EngineTables, RequestRecord, TransitionRecord};
use crate::model::{JobId, VmImage};
use crate::registry::{HostRecord, RegistryTables, ReservationToken};
use crate::time::Timestamp;

pub const FORMAT: &str = "vitl-table";
pub const VERSION: u32 = 1;
const POINTER: &str = "CURRENT";

/// Everything the service persists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceState {
    pub images: Vec<VmImage>,
    pub registry: RegistryTables,
    pub engine: EngineTables,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    next_node_id: u32,
    next_reservation_id: u64,
    next_job_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format: String,
    table: String,
    version: u32,
    records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DispatchEntry {
    job_id: JobId,
    ready_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no saved state under {}", .0.display())]
    Missing(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Renders one table file.
pub fn encode_table<T: Serialize>(table: &str, records: &[T]) -> String {
    let header = Header {
        format: FORMAT.to_string(),
        table: table.to_string(),
        version: VERSION,
        records: records.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses one table file; `path` is only used in error messages. Line
/// numbers are 1-based and count the header.
pub fn decode_table<T: DeserializeOwned>(
    path: &Path,
    table: &str,
    text: &str,
) -> Result<Vec<T>, PersistError> {
    let corrupt = |line: usize, message: String| PersistError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| corrupt(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(first.trim_end_matches('\n'))
        .map_err(|e| corrupt(1, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.table != table {
        return Err(corrupt(
            1,
            format!("expected {FORMAT}/{table}, found {}/{}", header.format, header.table),
        ));
    }
    if header.version != VERSION {
        return Err(corrupt(1, format!("unsupported version {}", header.version)));
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if records.len() == header.records {
            return Err(corrupt(line, "more records than the header declares".into()));
        }
        let Some(body) = raw.strip_suffix('\n') else {
            return Err(corrupt(line, "truncated record".into()));
        };
        let rec = serde_json::from_str(body).map_err(|e| corrupt(line, e.to_string()))?;
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(corrupt(
            records.len() + 2,
            format!("expected {} records, found {}", header.records, records.len()),
        ));
    }
    Ok(records)
}

/// The table files of a state, in a fixed order.
pub fn encode_state(state: &ServiceState) -> Vec<(&'static str, String)> {
    let meta = Meta {
        next_node_id: state.registry.next_node_id,
        next_reservation_id: state.registry.next_reservation_id,
        next_job_id: state.engine.next_job_id,
    };
    let dispatch: Vec<DispatchEntry> = state
        .engine
        .dispatch
        .iter()
        .map(|&(job_id, ready_at)| DispatchEntry { job_id, ready_at })
        .collect();
    vec![
        ("meta", encode_table("meta", &[meta])),
        ("images", encode_table("images", &state.images)),
        ("hosts", encode_table("hosts", &state.registry.hosts)),
        ("reservations", encode_table("reservations", &state.registry.reservations)),
        ("requests", encode_table("requests", &state.engine.requests)),
        ("queue", encode_table("queue", &state.engine.queue)),
        ("dispatch", encode_table("dispatch", &dispatch)),
        ("events", encode_table("events", &state.engine.events)),
    ]
}

fn table_file(table: &str) -> String {
    format!("{table}.jsonl")
}

fn current_generation(dir: &Path) -> Result<Option<(u64, PathBuf)>, PersistError> {
    let pointer = dir.join(POINTER);
    let text = match fs::read_to_string(&pointer) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&pointer)(e)),
    };
    let name = text.trim();
    let generation = name
        .strip_prefix("gen-")
        .and_then(|n| n.parse::<u64>().ok())
        .ok_or_else(|| PersistError::Corrupt {
            path: pointer.clone(),
            line: 1,
            message: format!("bad generation pointer `{name}`"),
        })?;
    Ok(Some((generation, dir.join(name))))
}

/// Writes `state` as a new generation under `dir`.
pub fn persist(dir: &Path, state: &ServiceState) -> Result<PathBuf, PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let previous = current_generation(dir)?;
    let generation = previous.as_ref().map_or(1, |(g, _)| g + 1);
    let name = format!("gen-{generation:08}");
    let target = dir.join(&name);
    if target.exists() {
        fs::remove_dir_all(&target).map_err(io_err(&target))?;
    }
    fs::create_dir(&target).map_err(io_err(&target))?;
    for (table, body) in encode_state(state) {
        let path = target.join(table_file(table));
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    let staged = dir.join(format!("{POINTER}.tmp"));
    fs::write(&staged, format!("{name}\n")).map_err(io_err(&staged))?;
    let pointer = dir.join(POINTER);
    fs::rename(&staged, &pointer).map_err(io_err(&pointer))?;
    if let Some((_, old)) = previous {
        let _ = fs::remove_dir_all(old);
    }
    Ok(target)
}

fn read_table<T: DeserializeOwned>(gen_dir: &Path, table: &str) -> Result<Vec<T>, PersistError> {
    let path = gen_dir.join(table_file(table));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    decode_table(&path, table, &text)
}

/// Loads the current generation under `dir`.
pub fn load(dir: &Path) -> Result<ServiceState, PersistError> {
    let (_, gen_dir) =
        current_generation(dir)?.ok_or_else(|| PersistError::Missing(dir.to_path_buf()))?;
    let meta_path = gen_dir.join(table_file("meta"));
    let meta: Vec<Meta> = read_table(&gen_dir, "meta")?;
    let [meta] = <[Meta; 1]>::try_from(meta).map_err(|_| PersistError::Corrupt {
        path: meta_path,
        line: 1,
        message: "meta table must hold exactly one record".into(),
    })?;
    let images: Vec<VmImage> = read_table(&gen_dir, "images")?;
    let hosts: Vec<HostRecord> = read_table(&gen_dir, "hosts")?;
    let reservations: Vec<ReservationToken> = read_table(&gen_dir, "reservations")?;
    let requests: Vec<RequestRecord> = read_table(&gen_dir, "requests")?;
    let queue: Vec<JobId> = read_table(&gen_dir, "queue")?;
    let dispatch: Vec<DispatchEntry> = read_table(&gen_dir, "dispatch")?;
    let events: Vec<TransitionRecord> = read_table(&gen_dir, "events")?;
    Ok(ServiceState {
        images,
        registry: RegistryTables {
            hosts,
            reservations,
            next_node_id: meta.next_node_id,
            next_reservation_id: meta.next_reservation_id,
        },
        engine: EngineTables {
            requests,
            queue,
            dispatch: dispatch.into_iter().map(|d| (d.job_id, d.ready_at)).collect(),
            events,
            next_job_id: meta.next_job_id,
        },
    })
}

/// Like [`load`], but a directory with no saved state yields an empty state.
pub fn load_or_default(dir: &Path) -> Result<ServiceState, PersistError> {
    match load(dir) {
        Err(PersistError::Missing(_)) => Ok(ServiceState::default()),
        other => other,
    }
}

/// The files of the current generation, for inspection.
pub fn current_files(dir: &Path) -> Result<Vec<PathBuf>, PersistError> {
    let (_, gen_dir) =
        current_generation(dir)?.ok_or_else(|| PersistError::Missing(dir.to_path_buf()))?;
    Ok(encode_state(&ServiceState::default())
        .into_iter()
        .map(|(t, _)| gen_dir.join(table_file(t)))
        .collect())
}
