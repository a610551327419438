//! Session store with an optional append-only log per session.
//!
//! Each log is `<log_dir>/<id>.jsonl`: a `create` line with the resolved
//! request, then one line per annotation or skip. Lines are synced to disk
//! before a mutation is acknowledged, and opening the store replays every log.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::session::{
    AnnotationRequest, AnnotationResponse, CreateSession, SessionDefaults, SessionEvent, SessionRecord, SessionView,
    SkipRequest, SuggestionView,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LogLine {
    Create { id: String, create: Box<CreateSession> },
    Event(SessionEvent),
}

pub type SharedRecord = Arc<RwLock<SessionRecord>>;

#[derive(Debug)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SharedRecord>>,
    data_dir: PathBuf,
    log_dir: Option<PathBuf>,
    defaults: SessionDefaults,
}

fn poisoned() -> ServiceError {
    ServiceError::internal("session lock poisoned by an earlier failure")
}

impl SessionStore {
    pub fn in_memory(data_dir: impl Into<PathBuf>, defaults: SessionDefaults) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            data_dir: data_dir.into(),
            log_dir: None,
            defaults,
        }
    }

    /// Store persisted under `log_dir`; existing logs are replayed.
    pub fn on_disk(
        data_dir: impl Into<PathBuf>,
        log_dir: impl Into<PathBuf>,
        defaults: SessionDefaults,
    ) -> anyhow::Result<Self> {
        let log_dir = log_dir.into();
        fs::create_dir_all(&log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
        let store = Self {
            sessions: RwLock::new(HashMap::new()),
            data_dir: data_dir.into(),
            log_dir: Some(log_dir.clone()),
            defaults,
        };
        let mut logs: Vec<PathBuf> = fs::read_dir(&log_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        logs.sort();
        for path in logs {
            let record = store.replay(&path).with_context(|| format!("replaying {}", path.display()))?;
            store.insert(record)?;
        }
        Ok(store)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn defaults(&self) -> &SessionDefaults {
        &self.defaults
    }

    fn replay(&self, path: &Path) -> anyhow::Result<SessionRecord> {
        let reader = BufReader::new(File::open(path)?);
        let mut record: Option<SessionRecord> = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogLine = serde_json::from_str(&line).with_context(|| format!("line {}", n + 1))?;
            match (entry, record.as_mut()) {
                (LogLine::Create { id, create }, None) => {
                    record = Some(SessionRecord::create(id, *create, &self.data_dir)?);
                }
                (LogLine::Event(event), Some(r)) => r.apply(&event).with_context(|| format!("line {}", n + 1))?,
                _ => anyhow::bail!("line {}: log must start with exactly one create entry", n + 1),
            }
        }
        record.context("empty session log")
    }

    fn insert(&self, record: SessionRecord) -> Result<SharedRecord, ServiceError> {
        let id = record.id.clone();
        let shared = Arc::new(RwLock::new(record));
        self.sessions
            .write()
            .map_err(|_| poisoned())?
            .insert(id, shared.clone());
        Ok(shared)
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn append(&self, id: &str, line: &LogLine, create: bool) -> Result<(), ServiceError> {
        let Some(path) = self.log_path(id) else {
            return Ok(());
        };
        let write = || -> std::io::Result<()> {
            let mut file = OpenOptions::new().append(true).create_new(create).open(&path)?;
            let mut bytes = serde_json::to_vec(line)?;
            bytes.push(b'\n');
            file.write_all(&bytes)?;
            file.sync_data()
        };
        write().map_err(|e| ServiceError::internal(format!("writing session log {}: {e}", path.display())))
    }

    pub fn get(&self, id: &str) -> Result<SharedRecord, ServiceError> {
        self.sessions
            .read()
            .map_err(|_| poisoned())?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("session", id))
    }

    pub fn ids(&self) -> Result<Vec<String>, ServiceError> {
        let mut ids: Vec<String> = self.sessions.read().map_err(|_| poisoned())?.keys().cloned().collect();
        ids.sort();
        Ok(ids)
    }

    pub fn read(record: &SharedRecord) -> Result<RwLockReadGuard<'_, SessionRecord>, ServiceError> {
        record.read().map_err(|_| poisoned())
    }

    fn write(record: &SharedRecord) -> Result<RwLockWriteGuard<'_, SessionRecord>, ServiceError> {
        record.write().map_err(|_| poisoned())
    }

    pub fn create(&self, request: CreateSession) -> Result<SessionView, ServiceError> {
        let request = SessionRecord::resolve_request(request, &self.defaults, &self.data_dir)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let record = SessionRecord::create(id.clone(), request.clone(), &self.data_dir)?;
        self.append(&id, &LogLine::Create { id: id.clone(), create: Box::new(request) }, true)?;
        let view = record.view();
        self.insert(record)?;
        Ok(view)
    }

    pub fn suggestion(&self, id: &str) -> Result<SuggestionView, ServiceError> {
        let record = self.get(id)?;
        let guard = Self::read(&record)?;
        Ok(guard.suggestion_view())
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ServiceError> {
        let record = self.get(id)?;
        let guard = Self::read(&record)?;
        Ok(guard.view())
    }

    /// Mutations on one session are serialized by its write lock.
    pub fn annotate(&self, id: &str, request: &AnnotationRequest) -> Result<AnnotationResponse, ServiceError> {
        let record = self.get(id)?;
        let mut guard = Self::write(&record)?;
        let (event, response) = guard.annotate(request)?;
        self.append(id, &LogLine::Event(event), false)?;
        Ok(response)
    }

    pub fn skip(&self, id: &str, request: &SkipRequest) -> Result<SuggestionView, ServiceError> {
        let record = self.get(id)?;
        let mut guard = Self::write(&record)?;
        let (event, view) = guard.skip(request)?;
        self.append(id, &LogLine::Event(event), false)?;
        Ok(view)
    }
}
