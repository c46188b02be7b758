//! Directory store for edit sessions and fine-tuning jobs.
//!
//! Layout under the store root:
//!
//! ```text
//! sessions.json              session metadata, ordered by id
//! maps/<session>.original.amap
//! maps/<session>.edited.amap
//! jobs.json                  job records, ordered by id
//! checkpoints/<job>.abnm     checkpoints written by finished jobs
//! ```
//!
//! Every write goes to a temporary file first and is renamed into place.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use abn_core::AttentionMap;
use serde::{Deserialize, Serialize};

use crate::jobs::{FinetuneJob, JobState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Draft,
    Committed,
}

impl std::str::FromStr for SessionStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "draft" => Ok(SessionStatus::Draft),
            "committed" => Ok(SessionStatus::Committed),
            other => Err(format!("unknown session status `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub class: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub sample_id: String,
    pub status: SessionStatus,
    /// Unix time in milliseconds.
    pub created_at: u64,
    pub updated_at: u64,
    pub before_topk: Vec<TopK>,
    pub after_topk: Vec<TopK>,
}

/// One sample's edit: the model's map, the edited map (both at map
/// resolution) and the predictions before and after substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSession {
    pub meta: SessionMeta,
    pub original_map: AttentionMap,
    pub edited_map: AttentionMap,
}

#[derive(Serialize, Deserialize)]
struct SessionIndex {
    next_id: u64,
    sessions: Vec<SessionMeta>,
}

#[derive(Serialize, Deserialize)]
struct JobIndex {
    next_id: u64,
    jobs: Vec<FinetuneJob>,
}

pub struct Store {
    dir: PathBuf,
    sessions: BTreeMap<String, EditSession>,
    jobs: BTreeMap<String, FinetuneJob>,
    next_session: u64,
    next_job: u64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Option<T>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

fn load_map(path: &Path) -> io::Result<AttentionMap> {
    AttentionMap::load(path).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

impl Store {
    /// Opens (creating if needed) the store at `dir`. Jobs that were still
    /// queued or running when the previous process stopped are marked failed.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Store> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("maps"))?;
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let mut store = Store {
            dir,
            sessions: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_session: 1,
            next_job: 1,
        };
        if let Some(index) = read_json::<SessionIndex>(&store.dir.join("sessions.json"))? {
            store.next_session = index.next_id;
            for meta in index.sessions {
                let original_map = load_map(&store.map_path(&meta.session_id, "original"))?;
                let edited_map = load_map(&store.map_path(&meta.session_id, "edited"))?;
                store.sessions.insert(
                    meta.session_id.clone(),
                    EditSession {
                        meta,
                        original_map,
                        edited_map,
                    },
                );
            }
        }
        if let Some(index) = read_json::<JobIndex>(&store.dir.join("jobs.json"))? {
            store.next_job = index.next_id;
            let mut interrupted = false;
            for mut job in index.jobs {
                if matches!(job.state, JobState::Queued | JobState::Running) {
                    job.fail("interrupted by service restart".into(), job.created_at);
                    interrupted = true;
                }
                store.jobs.insert(job.job_id.clone(), job);
            }
            if interrupted {
                store.write_jobs()?;
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn map_path(&self, session_id: &str, kind: &str) -> PathBuf {
        self.dir.join("maps").join(format!("{session_id}.{kind}.amap"))
    }

    pub fn checkpoint_path(&self, job_id: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{job_id}.abnm"))
    }

    pub fn session(&self, id: &str) -> Option<&EditSession> {
        self.sessions.get(id)
    }

    /// Sessions in id order, optionally filtered by status.
    pub fn sessions(&self, status: Option<SessionStatus>) -> impl Iterator<Item = &EditSession> {
        self.sessions
            .values()
            .filter(move |s| status.is_none_or(|st| s.meta.status == st))
    }

    pub fn next_session_id(&mut self) -> String {
        let id = format!("e{:06}", self.next_session);
        self.next_session += 1;
        id
    }

    /// Inserts or replaces a session and persists it.
    pub fn put_session(&mut self, session: EditSession) -> io::Result<()> {
        let id = session.meta.session_id.clone();
        write_atomic(&self.map_path(&id, "original"), &session.original_map.to_bytes())?;
        write_atomic(&self.map_path(&id, "edited"), &session.edited_map.to_bytes())?;
        self.sessions.insert(id, session);
        self.write_sessions()
    }

    /// The edited map as stored on disk.
    pub fn persisted_edited_map(&self, session_id: &str) -> io::Result<AttentionMap> {
        load_map(&self.map_path(session_id, "edited"))
    }

    fn write_sessions(&self) -> io::Result<()> {
        let index = SessionIndex {
            next_id: self.next_session,
            sessions: self.sessions.values().map(|s| s.meta.clone()).collect(),
        };
        write_atomic(&self.dir.join("sessions.json"), &serde_json::to_vec_pretty(&index)?)
    }

    pub fn job(&self, id: &str) -> Option<&FinetuneJob> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &FinetuneJob> {
        self.jobs.values()
    }

    pub fn next_job_id(&mut self) -> String {
        let id = format!("j{:06}", self.next_job);
        self.next_job += 1;
        id
    }

    pub fn put_job(&mut self, job: FinetuneJob) -> io::Result<()> {
        self.jobs.insert(job.job_id.clone(), job);
        self.write_jobs()
    }

    fn write_jobs(&self) -> io::Result<()> {
        let index = JobIndex {
            next_id: self.next_job,
            jobs: self.jobs.values().cloned().collect(),
        };
        write_atomic(&self.dir.join("jobs.json"), &serde_json::to_vec_pretty(&index)?)
    }
}
