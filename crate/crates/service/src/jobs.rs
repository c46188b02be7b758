//! Fine-tuning jobs over committed edit sessions.

use std::collections::HashMap;
use std::sync::Arc;

use abn_core::train::{accuracy, finetune_with_maps, predict_dataset, FinetuneConfig};
use abn_core::{checkpoint, metrics, AttentionMap};
use serde::{Deserialize, Serialize};

use crate::store::SessionStatus;
use crate::{now_millis, AppState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Legal moves: queued to running or failed, running to done or failed.
    pub fn can_advance_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

/// Request body of `POST /jobs/finetune`; omitted fields take the
/// library defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRequest {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub freeze_extractor: bool,
    pub edited_only: bool,
}

impl Default for FinetuneRequest {
    fn default() -> Self {
        FinetuneConfig::default().into()
    }
}

impl From<FinetuneConfig> for FinetuneRequest {
    fn from(c: FinetuneConfig) -> Self {
        FinetuneRequest {
            gamma: c.gamma,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            seed: c.seed,
            freeze_extractor: c.freeze_extractor,
            edited_only: c.edited_only,
        }
    }
}

impl From<&FinetuneRequest> for FinetuneConfig {
    fn from(r: &FinetuneRequest) -> Self {
        FinetuneConfig {
            gamma: r.gamma,
            epochs: r.epochs,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            momentum: r.momentum,
            seed: r.seed,
            freeze_extractor: r.freeze_extractor,
            edited_only: r.edited_only,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    /// Top-1 accuracy on the served dataset.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Mean MSE between the model's maps and the edited maps of the included sessions.
    pub map_mse_before: f64,
    pub map_mse_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub job_id: String,
    pub state: JobState,
    /// Every state the job has been in, oldest first.
    pub history: Vec<JobState>,
    pub config: FinetuneRequest,
    pub session_ids: Vec<String>,
    pub created_at: u64,
    pub finished_at: Option<u64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub metrics: Option<JobMetrics>,
    pub error: Option<String>,
}

impl FinetuneJob {
    pub fn new(job_id: String, config: FinetuneRequest, session_ids: Vec<String>, now: u64) -> Self {
        FinetuneJob {
            job_id,
            state: JobState::Queued,
            history: vec![JobState::Queued],
            config,
            session_ids,
            created_at: now,
            finished_at: None,
            checkpoint: None,
            checkpoint_sha256: None,
            metrics: None,
            error: None,
        }
    }

    /// Moves to `next`, panicking on an illegal transition.
    pub fn advance(&mut self, next: JobState, now: u64) {
        assert!(
            self.state.can_advance_to(next),
            "illegal job transition {:?} -> {next:?}",
            self.state
        );
        self.state = next;
        self.history.push(next);
        if !next.is_active() {
            self.finished_at = Some(now);
        }
    }

    pub fn fail(&mut self, message: String, now: u64) {
        self.advance(JobState::Failed, now);
        self.error = Some(message);
    }
}

fn update_job(state: &AppState, job_id: &str, f: impl FnOnce(&mut FinetuneJob)) {
    let mut store = state.store.lock().expect("store lock");
    let Some(mut job) = store.job(job_id).cloned() else { return };
    f(&mut job);
    if let Err(e) = store.put_job(job) {
        eprintln!("failed to persist job {job_id}: {e}");
    }
}

struct Outcome {
    checkpoint: String,
    sha256: String,
    metrics: JobMetrics,
}

fn mean_mse(model: &abn_core::AbnModel, state: &AppState, edited: &HashMap<String, AttentionMap>) -> abn_core::Result<f64> {
    let mut ids: Vec<&String> = edited.keys().collect();
    ids.sort();
    let indices: Vec<usize> = ids.iter().filter_map(|id| state.dataset.index_of(id)).collect();
    let (_, maps) = predict_dataset(model, &state.dataset.subset(&indices))?;
    let mut sum = 0.0;
    for (id, map) in ids.iter().zip(&maps) {
        sum += metrics::map_similarity_mse(map, &edited[*id])?;
    }
    Ok(sum / maps.len() as f64)
}

fn execute(state: &AppState, job: &FinetuneJob) -> Result<Outcome, String> {
    let mut edited = HashMap::new();
    {
        let store = state.store.lock().expect("store lock");
        for id in &job.session_ids {
            let session = store.session(id).ok_or_else(|| format!("session {id} disappeared"))?;
            // the persisted file is the source of truth for training
            let map = store.persisted_edited_map(id).map_err(|e| e.to_string())?;
            edited.insert(session.meta.sample_id.clone(), map);
        }
    }
    let base = state.model();
    let cfg = FinetuneConfig::from(&job.config);
    let err = |e: abn_core::Error| e.to_string();
    let accuracy_before = accuracy(&base, &state.dataset).map_err(err)?;
    let map_mse_before = mean_mse(&base, state, &edited).map_err(err)?;
    let mut model = (*base).clone();
    finetune_with_maps(&mut model, &state.dataset, &edited, &cfg).map_err(err)?;
    let path = state.store.lock().expect("store lock").checkpoint_path(&job.job_id);
    checkpoint::save(&model, &path).map_err(err)?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let served = checkpoint::decode(&bytes).map_err(err)?;
    let metrics = JobMetrics {
        accuracy_before,
        accuracy_after: accuracy(&served, &state.dataset).map_err(err)?,
        map_mse_before,
        map_mse_after: mean_mse(&served, state, &edited).map_err(err)?,
    };
    state.swap_model(served, path.display().to_string());
    Ok(Outcome {
        checkpoint: path.display().to_string(),
        sha256: checkpoint::checksum_bytes(&bytes),
        metrics,
    })
}

/// Runs a queued job to completion on the calling thread.
pub fn run(state: Arc<AppState>, job_id: String) {
    update_job(&state, &job_id, |j| j.advance(JobState::Running, now_millis()));
    let job = state.store.lock().expect("store lock").job(&job_id).cloned();
    let Some(job) = job else { return };
    let result = execute(&state, &job);
    update_job(&state, &job_id, |j| match result {
        Ok(out) => {
            j.checkpoint = Some(out.checkpoint);
            j.checkpoint_sha256 = Some(out.sha256);
            j.metrics = Some(out.metrics);
            j.advance(JobState::Done, now_millis());
        }
        Err(message) => j.fail(message, now_millis()),
    });
}

/// Committed session ids, keeping only the most recently updated session per sample.
pub fn committed_sessions(store: &crate::store::Store) -> Vec<String> {
    let mut latest: HashMap<&str, (u64, &str)> = HashMap::new();
    for s in store.sessions(Some(SessionStatus::Committed)) {
        let key = (s.meta.updated_at, s.meta.session_id.as_str());
        let slot = latest.entry(s.meta.sample_id.as_str()).or_insert(key);
        if key > *slot {
            *slot = key;
        }
    }
    let mut ids: Vec<String> = latest.into_values().map(|(_, id)| id.to_string()).collect();
    ids.sort();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions() {
        use JobState::*;
        let all = [Queued, Running, Done, Failed];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_advance_to(b))
            .collect();
        assert_eq!(legal, vec![(Queued, Running), (Queued, Failed), (Running, Done), (Running, Failed)]);
    }

    #[test]
    #[should_panic(expected = "illegal job transition")]
    fn done_is_terminal() {
        let mut j = FinetuneJob::new("j1".into(), FinetuneRequest::default(), vec![], 0);
        j.advance(JobState::Running, 1);
        j.advance(JobState::Done, 2);
        j.advance(JobState::Running, 3);
    }

    #[test]
    fn request_defaults_follow_library() {
        let r: FinetuneRequest = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
        let cfg = FinetuneConfig::from(&r);
        assert_eq!(cfg, FinetuneConfig { epochs: 2, ..FinetuneConfig::default() });
        assert!(serde_json::from_str::<FinetuneRequest>(r#"{"epoch": 2}"#).is_err());
    }
}
