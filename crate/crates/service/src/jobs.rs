//! In-memory recompute jobs with a bounded queue.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use serde::Serialize;
use tokio::sync::{oneshot, Semaphore};

use crate::error::ApiError;

/// Finished jobs kept for polling before the oldest are dropped along with
/// their scratch directories.
const RETAINED_FINISHED: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobView {
    pub job_id: String,
    pub status: JobStatus,
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Why a job failed: the HTTP status a synchronous call would have returned
/// and a message.
#[derive(Clone, Debug)]
pub struct JobFailure {
    pub status: StatusCode,
    pub message: String,
}

struct Job {
    status: JobStatus,
    result: Option<serde_json::Value>,
    failure: Option<JobFailure>,
}

#[derive(Default)]
struct Table {
    jobs: HashMap<String, Job>,
    finished: VecDeque<String>,
}

pub struct JobQueue {
    running: Arc<Semaphore>,
    capacity: usize,
    active: AtomicUsize,
    table: Mutex<Table>,
    scratch: PathBuf,
}

/// Job body: receives the job id and its scratch directory.
pub type Work = Box<dyn FnOnce(&str, &Path) -> Result<serde_json::Value, JobFailure> + Send>;

impl JobQueue {
    pub fn new(scratch: PathBuf, max_running: usize, max_queued: usize) -> Self {
        Self {
            running: Arc::new(Semaphore::new(max_running.max(1))),
            capacity: max_running.max(1) + max_queued,
            active: AtomicUsize::new(0),
            table: Mutex::new(Table::default()),
            scratch,
        }
    }

    pub fn scratch_dir(&self, job_id: &str) -> PathBuf {
        self.scratch.join(job_id)
    }

    /// Queues `work`, which runs on a blocking thread with its own scratch
    /// directory. The receiver fires when the job has finished.
    pub fn submit(self: &Arc<Self>, work: Work) -> Result<(String, oneshot::Receiver<()>), ApiError> {
        if self.active.fetch_add(1, Ordering::SeqCst) >= self.capacity {
            self.active.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                format!("recompute queue is full ({} jobs)", self.capacity),
            ));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.table.lock().unwrap().jobs.insert(
            id.clone(),
            Job {
                status: JobStatus::Queued,
                result: None,
                failure: None,
            },
        );
        let (tx, rx) = oneshot::channel();
        let queue = Arc::clone(self);
        let job_id = id.clone();
        tokio::spawn(async move {
            let permit = queue.running.clone().acquire_owned().await;
            queue.set_status(&job_id, JobStatus::Running);
            let dir = queue.scratch_dir(&job_id);
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                std::fs::create_dir_all(&dir).map_err(|e| JobFailure {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    message: format!("scratch directory: {e}"),
                })?;
                work(&id, &dir)
            })
            .await
            .unwrap_or_else(|e| {
                Err(JobFailure {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    message: format!("job panicked: {e}"),
                })
            });
            drop(permit);
            queue.finish(&job_id, outcome);
            queue.active.fetch_sub(1, Ordering::SeqCst);
            let _ = tx.send(());
        });
        Ok((id, rx))
    }

    fn set_status(&self, id: &str, status: JobStatus) {
        if let Some(job) = self.table.lock().unwrap().jobs.get_mut(id) {
            job.status = status;
        }
    }

    fn finish(&self, id: &str, outcome: Result<serde_json::Value, JobFailure>) {
        let mut table = self.table.lock().unwrap();
        if let Some(job) = table.jobs.get_mut(id) {
            match outcome {
                Ok(value) => {
                    job.status = JobStatus::Done;
                    job.result = Some(value);
                }
                Err(f) => {
                    job.status = JobStatus::Failed;
                    job.failure = Some(f);
                }
            }
        }
        table.finished.push_back(id.to_owned());
        while table.finished.len() > RETAINED_FINISHED {
            if let Some(old) = table.finished.pop_front() {
                table.jobs.remove(&old);
                let _ = std::fs::remove_dir_all(self.scratch_dir(&old));
            }
        }
    }

    pub fn view(&self, id: &str) -> Option<JobView> {
        let table = self.table.lock().unwrap();
        table.jobs.get(id).map(|job| JobView {
            job_id: id.to_owned(),
            status: job.status,
            url: format!("/api/jobs/{id}"),
            result: job.result.clone(),
            error: job.failure.as_ref().map(|f| f.message.clone()),
        })
    }

    pub fn failure(&self, id: &str) -> Option<JobFailure> {
        self.table.lock().unwrap().jobs.get(id).and_then(|j| j.failure.clone())
    }

    /// Jobs queued or running.
    pub fn active(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }
}
