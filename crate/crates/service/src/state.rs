//! Sessions, jobs and the single training worker.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use convbench::config::{Mode, RunConfig};
use convbench::dataset::Dataset;
use convbench::evaluation::evaluate_production;
use convbench::modelspec::{canonicalize_with, infer_shapes, CanonicalModel, ShapeTrace, WorkspaceSequence};
use convbench::training::{train_fast, Progress, TrainedModel};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::sync::watch;

use crate::events::{Event, JobState};

/// One completed job in a session's progression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub job_id: String,
    pub mode: Mode,
    pub sequence: WorkspaceSequence,
    pub model: String,
    pub seed: u64,
    /// Test accuracy in fast mode, median fold-mean AUC in production.
    pub metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci95: Option<(f64, f64)>,
    pub completed_at_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionData {
    pub sequence: WorkspaceSequence,
    pub history: Vec<HistoryEntry>,
    pub selected_class: usize,
    pub next_layer: u64,
    #[serde(skip)]
    pub active_job: Option<String>,
    #[serde(skip)]
    pub trained: Option<Arc<TrainedModel>>,
}

impl SessionData {
    fn new() -> Self {
        Self {
            sequence: WorkspaceSequence::new(),
            history: Vec::new(),
            selected_class: 0,
            next_layer: 1,
            active_job: None,
            trained: None,
        }
    }

    /// A layer id not used before in this session.
    pub fn fresh_layer_id(&mut self) -> String {
        loop {
            let id = format!("L{}", self.next_layer);
            self.next_layer += 1;
            if !self.sequence.contains(&id) {
                return id;
            }
        }
    }
}

pub struct Session {
    pub id: String,
    /// Every mutation of a session goes through this lock.
    pub data: Mutex<SessionData>,
}

struct JobLog {
    state: JobState,
    lines: Vec<Arc<str>>,
    result: Option<Box<RawValue>>,
    epoch: usize,
}

pub struct Job {
    pub id: String,
    pub session: String,
    pub mode: Mode,
    pub seed: u64,
    log: Mutex<JobLog>,
    changed: watch::Sender<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobView {
    pub id: String,
    pub session: String,
    pub mode: Mode,
    pub seed: u64,
    pub state: JobState,
    pub events: usize,
    /// The report exactly as the CLI prints it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Box<RawValue>>,
}

impl Job {
    fn new(id: String, session: String, mode: Mode, seed: u64) -> Self {
        let (changed, _) = watch::channel(0);
        let job = Self {
            id,
            session,
            mode,
            seed,
            log: Mutex::new(JobLog {
                state: JobState::Queued,
                lines: Vec::new(),
                result: None,
                epoch: 0,
            }),
            changed,
        };
        job.push(&Event::State { state: JobState::Queued });
        job
    }

    fn push(&self, event: &Event) {
        let line: Arc<str> = serde_json::to_string(event).expect("events serialize").into();
        let n = {
            let mut log = self.log.lock().unwrap();
            log.lines.push(line);
            log.lines.len()
        };
        self.changed.send_replace(n);
    }

    fn advance(&self, next: JobState) {
        {
            let mut log = self.log.lock().unwrap();
            assert!(log.state.can_move_to(next), "illegal job transition {:?} -> {next:?}", log.state);
            log.state = next;
        }
        if !next.is_terminal() {
            self.push(&Event::State { state: next });
        }
    }

    fn epoch(&self, progress: Progress) {
        let Progress::Epoch { context, record } = progress else {
            return;
        };
        // The counter is bumped and the line appended under one lock so that
        // epochs from parallel folds still appear in increasing order.
        let line;
        let n = {
            let mut log = self.log.lock().unwrap();
            log.epoch += 1;
            let cv = context.fold.is_some();
            let event = Event::Epoch {
                epoch: log.epoch,
                train_loss: record.train_loss,
                val_loss: record.val_loss,
                val_acc: record.val_acc,
                repeat: context.repeat,
                fold: context.fold,
                fold_epoch: cv.then_some(record.epoch),
            };
            line = serde_json::to_string(&event).expect("events serialize");
            log.lines.push(line.into());
            log.lines.len()
        };
        self.changed.send_replace(n);
    }

    fn finish(&self, terminal: Event, result: Option<Box<RawValue>>) {
        let state = if matches!(terminal, Event::Failed { .. }) {
            JobState::Failed
        } else {
            JobState::Done
        };
        let line: Arc<str> = serde_json::to_string(&terminal).expect("events serialize").into();
        // State and terminal line change together so a reader that sees a
        // terminal state also sees the whole log.
        let n = {
            let mut log = self.log.lock().unwrap();
            assert!(log.state.can_move_to(state), "illegal job transition {:?} -> {state:?}", log.state);
            log.state = state;
            log.result = result;
            log.lines.push(line);
            log.lines.len()
        };
        self.changed.send_replace(n);
    }

    pub fn state(&self) -> JobState {
        self.log.lock().unwrap().state
    }

    pub fn view(&self) -> JobView {
        let log = self.log.lock().unwrap();
        JobView {
            id: self.id.clone(),
            session: self.session.clone(),
            mode: self.mode,
            seed: self.seed,
            state: log.state,
            events: log.lines.len(),
            result: log.result.clone(),
        }
    }

    /// Event lines from `from` on, and whether the log is complete.
    pub fn lines_from(&self, from: usize) -> (Vec<Arc<str>>, bool) {
        let log = self.log.lock().unwrap();
        let lines = log.lines.get(from..).unwrap_or_default().to_vec();
        (lines, log.state.is_terminal())
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.changed.subscribe()
    }
}

struct Task {
    job: Arc<Job>,
    session: Arc<Session>,
    sequence: WorkspaceSequence,
    model: CanonicalModel,
}

struct Inner {
    config: RunConfig,
    data: Arc<Dataset>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    ids: AtomicU64,
    worker: Mutex<mpsc::Sender<Task>>,
    snapshot: Option<PathBuf>,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    next_id: u64,
    sessions: Vec<(String, SessionData)>,
}

impl AppState {
    /// Starts the training worker. With a snapshot path, sessions saved there
    /// by [`AppState::save_snapshot`] are restored.
    pub fn new(config: RunConfig, data: Dataset, snapshot: Option<PathBuf>) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel::<Task>();
        let state = Self {
            inner: Arc::new(Inner {
                config,
                data: Arc::new(data),
                sessions: RwLock::new(HashMap::new()),
                jobs: RwLock::new(HashMap::new()),
                ids: AtomicU64::new(1),
                worker: Mutex::new(tx),
                snapshot,
            }),
        };
        if let Some(path) = &state.inner.snapshot {
            if path.exists() {
                state.restore(path)?;
            }
        }
        let worker = state.clone();
        std::thread::Builder::new()
            .name("training-worker".into())
            .spawn(move || {
                for task in rx {
                    worker.run(task);
                }
            })?;
        Ok(state)
    }

    pub fn config(&self) -> &RunConfig {
        &self.inner.config
    }

    pub fn data(&self) -> &Dataset {
        &self.inner.data
    }

    pub fn num_classes(&self) -> usize {
        self.inner.data.num_classes()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.data.image_shape().unwrap_or(self.inner.config.input_shape())
    }

    pub fn canonical(&self, seq: &WorkspaceSequence) -> CanonicalModel {
        canonicalize_with(seq, self.num_classes(), self.inner.config.hyper())
    }

    pub fn trace(&self, seq: &WorkspaceSequence) -> ShapeTrace {
        infer_shapes(&self.canonical(seq), self.input_shape())
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.inner.ids.fetch_add(1, Ordering::Relaxed))
    }

    pub fn create_session(&self) -> Arc<Session> {
        let session = Arc::new(Session {
            id: self.next_id("s"),
            data: Mutex::new(SessionData::new()),
        });
        self.inner
            .sessions
            .write()
            .unwrap()
            .insert(session.id.clone(), session.clone());
        session
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.inner.sessions.read().unwrap().get(id).cloned()
    }

    pub fn job(&self, id: &str) -> Option<Arc<Job>> {
        self.inner.jobs.read().unwrap().get(id).cloned()
    }

    /// Queues a job unless the session already has an active one, in which
    /// case the active job's id is returned as the error.
    pub fn submit(&self, session: &Arc<Session>, mode: Mode, seed: u64) -> Result<Arc<Job>, String> {
        let mut data = session.data.lock().unwrap();
        if let Some(active) = &data.active_job {
            return Err(active.clone());
        }
        let job = Arc::new(Job::new(self.next_id("j"), session.id.clone(), mode, seed));
        data.active_job = Some(job.id.clone());
        self.inner.jobs.write().unwrap().insert(job.id.clone(), job.clone());
        let task = Task {
            job: job.clone(),
            session: session.clone(),
            sequence: data.sequence.clone(),
            model: self.canonical(&data.sequence),
        };
        drop(data);
        if self.inner.worker.lock().unwrap().send(task).is_err() {
            job.finish(
                Event::Failed {
                    reason: "training worker is not running".into(),
                },
                None,
            );
            session.data.lock().unwrap().active_job = None;
        }
        Ok(job)
    }

    fn run(&self, task: Task) {
        let Task {
            job,
            session,
            sequence,
            model,
        } = task;
        job.advance(JobState::Training);
        let config = &self.inner.config;
        let data = &self.inner.data;
        let progress = |p: Progress| match p {
            Progress::Epoch { .. } => job.epoch(p),
            Progress::Evaluating => job.advance(JobState::Evaluating),
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<Completed, String> {
            match job.mode {
                Mode::Fast => {
                    let out = train_fast(&model, data, config, job.seed, &progress).map_err(|e| e.to_string())?;
                    Ok(Completed::Fast(out.trained, out.report))
                }
                Mode::Production => {
                    let report = evaluate_production(&model, data, config, job.seed, &progress).map_err(|e| e.to_string())?;
                    Ok(Completed::Production(report))
                }
            }
        }))
        .unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "worker panicked".into());
            Err(msg)
        });

        let mut entry = HistoryEntry {
            job_id: job.id.clone(),
            mode: job.mode,
            sequence,
            model: model.describe(),
            seed: job.seed,
            metric: 0.0,
            ci95: None,
            completed_at_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let mut data = session.data.lock().unwrap();
        data.active_job = None;
        match outcome {
            Ok(Completed::Fast(trained, report)) => {
                log::info!("job {} finished: accuracy {:.4}", job.id, report.accuracy);
                entry.metric = report.accuracy;
                data.history.push(entry);
                data.trained = Some(Arc::new(trained));
                drop(data);
                let result = serde_json::value::to_raw_value(&report).ok();
                job.finish(
                    Event::Done {
                        accuracy: report.accuracy,
                        report,
                    },
                    result,
                );
            }
            Ok(Completed::Production(report)) => {
                log::info!("job {} finished: median AUC {:.4}", job.id, report.median_auc);
                entry.metric = report.median_auc;
                entry.ci95 = Some(report.ci95);
                data.history.push(entry);
                drop(data);
                let result = serde_json::value::to_raw_value(&report).ok();
                job.finish(Event::Report(report), result);
            }
            Err(reason) => {
                log::warn!("job {} failed: {reason}", job.id);
                drop(data);
                job.finish(Event::Failed { reason }, None);
            }
        }
    }

    pub fn save_snapshot(&self) -> std::io::Result<Option<PathBuf>> {
        let Some(path) = &self.inner.snapshot else {
            return Ok(None);
        };
        let mut sessions: Vec<(String, SessionData)> = self
            .inner
            .sessions
            .read()
            .unwrap()
            .values()
            .map(|s| (s.id.clone(), s.data.lock().unwrap().clone()))
            .collect();
        sessions.sort_by(|a, b| a.0.cmp(&b.0));
        let snap = Snapshot {
            next_id: self.inner.ids.load(Ordering::Relaxed),
            sessions,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&snap)?)?;
        Ok(Some(path.clone()))
    }

    fn restore(&self, path: &Path) -> std::io::Result<()> {
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(path)?)?;
        self.inner.ids.store(snap.next_id, Ordering::Relaxed);
        let mut sessions = self.inner.sessions.write().unwrap();
        for (id, data) in snap.sessions {
            sessions.insert(
                id.clone(),
                Arc::new(Session {
                    id,
                    data: Mutex::new(data),
                }),
            );
        }
        Ok(())
    }
}

enum Completed {
    Fast(TrainedModel, convbench::training::FastReport),
    Production(convbench::evaluation::EvaluationReport),
}
