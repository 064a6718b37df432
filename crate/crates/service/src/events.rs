//! Job states and the newline-delimited events streamed to clients.

use convbench::evaluation::EvaluationReport;
use convbench::training::FastReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Training,
    Evaluating,
    Done,
    Failed,
}

impl JobState {
    /// Legal moves: queued → training → evaluating → done, and any
    /// non-terminal state → failed.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Training) | (Training, Evaluating) | (Evaluating, Done) | (Queued | Training | Evaluating, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    State {
        state: JobState,
    },
    /// `epoch` increases strictly across the whole job; in cross-validation
    /// `fold_epoch` restarts at 1 for every fold.
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_acc: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        repeat: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fold: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fold_epoch: Option<usize>,
    },
    Done {
        accuracy: f64,
        report: FastReport,
    },
    Report(EvaluationReport),
    Failed {
        reason: String,
    },
}

impl Event {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Event::Done { .. } | Event::Report(_) | Event::Failed { .. })
    }
}
