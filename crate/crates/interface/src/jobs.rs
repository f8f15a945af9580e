//! Job records, states and the priority queue.

use std::collections::VecDeque;

use cpam_core::pipeline::EditParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Inverting,
    Denoising { step: usize, of: usize },
    Decoding,
    Done,
    Failed { reason: String },
}

impl JobState {
    /// Position in the lifecycle; transitions never decrease it.
    pub fn rank(&self) -> (u8, usize) {
        match self {
            JobState::Queued => (0, 0),
            JobState::Inverting => (1, 0),
            JobState::Denoising { step, .. } => (2, *step),
            JobState::Decoding => (3, 0),
            JobState::Done => (4, 0),
            JobState::Failed { .. } => (5, 0),
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done | JobState::Failed { .. })
    }

    pub fn is_running(&self) -> bool {
        matches!(self, JobState::Inverting | JobState::Denoising { .. } | JobState::Decoding)
    }

    /// Whether `next` may follow `self`.
    pub fn allows(&self, next: &JobState) -> bool {
        if self.is_terminal() {
            return false;
        }
        matches!(next, JobState::Failed { .. }) || next.rank() > self.rank()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    High,
    #[default]
    Normal,
    Low,
}

impl Priority {
    fn index(self) -> usize {
        match self {
            Priority::High => 0,
            Priority::Normal => 1,
            Priority::Low => 2,
        }
    }
}

/// Body of `POST /edits`: stored image and mask ids plus edit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub image_id: String,
    pub mask_id: String,
    #[serde(default)]
    pub priority: Priority,
    #[serde(flatten)]
    pub params: EditParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    /// 1-based, per job.
    pub seq: u64,
    pub job_id: String,
    #[serde(flatten)]
    pub state: JobState,
    pub at_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub job_id: String,
    pub request: JobRequest,
    pub state: JobState,
    pub created_unix_ms: u64,
    pub updated_unix_ms: u64,
    pub result_image_id: Option<String>,
    pub config_fingerprint: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub events: Vec<JobEvent>,
}

#[derive(Debug)]
pub struct QueueFull;

/// Bounded FIFO per priority class; higher classes drain first.
#[derive(Debug)]
pub struct JobQueue {
    classes: [VecDeque<String>; 3],
    capacity: usize,
}

impl JobQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            classes: Default::default(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, id: String, priority: Priority) -> Result<(), QueueFull> {
        if self.len() >= self.capacity {
            return Err(QueueFull);
        }
        self.classes[priority.index()].push_back(id);
        Ok(())
    }

    /// Re-queues a recovered job regardless of capacity.
    pub fn push_recovered(&mut self, id: String, priority: Priority) {
        self.classes[priority.index()].push_back(id);
    }

    pub fn pop(&mut self) -> Option<String> {
        self.classes.iter_mut().find_map(VecDeque::pop_front)
    }
}
