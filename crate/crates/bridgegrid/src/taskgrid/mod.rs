//! A minimal driver-worker harness: the driver spawns worker processes,
//! distributes partitions, and runs bulk-synchronous map stages whose
//! mapped functions attach to the rendezvous server and communicate; plus
//! a micro-batch streaming mode.

mod dataset;
mod driver;
mod stages;
mod stream;

pub use dataset::Dataset;
pub use driver::{
    run_local_stage, run_mpi_stage, spawn_workers, unique_job_namespace, StageOptions,
    WorkerHandle, WorkerSet, WorkerSpec, CLASS_PEER_TERMINATED, ENV_STAGE_ADDR,
};
pub use stages::{
    lookup_stage, stage_names, worker_main, ReconstructResult, StageContext, StageError,
    StageFn, StageResult,
};
pub use stream::{
    parse_replay_file, stream_run, write_replay_file, BatchSummary, MicroBatch, StreamReport,
    StreamSource, INIT_RECORD,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("failed to spawn worker {worker_id}: {message}")]
    SpawnFailed { worker_id: u32, message: String },
    #[error("worker {worker_id} failed ({class}): {message}")]
    WorkerFailed {
        worker_id: u32,
        class: String,
        message: String,
        /// Results from workers that did finish, by worker id.
        partial: Vec<Option<Vec<u8>>>,
    },
    #[error("batch {batch_index} handler failed: {message}")]
    HandlerFailed { batch_index: u64, message: String },
    #[error("dataset has {partitions} partitions but {workers} workers")]
    PartitionMismatch { partitions: usize, workers: usize },
    #[error("stream format: {0}")]
    StreamFormat(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Rendezvous(#[from] crate::rendezvous::RendezvousError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TaskError {
    pub fn class(&self) -> &'static str {
        match self {
            TaskError::SpawnFailed { .. } => "SPAWN_FAILED",
            TaskError::WorkerFailed { .. } => "WORKER_FAILED",
            TaskError::HandlerFailed { .. } => "HANDLER_FAILED",
            TaskError::PartitionMismatch { .. } => "PARTITION_MISMATCH",
            TaskError::StreamFormat(_) => "STREAM_FORMAT",
            TaskError::InvalidArgument(_) => "INVALID_ARGUMENT",
            TaskError::Rendezvous(e) => e.class(),
            TaskError::Io(_) => "IO",
            TaskError::Wire(_) => "WIRE",
            TaskError::Json(_) => "JSON",
        }
    }
}
