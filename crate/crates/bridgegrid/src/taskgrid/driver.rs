//! The driver side of the worker harness: spawn OS worker processes
//! (never the rendezvous server — launching is the scheduler's job), feed
//! them partitions over a stage socket, and collect results or failures
//! under a watchdog.

use std::collections::HashMap;
use std::io::BufWriter;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::rendezvous::{
    AttachOptions, ServerContactInfo, Session, ENV_NAMESPACE, ENV_RANK, ENV_SERVER, ENV_SIZE,
    ENV_TOKEN,
};
use crate::wire::{msg, Decoder, Encoder, Frame};

use super::{Dataset, TaskError};

/// Environment variable carrying the driver's stage socket address.
pub const ENV_STAGE_ADDR: &str = "BRIDGEGRID_STAGE_ADDR";

/// Stage error class reported when a worker's peers died underneath it;
/// the driver attributes the failure to the originating worker instead.
pub const CLASS_PEER_TERMINATED: &str = "PEER_TERMINATED";

static JOB_SEQ: AtomicU64 = AtomicU64::new(0);

/// A namespace name unique enough for one driver process lifetime.
pub fn unique_job_namespace() -> String {
    format!(
        "job-{}-{}",
        std::process::id(),
        JOB_SEQ.fetch_add(1, Ordering::Relaxed)
    )
}

/// How to launch workers and where they should rendezvous.
#[derive(Debug, Clone)]
pub struct WorkerSpec {
    pub worker_bin: PathBuf,
    pub stage: String,
    pub namespace: String,
    pub server_addr: String,
    pub server_token: String,
    pub env_overrides: Vec<(String, String)>,
}

impl WorkerSpec {
    pub fn new(
        worker_bin: impl Into<PathBuf>,
        stage: impl Into<String>,
        server: &ServerContactInfo,
    ) -> Self {
        WorkerSpec {
            worker_bin: worker_bin.into(),
            stage: stage.into(),
            namespace: unique_job_namespace(),
            server_addr: server.addr(),
            server_token: server.token.clone(),
            env_overrides: Vec::new(),
        }
    }
}

/// One spawned worker process.
pub struct WorkerHandle {
    pub worker_id: u32,
    pub partition_indices: Vec<usize>,
    child: Child,
}

/// A set of spawned workers plus the stage socket they report to.
pub struct WorkerSet {
    listener: TcpListener,
    workers: Vec<WorkerHandle>,
    stage: String,
}

impl WorkerSet {
    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn worker_ids(&self) -> Vec<u32> {
        self.workers.iter().map(|w| w.worker_id).collect()
    }

    fn kill_all(&mut self) {
        for w in &mut self.workers {
            let _ = w.child.kill();
        }
        for w in &mut self.workers {
            let _ = w.child.wait();
        }
    }
}

impl Drop for WorkerSet {
    fn drop(&mut self) {
        self.kill_all();
    }
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    /// Hard deadline for the whole stage; expiry kills the workers.
    pub watchdog: Duration,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            watchdog: Duration::from_secs(30),
        }
    }
}

/// Launch `n` worker processes with the PMI environment contract set:
/// each gets its rank, the namespace, the declared size, and the server
/// contact information. The rendezvous server itself launches nothing.
pub fn spawn_workers(n: u32, spec: &WorkerSpec) -> Result<WorkerSet, TaskError> {
    let listener =
        TcpListener::bind("127.0.0.1:0").map_err(|source| TaskError::SpawnFailed {
            worker_id: 0,
            message: format!("stage socket bind: {source}"),
        })?;
    let stage_addr = listener
        .local_addr()
        .map_err(|source| TaskError::SpawnFailed {
            worker_id: 0,
            message: format!("stage socket addr: {source}"),
        })?
        .to_string();

    let mut workers = Vec::with_capacity(n as usize);
    for worker_id in 0..n {
        let mut cmd = Command::new(&spec.worker_bin);
        cmd.arg("--stage")
            .arg(&spec.stage)
            .env(ENV_RANK, worker_id.to_string())
            .env(ENV_SIZE, n.to_string())
            .env(ENV_NAMESPACE, &spec.namespace)
            .env(ENV_SERVER, &spec.server_addr)
            .env(ENV_TOKEN, &spec.server_token)
            .env(ENV_STAGE_ADDR, &stage_addr)
            .stdin(Stdio::null());
        for (k, v) in &spec.env_overrides {
            cmd.env(k, v);
        }
        match cmd.spawn() {
            Ok(child) => workers.push(WorkerHandle {
                worker_id,
                partition_indices: Vec::new(),
                child,
            }),
            Err(source) => {
                let mut set = WorkerSet {
                    listener,
                    workers,
                    stage: spec.stage.clone(),
                };
                set.kill_all();
                return Err(TaskError::SpawnFailed {
                    worker_id,
                    message: source.to_string(),
                });
            }
        }
    }
    Ok(WorkerSet {
        listener,
        workers,
        stage: spec.stage.clone(),
    })
}

enum Outcome {
    Ok(Vec<u8>),
    Failed { class: String, message: String },
    ConnLost,
}

/// Run one bulk-synchronous stage: partition `i` goes to worker `i`, every
/// worker must report a result, and any failure (stage error, crash, or
/// watchdog expiry) aborts the stage with `WORKER_FAILED`.
pub fn run_mpi_stage(
    dataset: &Dataset,
    mut workers: WorkerSet,
    params: serde_json::Value,
    options: &StageOptions,
) -> Result<Vec<Vec<u8>>, TaskError> {
    let n = workers.len();
    if dataset.num_partitions() != n {
        return Err(TaskError::PartitionMismatch {
            partitions: dataset.num_partitions(),
            workers: n,
        });
    }
    for (i, w) in workers.workers.iter_mut().enumerate() {
        w.partition_indices = vec![i];
    }
    let deadline = Instant::now() + options.watchdog;

    // Accept phase: every worker dials in and identifies itself.
    workers
        .listener
        .set_nonblocking(true)
        .map_err(TaskError::Io)?;
    let mut streams: HashMap<u32, TcpStream> = HashMap::new();
    while streams.len() < n {
        match workers.listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false).map_err(TaskError::Io)?;
                let mut s = stream;
                let hello = Frame::read_from(&mut s).map_err(TaskError::Wire)?;
                if hello.msg_type != msg::HELLO {
                    continue;
                }
                let mut d = Decoder::new(&hello.body);
                let worker_id = d.u32().map_err(TaskError::Wire)?;
                streams.insert(worker_id, s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if let Some(fail) = poll_dead_child(&mut workers, &streams) {
                    workers.kill_all();
                    return Err(fail);
                }
                if Instant::now() >= deadline {
                    workers.kill_all();
                    return Err(TaskError::WorkerFailed {
                        worker_id: first_missing(&workers, &streams),
                        class: "WATCHDOG".to_string(),
                        message: "worker did not report to the stage socket".to_string(),
                        partial: vec![None; n],
                    });
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(TaskError::Io(e)),
        }
    }

    // Task phase.
    let params_raw = serde_json::to_vec(&params)?;
    for (i, w) in workers.workers.iter().enumerate() {
        let stream = streams.get(&w.worker_id).expect("accepted above");
        let mut enc = Encoder::new()
            .str(&workers.stage)
            .bytes(&params_raw)
            .u32(dataset.partitions()[i].len() as u32);
        for record in &dataset.partitions()[i] {
            enc = enc.bytes(record);
        }
        let mut writer = BufWriter::new(stream.try_clone().map_err(TaskError::Io)?);
        Frame::new(msg::TASK, enc.finish())
            .write_to(&mut writer)
            .map_err(TaskError::Wire)?;
    }

    // Collect phase.
    let (tx, rx) = mpsc::channel::<(u32, Outcome)>();
    for (worker_id, stream) in streams {
        let tx = tx.clone();
        std::thread::spawn(move || {
            let mut stream = stream;
            let outcome = loop {
                match Frame::read_from(&mut stream) {
                    Ok(f) if f.msg_type == msg::RESULT => {
                        let mut d = Decoder::new(&f.body);
                        match d.bytes() {
                            Ok(payload) => break Outcome::Ok(payload),
                            Err(_) => break Outcome::ConnLost,
                        }
                    }
                    Ok(f) if f.msg_type == msg::FAILED => {
                        let mut d = Decoder::new(&f.body);
                        match (d.str(), d.str()) {
                            (Ok(class), Ok(message)) => break Outcome::Failed { class, message },
                            _ => break Outcome::ConnLost,
                        }
                    }
                    Ok(_) => continue,
                    Err(_) => break Outcome::ConnLost,
                }
            };
            let _ = tx.send((worker_id, outcome));
        });
    }
    drop(tx);

    let mut outcomes: HashMap<u32, Outcome> = HashMap::new();
    while outcomes.len() < n {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            break;
        }
        match rx.recv_timeout(remaining.min(Duration::from_millis(50))) {
            Ok((id, outcome)) => {
                outcomes.insert(id, outcome);
            }
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    workers.kill_all();

    // Success only when every worker returned a result.
    let mut partial: Vec<Option<Vec<u8>>> = (0..n as u32)
        .map(|id| match outcomes.get(&id) {
            Some(Outcome::Ok(payload)) => Some(payload.clone()),
            _ => None,
        })
        .collect();
    if partial.iter().all(Option::is_some) {
        return Ok(partial.drain(..).map(Option::unwrap).collect());
    }

    // Attribute the failure: prefer an explicit stage error over the
    // cascaded peer-terminated reports and crashes it causes.
    let mut primary: Option<(u32, String, String)> = None;
    for id in 0..n as u32 {
        match outcomes.get(&id) {
            Some(Outcome::Failed { class, message }) if class != CLASS_PEER_TERMINATED => {
                primary = Some((id, class.clone(), message.clone()));
                break;
            }
            _ => {}
        }
    }
    if primary.is_none() {
        for id in 0..n as u32 {
            match outcomes.get(&id) {
                Some(Outcome::Ok(_)) => {}
                Some(Outcome::Failed { class, message }) => {
                    primary = Some((id, class.clone(), message.clone()));
                    break;
                }
                Some(Outcome::ConnLost) => {
                    primary = Some((id, "WORKER_DIED".to_string(), "connection lost".to_string()));
                    break;
                }
                None => {
                    primary = Some((id, "WATCHDOG".to_string(), "no result before deadline".to_string()));
                    break;
                }
            }
        }
    }
    let (worker_id, class, message) = primary.expect("at least one worker lacks a result");
    Err(TaskError::WorkerFailed {
        worker_id,
        class,
        message,
        partial,
    })
}

fn poll_dead_child(workers: &mut WorkerSet, connected: &HashMap<u32, TcpStream>) -> Option<TaskError> {
    let n = workers.len();
    for w in &mut workers.workers {
        if connected.contains_key(&w.worker_id) {
            continue;
        }
        if let Ok(Some(status)) = w.child.try_wait() {
            return Some(TaskError::WorkerFailed {
                worker_id: w.worker_id,
                class: "WORKER_DIED".to_string(),
                message: format!("exited before connecting: {status}"),
                partial: vec![None; n],
            });
        }
    }
    None
}

fn first_missing(workers: &WorkerSet, connected: &HashMap<u32, TcpStream>) -> u32 {
    workers
        .workers
        .iter()
        .map(|w| w.worker_id)
        .find(|id| !connected.contains_key(id))
        .unwrap_or(0)
}

/// Same-process stage execution for fast unit tests: one attached session
/// per partition on threads, no OS processes.
pub fn run_local_stage<F>(
    dataset: &Dataset,
    server: &ServerContactInfo,
    namespace: &str,
    stage_fn: F,
) -> Result<Vec<Vec<u8>>, TaskError>
where
    F: Fn(u32, &[Vec<u8>], &Session) -> Result<Vec<u8>, String> + Sync,
{
    let n = dataset.num_partitions() as u32;
    let results: Vec<Result<Vec<u8>, String>> = std::thread::scope(|scope| {
        let joins: Vec<_> = (0..n)
            .map(|rank| {
                let stage_fn = &stage_fn;
                let partition = &dataset.partitions()[rank as usize];
                scope.spawn(move || {
                    let mut opts = AttachOptions::new(namespace, rank, n);
                    opts.server = Some(server.addr());
                    opts.token = Some(server.token.clone());
                    let session =
                        crate::rendezvous::client_attach(&opts).map_err(|e| e.to_string())?;
                    let out = stage_fn(rank, partition, &session);
                    let _ = session.finalize();
                    out
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });

    let mut out = Vec::with_capacity(n as usize);
    let mut failure: Option<(u32, String)> = None;
    for (rank, r) in results.iter().enumerate() {
        match r {
            Ok(bytes) => out.push(bytes.clone()),
            Err(message) => {
                let is_cascade = message.contains("peer terminated");
                match &failure {
                    None => failure = Some((rank as u32, message.clone())),
                    Some((_, prior)) if prior.contains("peer terminated") && !is_cascade => {
                        failure = Some((rank as u32, message.clone()))
                    }
                    _ => {}
                }
            }
        }
    }
    if let Some((worker_id, message)) = failure {
        let partial = results
            .into_iter()
            .map(|r| r.ok())
            .collect();
        return Err(TaskError::WorkerFailed {
            worker_id,
            class: "STAGE_ERROR".to_string(),
            message,
            partial,
        });
    }
    Ok(out)
}
