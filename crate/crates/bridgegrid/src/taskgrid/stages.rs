//! Named stages the worker executable can run, and the worker-side main
//! loop that receives a partition, executes the stage, and reports back.

use std::net::TcpStream;
use std::panic::AssertUnwindSafe;

use crate::collectives::{
    communicator_from_group, Communicator, CounterSnapshot, Transport,
};
use crate::ptycho::{
    load_frames, load_meta, load_positions, partition_frames, reconstruct, ComplexField,
    SolverConfig,
};
use crate::rendezvous::{AttachOptions, ConnectRequest, Session};
use crate::wire::{msg, Decoder, Encoder, Frame};

use super::driver::ENV_STAGE_ADDR;

/// A stage failure with a machine-readable class.
#[derive(Debug, Clone)]
pub struct StageError {
    pub class: String,
    pub message: String,
}

impl StageError {
    pub fn new(class: impl Into<String>, message: impl Into<String>) -> Self {
        StageError {
            class: class.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl From<crate::rendezvous::RendezvousError> for StageError {
    fn from(e: crate::rendezvous::RendezvousError) -> Self {
        StageError::new(e.class(), e.to_string())
    }
}

impl From<crate::collectives::CollectiveError> for StageError {
    fn from(e: crate::collectives::CollectiveError) -> Self {
        StageError::new(e.class(), e.to_string())
    }
}

impl From<crate::ptycho::PtychoError> for StageError {
    fn from(e: crate::ptycho::PtychoError) -> Self {
        StageError::new(e.class(), e.to_string())
    }
}

pub type StageResult = Result<Vec<u8>, StageError>;
pub type StageFn = fn(&mut StageContext) -> StageResult;

/// Everything a stage sees: its partition, JSON parameters, and a lazily
/// attached rendezvous session. Stages with special attach timing (the
/// conformance cases) use [`StageContext::attach_options`] directly.
pub struct StageContext {
    pub rank: u32,
    pub size: u32,
    pub partition: Vec<Vec<u8>>,
    pub params: serde_json::Value,
    attach_opts: AttachOptions,
    session: Option<Session>,
}

impl StageContext {
    pub fn new(attach_opts: AttachOptions, partition: Vec<Vec<u8>>, params: serde_json::Value) -> Self {
        StageContext {
            rank: attach_opts.rank,
            size: attach_opts.size,
            partition,
            params,
            attach_opts,
            session: None,
        }
    }

    pub fn attach_options(&self) -> AttachOptions {
        self.attach_opts.clone()
    }

    /// Attach on first use and reuse the session afterwards.
    pub fn session(&mut self) -> Result<&Session, StageError> {
        if self.session.is_none() {
            self.session = Some(crate::rendezvous::client_attach(&self.attach_opts)?);
        }
        Ok(self.session.as_ref().unwrap())
    }

    /// Hand an externally attached session to the context so cleanup
    /// still happens.
    pub fn adopt_session(&mut self, session: Session) {
        self.session = Some(session);
    }

    pub fn finish(&mut self) {
        if let Some(s) = self.session.take() {
            let _ = s.finalize();
        }
    }

    /// Participants covering every rank of this job, sorted.
    pub fn all_ranks(&self, session: &Session) -> Vec<crate::rendezvous::ProcessId> {
        (0..self.size).map(|r| session.peer(r)).collect()
    }

    /// The full bridge sequence: bind a transport, publish its endpoint,
    /// fence, connect all ranks, and build a communicator.
    pub fn join_all_ranks(&mut self) -> Result<(Session, Transport, Communicator), StageError> {
        let session = self.session()?.clone();
        let transport = Transport::bind()?;
        session.put("endpoint", transport.endpoint().as_bytes())?;
        session.fence()?;
        let request = ConnectRequest::new(self.all_ranks(&session));
        let info = session.connect(&request)?;
        let comm = communicator_from_group(&session, &transport, &info)?;
        Ok((session, transport, comm))
    }
}

pub fn lookup_stage(name: &str) -> Option<StageFn> {
    Some(match name {
        "echo" => stage_echo,
        "partition-sizes" => stage_partition_sizes,
        "reconstruct" => stage_reconstruct,
        "fail-on" => stage_fail_on,
        "sleep-on" => stage_sleep_on,
        "conf" => crate::conformance::stage_conformance,
        _ => return None,
    })
}

/// Names every stage the worker executable accepts.
pub fn stage_names() -> &'static [&'static str] {
    &["echo", "partition-sizes", "reconstruct", "fail-on", "sleep-on", "conf"]
}

fn stage_echo(ctx: &mut StageContext) -> StageResult {
    let mut enc = Encoder::new().u32(ctx.partition.len() as u32);
    for r in &ctx.partition {
        enc = enc.bytes(r);
    }
    Ok(enc.finish())
}

/// Fence, then allgather every rank's partition size over a freshly
/// connected communicator; returns the full size list.
fn stage_partition_sizes(ctx: &mut StageContext) -> StageResult {
    let my_size = ctx.partition.len() as u64;
    let (session, _transport, comm) = ctx.join_all_ranks()?;
    let gathered = comm.allgather(&my_size.to_be_bytes())?;
    let mut enc = Encoder::new().u32(gathered.len() as u32);
    for g in &gathered {
        let v = u64::from_be_bytes(g.as_slice().try_into().map_err(|_| {
            StageError::new("PROTOCOL", "bad allgather payload")
        })?);
        enc = enc.u64(v);
    }
    session.disconnect(&crate::rendezvous::Namespace::from_qualified(comm.group())?)?;
    Ok(enc.finish())
}

fn stage_fail_on(ctx: &mut StageContext) -> StageResult {
    let target = ctx.params["rank"].as_u64().unwrap_or(0) as u32;
    let session = ctx.session()?.clone();
    session.fence()?;
    if ctx.rank == target {
        return Err(StageError::new("STAGE_ERROR", "injected stage failure"));
    }
    // Survivors block here until the failing worker finalizes, then see
    // PEER_TERMINATED.
    session.fence()?;
    Ok(Vec::new())
}

fn stage_sleep_on(ctx: &mut StageContext) -> StageResult {
    let target = ctx.params["rank"].as_u64().unwrap_or(0) as u32;
    if ctx.rank == target {
        let secs = ctx.params["seconds"].as_u64().unwrap_or(600);
        std::thread::sleep(std::time::Duration::from_secs(secs));
    }
    Ok(Vec::new())
}

/// Result payload of the `reconstruct` stage.
#[derive(Debug, Clone)]
pub struct ReconstructResult {
    pub rank: u32,
    pub counters: CounterSnapshot,
    pub error_history: Vec<f64>,
    pub object: Option<ComplexField>,
    pub probe: Option<ComplexField>,
}

impl ReconstructResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new()
            .u32(self.rank)
            .u64(self.counters.bytes_sent)
            .u64(self.counters.bytes_received)
            .u64(self.counters.messages_sent)
            .u64(self.counters.reduce_elements_sent)
            .u32(self.error_history.len() as u32);
        for e in &self.error_history {
            enc = enc.u64(e.to_bits());
        }
        match (&self.object, &self.probe) {
            (Some(obj), Some(probe)) => {
                enc = enc.u8(1);
                for field in [obj, probe] {
                    enc = enc.u32(field.width() as u32).u32(field.height() as u32);
                    let raw = field.to_interleaved();
                    let mut bytes = Vec::with_capacity(raw.len() * 8);
                    for v in raw {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    enc = enc.bytes(&bytes);
                }
            }
            _ => enc = enc.u8(0),
        }
        enc.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, StageError> {
        let bad = |_| StageError::new("PROTOCOL", "bad reconstruct result");
        let mut d = Decoder::new(buf);
        let rank = d.u32().map_err(bad)?;
        let counters = CounterSnapshot {
            bytes_sent: d.u64().map_err(bad)?,
            bytes_received: d.u64().map_err(bad)?,
            messages_sent: d.u64().map_err(bad)?,
            reduce_elements_sent: d.u64().map_err(bad)?,
        };
        let n = d.u32().map_err(bad)?;
        let mut error_history = Vec::with_capacity(n as usize);
        for _ in 0..n {
            error_history.push(f64::from_bits(d.u64().map_err(bad)?));
        }
        let (object, probe) = if d.u8().map_err(bad)? == 1 {
            let mut fields = Vec::new();
            for _ in 0..2 {
                let w = d.u32().map_err(bad)? as usize;
                let h = d.u32().map_err(bad)? as usize;
                let bytes = d.bytes().map_err(bad)?;
                let raw: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                fields.push(
                    ComplexField::from_interleaved(w, h, &raw)
                        .map_err(|e| StageError::new("PROTOCOL", e.to_string()))?,
                );
            }
            let probe = fields.pop();
            let object = fields.pop();
            (object, probe)
        } else {
            (None, None)
        };
        Ok(ReconstructResult {
            rank,
            counters,
            error_history,
            object,
            probe,
        })
    }
}

/// Distributed reconstruction over this worker's contiguous frame block.
/// Params: `{"data_dir": path, "solver": SolverConfig}`.
fn stage_reconstruct(ctx: &mut StageContext) -> StageResult {
    let data_dir = std::path::PathBuf::from(
        ctx.params["data_dir"]
            .as_str()
            .ok_or_else(|| StageError::new("INVALID_CONFIG", "missing data_dir"))?,
    );
    let config: SolverConfig = serde_json::from_value(ctx.params["solver"].clone())
        .map_err(|e| StageError::new("INVALID_CONFIG", e.to_string()))?;

    let meta = load_meta(&data_dir)?;
    let positions = load_positions(&data_dir)?;
    let block = partition_frames(meta.frames, ctx.size)
        .into_iter()
        .nth(ctx.rank as usize)
        .unwrap_or(0..0);
    let my_positions = &positions[block.clone()];
    let my_frames = load_frames(&data_dir, my_positions, meta.probe_width, meta.probe_height)?;

    let (session, _transport, comm) = ctx.join_all_ranks()?;
    let state = reconstruct(
        &my_frames,
        my_positions,
        (meta.probe_width, meta.probe_height),
        (meta.object_width, meta.object_height),
        &config,
        &comm,
    )?;
    let result = ReconstructResult {
        rank: ctx.rank,
        counters: comm.counters(),
        error_history: state.error_history.clone(),
        object: (ctx.rank == 0).then(|| state.object.clone()),
        probe: (ctx.rank == 0).then(|| state.probe.clone()),
    };
    session.disconnect(&crate::rendezvous::Namespace::from_qualified(comm.group())?)?;
    Ok(result.encode())
}

/// Worker-process entry point: report to the stage socket, receive the
/// partition, run the named stage, then send the result or failure.
pub fn worker_main(stage_name: &str) -> i32 {
    let Some(stage_fn) = lookup_stage(stage_name) else {
        eprintln!("bridgegrid-worker: unknown stage {stage_name:?}");
        return 2;
    };
    let Ok(stage_addr) = std::env::var(ENV_STAGE_ADDR) else {
        eprintln!("bridgegrid-worker: {ENV_STAGE_ADDR} not set");
        return 2;
    };
    let attach_opts = match AttachOptions::from_process_env() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("bridgegrid-worker: bad environment: {e}");
            return 2;
        }
    };

    let mut stream = match TcpStream::connect(&stage_addr) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bridgegrid-worker: cannot reach driver at {stage_addr}: {e}");
            return 3;
        }
    };
    let hello = Frame::new(msg::HELLO, Encoder::new().u32(attach_opts.rank).finish());
    if hello.write_to(&mut stream).is_err() {
        return 3;
    }
    let task = match Frame::read_from(&mut stream) {
        Ok(f) if f.msg_type == msg::TASK => f,
        _ => return 3,
    };
    let mut d = Decoder::new(&task.body);
    let parsed = (|| -> Result<(serde_json::Value, Vec<Vec<u8>>), crate::wire::WireError> {
        let _stage = d.str()?;
        let params_raw = d.bytes()?;
        let params = serde_json::from_slice(&params_raw).unwrap_or(serde_json::Value::Null);
        let count = d.u32()?;
        let mut partition = Vec::with_capacity(count as usize);
        for _ in 0..count {
            partition.push(d.bytes()?);
        }
        Ok((params, partition))
    })();
    let (params, partition) = match parsed {
        Ok(t) => t,
        Err(_) => return 3,
    };

    let mut ctx = StageContext::new(attach_opts, partition, params);
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| stage_fn(&mut ctx)));
    // Deregister before reporting so peers observe the departure first.
    ctx.finish();

    let (frame, code) = match outcome {
        Ok(Ok(payload)) => (
            Frame::new(msg::RESULT, Encoder::new().bytes(&payload).finish()),
            0,
        ),
        Ok(Err(e)) => (
            Frame::new(
                msg::FAILED,
                Encoder::new().str(&e.class).str(&e.message).finish(),
            ),
            1,
        ),
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string());
            (
                Frame::new(
                    msg::FAILED,
                    Encoder::new().str("PANIC").str(&message).finish(),
                ),
                1,
            )
        }
    };
    if frame.write_to(&mut stream).is_err() {
        return 3;
    }
    code
}
