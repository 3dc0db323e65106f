//! The rendezvous server: accepts attachments from processes it did not
//! spawn, serializes all state mutations through one lock, and drives the
//! fence / connect / disconnect collectives to completion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::wire::{msg, Decoder, Encoder, Frame};

use super::contact::{random_token, write_contact_file, ServerContactInfo};
use super::{
    errcode, ConnectRequest, EventKind, EventNotification, EventSubject, Namespace, ProcessId,
    RendezvousError, HEARTBEAT_INTERVAL, HEARTBEAT_MISSED_LIMIT,
};

/// Housekeeping cadence for connect deadlines and the failure detector.
const SWEEP_INTERVAL: Duration = Duration::from_millis(10);

/// What the server did, in order. The launch variant exists so the
/// suppressed-launch property can be asserted against a complete log:
/// this server never records it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    ServerStart,
    Attach,
    Put,
    Fence,
    FenceComplete,
    Get,
    Connect,
    GroupFormed,
    NotifyLaggard,
    Disconnect,
    GroupDissolved,
    Finalize,
    Crash,
    ProcessLaunch,
    Shutdown,
}

#[derive(Debug, Clone)]
pub struct ActionRecord {
    pub kind: ActionKind,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// `host:port` to bind; port 0 picks an ephemeral port.
    pub bind: String,
    pub contact_dir: PathBuf,
    pub cluster_id: Option<String>,
    /// Shared secret; generated when absent.
    pub token: Option<String>,
}

impl ServerConfig {
    pub fn new(contact_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            bind: "127.0.0.1:0".to_string(),
            contact_dir: contact_dir.into(),
            cluster_id: None,
            token: None,
        }
    }
}

#[derive(Clone)]
struct ConnHandle {
    tx: Sender<Frame>,
}

impl ConnHandle {
    fn send(&self, frame: Frame) {
        let _ = self.tx.send(frame);
    }

    fn reply_ok(&self, req_id: u64, payload: Vec<u8>) {
        self.send(Frame::new(
            msg::REPLY_OK,
            Encoder::new().u64(req_id).bytes(&payload).finish(),
        ));
    }

    fn reply_err(&self, req_id: u64, code: u16, message: &str) {
        self.send(Frame::new(
            msg::REPLY_ERR,
            Encoder::new().u64(req_id).u16(code).str(message).finish(),
        ));
    }

    fn event(&self, ev: &EventNotification) {
        self.send(Frame::new(msg::EVENT, ev.encode()));
    }
}

struct Waiter {
    conn: ConnHandle,
    req_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Liveness {
    Attached,
    Finalized,
    Crashed,
}

struct ProcState {
    liveness: Liveness,
    conn: Option<ConnHandle>,
    uncommitted: HashMap<String, Vec<u8>>,
    last_seen: Instant,
}

struct NamespaceState {
    size: u32,
    epoch: u64,
    /// Ranks that called fence in the current epoch, with their waiters.
    called: BTreeMap<u32, Option<Waiter>>,
    staged: HashMap<(ProcessId, String), Vec<u8>>,
}

type ConnectKey = (Vec<(String, u32)>, Option<String>);

struct ConnectOp {
    participants: Vec<ProcessId>, // sorted
    tag: Option<String>,
    called: BTreeMap<ProcessId, Waiter>,
    notified: BTreeSet<ProcessId>,
    deadline: Option<Instant>,
}

struct GroupState {
    ns: Namespace,
    members: Vec<ProcessId>, // sorted
    disc_called: BTreeMap<ProcessId, Waiter>,
    inflight: u32,
    dead: bool,
}

struct ServerState {
    namespaces: HashMap<String, NamespaceState>,
    procs: HashMap<ProcessId, ProcState>,
    connects: HashMap<ConnectKey, ConnectOp>,
    groups: HashMap<String, GroupState>,
    committed: HashMap<(ProcessId, String), Vec<u8>>,
    cached_events: HashMap<ProcessId, Vec<EventNotification>>,
    group_counter: u64,
    log: Vec<ActionRecord>,
    client_streams: Vec<TcpStream>,
}

struct ServerShared {
    state: Mutex<ServerState>,
    token: String,
    cluster_id: Option<String>,
    shutdown: AtomicBool,
    local_addr: SocketAddr,
}

/// A running rendezvous server. Dropping it shuts it down and removes the
/// contact file.
pub struct Server {
    shared: Arc<ServerShared>,
    contact: ServerContactInfo,
    accept_thread: Option<JoinHandle<()>>,
    sweep_thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("addr", &self.shared.local_addr)
            .finish()
    }
}



/// Start a server per `config`: bind, write the contact file, and begin
/// accepting attachments.
pub fn server_start(config: &ServerConfig) -> Result<Server, RendezvousError> {
    Server::start(config)
}

impl Server {
    pub fn start(config: &ServerConfig) -> Result<Server, RendezvousError> {
        let listener =
            TcpListener::bind(&config.bind).map_err(|source| RendezvousError::BindFailed {
                addr: config.bind.clone(),
                source,
            })?;
        let local_addr = listener.local_addr().map_err(|source| {
            RendezvousError::BindFailed {
                addr: config.bind.clone(),
                source,
            }
        })?;
        let token = config.token.clone().unwrap_or_else(random_token);
        let host = local_addr.ip().to_string();
        let path = write_contact_file(&config.contact_dir, &host, local_addr.port(), &token)?;
        let contact = ServerContactInfo {
            host,
            port: local_addr.port(),
            token: token.clone(),
            contact_file_path: path,
            pid: std::process::id(),
        };

        let shared = Arc::new(ServerShared {
            state: Mutex::new(ServerState {
                namespaces: HashMap::new(),
                procs: HashMap::new(),
                connects: HashMap::new(),
                groups: HashMap::new(),
                committed: HashMap::new(),
                cached_events: HashMap::new(),
                group_counter: 0,
                log: vec![ActionRecord {
                    kind: ActionKind::ServerStart,
                    detail: local_addr.to_string(),
                }],
                client_streams: Vec::new(),
            }),
            token,
            cluster_id: config.cluster_id.clone(),
            shutdown: AtomicBool::new(false),
            local_addr,
        });

        let accept_shared = Arc::clone(&shared);
        let accept_thread = std::thread::spawn(move || accept_loop(listener, accept_shared));
        let sweep_shared = Arc::clone(&shared);
        let sweep_thread = std::thread::spawn(move || sweep_loop(sweep_shared));

        Ok(Server {
            shared,
            contact,
            accept_thread: Some(accept_thread),
            sweep_thread: Some(sweep_thread),
        })
    }

    pub fn contact(&self) -> &ServerContactInfo {
        &self.contact
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.local_addr
    }

    /// Snapshot of everything the server has done so far.
    pub fn action_log(&self) -> Vec<ActionRecord> {
        self.shared.state.lock().unwrap().log.clone()
    }

    /// Stop accepting, drop all clients, and remove the contact file.
    pub fn shutdown(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.shared.local_addr);
        {
            let mut st = self.shared.state.lock().unwrap();
            st.log.push(ActionRecord {
                kind: ActionKind::Shutdown,
                detail: String::new(),
            });
            for s in st.client_streams.drain(..) {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        if let Some(t) = self.sweep_thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.contact.contact_file_path);
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<ServerShared>) {
    loop {
        let (stream, _) = match listener.accept() {
            Ok(pair) => pair,
            Err(_) => break,
        };
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let conn_shared = Arc::clone(&shared);
        std::thread::spawn(move || connection_loop(stream, conn_shared));
    }
}

fn sweep_loop(shared: Arc<ServerShared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        std::thread::sleep(SWEEP_INTERVAL);
        let now = Instant::now();
        let mut st = shared.state.lock().unwrap();

        // Expire connect deadlines. Never early: strict >= comparison on
        // a deadline computed at call arrival.
        let expired: Vec<ConnectKey> = st
            .connects
            .iter()
            .filter(|(_, op)| op.deadline.is_some_and(|d| now >= d))
            .map(|(k, _)| k.clone())
            .collect();
        for key in expired {
            if let Some(op) = st.connects.remove(&key) {
                for (_, w) in op.called {
                    w.conn.reply_err(w.req_id, errcode::TIMEOUT, "connect timeout");
                }
            }
        }

        // Failure detector: missed heartbeats.
        let dead_after = HEARTBEAT_INTERVAL * HEARTBEAT_MISSED_LIMIT;
        let stale: Vec<ProcessId> = st
            .procs
            .iter()
            .filter(|(_, p)| {
                p.liveness == Liveness::Attached && now.duration_since(p.last_seen) > dead_after
            })
            .map(|(pid, _)| pid.clone())
            .collect();
        for pid in stale {
            handle_departure(&mut st, &pid, true);
        }
    }
}

fn connection_loop(stream: TcpStream, shared: Arc<ServerShared>) {
    let mut read_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let write_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };

    let (tx, rx) = mpsc::channel::<Frame>();
    let writer = std::thread::spawn(move || {
        let mut w = std::io::BufWriter::new(write_half);
        while let Ok(frame) = rx.recv() {
            if frame.write_to(&mut w).is_err() {
                break;
            }
        }
    });
    let handle = ConnHandle { tx };

    let pid = match attach_handshake(&mut read_half, &stream, &shared, &handle) {
        Some(pid) => pid,
        None => {
            drop(handle);
            let _ = writer.join();
            return;
        }
    };

    loop {
        let frame = match Frame::read_from(&mut read_half) {
            Ok(f) => f,
            Err(_) => break,
        };
        let mut st = shared.state.lock().unwrap();
        if let Some(p) = st.procs.get_mut(&pid) {
            p.last_seen = Instant::now();
        }
        match handle_frame(&mut st, &shared, &pid, &handle, frame) {
            FrameOutcome::Continue => {}
            FrameOutcome::Close => break,
        }
    }

    // EOF or error. A clean finalize already transitioned liveness; an
    // abrupt close counts as a crash.
    {
        let mut st = shared.state.lock().unwrap();
        if st
            .procs
            .get(&pid)
            .is_some_and(|p| p.liveness == Liveness::Attached)
        {
            handle_departure(&mut st, &pid, true);
        }
    }
    drop(handle);
    let _ = writer.join();
}

fn attach_handshake(
    read_half: &mut TcpStream,
    stream: &TcpStream,
    shared: &Arc<ServerShared>,
    handle: &ConnHandle,
) -> Option<ProcessId> {
    let frame = Frame::read_from(read_half).ok()?;
    if frame.msg_type != msg::ATTACH {
        return None;
    }
    let mut d = Decoder::new(&frame.body);
    let parse = (|| -> Result<(u64, String, u32, u32, String), RendezvousError> {
        let req_id = d.u64()?;
        let ns = d.str()?;
        let rank = d.u32()?;
        let size = d.u32()?;
        let token = d.str()?;
        Ok((req_id, ns, rank, size, token))
    })();
    let (req_id, ns_name, rank, size, token) = match parse {
        Ok(t) => t,
        Err(_) => return None,
    };

    if token != shared.token {
        handle.reply_err(req_id, errcode::TOKEN_MISMATCH, "bad token");
        return None;
    }
    let namespace = match Namespace::with_cluster(ns_name, shared.cluster_id.clone()) {
        Ok(ns) => ns,
        Err(e) => {
            handle.reply_err(req_id, errcode::PROTOCOL, &e.to_string());
            return None;
        }
    };
    if size == 0 || rank >= size {
        handle.reply_err(
            req_id,
            errcode::PROTOCOL,
            &format!("rank {rank} outside namespace size {size}"),
        );
        return None;
    }
    let pid = ProcessId::new(namespace.clone(), rank);

    let mut st = shared.state.lock().unwrap();
    let qualified = namespace.qualified();
    match st.namespaces.get(&qualified) {
        Some(existing) if existing.size != size => {
            handle.reply_err(
                req_id,
                errcode::PROTOCOL,
                &format!(
                    "namespace {qualified} already sized {} (got {size})",
                    existing.size
                ),
            );
            return None;
        }
        Some(_) => {}
        None => {
            st.namespaces.insert(
                qualified.clone(),
                NamespaceState {
                    size,
                    epoch: 0,
                    called: BTreeMap::new(),
                    staged: HashMap::new(),
                },
            );
        }
    }
    match st.procs.get(&pid).map(|p| p.liveness) {
        Some(Liveness::Attached) => {
            handle.reply_err(req_id, errcode::DUPLICATE_RANK, &rank.to_string());
            return None;
        }
        Some(Liveness::Crashed) => {
            handle.reply_err(
                req_id,
                errcode::PEER_TERMINATED,
                &format!("{pid} previously terminated"),
            );
            return None;
        }
        Some(Liveness::Finalized) | None => {}
    }
    st.procs.insert(
        pid.clone(),
        ProcState {
            liveness: Liveness::Attached,
            conn: Some(handle.clone()),
            uncommitted: HashMap::new(),
            last_seen: Instant::now(),
        },
    );
    if let Ok(s) = stream.try_clone() {
        st.client_streams.push(s);
    }
    st.log.push(ActionRecord {
        kind: ActionKind::Attach,
        detail: pid.to_string(),
    });
    handle.reply_ok(req_id, Encoder::new().str(&qualified).finish());

    // Deliver cached events now that the process can receive them.
    if let Some(events) = st.cached_events.remove(&pid) {
        for ev in events {
            handle.event(&ev);
        }
    }
    Some(pid)
}

enum FrameOutcome {
    Continue,
    Close,
}

fn handle_frame(
    st: &mut ServerState,
    shared: &Arc<ServerShared>,
    pid: &ProcessId,
    conn: &ConnHandle,
    frame: Frame,
) -> FrameOutcome {
    let mut d = Decoder::new(&frame.body);
    match frame.msg_type {
        msg::PING => FrameOutcome::Continue,
        msg::PUT => {
            let (Ok(req_id), Ok(key), Ok(value)) = (d.u64(), d.str(), d.bytes()) else {
                return FrameOutcome::Close;
            };
            st.log.push(ActionRecord {
                kind: ActionKind::Put,
                detail: format!("{pid} {key}"),
            });
            if let Some(p) = st.procs.get_mut(pid) {
                p.uncommitted.insert(key, value);
            }
            conn.reply_ok(req_id, Vec::new());
            FrameOutcome::Continue
        }
        msg::FENCE => {
            let Ok(req_id) = d.u64() else {
                return FrameOutcome::Close;
            };
            handle_fence(st, pid, conn, req_id);
            FrameOutcome::Continue
        }
        msg::GET => {
            let (Ok(req_id), Ok(owner_ns), Ok(owner_rank), Ok(key)) =
                (d.u64(), d.str(), d.u32(), d.str())
            else {
                return FrameOutcome::Close;
            };
            handle_get(st, pid, conn, req_id, &owner_ns, owner_rank, &key);
            FrameOutcome::Continue
        }
        msg::CONNECT => {
            let Ok(req_id) = d.u64() else {
                return FrameOutcome::Close;
            };
            let Ok(request) = ConnectRequest::decode(&mut d) else {
                conn.reply_err(req_id, errcode::PROTOCOL, "malformed connect");
                return FrameOutcome::Continue;
            };
            handle_connect(st, shared, pid, conn, req_id, request);
            FrameOutcome::Continue
        }
        msg::DISCONNECT => {
            let (Ok(req_id), Ok(group)) = (d.u64(), d.str()) else {
                return FrameOutcome::Close;
            };
            handle_disconnect(st, pid, conn, req_id, &group);
            FrameOutcome::Continue
        }
        msg::COLL_BEGIN => {
            if let Ok(group) = d.str() {
                if let Some(g) = st.groups.get_mut(&group) {
                    g.inflight += 1;
                }
            }
            FrameOutcome::Continue
        }
        msg::COLL_END => {
            if let Ok(group) = d.str() {
                if let Some(g) = st.groups.get_mut(&group) {
                    g.inflight = g.inflight.saturating_sub(1);
                }
                try_complete_disconnect(st, &group);
            }
            FrameOutcome::Continue
        }
        msg::FINALIZE => {
            let Ok(req_id) = d.u64() else {
                return FrameOutcome::Close;
            };
            st.log.push(ActionRecord {
                kind: ActionKind::Finalize,
                detail: pid.to_string(),
            });
            conn.reply_ok(req_id, Vec::new());
            handle_departure(st, pid, false);
            FrameOutcome::Close
        }
        _ => FrameOutcome::Close,
    }
}

fn handle_fence(st: &mut ServerState, pid: &ProcessId, conn: &ConnHandle, req_id: u64) {
    st.log.push(ActionRecord {
        kind: ActionKind::Fence,
        detail: pid.to_string(),
    });
    let qualified = pid.namespace.qualified();
    let size = match st.namespaces.get(&qualified) {
        Some(ns) => ns.size,
        None => {
            conn.reply_err(req_id, errcode::UNKNOWN_PROCESS, &qualified);
            return;
        }
    };

    // A rank that can no longer call fence makes this epoch impossible.
    for rank in 0..size {
        let peer = ProcessId::new(pid.namespace.clone(), rank);
        let called = st
            .namespaces
            .get(&qualified)
            .map(|ns| ns.called.contains_key(&rank))
            .unwrap_or(false);
        match st.procs.get(&peer).map(|p| p.liveness) {
            Some(Liveness::Crashed) => {
                conn.reply_err(req_id, errcode::PEER_TERMINATED, &peer.to_string());
                return;
            }
            Some(Liveness::Finalized) if !called => {
                conn.reply_err(req_id, errcode::PEER_TERMINATED, &peer.to_string());
                return;
            }
            _ => {}
        }
    }

    // Stage this rank's puts for commit at epoch completion.
    let staged: Vec<((ProcessId, String), Vec<u8>)> = st
        .procs
        .get_mut(pid)
        .map(|p| {
            p.uncommitted
                .drain()
                .map(|(k, v)| ((pid.clone(), k), v))
                .collect()
        })
        .unwrap_or_default();
    let ns = st.namespaces.get_mut(&qualified).unwrap();
    ns.staged.extend(staged);
    ns.called.insert(
        pid.rank,
        Some(Waiter {
            conn: conn.clone(),
            req_id,
        }),
    );

    if ns.called.len() as u32 == ns.size {
        let staged: Vec<_> = ns.staged.drain().collect();
        let waiters: Vec<_> = ns.called.iter_mut().filter_map(|(_, w)| w.take()).collect();
        ns.called.clear();
        ns.epoch += 1;
        let epoch = ns.epoch;
        st.committed.extend(staged);
        st.log.push(ActionRecord {
            kind: ActionKind::FenceComplete,
            detail: format!("{qualified} epoch {epoch}"),
        });
        for w in waiters {
            w.conn.reply_ok(w.req_id, Vec::new());
        }
    }
}

fn handle_get(
    st: &mut ServerState,
    pid: &ProcessId,
    conn: &ConnHandle,
    req_id: u64,
    owner_ns: &str,
    owner_rank: u32,
    key: &str,
) {
    st.log.push(ActionRecord {
        kind: ActionKind::Get,
        detail: format!("{pid} <- {owner_ns}:{owner_rank} {key}"),
    });
    let Ok(owner_namespace) = Namespace::from_qualified(owner_ns) else {
        conn.reply_err(req_id, errcode::UNKNOWN_PROCESS, owner_ns);
        return;
    };
    let known = match st.namespaces.get(owner_ns) {
        Some(ns) => owner_rank < ns.size,
        None => false,
    };
    if !known {
        conn.reply_err(
            req_id,
            errcode::UNKNOWN_PROCESS,
            &format!("{owner_ns}:{owner_rank}"),
        );
        return;
    }
    let owner = ProcessId::new(owner_namespace, owner_rank);

    // Owner visibility: a process always sees its own puts.
    if owner == *pid {
        if let Some(p) = st.procs.get(pid) {
            if let Some(v) = p.uncommitted.get(key) {
                conn.reply_ok(req_id, v.clone());
                return;
            }
        }
        let qualified = pid.namespace.qualified();
        if let Some(ns) = st.namespaces.get(&qualified) {
            if let Some(v) = ns.staged.get(&(pid.clone(), key.to_string())) {
                conn.reply_ok(req_id, v.clone());
                return;
            }
        }
    }

    match st.committed.get(&(owner.clone(), key.to_string())) {
        Some(v) => conn.reply_ok(req_id, v.clone()),
        None => conn.reply_err(
            req_id,
            errcode::KEY_NOT_VISIBLE,
            &format!("{owner}\u{1f}{key}"),
        ),
    }
}

fn connect_key(request: &ConnectRequest) -> ConnectKey {
    (
        request
            .sorted_participants()
            .iter()
            .map(|p| (p.namespace.qualified(), p.rank))
            .collect(),
        request.tag.clone(),
    )
}

fn handle_connect(
    st: &mut ServerState,
    shared: &Arc<ServerShared>,
    pid: &ProcessId,
    conn: &ConnHandle,
    req_id: u64,
    request: ConnectRequest,
) {
    if let Err(e) = request.validate() {
        conn.reply_err(req_id, errcode::PROTOCOL, &e.to_string());
        return;
    }
    let participants = request.sorted_participants();
    if !participants.contains(pid) {
        conn.reply_err(req_id, errcode::PROTOCOL, "caller not a participant");
        return;
    }
    st.log.push(ActionRecord {
        kind: ActionKind::Connect,
        detail: format!("{pid} tag={:?}", request.tag),
    });

    // Monotonicity: a dead participant can never complete the collective.
    for p in &participants {
        if st.procs.get(p).map(|s| s.liveness) == Some(Liveness::Crashed) {
            conn.reply_err(req_id, errcode::PEER_TERMINATED, &p.to_string());
            return;
        }
        if st.procs.get(p).map(|s| s.liveness) == Some(Liveness::Finalized) {
            conn.reply_err(req_id, errcode::PEER_TERMINATED, &p.to_string());
            return;
        }
    }

    let key = connect_key(&request);
    let op = st.connects.entry(key.clone()).or_insert_with(|| ConnectOp {
        participants: participants.clone(),
        tag: request.tag.clone(),
        called: BTreeMap::new(),
        notified: BTreeSet::new(),
        deadline: None,
    });
    if let Some(t) = request.timeout {
        let candidate = Instant::now() + t;
        op.deadline = Some(match op.deadline {
            Some(d) => d.min(candidate),
            None => candidate,
        });
    }
    op.called.insert(
        pid.clone(),
        Waiter {
            conn: conn.clone(),
            req_id,
        },
    );

    if op.called.len() == op.participants.len() {
        let op = st.connects.remove(&key).unwrap();
        complete_connect(st, shared, op);
        return;
    }

    // Ask the laggards to join, exactly once per request per process.
    let laggards: Vec<ProcessId> = op
        .participants
        .iter()
        .filter(|p| !op.called.contains_key(*p) && !op.notified.contains(*p))
        .cloned()
        .collect();
    if !laggards.is_empty() {
        let notify_request = ConnectRequest {
            participants: op.participants.clone(),
            tag: op.tag.clone(),
            timeout: request.timeout,
        };
        let ev = EventNotification {
            kind: EventKind::ConnectRequested,
            subject: EventSubject::Connect(notify_request),
            payload: Vec::new(),
        };
        for laggard in laggards {
            st.connects
                .get_mut(&key)
                .unwrap()
                .notified
                .insert(laggard.clone());
            st.log.push(ActionRecord {
                kind: ActionKind::NotifyLaggard,
                detail: laggard.to_string(),
            });
            deliver_event(st, &laggard, ev.clone());
        }
    }
}

fn complete_connect(st: &mut ServerState, shared: &Arc<ServerShared>, op: ConnectOp) {
    st.group_counter += 1;
    let ns = Namespace::with_cluster(format!("grp-{}", st.group_counter), shared.cluster_id.clone())
        .expect("group namespace is always valid");
    let qualified = ns.qualified();

    let mut endpoints: Vec<(ProcessId, Option<Vec<u8>>)> = Vec::new();
    for p in &op.participants {
        let v = st.committed.get(&(p.clone(), "endpoint".to_string())).cloned();
        endpoints.push((p.clone(), v));
    }

    st.groups.insert(
        qualified.clone(),
        GroupState {
            ns: ns.clone(),
            members: op.participants.clone(),
            disc_called: BTreeMap::new(),
            inflight: 0,
            dead: false,
        },
    );
    st.log.push(ActionRecord {
        kind: ActionKind::GroupFormed,
        detail: format!("{qualified} size {}", op.participants.len()),
    });

    for (idx, p) in op.participants.iter().enumerate() {
        if let Some(w) = op.called.get(p) {
            let mut enc = Encoder::new()
                .str(&qualified)
                .u32(idx as u32)
                .u32(op.participants.len() as u32);
            for (q, ep) in &endpoints {
                enc = enc.str(&q.namespace.qualified()).u32(q.rank);
                enc = match ep {
                    Some(v) => enc.u8(1).bytes(v),
                    None => enc.u8(0),
                };
            }
            w.conn.reply_ok(w.req_id, enc.finish());
        }
    }

    let ready = EventNotification {
        kind: EventKind::GroupReady,
        subject: EventSubject::Connect(ConnectRequest {
            participants: op.participants.clone(),
            tag: op.tag.clone(),
            timeout: None,
        }),
        payload: qualified.into_bytes(),
    };
    for p in &op.participants {
        deliver_event(st, p, ready.clone());
    }
}

fn handle_disconnect(
    st: &mut ServerState,
    pid: &ProcessId,
    conn: &ConnHandle,
    req_id: u64,
    group: &str,
) {
    st.log.push(ActionRecord {
        kind: ActionKind::Disconnect,
        detail: format!("{pid} {group}"),
    });
    let Some(g) = st.groups.get_mut(group) else {
        conn.reply_err(req_id, errcode::NOT_A_MEMBER, group);
        return;
    };
    if !g.members.contains(pid) {
        conn.reply_err(req_id, errcode::NOT_A_MEMBER, group);
        return;
    }
    if g.dead {
        conn.reply_err(req_id, errcode::PEER_TERMINATED, group);
        return;
    }
    g.disc_called.insert(
        pid.clone(),
        Waiter {
            conn: conn.clone(),
            req_id,
        },
    );
    try_complete_disconnect(st, group);
}

/// Completes only once every member has called disconnect and no
/// collective on the group is still in flight.
fn try_complete_disconnect(st: &mut ServerState, group: &str) {
    let ready = st
        .groups
        .get(group)
        .map(|g| !g.dead && g.inflight == 0 && g.disc_called.len() == g.members.len())
        .unwrap_or(false);
    if !ready {
        return;
    }
    let g = st.groups.remove(group).unwrap();
    st.log.push(ActionRecord {
        kind: ActionKind::GroupDissolved,
        detail: g.ns.qualified(),
    });
    for (_, w) in g.disc_called {
        w.conn.reply_ok(w.req_id, Vec::new());
    }
}

fn deliver_event(st: &mut ServerState, target: &ProcessId, ev: EventNotification) {
    match st.procs.get(target) {
        Some(p) if p.liveness == Liveness::Attached => {
            if let Some(conn) = &p.conn {
                conn.event(&ev);
                return;
            }
        }
        Some(p) if p.liveness != Liveness::Attached => {
            // Best-effort: dropped for departed processes.
            return;
        }
        _ => {}
    }
    st.cached_events.entry(target.clone()).or_default().push(ev);
}

/// Handles both clean finalize and crash; fails every collective the
/// departed process still gates.
fn handle_departure(st: &mut ServerState, pid: &ProcessId, crashed: bool) {
    let Some(p) = st.procs.get_mut(pid) else {
        return;
    };
    if p.liveness != Liveness::Attached {
        return;
    }
    p.liveness = if crashed {
        Liveness::Crashed
    } else {
        Liveness::Finalized
    };
    p.conn = None;
    p.uncommitted.clear();
    if crashed {
        st.log.push(ActionRecord {
            kind: ActionKind::Crash,
            detail: pid.to_string(),
        });
    }

    // Fences in the attach namespace.
    let qualified = pid.namespace.qualified();
    if let Some(ns) = st.namespaces.get_mut(&qualified) {
        let called_here = ns.called.contains_key(&pid.rank);
        let must_abort = !ns.called.is_empty() && (crashed || !called_here);
        if must_abort {
            let waiters: Vec<_> = ns.called.iter_mut().filter_map(|(_, w)| w.take()).collect();
            ns.called.clear();
            // Staged entries return to their owners' uncommitted maps so a
            // later successful fence can still publish them; newer puts win.
            let staged: Vec<_> = ns.staged.drain().collect();
            for ((owner, key), value) in staged {
                if let Some(op) = st.procs.get_mut(&owner) {
                    op.uncommitted.entry(key).or_insert(value);
                }
            }
            for w in waiters {
                w.conn
                    .reply_err(w.req_id, errcode::PEER_TERMINATED, &pid.to_string());
            }
        }
    }

    // Pending connects naming this process.
    let affected: Vec<ConnectKey> = st
        .connects
        .iter()
        .filter(|(_, op)| {
            op.participants.contains(pid) && (crashed || !op.called.contains_key(pid))
        })
        .map(|(k, _)| k.clone())
        .collect();
    for key in affected {
        if let Some(op) = st.connects.remove(&key) {
            for (_, w) in op.called {
                w.conn
                    .reply_err(w.req_id, errcode::PEER_TERMINATED, &pid.to_string());
            }
        }
    }

    // Groups the process belongs to.
    let member_groups: Vec<String> = st
        .groups
        .iter()
        .filter(|(_, g)| g.members.contains(pid))
        .map(|(k, _)| k.clone())
        .collect();
    let mut notify_targets: BTreeSet<ProcessId> = BTreeSet::new();
    for key in member_groups {
        let g = st.groups.get_mut(&key).unwrap();
        let contributed = g.disc_called.contains_key(pid);
        if crashed || !contributed {
            g.dead = true;
            let waiters: Vec<_> = std::mem::take(&mut g.disc_called)
                .into_values()
                .collect();
            for w in waiters {
                w.conn
                    .reply_err(w.req_id, errcode::PEER_TERMINATED, &pid.to_string());
            }
        }
        for m in &g.members {
            if m != pid {
                notify_targets.insert(m.clone());
            }
        }
    }

    // Namespace co-members also learn about the departure.
    if let Some(ns) = st.namespaces.get(&qualified) {
        for rank in 0..ns.size {
            if rank != pid.rank {
                notify_targets.insert(ProcessId::new(pid.namespace.clone(), rank));
            }
        }
    }
    let ev = EventNotification {
        kind: EventKind::ProcessTerminated,
        subject: EventSubject::Process(pid.clone()),
        payload: vec![u8::from(crashed)],
    };
    for target in notify_targets {
        deliver_event(st, &target, ev.clone());
    }
}
