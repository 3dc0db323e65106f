//! Client side of the rendezvous protocol: attach, key-value publication,
//! fence, connect/disconnect, and event handler delivery.

use std::collections::{BTreeMap, HashMap};
use std::io::BufWriter;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex};

use crate::wire::{msg, Decoder, Encoder, Frame};

use super::contact::search_contact_dir;
use super::{
    default_contact_dir, error_from_code, ConnectRequest, EventKind, EventNotification, GroupInfo,
    Namespace, ProcessId, RendezvousError, ENV_CONTACT_DIR, ENV_NAMESPACE, ENV_RANK, ENV_SERVER,
    ENV_SIZE, ENV_TOKEN, HEARTBEAT_INTERVAL,
};

type Result<T> = std::result::Result<T, RendezvousError>;

/// Everything needed to attach: identity plus how to find the server.
#[derive(Debug, Clone)]
pub struct AttachOptions {
    pub namespace: String,
    pub rank: u32,
    pub size: u32,
    /// Explicit `host:port`; skips the contact-file search when set.
    pub server: Option<String>,
    /// Token override; otherwise the contact file's token is used.
    pub token: Option<String>,
    pub contact_dir: Option<PathBuf>,
}

impl AttachOptions {
    pub fn new(namespace: impl Into<String>, rank: u32, size: u32) -> Self {
        AttachOptions {
            namespace: namespace.into(),
            rank,
            size,
            server: None,
            token: None,
            contact_dir: None,
        }
    }

    /// Parse the PMI environment contract from an explicit map.
    pub fn from_env_map(env: &HashMap<String, String>) -> Result<Self> {
        let need = |key: &str| {
            env.get(key)
                .cloned()
                .ok_or_else(|| RendezvousError::Protocol(format!("missing env {key}")))
        };
        let parse_u32 = |key: &str, v: String| {
            v.parse::<u32>()
                .map_err(|_| RendezvousError::Protocol(format!("bad env {key}={v}")))
        };
        let rank = parse_u32(ENV_RANK, need(ENV_RANK)?)?;
        let size = parse_u32(ENV_SIZE, need(ENV_SIZE)?)?;
        Ok(AttachOptions {
            namespace: need(ENV_NAMESPACE)?,
            rank,
            size,
            server: env.get(ENV_SERVER).cloned(),
            token: env.get(ENV_TOKEN).cloned(),
            contact_dir: env.get(ENV_CONTACT_DIR).map(PathBuf::from),
        })
    }

    pub fn from_process_env() -> Result<Self> {
        let env: HashMap<String, String> = std::env::vars().collect();
        Self::from_env_map(&env)
    }
}

/// Attach to a server found via `opts`, registering as
/// `(namespace, rank)`. Cached events for this process are delivered as
/// soon as the attach completes.
pub fn client_attach(opts: &AttachOptions) -> Result<Session> {
    Session::attach(opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandlerId(u64);

type Handler = Arc<dyn Fn(&EventNotification) + Send + Sync>;

struct HandlerTable {
    next_id: u64,
    by_kind: HashMap<EventKind, Vec<(HandlerId, Handler)>>,
}

enum DeliveryMsg {
    Event(EventNotification),
    /// Flush events that arrived before any handler of this kind existed
    /// to the newly registered handler.
    Flush(EventKind, HandlerId),
}

struct SessionInner {
    pid: ProcessId,
    size: u32,
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    pending: Mutex<HashMap<u64, SyncSender<Result<Vec<u8>>>>>,
    next_req: AtomicU64,
    op_lock: Mutex<()>,
    closed: AtomicBool,
    handlers: Mutex<HandlerTable>,
    delivery_tx: Mutex<Option<Sender<DeliveryMsg>>>,
}

/// An attached client session. Cloning shares the underlying connection.
///
/// Operations are serialized; `connect` is the exception and may run
/// concurrently from several threads so overlapping group formations can
/// proceed (they are distinct collectives server-side).
#[derive(Clone)]
pub struct Session {
    inner: Arc<SessionInner>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("pid", &self.inner.pid)
            .field("size", &self.inner.size)
            .finish()
    }
}

impl Session {
    fn attach(opts: &AttachOptions) -> Result<Session> {
        let mut candidates: Vec<(String, String)> = Vec::new();
        if let Some(addr) = &opts.server {
            candidates.push((addr.clone(), opts.token.clone().unwrap_or_default()));
        } else {
            let dir = opts
                .contact_dir
                .clone()
                .unwrap_or_else(default_contact_dir);
            for c in search_contact_dir(&dir) {
                let token = opts.token.clone().unwrap_or_else(|| c.token.clone());
                candidates.push((c.addr(), token));
            }
        }
        if candidates.is_empty() {
            return Err(RendezvousError::NoServerFound);
        }
        let mut last_refused = RendezvousError::NoServerFound;
        for (addr, token) in candidates {
            match TcpStream::connect(&addr) {
                Ok(stream) => return Self::attach_stream(stream, opts, &token),
                Err(_) => last_refused = RendezvousError::NoServerFound,
            }
        }
        Err(last_refused)
    }

    fn attach_stream(stream: TcpStream, opts: &AttachOptions, token: &str) -> Result<Session> {
        stream.set_nodelay(true).ok();
        let mut read_half = stream.try_clone().map_err(RendezvousError::from_io)?;
        let write_half = stream.try_clone().map_err(RendezvousError::from_io)?;
        let mut writer = BufWriter::new(write_half);

        let req_id = 1u64;
        Frame::new(
            msg::ATTACH,
            Encoder::new()
                .u64(req_id)
                .str(&opts.namespace)
                .u32(opts.rank)
                .u32(opts.size)
                .str(token)
                .finish(),
        )
        .write_to(&mut writer)?;

        // The attach reply comes before the reader thread exists; events
        // may follow immediately after and are handled once it starts.
        let reply = Frame::read_from(&mut read_half)?;
        let qualified = match reply.msg_type {
            msg::REPLY_OK => {
                let mut d = Decoder::new(&reply.body);
                let _req = d.u64()?;
                let payload = d.bytes()?;
                let mut pd = Decoder::new(&payload);
                pd.str()?
            }
            msg::REPLY_ERR => {
                let mut d = Decoder::new(&reply.body);
                let _req = d.u64()?;
                let code = d.u16()?;
                let message = d.str()?;
                return Err(error_from_code(code, message));
            }
            _ => {
                return Err(RendezvousError::Protocol(
                    "unexpected frame during attach".into(),
                ))
            }
        };
        let namespace = Namespace::from_qualified(&qualified)?;
        let pid = ProcessId::new(namespace, opts.rank);

        let (delivery_tx, delivery_rx) = mpsc::channel::<DeliveryMsg>();
        let inner = Arc::new(SessionInner {
            pid,
            size: opts.size,
            writer: Mutex::new(writer),
            stream,
            pending: Mutex::new(HashMap::new()),
            next_req: AtomicU64::new(2),
            op_lock: Mutex::new(()),
            closed: AtomicBool::new(false),
            handlers: Mutex::new(HandlerTable {
                next_id: 1,
                by_kind: HashMap::new(),
            }),
            delivery_tx: Mutex::new(Some(delivery_tx)),
        });

        let reader_inner = Arc::clone(&inner);
        std::thread::spawn(move || reader_loop(read_half, reader_inner));
        let delivery_inner = Arc::clone(&inner);
        std::thread::spawn(move || delivery_loop(delivery_rx, delivery_inner));
        let hb_inner = Arc::clone(&inner);
        std::thread::spawn(move || heartbeat_loop(hb_inner));

        Ok(Session { inner })
    }

    pub fn process_id(&self) -> &ProcessId {
        &self.inner.pid
    }

    pub fn namespace(&self) -> &Namespace {
        &self.inner.pid.namespace
    }

    pub fn rank(&self) -> u32 {
        self.inner.pid.rank
    }

    pub fn size(&self) -> u32 {
        self.inner.size
    }

    /// The ProcessId of `rank` within this session's attach namespace.
    pub fn peer(&self, rank: u32) -> ProcessId {
        ProcessId::new(self.inner.pid.namespace.clone(), rank)
    }

    /// Store `value` under `key`, visible to peers only after the next
    /// completed fence.
    pub fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        let _op = self.inner.op_lock.lock().unwrap();
        self.request(
            msg::PUT,
            |enc| enc.str(key).bytes(value),
        )?;
        Ok(())
    }

    /// Block until every rank of the namespace has called fence; commits
    /// all puts issued before the call.
    pub fn fence(&self) -> Result<()> {
        let _op = self.inner.op_lock.lock().unwrap();
        self.request(msg::FENCE, |enc| enc)?;
        Ok(())
    }

    /// Fetch the committed value for `(owner, key)`.
    pub fn get(&self, owner: &ProcessId, key: &str) -> Result<Vec<u8>> {
        let _op = self.inner.op_lock.lock().unwrap();
        self.request(msg::GET, |enc| {
            enc.str(&owner.namespace.qualified())
                .u32(owner.rank)
                .str(key)
        })
    }

    /// Collective group formation; completes when every participant has
    /// called connect with a matching (sorted participants, tag) pair.
    pub fn connect(&self, request: &ConnectRequest) -> Result<GroupInfo> {
        request.validate()?;
        if !request.participants.contains(&self.inner.pid) {
            return Err(RendezvousError::Protocol(
                "caller not in participant list".into(),
            ));
        }
        let payload = self.request(msg::CONNECT, |enc| request.encode(enc))?;
        let mut d = Decoder::new(&payload);
        let group = Namespace::from_qualified(&d.str()?)?;
        let rank_in_group = d.u32()?;
        let n = d.u32()?;
        let mut participants = Vec::with_capacity(n as usize);
        let mut endpoints = BTreeMap::new();
        for _ in 0..n {
            let ns = Namespace::from_qualified(&d.str()?)?;
            let rank = d.u32()?;
            let p = ProcessId::new(ns, rank);
            if d.u8()? == 1 {
                endpoints.insert(p.clone(), d.bytes()?);
            }
            participants.push(p);
        }
        Ok(GroupInfo {
            group,
            rank_in_group,
            participants,
            endpoints,
        })
    }

    /// Collective group dissolution; completes after every member calls
    /// disconnect and all collectives on the group have finished.
    pub fn disconnect(&self, group: &Namespace) -> Result<()> {
        let _op = self.inner.op_lock.lock().unwrap();
        self.request(msg::DISCONNECT, |enc| enc.str(&group.qualified()))?;
        Ok(())
    }

    /// Deregister from the server. Peers blocked on this process in a
    /// fence or connect receive `PEER_TERMINATED`.
    pub fn finalize(&self) -> Result<()> {
        let _op = self.inner.op_lock.lock().unwrap();
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let res = self.request_unchecked(msg::FINALIZE, |enc| enc);
        let _ = self.inner.stream.shutdown(std::net::Shutdown::Both);
        res.map(|_| ())
    }

    /// Drop the server connection without deregistering, as a crashed
    /// process would. Fault-injection hook for tests and harnesses.
    pub fn abandon(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let _ = self.inner.stream.shutdown(std::net::Shutdown::Both);
    }

    /// Register `handler` for events of `kind`. Events that arrived
    /// before any handler of this kind existed are replayed to it, in
    /// arrival order, on the delivery thread.
    pub fn register_event_handler(
        &self,
        kind: EventKind,
        handler: impl Fn(&EventNotification) + Send + Sync + 'static,
    ) -> HandlerId {
        let id;
        {
            let mut table = self.inner.handlers.lock().unwrap();
            id = HandlerId(table.next_id);
            table.next_id += 1;
            table
                .by_kind
                .entry(kind)
                .or_default()
                .push((id, Arc::new(handler)));
        }
        let tx = self.inner.delivery_tx.lock().unwrap();
        if let Some(tx) = tx.as_ref() {
            let _ = tx.send(DeliveryMsg::Flush(kind, id));
        }
        id
    }

    pub fn unregister_event_handler(&self, id: HandlerId) {
        let mut table = self.inner.handlers.lock().unwrap();
        for list in table.by_kind.values_mut() {
            list.retain(|(hid, _)| *hid != id);
        }
    }

    /// Internal: collective lifecycle notifications used by the
    /// disconnect ordering contract. Fire-and-forget.
    pub(crate) fn notify_collective_begin(&self, group: &str) {
        self.fire(msg::COLL_BEGIN, group);
    }

    pub(crate) fn notify_collective_end(&self, group: &str) {
        self.fire(msg::COLL_END, group);
    }

    fn fire(&self, msg_type: u8, group: &str) {
        if self.inner.closed.load(Ordering::SeqCst) {
            return;
        }
        let frame = Frame::new(msg_type, Encoder::new().str(group).finish());
        let mut w = self.inner.writer.lock().unwrap();
        let _ = frame.write_to(&mut *w);
    }

    fn request(
        &self,
        msg_type: u8,
        build: impl FnOnce(Encoder) -> Encoder,
    ) -> Result<Vec<u8>> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(RendezvousError::SessionClosed);
        }
        self.request_unchecked(msg_type, build)
    }

    fn request_unchecked(
        &self,
        msg_type: u8,
        build: impl FnOnce(Encoder) -> Encoder,
    ) -> Result<Vec<u8>> {
        let req_id = self.inner.next_req.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::sync_channel(1);
        self.inner.pending.lock().unwrap().insert(req_id, tx);

        let body = build(Encoder::new().u64(req_id)).finish();
        {
            let mut w = self.inner.writer.lock().unwrap();
            if let Err(e) = Frame::new(msg_type, body).write_to(&mut *w) {
                self.inner.pending.lock().unwrap().remove(&req_id);
                return Err(e.into());
            }
        }
        match rx.recv() {
            Ok(result) => result,
            Err(_) => Err(RendezvousError::SessionClosed),
        }
    }
}

impl RendezvousError {
    fn from_io(e: std::io::Error) -> Self {
        RendezvousError::Wire(crate::wire::WireError::Io(e))
    }
}

fn reader_loop(mut read_half: TcpStream, inner: Arc<SessionInner>) {
    loop {
        let frame = match Frame::read_from(&mut read_half) {
            Ok(f) => f,
            Err(_) => break,
        };
        match frame.msg_type {
            msg::REPLY_OK => {
                let mut d = Decoder::new(&frame.body);
                if let (Ok(req_id), Ok(payload)) = (d.u64(), d.bytes()) {
                    if let Some(tx) = inner.pending.lock().unwrap().remove(&req_id) {
                        let _ = tx.send(Ok(payload));
                    }
                }
            }
            msg::REPLY_ERR => {
                let mut d = Decoder::new(&frame.body);
                if let (Ok(req_id), Ok(code), Ok(message)) = (d.u64(), d.u16(), d.str()) {
                    if let Some(tx) = inner.pending.lock().unwrap().remove(&req_id) {
                        let _ = tx.send(Err(error_from_code(code, message)));
                    }
                }
            }
            msg::EVENT => {
                if let Ok(ev) = EventNotification::decode(&frame.body) {
                    let tx = inner.delivery_tx.lock().unwrap();
                    if let Some(tx) = tx.as_ref() {
                        let _ = tx.send(DeliveryMsg::Event(ev));
                    }
                }
            }
            _ => {}
        }
    }
    // Connection gone: fail anything still waiting and stop delivery.
    inner.closed.store(true, Ordering::SeqCst);
    let pending: Vec<_> = inner.pending.lock().unwrap().drain().collect();
    for (_, tx) in pending {
        let _ = tx.send(Err(RendezvousError::SessionClosed));
    }
    *inner.delivery_tx.lock().unwrap() = None;
}

fn delivery_loop(rx: Receiver<DeliveryMsg>, inner: Arc<SessionInner>) {
    // Events with no registered handler wait here until one appears.
    let mut parked: HashMap<EventKind, Vec<EventNotification>> = HashMap::new();
    while let Ok(item) = rx.recv() {
        match item {
            DeliveryMsg::Event(ev) => {
                let handlers: Vec<Handler> = {
                    let table = inner.handlers.lock().unwrap();
                    table
                        .by_kind
                        .get(&ev.kind)
                        .map(|l| l.iter().map(|(_, h)| Arc::clone(h)).collect())
                        .unwrap_or_default()
                };
                if handlers.is_empty() {
                    parked.entry(ev.kind).or_default().push(ev);
                } else {
                    for h in handlers {
                        h(&ev);
                    }
                }
            }
            DeliveryMsg::Flush(kind, handler_id) => {
                let handler: Option<Handler> = {
                    let table = inner.handlers.lock().unwrap();
                    table.by_kind.get(&kind).and_then(|l| {
                        l.iter()
                            .find(|(id, _)| *id == handler_id)
                            .map(|(_, h)| Arc::clone(h))
                    })
                };
                if let Some(h) = handler {
                    for ev in parked.remove(&kind).unwrap_or_default() {
                        h(&ev);
                    }
                }
            }
        }
    }
}

fn heartbeat_loop(inner: Arc<SessionInner>) {
    loop {
        std::thread::sleep(HEARTBEAT_INTERVAL);
        if inner.closed.load(Ordering::SeqCst) {
            return;
        }
        let frame = Frame::new(msg::PING, Vec::new());
        let mut w = inner.writer.lock().unwrap();
        if frame.write_to(&mut *w).is_err() {
            return;
        }
    }
}

impl Drop for SessionInner {
    fn drop(&mut self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            // Best-effort clean departure.
            let frame = Frame::new(msg::FINALIZE, Encoder::new().u64(u64::MAX).finish());
            if let Ok(mut w) = self.writer.lock() {
                let _ = frame.write_to(&mut *w);
            }
            let _ = self.stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// Convenience used by tests and the worker harness: attach `size`
/// sessions in one process, one per rank.
pub fn attach_local_group(
    namespace: &str,
    size: u32,
    server: &super::ServerContactInfo,
) -> Result<Vec<Session>> {
    (0..size)
        .map(|rank| {
            let mut opts = AttachOptions::new(namespace, rank, size);
            opts.server = Some(server.addr());
            opts.token = Some(server.token.clone());
            client_attach(&opts)
        })
        .collect()
}
