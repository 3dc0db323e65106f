//! Rank-to-rank TCP transport: one listener per process, lazy outbound
//! connections, and per-(group, source, tag) FIFO mailboxes.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};

use crate::wire::{msg, Decoder, Encoder, Frame};

use super::CollectiveError;

type Result<T> = std::result::Result<T, CollectiveError>;

/// Message channel discriminator inside `CMSG` frames.
pub(crate) const CHANNEL_USER: u8 = 0;
pub(crate) const CHANNEL_SYSTEM: u8 = 1;

type MailKey = (String, u32, u8, u64);

struct TransportState {
    mailboxes: HashMap<MailKey, VecDeque<Vec<u8>>>,
    dead: HashSet<(String, u32)>,
    outbound: HashMap<(String, u32), Sender<Frame>>,
    inbound_streams: Vec<TcpStream>,
}

struct TransportInner {
    local_addr: SocketAddr,
    state: Mutex<TransportState>,
    cv: Condvar,
    shutdown: AtomicBool,
}

/// A process-wide message endpoint. Bind one, publish
/// [`Transport::endpoint`] via the rendezvous key-value space, and hand it
/// to every communicator built in this process.
#[derive(Clone)]
pub struct Transport {
    inner: Arc<TransportInner>,
}

impl Transport {
    /// Bind a listener on an ephemeral localhost port.
    pub fn bind() -> Result<Transport> {
        Self::bind_to("127.0.0.1:0")
    }

    pub fn bind_to(addr: &str) -> Result<Transport> {
        let listener = TcpListener::bind(addr).map_err(CollectiveError::Io)?;
        let local_addr = listener.local_addr().map_err(CollectiveError::Io)?;
        let inner = Arc::new(TransportInner {
            local_addr,
            state: Mutex::new(TransportState {
                mailboxes: HashMap::new(),
                dead: HashSet::new(),
                outbound: HashMap::new(),
                inbound_streams: Vec::new(),
            }),
            cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
        });
        let accept_inner = Arc::clone(&inner);
        std::thread::spawn(move || accept_loop(listener, accept_inner));
        Ok(Transport { inner })
    }

    /// The dialable `host:port` string peers should use.
    pub fn endpoint(&self) -> String {
        self.inner.local_addr.to_string()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    /// Queue `payload` for `(group, dest)`. Establishes the TCP connection
    /// on first use. Self-sends bypass the network entirely.
    pub(crate) fn send(
        &self,
        group: &str,
        my_rank: u32,
        dest_rank: u32,
        dest_addr: SocketAddr,
        channel: u8,
        tag: u64,
        payload: &[u8],
    ) -> Result<()> {
        if self.inner.shutdown.load(Ordering::SeqCst) {
            return Err(CollectiveError::TransportClosed);
        }
        if dest_rank == my_rank {
            let mut st = self.inner.state.lock().unwrap();
            st.mailboxes
                .entry((group.to_string(), my_rank, channel, tag))
                .or_default()
                .push_back(payload.to_vec());
            self.inner.cv.notify_all();
            return Ok(());
        }

        let key = (group.to_string(), dest_rank);
        let sender = {
            let st = self.inner.state.lock().unwrap();
            if st.dead.contains(&key) {
                return Err(CollectiveError::PeerUnreachable {
                    group: group.to_string(),
                    rank: dest_rank,
                });
            }
            st.outbound.get(&key).cloned()
        };
        let sender = match sender {
            Some(s) => s,
            None => self.open_outbound(group, my_rank, dest_rank, dest_addr)?,
        };

        let frame = Frame::new(
            msg::CMSG,
            Encoder::new().u8(channel).u64(tag).bytes(payload).finish(),
        );
        if sender.send(frame).is_err() {
            return Err(CollectiveError::PeerUnreachable {
                group: group.to_string(),
                rank: dest_rank,
            });
        }
        Ok(())
    }

    fn open_outbound(
        &self,
        group: &str,
        my_rank: u32,
        dest_rank: u32,
        dest_addr: SocketAddr,
    ) -> Result<Sender<Frame>> {
        let stream = TcpStream::connect(dest_addr).map_err(|_| {
            let mut st = self.inner.state.lock().unwrap();
            st.dead.insert((group.to_string(), dest_rank));
            self.inner.cv.notify_all();
            CollectiveError::PeerUnreachable {
                group: group.to_string(),
                rank: dest_rank,
            }
        })?;
        stream.set_nodelay(true).ok();

        let (tx, rx) = mpsc::channel::<Frame>();
        let hello = Frame::new(
            msg::CHELLO,
            Encoder::new().str(group).u32(my_rank).finish(),
        );
        let _ = tx.send(hello);

        let key = (group.to_string(), dest_rank);
        let inner = Arc::clone(&self.inner);
        let thread_key = key.clone();
        std::thread::spawn(move || {
            let mut w = std::io::BufWriter::new(stream);
            while let Ok(frame) = rx.recv() {
                if frame.write_to(&mut w).is_err() {
                    let mut st = inner.state.lock().unwrap();
                    st.dead.insert(thread_key.clone());
                    st.outbound.remove(&thread_key);
                    inner.cv.notify_all();
                    return;
                }
            }
        });

        let mut st = self.inner.state.lock().unwrap();
        Ok(st.outbound.entry(key).or_insert(tx).clone())
    }

    /// Block until a message for `(group, src, channel, tag)` arrives.
    pub(crate) fn recv(&self, group: &str, src: u32, channel: u8, tag: u64) -> Result<Vec<u8>> {
        let key = (group.to_string(), src, channel, tag);
        let dead_key = (group.to_string(), src);
        let mut st = self.inner.state.lock().unwrap();
        loop {
            if let Some(q) = st.mailboxes.get_mut(&key) {
                if let Some(payload) = q.pop_front() {
                    return Ok(payload);
                }
            }
            if st.dead.contains(&dead_key) {
                return Err(CollectiveError::PeerUnreachable {
                    group: group.to_string(),
                    rank: src,
                });
            }
            if self.inner.shutdown.load(Ordering::SeqCst) {
                return Err(CollectiveError::TransportClosed);
            }
            st = self.inner.cv.wait(st).unwrap();
        }
    }

    /// Mark `(group, rank)` unreachable, waking any blocked receivers.
    /// Fed by the rendezvous failure detector.
    pub(crate) fn mark_dead(&self, group: &str, rank: u32) {
        let mut st = self.inner.state.lock().unwrap();
        st.dead.insert((group.to_string(), rank));
        self.inner.cv.notify_all();
    }

    pub fn shutdown(&self) {
        if self.inner.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.inner.local_addr);
        let mut st = self.inner.state.lock().unwrap();
        for s in st.inbound_streams.drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        st.outbound.clear();
        self.inner.cv.notify_all();
    }
}

/// Resolve a published endpoint string to a socket address.
pub(crate) fn resolve_endpoint(ep: &str) -> Option<SocketAddr> {
    ep.to_socket_addrs().ok()?.next()
}

fn accept_loop(listener: TcpListener, inner: Arc<TransportInner>) {
    loop {
        let (stream, _) = match listener.accept() {
            Ok(pair) => pair,
            Err(_) => return,
        };
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        if let Ok(clone) = stream.try_clone() {
            inner.state.lock().unwrap().inbound_streams.push(clone);
        }
        let conn_inner = Arc::clone(&inner);
        std::thread::spawn(move || inbound_loop(stream, conn_inner));
    }
}

fn inbound_loop(mut stream: TcpStream, inner: Arc<TransportInner>) {
    stream.set_nodelay(true).ok();
    let hello = match Frame::read_from(&mut stream) {
        Ok(f) if f.msg_type == msg::CHELLO => f,
        _ => return,
    };
    let mut d = Decoder::new(&hello.body);
    let (group, src) = match (d.str(), d.u32()) {
        (Ok(g), Ok(s)) => (g, s),
        _ => return,
    };

    loop {
        let frame = match Frame::read_from(&mut stream) {
            Ok(f) if f.msg_type == msg::CMSG => f,
            _ => break,
        };
        let mut d = Decoder::new(&frame.body);
        let (channel, tag, payload) = match (d.u8(), d.u64(), d.bytes()) {
            (Ok(c), Ok(t), Ok(p)) => (c, t, p),
            _ => break,
        };
        let mut st = inner.state.lock().unwrap();
        st.mailboxes
            .entry((group.clone(), src, channel, tag))
            .or_default()
            .push_back(payload);
        inner.cv.notify_all();
    }

    // Peer connection gone: anything still waiting on this source fails.
    let mut st = inner.state.lock().unwrap();
    st.dead.insert((group, src));
    inner.cv.notify_all();
}
