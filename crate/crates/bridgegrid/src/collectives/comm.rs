//! Communicators and the collective operations that run over them.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rendezvous::{EventKind, EventSubject, GroupInfo, HandlerId, ProcessId, Session};

use super::transport::{resolve_endpoint, Transport, CHANNEL_SYSTEM, CHANNEL_USER};
use super::CollectiveError;

type Result<T> = std::result::Result<T, CollectiveError>;

/// Elementwise combination applied by allreduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    #[inline]
    pub fn apply(self, acc: f64, v: f64) -> f64 {
        match self {
            ReduceOp::Sum => acc + v,
            ReduceOp::Min => acc.min(v),
            ReduceOp::Max => acc.max(v),
        }
    }
}

/// Which allreduce schedule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllreduceVariant {
    Tree,
    Ring,
}

/// Monotonic transport counters for one communicator.
#[derive(Default)]
pub(crate) struct Counters {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    messages_sent: AtomicU64,
    reduce_elements_sent: AtomicU64,
}

/// Point-in-time copy of a communicator's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    /// f64 elements carried by ring-allreduce data messages; backs the
    /// ring traffic bound.
    pub reduce_elements_sent: u64,
}

impl std::ops::Add for CounterSnapshot {
    type Output = CounterSnapshot;
    fn add(self, rhs: CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            bytes_sent: self.bytes_sent + rhs.bytes_sent,
            bytes_received: self.bytes_received + rhs.bytes_received,
            messages_sent: self.messages_sent + rhs.messages_sent,
            reduce_elements_sent: self.reduce_elements_sent + rhs.reduce_elements_sent,
        }
    }
}

/// A connected group: rank, size, and a dialable endpoint per member.
/// All members hold identical `(group, size, endpoints)`.
pub struct Communicator {
    transport: Transport,
    group: String,
    rank: u32,
    size: u32,
    endpoints: Vec<SocketAddr>,
    session: Option<Session>,
    terminated_handler: Option<HandlerId>,
    counters: Arc<Counters>,
    seq: AtomicU64,
    in_collective: AtomicBool,
}

/// Build a communicator from a completed connect. Every member must have
/// published its transport endpoint under the key `"endpoint"` before the
/// fence that preceded the connect.
pub fn communicator_from_group(
    session: &Session,
    transport: &Transport,
    info: &GroupInfo,
) -> Result<Communicator> {
    Communicator::from_group(session, transport, info)
}

impl Communicator {
    pub fn from_group(
        session: &Session,
        transport: &Transport,
        info: &GroupInfo,
    ) -> Result<Communicator> {
        let mut endpoints = Vec::with_capacity(info.participants.len());
        for p in &info.participants {
            let raw = info
                .endpoints
                .get(p)
                .ok_or_else(|| CollectiveError::MissingEndpoint(p.to_string()))?;
            let text = std::str::from_utf8(raw)
                .map_err(|_| CollectiveError::MissingEndpoint(p.to_string()))?;
            let addr = resolve_endpoint(text)
                .ok_or_else(|| CollectiveError::MissingEndpoint(p.to_string()))?;
            endpoints.push(addr);
        }
        let group = info.group.qualified();

        // Route the rendezvous failure detector into the transport so a
        // blocked recv from a dead peer fails within the detector bound.
        let rank_of: HashMap<ProcessId, u32> = info
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let handler_transport = transport.clone();
        let handler_group = group.clone();
        let handler = session.register_event_handler(EventKind::ProcessTerminated, move |ev| {
            if let EventSubject::Process(pid) = &ev.subject {
                if let Some(rank) = rank_of.get(pid) {
                    handler_transport.mark_dead(&handler_group, *rank);
                }
            }
        });

        Ok(Communicator {
            transport: transport.clone(),
            group,
            rank: info.rank_in_group,
            size: info.participants.len() as u32,
            endpoints,
            session: Some(session.clone()),
            terminated_handler: Some(handler),
            counters: Arc::new(Counters::default()),
            seq: AtomicU64::new(0),
            in_collective: AtomicBool::new(false),
        })
    }

    /// A size-1 communicator with no rendezvous behind it; every
    /// collective is the identity.
    pub fn solo() -> Result<Communicator> {
        static SOLO_SEQ: AtomicU64 = AtomicU64::new(0);
        let transport = Transport::bind()?;
        let addr = transport.local_addr();
        Ok(Communicator {
            transport,
            group: format!("solo-{}", SOLO_SEQ.fetch_add(1, Ordering::Relaxed)),
            rank: 0,
            size: 1,
            endpoints: vec![addr],
            session: None,
            terminated_handler: None,
            counters: Arc::new(Counters::default()),
            seq: AtomicU64::new(0),
            in_collective: AtomicBool::new(false),
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn counters(&self) -> CounterSnapshot {
        CounterSnapshot {
            bytes_sent: self.counters.bytes_sent.load(Ordering::SeqCst),
            bytes_received: self.counters.bytes_received.load(Ordering::SeqCst),
            messages_sent: self.counters.messages_sent.load(Ordering::SeqCst),
            reduce_elements_sent: self.counters.reduce_elements_sent.load(Ordering::SeqCst),
        }
    }

    fn check_rank(&self, rank: u32) -> Result<()> {
        if rank >= self.size {
            return Err(CollectiveError::InvalidRank(rank));
        }
        Ok(())
    }

    fn send_raw(&self, dest: u32, channel: u8, tag: u64, payload: &[u8]) -> Result<()> {
        self.transport.send(
            &self.group,
            self.rank,
            dest,
            self.endpoints[dest as usize],
            channel,
            tag,
            payload,
        )?;
        self.counters
            .bytes_sent
            .fetch_add(payload.len() as u64, Ordering::SeqCst);
        self.counters.messages_sent.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn recv_raw(&self, src: u32, channel: u8, tag: u64) -> Result<Vec<u8>> {
        let payload = self.transport.recv(&self.group, src, channel, tag)?;
        self.counters
            .bytes_received
            .fetch_add(payload.len() as u64, Ordering::SeqCst);
        Ok(payload)
    }

    /// Point-to-point send. Messages between a fixed (src, dest, tag)
    /// triple arrive in send order; self-send goes through a loopback
    /// queue.
    pub fn send(&self, dest: u32, tag: u64, payload: &[u8]) -> Result<()> {
        self.check_rank(dest)?;
        self.send_raw(dest, CHANNEL_USER, tag, payload)
    }

    /// Blocking point-to-point receive; only messages with exactly this
    /// tag match.
    pub fn recv(&self, src: u32, tag: u64) -> Result<Vec<u8>> {
        self.check_rank(src)?;
        self.recv_raw(src, CHANNEL_USER, tag)
    }

    fn begin_collective(&self) -> Result<CollectiveGuard<'_>> {
        if self.in_collective.swap(true, Ordering::SeqCst) {
            return Err(CollectiveError::ConcurrentCollective);
        }
        if let Some(s) = &self.session {
            s.notify_collective_begin(&self.group);
        }
        Ok(CollectiveGuard { comm: self })
    }

    fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::SeqCst)
    }

    fn sys_send(&self, dest: u32, seq: u64, code: u64, payload: &[u8]) -> Result<()> {
        self.send_raw(dest, CHANNEL_SYSTEM, seq * 256 + code, payload)
    }

    fn sys_recv(&self, src: u32, seq: u64, code: u64) -> Result<Vec<u8>> {
        self.recv_raw(src, CHANNEL_SYSTEM, seq * 256 + code)
    }

    /// Returns only after all ranks have entered; dissemination schedule
    /// in ceil(log2 size) rounds.
    pub fn barrier(&self) -> Result<()> {
        let _guard = self.begin_collective()?;
        let seq = self.next_seq();
        let n = self.size;
        let mut round = 0u64;
        let mut step = 1u32;
        while step < n {
            let dest = (self.rank + step) % n;
            let src = (self.rank + n - step) % n;
            self.sys_send(dest, seq, round, &[])?;
            self.sys_recv(src, seq, round)?;
            step <<= 1;
            round += 1;
        }
        Ok(())
    }

    /// Binomial-tree broadcast of `payload` from `root`.
    pub fn broadcast(&self, root: u32, payload: &[u8]) -> Result<Vec<u8>> {
        self.check_root(root)?;
        let _guard = self.begin_collective()?;
        let seq = self.next_seq();
        self.bcast_inner(seq, root, if self.rank == root { Some(payload.to_vec()) } else { None })
    }

    /// Binomial-tree gather to `root`; returns rank-ordered payloads at
    /// the root, `None` elsewhere.
    pub fn gather(&self, root: u32, payload: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        self.check_root(root)?;
        let _guard = self.begin_collective()?;
        let seq = self.next_seq();
        self.gather_inner(seq, root, payload.to_vec())
    }

    /// Binomial-tree scatter from `root`: rank `i` receives `pieces[i]`.
    pub fn scatter(&self, root: u32, pieces: Option<&[Vec<u8>]>) -> Result<Vec<u8>> {
        self.check_root(root)?;
        let _guard = self.begin_collective()?;
        // The root validates the piece count and tells everyone whether
        // to proceed, so no rank is left blocking on a failed scatter.
        let ok = if self.rank == root {
            pieces.is_some_and(|p| p.len() == self.size as usize)
        } else {
            true
        };
        let seq = self.next_seq();
        let verdict =
            self.bcast_inner(seq, root, (self.rank == root).then(|| vec![u8::from(ok)]))?;
        if verdict != [1] {
            return Err(CollectiveError::LengthMismatch {
                expected: self.size as usize,
                got: pieces.map(|p| p.len()).unwrap_or(0),
            });
        }
        let seq = self.next_seq();
        self.scatter_inner(seq, root, pieces)
    }

    /// gather-to-0 followed by broadcast; every rank gets all payloads in
    /// rank order.
    pub fn allgather(&self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let _guard = self.begin_collective()?;
        self.allgather_inner(payload.to_vec())
    }

    /// Allreduce with a deterministic ascending-rank reduction order:
    /// vectors are gathered to rank 0 over a binomial tree, folded there
    /// lowest rank first, and the result broadcast back. The fold is
    /// bitwise identical to a sequential ascending-rank fold.
    pub fn allreduce_tree(&self, vector: &[f64], op: ReduceOp) -> Result<Vec<f64>> {
        let _guard = self.begin_collective()?;
        self.check_equal_lengths(vector.len())?;
        if self.size == 1 {
            return Ok(vector.to_vec());
        }
        let bytes = f64s_to_le(vector);
        let seq = self.next_seq();
        let gathered = self.gather_inner(seq, 0, bytes)?;
        let result_bytes = if let Some(parts) = gathered {
            let mut acc = le_to_f64s(&parts[0]);
            for part in &parts[1..] {
                let v = le_to_f64s(part);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a = op.apply(*a, x);
                }
            }
            Some(f64s_to_le(&acc))
        } else {
            None
        };
        let seq = self.next_seq();
        let out = self.bcast_inner(seq, 0, result_bytes)?;
        Ok(le_to_f64s(&out))
    }

    /// Ring allreduce: a reduce-scatter phase of `size-1` chunk steps
    /// followed by an allgather phase. Chunk `c` covers indices
    /// `[floor(c*len/size), floor((c+1)*len/size))`; at step `s` each rank
    /// sends chunk `(rank - s) mod size`.
    pub fn allreduce_ring(&self, vector: &[f64], op: ReduceOp) -> Result<Vec<f64>> {
        let _guard = self.begin_collective()?;
        self.check_equal_lengths(vector.len())?;
        let n = self.size as usize;
        if n == 1 {
            return Ok(vector.to_vec());
        }
        assert!(n <= 128, "ring tag space supports at most 128 ranks");
        let len = vector.len();
        let bounds: Vec<usize> = (0..=n).map(|c| c * len / n).collect();
        let chunk = |c: usize| bounds[c]..bounds[c + 1];

        let mut buf = vector.to_vec();
        let next = (self.rank + 1) % self.size;
        let prev = (self.rank + self.size - 1) % self.size;
        let seq = self.next_seq();
        let r = self.rank as usize;

        // Reduce-scatter: after n-1 steps this rank owns the fully
        // reduced chunk (rank + 1) mod n.
        for s in 0..n - 1 {
            let send_c = (r + n - s) % n;
            let recv_c = (r + n - s - 1) % n;
            let out = f64s_to_le(&buf[chunk(send_c)]);
            self.counters
                .reduce_elements_sent
                .fetch_add((bounds[send_c + 1] - bounds[send_c]) as u64, Ordering::SeqCst);
            self.sys_send(next, seq, s as u64, &out)?;
            let incoming = le_to_f64s(&self.sys_recv(prev, seq, s as u64)?);
            let range = chunk(recv_c);
            if incoming.len() != range.len() {
                return Err(CollectiveError::LengthMismatch {
                    expected: range.len(),
                    got: incoming.len(),
                });
            }
            for (a, x) in buf[range].iter_mut().zip(incoming) {
                *a = op.apply(*a, x);
            }
        }

        // Allgather: circulate the owned chunks.
        for s in 0..n - 1 {
            let send_c = (r + 1 + n - s) % n;
            let recv_c = (r + n - s) % n;
            let out = f64s_to_le(&buf[chunk(send_c)]);
            self.counters
                .reduce_elements_sent
                .fetch_add((bounds[send_c + 1] - bounds[send_c]) as u64, Ordering::SeqCst);
            self.sys_send(next, seq, 128 + s as u64, &out)?;
            let incoming = le_to_f64s(&self.sys_recv(prev, seq, 128 + s as u64)?);
            let range = chunk(recv_c);
            if incoming.len() != range.len() {
                return Err(CollectiveError::LengthMismatch {
                    expected: range.len(),
                    got: incoming.len(),
                });
            }
            buf[range].copy_from_slice(&incoming);
        }
        Ok(buf)
    }

    pub fn allreduce(&self, vector: &[f64], op: ReduceOp, variant: AllreduceVariant) -> Result<Vec<f64>> {
        match variant {
            AllreduceVariant::Tree => self.allreduce_tree(vector, op),
            AllreduceVariant::Ring => self.allreduce_ring(vector, op),
        }
    }

    fn check_root(&self, root: u32) -> Result<()> {
        if root >= self.size {
            return Err(CollectiveError::BadRoot(root));
        }
        Ok(())
    }

    /// Symmetric length agreement: everyone learns everyone's vector
    /// length and all ranks fail identically on mismatch.
    fn check_equal_lengths(&self, len: usize) -> Result<()> {
        if self.size == 1 {
            return Ok(());
        }
        let lengths = self.allgather_inner((len as u64).to_be_bytes().to_vec())?;
        for l in &lengths {
            let other = u64::from_be_bytes(l.as_slice().try_into().map_err(|_| {
                CollectiveError::LengthMismatch {
                    expected: len,
                    got: 0,
                }
            })?);
            if other != len as u64 {
                return Err(CollectiveError::LengthMismatch {
                    expected: len,
                    got: other as usize,
                });
            }
        }
        Ok(())
    }

    fn allgather_inner(&self, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let seq = self.next_seq();
        let gathered = self.gather_inner(seq, 0, payload)?;
        let encoded = gathered.map(encode_bundle_plain);
        let seq = self.next_seq();
        let all = self.bcast_inner(seq, 0, encoded)?;
        decode_bundle_plain(&all)
    }

    fn bcast_inner(&self, seq: u64, root: u32, payload: Option<Vec<u8>>) -> Result<Vec<u8>> {
        let n = self.size;
        let relative = (self.rank + n - root) % n;
        let actual = |rel: u32| (rel + root) % n;

        let mut mask = 1u32;
        let data;
        if relative == 0 {
            data = payload.expect("root must supply a broadcast payload");
            while mask < n {
                mask <<= 1;
            }
        } else {
            while mask < n && relative & mask == 0 {
                mask <<= 1;
            }
            data = self.sys_recv(actual(relative - mask), seq, 0)?;
        }
        mask >>= 1;
        while mask > 0 {
            if relative + mask < n {
                self.sys_send(actual(relative + mask), seq, 0, &data)?;
            }
            mask >>= 1;
        }
        Ok(data)
    }

    fn gather_inner(
        &self,
        seq: u64,
        root: u32,
        payload: Vec<u8>,
    ) -> Result<Option<Vec<Vec<u8>>>> {
        let n = self.size;
        let relative = (self.rank + n - root) % n;
        let actual = |rel: u32| (rel + root) % n;

        let mut items: Vec<(u32, Vec<u8>)> = vec![(self.rank, payload)];
        let mut mask = 1u32;
        while mask < n {
            if relative & mask == 0 {
                if relative + mask < n {
                    let child = actual(relative + mask);
                    let bundle = self.sys_recv(child, seq, 0)?;
                    items.extend(decode_bundle(&bundle)?);
                }
                mask <<= 1;
            } else {
                let parent = actual(relative - mask);
                self.sys_send(parent, seq, 0, &encode_bundle(&items))?;
                return Ok(None);
            }
        }
        items.sort_by_key(|(rank, _)| *rank);
        debug_assert_eq!(items.len(), n as usize);
        Ok(Some(items.into_iter().map(|(_, p)| p).collect()))
    }

    fn scatter_inner(
        &self,
        seq: u64,
        root: u32,
        pieces: Option<&[Vec<u8>]>,
    ) -> Result<Vec<u8>> {
        let n = self.size;
        let relative = (self.rank + n - root) % n;
        let actual = |rel: u32| (rel + root) % n;

        let mut bundle: Vec<(u32, Vec<u8>)>;
        let mut mask = 1u32;
        if relative == 0 {
            let pieces = pieces.expect("root must supply scatter pieces");
            bundle = (0..n)
                .map(|rel| (rel, pieces[actual(rel) as usize].clone()))
                .collect();
            while mask < n {
                mask <<= 1;
            }
        } else {
            while mask < n && relative & mask == 0 {
                mask <<= 1;
            }
            let parent = actual(relative - mask);
            bundle = decode_bundle(&self.sys_recv(parent, seq, 0)?)?;
        }
        mask >>= 1;
        while mask > 0 {
            if relative + mask < n {
                let child_rel = relative + mask;
                let (subtree, keep): (Vec<_>, Vec<_>) = bundle
                    .into_iter()
                    .partition(|(rel, _)| *rel >= child_rel && *rel < child_rel + mask);
                bundle = keep;
                self.sys_send(actual(child_rel), seq, 0, &encode_bundle(&subtree))?;
            }
            mask >>= 1;
        }
        bundle
            .into_iter()
            .find(|(rel, _)| *rel == relative)
            .map(|(_, p)| p)
            .ok_or_else(|| CollectiveError::Protocol("scatter piece missing".into()))
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        if let (Some(session), Some(id)) = (&self.session, self.terminated_handler.take()) {
            session.unregister_event_handler(id);
        }
    }
}

struct CollectiveGuard<'a> {
    comm: &'a Communicator,
}

impl Drop for CollectiveGuard<'_> {
    fn drop(&mut self) {
        if let Some(s) = &self.comm.session {
            s.notify_collective_end(&self.comm.group);
        }
        self.comm.in_collective.store(false, Ordering::SeqCst);
    }
}

pub(crate) fn f64s_to_le(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub(crate) fn le_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn encode_bundle(items: &[(u32, Vec<u8>)]) -> Vec<u8> {
    let mut enc = crate::wire::Encoder::new().u32(items.len() as u32);
    for (rank, payload) in items {
        enc = enc.u32(*rank).bytes(payload);
    }
    enc.finish()
}

fn decode_bundle(buf: &[u8]) -> Result<Vec<(u32, Vec<u8>)>> {
    let mut d = crate::wire::Decoder::new(buf);
    let n = d.u32().map_err(|_| bundle_err())?;
    let mut items = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let rank = d.u32().map_err(|_| bundle_err())?;
        let payload = d.bytes().map_err(|_| bundle_err())?;
        items.push((rank, payload));
    }
    Ok(items)
}

fn encode_bundle_plain(parts: Vec<Vec<u8>>) -> Vec<u8> {
    let mut enc = crate::wire::Encoder::new().u32(parts.len() as u32);
    for p in &parts {
        enc = enc.bytes(p);
    }
    enc.finish()
}

fn decode_bundle_plain(buf: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut d = crate::wire::Decoder::new(buf);
    let n = d.u32().map_err(|_| bundle_err())?;
    let mut parts = Vec::with_capacity(n as usize);
    for _ in 0..n {
        parts.push(d.bytes().map_err(|_| bundle_err())?);
    }
    Ok(parts)
}

fn bundle_err() -> CollectiveError {
    CollectiveError::Protocol("malformed collective bundle".into())
}
