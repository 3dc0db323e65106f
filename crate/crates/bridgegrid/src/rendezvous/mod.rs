//! PMI-style rendezvous: a standalone server plus client session library.
//!
//! Workers the server did not spawn attach to it over TCP, publish
//! key-value endpoint data, synchronize with [`Session::fence`], and form
//! or dissolve named groups with the collective [`Session::connect`] /
//! [`Session::disconnect`] pair. Server discovery goes through contact
//! files (see [`contact`]).

mod client;
mod contact;
mod server;

pub use client::{attach_local_group, client_attach, AttachOptions, HandlerId, Session};
pub use contact::{
    default_contact_dir, search_contact_dir, ParsedContact, ServerContactInfo, CONTACT_SUFFIX,
};
pub use server::{server_start, ActionKind, ActionRecord, Server, ServerConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::wire::{Decoder, Encoder, WireError};

/// Environment variable naming the rank of an attaching process.
pub const ENV_RANK: &str = "PMIX_RANK";
/// Environment variable naming the attach namespace.
pub const ENV_NAMESPACE: &str = "PMIX_NAMESPACE";
/// Environment variable naming the declared namespace size.
pub const ENV_SIZE: &str = "PMIX_SIZE";
/// Optional `host:port` override that skips the contact-file search.
pub const ENV_SERVER: &str = "BRIDGEGRID_SERVER";
/// Directory searched for contact files.
pub const ENV_CONTACT_DIR: &str = "BRIDGEGRID_CONTACT_DIR";
/// Optional token override for authentication.
pub const ENV_TOKEN: &str = "BRIDGEGRID_TOKEN";

/// Interval between client heartbeat pings.
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(2);
/// Missed heartbeats before a process is declared dead.
pub const HEARTBEAT_MISSED_LIMIT: u32 = 3;

#[derive(Debug, Error)]
pub enum RendezvousError {
    #[error("bind failed on {addr}: {source}")]
    BindFailed {
        addr: String,
        source: std::io::Error,
    },
    #[error("contact file unwritable at {path}: {source}")]
    ContactFileUnwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("no rendezvous server found")]
    NoServerFound,
    #[error("rank {0} already attached in namespace")]
    DuplicateRank(u32),
    #[error("authentication token mismatch")]
    TokenMismatch,
    #[error("session closed")]
    SessionClosed,
    #[error("key {key:?} of {owner} is not visible")]
    KeyNotVisible { owner: String, key: String },
    #[error("unknown process {0}")]
    UnknownProcess(String),
    #[error("peer terminated: {0}")]
    PeerTerminated(String),
    #[error("collective timed out")]
    Timeout,
    #[error("caller is not a member of the group")]
    NotAMember,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl RendezvousError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            RendezvousError::BindFailed { .. } => "BIND_FAILED",
            RendezvousError::ContactFileUnwritable { .. } => "CONTACT_FILE_UNWRITABLE",
            RendezvousError::NoServerFound => "NO_SERVER_FOUND",
            RendezvousError::DuplicateRank(_) => "DUPLICATE_RANK",
            RendezvousError::TokenMismatch => "TOKEN_MISMATCH",
            RendezvousError::SessionClosed => "SESSION_CLOSED",
            RendezvousError::KeyNotVisible { .. } => "KEY_NOT_VISIBLE",
            RendezvousError::UnknownProcess(_) => "UNKNOWN_PROCESS",
            RendezvousError::PeerTerminated(_) => "PEER_TERMINATED",
            RendezvousError::Timeout => "TIMEOUT",
            RendezvousError::NotAMember => "NOT_A_MEMBER",
            RendezvousError::Protocol(_) => "PROTOCOL",
            RendezvousError::Wire(_) => "WIRE",
        }
    }
}

/// Error codes used in `REPLY_ERR` frames.
pub(crate) mod errcode {
    pub const DUPLICATE_RANK: u16 = 4;
    pub const TOKEN_MISMATCH: u16 = 5;
    pub const SESSION_CLOSED: u16 = 6;
    pub const KEY_NOT_VISIBLE: u16 = 7;
    pub const UNKNOWN_PROCESS: u16 = 8;
    pub const PEER_TERMINATED: u16 = 9;
    pub const TIMEOUT: u16 = 10;
    pub const NOT_A_MEMBER: u16 = 11;
    pub const PROTOCOL: u16 = 12;
}

pub(crate) fn error_from_code(code: u16, msg: String) -> RendezvousError {
    match code {
        errcode::DUPLICATE_RANK => {
            RendezvousError::DuplicateRank(msg.parse().unwrap_or(u32::MAX))
        }
        errcode::TOKEN_MISMATCH => RendezvousError::TokenMismatch,
        errcode::SESSION_CLOSED => RendezvousError::SessionClosed,
        errcode::KEY_NOT_VISIBLE => {
            let (owner, key) = msg.split_once('\u{1f}').unwrap_or(("", msg.as_str()));
            RendezvousError::KeyNotVisible {
                owner: owner.to_string(),
                key: key.to_string(),
            }
        }
        errcode::UNKNOWN_PROCESS => RendezvousError::UnknownProcess(msg),
        errcode::PEER_TERMINATED => RendezvousError::PeerTerminated(msg),
        errcode::TIMEOUT => RendezvousError::Timeout,
        errcode::NOT_A_MEMBER => RendezvousError::NotAMember,
        _ => RendezvousError::Protocol(msg),
    }
}

/// A job or group identifier, optionally qualified by a cluster id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Namespace {
    name: String,
    cluster_id: Option<String>,
}

impl Namespace {
    pub fn new(name: impl Into<String>) -> Result<Self, RendezvousError> {
        Self::with_cluster(name, None::<String>)
    }

    pub fn with_cluster(
        name: impl Into<String>,
        cluster_id: Option<impl Into<String>>,
    ) -> Result<Self, RendezvousError> {
        let name = name.into();
        let cluster_id = cluster_id.map(Into::into);
        if name.is_empty() || name.contains('/') {
            return Err(RendezvousError::Protocol(format!(
                "invalid namespace name {name:?}"
            )));
        }
        if let Some(c) = &cluster_id {
            if c.is_empty() || c.contains('/') {
                return Err(RendezvousError::Protocol(format!(
                    "invalid cluster id {c:?}"
                )));
            }
        }
        Ok(Namespace { name, cluster_id })
    }

    /// Parse a `cluster/name` or bare `name` string.
    pub fn from_qualified(s: &str) -> Result<Self, RendezvousError> {
        match s.split_once('/') {
            Some((cluster, name)) => Self::with_cluster(name, Some(cluster)),
            None => Self::new(s),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cluster_id(&self) -> Option<&str> {
        self.cluster_id.as_deref()
    }

    /// `cluster_id/name` when a cluster id is present, else `name`.
    pub fn qualified(&self) -> String {
        match &self.cluster_id {
            Some(c) => format!("{c}/{}", self.name),
            None => self.name.clone(),
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.qualified())
    }
}

/// Identity of one process: its attach namespace plus rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProcessId {
    pub namespace: Namespace,
    pub rank: u32,
}

impl ProcessId {
    pub fn new(namespace: Namespace, rank: u32) -> Self {
        ProcessId { namespace, rank }
    }
}

impl PartialOrd for ProcessId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ProcessId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.namespace
            .qualified()
            .cmp(&other.namespace.qualified())
            .then(self.rank.cmp(&other.rank))
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.rank)
    }
}

/// A collective group-formation request.
///
/// Two concurrent connects are the same operation exactly when their
/// sorted participant lists and tags match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectRequest {
    pub participants: Vec<ProcessId>,
    pub tag: Option<String>,
    pub timeout: Option<Duration>,
}

impl ConnectRequest {
    pub fn new(participants: Vec<ProcessId>) -> Self {
        ConnectRequest {
            participants,
            tag: None,
            timeout: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn validate(&self) -> Result<(), RendezvousError> {
        if self.participants.is_empty() {
            return Err(RendezvousError::Protocol(
                "connect participants empty".into(),
            ));
        }
        let mut sorted = self.participants.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(RendezvousError::Protocol(
                "duplicate participant in connect".into(),
            ));
        }
        Ok(())
    }

    pub fn sorted_participants(&self) -> Vec<ProcessId> {
        let mut v = self.participants.clone();
        v.sort();
        v
    }

    pub(crate) fn encode(&self, enc: Encoder) -> Encoder {
        let mut enc = enc.u32(self.participants.len() as u32);
        for p in &self.participants {
            enc = enc.str(&p.namespace.qualified()).u32(p.rank);
        }
        enc.opt_str(self.tag.as_deref())
            .opt_u64(self.timeout.map(|d| d.as_millis() as u64))
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self, RendezvousError> {
        let n = d.u32()?;
        let mut participants = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let ns = Namespace::from_qualified(&d.str()?)?;
            let rank = d.u32()?;
            participants.push(ProcessId::new(ns, rank));
        }
        let tag = d.opt_str()?;
        let timeout = d.opt_u64()?.map(Duration::from_millis);
        Ok(ConnectRequest {
            participants,
            tag,
            timeout,
        })
    }
}

/// Result of a completed connect: the assigned group and everyone's
/// published endpoint data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupInfo {
    pub group: Namespace,
    pub rank_in_group: u32,
    /// Participants in sorted order; index equals rank in group.
    pub participants: Vec<ProcessId>,
    /// Committed endpoint data per participant; absent when a member
    /// never published one.
    pub endpoints: BTreeMap<ProcessId, Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    ConnectRequested,
    ProcessTerminated,
    GroupReady,
}

impl EventKind {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            EventKind::ConnectRequested => 1,
            EventKind::ProcessTerminated => 2,
            EventKind::GroupReady => 3,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self, RendezvousError> {
        match b {
            1 => Ok(EventKind::ConnectRequested),
            2 => Ok(EventKind::ProcessTerminated),
            3 => Ok(EventKind::GroupReady),
            _ => Err(RendezvousError::Protocol(format!("bad event kind {b}"))),
        }
    }
}

/// What an event is about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventSubject {
    Connect(ConnectRequest),
    Process(ProcessId),
}

/// A server-pushed notification. Events destined for a not-yet-attached
/// process are cached server-side and delivered at attach time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventNotification {
    pub kind: EventKind,
    pub subject: EventSubject,
    pub payload: Vec<u8>,
}

impl EventNotification {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let enc = Encoder::new().u8(self.kind.to_byte());
        let enc = match &self.subject {
            EventSubject::Connect(req) => req.encode(enc.u8(1)),
            EventSubject::Process(pid) => {
                enc.u8(2).str(&pid.namespace.qualified()).u32(pid.rank)
            }
        };
        enc.bytes(&self.payload).finish()
    }

    pub(crate) fn decode(body: &[u8]) -> Result<Self, RendezvousError> {
        let mut d = Decoder::new(body);
        let kind = EventKind::from_byte(d.u8()?)?;
        let subject = match d.u8()? {
            1 => EventSubject::Connect(ConnectRequest::decode(&mut d)?),
            2 => {
                let ns = Namespace::from_qualified(&d.str()?)?;
                let rank = d.u32()?;
                EventSubject::Process(ProcessId::new(ns, rank))
            }
            b => return Err(RendezvousError::Protocol(format!("bad subject {b}"))),
        };
        let payload = d.bytes()?;
        Ok(EventNotification {
            kind,
            subject,
            payload,
        })
    }
}
