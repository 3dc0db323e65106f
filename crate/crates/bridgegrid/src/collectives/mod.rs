//! Rank-to-rank messaging and collective operations over endpoint tables
//! obtained from the rendezvous module: barrier, broadcast, gather,
//! scatter, allgather, and allreduce in tree and ring variants.
//!
//! One collective may be in flight per communicator at a time (runtime
//! checked); distinct communicators operate fully independently.

mod comm;
mod transport;

pub use comm::{
    communicator_from_group, AllreduceVariant, Communicator, CounterSnapshot, ReduceOp,
};
pub use transport::Transport;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("no committed endpoint for group member {0}")]
    MissingEndpoint(String),
    #[error("peer rank {rank} of group {group} unreachable")]
    PeerUnreachable { group: String, rank: u32 },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("root rank {0} out of range")]
    BadRoot(u32),
    #[error("rank {0} out of range")]
    InvalidRank(u32),
    #[error("another collective is already in flight on this communicator")]
    ConcurrentCollective,
    #[error("transport closed")]
    TransportClosed,
    #[error("collective protocol violation: {0}")]
    Protocol(String),
    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CollectiveError {
    pub fn class(&self) -> &'static str {
        match self {
            CollectiveError::MissingEndpoint(_) => "MISSING_ENDPOINT",
            CollectiveError::PeerUnreachable { .. } => "PEER_UNREACHABLE",
            CollectiveError::LengthMismatch { .. } => "LENGTH_MISMATCH",
            CollectiveError::BadRoot(_) => "BAD_ROOT",
            CollectiveError::InvalidRank(_) => "INVALID_RANK",
            CollectiveError::ConcurrentCollective => "CONCURRENT_COLLECTIVE",
            CollectiveError::TransportClosed => "TRANSPORT_CLOSED",
            CollectiveError::Protocol(_) => "PROTOCOL",
            CollectiveError::Io(_) => "IO",
        }
    }
}
