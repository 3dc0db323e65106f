//! bridgegrid: a self-contained distributed runtime in the PMI mold.
//!
//! A rendezvous server lets externally launched worker processes attach,
//! publish endpoints, synchronize, and form message-passing groups;
//! collective operations (barrier, broadcast, gather/scatter, tree and
//! ring allreduce) run rank-to-rank over TCP; a small driver-worker
//! harness spawns workers and runs map stages with micro-batch streaming;
//! and a distributed ptychographic phase-retrieval solver exercises the
//! whole stack.

pub mod collectives;
pub mod conformance;
pub mod ptycho;
pub mod rendezvous;
pub mod taskgrid;
pub mod wire;

pub mod cli;
