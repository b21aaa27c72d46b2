//! Tree-based BFT vote aggregation over a deterministic network simulator.
//!
//! The crate is organized around five building blocks:
//!
//! * [`collections`] — the cryptographic-collection abstraction: a secure
//!   multiset of `(signer, value)` vote shares with a commutative, idempotent
//!   `combine`, plus the wire-size and CPU-cost models the simulator charges.
//! * [`tree`] — communication topologies (balanced m-ary trees and the star),
//!   bin partitions, the evolving-graph construction that guarantees a robust
//!   tree within `f+1` reconfigurations, and the robust-fraction analytics.
//! * [`simnet`] — a discrete-event network with per-sender egress
//!   serialization, per-hop latency, impatient (timeout-bounded) receives,
//!   and omission/crash fault injection. Fully deterministic for a fixed seed.
//! * [`consensus`] — a four-round leader-based consensus engine parameterized
//!   by a tree, with pipelined instance scheduling and view changes that walk
//!   the evolving graph.
//! * [`perfmodel`] — closed-form busy-time/idle-time/pipeline-depth
//!   calculators used both to pick pipelining parameters and as an analytic
//!   oracle for the simulator.

pub mod collections;
pub mod consensus;
pub mod perfmodel;
pub mod simnet;
pub mod tree;

pub use collections::ProcessId;
