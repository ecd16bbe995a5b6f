//! Grey-box state machine learning for small instrumented protocol servers.
//!
//! The crate infers Mealy machines from protocol implementations that run on
//! a deterministic toy VM. Two learners are provided:
//!
//! * [`learner`] observes I/O *and* heap snapshots taken at I/O boundaries.
//!   Snapshot diffing over repeated bootstrap queries yields a candidate set
//!   of state-holding memory locations; states are keyed by the valuation of
//!   that memory, and a taint-based classifier decides whether two states
//!   that differ only in memory may be merged.
//! * [`blackbox`] is a classical observation-table learner with a bounded
//!   W-method equivalence search, used as a baseline for comparison.
//!
//! Everything in this crate is deterministic and `no_std` + `alloc`; wall
//! clock time, files, and the CLI live in the companion binary crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod blackbox;
pub mod dataflow;
pub mod harness;
pub mod learner;
pub mod memdiff;
pub mod model;
pub mod monitor;
pub mod protocols;
pub mod vm;
