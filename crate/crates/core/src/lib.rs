//! Tensor-network simulation of random quantum circuits.
//!
//! The pipeline: a lattice circuit ([`circuit`]) becomes a tensor network
//! ([`tensornet`]), a contraction order plus slicing plan is found for it
//! ([`pathopt`], [`lattice`]), the sliced subtasks are contracted by dense
//! kernels ([`engine`]) under a worker pool ([`executor`]), optionally with
//! half-precision storage ([`precision`]), and the resulting amplitudes feed
//! sampling and statistical validation ([`sampling`]). Everything is checked
//! against a brute-force state-vector simulator ([`oracle`]).

pub mod circuit;
pub mod engine;
pub mod executor;
pub mod lattice;
pub mod oracle;
pub mod pathopt;
pub mod precision;
pub mod sampling;
pub mod tensor;
pub mod tensornet;
