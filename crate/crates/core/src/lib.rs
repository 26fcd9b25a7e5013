//! Pixel-wise graph attention at desk scale.
//!
//! The crate covers the full pipeline in miniature:
//!
//! * [`graph`] — structured-grid graph generation in O(k·N) via row-slice
//!   shifts, plus a brute-force O(N²) oracle and a timing harness that
//!   compares the two.
//! * [`tensor`] — a small float64 tensor core with a reverse-mode tape:
//!   enough ops to express masked graph attention, batch norm, and the
//!   training losses, each with a hand-derived backward rule that is held
//!   to finite differences.
//! * [`pga`] — the attention layer itself: pairwise correlation of two
//!   learned transfer functions, adjacency-masked row softmax, neighbor
//!   propagation, and a gated residual around the whole block.
//! * [`model`] — a toy trainable network (stem → attention stack → pooled
//!   embedding → classifier) with identity, batch-hard triplet, and center
//!   losses, Adam with decoupled weight decay, and a seeded synthetic
//!   identity dataset.
//! * [`eval`] — retrieval metrics: pairwise distances, mean average
//!   precision, and cumulative match curves with the usual
//!   same-id/same-camera gallery exclusion.
//! * [`verify`] — self-check suites (graph oracle equivalence, attention
//!   invariants, gradient checks) shared by the CLI `verify` command and
//!   the acceptance tests.
//!
//! Everything is deterministic given a seed and runs single-threaded.

pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pga;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
