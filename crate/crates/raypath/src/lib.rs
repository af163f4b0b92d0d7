//! Point-to-point specular ray tracing with a trainable path-candidate sampler.
//!
//! The classic pipeline enumerates every ordered sequence of reflecting
//! facets (a *path candidate*), traces each one with the image method, and
//! keeps the few that are geometrically valid. The candidate space grows as
//! `N * (N-1)^(K-1)` for `N` facets and `K` bounces, while only a small
//! fraction survives validation. This crate keeps the deterministic tracer
//! as the ground truth and adds a generative sampler trained with a
//! flow-matching objective that learns to emit mostly-valid candidates.
//!
//! Modules:
//! - [`geometry`]: scenes, normalization, and the invariant featurization.
//! - [`tracer`]: image-method path construction and validity checks.
//! - [`candgen`]: exhaustive enumeration, the validity oracle, and the
//!   uniform-random baseline sampler.
//! - [`neural`]: a small dense-network kernel (reverse-mode gradients, Adam).
//! - [`gfn`]: the flow-based sampler, its reward, and the matching loss.
//! - [`trainpipe`]: procedural street-canyon scenes, the training loop, and
//!   accuracy / hit-rate evaluation.

pub mod candgen;
pub mod geometry;
pub mod gfn;
pub mod neural;
pub mod tracer;
pub mod trainpipe;
