//! Deterministic engine for function-preserving neural structural
//! obfuscation (NSO) attacks on a small CNN dataflow IR, and graph-consistent
//! recovery of a canonical, compact, watermark-verifiable parameterization,
//! with a two-tier ownership verifier.
//!
//! The crate is organized around the producer-consumer view of channel
//! layouts:
//!
//! * [`tensor`] — dense f64 tensors and operator forward semantics.
//! * [`rng`] — the splittable deterministic RNG every subsystem draws from.
//! * [`graph`] — the dataflow IR, shape inference, producer/consumer
//!   indexing, merge groups, built-in motifs and the JSON model format.
//! * [`transform`] — the sparse channel-transform algebra and consumer
//!   rewrites.
//! * [`surgery`] — applying a channel transform to a producer group and all
//!   of its downstream consumers.
//! * [`attack`] — the NSO attack engine (zero / clique / split primitives,
//!   compositional variants, permutation and scaling camouflage).
//! * [`recovery`] — probe capture, redundancy clustering and the recovery
//!   pipeline.
//! * [`watermark`] — a reference index-ordered white-box watermark.
//! * [`verifier`] — the Tier-1 reference-equivalence certificate and the
//!   Tier-2 similarity PASS predicate.
//! * [`harness`] — end-to-end pipeline, false-positive evaluation and
//!   benchmark sweeps.

pub mod attack;
pub mod graph;
pub mod harness;
pub mod recovery;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod transform;
pub mod verifier;
pub mod watermark;
