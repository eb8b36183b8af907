//! Knowledge-graph completion over an interaction-augmented knowledge graph.
//!
//! The library fuses ordinary KG triples with user–item interaction data and
//! trains a preference-guided discriminator against a query-specific negative
//! sample generator. The main building blocks:
//!
//! - [`graph`] — the interaction-augmented graph with user-oriented layers
//!   and per-batch propagation subgraphs.
//! - [`autodiff`] — a minimal dense tape-based reverse-mode kernel, Adam,
//!   norm projection, and the named-tensor checkpoint format.
//! - [`kge`] — TransE and DistMult baselines with 1-N scoring, used both
//!   standalone and to initialize the adversarial model.
//! - [`gnn`] — the two-stage propagation that first pushes entity semantics
//!   down to users and then aggregates user preference back up to a target
//!   entity through attention.
//! - [`gan`] — discriminator, generator, reward computation, and the
//!   alternating training loop.
//! - [`eval`] — filtered ranking (MR/MRR/H@k) in both query directions with
//!   sparsity and hop breakdowns.
//! - [`data`] — ingestion, k-core and radius filtering, splitting, and the
//!   synthetic corpus generator.
//! - [`config`] — the flat key=value run configuration.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod gan;
pub mod gnn;
pub mod graph;
pub mod kge;
