//! Measurement harness for role-conditioned summarization of court decisions.
//!
//! The crate is organized around a four-stage evaluation pipeline: generate
//! summaries under stakeholder role prompts, extract facts and legal
//! reasoning from the source opinion, classify favorability toward a fixed
//! stakeholder anchor, and match which elements each summary includes. On
//! top of that sit inclusion/bias metrics, lexical similarity baselines,
//! a statistics battery (mixed-effects model, Friedman test, ICC, Fleiss'
//! kappa), and spreadsheet round-trips for human annotation.
//!
//! All model access goes through [`gateway`], which supports live calls,
//! record mode (cache-through), and replay mode (cache-only, fully
//! deterministic and network-free).

pub mod anno;
pub mod corpus;
pub mod gateway;
pub mod lexical;
pub mod metrics;
pub mod offline;
pub mod pipeline;
pub mod promptkit;
pub mod report;
pub mod seeded;
pub mod stats;
