//! Multi-agent clinical diagnosis: self-learned diagnostic knowledge,
//! panel consultation and escalation to human review.
//!
//! Each capability has a runnable example under `examples/`:
//!
//! ```bash
//! cargo run --example match_diagnoses
//! cargo run --example redundancy_filter
//! cargo run --example concept_ablation
//! cargo run --example prompt_templates -- consultation
//! cargo run --example single_agent_evaluation
//! cargo run --example panel_consultation
//! cargo run --example replay_run
//! cargo run --example self_learning_pipeline
//! cargo run --example adjudication_service
//! ```
//!
//! The `macd` binary drives the same stages against an on-disk store.

pub mod cli;
pub mod consultation;
pub mod embedding;
pub mod engine;
pub mod gateway;
pub mod knowledge;
pub mod matching;
pub mod model;
pub mod service;
pub mod store;
pub mod synthetic;
