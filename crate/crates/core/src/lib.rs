//! Interactive query planning for tool retrieval.
//!
//! A planner decomposes a user request into sub-goals, issues search queries
//! against a retriever, observes the top hits after each query, and stops once
//! every sub-goal is covered. The runs collected along the way are fused into
//! one ranked tool list. Around that loop this crate provides:
//!
//! * [`corpus`]: tool documentation loading and rendering
//! * [`retriever`]: exact dense search, a hashing test embedder, BM25, and an
//!   HTTP embedding client
//! * [`planner`]: the turn grammar plus scripted and remote planners
//! * [`episode`]: the plan/query/feedback loop
//! * [`aggregation`]: peak-rank, reciprocal rank, and multi-view fusion
//! * [`metrics`]: nDCG@K, Recall@K, Completeness@K and macro averages
//! * [`synthesis`]: teacher-driven trajectory synthesis for SFT data
//! * [`reward`]: rollout reward computation for RL with verifiable rewards

pub mod aggregation;
pub mod chat;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod episode;
pub mod error;
mod http;
pub mod metrics;
pub mod planner;
pub mod retriever;
pub mod reward;
pub mod synthesis;

pub use error::{Error, Result};
pub use http::RetryPolicy;
