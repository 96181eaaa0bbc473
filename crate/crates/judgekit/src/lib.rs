//! Toolkit for building and evaluating planning-and-reasoning judge models.
//!
//! The pipeline samples structured chain-of-thoughts (evaluation plan, plan
//! execution, verdict) from chat-completion endpoints, builds SFT and DPO
//! preference datasets over correct and incorrect CoTs, orchestrates
//! multi-round self-training via exported files, and measures judge accuracy
//! under single-order and position-consistent protocols.

pub mod builder;
pub mod cli;
pub mod client;
pub mod codec;
pub mod eval;
pub mod mock;
pub mod model;
pub mod pairgen;
pub mod prompts;
pub mod rounds;
pub mod sampler;
