//! Graph-convolutional REINFORCE agent for PRB allocation in a simulated
//! single-UE downlink, with an edge-mask explainer and the evaluation
//! harness (gap CDF, accuracy, agent comparison, noise robustness).

pub mod agent;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod export;
pub mod graph;
pub mod nncore;
pub mod persist;
pub mod rng;

pub use error::{Error, Result};
pub use graph::{build_state_graph, gcn_backward, gcn_forward, normalized_adjacency, GcnParams, StateGraph};
pub use nncore::Matrix;
pub use rng::Rng;
