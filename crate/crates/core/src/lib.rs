//! Model-based DDPG portfolio engine: market data, price prediction,
//! data augmentation, behavior cloning, backtesting and the agent.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod backtest;
pub mod config;
pub mod error;
pub mod greedy;
pub mod market;
pub mod ndybm;
pub mod orchestrator;
pub mod rgan;
pub mod risk;
pub mod seed;
pub mod synthetic;

pub use error::{CoreError, Result};
