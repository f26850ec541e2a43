//! Offline reinforcement-learning workbench: Decision Transformer,
//! Decision LSTM and behavior cloning trained on trajectory datasets
//! from scripted controllers in analytic pendulum simulators.

pub mod data;
pub mod envs;
pub mod evaluator;
pub mod experts;
pub mod kernel;
pub mod models;
pub mod trainer;
