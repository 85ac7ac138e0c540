//! Layer-wise feature applicability for neural networks, per-layer
//! applicability predictors, and the CactusNet branching network.

pub mod applicability;
pub mod base;
pub mod cactus;
pub mod data;
pub mod nn;
pub mod predictor;
pub mod seed;
