//! Embedding-enhanced implicit-feedback recommendation with coalition-based
//! explanations.
//!
//! The crate layers a plug-in embedding enhancer over from-scratch
//! matrix-factorization backbones: distribution heads refine entity
//! embeddings under a contrastive Wasserstein objective, and a cooperative
//! valuation over each entity's interaction list reweights training and
//! yields counterfactual explanations. A full implicit-feedback evaluation
//! harness (HR/NDCG over sampled candidates, PN/PS/F_NS for explanations)
//! and a batch CLI sit on top.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod msvr;
pub mod peo;
pub mod train;
