//! Co-training of a continuous flow network and a retrieval (inverse
//! dynamics) network with a warm-up phase, a dual-training phase and a shared
//! replay buffer, plus the environments, fault injectors and metrics used to
//! evaluate them.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` also rejects NaN

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;

pub type Mlp = nn::Mlp<Real>;
pub type Mlp32 = nn::Mlp<f32>;
pub type AdamState = nn::AdamState<Real>;
pub type FlowNet = flow::FlowNet<Real>;
pub type FlowNet32 = flow::FlowNet<f32>;
pub type RetrievalNet = retrieval::RetrievalNet<Real>;
pub type RetrievalNet32 = retrieval::RetrievalNet<f32>;
pub type EnvConfig = envs::EnvConfig<Real>;
pub type EnvState = envs::EnvState<Real>;
pub type Action = envs::Action<Real>;
pub type FaultSpec = envs::FaultSpec<Real>;
pub type Transition = replay::Transition<Real>;
pub type ReplayBuffer = replay::ReplayBuffer<Real>;
pub type TrainConfig = training::TrainConfig<Real>;
pub type RunState = training::RunState<Real>;
