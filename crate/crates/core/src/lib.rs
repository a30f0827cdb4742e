//! Few-shot meta-learning with an ensemble of epoch-wise base-learners.
//!
//! A base-learner is adapted for `M` inner epochs per episode; at every epoch
//! meta-learned hyperprior networks emit that epoch's learning rate and
//! ensemble weight, and the test predictions of all epochs are combined.
//! Everything from the initializer through the hyperprior networks is
//! trained end to end by differentiating through the unrolled inner loop.
//!
//! The numeric core ([`autodiff`], [`nn`], [`engine`]) is generic over
//! [`Scalar`]; orchestration and persistence work in `f64`.

pub mod autodiff;
pub mod engine;
pub mod episode;
pub mod nn;
mod scalar;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use autodiff::{AutodiffError, Graph, NodeId, Op, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type BaseParams64 = nn::BaseParams<f64>;
pub type Hyperprior64 = nn::Hyperprior<f64>;
pub type PriorSchedule64 = nn::PriorSchedule<f64>;
