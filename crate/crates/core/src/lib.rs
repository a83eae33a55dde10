//! Online-learning engine for spiking recurrent networks.
//!
//! The crate provides discrete-time leaky integrate-and-fire (and
//! multi-compartment) dynamics, four interchangeable gradient engines over
//! those dynamics — reverse-mode backprop-through-time, exact forward-mode
//! influence accumulation, a block-sparse forward-mode variant built on
//! local eligibility traces, and a mixed-mode combination — together with
//! online-capable loss heads, synthetic task generators, and a training /
//! ablation harness with complexity instrumentation.

pub mod engines;
pub mod error;
pub mod loss;
pub mod model;
pub mod neuron;
pub mod taskgen;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
