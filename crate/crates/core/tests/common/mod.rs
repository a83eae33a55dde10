//! Shared fixtures for the integration and acceptance suites: seeded random
//! networks, rasters and targets per loss head.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;

use spikegrad::loss::kernel::KernelSpec;
use spikegrad::loss::{LossHeadSpec, LossProgram, TrialTarget};
use spikegrad::model::{Model, ModelBuilder};
use spikegrad::neuron::raster::SpikeRaster;
use spikegrad::neuron::{ArchMode, InputScaleMode, LifParams, SurrogateSpec};
use spikegrad::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadCase {
    VanRossum,
    VanRossumDouble,
    SumCe,
    MaxCe,
    LocalMse,
}

pub const ALL_HEADS: [HeadCase; 5] = [
    HeadCase::VanRossum,
    HeadCase::VanRossumDouble,
    HeadCase::SumCe,
    HeadCase::MaxCe,
    HeadCase::LocalMse,
];

pub const INSTANT_HEADS: [HeadCase; 3] = [
    HeadCase::VanRossum,
    HeadCase::VanRossumDouble,
    HeadCase::LocalMse,
];

impl HeadCase {
    pub fn program(&self) -> LossProgram {
        match self {
            HeadCase::VanRossum => LossProgram::new(LossHeadSpec::VanRossum {
                kernel: KernelSpec::Exponential { tau: 5.0, dt: 1.0 },
            }),
            HeadCase::VanRossumDouble => LossProgram::new(LossHeadSpec::VanRossum {
                kernel: KernelSpec::DoubleExponential {
                    tau: 6.0,
                    tau_rise: 2.0,
                    dt: 1.0,
                },
            }),
            HeadCase::SumCe => LossProgram::new(LossHeadSpec::SumReadoutCe {
                n_classes: 2,
                beta_ro: 0.9,
                window: None,
            }),
            HeadCase::MaxCe => LossProgram::new(LossHeadSpec::MaxReadoutCe {
                n_classes: 2,
                beta_ro: 0.9,
                window: None,
            }),
            HeadCase::LocalMse => LossProgram::new(LossHeadSpec::LocalMse { n_out: 2 }),
        }
    }

    pub fn weighted(&self) -> bool {
        !matches!(self, HeadCase::VanRossum | HeadCase::VanRossumDouble)
    }

    pub fn target(&self, t_len: usize, k_top: usize, seed: u64) -> TrialTarget {
        let mut rng = seeded_rng(seed ^ 0x7a61);
        match self {
            HeadCase::VanRossum | HeadCase::VanRossumDouble => TrialTarget::Stream(
                Array2::from_shape_fn((t_len, k_top), |_| 0.4 * rng.gen::<f64>()),
            ),
            HeadCase::SumCe | HeadCase::MaxCe => TrialTarget::Label(rng.gen_range(0..2)),
            HeadCase::LocalMse => TrialTarget::Stream(Array2::from_shape_fn((t_len, 2), |_| {
                0.8 * rng.gen::<f64>() - 0.4
            })),
        }
    }
}

/// Seeded random model with enough drive to spike under the hard threshold.
pub fn random_model(n_in: usize, k: usize, mode: ArchMode, head: HeadCase, seed: u64) -> Model {
    let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
    let mut builder = ModelBuilder::new(n_in, vec![k], lif).mode(mode).surrogate(
        SurrogateSpec {
            kind: spikegrad::neuron::SurrogateKind::FastSigmoid,
            slope: 10.0,
        },
    );
    if head.weighted() {
        builder = builder.readout(2);
    }
    let mut model = builder.build(seed).unwrap();
    model.scale_weights(2.2);
    model
}

pub fn random_raster(t_len: usize, n: usize, density: f64, seed: u64) -> SpikeRaster {
    let mut rng = seeded_rng(seed ^ 0x5157);
    let mut raster = SpikeRaster::zeros(t_len, n);
    for t in 0..t_len {
        for i in 0..n {
            if rng.gen::<f64>() < density {
                raster.data[[t, i]] = 1.0;
            }
        }
    }
    raster
}

/// Zero out recurrent weight values while keeping the tensors (and their
/// gradients) in place.
pub fn zero_recurrent(model: &mut Model) {
    for layer in &mut model.net.layers {
        if let Some(v) = &mut layer.v {
            v.values.fill(0.0);
        }
    }
}
