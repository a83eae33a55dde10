//! Causal kernel filters implemented as one- or two-state linear
//! recurrences. These drive the van Rossum distance and double as the
//! readout filter for spike-train outputs.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Causal filter kernel. The double-exponential is realized as two chained
/// single-pole stages (rise stage feeding the fall stage).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Exponential { tau: f64, dt: f64 },
    DoubleExponential { tau: f64, tau_rise: f64, dt: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let (tau, tau_rise, dt) = match *self {
            KernelSpec::Exponential { tau, dt } => (tau, tau, dt),
            KernelSpec::DoubleExponential { tau, tau_rise, dt } => (tau, tau_rise, dt),
        };
        if !(tau > 0.0) || !(tau_rise > 0.0) {
            return Err(Error::Domain(format!(
                "kernel time scales must be positive, got tau={tau}, tau_rise={tau_rise}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("kernel dt must be positive, got {dt}")));
        }
        Ok(())
    }

    /// Per-step decay of the output stage.
    pub fn decay(&self) -> f64 {
        match *self {
            KernelSpec::Exponential { tau, dt } => (-dt / tau).exp(),
            KernelSpec::DoubleExponential { tau, dt, .. } => (-dt / tau).exp(),
        }
    }

    /// Per-step decay of the rise stage, if the kernel has one.
    pub fn rise_decay(&self) -> Option<f64> {
        match *self {
            KernelSpec::Exponential { .. } => None,
            KernelSpec::DoubleExponential { tau_rise, dt, .. } => Some((-dt / tau_rise).exp()),
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            KernelSpec::Exponential { .. } => 1,
            KernelSpec::DoubleExponential { .. } => 2,
        }
    }
}

/// Scalar filter state (one channel).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterState {
    /// Rise-stage value; unused for single-exponential kernels.
    pub rise: f64,
    /// Output-stage value.
    pub out: f64,
}

/// Spec [OP] `kernel_filter_step`: advance one filter state by one input
/// sample.
pub fn kernel_filter_step(z: FilterState, s: f64, spec: &KernelSpec) -> FilterState {
    match spec.rise_decay() {
        None => FilterState {
            rise: 0.0,
            out: spec.decay() * z.out + s,
        },
        Some(lr) => {
            let rise = lr * z.rise + s;
            FilterState {
                rise,
                out: spec.decay() * z.out + rise,
            }
        }
    }
}

/// Bank of identical filters over `n` channels.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub spec: KernelSpec,
    pub rise: Array1<f64>,
    pub out: Array1<f64>,
}

impl FilterBank {
    pub fn new(spec: KernelSpec, n: usize) -> Self {
        FilterBank {
            spec,
            rise: Array1::zeros(n),
            out: Array1::zeros(n),
        }
    }

    pub fn step(&mut self, s: &Array1<f64>) {
        match self.spec.rise_decay() {
            None => {
                let lam = self.spec.decay();
                self.out.zip_mut_with(s, |z, &x| *z = lam * *z + x);
            }
            Some(lr) => {
                self.rise.zip_mut_with(s, |a, &x| *a = lr * *a + x);
                let lam = self.spec.decay();
                self.out.zip_mut_with(&self.rise, |z, &a| *z = lam * *z + a);
            }
        }
    }

    /// Filter a whole `T x n` sample stream, returning the `T x n` outputs.
    pub fn run(spec: KernelSpec, stream: ndarray::ArrayView2<f64>) -> ndarray::Array2<f64> {
        let (t_len, n) = stream.dim();
        let mut bank = FilterBank::new(spec, n);
        let mut out = ndarray::Array2::zeros((t_len, n));
        for t in 0..t_len {
            bank.step(&stream.row(t).to_owned());
            out.row_mut(t).assign(&bank.out);
        }
        out
    }
}
