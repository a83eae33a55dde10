//! Interchangeable gradient engines over shared spiking dynamics.
//!
//! * [`bptt`] — reverse-mode accumulation over a stored trajectory;
//! * [`rtrl`] — exact forward-mode accumulation of the full influence
//!   matrix (same gradients as reverse mode, memory independent of the
//!   trial length);
//! * [`sparse`] — forward-mode accumulation with all spike-mediated
//!   influence propagation between hidden units dropped, leaving
//!   block-local eligibility traces (the loss-head path is kept, so
//!   networks without recurrent coupling reproduce the exact engine);
//! * [`mixed`] — reverse-mode through the instantaneous loss head within
//!   each timestep combined with the same forward traces across timesteps;
//!   numerically identical to the sparse engine where both apply.
//!
//! All engines run the identical forward pass and report identical losses;
//! they differ only in the derivative bookkeeping and its cost profile.

pub mod bptt;
pub mod dump;
pub mod fd;
pub mod jacobian;
pub mod mixed;
pub mod probe;
pub mod rtrl;
pub mod sparse;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{HeadEval, LossProgram, TrialTarget};
use crate::model::{Model, ParamGrads};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{ForwardMode, LayerSpec, SurrogateSpec};

pub use jacobian::{assemble_jacobians, InfluenceStore, JacobianParts};
pub use sparse::{three_factor_gradient, trace_update, TraceGranularity};

/// Which gradient engine to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Bptt,
    RtrlExact,
    RtrlSparse,
    Mixed,
}

impl EngineKind {
    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::Bptt => "bptt",
            EngineKind::RtrlExact => "rtrl_exact",
            EngineKind::RtrlSparse => "rtrl_sparse",
            EngineKind::Mixed => "mixed",
        }
    }
}

/// Engine-cost instrumentation. `mult` counts floating multiplications in
/// derivative propagation and accumulation (the forward pass is excluded);
/// `mem` counts f64 elements of live engine state (stores, accumulators,
/// recorded trajectories, gradient buffers).
#[derive(Debug, Clone, Copy, Default)]
pub struct Counters {
    pub mult: u64,
    pub mem: u64,
}

impl Counters {
    pub fn add_mult(&mut self, n: usize) {
        self.mult += n as u64;
    }

    pub fn note_alloc(&mut self, elements: usize) {
        self.mem += elements as u64;
    }
}

/// Gradient computation result with cost counters.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub engine: EngineKind,
    pub loss: f64,
    pub grads: ParamGrads,
    pub peak_memory_elements: u64,
    pub scalar_mult_count: u64,
    /// Trace granularity the sparse/mixed engines selected, if applicable.
    pub trace_mode: Option<TraceGranularity>,
}

/// Options shared by all engines.
#[derive(Debug, Clone, Copy)]
pub struct GradOptions {
    pub forward: ForwardMode,
    /// In recurrent-detached mode, also drop spike-mediated influence
    /// propagation between consecutive hidden layers (the loss-head path is
    /// always kept). Off by default: recurrent-detached only detaches the
    /// within-layer recurrent coupling.
    pub rd_detach_cross_layer: bool,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            forward: ForwardMode::Spiking,
            rd_detach_cross_layer: false,
        }
    }
}

impl GradOptions {
    pub fn smooth() -> Self {
        GradOptions {
            forward: ForwardMode::SmoothSurrogate,
            ..Default::default()
        }
    }
}

/// Run one engine end to end on a single trial.
pub fn compute_gradient(
    engine: EngineKind,
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    opts: GradOptions,
) -> Result<GradientReport> {
    model.validate_against(program)?;
    if raster.n != model.net.n_in {
        return Err(Error::Shape(format!(
            "raster width {} != n_in {}",
            raster.n, model.net.n_in
        )));
    }
    match engine {
        EngineKind::Bptt => bptt::bptt_gradient(model, program, raster, target, opts),
        EngineKind::RtrlExact => rtrl::rtrl_exact_gradient(model, program, raster, target, opts),
        EngineKind::RtrlSparse => {
            sparse::rtrl_sparse_gradient(model, program, raster, target, opts)
        }
        EngineKind::Mixed => mixed::mixed_mode_gradient(model, program, raster, target, opts),
    }
}

/// Forward-only loss evaluation (no gradient bookkeeping); the reference
/// for engine-loss identity and the finite-difference oracle.
pub fn evaluate_loss(
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    forward: ForwardMode,
) -> Result<f64> {
    model.validate_against(program)?;
    let t_len = raster.t_len;
    let mut states = crate::neuron::initial_states(&model.net, forward);
    let mut eval = HeadEval::new(
        program,
        target,
        t_len,
        model.net.k_top(),
        model.readout_w.as_ref().map(|w| &w.values),
    )?;
    for t in 1..=t_len {
        crate::neuron::step_network(&model.net, &mut states, raster.data.row(t - 1), forward);
        let s_top = states.last().expect("at least one layer").1.clone();
        eval.step(t, &s_top);
    }
    Ok(eval.finalize()?.loss)
}

/// Surrogate derivative evaluated at each neuron's spiking compartment.
pub(crate) fn spike_deriv(
    layer: &LayerSpec,
    surrogate: &SurrogateSpec,
    u: &Array1<f64>,
) -> Array1<f64> {
    let m = layer.m();
    let sc = layer.spike_compartment();
    Array1::from_iter(
        (0..layer.k).map(|i| surrogate.deriv(u[i * m + sc], layer.lif.threshold)),
    )
}

/// Select the spiking-compartment rows of a `(m k) x p` matrix, giving
/// `k x p`.
pub(crate) fn select_spike_rows(layer: &LayerSpec, g: &Array2<f64>) -> Array2<f64> {
    let m = layer.m();
    if m == 1 {
        return g.clone();
    }
    let sc = layer.spike_compartment();
    let p = g.ncols();
    let mut out = Array2::zeros((layer.k, p));
    for i in 0..layer.k {
        out.row_mut(i).assign(&g.row(i * m + sc));
    }
    out
}

/// Apply the block-diagonal implicit transition to every column of a
/// `(m k) x p` matrix in place. Returns the multiplication count.
pub(crate) fn coupling_apply_matrix(layer: &LayerSpec, g: &mut Array2<f64>) -> usize {
    let m = layer.m();
    let p = g.ncols();
    if m == 1 {
        let beta = layer.lif.beta;
        g.mapv_inplace(|x| beta * x);
        return layer.k * p;
    }
    let block = layer.coupling_block();
    let mut scratch = vec![0.0; m];
    for i in 0..layer.k {
        for col in 0..p {
            for r in 0..m {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += block[[r, c]] * g[[i * m + c, col]];
                }
                scratch[r] = acc;
            }
            for r in 0..m {
                g[[i * m + r, col]] = scratch[r];
            }
        }
    }
    layer.k * p * m * m
}

/// Apply the transposed block-diagonal implicit transition to a state-sized
/// vector.
pub(crate) fn coupling_transpose_apply(layer: &LayerSpec, v: &Array1<f64>) -> Array1<f64> {
    let m = layer.m();
    if m == 1 {
        return v * layer.lif.beta;
    }
    let block = layer.coupling_block();
    let mut out = Array1::zeros(v.len());
    for i in 0..layer.k {
        for c in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += block[[r, c]] * v[i * m + r];
            }
            out[i * m + c] = acc;
        }
    }
    out
}

/// Scatter a `k`-vector into the spiking-compartment rows of a state-sized
/// vector (the transpose of the spike selector).
pub(crate) fn scatter_spike_rows(layer: &LayerSpec, x: &Array1<f64>) -> Array1<f64> {
    let m = layer.m();
    if m == 1 {
        return x.clone();
    }
    let sc = layer.spike_compartment();
    let mut out = Array1::zeros(layer.state_len());
    for i in 0..layer.k {
        out[i * m + sc] = x[i];
    }
    out
}

/// Whether spike-mediated recurrent influence (through `V`) propagates for
/// this model under the given engine options.
pub(crate) fn v_path_active(model: &Model) -> bool {
    model.net.recurrent_grad_flow()
}

/// Whether spike-mediated cross-layer influence (through the next layer's
/// `W`) propagates.
pub(crate) fn cross_layer_path_active(model: &Model, opts: &GradOptions) -> bool {
    !(model.net.mode == crate::neuron::ArchMode::Rd && opts.rd_detach_cross_layer)
}
