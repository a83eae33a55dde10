//! Block-sparse forward-mode accumulation.
//!
//! All spike-mediated influence propagation between hidden units is
//! dropped: influence flows only through each neuron's own compartment
//! block, which keeps the stored traces block-local (at most `m` values per
//! parameter; identical rows are shared per axon since layers are
//! homogeneous). The recurrent weights still drive the forward dynamics and
//! still learn through their immediate influence, so this engine realizes
//! the recurrent-detached training mode natively.
//!
//! The loss-head path (top-layer spikes into the readout or filter states)
//! is kept: without recurrent coupling the engine reproduces the exact
//! forward-mode gradients. In stacked networks, layers below the top one
//! receive no loss signal under this approximation and their gradients are
//! zero.
//!
//! Two trace granularities are selected automatically and reported:
//! * `Vector` — per-axon decaying spike traces (`q' = beta q + s`) with the
//!   three-factor gradient evaluation; valid for single-compartment layers
//!   with a stateless instantaneous head;
//! * `Block` — per-parameter compartment traces, plus filtered per-parameter
//!   traces carrying the readout path for stateful heads.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::loss::{HeadEval, LossHeadSpec, LossProgram, TrialTarget};
use crate::model::{Model, TensorId};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{initial_states, step_network, LayerSpec, SurrogateSpec};

use super::{spike_deriv, Counters, EngineKind, GradOptions, GradientReport};

/// Which trace representation the sparse/mixed engine used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceGranularity {
    Vector,
    Block,
}

/// Spec [OP] `trace_update`: `q' = beta * q + s`.
pub fn trace_update(q: &Array1<f64>, beta: f64, s: &Array1<f64>) -> Array1<f64> {
    assert_eq!(q.len(), s.len(), "trace_update: length mismatch");
    q.mapv(|x| beta * x) + s
}

/// Spec [OP] `three_factor_gradient`: rank-1 contribution
/// `(dL/dS ⊙ sigma'(u)) ⊗ q`.
pub fn three_factor_gradient(
    loss_grad_at_spikes: &Array1<f64>,
    u: &Array1<f64>,
    q: &Array1<f64>,
    spec: &SurrogateSpec,
    threshold: f64,
) -> Array2<f64> {
    let k = loss_grad_at_spikes.len();
    assert_eq!(u.len(), k, "three_factor_gradient: u length mismatch");
    let mut out = Array2::zeros((k, q.len()));
    for i in 0..k {
        let factor = loss_grad_at_spikes[i] * spec.deriv(u[i], threshold);
        if factor != 0.0 {
            for (j, &qj) in q.iter().enumerate() {
                out[[i, j]] = factor * qj;
            }
        }
    }
    out
}

/// Per-axon block traces for one weight tensor: `tr[(c_in, j, c)]` is the
/// influence of a weight injecting into compartment `c_in` from presynaptic
/// unit `j` on compartment `c` of its own neuron (shared across neurons;
/// the layer's implicit dynamics are homogeneous).
struct BlockTraces {
    m: usize,
    tr: Array3<f64>,
}

impl BlockTraces {
    fn new(m: usize, n_pre: usize) -> Self {
        BlockTraces {
            m,
            tr: Array3::zeros((m, n_pre, m)),
        }
    }

    /// `tr' = A tr + gain * s_pre[j] * e_{c_in}`.
    fn update(&mut self, layer: &LayerSpec, s_pre: &Array1<f64>, counters: &mut Counters) {
        let m = self.m;
        let gain = layer.lif.drive_gain();
        let n_pre = self.tr.dim().1;
        if m == 1 {
            let beta = layer.lif.beta;
            for j in 0..n_pre {
                self.tr[[0, j, 0]] = beta * self.tr[[0, j, 0]] + gain * s_pre[j];
            }
            counters.add_mult(2 * n_pre);
            return;
        }
        let block = layer.coupling_block();
        let mut scratch = vec![0.0; m];
        for c_in in 0..m {
            for j in 0..n_pre {
                for r in 0..m {
                    let mut acc = 0.0;
                    for c in 0..m {
                        acc += block[[r, c]] * self.tr[[c_in, j, c]];
                    }
                    scratch[r] = acc;
                }
                scratch[c_in] += gain * s_pre[j];
                for r in 0..m {
                    self.tr[[c_in, j, r]] = scratch[r];
                }
            }
        }
        counters.add_mult(m * n_pre * (m * m + 1));
    }

    /// Spike-compartment influence for the full parameter tensor:
    /// `out[r, j] = sigma'_{r/m} * tr[(r mod m, j, sc)]`.
    fn spike_influence(&self, layer: &LayerSpec, sigma: &Array1<f64>) -> Array2<f64> {
        let m = self.m;
        let sc = layer.spike_compartment();
        let n_pre = self.tr.dim().1;
        let mk = layer.state_len();
        let mut out = Array2::zeros((mk, n_pre));
        for r in 0..mk {
            let s = sigma[r / m];
            if s != 0.0 {
                for j in 0..n_pre {
                    out[[r, j]] = s * self.tr[[r % m, j, sc]];
                }
            }
        }
        out
    }

    fn stored_elements(&self) -> usize {
        self.tr.len()
    }
}

enum LayerTraces {
    Vector {
        q_in: Array1<f64>,
        q: Option<Array1<f64>>,
    },
    Block {
        w: BlockTraces,
        v: Option<BlockTraces>,
    },
}

/// Forward trace state shared by the sparse and mixed engines.
pub(crate) struct ForwardTraces {
    pub granularity: TraceGranularity,
    layers: Vec<LayerTraces>,
}

impl ForwardTraces {
    pub(crate) fn new(model: &Model, program: &LossProgram, counters: &mut Counters) -> Self {
        let all_single = model.net.layers.iter().all(|l| l.m() == 1);
        let stateless_head = matches!(program.head, LossHeadSpec::LocalMse { .. });
        let granularity = if all_single && stateless_head {
            TraceGranularity::Vector
        } else {
            TraceGranularity::Block
        };
        let mut n_prev = model.net.n_in;
        let mut layers = Vec::new();
        for layer in &model.net.layers {
            match granularity {
                TraceGranularity::Vector => {
                    counters.note_alloc(n_prev + layer.v.as_ref().map(|_| layer.k).unwrap_or(0));
                    layers.push(LayerTraces::Vector {
                        q_in: Array1::zeros(n_prev),
                        q: layer.v.as_ref().map(|_| Array1::zeros(layer.k)),
                    });
                }
                TraceGranularity::Block => {
                    let m = layer.m();
                    let w = BlockTraces::new(m, n_prev);
                    let v = layer.v.as_ref().map(|_| BlockTraces::new(m, layer.k));
                    counters.note_alloc(
                        w.stored_elements() + v.as_ref().map(|b| b.stored_elements()).unwrap_or(0),
                    );
                    layers.push(LayerTraces::Block { w, v });
                }
            }
            n_prev = layer.k;
        }
        ForwardTraces {
            granularity,
            layers,
        }
    }

    /// Advance all traces using the previous-step spikes (call before the
    /// network itself is stepped).
    pub(crate) fn step(
        &mut self,
        model: &Model,
        states: &[(Array1<f64>, Array1<f64>)],
        raster_row: ndarray::ArrayView1<f64>,
        counters: &mut Counters,
    ) {
        for (l, layer) in model.net.layers.iter().enumerate() {
            let ff_prev: Array1<f64> = if l == 0 {
                raster_row.to_owned()
            } else {
                states[l - 1].1.clone()
            };
            match &mut self.layers[l] {
                LayerTraces::Vector { q_in, q } => {
                    let beta = layer.lif.beta;
                    *q_in = trace_update(q_in, beta, &ff_prev);
                    counters.add_mult(q_in.len());
                    if let Some(q) = q {
                        *q = trace_update(q, beta, &states[l].1);
                        counters.add_mult(q.len());
                    }
                }
                LayerTraces::Block { w, v } => {
                    w.update(layer, &ff_prev, counters);
                    if let Some(v) = v {
                        v.update(layer, &states[l].1, counters);
                    }
                }
            }
        }
    }

    /// Spike-compartment influence of the top layer's own parameters at the
    /// current step: `(E_w, E_v)` with `E_w[r, j] = d s_i(t) / d W[r, j]`
    /// (already includes the surrogate factor).
    pub(crate) fn top_spike_influence(
        &self,
        model: &Model,
        sigma_top: &Array1<f64>,
        counters: &mut Counters,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let top = model.net.layers.len() - 1;
        let layer = &model.net.layers[top];
        match &self.layers[top] {
            LayerTraces::Vector { q_in, q } => {
                let gain = layer.lif.drive_gain();
                let k = layer.k;
                let mut e_w = Array2::zeros((k, q_in.len()));
                for i in 0..k {
                    let f = sigma_top[i] * gain;
                    for (j, &qj) in q_in.iter().enumerate() {
                        e_w[[i, j]] = f * qj;
                    }
                }
                counters.add_mult(k * q_in.len() + k);
                let e_v = q.as_ref().map(|q| {
                    let mut e = Array2::zeros((k, q.len()));
                    for i in 0..k {
                        let f = sigma_top[i] * gain;
                        for (j, &qj) in q.iter().enumerate() {
                            e[[i, j]] = f * qj;
                        }
                    }
                    counters.add_mult(k * q.len());
                    e
                });
                (e_w, e_v)
            }
            LayerTraces::Block { w, v } => {
                let e_w = w.spike_influence(layer, sigma_top);
                counters.add_mult(e_w.len());
                let e_v = v.as_ref().map(|v| {
                    let e = v.spike_influence(layer, sigma_top);
                    counters.add_mult(e.len());
                    e
                });
                (e_w, e_v)
            }
        }
    }
}

/// Per-parameter filtered traces carrying the readout path of stateful
/// heads (one array per top-layer tensor and filter stage).
struct FilteredTraces {
    w_rise: Option<Array2<f64>>,
    w_out: Array2<f64>,
    v_rise: Option<Array2<f64>>,
    v_out: Option<Array2<f64>>,
}

impl FilteredTraces {
    fn new(
        w_shape: (usize, usize),
        v_shape: Option<(usize, usize)>,
        two_stage: bool,
        counters: &mut Counters,
    ) -> Self {
        let alloc = |shape: (usize, usize), counters: &mut Counters| {
            counters.note_alloc(shape.0 * shape.1);
            Array2::zeros(shape)
        };
        FilteredTraces {
            w_rise: two_stage.then(|| alloc(w_shape, counters)),
            w_out: alloc(w_shape, counters),
            v_rise: if two_stage {
                v_shape.map(|s| alloc(s, counters))
            } else {
                None
            },
            v_out: v_shape.map(|s| alloc(s, counters)),
        }
    }

    /// One- or two-stage low-pass over the per-parameter spike influences.
    fn step(
        &mut self,
        decay: f64,
        rise_decay: Option<f64>,
        e_w: &Array2<f64>,
        e_v: Option<&Array2<f64>>,
        counters: &mut Counters,
    ) {
        let filt = |out: &mut Array2<f64>, input: &Array2<f64>, lam: f64, counters: &mut Counters| {
            out.zip_mut_with(input, |z, &x| *z = lam * *z + x);
            counters.add_mult(out.len());
        };
        match rise_decay {
            Some(lr) => {
                let wr = self.w_rise.as_mut().expect("two-stage traces");
                filt(wr, e_w, lr, counters);
                let wr_snapshot = wr.clone();
                filt(&mut self.w_out, &wr_snapshot, decay, counters);
                if let (Some(vr), Some(ev)) = (self.v_rise.as_mut(), e_v) {
                    filt(vr, ev, lr, counters);
                    let vr_snapshot = vr.clone();
                    filt(self.v_out.as_mut().expect("v out"), &vr_snapshot, decay, counters);
                }
            }
            None => {
                filt(&mut self.w_out, e_w, decay, counters);
                if let (Some(vo), Some(ev)) = (self.v_out.as_mut(), e_v) {
                    filt(vo, ev, decay, counters);
                }
            }
        }
    }
}

fn add_scaled_rows(
    grad_flat: &mut Array1<f64>,
    off: usize,
    cols: usize,
    weights: impl Fn(usize) -> f64,
    tr: &Array2<f64>,
    counters: &mut Counters,
) {
    for r in 0..tr.nrows() {
        let wgt = weights(r);
        if wgt != 0.0 {
            for j in 0..cols {
                grad_flat[off + r * cols + j] += wgt * tr[[r, j]];
            }
        }
    }
    counters.add_mult(tr.len());
}
