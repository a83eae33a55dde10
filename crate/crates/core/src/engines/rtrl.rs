//! Exact forward-mode gradient accumulation.
//!
//! Maintains the full influence matrix `G_t = d state_t / d theta` per layer
//! plus the influence of the readout/filter states, updated forward in time
//! as `G_t = (H_I + H_E) G_{t-1} + F_t`. Memory is independent of the trial
//! length; locking heads are handled by accumulating (sum head) or
//! snapshotting (max head) readout-influence rows until the trial boundary.
//!
//! The engine is exposed both as a one-shot gradient computation and as a
//! step-at-a-time session, which the streaming trainer drives for pure
//! per-step updates.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::Result;
use crate::loss::{HeadEval, LossHeadSpec, LossProgram, TrialTarget};
use crate::model::{Model, TensorId};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{initial_states, step_network};

use super::{
    coupling_apply_matrix, cross_layer_path_active, select_spike_rows, spike_deriv, Counters,
    EngineKind, GradOptions, GradientReport, v_path_active,
};

/// Stateful exact forward-mode accumulator.
pub struct ExactSession {
    states: Vec<(Array1<f64>, Array1<f64>)>,
    eval: HeadEval,
    g_layers: Vec<Array2<f64>>,
    g_ro: Array2<f64>,
    g_rise: Option<Array2<f64>>,
    sum_g: Option<Array2<f64>>,
    best_vals: Array1<f64>,
    best_rows: Option<Array2<f64>>,
    counters: Counters,
    t: usize,
    t_len: usize,
    n_out: usize,
    window: (usize, usize),
}

impl ExactSession {
    pub fn new(
        model: &Model,
        program: &LossProgram,
        target: &TrialTarget,
        t_len: usize,
        opts: GradOptions,
    ) -> Result<Self> {
        model.validate_against(program)?;
        let net = &model.net;
        let layout = model.param_layout();
        let p = layout.total;
        let mut counters = Counters::default();
        let states = initial_states(net, opts.forward);
        let eval = HeadEval::new(
            program,
            target,
            t_len,
            net.k_top(),
            model.readout_w.as_ref().map(|w| &w.values),
        )?;
        let n_out = eval.n_out();
        let window = eval.window();
        let g_layers: Vec<Array2<f64>> = net
            .layers
            .iter()
            .map(|l| Array2::zeros((l.state_len(), p)))
            .collect();
        for l in &net.layers {
            // Double-buffered during the synchronous update.
            counters.note_alloc(2 * l.state_len() * p);
        }
        counters.note_alloc(n_out * p);
        let g_rise = match &program.head {
            LossHeadSpec::VanRossum { kernel } if kernel.rise_decay().is_some() => {
                counters.note_alloc(n_out * p);
                Some(Array2::zeros((n_out, p)))
            }
            _ => None,
        };
        let sum_g = if matches!(program.head, LossHeadSpec::SumReadoutCe { .. }) {
            counters.note_alloc(n_out * p);
            Some(Array2::zeros((n_out, p)))
        } else {
            None
        };
        let best_rows = if matches!(program.head, LossHeadSpec::MaxReadoutCe { .. }) {
            counters.note_alloc(n_out * p);
            Some(Array2::zeros((n_out, p)))
        } else {
            None
        };
        counters.note_alloc(p); // gradient accumulator held by the caller
        Ok(ExactSession {
            states,
            eval,
            g_layers,
            g_ro: Array2::zeros((n_out, p)),
            g_rise,
            sum_g,
            best_vals: Array1::from_elem(n_out, f64::NEG_INFINITY),
            best_rows,
            counters,
            t: 0,
            t_len,
            n_out,
            window,
        })
    }

    /// Refresh the head's copy of the readout weights (after a mid-trial
    /// parameter update in pure per-step training).
    pub fn refresh_readout(&mut self, model: &Model) {
        if let Some(w) = &model.readout_w {
            self.eval.update_readout_w(&w.values);
        }
    }

    /// Advance one step, accumulating this step's gradient contribution
    /// into `grad_acc` (online heads contribute here; locking heads only at
    /// [`Self::finish`]).
    pub fn step(
        &mut self,
        model: &Model,
        program: &LossProgram,
        input_row: ArrayView1<f64>,
        opts: GradOptions,
        grad_acc: &mut Array1<f64>,
    ) -> Result<()> {
        let net = &model.net;
        let n_layers = net.layers.len();
        let layout = model.param_layout();
        let p = layout.total;
        let counters = &mut self.counters;
        self.t += 1;
        let t = self.t;
        debug_assert!(t <= self.t_len);

        // ---- influence propagation (uses the t-1 states) ----
        let v_active = v_path_active(model);
        let cross_active = cross_layer_path_active(model, &opts);
        let mut spike_infl: Vec<Option<Array2<f64>>> = vec![None; n_layers];
        for l in 0..n_layers {
            let needs =
                (v_active && net.layers[l].v.is_some()) || (cross_active && l + 1 < n_layers);
            if needs {
                let layer = &net.layers[l];
                let d_prev = spike_deriv(layer, &net.surrogate, &self.states[l].0);
                let mut rows = select_spike_rows(layer, &self.g_layers[l]);
                for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|x| x * d_prev[i]);
                }
                counters.add_mult(layer.k * p);
                spike_infl[l] = Some(rows);
            }
        }
        let mut g_new: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let layer = &net.layers[l];
            let gain = layer.lif.drive_gain();
            let mut g = self.g_layers[l].clone();
            counters.add_mult(coupling_apply_matrix(layer, &mut g));
            if v_active {
                if let (Some(v), Some(rows)) = (&layer.v, &spike_infl[l]) {
                    g.scaled_add(gain, &v.values.dot(rows));
                    counters.add_mult(v.values.nrows() * v.values.ncols() * p);
                }
            }
            if l > 0 && cross_active {
                if let Some(rows) = &spike_infl[l - 1] {
                    g.scaled_add(gain, &layer.w.values.dot(rows));
                    counters.add_mult(layer.w.values.nrows() * layer.w.values.ncols() * p);
                }
            }
            let ff_prev: Array1<f64> = if l == 0 {
                input_row.to_owned()
            } else {
                self.states[l - 1].1.clone()
            };
            if let Some((off, (_r, cols))) = layout.offset_of(TensorId::W(l)) {
                for r in 0..layer.state_len() {
                    for j in 0..cols {
                        if ff_prev[j] != 0.0 {
                            g[[r, off + r * cols + j]] += gain * ff_prev[j];
                        }
                    }
                }
                counters.add_mult(cols);
            }
            if layer.v.is_some() {
                let s_prev = &self.states[l].1;
                if let Some((off, (_r, cols))) = layout.offset_of(TensorId::V(l)) {
                    for r in 0..layer.state_len() {
                        for j in 0..cols {
                            if s_prev[j] != 0.0 {
                                g[[r, off + r * cols + j]] += gain * s_prev[j];
                            }
                        }
                    }
                    counters.add_mult(cols);
                }
            }
            g_new.push(g);
        }
        self.g_layers = g_new;

        // ---- forward step ----
        step_network(net, &mut self.states, input_row, opts.forward);
        let top = n_layers - 1;
        let layer_top = &net.layers[top];
        let s_top = self.states[top].1.clone();
        let d_cur = spike_deriv(layer_top, &net.surrogate, &self.states[top].0);
        let mut gs_top = select_spike_rows(layer_top, &self.g_layers[top]);
        for (i, mut row) in gs_top.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x * d_cur[i]);
        }
        counters.add_mult(layer_top.k * p);

        // ---- readout influence and head accumulation ----
        let step = self.eval.step(t, &s_top);
        let n_out = self.n_out;
        let readout_w = model.readout_w.as_ref().map(|w| &w.values);
        let ro_offset = layout.offset_of(TensorId::Readout);
        match &program.head {
            LossHeadSpec::VanRossum { kernel } => {
                match (&mut self.g_rise, kernel.rise_decay()) {
                    (Some(ga), Some(lr)) => {
                        ga.mapv_inplace(|x| lr * x);
                        *ga += &gs_top;
                        counters.add_mult(n_out * p);
                        self.g_ro.mapv_inplace(|x| kernel.decay() * x);
                        self.g_ro += &*ga;
                        counters.add_mult(n_out * p);
                    }
                    _ => {
                        self.g_ro.mapv_inplace(|x| kernel.decay() * x);
                        self.g_ro += &gs_top;
                        counters.add_mult(n_out * p);
                    }
                }
                if let Some(err) = &step.err {
                    for c in 0..n_out {
                        if err[c] != 0.0 {
                            grad_acc.scaled_add(err[c], &self.g_ro.row(c).to_owned());
                        }
                    }
                    counters.add_mult(n_out * p);
                }
            }
            LossHeadSpec::SumReadoutCe { beta_ro, .. }
            | LossHeadSpec::MaxReadoutCe { beta_ro, .. } => {
                let w = readout_w.expect("weighted head");
                self.g_ro.mapv_inplace(|x| beta_ro * x);
                self.g_ro += &w.dot(&gs_top);
                counters.add_mult(n_out * p + w.len() * p);
                if let Some((off, (_r, cols))) = ro_offset {
                    for c in 0..n_out {
                        for i in 0..cols {
                            if s_top[i] != 0.0 {
                                self.g_ro[[c, off + c * cols + i]] += s_top[i];
                            }
                        }
                    }
                }
                if t >= self.window.0 && t <= self.window.1 {
                    if let Some(sg) = &mut self.sum_g {
                        *sg += &self.g_ro;
                    }
                    if let Some(rows) = &mut self.best_rows {
                        for c in 0..n_out {
                            if step.readout[c] > self.best_vals[c] {
                                self.best_vals[c] = step.readout[c];
                                rows.row_mut(c).assign(&self.g_ro.row(c));
                            }
                        }
                    }
                }
            }
            LossHeadSpec::LocalMse { .. } => {
                let w = readout_w.expect("weighted head");
                let mut g_y = w.dot(&gs_top);
                counters.add_mult(w.len() * p);
                if let Some((off, (_r, cols))) = ro_offset {
                    for c in 0..n_out {
                        for i in 0..cols {
                            if s_top[i] != 0.0 {
                                g_y[[c, off + c * cols + i]] += s_top[i];
                            }
                        }
                    }
                }
                if let Some(err) = &step.err {
                    for c in 0..n_out {
                        if err[c] != 0.0 {
                            grad_acc.scaled_add(err[c], &g_y.row(c).to_owned());
                        }
                    }
                    counters.add_mult(n_out * p);
                }
            }
        }
        Ok(())
    }

    /// Finalize: total loss, the locking-head gradient contribution (added
    /// to `grad_acc`), and the cost counters.
    pub fn finish(self, grad_acc: &mut Array1<f64>) -> Result<(f64, Counters)> {
        let mut counters = self.counters;
        let n_out = self.n_out;
        let is_sum = self.sum_g.is_some();
        let summary = self.eval.finalize()?;
        if let Some(g) = &summary.softmax_grad {
            let rows = if is_sum {
                self.sum_g.as_ref().expect("sum accumulator")
            } else {
                self.best_rows.as_ref().expect("max snapshots")
            };
            for c in 0..n_out {
                grad_acc.scaled_add(g[c], &rows.row(c).to_owned());
            }
            counters.add_mult(n_out * grad_acc.len());
        }
        Ok((summary.loss, counters))
    }
}

/// Spec [OP] equivalent of accumulating `rtrl_exact_step` over a whole
/// trial, generalized to stacked layers and the readout path.
pub fn rtrl_exact_gradient(
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    opts: GradOptions,
) -> Result<GradientReport> {
    let mut session = ExactSession::new(model, program, target, raster.t_len, opts)?;
    let mut grad_flat = Array1::zeros(model.param_layout().total);
    for t in 1..=raster.t_len {
        session.step(model, program, raster.data.row(t - 1), opts, &mut grad_flat)?;
    }
    let (loss, counters) = session.finish(&mut grad_flat)?;
    Ok(GradientReport {
        engine: EngineKind::RtrlExact,
        loss,
        grads: model.grads_from_flat(&grad_flat),
        peak_memory_elements: counters.mem,
        scalar_mult_count: counters.mult,
        trace_mode: None,
    })
}
