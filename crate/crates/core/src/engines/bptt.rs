//! Reverse-mode gradient accumulation over a stored trajectory.
//!
//! Credit flows backward through time as `c_t = c_{t+1} H_{t+1} + d_t`; the
//! full forward history is recorded first, which makes the engine's memory
//! grow linearly with the trial length.

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::loss::{HeadEval, LossHeadSpec, LossProgram, TrialTarget};
use crate::model::{Model, TensorId};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{initial_states, step_network};

use super::{
    coupling_transpose_apply, cross_layer_path_active, scatter_spike_rows, spike_deriv,
    Counters, EngineKind, GradOptions, GradientReport, v_path_active,
};

/// Spec [OP] `bptt_gradient`.
pub fn bptt_gradient(
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    opts: GradOptions,
) -> Result<GradientReport> {
    let net = &model.net;
    let t_len = raster.t_len;
    let n_layers = net.layers.len();
    let layout = model.param_layout();
    let mut counters = Counters::default();

    // ---- forward pass with full storage ----
    let mut states = initial_states(net, opts.forward);
    let mut u_hist: Vec<Array2<f64>> = net
        .layers
        .iter()
        .map(|l| Array2::zeros((t_len + 1, l.state_len())))
        .collect();
    let mut s_hist: Vec<Array2<f64>> = net
        .layers
        .iter()
        .map(|l| Array2::zeros((t_len + 1, l.k)))
        .collect();
    for l in 0..n_layers {
        u_hist[l].row_mut(0).assign(&states[l].0);
        s_hist[l].row_mut(0).assign(&states[l].1);
        counters.note_alloc((t_len + 1) * (net.layers[l].state_len() + net.layers[l].k));
    }

    let mut eval = HeadEval::new(
        program,
        target,
        t_len,
        net.k_top(),
        model.readout_w.as_ref().map(|w| &w.values),
    )?;
    let n_out = eval.n_out();
    let window = eval.window();
    let mut errs: Vec<Option<Array1<f64>>> = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        step_network(net, &mut states, raster.data.row(t - 1), opts.forward);
        for l in 0..n_layers {
            u_hist[l].row_mut(t).assign(&states[l].0);
            s_hist[l].row_mut(t).assign(&states[l].1);
        }
        let s_top = states[n_layers - 1].1.clone();
        let step = eval.step(t, &s_top);
        errs.push(step.err);
    }
    counters.note_alloc(t_len * n_out); // recorded per-step head credit
    let summary = eval.finalize()?;

    // ---- backward pass ----
    let mut grad_flat: Array1<f64> = Array1::zeros(layout.total);
    counters.note_alloc(layout.total);
    let mut ubar_next: Vec<Array1<f64>> = net
        .layers
        .iter()
        .map(|l| Array1::zeros(l.state_len()))
        .collect();
    for l in 0..n_layers {
        counters.note_alloc(2 * net.layers[l].state_len());
    }
    // Readout / filter adjoint carried across steps (stateful heads).
    let mut rbar_next: Array1<f64> = Array1::zeros(n_out);
    let mut abar_next: Array1<f64> = Array1::zeros(n_out);
    counters.note_alloc(2 * n_out);

    let kernel_decays = match &program.head {
        LossHeadSpec::VanRossum { kernel } => Some((kernel.decay(), kernel.rise_decay())),
        _ => None,
    };
    let beta_ro = match &program.head {
        LossHeadSpec::SumReadoutCe { beta_ro, .. } | LossHeadSpec::MaxReadoutCe { beta_ro, .. } => {
            Some(*beta_ro)
        }
        _ => None,
    };
    let readout_w = model.readout_w.as_ref().map(|w| &w.values);
    let ro_offset = layout.offset_of(TensorId::Readout);

    for t in (1..=t_len).rev() {
        // Head credit on the readout at this step.
        let d_ro: Array1<f64> = match &program.head {
            LossHeadSpec::VanRossum { .. } | LossHeadSpec::LocalMse { .. } => errs[t - 1]
                .clone()
                .unwrap_or_else(|| Array1::zeros(n_out)),
            LossHeadSpec::SumReadoutCe { .. } => {
                if t >= window.0 && t <= window.1 {
                    summary.softmax_grad.clone().expect("sum head grad")
                } else {
                    Array1::zeros(n_out)
                }
            }
            LossHeadSpec::MaxReadoutCe { .. } => {
                let g = summary.softmax_grad.as_ref().expect("max head grad");
                let arg = summary.argmax_steps.as_ref().expect("max head argmax");
                let mut d = Array1::zeros(n_out);
                for c in 0..n_out {
                    if arg[c] == t {
                        d[c] = g[c];
                    }
                }
                d
            }
        };

        let top = n_layers - 1;
        let s_top_t = s_hist[top].row(t).to_owned();
        // Adjoint of the top layer's current spikes through the head.
        let mut sbar_head: Array1<f64> = Array1::zeros(net.layers[top].k);
        match &program.head {
            LossHeadSpec::VanRossum { .. } => {
                let (lam_d, lam_r) = kernel_decays.expect("kernel head");
                // z_t = lam_d z_{t-1} + a_t (or + s_t); a_t = lam_r a_{t-1} + s_t.
                let zbar = &d_ro + &(rbar_next.mapv(|x| lam_d * x));
                counters.add_mult(n_out);
                match lam_r {
                    Some(lr) => {
                        let abar = &zbar + &(abar_next.mapv(|x| lr * x));
                        counters.add_mult(n_out);
                        sbar_head += &abar;
                        abar_next = abar;
                    }
                    None => {
                        sbar_head += &zbar;
                    }
                }
                rbar_next = zbar;
            }
            LossHeadSpec::SumReadoutCe { .. } | LossHeadSpec::MaxReadoutCe { .. } => {
                let b = beta_ro.expect("leaky readout");
                let rbar = &d_ro + &(rbar_next.mapv(|x| b * x));
                counters.add_mult(n_out);
                let w = readout_w.expect("weighted head");
                sbar_head += &w.t().dot(&rbar);
                counters.add_mult(w.len());
                if let Some((off, (_r, cols))) = ro_offset {
                    for c in 0..n_out {
                        for i in 0..cols {
                            grad_flat[off + c * cols + i] += rbar[c] * s_top_t[i];
                        }
                    }
                    counters.add_mult(n_out * cols);
                }
                rbar_next = rbar;
            }
            LossHeadSpec::LocalMse { .. } => {
                let w = readout_w.expect("weighted head");
                sbar_head += &w.t().dot(&d_ro);
                counters.add_mult(w.len());
                if let Some((off, (_r, cols))) = ro_offset {
                    for c in 0..n_out {
                        for i in 0..cols {
                            grad_flat[off + c * cols + i] += d_ro[c] * s_top_t[i];
                        }
                    }
                    counters.add_mult(n_out * cols);
                }
            }
        }

        // Hidden layers, top-down; sbar reads the t+1 adjoints before they
        // are replaced.
        let mut ubar_cur: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            ubar_cur.push(Array1::zeros(net.layers[l].state_len()));
        }
        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            let gain = layer.lif.drive_gain();
            let mut sbar: Array1<f64> = if l == top {
                sbar_head.clone()
            } else {
                Array1::zeros(layer.k)
            };
            if v_path_active(model) {
                if let Some(v) = &layer.v {
                    sbar.scaled_add(gain, &v.values.t().dot(&ubar_next[l]));
                    counters.add_mult(v.values.len() + layer.k);
                }
            }
            if l + 1 < n_layers && cross_layer_path_active(model, &opts) {
                let w_next = &net.layers[l + 1].w;
                let gain_next = net.layers[l + 1].lif.drive_gain();
                sbar.scaled_add(gain_next, &w_next.values.t().dot(&ubar_next[l + 1]));
                counters.add_mult(w_next.values.len() + layer.k);
            }
            let u_t = u_hist[l].row(t).to_owned();
            let d = spike_deriv(layer, &net.surrogate, &u_t);
            let spike_credit = scatter_spike_rows(layer, &(&d * &sbar));
            counters.add_mult(layer.k);
            let mut ubar = coupling_transpose_apply(layer, &ubar_next[l]);
            counters.add_mult(layer.state_len() * layer.m());
            ubar += &spike_credit;

            // Immediate parameter credit: u_l^t = ... + gain (W ff + V rec).
            let ff_prev: Array1<f64> = if l == 0 {
                raster.data.row(t - 1).to_owned()
            } else {
                s_hist[l - 1].row(t - 1).to_owned()
            };
            if let Some((off, (_r, cols))) = layout.offset_of(TensorId::W(l)) {
                for r in 0..layer.state_len() {
                    if ubar[r] != 0.0 {
                        for j in 0..cols {
                            grad_flat[off + r * cols + j] += gain * ubar[r] * ff_prev[j];
                        }
                    }
                }
                counters.add_mult(layer.state_len() * cols);
            }
            if layer.v.is_some() {
                let s_prev = s_hist[l].row(t - 1).to_owned();
                if let Some((off, (_r, cols))) = layout.offset_of(TensorId::V(l)) {
                    for r in 0..layer.state_len() {
                        if ubar[r] != 0.0 {
                            for j in 0..cols {
                                grad_flat[off + r * cols + j] += gain * ubar[r] * s_prev[j];
                            }
                        }
                    }
                    counters.add_mult(layer.state_len() * cols);
                }
            }
            ubar_cur[l] = ubar;
        }
        ubar_next = ubar_cur;
    }

    Ok(GradientReport {
        engine: EngineKind::Bptt,
        loss: summary.loss,
        grads: model.grads_from_flat(&grad_flat),
        peak_memory_elements: counters.mem,
        scalar_mult_count: counters.mult,
        trace_mode: None,
    })
}
