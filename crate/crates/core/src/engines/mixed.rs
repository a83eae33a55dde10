//! Mixed-mode accumulation: reverse-mode through the loss head within each
//! timestep, forward-mode traces across timesteps.
//!
//! The head must be an instantaneous function of the current step (declared
//! kernel filters are folded into the forward traces); locking heads are
//! rejected. Where both apply, the numerical result coincides with the
//! sparse forward-mode engine up to rounding, but the credit is obtained by
//! explicitly reversing the within-step head computation rather than from
//! the closed-form three-factor expression.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::loss::{HeadEval, LossHeadSpec, LossProgram, TrialTarget};
use crate::model::{Model, TensorId};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{initial_states, step_network};

use super::sparse::ForwardTraces;
use super::{spike_deriv, Counters, EngineKind, GradOptions, GradientReport};

/// Credits produced by reversing one step of the instantaneous head.
struct HeadStepCredit {
    /// Credit on the head's state vector (filter output) at this step;
    /// applied to the forward-filtered influence traces.
    d_state: Option<Array1<f64>>,
    /// Credit on the current top-layer spikes (for stateless heads).
    d_spikes: Option<Array1<f64>>,
    /// Credit on the readout weights (outer product already materialized).
    d_readout_w: Option<Array2<f64>>,
}

/// Spec [OP] `mixed_mode_gradient`.
pub fn mixed_mode_gradient(
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    opts: GradOptions,
) -> Result<GradientReport> {
    if !program.head.instantaneous() {
        return Err(Error::Locking(format!(
            "mixed-mode accumulation needs an instantaneous loss head; {} is locking",
            match program.head {
                LossHeadSpec::SumReadoutCe { .. } => "sum_readout_ce",
                LossHeadSpec::MaxReadoutCe { .. } => "max_readout_ce",
                _ => "head",
            }
        )));
    }
    let net = &model.net;
    let t_len = raster.t_len;
    let top = net.layers.len() - 1;
    let layout = model.param_layout();
    let mut counters = Counters::default();

    let mut states = initial_states(net, opts.forward);
    let mut eval = HeadEval::new(
        program,
        target,
        t_len,
        net.k_top(),
        model.readout_w.as_ref().map(|w| &w.values),
    )?;
    let n_out = eval.n_out();

    let mut traces = ForwardTraces::new(model, program, &mut counters);
    let mut grad_flat: Array1<f64> = Array1::zeros(layout.total);
    counters.note_alloc(layout.total);

    let layer_top = &net.layers[top];
    let m = layer_top.m();
    let w_shape = layer_top.w.shape();
    let v_shape = layer_top.v.as_ref().map(|v| v.shape());
    let w_off = layout.offset_of(TensorId::W(top)).expect("top W").0;
    let v_off = layout.offset_of(TensorId::V(top)).map(|(off, _)| off);
    let ro_offset = layout.offset_of(TensorId::Readout);
    let readout_w = model.readout_w.as_ref().map(|w| &w.values);

    // Forward-filtered influence traces for the declared kernel (the
    // across-timestep half of the accumulation).
    let kernel = match &program.head {
        LossHeadSpec::VanRossum { kernel } => Some(*kernel),
        _ => None,
    };
    let two_stage = kernel.map(|k| k.rise_decay().is_some()).unwrap_or(false);
    let mut phi_w_rise: Option<Array2<f64>> = None;
    let mut phi_w: Option<Array2<f64>> = None;
    let mut phi_v_rise: Option<Array2<f64>> = None;
    let mut phi_v: Option<Array2<f64>> = None;
    if kernel.is_some() {
        counters.note_alloc(w_shape.0 * w_shape.1);
        phi_w = Some(Array2::zeros(w_shape));
        if two_stage {
            counters.note_alloc(w_shape.0 * w_shape.1);
            phi_w_rise = Some(Array2::zeros(w_shape));
        }
        if let Some(vs) = v_shape {
            counters.note_alloc(vs.0 * vs.1 * if two_stage { 2 } else { 1 });
            phi_v = Some(Array2::zeros(vs));
            if two_stage {
                phi_v_rise = Some(Array2::zeros(vs));
            }
        }
    }

    for t in 1..=t_len {
        traces.step(model, &states, raster.data.row(t - 1), &mut counters);
        step_network(net, &mut states, raster.data.row(t - 1), opts.forward);
        let s_top = states[top].1.clone();
        let sigma_top = spike_deriv(layer_top, &net.surrogate, &states[top].0);
        let step = eval.step(t, &s_top);

        // Forward half: push the current spike influences through the
        // declared filter.
        if let Some(k) = kernel {
            let (e_w, e_v) = traces.top_spike_influence(model, &sigma_top, &mut counters);
            let lam = k.decay();
            match k.rise_decay() {
                Some(lr) => {
                    let wr = phi_w_rise.as_mut().unwrap();
                    wr.zip_mut_with(&e_w, |z, &x| *z = lr * *z + x);
                    let wr_now = wr.clone();
                    let wo = phi_w.as_mut().unwrap();
                    wo.zip_mut_with(&wr_now, |z, &x| *z = lam * *z + x);
                    counters.add_mult(2 * e_w.len());
                    if let Some(ev) = e_v.as_ref() {
                        let vr = phi_v_rise.as_mut().unwrap();
                        vr.zip_mut_with(ev, |z, &x| *z = lr * *z + x);
                        let vr_now = vr.clone();
                        let vo = phi_v.as_mut().unwrap();
                        vo.zip_mut_with(&vr_now, |z, &x| *z = lam * *z + x);
                        counters.add_mult(2 * ev.len());
                    }
                }
                None => {
                    let wo = phi_w.as_mut().unwrap();
                    wo.zip_mut_with(&e_w, |z, &x| *z = lam * *z + x);
                    counters.add_mult(e_w.len());
                    if let (Some(vo), Some(ev)) = (phi_v.as_mut(), e_v.as_ref()) {
                        vo.zip_mut_with(ev, |z, &x| *z = lam * *z + x);
                        counters.add_mult(ev.len());
                    }
                }
            }
        }

        // Reverse half: backprop through this step's head computation.
        let credit = reverse_head_step(program, &step.err, &s_top, readout_w, &mut counters);

        if let Some(d_state) = credit.d_state {
            // Credit on the filter output applied to its influence traces.
            let wo = phi_w.as_ref().expect("filter traces");
            for r in 0..w_shape.0 {
                let c = d_state[r / m];
                if c != 0.0 {
                    for j in 0..w_shape.1 {
                        grad_flat[w_off + r * w_shape.1 + j] += c * wo[[r, j]];
                    }
                }
            }
            counters.add_mult(wo.len());
            if let (Some(off), Some(vo)) = (v_off, phi_v.as_ref()) {
                let cols = v_shape.unwrap().1;
                for r in 0..vo.nrows() {
                    let c = d_state[r / m];
                    if c != 0.0 {
                        for j in 0..cols {
                            grad_flat[off + r * cols + j] += c * vo[[r, j]];
                        }
                    }
                }
                counters.add_mult(vo.len());
            }
        }
        if let Some(d_spikes) = credit.d_spikes {
            let (e_w, e_v) = traces.top_spike_influence(model, &sigma_top, &mut counters);
            for r in 0..w_shape.0 {
                let c = d_spikes[r / m];
                if c != 0.0 {
                    for j in 0..w_shape.1 {
                        grad_flat[w_off + r * w_shape.1 + j] += c * e_w[[r, j]];
                    }
                }
            }
            counters.add_mult(e_w.len());
            if let (Some(off), Some(ev)) = (v_off, e_v.as_ref()) {
                let cols = v_shape.unwrap().1;
                for r in 0..ev.nrows() {
                    let c = d_spikes[r / m];
                    if c != 0.0 {
                        for j in 0..cols {
                            grad_flat[off + r * cols + j] += c * ev[[r, j]];
                        }
                    }
                }
                counters.add_mult(ev.len());
            }
        }
        if let (Some(d_ro), Some((off, (_r, cols)))) = (credit.d_readout_w, ro_offset) {
            for c in 0..n_out {
                for i in 0..cols {
                    grad_flat[off + c * cols + i] += d_ro[[c, i]];
                }
            }
        }
    }

    let summary = eval.finalize()?;
    Ok(GradientReport {
        engine: EngineKind::Mixed,
        loss: summary.loss,
        grads: model.grads_from_flat(&grad_flat),
        peak_memory_elements: counters.mem,
        scalar_mult_count: counters.mult,
        trace_mode: Some(traces.granularity),
    })
}

/// Reverse pass over one step of the instantaneous head computation.
fn reverse_head_step(
    program: &LossProgram,
    err: &Option<Array1<f64>>,
    s_top: &Array1<f64>,
    readout_w: Option<&Array2<f64>>,
    counters: &mut Counters,
) -> HeadStepCredit {
    match (&program.head, err) {
        // L_t = 0.5 ||z_t - z*_t||^2 with z_t the filter output:
        // d_z = z - z*, and the filter history is carried by the forward
        // traces, so the state credit is all that leaves the step.
        (LossHeadSpec::VanRossum { .. }, Some(err)) => HeadStepCredit {
            d_state: Some(err.clone()),
            d_spikes: None,
            d_readout_w: None,
        },
        // y_t = W_ro s_t ; L_t = 0.5 ||y_t - y*_t||^2:
        // d_y = y - y*, d_s = W_ro^T d_y, d_W_ro = d_y s_t^T.
        (LossHeadSpec::LocalMse { .. }, Some(err)) => {
            let w = readout_w.expect("weighted head");
            let d_s = w.t().dot(err);
            counters.add_mult(w.len());
            let mut d_w = Array2::zeros(w.dim());
            for c in 0..w.nrows() {
                for i in 0..w.ncols() {
                    d_w[[c, i]] = err[c] * s_top[i];
                }
            }
            counters.add_mult(w.len());
            HeadStepCredit {
                d_state: None,
                d_spikes: Some(d_s),
                d_readout_w: Some(d_w),
            }
        }
        _ => HeadStepCredit {
            d_state: None,
            d_spikes: None,
            d_readout_w: None,
        },
    }
}
