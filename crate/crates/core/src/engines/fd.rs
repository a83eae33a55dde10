//! Central-difference gradient oracle.
//!
//! Runs on the smooth-forward network variant (the surrogate is the actual
//! activation, no hard threshold, no reset), where the loss is a
//! differentiable function of the parameters and finite differences are
//! meaningful.

use crate::error::{Error, Result};
use crate::loss::{LossProgram, TrialTarget};
use crate::model::{Model, ParamGrads};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::ForwardMode;

use super::evaluate_loss;

/// Spec [OP] `finite_difference_oracle`: per-parameter central differences
/// `(L(theta + h) - L(theta - h)) / (2 h)` on the smooth-forward variant.
pub fn finite_difference_oracle(
    model: &Model,
    program: &LossProgram,
    raster: &SpikeRaster,
    target: &TrialTarget,
    h: f64,
) -> Result<ParamGrads> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    model.validate_against(program)?;
    let mut grads = model.zero_grads();
    let layout = model.param_layout();
    for (idx, (id, _off, (rows, cols))) in layout.entries.iter().enumerate() {
        for r in 0..*rows {
            for c in 0..*cols {
                let mut plus = model.clone();
                perturb(&mut plus, idx, r, c, h);
                let lp = evaluate_loss(&plus, program, raster, target, ForwardMode::SmoothSurrogate)?;
                let mut minus = model.clone();
                perturb(&mut minus, idx, r, c, -h);
                let lm =
                    evaluate_loss(&minus, program, raster, target, ForwardMode::SmoothSurrogate)?;
                grads.tensors[idx].1[[r, c]] = (lp - lm) / (2.0 * h);
            }
        }
        let _ = id;
    }
    Ok(grads)
}

fn perturb(model: &mut Model, tensor_idx: usize, r: usize, c: usize, delta: f64) {
    let mut tensors = model.tensors_mut();
    let (_, wm) = &mut tensors[tensor_idx];
    wm.values[[r, c]] += delta;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossHeadSpec;
    use crate::model::ModelBuilder;
    use crate::neuron::{InputScaleMode, LifParams};
    use ndarray::Array2;

    #[test]
    fn non_positive_step_rejected() {
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        let model = ModelBuilder::new(1, vec![1], lif).readout(1).build(1).unwrap();
        let program = LossProgram::new(LossHeadSpec::LocalMse { n_out: 1 });
        let raster = SpikeRaster::zeros(3, 1);
        let target = TrialTarget::Stream(Array2::zeros((3, 1)));
        assert!(matches!(
            finite_difference_oracle(&model, &program, &raster, &target, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn quadratic_single_parameter_matches_analytic() {
        // One input feeding one readout through a single smooth unit over a
        // single step: the loss is an explicit differentiable composition
        // whose derivative we can write in closed form.
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        let mut model = ModelBuilder::new(1, vec![1], lif).readout(1).build(1).unwrap();
        let w = 0.8;
        let w_ro = 1.3;
        model.net.layers[0].w.values[[0, 0]] = w;
        model.readout_w.as_mut().unwrap().values[[0, 0]] = w_ro;
        let program = LossProgram::new(LossHeadSpec::LocalMse { n_out: 1 });
        let mut raster = SpikeRaster::zeros(1, 1);
        raster.data[[0, 0]] = 1.0;
        let y_star = 0.9;
        let target = TrialTarget::Stream(Array2::from_elem((1, 1), y_star));

        let fd = finite_difference_oracle(&model, &program, &raster, &target, 1e-6).unwrap();
        // u1 = w, s1 = sigma(u1), y = w_ro * s1, L = 0.5 (y - y*)^2.
        let s = model.net.surrogate;
        let theta = 1.0;
        let s1 = s.smooth_activation(w, theta);
        let y = w_ro * s1;
        let dw = (y - y_star) * w_ro * s.deriv(w, theta);
        let dro = (y - y_star) * s1;
        assert!((fd.get("layer0.w").unwrap()[[0, 0]] - dw).abs() < 1e-8);
        assert!((fd.get("readout.w").unwrap()[[0, 0]] - dro).abs() < 1e-8);
    }
}
