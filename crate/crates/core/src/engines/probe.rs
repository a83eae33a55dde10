//! Complexity instrumentation: run an engine on a standardized probe
//! network and report its cost counters.

use ndarray::Array2;

use crate::error::Result;
use crate::loss::kernel::KernelSpec;
use crate::loss::{LossHeadSpec, LossProgram, TrialTarget};
use crate::model::{Model, ModelBuilder};
use crate::neuron::raster::SpikeRaster;
use crate::neuron::{ArchMode, InputScaleMode, LifParams};
use crate::util::seeded_rng;
use rand::Rng;

use super::{compute_gradient, EngineKind, GradOptions};

/// Probe configuration: a recurrently connected layer with `k` neurons and
/// `n` inputs, driven for `t_len` steps under a filtered-distance head.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSpec {
    pub k: usize,
    pub n: usize,
    pub t_len: usize,
    pub seed: u64,
}

/// Build the standard probe model (recurrent, unit drive) and its trial.
pub fn probe_setup(spec: ProbeSpec) -> Result<(Model, LossProgram, SpikeRaster, TrialTarget)> {
    let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit)?;
    let model = ModelBuilder::new(spec.n, vec![spec.k], lif)
        .mode(ArchMode::Rc)
        .build(spec.seed)?;
    let kernel = KernelSpec::Exponential { tau: 5.0, dt: 1.0 };
    let program = LossProgram::new(LossHeadSpec::VanRossum { kernel });
    let mut rng = seeded_rng(spec.seed ^ 0xabcd);
    let mut raster = SpikeRaster::zeros(spec.t_len, spec.n);
    for t in 0..spec.t_len {
        for i in 0..spec.n {
            if rng.gen::<f64>() < 0.3 {
                raster.data[[t, i]] = 1.0;
            }
        }
    }
    let target = TrialTarget::Stream(Array2::from_elem((spec.t_len, spec.k), 0.2));
    Ok((model, program, raster, target))
}

/// Spec [OP] `complexity_probe`: `(peak_memory_elements, scalar_mult_count)`
/// for one engine on the standard probe.
pub fn complexity_probe(engine: EngineKind, spec: ProbeSpec) -> Result<(u64, u64)> {
    let (model, program, raster, target) = probe_setup(spec)?;
    let report = compute_gradient(
        engine,
        &model,
        &program,
        &raster,
        &target,
        GradOptions::default(),
    )?;
    Ok((report.peak_memory_elements, report.scalar_mult_count))
}

/// One row of the benchmark sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScalingRow {
    pub engine: String,
    pub k: usize,
    pub t_len: usize,
    pub mem_elements: u64,
    pub mult_count: u64,
    pub wall_ms: f64,
}

/// Sweep engines over `k` (with `n = k`) and `t_len` grids, for the
/// benchmark report.
pub fn scaling_sweep(
    engines: &[EngineKind],
    ks: &[usize],
    ts: &[usize],
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &engine in engines {
        for &k in ks {
            for &t_len in ts {
                let spec = ProbeSpec {
                    k,
                    n: k,
                    t_len,
                    seed,
                };
                let started = std::time::Instant::now();
                let (mem, mult) = complexity_probe(engine, spec)?;
                rows.push(ScalingRow {
                    engine: engine.name().to_string(),
                    k,
                    t_len,
                    mem_elements: mem,
                    mult_count: mult,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
        }
    }
    Ok(rows)
}
