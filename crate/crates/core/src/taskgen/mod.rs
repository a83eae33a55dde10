//! Deterministic, seeded generators for desk-scale benchmark tasks, plus
//! dataset splits and bundle import/export.
//!
//! Three task families:
//! * smooth-random-manifold spike-timing classification (one spike per
//!   input neuron whose timing is a smooth random function of latent
//!   manifold coordinates);
//! * latency encoding of static value patterns (time-to-first-spike);
//! * a temporal-memory stress task: a class cue followed by a silence gap
//!   with background drive, queried at the end of the trial.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::raster::SpikeRaster;
use crate::util::{derive_seed, seeded_rng};

/// Dataset split tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A labeled set of spike-raster trials with disjoint split tags.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub rasters: Vec<SpikeRaster>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.rasters.first().map(|r| r.n).unwrap_or(0)
    }

    pub fn t_len(&self) -> usize {
        self.rasters.first().map(|r| r.t_len).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map(|m| m + 1).unwrap_or(0)
    }

    /// Assign split tags by a seeded shuffle with the given fractions
    /// (test gets the remainder).
    pub fn assign_splits(&mut self, train_frac: f64, valid_frac: f64, seed: u64) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeded_rng(derive_seed(seed, 0x5711));
        order.shuffle(&mut rng);
        let n_train = (train_frac * n as f64).round() as usize;
        let n_valid = (valid_frac * n as f64).round() as usize;
        for (rank, &idx) in order.iter().enumerate() {
            self.splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
}

// ---------------------------------------------------------------------
// Smooth random manifold task
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandmanSpec {
    pub n_classes: usize,
    pub manifold_dim: usize,
    /// Number of input neurons (one spike each).
    pub embedding_dim: usize,
    /// Number of frequency components per latent dimension.
    pub smoothness: usize,
    pub samples_per_class: usize,
    /// Trial duration (ms) and grid step (ms); spike times are quantized to
    /// the grid.
    pub time_window_ms: f64,
    pub dt_ms: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for RandmanSpec {
    fn default() -> Self {
        // Desk-scale defaults: a full architecture sweep stays in the
        // minutes range on one core.
        RandmanSpec {
            n_classes: 4,
            manifold_dim: 2,
            embedding_dim: 20,
            smoothness: 1,
            samples_per_class: 250,
            time_window_ms: 50.0,
            dt_ms: 1.0,
            seed: 42,
            train_frac: 0.6,
            valid_frac: 0.2,
        }
    }
}

impl RandmanSpec {
    pub fn t_len(&self) -> usize {
        (self.time_window_ms / self.dt_ms).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.manifold_dim == 0 {
            return Err(Error::Config("manifold_dim must be >= 1".into()));
        }
        if self.embedding_dim < self.manifold_dim {
            return Err(Error::Config(format!(
                "embedding_dim {} < manifold_dim {}",
                self.embedding_dim, self.manifold_dim
            )));
        }
        if self.time_window_ms < self.dt_ms {
            return Err(Error::Config(format!(
                "time window {} ms smaller than dt {} ms",
                self.time_window_ms, self.dt_ms
            )));
        }
        if self.n_classes == 0 || self.samples_per_class == 0 || self.smoothness == 0 {
            return Err(Error::Config(
                "n_classes, samples_per_class and smoothness must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class random Fourier coefficients of the spike-time maps; kept so
/// datasets can be re-derived and verified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandmanCoefficients {
    /// `[class][neuron][dim][freq]` sine and cosine amplitudes.
    pub sin: Vec<Vec<Vec<Vec<f64>>>>,
    pub cos: Vec<Vec<Vec<Vec<f64>>>>,
}

impl RandmanCoefficients {
    fn generate(spec: &RandmanSpec) -> Self {
        let mut sin = Vec::new();
        let mut cos = Vec::new();
        for c in 0..spec.n_classes {
            let mut rng = seeded_rng(derive_seed(spec.seed, 0x524d + c as u64));
            let mut class_sin = Vec::new();
            let mut class_cos = Vec::new();
            for _i in 0..spec.embedding_dim {
                let mut ns = Vec::new();
                let mut nc = Vec::new();
                for _d in 0..spec.manifold_dim {
                    let mut fs = Vec::new();
                    let mut fc = Vec::new();
                    for f in 1..=spec.smoothness {
                        // Amplitudes decay with frequency, keeping the maps
                        // smooth.
                        let scale = 1.0 / f as f64;
                        fs.push(scale * gaussian(&mut rng));
                        fc.push(scale * gaussian(&mut rng));
                    }
                    ns.push(fs);
                    nc.push(fc);
                }
                class_sin.push(ns);
                class_cos.push(nc);
            }
            sin.push(class_sin);
            cos.push(class_cos);
        }
        RandmanCoefficients { sin, cos }
    }

    /// Normalized spike-time coordinate in [0, 1] for one neuron of one
    /// class at latent position `x`.
    pub fn value(&self, class: usize, neuron: usize, x: &[f64]) -> f64 {
        let sin = &self.sin[class][neuron];
        let cos = &self.cos[class][neuron];
        let mut g = 0.0;
        let mut g_max = 0.0;
        for (d, &xd) in x.iter().enumerate() {
            for f in 0..sin[d].len() {
                let omega = 2.0 * std::f64::consts::PI * (f + 1) as f64;
                g += sin[d][f] * (omega * xd).sin() + cos[d][f] * (omega * xd).cos();
                g_max += sin[d][f].abs() + cos[d][f].abs();
            }
        }
        if g_max == 0.0 {
            0.5
        } else {
            0.5 + g / (2.0 * g_max)
        }
    }

    /// Grid-quantized spike time.
    pub fn spike_step(&self, class: usize, neuron: usize, x: &[f64], t_len: usize) -> usize {
        let v = self.value(class, neuron, x);
        ((v * (t_len - 1) as f64).round_ties_even() as usize).min(t_len - 1)
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generated manifold dataset with its provenance.
#[derive(Debug, Clone)]
pub struct RandmanData {
    pub trials: TrialSet,
    pub coefficients: RandmanCoefficients,
    /// Latent manifold coordinates per trial.
    pub latents: Vec<Vec<f64>>,
}

/// Spec [OP] `randman_generate`.
pub fn randman_generate(spec: &RandmanSpec) -> Result<RandmanData> {
    spec.validate()?;
    let t_len = spec.t_len();
    let coefficients = RandmanCoefficients::generate(spec);
    let mut rasters = Vec::new();
    let mut labels = Vec::new();
    let mut latents = Vec::new();
    for c in 0..spec.n_classes {
        for s in 0..spec.samples_per_class {
            let mut rng = seeded_rng(derive_seed(
                spec.seed,
                0x53_0000 + (c * spec.samples_per_class + s) as u64,
            ));
            let x: Vec<f64> = (0..spec.manifold_dim).map(|_| rng.gen::<f64>()).collect();
            let mut raster = SpikeRaster::zeros(t_len, spec.embedding_dim);
            for i in 0..spec.embedding_dim {
                let t = coefficients.spike_step(c, i, &x, t_len);
                raster.data[[t, i]] = 1.0;
            }
            rasters.push(raster);
            labels.push(c);
            latents.push(x);
        }
    }
    let n = rasters.len();
    let mut trials = TrialSet {
        rasters,
        labels,
        splits: vec![Split::Train; n],
    };
    trials.assign_splits(spec.train_frac, spec.valid_frac, spec.seed);
    Ok(RandmanData {
        trials,
        coefficients,
        latents,
    })
}

// ---------------------------------------------------------------------
// Latency encoding
// ---------------------------------------------------------------------

/// Spec [OP] `latency_encode`: neuron `i` spikes once at
/// `round_ties_even((1 - v_i) * (t_max - 1))`; optionally `v = 0` emits no
/// spike at all.
pub fn latency_encode(values: &[f64], t_max: usize, zero_means_silent: bool) -> Result<SpikeRaster> {
    if t_max == 0 {
        return Err(Error::Domain("t_max must be positive".into()));
    }
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("value {v} outside [0, 1]")));
        }
    }
    let mut raster = SpikeRaster::zeros(t_max, values.len());
    for (i, &v) in values.iter().enumerate() {
        if v == 0.0 && zero_means_silent {
            continue;
        }
        let t = ((1.0 - v) * (t_max - 1) as f64).round_ties_even() as usize;
        raster.data[[t.min(t_max - 1), i]] = 1.0;
    }
    Ok(raster)
}

// ---------------------------------------------------------------------
// Temporal-memory stress task
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryTaskSpec {
    /// Silent steps between the cue window and the query window.
    pub gap: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Cue channels (channel 0 is a metronome that fires every step).
    pub n_cue_channels: usize,
    pub cue_steps: usize,
    /// Query window length; the loss is evaluated over the last
    /// `query_steps` steps.
    pub query_steps: usize,
    pub trials_per_class: usize,
    /// Per-cell probability of flipping a cue cell per trial.
    pub jitter_prob: f64,
    /// Per-cell probability of a distractor spike on cue channels during
    /// the gap and query windows.
    pub noise_prob: f64,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for MemoryTaskSpec {
    fn default() -> Self {
        MemoryTaskSpec {
            gap: 50,
            n_classes: 2,
            seed: 7,
            n_cue_channels: 8,
            cue_steps: 10,
            query_steps: 10,
            trials_per_class: 60,
            jitter_prob: 0.02,
            noise_prob: 0.02,
            train_frac: 0.6,
            valid_frac: 0.2,
        }
    }
}

impl MemoryTaskSpec {
    pub fn t_len(&self) -> usize {
        self.cue_steps + self.gap + self.query_steps
    }

    pub fn n_inputs(&self) -> usize {
        self.n_cue_channels + 1
    }

    /// 1-based inclusive readout window over the query steps.
    pub fn readout_window(&self) -> (usize, usize) {
        (self.cue_steps + self.gap + 1, self.t_len())
    }

    /// The class cue patterns, pairwise distinct by construction.
    pub fn cue_patterns(&self) -> Vec<Array2<f64>> {
        let mut patterns: Vec<Array2<f64>> = Vec::new();
        for c in 0..self.n_classes {
            let mut salt = 0u64;
            loop {
                let mut rng = seeded_rng(derive_seed(self.seed, 0xc0e + (c as u64) * 7919 + salt));
                let p = Array2::from_shape_fn((self.cue_steps, self.n_cue_channels), |_| {
                    (rng.gen::<f64>() < 0.5) as u8 as f64
                });
                if patterns.iter().all(|q| q != &p) {
                    patterns.push(p);
                    break;
                }
                salt += 1;
            }
        }
        patterns
    }
}

/// Spec [OP] `memory_stress_task` with library defaults.
pub fn memory_stress_task(gap: usize, n_classes: usize, seed: u64) -> Result<TrialSet> {
    memory_stress_task_with(&MemoryTaskSpec {
        gap,
        n_classes,
        seed,
        ..MemoryTaskSpec::default()
    })
}

pub fn memory_stress_task_with(spec: &MemoryTaskSpec) -> Result<TrialSet> {
    if spec.n_classes == 0 || spec.n_cue_channels == 0 || spec.cue_steps == 0 {
        return Err(Error::Config(
            "memory task needs at least one class, channel and cue step".into(),
        ));
    }
    let t_len = spec.t_len();
    let patterns = spec.cue_patterns();
    let mut rasters = Vec::new();
    let mut labels = Vec::new();
    for c in 0..spec.n_classes {
        for trial in 0..spec.trials_per_class {
            let mut rng = seeded_rng(derive_seed(
                spec.seed,
                0x4d_0000 + (c * spec.trials_per_class + trial) as u64,
            ));
            let mut raster = SpikeRaster::zeros(t_len, spec.n_inputs());
            for t in 0..t_len {
                raster.data[[t, 0]] = 1.0; // metronome
            }
            for t in 0..spec.cue_steps {
                for i in 0..spec.n_cue_channels {
                    let mut bit = patterns[c][[t, i]];
                    if rng.gen::<f64>() < spec.jitter_prob {
                        bit = 1.0 - bit;
                    }
                    raster.data[[t, i + 1]] = bit;
                }
            }
            for t in spec.cue_steps..t_len {
                for i in 0..spec.n_cue_channels {
                    if rng.gen::<f64>() < spec.noise_prob {
                        raster.data[[t, i + 1]] = 1.0;
                    }
                }
            }
            rasters.push(raster);
            labels.push(c);
        }
    }
    let n = rasters.len();
    let mut trials = TrialSet {
        rasters,
        labels,
        splits: vec![Split::Train; n],
    };
    trials.assign_splits(spec.train_frac, spec.valid_frac, spec.seed);
    Ok(trials)
}

// ---------------------------------------------------------------------
// Dataset bundle I/O
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u32,
    pub generator: String,
    pub seed: u64,
    pub n_trials: usize,
    pub t_len: usize,
    pub n_inputs: usize,
    pub n_classes: usize,
    /// Generator-specific parameters, echoed verbatim.
    pub spec: serde_json::Value,
    /// Trial indices per split.
    pub splits: BTreeMap<String, Vec<usize>>,
}

/// Write a dataset bundle: `meta.json`, `labels.txt`, `trials/trial_N.txt`.
pub fn write_bundle(
    dir: &Path,
    trials: &TrialSet,
    generator: &str,
    seed: u64,
    spec_json: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("trials"))?;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), trials.indices(Split::Train));
    splits.insert("valid".to_string(), trials.indices(Split::Valid));
    splits.insert("test".to_string(), trials.indices(Split::Test));
    let meta = BundleMeta {
        format_version: 1,
        generator: generator.to_string(),
        seed,
        n_trials: trials.len(),
        t_len: trials.t_len(),
        n_inputs: trials.n_inputs(),
        n_classes: trials.n_classes(),
        spec: spec_json,
        splits,
    };
    let mut f = std::fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
    let mut labels = std::fs::File::create(dir.join("labels.txt"))?;
    for (i, label) in trials.labels.iter().enumerate() {
        writeln!(labels, "{i} {label}")?;
    }
    for (i, raster) in trials.rasters.iter().enumerate() {
        let path = dir.join("trials").join(format!("trial_{i:05}.txt"));
        std::fs::write(path, raster.to_text())?;
    }
    Ok(())
}

/// Read a dataset bundle back; rejects unknown format versions.
pub fn read_bundle(dir: &Path) -> Result<(TrialSet, BundleMeta)> {
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: BundleMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("bad meta.json: {e}")))?;
    if meta.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            meta.format_version
        )));
    }
    let labels_text = std::fs::read_to_string(dir.join("labels.txt"))?;
    let mut labels = vec![0usize; meta.n_trials];
    for line in labels_text.lines() {
        let mut it = line.split_whitespace();
        let idx: usize = it
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::Format("bad labels.txt line".into()))?;
        let label: usize = it
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::Format("bad labels.txt line".into()))?;
        if idx >= meta.n_trials {
            return Err(Error::Format(format!("label index {idx} out of range")));
        }
        labels[idx] = label;
    }
    let mut rasters = Vec::with_capacity(meta.n_trials);
    for i in 0..meta.n_trials {
        let path = dir.join("trials").join(format!("trial_{i:05}.txt"));
        let text = std::fs::read_to_string(path)?;
        rasters.push(SpikeRaster::from_text(&text)?);
    }
    let mut splits = vec![Split::Train; meta.n_trials];
    for (name, idxs) in &meta.splits {
        let tag = match name.as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(Error::Format(format!("unknown split tag {other:?}"))),
        };
        for &i in idxs {
            if i >= meta.n_trials {
                return Err(Error::Format(format!("split index {i} out of range")));
            }
            splits[i] = tag;
        }
    }
    Ok((
        TrialSet {
            rasters,
            labels,
            splits,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randman_is_deterministic_and_one_spike_per_neuron() {
        let spec = RandmanSpec {
            samples_per_class: 5,
            ..RandmanSpec::default()
        };
        let a = randman_generate(&spec).unwrap();
        let b = randman_generate(&spec).unwrap();
        assert_eq!(a.trials.rasters, b.trials.rasters);
        assert_eq!(a.trials.labels, b.trials.labels);
        for raster in &a.trials.rasters {
            for i in 0..raster.n {
                let spikes: f64 = (0..raster.t_len).map(|t| raster.data[[t, i]]).sum();
                assert_eq!(spikes, 1.0, "exactly one spike per input neuron");
            }
        }
    }

    #[test]
    fn randman_rasters_regenerate_from_stored_coefficients() {
        let spec = RandmanSpec {
            n_classes: 2,
            samples_per_class: 8,
            smoothness: 1,
            manifold_dim: 1,
            embedding_dim: 6,
            ..RandmanSpec::default()
        };
        let data = randman_generate(&spec).unwrap();
        let t_len = spec.t_len();
        for (idx, raster) in data.trials.rasters.iter().enumerate() {
            let class = data.trials.labels[idx];
            let x = &data.latents[idx];
            for i in 0..spec.embedding_dim {
                let t = data.coefficients.spike_step(class, i, x, t_len);
                assert_eq!(raster.data[[t, i]], 1.0);
            }
        }
    }

    #[test]
    fn randman_identical_latents_identical_rasters() {
        let spec = RandmanSpec {
            n_classes: 1,
            samples_per_class: 3,
            ..RandmanSpec::default()
        };
        let data = randman_generate(&spec).unwrap();
        // All labels are class 0.
        assert!(data.trials.labels.iter().all(|&l| l == 0));
        // Rebuild a raster from a stored latent; identical coordinates give
        // identical rasters.
        let t_len = spec.t_len();
        let x = data.latents[1].clone();
        let mut rebuilt = SpikeRaster::zeros(t_len, spec.embedding_dim);
        for i in 0..spec.embedding_dim {
            rebuilt.data[[data.coefficients.spike_step(0, i, &x, t_len), i]] = 1.0;
        }
        assert_eq!(rebuilt, data.trials.rasters[1]);
    }

    #[test]
    fn randman_rejects_bad_windows() {
        let spec = RandmanSpec {
            time_window_ms: 0.5,
            dt_ms: 1.0,
            ..RandmanSpec::default()
        };
        assert!(randman_generate(&spec).is_err());
    }

    #[test]
    fn latency_encoding_examples() {
        // v = 1 spikes immediately.
        let r = latency_encode(&[1.0], 100, false).unwrap();
        assert_eq!(r.data[[0, 0]], 1.0);
        // v = 0.5 at t_max = 100: (1 - 0.5) * 99 = 49.5, ties-to-even -> 50.
        let r = latency_encode(&[0.5], 100, false).unwrap();
        assert_eq!(r.data[[50, 0]], 1.0);
        assert_eq!(r.count_events(), 1);
        // v = 0 with the silent flag emits nothing.
        let r = latency_encode(&[0.0], 100, true).unwrap();
        assert_eq!(r.count_events(), 0);
        // Out-of-range values are a domain error.
        assert!(latency_encode(&[1.2], 10, false).is_err());
    }

    #[test]
    fn memory_task_structure() {
        let trials = memory_stress_task(20, 3, 11).unwrap();
        let spec = MemoryTaskSpec {
            gap: 20,
            n_classes: 3,
            seed: 11,
            ..MemoryTaskSpec::default()
        };
        assert_eq!(trials.t_len(), spec.t_len());
        assert_eq!(trials.n_classes(), 3);
        // Metronome fires every step.
        for raster in trials.rasters.iter().take(5) {
            for t in 0..raster.t_len {
                assert_eq!(raster.data[[t, 0]], 1.0);
            }
        }
        // Cue patterns are pairwise distinct.
        let patterns = spec.cue_patterns();
        for a in 0..patterns.len() {
            for b in (a + 1)..patterns.len() {
                assert_ne!(patterns[a], patterns[b]);
            }
        }
        // gap = 0 degenerates to immediate classification: query window
        // directly follows the cue.
        let spec0 = MemoryTaskSpec {
            gap: 0,
            ..spec.clone()
        };
        assert_eq!(spec0.readout_window().0, spec0.cue_steps + 1);
    }

    #[test]
    fn splits_are_disjoint_and_proportional() {
        let trials = memory_stress_task(5, 2, 3).unwrap();
        let train = trials.indices(Split::Train);
        let valid = trials.indices(Split::Valid);
        let test = trials.indices(Split::Test);
        assert_eq!(train.len() + valid.len() + test.len(), trials.len());
        let expected_train = (0.6 * trials.len() as f64).round() as usize;
        assert!((train.len() as i64 - expected_train as i64).abs() <= 1);
        // Determinism of the split assignment.
        let again = memory_stress_task(5, 2, 3).unwrap();
        assert_eq!(trials.splits, again.splits);
    }

    #[test]
    fn events_stay_inside_raster_bounds() {
        let data = randman_generate(&RandmanSpec {
            samples_per_class: 4,
            ..RandmanSpec::default()
        })
        .unwrap();
        for raster in &data.trials.rasters {
            for (t, i) in raster.events() {
                assert!(t < raster.t_len && i < raster.n);
            }
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = memory_stress_task(4, 2, 5).unwrap();
        write_bundle(
            dir.path(),
            &trials,
            "memory_stress",
            5,
            serde_json::json!({"gap": 4}),
        )
        .unwrap();
        let (back, meta) = read_bundle(dir.path()).unwrap();
        assert_eq!(meta.format_version, 1);
        assert_eq!(back.labels, trials.labels);
        assert_eq!(back.splits, trials.splits);
        assert_eq!(back.rasters, trials.rasters);
    }

    #[test]
    fn bundle_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let trials = memory_stress_task(2, 2, 5).unwrap();
        write_bundle(dir.path(), &trials, "m", 5, serde_json::json!({})).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(meta_path, text.replace("\"format_version\": 1", "\"format_version\": 2"))
            .unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Format(_))));
    }
}
