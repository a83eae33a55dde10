//! A trainable model: the hidden-layer network plus optional readout
//! weights, with a flat parameter layout shared by all gradient engines.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossProgram;
use crate::neuron::{LayerSpec, NetworkSpec, WeightMat};
use crate::util::seeded_rng;

/// Network plus the readout weight matrix owned by weighted loss heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub net: NetworkSpec,
    /// `n_out x k_top`; `None` for heads without readout weights.
    pub readout_w: Option<WeightMat>,
}

/// Identifies one parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    /// Feed-forward weights of layer `l`.
    W(usize),
    /// Recurrent weights of layer `l`.
    V(usize),
    /// Readout weights.
    Readout,
}

impl TensorId {
    pub fn name(&self) -> String {
        match self {
            TensorId::W(l) => format!("layer{l}.w"),
            TensorId::V(l) => format!("layer{l}.v"),
            TensorId::Readout => "readout.w".to_string(),
        }
    }
}

/// Flat layout of all trainable tensors: `[W0, V0, W1, V1, ..., readout]`,
/// each tensor row-major.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<(TensorId, usize, (usize, usize))>,
    pub total: usize,
}

impl ParamLayout {
    pub fn offset_of(&self, id: TensorId) -> Option<(usize, (usize, usize))> {
        self.entries
            .iter()
            .find(|(tid, _, _)| *tid == id)
            .map(|(_, off, shape)| (*off, *shape))
    }

    /// Flat index of element `(r, c)` of tensor `id`.
    pub fn index(&self, id: TensorId, r: usize, c: usize) -> usize {
        let (off, (_rows, cols)) = self.offset_of(id).expect("tensor present");
        off + r * cols + c
    }
}

/// Per-tensor gradients mirroring the model's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl ParamGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in &self.tensors {
            out.extend(t.iter().cloned());
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }
}

/// Relative error between two gradient sets:
/// `max|a-b| / max(max|a|, max|b|, 1e-30)` over all tensors jointly.
pub fn grad_relative_error(a: &ParamGrads, b: &ParamGrads) -> f64 {
    crate::util::relative_error(&a.flat(), &b.flat())
}

impl Model {
    pub fn new(net: NetworkSpec, readout_w: Option<WeightMat>) -> Result<Self> {
        net.validate()?;
        Ok(Model { net, readout_w })
    }

    /// Gaussian initialization with standard deviation `1/sqrt(fan_in)` per
    /// tensor, seeded.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        let mut fill = |wm: &mut WeightMat| {
            let fan_in = wm.values.ncols().max(1) as f64;
            let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).unwrap();
            for v in wm.values.iter_mut() {
                *v = dist.sample(&mut rng);
            }
            wm.apply_mask();
        };
        for layer in &mut self.net.layers {
            fill(&mut layer.w);
            if let Some(v) = &mut layer.v {
                fill(v);
            }
        }
        if let Some(ro) = &mut self.readout_w {
            fill(ro);
        }
    }

    /// Multiply every weight tensor by `gain` (used to control initial
    /// firing levels in fixtures).
    pub fn scale_weights(&mut self, gain: f64) {
        for layer in &mut self.net.layers {
            layer.w.values.mapv_inplace(|x| x * gain);
            if let Some(v) = &mut layer.v {
                v.values.mapv_inplace(|x| x * gain);
            }
        }
        if let Some(ro) = &mut self.readout_w {
            ro.values.mapv_inplace(|x| x * gain);
        }
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut off = 0usize;
        for (l, layer) in self.net.layers.iter().enumerate() {
            let shape = layer.w.shape();
            entries.push((TensorId::W(l), off, shape));
            off += shape.0 * shape.1;
            if let Some(v) = &layer.v {
                let shape = v.shape();
                entries.push((TensorId::V(l), off, shape));
                off += shape.0 * shape.1;
            }
        }
        if let Some(ro) = &self.readout_w {
            let shape = ro.shape();
            entries.push((TensorId::Readout, off, shape));
            off += shape.0 * shape.1;
        }
        ParamLayout {
            entries,
            total: off,
        }
    }

    /// Zero gradients with the model's tensor shapes.
    pub fn zero_grads(&self) -> ParamGrads {
        let layout = self.param_layout();
        ParamGrads {
            tensors: layout
                .entries
                .iter()
                .map(|(id, _, shape)| (id.name(), Array2::zeros(*shape)))
                .collect(),
        }
    }

    /// Convert a flat gradient vector (in layout order) to per-tensor form.
    pub fn grads_from_flat(&self, flat: &Array1<f64>) -> ParamGrads {
        let layout = self.param_layout();
        assert_eq!(flat.len(), layout.total);
        ParamGrads {
            tensors: layout
                .entries
                .iter()
                .map(|(id, off, (r, c))| {
                    let slice = flat.slice(ndarray::s![*off..*off + r * c]);
                    (
                        id.name(),
                        Array2::from_shape_vec((*r, *c), slice.to_vec()).unwrap(),
                    )
                })
                .collect(),
        }
    }

    /// Mutable references to the parameter tensors in layout order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorId, &mut WeightMat)> {
        let mut out: Vec<(TensorId, &mut WeightMat)> = Vec::new();
        for (l, layer) in self.net.layers.iter_mut().enumerate() {
            out.push((TensorId::W(l), &mut layer.w));
            if let Some(v) = &mut layer.v {
                out.push((TensorId::V(l), v));
            }
        }
        if let Some(ro) = &mut self.readout_w {
            out.push((TensorId::Readout, ro));
        }
        out
    }

    /// Parameter tensors in layout order.
    pub fn tensors(&self) -> Vec<(TensorId, &WeightMat)> {
        let mut out: Vec<(TensorId, &WeightMat)> = Vec::new();
        for (l, layer) in self.net.layers.iter().enumerate() {
            out.push((TensorId::W(l), &layer.w));
            if let Some(v) = &layer.v {
                out.push((TensorId::V(l), v));
            }
        }
        if let Some(ro) = &self.readout_w {
            out.push((TensorId::Readout, ro));
        }
        out
    }

    /// Check that the model provides what the loss program needs.
    pub fn validate_against(&self, program: &LossProgram) -> Result<()> {
        self.net.validate()?;
        program.validate()?;
        let k_top = self.net.k_top();
        let n_out = program.head.n_out(k_top);
        match (&self.readout_w, program.head.weighted()) {
            (None, true) => Err(Error::Config(
                "loss head needs readout weights but the model has none".into(),
            )),
            (Some(ro), true) => {
                if ro.shape() != (n_out, k_top) {
                    Err(Error::Shape(format!(
                        "readout weights {:?} != ({n_out}, {k_top})",
                        ro.shape()
                    )))
                } else {
                    Ok(())
                }
            }
            (Some(_), false) => Err(Error::Config(
                "model has readout weights but the loss head takes none".into(),
            )),
            (None, false) => Ok(()),
        }
    }

    /// Stable hash of the structural description (dimensions, neuron
    /// parameters, mode — not the weight values).
    pub fn spec_hash(&self) -> String {
        #[derive(Serialize)]
        struct LayerDigest {
            k: usize,
            m: usize,
            w_shape: (usize, usize),
            v_shape: Option<(usize, usize)>,
            beta: f64,
            threshold: f64,
            scale_mode: String,
        }
        #[derive(Serialize)]
        struct Digestable {
            n_in: usize,
            mode: String,
            layers: Vec<LayerDigest>,
            readout_shape: Option<(usize, usize)>,
            surrogate: (String, f64),
        }
        let d = Digestable {
            n_in: self.net.n_in,
            mode: format!("{:?}", self.net.mode),
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerDigest {
                    k: l.k,
                    m: l.m(),
                    w_shape: l.w.shape(),
                    v_shape: l.v.as_ref().map(|v| v.shape()),
                    beta: l.lif.beta,
                    threshold: l.lif.threshold,
                    scale_mode: format!("{:?}", l.lif.input_scale_mode),
                })
                .collect(),
            readout_shape: self.readout_w.as_ref().map(|r| r.shape()),
            surrogate: (
                format!("{:?}", self.net.surrogate.kind),
                self.net.surrogate.slope,
            ),
        };
        let json = serde_json::to_string(&d).expect("digest serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builder for the common dense stacked model used by tests, fixtures and
/// the harness.
pub struct ModelBuilder {
    pub n_in: usize,
    pub hidden: Vec<usize>,
    pub lif: crate::neuron::LifParams,
    pub surrogate: crate::neuron::SurrogateSpec,
    pub mode: crate::neuron::ArchMode,
    pub n_out: Option<usize>,
}

impl ModelBuilder {
    pub fn new(n_in: usize, hidden: Vec<usize>, lif: crate::neuron::LifParams) -> Self {
        ModelBuilder {
            n_in,
            hidden,
            lif,
            surrogate: crate::neuron::SurrogateSpec::default(),
            mode: crate::neuron::ArchMode::Ff,
            n_out: None,
        }
    }

    pub fn mode(mut self, mode: crate::neuron::ArchMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn surrogate(mut self, surrogate: crate::neuron::SurrogateSpec) -> Self {
        self.surrogate = surrogate;
        self
    }

    /// Attach a weighted readout with `n_out` units.
    pub fn readout(mut self, n_out: usize) -> Self {
        self.n_out = Some(n_out);
        self
    }

    pub fn build(self, seed: u64) -> Result<Model> {
        let mut layers = Vec::new();
        let mut n_prev = self.n_in;
        for &k in &self.hidden {
            let v = if self.mode == crate::neuron::ArchMode::Ff {
                None
            } else {
                Some(WeightMat::dense(Array2::zeros((k, k))))
            };
            layers.push(LayerSpec {
                k,
                w: WeightMat::dense(Array2::zeros((k, n_prev))),
                v,
                lif: self.lif.clone(),
                compartments: None,
            });
            n_prev = k;
        }
        let readout_w = self
            .n_out
            .map(|n_out| WeightMat::dense(Array2::zeros((n_out, n_prev))));
        let net = NetworkSpec {
            n_in: self.n_in,
            layers,
            surrogate: self.surrogate,
            mode: self.mode,
        };
        let mut model = Model::new(net, readout_w)?;
        model.init_weights(seed);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{ArchMode, InputScaleMode, LifParams};

    fn builder() -> ModelBuilder {
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        ModelBuilder::new(3, vec![4], lif)
    }

    #[test]
    fn layout_covers_all_tensors() {
        let model = builder().mode(ArchMode::Rc).readout(2).build(1).unwrap();
        let layout = model.param_layout();
        // W: 4x3 = 12, V: 4x4 = 16, readout: 2x4 = 8.
        assert_eq!(layout.total, 36);
        assert_eq!(layout.index(TensorId::W(0), 0, 0), 0);
        assert_eq!(layout.index(TensorId::V(0), 0, 0), 12);
        assert_eq!(layout.index(TensorId::Readout, 1, 3), 12 + 16 + 7);
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let a = builder().mode(ArchMode::Rc).readout(2).build(7).unwrap();
        let b = builder().mode(ArchMode::Rc).readout(2).build(7).unwrap();
        let c = builder().mode(ArchMode::Rc).readout(2).build(8).unwrap();
        assert_eq!(a.net.layers[0].w.values, b.net.layers[0].w.values);
        assert_ne!(a.net.layers[0].w.values, c.net.layers[0].w.values);
    }

    #[test]
    fn spec_hash_tracks_structure_not_weights() {
        let a = builder().mode(ArchMode::Rc).readout(2).build(7).unwrap();
        let b = builder().mode(ArchMode::Rc).readout(2).build(8).unwrap();
        assert_eq!(a.spec_hash(), b.spec_hash());
        let c = builder().mode(ArchMode::Rd).readout(2).build(7).unwrap();
        assert_ne!(a.spec_hash(), c.spec_hash());
    }

    #[test]
    fn grads_round_trip_through_flat() {
        let model = builder().mode(ArchMode::Rc).readout(2).build(3).unwrap();
        let layout = model.param_layout();
        let flat = Array1::from_iter((0..layout.total).map(|i| i as f64 * 0.5));
        let grads = model.grads_from_flat(&flat);
        assert_eq!(grads.flat(), flat.to_vec());
        assert_eq!(grads.get("layer0.v").unwrap()[[0, 0]], 6.0);
    }
}
