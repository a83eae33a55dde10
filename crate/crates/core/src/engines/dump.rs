//! Gradient dumps for cross-engine and cross-run comparison: JSON with
//! deterministic key ordering and full double-precision round-trip values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamGrads;

use super::{EngineKind, GradientReport};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorDump {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized gradient set, keyed by tensor name (sorted).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradientDump {
    pub engine: String,
    pub seed: u64,
    pub spec_hash: String,
    pub tensors: BTreeMap<String, TensorDump>,
}

impl GradientDump {
    pub fn from_report(report: &GradientReport, seed: u64, spec_hash: &str) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in &report.grads.tensors {
            tensors.insert(
                name.clone(),
                TensorDump {
                    shape: vec![t.nrows(), t.ncols()],
                    data: t.iter().cloned().collect(),
                },
            );
        }
        GradientDump {
            engine: report.engine.name().to_string(),
            seed,
            spec_hash: spec_hash.to_string(),
            tensors,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Format(format!("bad gradient dump: {e}")))
    }

    pub fn to_grads(&self) -> ParamGrads {
        ParamGrads {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    (
                        name.clone(),
                        ndarray::Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                            .expect("dump shape consistent"),
                    )
                })
                .collect(),
        }
    }

    pub fn engine_kind(&self) -> Option<EngineKind> {
        match self.engine.as_str() {
            "bptt" => Some(EngineKind::Bptt),
            "rtrl_exact" => Some(EngineKind::RtrlExact),
            "rtrl_sparse" => Some(EngineKind::RtrlSparse),
            "mixed" => Some(EngineKind::Mixed),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dump_round_trips_exact_doubles() {
        let grads = ParamGrads {
            tensors: vec![
                ("layer0.w".into(), array![[0.1 + 0.2, -1e-17], [3.5, 0.0]]),
                ("readout.w".into(), array![[f64::MIN_POSITIVE, 1.0 / 3.0]]),
            ],
        };
        let report = GradientReport {
            engine: EngineKind::Bptt,
            loss: 0.5,
            grads,
            peak_memory_elements: 10,
            scalar_mult_count: 20,
            trace_mode: None,
        };
        let dump = GradientDump::from_report(&report, 42, "deadbeef");
        let json = dump.to_json();
        let back = GradientDump::from_json(&json).unwrap();
        assert_eq!(dump, back);
        assert_eq!(back.to_grads().tensors[0].1[[0, 0]], 0.1 + 0.2);
        // Keys are sorted deterministically.
        let first = json.find("layer0.w").unwrap();
        let second = json.find("readout.w").unwrap();
        assert!(first < second);
    }
}
