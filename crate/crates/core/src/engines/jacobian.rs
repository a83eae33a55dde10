//! Per-step Jacobian assembly and the single-layer influence recursions.
//!
//! These are the building blocks the forward-mode engines are made of,
//! exposed in dense form for direct inspection and testing. The state
//! Jacobian of one layer splits into an implicit part (block-diagonal
//! within-neuron transitions) and an explicit part (spike-mediated
//! recurrent coupling through `V`).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::{implicit_jacobian_dense, LayerState};

use super::{spike_deriv, GradOptions};

/// Dense per-step Jacobian pieces for a single layer.
#[derive(Debug, Clone)]
pub struct JacobianParts {
    /// `d u_t / d u_{t-1}` with spikes held fixed: block-diagonal,
    /// one `m x m` block per neuron.
    pub h_implicit: Array2<f64>,
    /// Spike-mediated recurrent part
    /// `gain * V * diag(sigma'(P u_{t-1})) * P`; zero when `V` is absent.
    pub h_explicit: Array2<f64>,
    /// Immediate drive per feed-forward weight column: `gain * s_in_{t-1}`.
    /// Column `j` of `W` contributes `f_w_input[j]` to its own row's state.
    pub f_w_input: Array1<f64>,
    /// Immediate drive per recurrent weight column, when `V` is present.
    pub f_v_input: Option<Array1<f64>>,
    pub m: usize,
    pub k: usize,
}

impl JacobianParts {
    /// Materialize the immediate-influence matrix `(m k) x p` where the
    /// layer's parameters are ordered `[W row-major, V row-major]`.
    pub fn f_dense(&self) -> Array2<f64> {
        let mk = self.h_implicit.nrows();
        let n = self.f_w_input.len();
        let kv = self.f_v_input.as_ref().map(|v| v.len()).unwrap_or(0);
        let p = mk * n + mk * kv;
        let mut f = Array2::zeros((mk, p));
        for r in 0..mk {
            for j in 0..n {
                f[[r, r * n + j]] = self.f_w_input[j];
            }
            if let Some(fv) = &self.f_v_input {
                for j in 0..kv {
                    f[[r, mk * n + r * kv + j]] = fv[j];
                }
            }
        }
        f
    }
}

/// Spec [OP] `assemble_jacobians`: dense Jacobian pieces for the first
/// layer of `model` at the given previous state. `s_in_prev` is the input
/// spike vector that fed this step. The explicit part reflects the actual
/// dynamics; engines decide whether to use it (it is skipped in
/// recurrent-detached mode and by the sparse engine).
pub fn assemble_jacobians(
    state_prev: &LayerState,
    s_in_prev: &Array1<f64>,
    model: &Model,
) -> Result<JacobianParts> {
    let layer = model
        .net
        .layers
        .first()
        .ok_or_else(|| Error::Config("model has no layers".into()))?;
    if state_prev.u.len() != layer.state_len() || state_prev.s.len() != layer.k {
        return Err(Error::Shape(format!(
            "state ({}, {}) does not match layer ({}, {})",
            state_prev.u.len(),
            state_prev.s.len(),
            layer.state_len(),
            layer.k
        )));
    }
    if s_in_prev.len() != layer.w.shape().1 {
        return Err(Error::Shape(format!(
            "input length {} != layer fan-in {}",
            s_in_prev.len(),
            layer.w.shape().1
        )));
    }
    let mk = layer.state_len();
    let gain = layer.lif.drive_gain();
    let h_implicit = implicit_jacobian_dense(layer);
    let h_explicit = match &layer.v {
        Some(v) => {
            let d = spike_deriv(layer, &model.net.surrogate, &state_prev.u);
            // gain * V * diag(sigma') * P: column i*m+sc of the result is
            // gain * V[:, i] * sigma'_i; all other columns are zero.
            let m = layer.m();
            let sc = layer.spike_compartment();
            let mut h = Array2::zeros((mk, mk));
            for i in 0..layer.k {
                for r in 0..mk {
                    h[[r, i * m + sc]] = gain * v.values[[r, i]] * d[i];
                }
            }
            h
        }
        None => Array2::zeros((mk, mk)),
    };
    Ok(JacobianParts {
        h_implicit,
        h_explicit,
        f_w_input: s_in_prev.mapv(|x| gain * x),
        f_v_input: layer.v.as_ref().map(|_| state_prev.s.mapv(|x| gain * x)),
        m: layer.m(),
        k: layer.k,
    })
}

/// Influence of every parameter on the current layer state, either as the
/// full dense matrix (exact forward mode) or restricted to the
/// block-diagonal support (sparse forward mode). Both variants store a
/// `(m k) x p` matrix here; the sparse variant's off-block entries are
/// exactly zero by construction and `nonzero_count` tracks the logical
/// occupancy.
#[derive(Debug, Clone)]
pub enum InfluenceStore {
    Exact {
        g: Array2<f64>,
    },
    Sparse {
        g: Array2<f64>,
        nonzero_count: usize,
    },
}

impl InfluenceStore {
    /// Fresh zero store (`G^0 = 0`).
    pub fn zeros_exact(mk: usize, p: usize) -> Self {
        InfluenceStore::Exact {
            g: Array2::zeros((mk, p)),
        }
    }

    pub fn zeros_sparse(mk: usize, p: usize) -> Self {
        InfluenceStore::Sparse {
            g: Array2::zeros((mk, p)),
            nonzero_count: 0,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        match self {
            InfluenceStore::Exact { g } => g,
            InfluenceStore::Sparse { g, .. } => g,
        }
    }

    pub fn nonzero_count(&self) -> usize {
        match self {
            InfluenceStore::Exact { g } => g.iter().filter(|x| **x != 0.0).count(),
            InfluenceStore::Sparse { nonzero_count, .. } => *nonzero_count,
        }
    }
}

/// Spec [OP] `rtrl_exact_step`: `G_t = (H_I + H_E) G_{t-1} + F_t`.
pub fn rtrl_exact_step(g_prev: &InfluenceStore, jac: &JacobianParts) -> Result<InfluenceStore> {
    let g = match g_prev {
        InfluenceStore::Exact { g } => g,
        InfluenceStore::Sparse { .. } => {
            return Err(Error::Usage(
                "rtrl_exact_step needs the exact influence variant".into(),
            ))
        }
    };
    let h = &jac.h_implicit + &jac.h_explicit;
    let next = h.dot(g) + jac.f_dense();
    Ok(InfluenceStore::Exact { g: next })
}

/// Spec [OP] `rtrl_sparse_step`: `G_t = H_I G_{t-1} + F_t`, restricted to
/// block-diagonal support. The recurrent weights never enter the
/// propagation; block algebra keeps every off-block entry exactly zero.
pub fn rtrl_sparse_step(g_prev: &InfluenceStore, jac: &JacobianParts) -> Result<InfluenceStore> {
    let g = match g_prev {
        InfluenceStore::Sparse { g, .. } => g,
        InfluenceStore::Exact { .. } => {
            return Err(Error::Usage(
                "rtrl_sparse_step needs the sparse influence variant".into(),
            ))
        }
    };
    let next = jac.h_implicit.dot(g) + jac.f_dense();
    let nonzero_count = next.iter().filter(|x| **x != 0.0).count();
    Ok(InfluenceStore::Sparse {
        g: next,
        nonzero_count,
    })
}

/// Column-block support check for a single-layer influence matrix with
/// parameters ordered `[W (mk x n), V (mk x kv)]`: the column of parameter
/// `(tensor row r, input j)` may only touch the compartments of neuron
/// `r / m`. Returns true when every off-block entry is exactly zero
/// (bitwise, no tolerance).
pub fn block_support_exact(store: &InfluenceStore, m: usize, k: usize, n: usize) -> bool {
    let g = store.matrix();
    let mk = m * k;
    debug_assert_eq!(g.nrows(), mk);
    let p = g.ncols();
    let w_cols = mk * n;
    let kv = if p > w_cols { (p - w_cols) / mk } else { 0 };
    for (col_idx, col) in g.columns().into_iter().enumerate() {
        let tensor_row = if col_idx < w_cols {
            col_idx / n
        } else {
            (col_idx - w_cols) / kv
        };
        let neuron = tensor_row / m;
        for (state_row, &val) in col.iter().enumerate() {
            if state_row / m != neuron && val != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Convenience: build Jacobian parts for the RD-detached view (explicit
/// part zeroed) as the engines use them.
pub fn jacobian_for_engine(jac: &JacobianParts, model: &Model, _opts: &GradOptions) -> JacobianParts {
    let mut out = jac.clone();
    if !super::v_path_active(model) {
        out.h_explicit.fill(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::neuron::{ArchMode, InputScaleMode, LifParams, WeightMat};
    use ndarray::array;

    fn scalar_model(beta: f64, v: f64) -> Model {
        let lif = LifParams {
            tau_mem: 10.0,
            dt: 1.0,
            beta,
            u_rest: 0.0,
            resistance: 1.0,
            threshold: 1.0,
            input_scale_mode: InputScaleMode::OneMinusBeta,
        };
        let mut model = ModelBuilder::new(1, vec![1], lif)
            .mode(ArchMode::Rc)
            .build(1)
            .unwrap();
        model.net.layers[0].w = WeightMat::dense(array![[0.3]]);
        model.net.layers[0].v = Some(WeightMat::dense(array![[v]]));
        model
    }

    #[test]
    fn scalar_jacobian_hand_value() {
        // k=1, m=1, beta=0.9, V=0.5, sigma'(u)=0.25 at |u-threshold|=0.1
        // with slope 10, scale (1-beta)=0.1: H = 0.9 + 0.1*0.5*0.25.
        let model = scalar_model(0.9, 0.5);
        let state = LayerState {
            u: array![1.1],
            s: array![1.0],
            t: 3,
        };
        let jac = assemble_jacobians(&state, &array![1.0], &model).unwrap();
        let h = &jac.h_implicit + &jac.h_explicit;
        assert!((h[[0, 0]] - 0.9125).abs() < 1e-12);
    }

    #[test]
    fn absent_v_gives_zero_explicit() {
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        let model = ModelBuilder::new(2, vec![3], lif).build(5).unwrap();
        let state = LayerState::zeros(3, 3);
        let jac = assemble_jacobians(&state, &array![1.0, 0.0], &model).unwrap();
        assert_eq!(jac.h_explicit.sum(), 0.0);
        assert!(jac.f_v_input.is_none());
    }

    #[test]
    fn zero_diagonal_v_gives_zero_diagonal_explicit() {
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        let mut model = ModelBuilder::new(1, vec![2], lif)
            .mode(ArchMode::Rc)
            .build(2)
            .unwrap();
        model.net.layers[0].v = Some(WeightMat::dense(array![[0.0, 0.7], [0.4, 0.0]]));
        let state = LayerState {
            u: array![0.9, 1.05],
            s: array![0.0, 1.0],
            t: 1,
        };
        let jac = assemble_jacobians(&state, &array![0.0], &model).unwrap();
        assert_eq!(jac.h_explicit[[0, 0]], 0.0);
        assert_eq!(jac.h_explicit[[1, 1]], 0.0);
        assert!(jac.h_explicit[[0, 1]] != 0.0);
    }

    #[test]
    fn exact_step_base_cases() {
        let model = scalar_model(0.9, 0.5);
        let state = LayerState::zeros(1, 1);
        // No input, no spikes: F = 0 and G stays zero.
        let jac = assemble_jacobians(&state, &array![0.0], &model).unwrap();
        let g0 = InfluenceStore::zeros_exact(1, 2);
        let g1 = rtrl_exact_step(&g0, &jac).unwrap();
        assert_eq!(g1.matrix().sum(), 0.0);
        // With input: one step from zero equals F exactly.
        let jac = assemble_jacobians(&state, &array![1.0], &model).unwrap();
        let g1 = rtrl_exact_step(&g0, &jac).unwrap();
        assert_eq!(g1.matrix(), &jac.f_dense());
    }

    #[test]
    fn variant_mismatch_is_usage_error() {
        let model = scalar_model(0.9, 0.5);
        let state = LayerState::zeros(1, 1);
        let jac = assemble_jacobians(&state, &array![0.0], &model).unwrap();
        let sparse = InfluenceStore::zeros_sparse(1, 2);
        assert!(matches!(
            rtrl_exact_step(&sparse, &jac),
            Err(Error::Usage(_))
        ));
        let exact = InfluenceStore::zeros_exact(1, 2);
        assert!(matches!(
            rtrl_sparse_step(&exact, &jac),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sparse_step_preserves_block_support() {
        // Two neurons with recurrent coupling present in the dynamics: the
        // sparse recursion must keep influence confined to each neuron's
        // own block even though V mixes the forward dynamics.
        let lif = LifParams::new(10.0, 1.0, 1.0, InputScaleMode::Unit).unwrap();
        let mut model = ModelBuilder::new(2, vec![2], lif)
            .mode(ArchMode::Rc)
            .build(3)
            .unwrap();
        model.net.layers[0].v = Some(WeightMat::dense(array![[0.0, 0.8], [0.6, 0.0]]));
        let mut store = InfluenceStore::zeros_sparse(2, 2 * 2 + 2 * 2);
        let mut state = LayerState {
            u: array![0.2, 0.6],
            s: array![0.0, 0.0],
            t: 0,
        };
        let mut phase = 1usize;
        for _ in 0..100 {
            phase = (phase * 5 + 1) % 7;
            let s_in = array![(phase % 2) as f64, ((phase / 2) % 2) as f64];
            let jac = assemble_jacobians(&state, &s_in, &model).unwrap();
            store = rtrl_sparse_step(&store, &jac).unwrap();
            assert!(block_support_exact(&store, 1, 2, 2));
            // March the state along to vary the Jacobians.
            let next = crate::neuron::lif_step(
                &state,
                &model.net.layers[0].lif,
                &model.net.layers[0].w.values,
                model.net.layers[0].v.as_ref().map(|v| &v.values),
                &s_in,
                &state.s.clone(),
            )
            .unwrap();
            state = next;
        }
        assert!(store.nonzero_count() > 0);
        // Block-diagonal bound: at most m * p stored nonzeros.
        assert!(store.nonzero_count() <= 1 * (2 * 2 + 2 * 2));
    }
}
