//! Loss programs and readout heads.
//!
//! Four heads are provided:
//! * `van_rossum` — squared distance between kernel-filtered output spike
//!   trains and a target stream; decomposes into per-step local losses and
//!   is online-capable;
//! * `sum_readout_ce` — softmax cross-entropy on readout activations summed
//!   over time (locking: evaluable only once the trial is complete);
//! * `max_readout_ce` — softmax cross-entropy on the per-class maximum over
//!   time (locking);
//! * `local_mse` — per-step mean-squared error on an instantaneous linear
//!   readout of the current spikes (online and stateless).
//!
//! Readout units for the cross-entropy heads are non-spiking leaky
//! integrators `r_t = beta_ro r_{t-1} + W_ro s_t`.

pub mod kernel;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::kernel::{FilterBank, KernelSpec};
use crate::neuron::raster::SpikeRaster;

/// Whether a loss program admits per-step evaluation with bounded lookback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    Online,
    Locking,
}

/// Declarative loss-head description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum LossHeadSpec {
    /// Filtered-spike-train squared distance. The filter applies per output
    /// neuron; no readout weights.
    VanRossum { kernel: KernelSpec },
    /// Sum-over-time softmax cross-entropy on leaky readout units.
    SumReadoutCe {
        n_classes: usize,
        beta_ro: f64,
        /// Optional 1-based inclusive aggregation window `(start, end)`;
        /// defaults to the whole trial.
        window: Option<(usize, usize)>,
    },
    /// Max-over-time softmax cross-entropy on leaky readout units.
    MaxReadoutCe {
        n_classes: usize,
        beta_ro: f64,
        window: Option<(usize, usize)>,
    },
    /// Per-step MSE on an instantaneous linear readout of current spikes.
    LocalMse { n_out: usize },
}

impl LossHeadSpec {
    /// Output dimension of the readout for a top layer of `k_top` neurons.
    pub fn n_out(&self, k_top: usize) -> usize {
        match self {
            LossHeadSpec::VanRossum { .. } => k_top,
            LossHeadSpec::SumReadoutCe { n_classes, .. }
            | LossHeadSpec::MaxReadoutCe { n_classes, .. } => *n_classes,
            LossHeadSpec::LocalMse { n_out } => *n_out,
        }
    }

    /// Whether the head owns a trainable readout weight matrix.
    pub fn weighted(&self) -> bool {
        !matches!(self, LossHeadSpec::VanRossum { .. })
    }

    /// Whether the head, beyond its declared kernel filters, is an
    /// instantaneous function of the current step (required by mixed-mode
    /// accumulation and by the vector-trace reduction).
    pub fn instantaneous(&self) -> bool {
        matches!(
            self,
            LossHeadSpec::VanRossum { .. } | LossHeadSpec::LocalMse { .. }
        )
    }
}

/// A loss program: head plus label-delay handling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossProgram {
    pub head: LossHeadSpec,
    /// Targets for step `t` describe step `t - label_delay`; the first
    /// `label_delay` steps carry no loss.
    pub label_delay: usize,
}

impl LossProgram {
    pub fn new(head: LossHeadSpec) -> Self {
        LossProgram {
            head,
            label_delay: 0,
        }
    }

    /// Derived online/locking classification.
    pub fn locality(&self) -> Locality {
        match self.head {
            LossHeadSpec::VanRossum { .. } | LossHeadSpec::LocalMse { .. } => Locality::Online,
            LossHeadSpec::SumReadoutCe { .. } | LossHeadSpec::MaxReadoutCe { .. } => {
                Locality::Locking
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.head {
            LossHeadSpec::VanRossum { kernel } => kernel.validate()?,
            LossHeadSpec::SumReadoutCe {
                n_classes,
                beta_ro,
                window,
            }
            | LossHeadSpec::MaxReadoutCe {
                n_classes,
                beta_ro,
                window,
            } => {
                if *n_classes == 0 {
                    return Err(Error::Config("n_classes must be positive".into()));
                }
                if !(*beta_ro >= 0.0 && *beta_ro < 1.0) {
                    return Err(Error::Config(format!(
                        "beta_ro must lie in [0, 1), got {beta_ro}"
                    )));
                }
                if let Some((a, b)) = window {
                    if *a == 0 || a > b {
                        return Err(Error::Config(format!(
                            "readout window ({a}, {b}) must satisfy 1 <= start <= end"
                        )));
                    }
                }
            }
            LossHeadSpec::LocalMse { n_out } => {
                if *n_out == 0 {
                    return Err(Error::Config("n_out must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Spec [OP] `delayed_label_wrap`: identical program evaluated against
/// targets shifted by `delay` steps.
pub fn delayed_label_wrap(program: &LossProgram, delay: usize) -> LossProgram {
    LossProgram {
        head: program.head.clone(),
        label_delay: delay,
    }
}

/// Per-trial target.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialTarget {
    /// Class index for the cross-entropy heads.
    Label(usize),
    /// Real-valued target stream, `T x n_out`, row `t-1` for step `t`.
    Stream(Array2<f64>),
    /// Target spike trains, filtered internally by the van Rossum kernel.
    Spikes(SpikeRaster),
}

/// Spec [OP] `van_rossum_step`: local loss and gradient for one filtered
/// sample pair.
pub fn van_rossum_step(y: f64, y_star: f64) -> (f64, f64) {
    let err = y - y_star;
    (0.5 * err * err, err)
}

/// Numerically stable softmax cross-entropy; returns the loss and the
/// gradient `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::Domain(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|z| (z - mx).exp());
    let total = exps.sum();
    let loss = total.ln() + mx - logits[label];
    let mut grad = exps / total;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Spec [OP] `sum_readout_loss`: softmax cross-entropy on summed readout
/// activations, with the gradient distributed uniformly over the steps.
pub fn sum_readout_loss(
    trajectory: ArrayView2<f64>,
    label: usize,
) -> Result<(f64, Array2<f64>)> {
    let (t_len, n) = trajectory.dim();
    if t_len == 0 {
        return Err(Error::Domain("empty readout trajectory".into()));
    }
    let logits = trajectory.sum_axis(ndarray::Axis(0));
    let (loss, g) = softmax_cross_entropy(logits.view(), label)?;
    let mut grads = Array2::zeros((t_len, n));
    for t in 0..t_len {
        grads.row_mut(t).assign(&g);
    }
    Ok((loss, grads))
}

/// Spec [OP] `max_readout_loss`: softmax cross-entropy on per-class maxima
/// over time; the gradient flows only to each class's (earliest) argmax
/// step. Also returns the argmax step indices.
pub fn max_readout_loss(
    trajectory: ArrayView2<f64>,
    label: usize,
) -> Result<(f64, Array2<f64>, Vec<usize>)> {
    let (t_len, n) = trajectory.dim();
    if t_len == 0 {
        return Err(Error::Domain("empty readout trajectory".into()));
    }
    let mut best = trajectory.row(0).to_owned();
    let mut arg = vec![0usize; n];
    for t in 1..t_len {
        for c in 0..n {
            if trajectory[[t, c]] > best[c] {
                best[c] = trajectory[[t, c]];
                arg[c] = t;
            }
        }
    }
    let (loss, g) = softmax_cross_entropy(best.view(), label)?;
    let mut grads = Array2::zeros((t_len, n));
    for c in 0..n {
        grads[[arg[c], c]] = g[c];
    }
    Ok((loss, grads, arg))
}

/// Output of one head step.
#[derive(Debug, Clone)]
pub struct HeadStep {
    /// Current readout values (filtered outputs, leaky readout membranes,
    /// or the instantaneous projection, depending on the head).
    pub readout: Array1<f64>,
    /// For online heads: the loss gradient with respect to the readout at
    /// this step (`None` outside the target's valid range or for locking
    /// heads).
    pub err: Option<Array1<f64>>,
    /// Loss contribution of this step (0 for locking heads).
    pub loss: f64,
}

/// Finalization summary of one head run.
#[derive(Debug, Clone)]
pub struct HeadSummary {
    pub loss: f64,
    /// For the cross-entropy heads: `softmax - onehot` on the aggregated
    /// logits.
    pub softmax_grad: Option<Array1<f64>>,
    /// For the max head: each class's (earliest) argmax step, 1-based.
    pub argmax_steps: Option<Vec<usize>>,
    /// Aggregation window actually used, 1-based inclusive.
    pub window: (usize, usize),
}

enum HeadState {
    VanRossum {
        bank: FilterBank,
        /// Pre-filtered target stream, `T x n`.
        target: Array2<f64>,
    },
    LeakyCe {
        r: Array1<f64>,
        sum: Array1<f64>,
        best: Array1<f64>,
        arg: Vec<usize>,
        any_in_window: bool,
        is_max: bool,
        label: usize,
    },
    LocalMse {
        target: Array2<f64>,
    },
}

/// Streaming evaluator for one trial: feed top-layer spike vectors step by
/// step, then finalize. All gradient engines share this code path, so the
/// reported loss is identical across engines by construction.
pub struct HeadEval {
    program: LossProgram,
    t_len: usize,
    n_out: usize,
    state: HeadState,
    loss_acc: f64,
    t_seen: usize,
    window: (usize, usize),
    readout_w: Option<Array2<f64>>,
}

impl HeadEval {
    pub fn new(
        program: &LossProgram,
        target: &TrialTarget,
        t_len: usize,
        k_top: usize,
        readout_w: Option<&Array2<f64>>,
    ) -> Result<Self> {
        program.validate()?;
        if program.label_delay > t_len {
            return Err(Error::Config(format!(
                "label delay {} exceeds trial length {t_len}",
                program.label_delay
            )));
        }
        let n_out = program.head.n_out(k_top);
        if program.head.weighted() {
            let w = readout_w.ok_or_else(|| {
                Error::Config("head requires readout weights, none provided".into())
            })?;
            if w.dim() != (n_out, k_top) {
                return Err(Error::Shape(format!(
                    "readout weight shape {:?} != ({n_out}, {k_top})",
                    w.dim()
                )));
            }
        }
        let check_stream = |stream: &Array2<f64>| -> Result<()> {
            if stream.dim() != (t_len, n_out) {
                return Err(Error::Shape(format!(
                    "target stream shape {:?} != ({t_len}, {n_out})",
                    stream.dim()
                )));
            }
            Ok(())
        };
        let window = match &program.head {
            LossHeadSpec::SumReadoutCe { window, .. } | LossHeadSpec::MaxReadoutCe { window, .. } => {
                let (a, b) = window.unwrap_or((1, t_len.max(1)));
                if t_len > 0 && b > t_len {
                    return Err(Error::Config(format!(
                        "readout window end {b} exceeds trial length {t_len}"
                    )));
                }
                (a, b)
            }
            _ => (1, t_len.max(1)),
        };
        let state = match &program.head {
            LossHeadSpec::VanRossum { kernel } => {
                kernel.validate()?;
                let target = match target {
                    TrialTarget::Stream(s) => {
                        check_stream(s)?;
                        s.clone()
                    }
                    TrialTarget::Spikes(raster) => {
                        if raster.t_len != t_len || raster.n != n_out {
                            return Err(Error::Shape(format!(
                                "target raster ({}, {}) != ({t_len}, {n_out})",
                                raster.t_len, raster.n
                            )));
                        }
                        FilterBank::run(*kernel, raster.data.view())
                    }
                    TrialTarget::Label(_) => {
                        return Err(Error::Config(
                            "van Rossum head needs a target stream or spike train".into(),
                        ))
                    }
                };
                HeadState::VanRossum {
                    bank: FilterBank::new(*kernel, n_out),
                    target,
                }
            }
            LossHeadSpec::SumReadoutCe { n_classes, .. }
            | LossHeadSpec::MaxReadoutCe { n_classes, .. } => {
                let label = match target {
                    TrialTarget::Label(l) => *l,
                    _ => {
                        return Err(Error::Config(
                            "cross-entropy heads need a class label target".into(),
                        ))
                    }
                };
                if label >= *n_classes {
                    return Err(Error::Domain(format!(
                        "label {label} out of range for {n_classes} classes"
                    )));
                }
                HeadState::LeakyCe {
                    r: Array1::zeros(n_out),
                    sum: Array1::zeros(n_out),
                    best: Array1::from_elem(n_out, f64::NEG_INFINITY),
                    arg: vec![0; n_out],
                    any_in_window: false,
                    is_max: matches!(program.head, LossHeadSpec::MaxReadoutCe { .. }),
                    label,
                }
            }
            LossHeadSpec::LocalMse { .. } => {
                let stream = match target {
                    TrialTarget::Stream(s) => {
                        check_stream(s)?;
                        s.clone()
                    }
                    _ => {
                        return Err(Error::Config(
                            "local MSE head needs a target stream".into(),
                        ))
                    }
                };
                HeadState::LocalMse { target: stream }
            }
        };
        Ok(HeadEval {
            program: program.clone(),
            t_len,
            n_out,
            state,
            loss_acc: 0.0,
            t_seen: 0,
            window,
            readout_w: readout_w.cloned(),
        })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// 1-based inclusive aggregation window.
    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    fn target_row(target: &Array2<f64>, t: usize, delay: usize) -> Option<ArrayView1<'_, f64>> {
        // Step t is compared against the target for step t - delay.
        if t > delay {
            Some(target.row(t - delay - 1))
        } else {
            None
        }
    }

    /// Advance by one step (`t` is 1-based) given the top layer's current
    /// spike vector.
    pub fn step(&mut self, t: usize, s_top: &Array1<f64>) -> HeadStep {
        debug_assert!(t >= 1 && t <= self.t_len);
        self.t_seen = t;
        let delay = self.program.label_delay;
        match &mut self.state {
            HeadState::VanRossum { bank, target } => {
                bank.step(s_top);
                let readout = bank.out.clone();
                match Self::target_row(target, t, delay) {
                    Some(row) => {
                        let err = &readout - &row;
                        let loss = 0.5 * err.iter().map(|e| e * e).sum::<f64>();
                        self.loss_acc += loss;
                        HeadStep {
                            readout,
                            err: Some(err),
                            loss,
                        }
                    }
                    None => HeadStep {
                        readout,
                        err: None,
                        loss: 0.0,
                    },
                }
            }
            HeadState::LeakyCe {
                r,
                sum,
                best,
                arg,
                any_in_window,
                is_max,
                ..
            } => {
                let beta_ro = match self.program.head {
                    LossHeadSpec::SumReadoutCe { beta_ro, .. }
                    | LossHeadSpec::MaxReadoutCe { beta_ro, .. } => beta_ro,
                    _ => unreachable!(),
                };
                let w = self.readout_w.as_ref().expect("validated at construction");
                let drive = w.dot(s_top);
                r.zip_mut_with(&drive, |x, &d| *x = beta_ro * *x + d);
                if t >= self.window.0 && t <= self.window.1 {
                    *any_in_window = true;
                    if *is_max {
                        for c in 0..r.len() {
                            if r[c] > best[c] {
                                best[c] = r[c];
                                arg[c] = t;
                            }
                        }
                    } else {
                        *sum += &*r;
                    }
                }
                HeadStep {
                    readout: r.clone(),
                    err: None,
                    loss: 0.0,
                }
            }
            HeadState::LocalMse { target } => {
                let w = self.readout_w.as_ref().expect("validated at construction");
                let readout = w.dot(s_top);
                match Self::target_row(target, t, delay) {
                    Some(row) => {
                        let err = &readout - &row;
                        let loss = 0.5 * err.iter().map(|e| e * e).sum::<f64>();
                        self.loss_acc += loss;
                        HeadStep {
                            readout,
                            err: Some(err),
                            loss,
                        }
                    }
                    None => HeadStep {
                        readout,
                        err: None,
                        loss: 0.0,
                    },
                }
            }
        }
    }

    /// Total loss and locking-head credit information.
    pub fn finalize(self) -> Result<HeadSummary> {
        match self.state {
            HeadState::VanRossum { .. } | HeadState::LocalMse { .. } => Ok(HeadSummary {
                loss: self.loss_acc,
                softmax_grad: None,
                argmax_steps: None,
                window: self.window,
            }),
            HeadState::LeakyCe {
                sum,
                best,
                arg,
                any_in_window,
                is_max,
                label,
                ..
            } => {
                if !any_in_window {
                    return Err(Error::Domain(
                        "readout aggregation window contains no steps".into(),
                    ));
                }
                let logits = if is_max { best } else { sum };
                let (loss, g) = softmax_cross_entropy(logits.view(), label)?;
                Ok(HeadSummary {
                    loss,
                    softmax_grad: Some(g),
                    argmax_steps: if is_max { Some(arg) } else { None },
                    window: self.window,
                })
            }
        }
    }
}

/// Batch-evaluate a loss program on complete spike output rows (`T x k_top`)
/// without streaming, for cross-checking the streaming path.
pub fn batch_loss(
    program: &LossProgram,
    target: &TrialTarget,
    s_top_rows: ArrayView2<f64>,
    readout_w: Option<&Array2<f64>>,
) -> Result<f64> {
    let (t_len, k_top) = s_top_rows.dim();
    match &program.head {
        LossHeadSpec::VanRossum { kernel } => {
            let filtered = FilterBank::run(*kernel, s_top_rows);
            let target = match target {
                TrialTarget::Stream(s) => s.clone(),
                TrialTarget::Spikes(r) => FilterBank::run(*kernel, r.data.view()),
                TrialTarget::Label(_) => {
                    return Err(Error::Config("van Rossum head needs a stream target".into()))
                }
            };
            let d = program.label_delay;
            let mut total = 0.0;
            for t in (d + 1)..=t_len {
                for c in 0..filtered.ncols() {
                    total += van_rossum_step(filtered[[t - 1, c]], target[[t - d - 1, c]]).0;
                }
            }
            Ok(total)
        }
        LossHeadSpec::SumReadoutCe { beta_ro, window, .. }
        | LossHeadSpec::MaxReadoutCe { beta_ro, window, .. } => {
            let label = match target {
                TrialTarget::Label(l) => *l,
                _ => return Err(Error::Config("cross-entropy heads need a label".into())),
            };
            let w = readout_w
                .ok_or_else(|| Error::Config("cross-entropy heads need readout weights".into()))?;
            let mut r = Array1::zeros(w.nrows());
            let mut rows = Array2::zeros((t_len, w.nrows()));
            for t in 0..t_len {
                let drive = w.dot(&s_top_rows.row(t).to_owned());
                r.zip_mut_with(&drive, |x, &dv| *x = *beta_ro * *x + dv);
                rows.row_mut(t).assign(&r);
            }
            let (a, b) = window.unwrap_or((1, t_len));
            let windowed = rows.slice(ndarray::s![(a - 1)..b, ..]);
            match program.head {
                LossHeadSpec::SumReadoutCe { .. } => Ok(sum_readout_loss(windowed, label)?.0),
                _ => Ok(max_readout_loss(windowed, label)?.0),
            }
        }
        LossHeadSpec::LocalMse { .. } => {
            let stream = match target {
                TrialTarget::Stream(s) => s,
                _ => return Err(Error::Config("local MSE head needs a stream target".into())),
            };
            let w = readout_w
                .ok_or_else(|| Error::Config("local MSE head needs readout weights".into()))?;
            let d = program.label_delay;
            let mut total = 0.0;
            for t in (d + 1)..=t_len {
                let y = w.dot(&s_top_rows.row(t - 1).to_owned());
                let row = stream.row(t - d - 1);
                total += 0.5
                    * y.iter()
                        .zip(row.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
            }
            let _ = k_top;
            Ok(total)
        }
    }
}
