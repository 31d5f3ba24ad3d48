//! Multi-layer perceptron with hand-derived backprop, SGD with momentum
//! and coupled weight decay, and learning-rate schedules.
//!
//! Layer `l` maps `a_{l+1} = act(a_l W_lᵀ + b_l)`; the final (classifier)
//! layer has no bias and no activation: `Z = a_{L-1} W_{L-1}ᵀ`. Feature
//! batches are rows, weights are stored `out x in`.
//!
//! Gradient conventions: [`backward`](Mlp::backward) returns batch-mean
//! gradients (what SGD consumes, so learning-rate semantics do not depend
//! on batch size) plus the batch-summed [`GradientReport`] of the
//! classifier layer for analysis.

pub mod peeled;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::collapse::etf_frame;
use crate::error::{Error, Result};
use crate::loss::{
    batch_logit_gradients, batch_logit_gradients_mixed, classifier_gradient, mean_loss,
    mixed_mean_loss, ClassCounts, GradientReport, LossKind,
};
use crate::numkit::matrix::Matrix;
use crate::numkit::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierInit {
    Gaussian,
    /// Start the classifier on the simplex frame (collapsed-optimum
    /// ablations). Needs penultimate width >= c.
    Etf,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    /// `[d_0, d_1, ..., d_L]`; `d_L` is the class count.
    pub dims: Vec<usize>,
    /// `weights[l]` is `dims[l+1] x dims[l]`.
    pub weights: Vec<Matrix>,
    /// Hidden-layer biases (`len = weights.len() - 1`); the classifier has none.
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Full forward pass record: `activations[l]` is the input to layer `l`
/// (`activations[0]` = X, `activations[L-1]` = penultimate features) and
/// `pre[l]` the pre-activation output of hidden layer `l`.
pub struct ForwardTrace {
    pub activations: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    pub logits: Matrix,
}

/// Batch-mean parameter gradients plus analysis metadata.
pub struct BackwardResult {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    /// Batch-summed classifier-gradient decomposition.
    pub report: GradientReport,
    pub mean_loss: f64,
}

impl Mlp {
    /// Fan-in-scaled Gaussian init (`std = sqrt(2 / fan_in)`) for hidden
    /// layers and zero biases; the classifier is either the same Gaussian
    /// or a simplex frame.
    pub fn init(
        dims: &[usize],
        activation: Activation,
        classifier_init: ClassifierInit,
        rng: &mut Rng,
    ) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::InvalidSpec(
                "an MLP needs at least input and output dims".into(),
            ));
        }
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers.saturating_sub(1));
        for l in 0..layers {
            let (fan_out, fan_in) = (dims[l + 1], dims[l]);
            let last = l == layers - 1;
            if last && classifier_init == ClassifierInit::Etf {
                let frame = etf_frame(fan_out, fan_in, rng)?;
                weights.push(frame.w_star);
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut w = rng.gaussian_matrix(fan_out, fan_in);
                w.scale_in_place(std);
                weights.push(w);
            }
            if !last {
                biases.push(vec![0.0; fan_out]);
            }
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn classifier(&self) -> &Matrix {
        self.weights.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.dims[0] {
            return Err(Error::Dimension(format!(
                "input width {} vs d_0 = {}",
                x.cols(),
                self.dims[0]
            )));
        }
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers.saturating_sub(1));
        activations.push(x.clone());
        for l in 0..layers - 1 {
            let mut s = activations[l].matmul_nt(&self.weights[l])?;
            for row in 0..s.rows() {
                for (v, b) in s.row_mut(row).iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            let mut a = s.clone();
            for v in a.data_mut() {
                *v = self.activation.apply(*v);
            }
            pre.push(s);
            activations.push(a);
        }
        let logits = activations[layers - 1].matmul_nt(&self.weights[layers - 1])?;
        Ok(ForwardTrace {
            activations,
            pre,
            logits,
        })
    }

    /// Returns penultimate features and logits.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let t = self.forward_trace(x)?;
        let h = t.activations.last().unwrap().clone();
        Ok((h, t.logits))
    }

    /// Backprop of the batch-mean loss through every parameter. The
    /// classifier-layer entry of `weight_grads` is the summed
    /// [`GradientReport::full`] scaled by `1/b` (same logit-gradient code
    /// path).
    pub fn backward(
        &self,
        x: &Matrix,
        labels: &[usize],
        kind: LossKind,
        counts: &ClassCounts,
    ) -> Result<BackwardResult> {
        let trace = self.forward_trace(x)?;
        let g = batch_logit_gradients(kind, &trace.logits, labels, counts);
        let loss = mean_loss(kind, &trace.logits, labels, counts);
        self.backward_from_logit_grads(&trace, &g, labels, kind, counts, loss)
    }

    /// Backprop of the two-label weighted loss used with mixed inputs.
    /// The report decomposition still keys classes off `labels_a`.
    pub fn backward_mixed(
        &self,
        x: &Matrix,
        labels_a: &[usize],
        labels_b: &[usize],
        lambda: f64,
        kind: LossKind,
        counts: &ClassCounts,
    ) -> Result<BackwardResult> {
        let trace = self.forward_trace(x)?;
        let g = batch_logit_gradients_mixed(kind, &trace.logits, labels_a, labels_b, lambda, counts);
        let loss = mixed_mean_loss(kind, &trace.logits, labels_a, labels_b, lambda, counts);
        self.backward_from_logit_grads(&trace, &g, labels_a, kind, counts, loss)
    }

    fn backward_from_logit_grads(
        &self,
        trace: &ForwardTrace,
        g: &Matrix,
        labels: &[usize],
        kind: LossKind,
        counts: &ClassCounts,
        mean_loss: f64,
    ) -> Result<BackwardResult> {
        let layers = self.weights.len();
        let b = g.rows() as f64;
        let h_last = &trace.activations[layers - 1];

        let report = classifier_gradient(kind, h_last, labels, self.classifier(), counts)?;

        let mut weight_grads: Vec<Matrix> = Vec::with_capacity(layers);
        let mut bias_grads: Vec<Vec<f64>> = Vec::with_capacity(layers.saturating_sub(1));
        for l in 0..layers {
            weight_grads.push(Matrix::zeros(self.weights[l].rows(), self.weights[l].cols()));
            if l < layers - 1 {
                bias_grads.push(vec![0.0; self.biases[l].len()]);
            }
        }

        let mut classifier_grad = report.full.clone();
        classifier_grad.scale_in_place(1.0 / b);
        weight_grads[layers - 1] = classifier_grad;

        // dL/da_{L-1}
        let mut delta = g.matmul(self.classifier())?;
        for l in (0..layers - 1).rev() {
            // Through the activation: dL/ds_l.
            for (dv, sv) in delta.data_mut().iter_mut().zip(trace.pre[l].data()) {
                *dv *= self.activation.derivative(*sv);
            }
            let mut wg = delta.matmul_tn(&trace.activations[l])?;
            wg.scale_in_place(1.0 / b);
            weight_grads[l] = wg;
            let bg = &mut bias_grads[l];
            for row in 0..delta.rows() {
                for (bv, dv) in bg.iter_mut().zip(delta.row(row)) {
                    *bv += dv / b;
                }
            }
            if l > 0 {
                delta = delta.matmul(&self.weights[l])?;
            }
        }

        Ok(BackwardResult {
            weight_grads,
            bias_grads,
            report,
            mean_loss,
        })
    }
}

/// One momentum-SGD tensor update, coupled weight decay:
/// `v <- momentum v + grad + weight_decay param; param <- param - lr v`.
pub fn sgd_update(
    param: &mut [f64],
    vel: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.len(), vel.len());
    debug_assert_eq!(param.len(), grad.len());
    for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum buffers mirroring an MLP's parameters.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    vel_weights: Vec<Matrix>,
    vel_biases: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(mlp: &Mlp, momentum: f64, weight_decay: f64) -> SgdState {
        SgdState {
            momentum,
            weight_decay,
            vel_weights: mlp
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            vel_biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &BackwardResult, lr: f64) {
        for (l, w) in mlp.weights.iter_mut().enumerate() {
            sgd_update(
                w.data_mut(),
                self.vel_weights[l].data_mut(),
                grads.weight_grads[l].data(),
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        for (l, b) in mlp.biases.iter_mut().enumerate() {
            sgd_update(
                b,
                &mut self.vel_biases[l],
                &grads.bias_grads[l],
                lr,
                self.momentum,
                // Biases are excluded from the decay norm.
                0.0,
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    /// `base_lr * factor^(number of milestones at or before the epoch)`.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
    /// `lr_end + (lr_start - lr_end) * (1 + cos(pi epoch / total)) / 2`.
    Cosine { lr_end: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub kind: ScheduleKind,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn constant(lr: f64, total_epochs: usize) -> Schedule {
        Schedule {
            base_lr: lr,
            kind: ScheduleKind::Constant,
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidSpec(format!(
                "epoch {} out of range (total {})",
                epoch, self.total_epochs
            )));
        }
        Ok(match &self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * factor.powi(passed as i32)
            }
            ScheduleKind::Cosine { lr_end } => {
                let phase = std::f64::consts::PI * epoch as f64 / self.total_epochs as f64;
                lr_end + 0.5 * (self.base_lr - lr_end) * (1.0 + phase.cos())
            }
        })
    }
}
