//! Training objectives and the optimizer schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Mixing weight between the gold-label cross-entropy (`alpha`) and the
/// teacher-logit MSE (`1 - alpha`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    alpha: f64,
}

impl DistillWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(DistillWeights { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }

    /// The mixed loss for already computed `ce` and `mse` values.
    pub fn combine(self, ce: f64, mse: f64) -> f64 {
        self.alpha * ce + (1.0 - self.alpha) * mse
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Config(format!("label {l} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(labels)?;
    if g.value(logits).shape().get(1) != Some(&2) {
        return Err(Error::dim("cross_entropy", "expected [B x 2] logits"));
    }
    g.cross_entropy(logits, labels)
}

/// `(1 / (B·2)) · Σ (student − teacher)²`; the teacher is a constant.
pub fn mse_logits(g: &mut Graph<'_>, student: Var, teacher: &Tensor) -> Result<Var> {
    if g.value(student).shape() != teacher.shape() {
        return Err(Error::dim(
            "mse_logits",
            format!("{:?} vs {:?}", g.value(student).shape(), teacher.shape()),
        ));
    }
    let t = g.constant(teacher.clone())?;
    g.mse(student, t)
}

/// `alpha · CE(logits, labels) + (1 − alpha) · MSE(logits, teacher)`.
pub fn distill_loss(
    g: &mut Graph<'_>,
    logits: Var,
    labels: &[usize],
    teacher: &Tensor,
    w: DistillWeights,
) -> Result<Var> {
    let ce = cross_entropy(g, logits, labels)?;
    let mse = mse_logits(g, logits, teacher)?;
    let ce = g.scale(ce, w.alpha)?;
    let mse = g.scale(mse, 1.0 - w.alpha)?;
    g.add(ce, mse)
}

/// Adam with bias correction. Moment buffers are created lazily to match
/// the parameter shapes on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Non-finite gradients abort before anything changes.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam", "one gradient per parameter required"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam", format!("gradient {i} shape mismatch")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("adam (gradient of parameter {i})"),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Step decay: `lr = base_lr · gamma^⌊epoch / step_size⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLrState {
    pub base_lr: f64,
    pub gamma: f64,
    pub step_size: usize,
}

impl StepLrState {
    pub fn new(base_lr: f64, gamma: f64, step_size: usize) -> Result<Self> {
        if step_size == 0 {
            return Err(Error::Config("StepLR step_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        Ok(StepLrState {
            base_lr,
            gamma,
            step_size,
        })
    }
}

pub fn steplr_update(state: &StepLrState, epoch: usize) -> f64 {
    let decays = (epoch / state.step_size) as i32;
    state.base_lr * state.gamma.powi(decays)
}
