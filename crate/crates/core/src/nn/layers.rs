use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NormAxis, Tape, Tensor, Var};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics; no state change.
    Eval,
}

/// Running statistics of one BatchNorm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct NormState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
}

/// Per-channel batch mean and biased variance over `count` elements each.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub count: usize,
}

impl<S: Scalar> NormState<S> {
    pub fn new(features: usize) -> Self {
        Self::with_params(features, S::of(DEFAULT_BN_MOMENTUM), S::of(DEFAULT_NORM_EPS))
    }

    pub fn with_params(features: usize, momentum: S, epsilon: S) -> Self {
        Self {
            running_mean: vec![S::zero(); features],
            running_var: vec![S::one(); features],
            momentum,
            epsilon,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.running_var.len() != self.running_mean.len() {
            return invalid("running_mean and running_var lengths differ");
        }
        if !(self.momentum > S::zero() && self.momentum <= S::one()) {
            return invalid("momentum must lie in (0, 1]");
        }
        if !(self.epsilon > S::zero()) {
            return invalid("epsilon must be positive");
        }
        if self.running_var.iter().any(|&v| v < S::zero()) {
            return invalid("running_var must be nonnegative");
        }
        Ok(())
    }

    /// Exponential moving average; the variance uses the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats<S>) {
        let unbiased = stats.unbiased_var();
        self.update_with(&stats.mean, &unbiased);
    }

    /// Moving-average step towards the given mean and (unbiased) variance.
    pub fn update_with(&mut self, mean: &[S], unbiased_var: &[S]) {
        let m = self.momentum;
        let keep = S::one() - m;
        for c in 0..self.features() {
            self.running_mean[c] = keep * self.running_mean[c] + m * mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * unbiased_var[c];
        }
    }
}

impl<S: Scalar> BatchStats<S> {
    pub fn unbiased_var(&self) -> Vec<S> {
        let n = self.count as f64;
        let factor = if self.count > 1 {
            S::of(n / (n - 1.0))
        } else {
            S::one()
        };
        self.var.iter().map(|&v| v * factor).collect()
    }
}

fn check_affine<S: Scalar>(
    tape: &Tape<S>,
    op: &'static str,
    param: Option<Var>,
    features: usize,
) -> Result<()> {
    if let Some(p) = param {
        let shape = tape.value(p).shape();
        if shape != [features] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![features],
                rhs: shape.to_vec(),
            });
        }
    }
    Ok(())
}

fn affine<S: Scalar>(tape: &mut Tape<S>, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
    let mut y = x;
    if let Some(g) = gamma {
        y = tape.mul(y, g)?;
    }
    if let Some(b) = beta {
        y = tape.add(y, b)?;
    }
    Ok(y)
}

/// BatchNorm over axis 1 of `[batch, features]` or `[batch, channels, h, w]`
/// without touching `state`. In train mode the observed batch statistics are
/// returned so the caller decides when to fold them into the running stats.
pub fn batch_norm_apply<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    state: &NormState<S>,
    mode: ForwardMode,
) -> Result<(Var, Option<BatchStats<S>>)> {
    const OP: &str = "batch_norm";
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 || shape[1] != state.features() {
        return Err(Error::ShapeMismatch {
            op: OP,
            lhs: shape,
            rhs: vec![state.features()],
        });
    }
    check_affine(tape, OP, gamma, state.features())?;
    check_affine(tape, OP, beta, state.features())?;
    match mode {
        ForwardMode::Train => {
            if shape[0] < 2 {
                return invalid("batch_norm: train mode needs a batch of at least 2");
            }
            let xhat = tape.standardize(x, NormAxis::Channel, state.epsilon)?;
            let (mean, var) = tape
                .norm_stats(xhat)
                .map(|(m, v)| (m.to_vec(), v.to_vec()))
                .expect("standardize records statistics");
            let count = tape.value(x).len() / state.features();
            let y = affine(tape, xhat, gamma, beta)?;
            Ok((y, Some(BatchStats { mean, var, count })))
        }
        ForwardMode::Eval => {
            let mean = tape.constant(Tensor::new(vec![state.features()], state.running_mean.clone())?);
            let inv: Vec<S> = state
                .running_var
                .iter()
                .map(|&v| S::one() / (v + state.epsilon).sqrt())
                .collect();
            let inv = tape.constant(Tensor::new(vec![state.features()], inv)?);
            let centered = tape.sub(x, mean)?;
            let xhat = tape.mul(centered, inv)?;
            Ok((affine(tape, xhat, gamma, beta)?, None))
        }
    }
}

/// BatchNorm that folds train-mode statistics into `state` immediately.
pub fn batch_norm_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    state: &mut NormState<S>,
    mode: ForwardMode,
) -> Result<Var> {
    let (y, stats) = batch_norm_apply(tape, x, gamma, beta, state, mode)?;
    if let Some(stats) = stats {
        state.update(&stats);
    }
    Ok(y)
}

/// LayerNorm over the feature axis of `[batch, features]`.
pub fn layer_norm_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    epsilon: S,
) -> Result<Var> {
    const OP: &str = "layer_norm";
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: OP,
            shape,
            reason: "expected [batch, features]".into(),
        });
    }
    if shape[1] < 2 {
        return invalid("layer_norm: needs at least 2 features");
    }
    check_affine(tape, OP, gamma, shape[1])?;
    check_affine(tape, OP, beta, shape[1])?;
    let xhat = tape.standardize(x, NormAxis::Row, epsilon)?;
    affine(tape, xhat, gamma, beta)
}
