//! Worst-case elementwise-adaptive l-infinity m-sharpness.
//!
//! For each size-`m` batch the evaluator searches the box
//! `|eps_i| <= rho * |w_i|` for the largest loss and reports the increase over
//! the unperturbed loss. The search is a momentum sign-gradient ascent with
//! step halving; its first iterate is the single-step point.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{ForwardMode, Model};
use crate::rng::Rng;
use crate::scalar::{sign0, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_M: usize = 128;
pub const DEFAULT_SUBSET: usize = 2048;
pub const MOMENTUM: f64 = 0.75;
/// Iterations without a new best loss before the step size is halved.
pub const PATIENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    pub rho: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_subset")]
    pub subset_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_m() -> usize {
    DEFAULT_M
}

fn default_subset() -> usize {
    DEFAULT_SUBSET
}

impl SharpnessConfig {
    pub fn new(rho: f64, steps: usize) -> Self {
        Self {
            rho,
            m: DEFAULT_M,
            subset_size: DEFAULT_SUBSET,
            steps,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return invalid(format!("sharpness rho must be finite and >= 0, got {}", self.rho));
        }
        if self.steps < 1 {
            return invalid("sharpness steps must be >= 1");
        }
        if self.m < 1 {
            return invalid("sharpness m must be >= 1");
        }
        if self.subset_size < self.m {
            return invalid(format!("subset size {} is smaller than m = {}", self.subset_size, self.m));
        }
        Ok(())
    }

    /// Subset size truncated to a multiple of `m`.
    pub fn effective_subset(&self) -> usize {
        self.subset_size / self.m * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar", deserialize = "S: Scalar"))]
pub struct SharpnessReport<S> {
    pub rho: f64,
    pub m: usize,
    pub subset_size: usize,
    pub steps: usize,
    pub s_w_m: S,
    pub per_batch: Vec<S>,
}

/// A loss over indexed samples, evaluated at arbitrary parameters.
pub trait BatchLoss<S: Scalar> {
    fn num_samples(&self) -> usize;

    fn loss_grad(&self, params: &[S], samples: &[usize]) -> Result<(S, Vec<S>)>;
}

/// Logit-normalized cross-entropy of a model in eval mode, without label
/// smoothing.
pub struct ModelLoss<'a, S: Scalar> {
    model: &'a Model<S>,
    x: &'a Tensor<S>,
    targets: &'a [usize],
}

impl<'a, S: Scalar> ModelLoss<'a, S> {
    pub fn new(model: &'a Model<S>, x: &'a Tensor<S>, targets: &'a [usize]) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] != targets.len() {
            return invalid("inputs and targets disagree on sample count");
        }
        Ok(Self { model, x, targets })
    }
}

impl<S: Scalar> BatchLoss<S> for ModelLoss<'_, S> {
    fn num_samples(&self) -> usize {
        self.targets.len()
    }

    fn loss_grad(&self, params: &[S], samples: &[usize]) -> Result<(S, Vec<S>)> {
        let d = self.x.shape()[1];
        let mut rows = Vec::with_capacity(samples.len() * d);
        for &i in samples {
            rows.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![samples.len(), d], rows)?;
        let y: Vec<usize> = samples.iter().map(|&i| self.targets[i]).collect();
        let eval = self
            .model
            .loss_and_grad(params, &x, &y, ForwardMode::Eval, S::zero(), true, None)?;
        Ok((eval.loss, eval.grad))
    }
}

/// Clamp `eps_i` to `[-rho |w_i|, rho |w_i|]`.
pub fn project_linf_adaptive<S: Scalar>(eps: &[S], w: &[S], rho: S) -> Vec<S> {
    eps.iter()
        .zip(w)
        .map(|(&e, &wi)| {
            let r = rho * wi.abs();
            if r == S::zero() {
                S::zero()
            } else {
                e.max(-r).min(r)
            }
        })
        .collect()
}

/// Result of the search on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSearch<S> {
    pub baseline: S,
    pub best_loss: S,
    pub best_eps: Vec<S>,
    /// Every perturbation evaluated, in order, when tracing was requested.
    pub evaluated: Vec<Vec<S>>,
}

impl<S: Scalar> BatchSearch<S> {
    pub fn sharpness(&self) -> S {
        self.best_loss - self.baseline
    }
}

fn shifted<S: Scalar>(w: &[S], eps: &[S]) -> Vec<S> {
    w.iter().zip(eps).map(|(&a, &b)| a + b).collect()
}

/// Box-constrained ascent on a single batch.
pub fn search_batch<S: Scalar, L: BatchLoss<S>>(
    loss: &L,
    params: &[S],
    samples: &[usize],
    rho: S,
    steps: usize,
    trace: bool,
) -> Result<BatchSearch<S>> {
    if steps < 1 {
        return invalid("sharpness steps must be >= 1");
    }
    let n = params.len();
    let (baseline, g0) = loss.loss_grad(params, samples)?;
    let mut evaluated = Vec::new();
    let mut best_loss = baseline;
    let mut best_eps = vec![S::zero(); n];
    let mut best_grad = g0.clone();

    // Steps are taken in scaled coordinates: a unit sign step moves eps_i by |w_i|.
    let scale: Vec<S> = params.iter().map(|w| w.abs()).collect();
    let sign_step = |x: &[S], g: &[S], eta: S| -> Vec<S> {
        let cand: Vec<S> = x
            .iter()
            .zip(g)
            .zip(&scale)
            .map(|((&xi, &gi), &si)| xi + eta * si * sign0(gi))
            .collect();
        project_linf_adaptive(&cand, params, rho)
    };

    let mut eta = rho;
    let alpha = S::of(MOMENTUM);
    let mut prev = vec![S::zero(); n];
    let mut x = sign_step(&prev, &g0, eta);
    let mut since_best = 0;
    for k in 0..steps {
        if trace {
            evaluated.push(x.clone());
        }
        let (value, g) = loss.loss_grad(&shifted(params, &x), samples)?;
        if value > best_loss {
            best_loss = value;
            best_eps.clone_from(&x);
            best_grad.clone_from(&g);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if k + 1 == steps {
            break;
        }
        if since_best >= PATIENCE {
            eta = eta / S::of(2.0);
            since_best = 0;
            x.clone_from(&best_eps);
            let next = sign_step(&x, &best_grad, eta);
            prev = std::mem::replace(&mut x, next);
            continue;
        }
        let z = sign_step(&x, &g, eta);
        let cand: Vec<S> = x
            .iter()
            .zip(&z)
            .zip(&prev)
            .map(|((&xi, &zi), &pi)| xi + alpha * (zi - xi) + (S::one() - alpha) * (xi - pi))
            .collect();
        let next = project_linf_adaptive(&cand, params, rho);
        prev = std::mem::replace(&mut x, next);
    }
    Ok(BatchSearch {
        baseline,
        best_loss,
        best_eps,
        evaluated,
    })
}

/// Mean worst-case loss increase over `subset_size / m` batches drawn from a
/// seeded subset of `loss`'s samples. `params` is only read.
pub fn adaptive_sharpness<S: Scalar, L: BatchLoss<S>>(
    loss: &L,
    params: &[S],
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport<S>> {
    cfg.validate()?;
    let subset = cfg.effective_subset();
    if subset > loss.num_samples() {
        return invalid(format!(
            "subset size {subset} exceeds the {} available samples",
            loss.num_samples()
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let order = rng.permutation(loss.num_samples());
    let rho = S::of(cfg.rho);
    let per_batch = order[..subset]
        .chunks(cfg.m)
        .map(|batch| Ok(search_batch(loss, params, batch, rho, cfg.steps, false)?.sharpness()))
        .collect::<Result<Vec<S>>>()?;
    let s_w_m = per_batch.iter().copied().sum::<S>() / S::of(per_batch.len() as f64);
    Ok(SharpnessReport {
        rho: cfg.rho,
        m: cfg.m,
        subset_size: subset,
        steps: cfg.steps,
        s_w_m,
        per_batch,
    })
}

/// [`adaptive_sharpness`] of a model at its own parameters.
pub fn model_sharpness<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    targets: &[usize],
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport<S>> {
    let loss = ModelLoss::new(model, x, targets)?;
    adaptive_sharpness(&loss, &model.params, cfg)
}
