use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::base::{base_step, BaseOptimizer, OptimizerState};
use super::schedule::Schedule;
use crate::error::{invalid, Error, Result};
use crate::nn::{ForwardMode, Model, Registry};
use crate::perturb::{ascent_step, scope_mask, PerturbSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Sam,
}

/// Switch optimizer kind at `epoch`: epochs before it use `from`, epochs at
/// and after it use `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSwitch {
    pub epoch: usize,
    pub from: OptimizerKind,
    pub to: OptimizerKind,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base: BaseOptimizer,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub perturb: Option<PerturbSpec>,
    /// Sub-batch size for m-sharpness.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub stage_switch: Option<StageSwitch>,
    /// Request ascent gradients only for coordinates a static scope can perturb.
    #[serde(default = "default_true")]
    pub ascent_short_circuit: bool,
}

impl OptimConfig {
    pub fn new(base: BaseOptimizer) -> Self {
        Self {
            base,
            schedule: Schedule::Constant,
            perturb: None,
            m: None,
            stage_switch: None,
            ascent_short_circuit: true,
        }
    }

    pub fn with_perturb(mut self, spec: PerturbSpec) -> Self {
        self.perturb = Some(spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if let Some(p) = &self.perturb {
            p.validate()?;
        }
        if self.m == Some(0) {
            return invalid("m must be at least 1");
        }
        let uses_sam = match self.stage_switch {
            Some(s) => s.from == OptimizerKind::Sam || s.to == OptimizerKind::Sam,
            None => self.perturb.is_some(),
        };
        if uses_sam && self.perturb.is_none() {
            return invalid("stage switch uses sam but no perturbation is configured");
        }
        Ok(())
    }

    /// Stage-switch epoch must lie within `[0, epochs]`.
    pub fn validate_for_run(&self, epochs: usize, batch_size: usize) -> Result<()> {
        self.validate()?;
        if let Some(s) = self.stage_switch {
            if s.epoch > epochs {
                return invalid(format!("stage switch at epoch {} beyond run length {epochs}", s.epoch));
            }
        }
        if let Some(m) = self.m {
            if m > batch_size {
                return invalid(format!("m = {m} exceeds batch size {batch_size}"));
            }
        }
        Ok(())
    }
}

/// Optimizer kind active during `epoch` (0-based).
pub fn stage_controller(config: &OptimConfig, epoch: usize) -> OptimizerKind {
    match config.stage_switch {
        Some(s) if epoch < s.epoch => s.from,
        Some(s) => s.to,
        None if config.perturb.is_some() => OptimizerKind::Sam,
        None => OptimizerKind::Sgd,
    }
}

/// Whether an evaluation is the ascent probe or the gradient used for descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Ascent,
    Descent,
}

/// A minibatch loss the SAM step can evaluate at arbitrary parameters.
pub trait Objective<S: Scalar> {
    fn batch_len(&self) -> usize;

    /// Loss and flat gradient over samples `range` at `params`. When
    /// `grad_mask` is given, only gradients at its true coordinates are
    /// required; other entries may be zero.
    fn loss_grad(
        &mut self,
        params: &[S],
        range: Range<usize>,
        pass: Pass,
        grad_mask: Option<&[bool]>,
    ) -> Result<(S, Vec<S>)>;

    /// Called once after the last descent evaluation of a step.
    fn finish_step(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics<S> {
    pub loss_clean: S,
    pub loss_perturbed: S,
    /// Mean `||T^+ eps||_p` over non-degenerate (sub-)batches; `None` for plain steps.
    pub eps_scaled_norm: Option<S>,
    pub degenerate_events: usize,
    pub active_params: usize,
}

/// Base optimizer plus optional SAM perturbation.
#[derive(Debug, Clone)]
pub struct SamOptimizer<S> {
    pub config: OptimConfig,
    pub state: OptimizerState<S>,
    registry: Registry,
    trainable: Vec<bool>,
    static_mask: Option<Vec<bool>>,
}

fn check_finite<S: Scalar>(loss: S, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            loss: loss.as_f64(),
            context: context.to_string(),
        })
    }
}

impl<S: Scalar> SamOptimizer<S> {
    /// Static scope masks (including random ones) are drawn here, once.
    pub fn new(config: OptimConfig, registry: &Registry, trainable: Vec<bool>) -> Result<Self> {
        config.validate()?;
        if trainable.len() != registry.total() {
            return invalid("trainable mask does not match the registry");
        }
        let static_mask = match &config.perturb {
            Some(p) if p.scope.is_static() => Some(scope_mask::<S>(&p.scope, registry, None)?),
            _ => None,
        };
        Ok(Self {
            state: config.base.init_state(registry.total()),
            config,
            registry: registry.clone(),
            trainable,
            static_mask,
        })
    }

    pub fn with_state(mut self, state: OptimizerState<S>) -> Result<Self> {
        let ok = match (&self.config.base, &state) {
            (BaseOptimizer::Sgd { .. }, OptimizerState::Sgd { velocity }) => velocity.len() == self.registry.total(),
            (BaseOptimizer::AdamW { .. }, OptimizerState::AdamW { m, v, .. }) => {
                m.len() == self.registry.total() && v.len() == self.registry.total()
            }
            _ => false,
        };
        if !ok {
            return invalid("optimizer state does not match configuration");
        }
        self.state = state;
        Ok(self)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn static_mask(&self) -> Option<&[bool]> {
        self.static_mask.as_deref()
    }

    fn ascent_grad_mask(&self) -> Option<&[bool]> {
        if self.config.ascent_short_circuit {
            self.static_mask.as_deref()
        } else {
            None
        }
    }

    /// One optimizer step of `kind` at learning rate `lr`.
    pub fn step<O: Objective<S>>(
        &mut self,
        params: &mut [S],
        objective: &mut O,
        kind: OptimizerKind,
        lr: S,
    ) -> Result<StepMetrics<S>> {
        let n = objective.batch_len();
        if n == 0 {
            return invalid("empty batch");
        }
        if params.len() != self.registry.total() {
            return Err(Error::ShapeMismatch {
                op: "sam_step",
                lhs: vec![self.registry.total()],
                rhs: vec![params.len()],
            });
        }
        let metrics = match (kind, self.config.perturb) {
            (OptimizerKind::Sgd, _) => {
                let (loss, grad) = objective.loss_grad(params, 0..n, Pass::Descent, None)?;
                check_finite(loss, "plain step")?;
                objective.finish_step()?;
                base_step(params, &grad, &self.trainable, &self.config.base, &mut self.state, lr)?;
                StepMetrics {
                    loss_clean: loss,
                    loss_perturbed: loss,
                    eps_scaled_norm: None,
                    degenerate_events: 0,
                    active_params: 0,
                }
            }
            (OptimizerKind::Sam, None) => return invalid("sam step without a perturbation spec"),
            (OptimizerKind::Sam, Some(spec)) => match self.config.m {
                None => {
                    let (metrics, grad) = self.perturbed_gradient(params, objective, &spec, 0..n)?;
                    objective.finish_step()?;
                    base_step(params, &grad, &self.trainable, &self.config.base, &mut self.state, lr)?;
                    metrics
                }
                Some(m) if m > n => {
                    return invalid(format!("m = {m} exceeds batch size {n}"));
                }
                Some(m) => {
                    let mut avg = vec![S::zero(); params.len()];
                    let mut loss_clean = S::zero();
                    let mut loss_perturbed = S::zero();
                    let mut norm_sum = S::zero();
                    let mut norm_count = 0usize;
                    let mut degenerate = 0;
                    let mut active = 0;
                    let total = S::of(n as f64);
                    let mut start = 0;
                    while start < n {
                        let end = (start + m).min(n);
                        let weight = S::of((end - start) as f64) / total;
                        let (sub, grad) = self.perturbed_gradient(params, objective, &spec, start..end)?;
                        for (a, g) in avg.iter_mut().zip(&grad) {
                            *a = *a + weight * *g;
                        }
                        loss_clean = loss_clean + weight * sub.loss_clean;
                        loss_perturbed = loss_perturbed + weight * sub.loss_perturbed;
                        if let Some(v) = sub.eps_scaled_norm {
                            norm_sum = norm_sum + v;
                            norm_count += 1;
                        }
                        degenerate += sub.degenerate_events;
                        active = sub.active_params;
                        start = end;
                    }
                    objective.finish_step()?;
                    base_step(params, &avg, &self.trainable, &self.config.base, &mut self.state, lr)?;
                    StepMetrics {
                        loss_clean,
                        loss_perturbed,
                        eps_scaled_norm: (norm_count > 0).then(|| norm_sum / S::of(norm_count as f64)),
                        degenerate_events: degenerate,
                        active_params: active,
                    }
                }
            },
        };
        Ok(metrics)
    }

    /// Ascent on `range`, then the gradient at the perturbed point. `params`
    /// is left unchanged.
    fn perturbed_gradient<O: Objective<S>>(
        &self,
        params: &[S],
        objective: &mut O,
        spec: &PerturbSpec,
        range: Range<usize>,
    ) -> Result<(StepMetrics<S>, Vec<S>)> {
        let (loss_clean, grad) =
            objective.loss_grad(params, range.clone(), Pass::Ascent, self.ascent_grad_mask())?;
        check_finite(loss_clean, "ascent pass")?;
        let step = ascent_step(spec, params, &grad, &self.registry, self.static_mask.as_deref())?;
        let perturbed: Vec<S> = params
            .iter()
            .zip(&step.perturbation.eps)
            .map(|(&w, &e)| w + e)
            .collect();
        let (loss_perturbed, grad) = objective.loss_grad(&perturbed, range, Pass::Descent, None)?;
        check_finite(loss_perturbed, "perturbed pass")?;
        let degenerate = step.perturbation.degenerate;
        Ok((
            StepMetrics {
                loss_clean,
                loss_perturbed,
                eps_scaled_norm: (!degenerate).then_some(step.scaled_norm),
                degenerate_events: usize::from(degenerate),
                active_params: step.perturbation.active_count,
            },
            grad,
        ))
    }
}

/// Cross-entropy over a labelled minibatch of a [`Model`].
///
/// Sub-batch weight, per-layer means and per-layer unbiased variances.
type PendingStats<S> = (S, Vec<Vec<S>>, Vec<Vec<S>>);

/// BatchNorm runs on batch statistics in both passes. Running statistics are
/// updated once per step in [`Objective::finish_step`], from the descent
/// passes only; with several sub-batches their statistics are averaged by
/// sub-batch size.
pub struct ModelObjective<'a, S: Scalar> {
    model: &'a mut Model<S>,
    x: &'a Tensor<S>,
    targets: &'a [usize],
    smoothing: S,
    pending: Vec<PendingStats<S>>,
}

impl<'a, S: Scalar> ModelObjective<'a, S> {
    pub fn new(model: &'a mut Model<S>, x: &'a Tensor<S>, targets: &'a [usize], smoothing: S) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] != targets.len() {
            return invalid("inputs and targets disagree on batch size");
        }
        Ok(Self {
            model,
            x,
            targets,
            smoothing,
            pending: Vec::new(),
        })
    }

    fn rows(&self, range: &Range<usize>) -> Result<Tensor<S>> {
        let d = self.x.shape()[1];
        Tensor::new(
            vec![range.len(), d],
            self.x.data()[range.start * d..range.end * d].to_vec(),
        )
    }
}

impl<S: Scalar> Objective<S> for ModelObjective<'_, S> {
    fn batch_len(&self) -> usize {
        self.targets.len()
    }

    fn loss_grad(
        &mut self,
        params: &[S],
        range: Range<usize>,
        pass: Pass,
        grad_mask: Option<&[bool]>,
    ) -> Result<(S, Vec<S>)> {
        let whole = range.start == 0 && range.end == self.batch_len();
        let sub;
        let x = if whole {
            self.x
        } else {
            sub = self.rows(&range)?;
            &sub
        };
        let views = grad_mask.map(|mask| {
            self.model
                .views()
                .iter()
                .map(|v| mask[v.range()].iter().any(|&b| b))
                .collect::<Vec<_>>()
        });
        let eval = self.model.loss_and_grad(
            params,
            x,
            &self.targets[range.clone()],
            ForwardMode::Train,
            self.smoothing,
            false,
            views.as_deref(),
        )?;
        if pass == Pass::Descent && !eval.batch_stats.is_empty() {
            let weight = S::of(range.len() as f64) / S::of(self.batch_len() as f64);
            let means = eval.batch_stats.iter().map(|s| s.mean.clone()).collect();
            let vars = eval.batch_stats.iter().map(|s| s.unbiased_var()).collect();
            self.pending.push((weight, means, vars));
        }
        Ok((eval.loss, eval.grad))
    }

    fn finish_step(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let pending = std::mem::take(&mut self.pending);
        for (layer, state) in self.model.norm_states.iter_mut().enumerate() {
            let c = state.features();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for (w, means, vars) in &pending {
                for k in 0..c {
                    mean[k] = mean[k] + *w * means[layer][k];
                    var[k] = var[k] + *w * vars[layer][k];
                }
            }
            state.update_with(&mean, &var);
        }
        Ok(())
    }
}

/// One optimizer step of `kind` on a model minibatch.
pub fn sam_step<S: Scalar>(
    model: &mut Model<S>,
    x: &Tensor<S>,
    targets: &[usize],
    optimizer: &mut SamOptimizer<S>,
    kind: OptimizerKind,
    lr: S,
    smoothing: S,
) -> Result<StepMetrics<S>> {
    let mut params = std::mem::take(&mut model.params);
    let result = (|| {
        let mut objective = ModelObjective::new(model, x, targets, smoothing)?;
        optimizer.step(&mut params, &mut objective, kind, lr)
    })();
    model.params = params;
    result
}
