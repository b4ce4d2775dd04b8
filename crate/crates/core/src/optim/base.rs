use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseOptimizer {
    /// `v <- mu v + g + lambda w; w <- w - lr v` (L2 decay folded into the gradient).
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay: `w <- w (1 - lr lambda)` then the
    /// bias-corrected Adam update.
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl BaseOptimizer {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        BaseOptimizer::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        BaseOptimizer::AdamW {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            BaseOptimizer::Sgd { lr, .. } | BaseOptimizer::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr()));
        }
        match *self {
            BaseOptimizer::Sgd {
                momentum,
                weight_decay,
                ..
            } if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 => {
                invalid("sgd needs momentum in [0, 1) and nonnegative weight decay")
            }
            BaseOptimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || !(eps > 0.0)
                || weight_decay < 0.0 =>
            {
                invalid("adamw needs betas in [0, 1), eps > 0 and nonnegative weight decay")
            }
            _ => Ok(()),
        }
    }

    pub fn init_state<S: Scalar>(&self, n: usize) -> OptimizerState<S> {
        match self {
            BaseOptimizer::Sgd { .. } => OptimizerState::Sgd {
                velocity: vec![S::zero(); n],
            },
            BaseOptimizer::AdamW { .. } => OptimizerState::AdamW {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
                t: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "S: Scalar")]
pub enum OptimizerState<S> {
    Sgd { velocity: Vec<S> },
    #[serde(rename = "adamw")]
    AdamW { m: Vec<S>, v: Vec<S>, t: u64 },
}

/// One descent step at learning rate `lr`; coordinates with
/// `trainable[i] == false` are left bit-unchanged.
pub fn base_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    trainable: &[bool],
    config: &BaseOptimizer,
    state: &mut OptimizerState<S>,
    lr: S,
) -> Result<()> {
    if !(lr > S::zero()) || !lr.is_finite() {
        return invalid(format!("learning rate must be positive, got {lr}"));
    }
    let n = params.len();
    if grads.len() != n || trainable.len() != n {
        return Err(Error::ShapeMismatch {
            op: "base_step",
            lhs: vec![n],
            rhs: vec![grads.len(), trainable.len()],
        });
    }
    match (config, state) {
        (
            &BaseOptimizer::Sgd {
                momentum,
                weight_decay,
                ..
            },
            OptimizerState::Sgd { velocity },
        ) => {
            let (mu, wd) = (S::of(momentum), S::of(weight_decay));
            for i in 0..n {
                if !trainable[i] {
                    continue;
                }
                velocity[i] = mu * velocity[i] + grads[i] + wd * params[i];
                params[i] = params[i] - lr * velocity[i];
            }
        }
        (
            &BaseOptimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            },
            OptimizerState::AdamW { m, v, t },
        ) => {
            *t += 1;
            let (b1, b2) = (S::of(beta1), S::of(beta2));
            let c1 = S::one() - b1.powi(*t as i32);
            let c2 = S::one() - b2.powi(*t as i32);
            let decay = S::one() - lr * S::of(weight_decay);
            let eps = S::of(eps);
            for i in 0..n {
                if !trainable[i] {
                    continue;
                }
                let g = grads[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        _ => return invalid("optimizer state does not match optimizer kind"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        let cfg = BaseOptimizer::sgd(0.1, 0.0, 0.0);
        let mut st = cfg.init_state::<f64>(1);
        let mut w = [1.0];
        base_step(&mut w, &[1.0], &[true], &cfg, &mut st, 0.1).unwrap();
        assert_eq!(w, [0.9]);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let cfg = BaseOptimizer::sgd(0.1, 0.9, 0.5);
        let mut st = cfg.init_state::<f64>(1);
        let mut w = [2.0];
        base_step(&mut w, &[1.0], &[true], &cfg, &mut st, 0.1).unwrap();
        // v = 1 + 0.5*2 = 2, w = 2 - 0.2
        assert!((w[0] - 1.8).abs() < 1e-15);
        base_step(&mut w, &[1.0], &[true], &cfg, &mut st, 0.1).unwrap();
        // v = 0.9*2 + 1 + 0.9 = 3.7, w = 1.8 - 0.37
        assert!((w[0] - 1.43).abs() < 1e-14);
    }

    #[test]
    fn frozen_coordinates_untouched() {
        let cfg = BaseOptimizer::adamw(0.01, 0.1);
        let mut st = cfg.init_state::<f64>(2);
        let mut w = [1.0, 1.0];
        for _ in 0..10 {
            base_step(&mut w, &[0.3, 0.3], &[true, false], &cfg, &mut st, 0.01).unwrap();
        }
        assert_eq!(w[1].to_bits(), 1.0f64.to_bits());
        assert!(w[0] < 1.0);
    }

    #[test]
    fn adamw_first_step() {
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> dw = -lr / (1 + eps)
        let cfg = BaseOptimizer::adamw(0.001, 0.0);
        let mut st = cfg.init_state::<f64>(1);
        let mut w = [0.5];
        base_step(&mut w, &[1.0], &[true], &cfg, &mut st, 0.001).unwrap();
        let dw = w[0] - 0.5;
        assert!((dw + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{dw}");
    }

    #[test]
    fn non_positive_lr_rejected() {
        let cfg = BaseOptimizer::sgd(0.1, 0.0, 0.0);
        let mut st = cfg.init_state::<f64>(1);
        let mut w = [1.0];
        assert!(base_step(&mut w, &[1.0], &[true], &cfg, &mut st, 0.0).is_err());
        assert!(BaseOptimizer::sgd(0.0, 0.0, 0.0).validate().is_err());
        assert!(BaseOptimizer::sgd(-1.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn mismatched_state_rejected() {
        let cfg = BaseOptimizer::sgd(0.1, 0.0, 0.0);
        let mut st = BaseOptimizer::adamw(0.1, 0.0).init_state::<f64>(1);
        assert!(base_step(&mut [1.0], &[1.0], &[true], &cfg, &mut st, 0.1).is_err());
    }
}
