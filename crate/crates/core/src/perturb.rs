//! Perturbation geometry for SAM and its adaptive variants.
//!
//! Every variant is a diagonal operator `T` over the flat parameter vector.
//! The ascent step is `eps = rho * T^2 g / ||T g||_2` for p = 2 and
//! `eps = rho * T * sign(g)` for p = inf. Parameter scopes (SAM-ON, no-norm,
//! random and Fisher-top-k masks) zero `T` outside the selected coordinates,
//! which leaves the scaled magnitude `||T^+ eps||_p` equal to `rho`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ParamTag, Registry};
use crate::rng::Rng;
use crate::scalar::{l2_norm, sign0, Scalar};

/// Below this `||T g||_2` the p = 2 step is skipped.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sam,
    ElemL2,
    ElemL2Orig,
    ElemLinf,
    LayerL2,
    Fisher,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sam,
        Variant::ElemL2,
        Variant::ElemL2Orig,
        Variant::ElemLinf,
        Variant::LayerL2,
        Variant::Fisher,
    ];

    pub fn p(self) -> PNorm {
        match self {
            Variant::ElemLinf => PNorm::Linf,
            _ => PNorm::L2,
        }
    }

    pub fn default_eta(self) -> f64 {
        match self {
            Variant::ElemL2Orig => 0.01,
            Variant::Fisher => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    L2,
    Linf,
}

/// Which coordinates the ascent step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scope {
    #[default]
    All,
    OnlyNorm,
    NoNorm,
    /// Fixed uniform-random subset keeping `round((1 - sparsity) * N)` coordinates.
    Random { sparsity: f64, seed: u64 },
    /// The `round((1 - sparsity) * N)` coordinates with the largest squared gradient.
    FisherTopk { sparsity: f64 },
}

impl Scope {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Scope::Random { sparsity, .. } | Scope::FisherTopk { sparsity }
                if !(0.0..=1.0).contains(&sparsity) =>
            {
                invalid(format!("sparsity {sparsity} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Scopes that never look at gradients and can be computed once.
    pub fn is_static(&self) -> bool {
        !matches!(self, Scope::FisherTopk { .. })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::OnlyNorm => f.write_str("only_norm"),
            Scope::NoNorm => f.write_str("no_norm"),
            Scope::Random { sparsity, seed } => write!(f, "random:{sparsity}:{seed}"),
            Scope::FisherTopk { sparsity } => write!(f, "fisher_topk:{sparsity}"),
        }
    }
}

/// Parses `all`, `only_norm`, `no_norm`, `random:<s>:<seed>`, `fisher_topk:<s>`.
impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad sparsity {v:?} in scope {s:?}")))
        };
        let scope = match parts.as_slice() {
            ["all"] => Scope::All,
            ["only_norm"] => Scope::OnlyNorm,
            ["no_norm"] => Scope::NoNorm,
            ["random", sp, seed] => Scope::Random {
                sparsity: num(sp)?,
                seed: seed
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad seed in scope {s:?}")))?,
            },
            ["fisher_topk", sp] => Scope::FisherTopk { sparsity: num(sp)? },
            _ => return invalid(format!("unknown scope {s:?}")),
        };
        scope.validate()?;
        Ok(scope)
    }
}

fn default_variant_eta() -> Option<f64> {
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub variant: Variant,
    pub rho: f64,
    /// Defaults to the variant's conventional value.
    #[serde(default = "default_variant_eta")]
    pub eta: Option<f64>,
    #[serde(default)]
    pub scope: Scope,
    /// Optional; must agree with the variant when given.
    #[serde(default)]
    pub p: Option<PNorm>,
}

impl PerturbSpec {
    pub fn new(variant: Variant, rho: f64, scope: Scope) -> Self {
        Self {
            variant,
            rho,
            eta: None,
            scope,
            p: None,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or_else(|| self.variant.default_eta())
    }

    pub fn p(&self) -> PNorm {
        self.variant.p()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return invalid(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.eta() >= 0.0) {
            return invalid("eta must be nonnegative");
        }
        if let Some(p) = self.p {
            if p != self.variant.p() {
                return invalid(format!("variant {:?} requires p = {:?}", self.variant, self.variant.p()));
            }
        }
        self.scope.validate()
    }
}

/// Diagonal of `T` aligned to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedOperator<S> {
    pub t_diag: Vec<S>,
    pub active_count: usize,
}

impl<S: Scalar> MaskedOperator<S> {
    pub fn new(t_diag: Vec<S>) -> Self {
        let active_count = t_diag.iter().filter(|&&t| t > S::zero()).count();
        Self {
            t_diag,
            active_count,
        }
    }

    /// Zero every entry where `mask` is false.
    pub fn restrict(mut self, mask: &[bool]) -> Self {
        for (t, &keep) in self.t_diag.iter_mut().zip(mask) {
            if !keep {
                *t = S::zero();
            }
        }
        Self::new(self.t_diag)
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.t_diag[i] > S::zero()
    }
}

/// Unmasked diagonal operator of `variant` at `params` with batch gradient `grads`.
pub fn normalization_operator<S: Scalar>(
    variant: Variant,
    params: &[S],
    grads: &[S],
    eta: S,
    registry: &Registry,
) -> Result<MaskedOperator<S>> {
    let n = registry.total();
    if params.len() != n || grads.len() != n {
        return Err(Error::ShapeMismatch {
            op: "normalization_operator",
            lhs: vec![n],
            rhs: vec![params.len(), grads.len()],
        });
    }
    let mut t = Vec::with_capacity(n);
    for view in registry.views() {
        let w = &params[view.range()];
        let g = &grads[view.range()];
        match variant {
            Variant::Sam => t.extend(std::iter::repeat_n(S::one(), view.len)),
            Variant::ElemL2 | Variant::ElemLinf => t.extend(w.iter().map(|x| x.abs())),
            Variant::ElemL2Orig => {
                if view.tag.is_weight_like() {
                    t.extend(w.iter().map(|x| x.abs() + eta));
                } else {
                    t.extend(std::iter::repeat_n(S::one() + eta, view.len));
                }
            }
            Variant::LayerL2 => {
                let norm = l2_norm(w);
                t.extend(std::iter::repeat_n(norm, view.len));
            }
            Variant::Fisher => {
                t.extend(g.iter().map(|&gi| S::one() / (S::one() + eta * gi * gi).sqrt()));
            }
        }
    }
    Ok(MaskedOperator::new(t))
}

/// Boolean coordinate mask for `scope`. `grads` is required for `fisher_topk`.
pub fn scope_mask<S: Scalar>(scope: &Scope, registry: &Registry, grads: Option<&[S]>) -> Result<Vec<bool>> {
    scope.validate()?;
    let total = registry.total();
    let keep = |sparsity: f64| ((1.0 - sparsity) * total as f64).round() as usize;
    Ok(match *scope {
        Scope::All => vec![true; total],
        Scope::OnlyNorm => registry.coord_mask(|v| v.tag.is_norm()),
        Scope::NoNorm => registry.coord_mask(|v| !v.tag.is_norm()),
        Scope::Random { sparsity, seed } => {
            let mut rng = Rng::new(seed);
            let order = rng.permutation(total);
            let mut mask = vec![false; total];
            for &i in &order[..keep(sparsity)] {
                mask[i] = true;
            }
            mask
        }
        Scope::FisherTopk { sparsity } => {
            let g = grads.ok_or_else(|| {
                Error::InvalidArgument("fisher_topk scope needs gradients".into())
            })?;
            if g.len() != total {
                return Err(Error::ShapeMismatch {
                    op: "scope_mask",
                    lhs: vec![total],
                    rhs: vec![g.len()],
                });
            }
            let mut order: Vec<usize> = (0..total).collect();
            // stable sort: equal scores keep ascending index order
            order.sort_by(|&a, &b| {
                let (fa, fb) = (g[a] * g[a], g[b] * g[b]);
                fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut mask = vec![false; total];
            for &i in &order[..keep(sparsity)] {
                mask[i] = true;
            }
            mask
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<S> {
    pub eps: Vec<S>,
    /// The step was skipped because the scaled gradient vanished.
    pub degenerate: bool,
    pub active_count: usize,
}

/// Ascent step for operator `op` restricted to `mask`.
pub fn perturbation<S: Scalar>(
    op: &MaskedOperator<S>,
    mask: &[bool],
    grads: &[S],
    rho: S,
    p: PNorm,
) -> Result<Perturbation<S>> {
    if !(rho > S::zero()) {
        return invalid(format!("rho must be positive, got {rho}"));
    }
    let n = op.t_diag.len();
    if mask.len() != n || grads.len() != n {
        return Err(Error::ShapeMismatch {
            op: "perturbation",
            lhs: vec![n],
            rhs: vec![mask.len(), grads.len()],
        });
    }
    let t: Vec<S> = op
        .t_diag
        .iter()
        .zip(mask)
        .map(|(&t, &keep)| if keep { t } else { S::zero() })
        .collect();
    let active = |i: usize| t[i] > S::zero();
    let active_count = (0..n).filter(|&i| active(i)).count();
    let mut eps = vec![S::zero(); n];
    let degenerate = match p {
        PNorm::L2 => {
            let tg: Vec<S> = t.iter().zip(grads).map(|(&ti, &gi)| ti * gi).collect();
            let norm = l2_norm(&tg);
            if norm < S::of(DEGENERATE_NORM) {
                true
            } else {
                for i in 0..n {
                    if active(i) {
                        eps[i] = rho * (t[i] * tg[i]) / norm;
                    }
                }
                false
            }
        }
        PNorm::Linf => {
            let mut any = false;
            for i in 0..n {
                if active(i) {
                    eps[i] = rho * t[i] * sign0(grads[i]);
                    any |= grads[i] != S::zero();
                }
            }
            !any
        }
    };
    Ok(Perturbation {
        eps,
        degenerate,
        active_count,
    })
}

/// `||T^+ eps||_p` over the coordinates where `T > 0`.
pub fn scaled_norm<S: Scalar>(op: &MaskedOperator<S>, eps: &[S], p: PNorm) -> S {
    let scaled = op
        .t_diag
        .iter()
        .zip(eps)
        .filter(|(&t, _)| t > S::zero())
        .map(|(&t, &e)| e / t);
    match p {
        PNorm::L2 => scaled.fold(S::zero(), |acc, v| acc + v * v).sqrt(),
        PNorm::Linf => scaled.fold(S::zero(), |acc, v| acc.max(v.abs())),
    }
}

/// A computed ascent step together with the operator that produced it.
#[derive(Debug, Clone)]
pub struct AscentStep<S> {
    pub operator: MaskedOperator<S>,
    pub perturbation: Perturbation<S>,
    pub scaled_norm: S,
}

/// Operator, scope restriction and step in one call.
///
/// `mask` overrides the scope (used for masks drawn once per run).
pub fn ascent_step<S: Scalar>(
    spec: &PerturbSpec,
    params: &[S],
    grads: &[S],
    registry: &Registry,
    mask: Option<&[bool]>,
) -> Result<AscentStep<S>> {
    spec.validate()?;
    let owned;
    let mask = match mask {
        Some(m) => m,
        None => {
            owned = scope_mask(&spec.scope, registry, Some(grads))?;
            &owned
        }
    };
    let operator = normalization_operator(spec.variant, params, grads, S::of(spec.eta()), registry)?
        .restrict(mask);
    let perturbation = perturbation(&operator, mask, grads, S::of(spec.rho), spec.p())?;
    let scaled_norm = scaled_norm(&operator, &perturbation.eps, spec.p());
    Ok(AscentStep {
        operator,
        perturbation,
        scaled_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagCount {
    pub active: usize,
    pub total: usize,
}

/// Fraction of parameters not perturbed, with per-tag breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total: usize,
    pub active: usize,
    pub sparsity: f64,
    pub per_tag: BTreeMap<ParamTag, TagCount>,
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "active {} of {} (sparsity {:.5}%)",
            self.active,
            self.total,
            100.0 * self.sparsity
        )?;
        for (tag, c) in &self.per_tag {
            writeln!(f, "  {tag:<12} {:>10} / {}", c.active, c.total)?;
        }
        Ok(())
    }
}

pub fn sparsity_report(mask: &[bool], registry: &Registry) -> Result<SparsityReport> {
    let total = registry.total();
    if mask.len() != total {
        return Err(Error::ShapeMismatch {
            op: "sparsity_report",
            lhs: vec![total],
            rhs: vec![mask.len()],
        });
    }
    let mut per_tag: BTreeMap<ParamTag, TagCount> = ParamTag::ALL
        .iter()
        .map(|&t| (t, TagCount { active: 0, total: 0 }))
        .collect();
    for v in registry.views() {
        let entry = per_tag.get_mut(&v.tag).expect("all tags present");
        entry.total += v.len;
        entry.active += mask[v.range()].iter().filter(|&&b| b).count();
    }
    let active = mask.iter().filter(|&&b| b).count();
    Ok(SparsityReport {
        total,
        active,
        sparsity: if total == 0 {
            0.0
        } else {
            1.0 - active as f64 / total as f64
        },
        per_tag,
    })
}
