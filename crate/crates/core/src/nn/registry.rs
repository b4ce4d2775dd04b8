use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    /// Normalization scale (gamma).
    NormWeight,
    /// Normalization shift (beta).
    NormBias,
    Weight,
    Bias,
}

impl ParamTag {
    pub const ALL: [ParamTag; 4] = [
        ParamTag::NormWeight,
        ParamTag::NormBias,
        ParamTag::Weight,
        ParamTag::Bias,
    ];

    pub fn is_norm(self) -> bool {
        matches!(self, ParamTag::NormWeight | ParamTag::NormBias)
    }

    /// Weight-like tags (including the normalization scale).
    pub fn is_weight_like(self) -> bool {
        matches!(self, ParamTag::NormWeight | ParamTag::Weight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::NormWeight => "norm_weight",
            ParamTag::NormBias => "norm_bias",
            ParamTag::Weight => "weight",
            ParamTag::Bias => "bias",
        }
    }
}

impl std::fmt::Display for ParamTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamView {
    pub param_id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub tag: ParamTag,
    pub layer_id: usize,
    /// One group per parameter tensor; layerwise norms are taken per group.
    pub layer_group_id: usize,
}

impl ParamView {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    views: Vec<ParamView>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from views, checking that they tile `[0, total)` in order.
    pub fn from_views(views: Vec<ParamView>) -> Result<Self> {
        let reg = Self { views };
        reg.validate_partition()?;
        Ok(reg)
    }

    /// Append a tensor directly after the last one.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, tag: ParamTag, layer_id: usize) -> usize {
        let param_id = self.views.len();
        let len = shape.iter().product();
        self.views.push(ParamView {
            param_id,
            name: name.into(),
            shape,
            offset: self.total(),
            len,
            tag,
            layer_id,
            layer_group_id: param_id,
        });
        param_id
    }

    pub fn views(&self) -> &[ParamView] {
        &self.views
    }

    pub fn view(&self, param_id: usize) -> &ParamView {
        &self.views[param_id]
    }

    pub fn total(&self) -> usize {
        self.views.last().map_or(0, |v| v.offset + v.len)
    }

    pub fn validate_partition(&self) -> Result<()> {
        let mut next = 0;
        for (i, v) in self.views.iter().enumerate() {
            if v.param_id != i {
                return invalid(format!("param_id {} at position {i}", v.param_id));
            }
            if v.offset != next {
                return invalid(format!(
                    "view {} starts at {} but previous ends at {next}",
                    v.name, v.offset
                ));
            }
            if v.len == 0 || v.len != v.shape.iter().product::<usize>() {
                return invalid(format!("view {} has inconsistent length", v.name));
            }
            next += v.len;
        }
        Ok(())
    }

    /// Per-coordinate tag.
    pub fn coord_tags(&self) -> Vec<ParamTag> {
        let mut out = Vec::with_capacity(self.total());
        for v in &self.views {
            out.extend(std::iter::repeat_n(v.tag, v.len));
        }
        out
    }

    /// Per-coordinate predicate over the owning view.
    pub fn coord_mask(&self, pred: impl Fn(&ParamView) -> bool) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total());
        for v in &self.views {
            let keep = pred(v);
            out.extend(std::iter::repeat_n(keep, v.len));
        }
        out
    }

    pub fn count(&self, pred: impl Fn(&ParamView) -> bool) -> usize {
        self.views.iter().filter(|v| pred(v)).map(|v| v.len).sum()
    }

    pub fn norm_count(&self) -> usize {
        self.count(|v| v.tag.is_norm())
    }
}

/// Fraction of parameters that are normalization scale/shift.
pub fn norm_fraction(registry: &Registry) -> f64 {
    let total = registry.total();
    if total == 0 {
        return 0.0;
    }
    registry.norm_count() as f64 / total as f64
}
