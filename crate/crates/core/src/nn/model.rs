use serde::{Deserialize, Serialize};

use super::layers::{batch_norm_apply, layer_norm_forward, BatchStats, ForwardMode, NormState};
use super::loss::cross_entropy_ls;
use super::registry::{ParamTag, ParamView, Registry};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Linear -> BatchNorm -> ReLU per hidden width, then a linear head.
    /// `dims` = [input, hidden..., classes].
    MlpBn { dims: Vec<usize> },
    /// As `MlpBn` with LayerNorm.
    MlpLn { dims: Vec<usize> },
    /// conv3x3 -> BatchNorm -> ReLU per entry of `channels`, a 2x2 max-pool,
    /// then a linear head. `input` = [channels, height, width].
    MiniConvBn {
        input: [usize; 3],
        channels: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    #[default]
    All,
    /// Normalization scale/shift frozen at 1/0.
    FixNorm,
    /// Only normalization scale/shift are trained.
    OnlyNorm,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "default_true")]
    pub norm_affine_enabled: bool,
    #[serde(default)]
    pub trainable_scope: TrainableScope,
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            norm_affine_enabled: true,
            trainable_scope: TrainableScope::All,
        }
    }

    pub fn mlp_bn(dims: &[usize]) -> Self {
        Self::new(Architecture::MlpBn { dims: dims.to_vec() })
    }

    pub fn mlp_ln(dims: &[usize]) -> Self {
        Self::new(Architecture::MlpLn { dims: dims.to_vec() })
    }

    pub fn mini_conv_bn(input: [usize; 3], channels: &[usize], classes: usize) -> Self {
        Self::new(Architecture::MiniConvBn {
            input,
            channels: channels.to_vec(),
            classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::MlpBn { dims } | Architecture::MlpLn { dims } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return invalid("mlp dims need an input and an output width, all positive");
                }
            }
            Architecture::MiniConvBn {
                input,
                channels,
                classes,
            } => {
                if channels.is_empty() || channels.contains(&0) || input.contains(&0) || *classes == 0 {
                    return invalid("mini_conv_bn needs positive input dims, channels and classes");
                }
                if input[1] % 2 != 0 || input[2] % 2 != 0 {
                    return invalid("mini_conv_bn input height and width must be even");
                }
            }
        }
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        !matches!(self.architecture, Architecture::MlpLn { .. })
    }

    pub fn input_dim(&self) -> usize {
        match &self.architecture {
            Architecture::MlpBn { dims } | Architecture::MlpLn { dims } => dims[0],
            Architecture::MiniConvBn { input, .. } => input.iter().product(),
        }
    }

    pub fn classes(&self) -> usize {
        match &self.architecture {
            Architecture::MlpBn { dims } | Architecture::MlpLn { dims } => *dims.last().unwrap(),
            Architecture::MiniConvBn { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::enum_variant_names)]
enum Layer {
    Linear { weight: usize, bias: usize },
    Conv { kernel: usize },
    BatchNorm { state: usize, gamma: Option<usize>, beta: Option<usize> },
    LayerNorm { gamma: Option<usize>, beta: Option<usize> },
    Relu,
    MaxPool,
    ToImage([usize; 3]),
    Flatten,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward<S> {
    pub logits: Var,
    /// One tape variable per registry view, in registry order.
    pub params: Vec<Var>,
    /// Train-mode statistics of every BatchNorm layer, in layer order.
    pub batch_stats: Vec<BatchStats<S>>,
}

/// Loss, flat gradient and side outputs of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub loss: S,
    pub grad: Vec<S>,
    pub logits: Tensor<S>,
    pub batch_stats: Vec<BatchStats<S>>,
}

/// A network with a flat parameter vector and its registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub spec: ModelSpec,
    pub registry: Registry,
    pub params: Vec<S>,
    pub norm_states: Vec<NormState<S>>,
    layers: Vec<Layer>,
}

struct Builder {
    registry: Registry,
    layers: Vec<Layer>,
    norm_states: usize,
    norm_widths: Vec<usize>,
    layer_id: usize,
    affine: bool,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let weight = self
            .registry
            .push(format!("{name}.weight"), vec![fan_in, fan_out], ParamTag::Weight, self.layer_id);
        let bias = self
            .registry
            .push(format!("{name}.bias"), vec![fan_out], ParamTag::Bias, self.layer_id);
        self.layers.push(Layer::Linear { weight, bias });
        self.layer_id += 1;
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        let kernel = self.registry.push(
            format!("{name}.weight"),
            vec![c_out, c_in, 3, 3],
            ParamTag::Weight,
            self.layer_id,
        );
        self.layers.push(Layer::Conv { kernel });
        self.layer_id += 1;
    }

    fn affine_params(&mut self, name: &str, width: usize) -> (Option<usize>, Option<usize>) {
        if !self.affine {
            return (None, None);
        }
        let g = self
            .registry
            .push(format!("{name}.gamma"), vec![width], ParamTag::NormWeight, self.layer_id);
        let b = self
            .registry
            .push(format!("{name}.beta"), vec![width], ParamTag::NormBias, self.layer_id);
        (Some(g), Some(b))
    }

    fn batch_norm(&mut self, name: &str, width: usize) {
        let (gamma, beta) = self.affine_params(name, width);
        self.layers.push(Layer::BatchNorm {
            state: self.norm_states,
            gamma,
            beta,
        });
        self.norm_states += 1;
        self.norm_widths.push(width);
        self.layer_id += 1;
    }

    fn layer_norm(&mut self, name: &str, width: usize) {
        let (gamma, beta) = self.affine_params(name, width);
        self.layers.push(Layer::LayerNorm { gamma, beta });
        self.layer_id += 1;
    }
}

fn structure(spec: &ModelSpec) -> Result<Builder> {
    spec.validate()?;
    let mut b = Builder {
        registry: Registry::new(),
        layers: Vec::new(),
        norm_states: 0,
        norm_widths: Vec::new(),
        layer_id: 0,
        affine: spec.norm_affine_enabled,
    };
    match &spec.architecture {
        Architecture::MlpBn { dims } | Architecture::MlpLn { dims } => {
            let bn = matches!(spec.architecture, Architecture::MlpBn { .. });
            let last = dims.len() - 2;
            for (i, pair) in dims.windows(2).enumerate() {
                b.linear(&format!("fc{i}"), pair[0], pair[1]);
                if i < last {
                    if bn {
                        b.batch_norm(&format!("bn{i}"), pair[1]);
                    } else {
                        b.layer_norm(&format!("ln{i}"), pair[1]);
                    }
                    b.layers.push(Layer::Relu);
                }
            }
        }
        Architecture::MiniConvBn {
            input,
            channels,
            classes,
        } => {
            b.layers.push(Layer::ToImage(*input));
            let mut c_in = input[0];
            for (i, &c) in channels.iter().enumerate() {
                b.conv(&format!("conv{i}"), c_in, c);
                b.batch_norm(&format!("bn{i}"), c);
                b.layers.push(Layer::Relu);
                c_in = c;
            }
            b.layers.push(Layer::MaxPool);
            b.layers.push(Layer::Flatten);
            let flat = c_in * (input[1] / 2) * (input[2] / 2);
            b.linear("head", flat, *classes);
        }
    }
    Ok(b)
}

/// Build and initialize a model: He-uniform weights, zero biases, gamma 1, beta 0.
pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<S>> {
    let b = structure(spec)?;
    let mut rng = Rng::new(seed);
    let mut params = Vec::with_capacity(b.registry.total());
    for v in b.registry.views() {
        match v.tag {
            ParamTag::Weight => {
                let fan_in: usize = if v.shape.len() == 4 {
                    v.shape[1] * 9
                } else {
                    v.shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                params.extend((0..v.len).map(|_| S::of(rng.uniform_range(-bound, bound))));
            }
            ParamTag::Bias | ParamTag::NormBias => params.extend((0..v.len).map(|_| S::zero())),
            ParamTag::NormWeight => params.extend((0..v.len).map(|_| S::one())),
        }
    }
    let norm_states = b.norm_widths.iter().map(|&w| NormState::new(w)).collect();
    Ok(Model {
        spec: spec.clone(),
        registry: b.registry,
        params,
        norm_states,
        layers: b.layers,
    })
}

impl<S: Scalar> Model<S> {
    /// Reassemble a model from persisted parts, checking them against the spec.
    pub fn from_parts(spec: ModelSpec, params: Vec<S>, norm_states: Vec<NormState<S>>) -> Result<Self> {
        let b = structure(&spec)?;
        if params.len() != b.registry.total() {
            return invalid(format!(
                "expected {} parameters, got {}",
                b.registry.total(),
                params.len()
            ));
        }
        if norm_states.len() != b.norm_widths.len()
            || norm_states.iter().zip(&b.norm_widths).any(|(s, &w)| s.features() != w)
        {
            return invalid("norm states do not match the architecture");
        }
        for s in &norm_states {
            s.validate()?;
        }
        Ok(Self {
            spec,
            registry: b.registry,
            params,
            norm_states,
            layers: b.layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.registry.total()
    }

    /// Coordinates the base optimizer may move under the trainable scope.
    pub fn trainable_mask(&self) -> Vec<bool> {
        match self.spec.trainable_scope {
            TrainableScope::All => vec![true; self.num_params()],
            TrainableScope::FixNorm => self.registry.coord_mask(|v| !v.tag.is_norm()),
            TrainableScope::OnlyNorm => self.registry.coord_mask(|v| v.tag.is_norm()),
        }
    }

    /// Forward pass at `params` (which need not be `self.params`).
    ///
    /// `grad_views[i]` selects whether view `i` is a gradient leaf; `None`
    /// requests gradients for every view.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        params: &[S],
        x: &Tensor<S>,
        mode: ForwardMode,
        grad_views: Option<&[bool]>,
    ) -> Result<Forward<S>> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: vec![self.num_params()],
                rhs: vec![params.len()],
            });
        }
        let in_dim = self.spec.input_dim();
        if x.shape().len() != 2 || x.shape()[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: vec![x.shape()[0], in_dim],
                rhs: x.shape().to_vec(),
            });
        }
        let vars: Vec<Var> = self
            .registry
            .views()
            .iter()
            .map(|v| {
                let want = grad_views.is_none_or(|g| g[v.param_id]);
                let t = Tensor::new(v.shape.clone(), params[v.range()].to_vec())
                    .expect("registry shapes are consistent");
                tape.leaf(t.with_requires_grad(want))
            })
            .collect();
        let batch = x.shape()[0];
        let mut h = tape.constant(x.clone());
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear { weight, bias } => {
                    let y = tape.matmul(h, vars[weight])?;
                    tape.add(y, vars[bias])?
                }
                Layer::Conv { kernel } => tape.conv2d_3x3(h, vars[kernel])?,
                Layer::BatchNorm { state, gamma, beta } => {
                    let (y, stats) = batch_norm_apply(
                        tape,
                        h,
                        gamma.map(|g| vars[g]),
                        beta.map(|b| vars[b]),
                        &self.norm_states[state],
                        mode,
                    )?;
                    batch_stats.extend(stats);
                    y
                }
                Layer::LayerNorm { gamma, beta } => layer_norm_forward(
                    tape,
                    h,
                    gamma.map(|g| vars[g]),
                    beta.map(|b| vars[b]),
                    S::of(super::layers::DEFAULT_NORM_EPS),
                )?,
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool => tape.max_pool2x2(h)?,
                Layer::ToImage([c, hh, ww]) => tape.reshape(h, vec![batch, c, hh, ww])?,
                Layer::Flatten => {
                    let n = tape.value(h).len() / batch;
                    tape.reshape(h, vec![batch, n])?
                }
            };
        }
        Ok(Forward {
            logits: h,
            params: vars,
            batch_stats,
        })
    }

    /// Cross-entropy loss and its flat gradient at `params`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        params: &[S],
        x: &Tensor<S>,
        targets: &[usize],
        mode: ForwardMode,
        smoothing: S,
        logit_normalize: bool,
        grad_views: Option<&[bool]>,
    ) -> Result<Evaluation<S>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, params, x, mode, grad_views)?;
        let loss = cross_entropy_ls(&mut tape, fwd.logits, targets, smoothing, logit_normalize)?;
        let loss_value = tape.value(loss).item()?;
        let mut grad = vec![S::zero(); self.num_params()];
        if tape.requires_grad(loss) {
            let grads = tape.backward(loss)?;
            for (view, var) in self.registry.views().iter().zip(&fwd.params) {
                if let Some(g) = grads.get(*var) {
                    grad[view.range()].copy_from_slice(g);
                }
            }
        }
        Ok(Evaluation {
            loss: loss_value,
            grad,
            logits: tape.value(fwd.logits).clone(),
            batch_stats: fwd.batch_stats,
        })
    }

    /// Loss only, no gradient.
    pub fn loss(
        &self,
        params: &[S],
        x: &Tensor<S>,
        targets: &[usize],
        mode: ForwardMode,
        smoothing: S,
        logit_normalize: bool,
    ) -> Result<S> {
        let none = vec![false; self.registry.views().len()];
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, params, x, mode, Some(&none))?;
        let loss = cross_entropy_ls(&mut tape, fwd.logits, targets, smoothing, logit_normalize)?;
        tape.value(loss).item()
    }

    /// Eval-mode logits at the model's own parameters.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let none = vec![false; self.registry.views().len()];
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &self.params, x, ForwardMode::Eval, Some(&none))?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Fold one set of train-mode batch statistics into the running stats.
    pub fn commit_stats(&mut self, stats: &[BatchStats<S>]) -> Result<()> {
        if stats.len() != self.norm_states.len() {
            return invalid(format!(
                "{} batch statistics for {} norm layers",
                stats.len(),
                self.norm_states.len()
            ));
        }
        for (state, s) in self.norm_states.iter_mut().zip(stats) {
            state.update(s);
        }
        Ok(())
    }

    pub fn views(&self) -> &[ParamView] {
        self.registry.views()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::norm_fraction;

    #[test]
    fn mlp_bn_parameter_count() {
        let m: Model<f64> = build_model(&ModelSpec::mlp_bn(&[784, 256, 128, 10]), 0).unwrap();
        assert_eq!(m.num_params(), 235_914);
        assert_eq!(m.registry.norm_count(), 768);
        assert_eq!(norm_fraction(&m.registry), 768.0 / 235_914.0);
        m.registry.validate_partition().unwrap();
    }

    #[test]
    fn mlp_ln_fraction() {
        let m: Model<f64> = build_model(&ModelSpec::mlp_ln(&[4, 4, 2]), 0).unwrap();
        assert_eq!(m.num_params(), 38);
        assert_eq!(norm_fraction(&m.registry), 8.0 / 38.0);
    }

    #[test]
    fn affine_disabled_has_no_norm_views() {
        let mut spec = ModelSpec::mlp_bn(&[5, 4, 3]);
        spec.norm_affine_enabled = false;
        let m: Model<f64> = build_model(&spec, 1).unwrap();
        assert_eq!(m.registry.norm_count(), 0);
        assert_eq!(norm_fraction(&m.registry), 0.0);
        assert_eq!(m.norm_states.len(), 1);
    }

    #[test]
    fn deterministic_init() {
        let spec = ModelSpec::mini_conv_bn([1, 4, 4], &[3, 2], 3);
        let a: Model<f64> = build_model(&spec, 9).unwrap();
        let b: Model<f64> = build_model(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c: Model<f64> = build_model(&spec, 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_values_by_tag() {
        let m: Model<f64> = build_model(&ModelSpec::mlp_bn(&[3, 4, 2]), 0).unwrap();
        for v in m.views() {
            let vals = &m.params[v.range()];
            match v.tag {
                ParamTag::NormWeight => assert!(vals.iter().all(|&x| x == 1.0)),
                ParamTag::NormBias | ParamTag::Bias => assert!(vals.iter().all(|&x| x == 0.0)),
                ParamTag::Weight => {
                    let bound = (6.0 / v.shape[0] as f64).sqrt();
                    assert!(vals.iter().all(|&x| x.abs() <= bound));
                }
            }
        }
    }

    #[test]
    fn unknown_architecture_is_a_parse_error() {
        let bad = r#"{"architecture": {"kind": "resnet", "dims": [2, 2]}}"#;
        assert!(serde_json::from_str::<ModelSpec>(bad).is_err());
        let good = r#"{"architecture": {"kind": "mlp_bn", "dims": [2, 3, 2]}}"#;
        let spec: ModelSpec = serde_json::from_str(good).unwrap();
        assert!(spec.norm_affine_enabled);
    }

    #[test]
    fn conv_forward_shapes() {
        let spec = ModelSpec::mini_conv_bn([2, 4, 6], &[3, 5], 4);
        let m: Model<f64> = build_model(&spec, 0).unwrap();
        let x = Tensor::new(vec![3, 48], (0..144).map(|i| (i as f64).sin()).collect()).unwrap();
        let e = m
            .loss_and_grad(&m.params, &x, &[0, 1, 3], ForwardMode::Train, 0.1, false, None)
            .unwrap();
        assert_eq!(e.logits.shape(), &[3, 4]);
        assert_eq!(e.batch_stats.len(), 2);
        assert_eq!(e.grad.len(), m.num_params());
    }

    #[test]
    fn trainable_masks() {
        let mut spec = ModelSpec::mlp_bn(&[3, 4, 2]);
        spec.trainable_scope = TrainableScope::OnlyNorm;
        let m: Model<f64> = build_model(&spec, 0).unwrap();
        assert_eq!(m.trainable_mask().iter().filter(|&&b| b).count(), 8);
        spec.trainable_scope = TrainableScope::FixNorm;
        let m: Model<f64> = build_model(&spec, 0).unwrap();
        assert_eq!(
            m.trainable_mask().iter().filter(|&&b| b).count(),
            m.num_params() - 8
        );
    }
}
