//! Sequential feed-forward models over a flat parameter store.
//!
//! Every parameter tensor carries its own [`Mask`]; forward passes always
//! read the effective value `w ⊙ mask`, with pruned coordinates read as
//! exactly `0.0`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops;
use crate::tape::{GradientSet, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Samples per forward chunk when evaluating without a tape.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Weight `inputs × outputs`, bias `outputs`.
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Kernel `filters × in_channels × size × size`, bias `filters`.
    Conv {
        name: String,
        in_channels: usize,
        filters: usize,
        size: usize,
    },
    MaxPool2,
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Self::Dense {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn conv(name: &str, in_channels: usize, filters: usize, size: usize) -> Self {
        Self::Conv {
            name: name.into(),
            in_channels,
            filters,
            size,
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Self::Dense { name, .. } | Self::Conv { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Shapes of the weight and bias tensors, for parametrised layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Self::Dense {
                inputs, outputs, ..
            } => Some((vec![inputs, outputs], vec![outputs])),
            Self::Conv {
                in_channels,
                filters,
                size,
                ..
            } => Some((vec![filters, in_channels, size, size], vec![filters])),
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Self::Dense {
                inputs, outputs, ..
            } => (inputs, outputs),
            Self::Conv {
                in_channels,
                filters,
                size,
                ..
            } => (in_channels * size * size, filters * size * size),
            _ => (0, 0),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |reason: String| Error::InvalidShape {
            shape: input.to_vec(),
            reason,
        };
        match self {
            Self::Dense {
                name,
                inputs,
                outputs,
            } => match input {
                [n] if n == inputs => Ok(vec![*outputs]),
                _ => Err(bad(format!("{name} expects [{inputs}]"))),
            },
            Self::Conv {
                name,
                in_channels,
                filters,
                size,
            } => match input {
                [c, h, w] if c == in_channels && h >= size && w >= size => {
                    Ok(vec![*filters, h - size + 1, w - size + 1])
                }
                _ => Err(bad(format!(
                    "{name} expects [{in_channels}, ≥{size}, ≥{size}]"
                ))),
            },
            Self::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(bad("max_pool2 expects [C, H≥2, W≥2]".into())),
            },
            Self::Relu => Ok(input.to_vec()),
            Self::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    /// e.g. `fc1.weight`
    pub name: String,
    /// Owning layer, e.g. `fc1`.
    pub layer: String,
    pub value: Tensor,
    pub mask: Mask,
}

impl Param {
    /// The tensor forward passes consume: pruned coordinates read as `0.0`.
    pub fn effective(&self) -> Tensor {
        let mut t = self.value.clone();
        self.mask.apply(t.data_mut());
        t
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of misclassified samples.
    pub top1_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
}

impl Model {
    /// Builds a model with freshly initialised parameters and all-alive masks.
    ///
    /// Weights are drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// biases start at zero.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let Some((w_shape, b_shape)) = layer.param_shapes() else {
                continue;
            };
            let name = layer.name().unwrap_or_default();
            let (fan_in, fan_out) = layer.fans();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-a, a).map_err(|e| Error::Config(e.to_string()))?;
            let n: usize = w_shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                layer: name.to_string(),
                value: Tensor::new(w_shape, w)?,
                mask: Mask::all_alive(n),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                layer: name.to_string(),
                mask: Mask::all_alive(b_shape[0]),
                value: Tensor::zeros(&b_shape),
            });
        }
        Self::from_parts(input_shape.to_vec(), layers, params)
    }

    /// Assembles a model from existing parameters, validating the layer chain
    /// and that every parameter matches its layer.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Param>,
    ) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
            params,
        };
        let shapes = model.layer_output_shapes()?;
        match shapes.last().map(Vec::as_slice) {
            Some([_classes]) => {}
            other => {
                return Err(Error::InvalidShape {
                    shape: other.map(<[usize]>::to_vec).unwrap_or_default(),
                    reason: "model must end in a flat logit vector".into(),
                })
            }
        }
        let mut expected = Vec::new();
        for layer in &model.layers {
            if let Some((w, b)) = layer.param_shapes() {
                expected.push(w);
                expected.push(b);
            }
        }
        if expected.len() != model.params.len()
            || expected
                .iter()
                .zip(&model.params)
                .any(|(s, p)| s.as_slice() != p.value.shape() || p.mask.len() != p.len())
        {
            return Err(Error::Config(
                "parameter tensors do not match the layer specs".into(),
            ));
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn alive_count(&self) -> usize {
        self.params.iter().map(|p| p.mask.alive_count()).sum()
    }

    pub fn pruned_count(&self) -> usize {
        self.param_count() - self.alive_count()
    }

    /// Names of the parametrised layers, in order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().filter_map(LayerSpec::name).collect()
    }

    /// Per-sample output shape of every layer (dry shape pass).
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.layer_output_shapes()
            .ok()
            .and_then(|s| s.last().map(|v| v[0]))
            .unwrap_or(0)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() < 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: x.shape().to_vec(),
                rhs: expected,
            });
        }
        Ok(())
    }

    /// Records a forward pass on `tape` and returns the logits.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Var> {
        self.check_input(&x)?;
        let mut h = tape.input(x)?;
        let mut next_param = 0;
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let w = &self.params[next_param];
                    let b = &self.params[next_param + 1];
                    let wv = tape.param(ParamId(next_param), w.effective())?;
                    let bv = tape.param(ParamId(next_param + 1), b.effective())?;
                    next_param += 2;
                    let z = if matches!(layer, LayerSpec::Dense { .. }) {
                        tape.matmul(h, wv)?
                    } else {
                        tape.conv2d(h, wv)?
                    };
                    tape.bias_add(z, bv)?
                }
                LayerSpec::MaxPool2 => tape.max_pool2(h)?,
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Mean cross-entropy of a batch and its gradient for every parameter.
    pub fn loss_and_gradients(&self, x: Tensor, labels: &[usize]) -> Result<(f64, GradientSet)> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Tape-free forward pass.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut next_param = 0;
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let w = self.params[next_param].effective();
                    let b = self.params[next_param + 1].effective();
                    next_param += 2;
                    let z = if matches!(layer, LayerSpec::Dense { .. }) {
                        ops::matmul(&h, &w)?
                    } else {
                        ops::conv2d(&h, &w, false)?.0
                    };
                    ops::bias_add(&z, &b)?
                }
                LayerSpec::MaxPool2 => ops::max_pool2(&h)?.0,
                LayerSpec::Relu => ops::relu(&h),
                LayerSpec::Flatten => ops::flatten(&h),
            };
        }
        h.ensure_finite("forward")?;
        Ok(h)
    }

    /// Mean cross-entropy and top-1 error over a whole dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let x = data.slice(start, end)?;
            let labels = &data.labels()[start..end];
            let logits = self.logits(&x)?;
            loss_sum += ops::cross_entropy_per_sample(&logits, labels)?
                .iter()
                .sum::<f64>();
            wrong += argmax_rows(&logits)
                .iter()
                .zip(labels)
                .filter(|(p, l)| p != l)
                .count();
            start = end;
        }
        Ok(Evaluation {
            loss: loss_sum / n as f64,
            top1_error: wrong as f64 / n as f64,
        })
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// 784 → 300 → 100 → 10 fully connected network with ReLU activations.
pub fn build_lenet300(seed: u64) -> Result<Model> {
    Model::new(
        &[1, 28, 28],
        vec![
            LayerSpec::Flatten,
            LayerSpec::dense("fc1", 784, 300),
            LayerSpec::Relu,
            LayerSpec::dense("fc2", 300, 100),
            LayerSpec::Relu,
            LayerSpec::dense("fc3", 100, 10),
        ],
        seed,
    )
}

/// Caffe-style LeNet-5: conv(20, 5×5) → pool → conv(50, 5×5) → pool →
/// dense 500 → dense 10.
pub fn build_lenet5(seed: u64) -> Result<Model> {
    Model::new(
        &[1, 28, 28],
        vec![
            LayerSpec::conv("conv1", 1, 20, 5),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::conv("conv2", 20, 50, 5),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::dense("fc1", 800, 500),
            LayerSpec::Relu,
            LayerSpec::dense("fc2", 500, 10),
        ],
        seed,
    )
}

/// Fully connected ReLU network over flat inputs of width `inputs`.
pub fn build_mlp(inputs: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Model> {
    let mut layers = Vec::new();
    let mut width = inputs;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(LayerSpec::dense(&format!("fc{}", i + 1), width, h));
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(LayerSpec::dense(
        &format!("fc{}", hidden.len() + 1),
        width,
        classes,
    ));
    Model::new(&[inputs], layers, seed)
}
