//! Layer descriptors, parameter storage and the digits ConvNet.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool2d {
        window: usize,
    },
    Flatten,
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        relu: bool,
    },
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d { name, .. } | Layer::Dense { name, .. } => Some(name),
            _ => None,
        }
    }

    fn has_relu(&self) -> bool {
        matches!(self, Layer::Conv2d { relu: true, .. } | Layer::Dense { relu: true, .. })
    }

    /// `(weight shape, bias shape, fan_in)` for parameterized layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => Some((vec![in_features, out_features], vec![out_features], in_features)),
            _ => None,
        }
    }
}

/// An ordered stack of layers ending in class logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape: `[C, H, W]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Names of layers whose post-relu outputs feed coverage.
    pub tracked_layers: Vec<String>,
    pub num_classes: usize,
}

/// Widths of the digits ConvNet. The layer sequence is fixed; widths are not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetWidths {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub fc1_units: usize,
    pub kernel: usize,
    pub padding: usize,
    pub image_size: usize,
}

impl Default for ConvNetWidths {
    fn default() -> Self {
        Self {
            conv1_channels: 64,
            conv2_channels: 128,
            fc1_units: 1024,
            kernel: 5,
            padding: 2,
            image_size: 32,
        }
    }
}

impl ModelSpec {
    /// conv-relu-pool, conv-relu-pool, fc-relu, fc (logits).
    pub fn digits_convnet(num_classes: usize, input_channels: usize, widths: &ConvNetWidths) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if input_channels == 0 {
            return Err(Error::InvalidArgument("input must have at least one channel".into()));
        }
        let conv_out = |size: usize| -> Result<usize> {
            let padded = size + 2 * widths.padding;
            if padded < widths.kernel {
                return Err(Error::InvalidArgument(format!(
                    "kernel {} does not fit a {size}x{size} input",
                    widths.kernel
                )));
            }
            Ok(padded - widths.kernel + 1)
        };
        let s1 = conv_out(widths.image_size)? / 2;
        let s2 = conv_out(s1)? / 2;
        if s2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} collapses to zero after pooling",
                widths.image_size
            )));
        }
        let spec = Self {
            input_shape: vec![input_channels, widths.image_size, widths.image_size],
            layers: vec![
                Layer::Conv2d {
                    name: "conv1".into(),
                    in_channels: input_channels,
                    out_channels: widths.conv1_channels,
                    kernel: widths.kernel,
                    stride: 1,
                    padding: widths.padding,
                    relu: true,
                },
                Layer::MaxPool2d { window: 2 },
                Layer::Conv2d {
                    name: "conv2".into(),
                    in_channels: widths.conv1_channels,
                    out_channels: widths.conv2_channels,
                    kernel: widths.kernel,
                    stride: 1,
                    padding: widths.padding,
                    relu: true,
                },
                Layer::MaxPool2d { window: 2 },
                Layer::Flatten,
                Layer::Dense {
                    name: "fc1".into(),
                    in_features: widths.conv2_channels * s2 * s2,
                    out_features: widths.fc1_units,
                    relu: true,
                },
                Layer::Dense {
                    name: "fc2".into(),
                    in_features: widths.fc1_units,
                    out_features: num_classes,
                    relu: false,
                },
            ],
            tracked_layers: vec!["conv1".into(), "conv2".into(), "fc1".into()],
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-layer perceptron: dense-relu (tracked), dense (logits).
    pub fn perceptron(inputs: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_shape: vec![inputs],
            layers: vec![
                Layer::Dense {
                    name: "fc1".into(),
                    in_features: inputs,
                    out_features: hidden,
                    relu: true,
                },
                Layer::Dense {
                    name: "fc2".into(),
                    in_features: hidden,
                    out_features: num_classes,
                    relu: false,
                },
            ],
            tracked_layers: vec!["fc1".into()],
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        for t in &self.tracked_layers {
            let layer = self
                .layers
                .iter()
                .find(|l| l.name() == Some(t.as_str()))
                .ok_or_else(|| Error::InvalidArgument(format!("tracked layer {t} does not exist")))?;
            if !layer.has_relu() {
                return Err(Error::InvalidArgument(format!(
                    "tracked layer {t} has no post-activation output"
                )));
            }
        }
        match self.layers.last() {
            Some(Layer::Dense {
                out_features,
                relu: false,
                ..
            }) if *out_features == self.num_classes => Ok(()),
            _ => Err(Error::InvalidArgument(
                "final layer must be a dense layer producing one logit per class".into(),
            )),
        }
    }

    /// Neuron count of each tracked layer, in tracking order.
    pub fn tracked_sizes(&self) -> Vec<usize> {
        self.tracked_layers
            .iter()
            .filter_map(|t| {
                self.layers.iter().find_map(|l| match l {
                    Layer::Conv2d { name, out_channels, .. } if name == t => Some(*out_channels),
                    Layer::Dense { name, out_features, .. } if name == t => Some(*out_features),
                    _ => None,
                })
            })
            .collect()
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let (Some(name), Some((w, b, _))) = (layer.name(), layer.param_shapes()) {
                out.push((format!("{name}.weight"), w));
                out.push((format!("{name}.bias"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub layer: String,
    pub tensor: Tensor<T>,
}

/// Parameters in a fixed, spec-defined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element> {
    pub entries: Vec<ParamEntry<T>>,
    pub rng_seed: u64,
}

impl<T: Element> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// Replaces every tensor, keeping names and order.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                if t.shape() != e.tensor.shape() {
                    return Err(Error::shape(
                        "param_store",
                        format!("{}: {:?} vs {:?}", e.name, t.shape(), e.tensor.shape()),
                    ));
                }
                Ok(ParamEntry {
                    name: e.name.clone(),
                    layer: e.layer.clone(),
                    tensor: t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entries,
            rng_seed: self.rng_seed,
        })
    }

    /// Records every parameter as a differentiable leaf.
    pub fn register(&self, tape: &Tape<T>) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), tape.param(e.tensor.clone())))
            .collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn register_frozen(&self, tape: &Tape<T>) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), tape.constant(e.tensor.clone())))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    layer: e.layer.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

/// Kaiming fan-in normal weights (std = sqrt(2 / fan_in)) and zero biases.
pub fn init_params<T: Element>(spec: &ModelSpec, rng_seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut entries = Vec::new();
    for layer in &spec.layers {
        let (Some(name), Some((w_shape, b_shape, fan_in))) = (layer.name(), layer.param_shapes()) else {
            continue;
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = w_shape.iter().product();
        let w: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * std)
            })
            .collect();
        entries.push(ParamEntry {
            name: format!("{name}.weight"),
            layer: name.to_string(),
            tensor: Tensor::new(w_shape, w).expect("layout matches"),
        });
        entries.push(ParamEntry {
            name: format!("{name}.bias"),
            layer: name.to_string(),
            tensor: Tensor::zeros(b_shape),
        });
    }
    ParamStore { entries, rng_seed }
}

/// Digits ConvNet with default widths and freshly initialized parameters.
pub fn build_digits_convnet(
    num_classes: usize,
    input_channels: usize,
    rng_seed: u64,
) -> Result<(ModelSpec, ParamStore<f32>)> {
    let spec = ModelSpec::digits_convnet(num_classes, input_channels, &ConvNetWidths::default())?;
    let params = init_params(&spec, rng_seed);
    Ok((spec, params))
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Post-activation outputs of the tracked layers, in tracking order.
    pub layer_outputs: Vec<Var>,
}

/// Runs `input` through the model. `params` must follow `spec.param_layout()`.
pub fn forward<T: Element>(
    tape: &Tape<T>,
    spec: &ModelSpec,
    params: &[(String, Var)],
    input: Var,
) -> Result<ForwardOutput> {
    let layout = spec.param_layout();
    if params.len() != layout.len() {
        return Err(Error::InvalidArgument(format!(
            "model expects {} parameters, got {}",
            layout.len(),
            params.len()
        )));
    }
    let in_shape = tape.shape(input);
    if in_shape.len() != spec.input_shape.len() + 1 || in_shape[1..] != spec.input_shape[..] {
        return Err(Error::shape(
            "forward",
            format!(
                "batch {in_shape:?} does not match per-sample input {:?}",
                spec.input_shape
            ),
        ));
    }
    let mut tracked = vec![None; spec.tracked_layers.len()];
    let mut x = input;
    let mut next = 0;
    for layer in &spec.layers {
        match layer {
            Layer::Conv2d {
                name,
                stride,
                padding,
                relu,
                ..
            } => {
                let (w, b) = (params[next].1, params[next + 1].1);
                next += 2;
                let y = tape.conv2d(x, w, *stride, *padding)?;
                x = tape.add_channel_bias(y, b)?;
                if *relu {
                    x = tape.relu(x)?;
                }
                mark(spec, &mut tracked, name, x);
            }
            Layer::MaxPool2d { window } => x = tape.maxpool2d(x, *window)?,
            Layer::Flatten => {
                let s = tape.shape(x);
                x = tape.reshape(x, vec![s[0], s[1..].iter().product()])?;
            }
            Layer::Dense { name, relu, .. } => {
                let (w, b) = (params[next].1, params[next + 1].1);
                next += 2;
                let y = tape.matmul(x, w)?;
                x = tape.add_channel_bias(y, b)?;
                if *relu {
                    x = tape.relu(x)?;
                }
                mark(spec, &mut tracked, name, x);
            }
        }
    }
    Ok(ForwardOutput {
        logits: x,
        layer_outputs: tracked.into_iter().map(|v| v.expect("validated spec")).collect(),
    })
}

fn mark(spec: &ModelSpec, tracked: &mut [Option<Var>], name: &str, v: Var) {
    if let Some(i) = spec.tracked_layers.iter().position(|t| t == name) {
        tracked[i] = Some(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_widths() -> ConvNetWidths {
        ConvNetWidths {
            conv1_channels: 4,
            conv2_channels: 6,
            fc1_units: 16,
            ..ConvNetWidths::default()
        }
    }

    #[test]
    fn default_convnet_parameter_count() {
        // Frozen from a layer-by-layer count (scripts/param_count.py):
        // conv1 3*64*25+64, conv2 64*128*25+128, fc1 8192*1024+1024, fc2 1024*10+10.
        let (spec, params) = build_digits_convnet(10, 3, 0).unwrap();
        assert_eq!(spec.param_count(), 8_609_674);
        assert_eq!(params.scalar_count(), 8_609_674);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let spec = ModelSpec::digits_convnet(10, 3, &small_widths()).unwrap();
        let a = init_params::<f32>(&spec, 7);
        let b = init_params::<f32>(&spec, 7);
        let c = init_params::<f32>(&spec, 8);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = ModelSpec::digits_convnet(10, 3, &small_widths()).unwrap();
        let p = init_params::<f32>(&spec, 1);
        for e in p.entries.iter().filter(|e| e.name.ends_with(".bias")) {
            assert!(e.tensor.data().iter().all(|&v| v == 0.0), "{}", e.name);
        }
    }

    #[test]
    fn kaiming_variance_of_a_wide_conv_weight() {
        let (_, params) = build_digits_convnet(10, 3, 3).unwrap();
        let w = params.get("conv2.weight").unwrap();
        assert!(w.len() >= 10_000);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (64.0 * 25.0);
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
    }

    #[test]
    fn forward_shapes_and_tracked_outputs() {
        let spec = ModelSpec::digits_convnet(10, 3, &small_widths()).unwrap();
        let params = init_params::<f32>(&spec, 0);
        let tape = Tape::new();
        let vars = params.register_frozen(&tape);
        let x = tape.constant(Tensor::full(vec![32, 3, 32, 32], 0.5));
        let out = forward(&tape, &spec, &vars, x).unwrap();
        assert_eq!(tape.shape(out.logits), vec![32, 10]);
        assert_eq!(out.layer_outputs.len(), spec.tracked_layers.len());
        assert_eq!(tape.shape(out.layer_outputs[0]), vec![32, 4, 32, 32]);
        assert_eq!(tape.shape(out.layer_outputs[1]), vec![32, 6, 16, 16]);
        assert_eq!(tape.shape(out.layer_outputs[2]), vec![32, 16]);
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let spec = ModelSpec::digits_convnet(10, 3, &small_widths()).unwrap();
        let params = init_params::<f32>(&spec, 0);
        let zeros = params
            .with_tensors(
                params
                    .tensors()
                    .iter()
                    .map(|t| Tensor::zeros(t.shape().to_vec()))
                    .collect(),
            )
            .unwrap();
        let tape = Tape::new();
        let vars = zeros.register_frozen(&tape);
        let x = tape.constant(Tensor::full(vec![2, 3, 32, 32], 0.7));
        let out = forward(&tape, &spec, &vars, x).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
        for o in out.layer_outputs {
            assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let spec = ModelSpec::digits_convnet(10, 3, &small_widths()).unwrap();
        let params = init_params::<f32>(&spec, 5);
        let before = params.clone();
        let run = || {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let data: Vec<f64> = (0..2 * 3 * 32 * 32).map(|i| (i % 17) as f64 / 17.0).collect();
            let x = tape.constant(Tensor::from_f64(vec![2, 3, 32, 32], &data).unwrap());
            let out = forward(&tape, &spec, &vars, x).unwrap();
            tape.value(out.logits)
        };
        assert!(run().bit_eq(&run()));
        assert!(params.bit_eq(&before));
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let spec = ModelSpec::perceptron(4, 3, 2).unwrap();
        let params = init_params::<f64>(&spec, 0);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let x = tape.constant(Tensor::zeros(vec![2, 5]));
        assert!(forward(&tape, &spec, &vars, x).is_err());
    }

    #[test]
    fn tracked_outputs_are_reachable_from_a_loss_on_them() {
        let spec = ModelSpec::perceptron(4, 3, 2).unwrap();
        let params = init_params::<f64>(&spec, 2);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let x = tape.constant(Tensor::full(vec![2, 4], 0.3));
        let out = forward(&tape, &spec, &vars, x).unwrap();
        let loss = tape.sum(out.layer_outputs[0]).unwrap();
        let ids: Vec<Var> = vars.iter().map(|(_, v)| *v).collect();
        let g = tape.backward(loss, &ids, false).unwrap();
        assert!(tape.value(g[0]).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::digits_convnet(1, 3, &ConvNetWidths::default()).is_err());
        let bad = ConvNetWidths {
            image_size: 2,
            padding: 0,
            ..ConvNetWidths::default()
        };
        assert!(ModelSpec::digits_convnet(10, 3, &bad).is_err());
        let mut spec = ModelSpec::perceptron(4, 3, 2).unwrap();
        spec.tracked_layers = vec!["fc2".into()];
        assert!(spec.validate().is_err());
    }
}
