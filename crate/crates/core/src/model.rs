//! Declarative architectures, parameter stores and initializers.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

/// Name of the final linear layer every [`ModelSpec`] ends with.
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("parameter `{0}` missing from the store")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("mask does not match parameters: {0}")]
    MaskMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_two() -> usize {
    2
}
fn default_true() -> bool {
    true
}

/// One entry of a sequential architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Linear {
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        #[serde(default = "default_two")]
        kernel: usize,
        #[serde(default = "default_two")]
        stride: usize,
    },
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Gap,
    Flatten,
    /// ResNet bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, plus shortcut.
    Bottleneck {
        mid_channels: usize,
        out_channels: usize,
        #[serde(default = "default_one")]
        stride: usize,
    },
}

impl LayerSpec {
    /// Conv layer with the default 3×3 kernel, stride 1, padding 1 and a bias.
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerSpec::Linear {
            out_features,
            bias: true,
        }
    }

    pub fn max_pool() -> Self {
        LayerSpec::MaxPool { kernel: 2, stride: 2 }
    }

    fn prefix(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "fc",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Gap => "gap",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Bottleneck { .. } => "block",
        }
    }
}

/// Activation shape flowing between layers, without the batch dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Features {
    Spatial {
        channels: usize,
        size: Option<(usize, usize)>,
    },
    Flat(usize),
}

/// A layer with its resolved name and input/output feature shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedLayer {
    pub name: String,
    pub layer: LayerSpec,
    pub input: Features,
    pub output: Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnWeight,
    BnBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Conv and linear weights; the only tensors magnitude pruning touches by default.
    pub fn is_prunable(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamKind::BnWeight | ParamKind::BnBias | ParamKind::RunningMean | ParamKind::RunningVar
        )
    }
}

/// Shape and initialization metadata for one named tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Sequential architecture ending in an implicit linear classifier
/// (`classifier.weight: (features, num_classes)`, `classifier.bias`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    /// Fixed spatial input size; required only when the body flattens.
    #[serde(default)]
    pub input_size: Option<(usize, usize)>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidSpec(msg.into())
}

fn layer_err(layer: &str, detail: impl Into<String>) -> ModelError {
    ModelError::Layer {
        layer: layer.to_string(),
        detail: detail.into(),
    }
}

fn conv_out(size: Option<(usize, usize)>, kernel: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    size.map(|(h, w)| {
        (
            (h + 2 * padding).saturating_sub(kernel) / stride + 1,
            (w + 2 * padding).saturating_sub(kernel) / stride + 1,
        )
    })
}

fn bn_params(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    for (role, kind) in [
        ("weight", ParamKind::BnWeight),
        ("bias", ParamKind::BnBias),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamSpec {
            name: format!("{prefix}.{role}"),
            shape: vec![channels],
            kind,
            fan_in: channels,
            fan_out: channels,
        });
    }
}

fn conv_params(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, kernel: usize, bias: bool) {
    let area = kernel * kernel;
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, kernel, kernel],
        kind: ParamKind::Weight,
        fan_in: cin * area,
        fan_out: cout * area,
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            kind: ParamKind::Bias,
            fan_in: cin * area,
            fan_out: cout * area,
        });
    }
}

fn linear_params(out: &mut Vec<ParamSpec>, prefix: &str, fin: usize, fout: usize, bias: bool) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fin, fout],
        kind: ParamKind::Weight,
        fan_in: fin,
        fan_out: fout,
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![fout],
            kind: ParamKind::Bias,
            fan_in: fin,
            fan_out: fout,
        });
    }
}

impl ModelSpec {
    /// Resolves names and feature shapes, checking that channels chain.
    pub fn plan(&self) -> Result<Vec<PlannedLayer>, ModelError> {
        if self.input_channels == 0 {
            return Err(invalid("input_channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        let mut counters: IndexMap<&'static str, usize> = IndexMap::new();
        let mut feat = Features::Spatial {
            channels: self.input_channels,
            size: self.input_size,
        };
        let mut planned = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let counter = counters.entry(layer.prefix()).or_insert(0);
            *counter += 1;
            let name = format!("{}{}", layer.prefix(), counter);
            let output = match (*layer, feat) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Features::Spatial { size, .. },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(layer_err(&name, "conv sizes must be positive"));
                    }
                    Features::Spatial {
                        channels: out_channels,
                        size: conv_out(size, kernel, stride, padding),
                    }
                }
                (
                    LayerSpec::Bottleneck {
                        mid_channels,
                        out_channels,
                        stride,
                    },
                    Features::Spatial { size, .. },
                ) => {
                    if mid_channels == 0 || out_channels == 0 || stride == 0 {
                        return Err(layer_err(&name, "bottleneck sizes must be positive"));
                    }
                    Features::Spatial {
                        channels: out_channels,
                        size: conv_out(size, 3, stride, 1),
                    }
                }
                (LayerSpec::MaxPool { kernel, stride }, Features::Spatial { channels, size }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(layer_err(&name, "pool sizes must be positive"));
                    }
                    Features::Spatial {
                        channels,
                        size: conv_out(size, kernel, stride, 0),
                    }
                }
                (LayerSpec::Gap, Features::Spatial { channels, .. }) => Features::Flat(channels),
                (LayerSpec::Flatten, Features::Spatial { channels, size }) => match size {
                    Some((h, w)) => Features::Flat(channels * h * w),
                    None => return Err(layer_err(&name, "flatten requires a fixed input_size")),
                },
                (LayerSpec::Linear { out_features, .. }, Features::Flat(_)) => {
                    if out_features == 0 {
                        return Err(layer_err(&name, "linear width must be positive"));
                    }
                    Features::Flat(out_features)
                }
                (LayerSpec::Relu | LayerSpec::BatchNorm, f) => f,
                (layer, f) => {
                    return Err(layer_err(&name, format!("{layer:?} cannot consume {f:?}")));
                }
            };
            planned.push(PlannedLayer {
                name,
                layer: *layer,
                input: feat,
                output,
            });
            feat = output;
        }
        if !matches!(feat, Features::Flat(_)) {
            return Err(invalid("body must end in flat features (gap or flatten) before the classifier"));
        }
        let spatial = self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Bottleneck { .. }));
        if spatial && self.layers.last() != Some(&LayerSpec::Gap) {
            return Err(invalid("convolutional bodies must end in global average pooling"));
        }
        Ok(planned)
    }

    /// Width of the features entering the classifier.
    pub fn classifier_inputs(&self) -> Result<usize, ModelError> {
        match self.plan()?.last().map(|p| p.output) {
            Some(Features::Flat(n)) => Ok(n),
            _ => Err(invalid("empty body")),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.plan().map(|_| ())
    }

    /// Every tensor of the model in deterministic order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>, ModelError> {
        let planned = self.plan()?;
        let mut out = Vec::new();
        let mut last = Features::Flat(0);
        for p in &planned {
            let cin = match p.input {
                Features::Spatial { channels, .. } => channels,
                Features::Flat(n) => n,
            };
            match p.layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => conv_params(&mut out, &p.name, cin, out_channels, kernel, bias),
                LayerSpec::Linear { out_features, bias } => {
                    linear_params(&mut out, &p.name, cin, out_features, bias)
                }
                LayerSpec::BatchNorm => bn_params(&mut out, &p.name, cin),
                LayerSpec::Bottleneck {
                    mid_channels,
                    out_channels,
                    stride,
                } => {
                    let n = &p.name;
                    conv_params(&mut out, &format!("{n}.conv1"), cin, mid_channels, 1, false);
                    bn_params(&mut out, &format!("{n}.bn1"), mid_channels);
                    conv_params(&mut out, &format!("{n}.conv2"), mid_channels, mid_channels, 3, false);
                    bn_params(&mut out, &format!("{n}.bn2"), mid_channels);
                    conv_params(&mut out, &format!("{n}.conv3"), mid_channels, out_channels, 1, false);
                    bn_params(&mut out, &format!("{n}.bn3"), out_channels);
                    if stride != 1 || cin != out_channels {
                        conv_params(&mut out, &format!("{n}.shortcut.conv"), cin, out_channels, 1, false);
                        bn_params(&mut out, &format!("{n}.shortcut.bn"), out_channels);
                    }
                }
                LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::Gap | LayerSpec::Flatten => {}
            }
            last = p.output;
        }
        let Features::Flat(features) = last else {
            return Err(invalid("body must end in flat features"));
        };
        linear_params(&mut out, CLASSIFIER, features, self.num_classes, true);
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize, ModelError> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    pub fn prunable_count(&self) -> Result<usize, ModelError> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| p.kind.is_prunable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// Trainable parameter count of tensors whose name starts with `layer.`.
    pub fn layer_param_count(&self, layer: &str) -> Result<usize, ModelError> {
        let prefix = format!("{layer}.");
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| p.kind.is_trainable() && p.name.starts_with(&prefix))
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        Self {
            num_classes,
            ..self.clone()
        }
    }

    /// SHA-256 of the architecture with the classifier width left out, so
    /// specs that differ only in class count share a hash.
    pub fn topology_hash(&self) -> String {
        let body = serde_json::to_vec(&(self.input_channels, self.input_size, &self.layers))
            .expect("model spec serializes");
        hex::encode(Sha256::digest(&body))
    }
}

/// VGG19 with the fully connected head replaced by global average pooling.
pub fn build_vgg19(num_classes: usize) -> ModelSpec {
    const PLAN: [Option<usize>; 20] = [
        Some(64),
        Some(64),
        None,
        Some(128),
        Some(128),
        None,
        Some(256),
        Some(256),
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        Some(512),
        Some(512),
    ];
    let mut layers = Vec::new();
    for entry in PLAN {
        match entry {
            Some(width) => {
                layers.push(LayerSpec::conv(width));
                layers.push(LayerSpec::BatchNorm);
                layers.push(LayerSpec::Relu);
            }
            None => layers.push(LayerSpec::max_pool()),
        }
    }
    layers.push(LayerSpec::Gap);
    ModelSpec {
        input_channels: 3,
        input_size: None,
        num_classes,
        layers,
    }
}

/// Block counts per ResNet50 stage.
pub const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
/// Output channels per ResNet50 stage.
pub const RESNET50_WIDTHS: [usize; 4] = [256, 512, 1024, 2048];

/// ResNet50 with a 3×3 stem; the first block of stages 2 to 4 strides by two.
pub fn build_resnet50(num_classes: usize) -> ModelSpec {
    let mut layers = vec![
        LayerSpec::Conv {
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
    ];
    for (stage, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS).enumerate() {
        for block in 0..blocks {
            layers.push(LayerSpec::Bottleneck {
                mid_channels: width / 4,
                out_channels: width,
                stride: if stage > 0 && block == 0 { 2 } else { 1 },
            });
        }
    }
    layers.push(LayerSpec::Gap);
    ModelSpec {
        input_channels: 3,
        input_size: None,
        num_classes,
        layers,
    }
}

/// Fully connected network over flattened `(channels, height, width)` inputs.
pub fn build_small_mlp(input: [usize; 3], widths: &[usize], num_classes: usize) -> Result<ModelSpec, ModelError> {
    if widths.is_empty() {
        return Err(invalid("widths must be nonempty"));
    }
    let mut layers = vec![LayerSpec::Flatten];
    for &w in widths {
        layers.push(LayerSpec::linear(w));
        layers.push(LayerSpec::Relu);
    }
    let spec = ModelSpec {
        input_channels: input[0],
        input_size: Some((input[1], input[2])),
        num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Small VGG-style network: conv-bn-relu per width, 2×2 max-pool between widths.
pub fn build_small_cnn(input_channels: usize, widths: &[usize], num_classes: usize) -> Result<ModelSpec, ModelError> {
    if widths.is_empty() {
        return Err(invalid("widths must be nonempty"));
    }
    let mut layers = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            layers.push(LayerSpec::max_pool());
        }
        layers.push(LayerSpec::conv(w));
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Gap);
    let spec = ModelSpec {
        input_channels,
        input_size: None,
        num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// One named tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered map from parameter name to tensor. Order follows
/// [`ModelSpec::param_specs`] and is identical for identical specs.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), Param { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prunable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind.is_prunable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Element-type conversion of every tensor.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise comparison of names, kinds, shapes and values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.kind == b.kind && a.tensor.same_values(&b.tensor)
            })
    }

    /// Checks names, order and shapes against a spec.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        for ps in spec.param_specs()? {
            let t = self.tensor(&ps.name)?;
            if t.shape() != ps.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: ps.name,
                    expected: ps.shape,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Initial value of a tensor given its kind: Xavier-normal weights, zero
/// biases, unit batch-norm scale, identity running statistics.
fn init_tensor<T: Scalar>(ps: &ParamSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<T>, ModelError> {
    let shape = ps.shape.clone();
    let t = match ps.kind {
        ParamKind::Weight => {
            let std = (2.0 / (ps.fan_in + ps.fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
            Tensor::new(shape, data)?
        }
        ParamKind::Bias | ParamKind::BnBias | ParamKind::RunningMean => Tensor::zeros(shape)?,
        ParamKind::BnWeight | ParamKind::RunningVar => Tensor::full(shape, T::one())?,
    };
    Ok(t)
}

/// Fresh parameters for `spec`, a pure function of `(spec, seed)`.
pub fn initialize<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for ps in spec.param_specs()? {
        let t = init_tensor(&ps, &mut rng)?;
        store.insert(ps.name, t, ps.kind);
    }
    Ok(store)
}

/// Batch-norm running statistics restored to their initial values.
pub fn reset_running_stats<T: Scalar>(params: &mut ParamStore<T>) {
    for (_, p) in params.iter_mut() {
        match p.kind {
            ParamKind::RunningMean => p.tensor.data_mut().fill(T::zero()),
            ParamKind::RunningVar => p.tensor.data_mut().fill(T::one()),
            _ => {}
        }
    }
}

/// Names of the classifier tensors.
pub fn output_layer_names() -> [String; 2] {
    [format!("{CLASSIFIER}.weight"), format!("{CLASSIFIER}.bias")]
}

/// Resizes the classifier to `new_num_classes` and redraws it from `seed`.
/// Every other tensor is carried over untouched.
pub fn reinitialize_output_layer<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamStore<T>,
    new_num_classes: usize,
    seed: u64,
) -> Result<(ModelSpec, ParamStore<T>), ModelError> {
    if new_num_classes == 0 {
        return Err(invalid("num_classes must be positive"));
    }
    let [w_name, b_name] = output_layer_names();
    for name in [&w_name, &b_name] {
        if params.get(name).is_none() {
            return Err(ModelError::MissingParam(name.clone()));
        }
    }
    let new_spec = spec.with_num_classes(new_num_classes);
    let specs = new_spec.param_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for (name, p) in params.iter() {
        if name == w_name || name == b_name {
            let ps = specs
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            out.insert(name, init_tensor(ps, &mut rng)?, p.kind);
        } else {
            out.insert(name, p.tensor.clone(), p.kind);
        }
    }
    Ok((new_spec, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg19_first_conv_has_1792_parameters() {
        let spec = build_vgg19(10);
        assert_eq!(spec.layer_param_count("conv1").unwrap(), 1792);
    }

    #[test]
    fn vgg19_has_sixteen_convs_and_512_wide_head() {
        let spec = build_vgg19(10);
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 16);
        assert_eq!(spec.layer_param_count(CLASSIFIER).unwrap(), 512 * 10 + 10);
    }

    #[test]
    fn resnet50_stage_structure() {
        let spec = build_resnet50(10);
        let mut per_stage = Vec::new();
        let mut widths = Vec::new();
        for layer in &spec.layers {
            if let LayerSpec::Bottleneck {
                out_channels, stride, ..
            } = layer
            {
                if widths.last() != Some(out_channels) {
                    widths.push(*out_channels);
                    per_stage.push(0);
                    assert_eq!(*stride, if widths.len() == 1 { 1 } else { 2 });
                }
                *per_stage.last_mut().unwrap() += 1;
            }
        }
        assert_eq!(per_stage, vec![3, 4, 6, 3]);
        assert_eq!(widths, vec![256, 512, 1024, 2048]);
        assert_eq!(spec.layer_param_count(CLASSIFIER).unwrap(), 2048 * 10 + 10);
    }

    #[test]
    fn mlp_prunable_count() {
        let spec = build_small_mlp([1, 28, 28], &[256, 256], 10).unwrap();
        assert_eq!(spec.prunable_count().unwrap(), 784 * 256 + 256 * 256 + 256 * 10);
        assert!(build_small_mlp([1, 28, 28], &[], 10).is_err());
    }

    #[test]
    fn small_cnn_chains_channels() {
        let spec = build_small_cnn(3, &[16, 32], 10).unwrap();
        let shapes: Vec<Vec<usize>> = spec
            .param_specs()
            .unwrap()
            .into_iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.shape)
            .collect();
        assert_eq!(shapes[0], vec![16, 3, 3, 3]);
        assert_eq!(shapes[1], vec![32, 16, 3, 3]);
        assert_eq!(shapes[2], vec![32, 10]);
    }

    #[test]
    fn conv_body_must_end_in_gap() {
        let mut spec = build_small_cnn(3, &[4], 2).unwrap();
        spec.layers.pop();
        spec.layers.push(LayerSpec::Flatten);
        spec.input_size = Some((4, 4));
        assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn initialization_values() {
        let spec = build_small_cnn(3, &[8, 8], 5).unwrap();
        let a: ParamStore<f64> = initialize(&spec, 7).unwrap();
        let b: ParamStore<f64> = initialize(&spec, 7).unwrap();
        assert!(a.same_values(&b));
        for (name, p) in a.iter() {
            match p.kind {
                ParamKind::Bias | ParamKind::BnBias => {
                    assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{name}")
                }
                ParamKind::BnWeight => assert!(p.tensor.data().iter().all(|&v| v == 1.0), "{name}"),
                _ => {}
            }
        }
        let c: ParamStore<f64> = initialize(&spec, 8).unwrap();
        assert!(!a.same_values(&c));
    }

    #[test]
    fn xavier_variance_matches_fans() {
        let spec = build_small_mlp([1, 20, 20], &[300], 4).unwrap();
        let p: ParamStore<f64> = initialize(&spec, 3).unwrap();
        let w = p.tensor("fc1.weight").unwrap();
        let n = w.len() as f64;
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / (400.0 + 300.0);
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
    }

    #[test]
    fn output_reinit_touches_only_classifier() {
        let spec = build_vgg19(10);
        let small = ModelSpec {
            layers: spec.layers[..7].iter().cloned().chain([LayerSpec::Gap]).collect(),
            ..spec.clone()
        };
        let params: ParamStore<f64> = initialize(&small, 1).unwrap();
        let (new_spec, out) = reinitialize_output_layer(&small, &params, 100, 9).unwrap();
        assert_eq!(new_spec.num_classes, 100);
        assert_eq!(out.tensor("classifier.weight").unwrap().shape(), &[64, 100]);
        for (name, p) in params.iter() {
            if !name.starts_with(CLASSIFIER) {
                assert!(p.tensor.same_values(&out.tensor(name).unwrap().clone()));
            }
        }
        out.check_against(&new_spec).unwrap();
        assert_eq!(small.topology_hash(), new_spec.topology_hash());
    }

    #[test]
    fn vgg19_output_reinit_shape() {
        let spec = build_vgg19(10);
        let new_spec = spec.with_num_classes(100);
        let cls = new_spec
            .param_specs()
            .unwrap()
            .into_iter()
            .find(|p| p.name == "classifier.weight")
            .unwrap();
        assert_eq!(cls.shape, vec![512, 100]);
    }
}
