//! Runs a [`ModelSpec`] over a [`ParamStore`] on the autodiff tape.

use crate::autodiff::{BatchNormStats, Graph, NodeId};
use crate::model::{LayerSpec, ModelError, ModelSpec, ParamStore, CLASSIFIER};
use crate::pruning::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running buffers updated.
    Train,
    /// Running statistics, buffers untouched.
    Eval,
}

/// Result of a forward pass: the tape and the logits node on it.
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub logits: NodeId,
}

impl<T: Scalar> Forward<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }
}

struct Builder<'a, T> {
    graph: Graph<T>,
    params: &'a mut ParamStore<T>,
    mask: &'a Mask,
    mode: Mode,
}

impl<T: Scalar> Builder<'_, T> {
    /// Parameter leaf, multiplied by its mask when one exists.
    fn tensor(&mut self, name: &str) -> Result<NodeId, ModelError> {
        let value = self.params.tensor(name)?.clone();
        let leaf = self.graph.param(name, value);
        match self.mask.get(name) {
            Some(m) => Ok(self.graph.mask_mul(name, leaf, m.values())?),
            None => Ok(leaf),
        }
    }

    fn optional(&mut self, name: &str) -> Result<Option<NodeId>, ModelError> {
        if self.params.get(name).is_some() {
            self.tensor(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn conv(&mut self, prefix: &str, x: NodeId, stride: usize, padding: usize) -> Result<NodeId, ModelError> {
        let w = self.tensor(&format!("{prefix}.weight"))?;
        let b = self.optional(&format!("{prefix}.bias"))?;
        Ok(self.graph.conv2d(prefix, x, w, b, stride, padding)?)
    }

    fn batch_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let gamma = self.tensor(&format!("{prefix}.weight"))?;
        let beta = self.tensor(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let eps = T::lit(BN_EPS);
        match self.mode {
            Mode::Train => {
                let mut mean = self.params.tensor(&mean_name)?.data().to_vec();
                let mut var = self.params.tensor(&var_name)?.data().to_vec();
                let y = self.graph.batch_norm(
                    prefix,
                    x,
                    gamma,
                    beta,
                    BatchNormStats::Train {
                        running_mean: &mut mean,
                        running_var: &mut var,
                        momentum: T::lit(BN_MOMENTUM),
                    },
                    eps,
                )?;
                self.params.tensor_mut(&mean_name)?.data_mut().copy_from_slice(&mean);
                self.params.tensor_mut(&var_name)?.data_mut().copy_from_slice(&var);
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.tensor(&mean_name)?.data().to_vec();
                let var = self.params.tensor(&var_name)?.data().to_vec();
                Ok(self.graph.batch_norm(
                    prefix,
                    x,
                    gamma,
                    beta,
                    BatchNormStats::Eval {
                        running_mean: &mean,
                        running_var: &var,
                    },
                    eps,
                )?)
            }
        }
    }

    fn bottleneck(&mut self, name: &str, x: NodeId, stride: usize) -> Result<NodeId, ModelError> {
        let mut h = self.conv(&format!("{name}.conv1"), x, 1, 0)?;
        h = self.batch_norm(&format!("{name}.bn1"), h)?;
        h = self.graph.relu(h);
        h = self.conv(&format!("{name}.conv2"), h, stride, 1)?;
        h = self.batch_norm(&format!("{name}.bn2"), h)?;
        h = self.graph.relu(h);
        h = self.conv(&format!("{name}.conv3"), h, 1, 0)?;
        h = self.batch_norm(&format!("{name}.bn3"), h)?;
        let shortcut_name = format!("{name}.shortcut.conv");
        let shortcut = if self.params.get(&format!("{shortcut_name}.weight")).is_some() {
            let s = self.conv(&shortcut_name, x, stride, 0)?;
            self.batch_norm(&format!("{name}.shortcut.bn"), s)?
        } else {
            x
        };
        let sum = self.graph.add(name, h, shortcut)?;
        Ok(self.graph.relu(sum))
    }
}

/// Forward pass of `spec` on a `(N, C, H, W)` batch. Masked weights enter
/// the network as exact zeros and receive zero gradient.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &mut ParamStore<T>,
    batch: &Tensor<T>,
    mask: &Mask,
    mode: Mode,
) -> Result<Forward<T>, ModelError> {
    let plan = spec.plan()?;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != spec.input_channels {
        return Err(ModelError::Layer {
            layer: "input".into(),
            detail: format!(
                "expected (N, {}, H, W) batch, got {shape:?}",
                spec.input_channels
            ),
        });
    }
    if let Some((h, w)) = spec.input_size {
        if (shape[2], shape[3]) != (h, w) {
            return Err(ModelError::Layer {
                layer: "input".into(),
                detail: format!("expected {h}x{w} images, got {}x{}", shape[2], shape[3]),
            });
        }
    }
    mask.check_aligned(params)
        .map_err(|e| ModelError::MaskMismatch(e.to_string()))?;

    let mut b = Builder {
        graph: Graph::new(),
        params,
        mask,
        mode,
    };
    let mut x = b.graph.input(batch.clone());
    for p in &plan {
        x = match p.layer {
            LayerSpec::Conv { stride, padding, .. } => b.conv(&p.name, x, stride, padding)?,
            LayerSpec::Linear { .. } => {
                let w = b.tensor(&format!("{}.weight", p.name))?;
                let bias = b.optional(&format!("{}.bias", p.name))?;
                b.graph.linear(&p.name, x, w, bias)?
            }
            LayerSpec::MaxPool { kernel, stride } => b.graph.max_pool2d(&p.name, x, kernel, stride)?,
            LayerSpec::Relu => b.graph.relu(x),
            LayerSpec::BatchNorm => b.batch_norm(&p.name, x)?,
            LayerSpec::Gap => b.graph.global_avg_pool(&p.name, x)?,
            LayerSpec::Flatten => b.graph.flatten(x),
            LayerSpec::Bottleneck { stride, .. } => b.bottleneck(&p.name, x, stride)?,
        };
    }
    let w = b.tensor(&format!("{CLASSIFIER}.weight"))?;
    let bias = b.optional(&format!("{CLASSIFIER}.bias"))?;
    let logits = b.graph.linear(CLASSIFIER, x, w, bias)?;
    Ok(Forward {
        graph: b.graph,
        logits,
    })
}

/// Differentiates `loss` and stores `∂loss/∂p` in every trainable tensor's
/// gradient slot; parameters the loss does not reach get zero gradient.
pub fn backward<T: Scalar>(graph: &Graph<T>, loss: NodeId, params: &mut ParamStore<T>) -> Result<(), ModelError> {
    let grads = graph.backward(loss)?;
    for (_, p) in params.iter_mut() {
        if p.kind.is_trainable() {
            let n = p.tensor.len();
            p.tensor.set_grad(vec![T::zero(); n])?;
        } else {
            p.tensor.clear_grad();
        }
    }
    for (name, g) in grads.params() {
        let t = params.tensor_mut(name)?;
        t.grad_mut()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?
            .iter_mut()
            .zip(g)
            .for_each(|(d, &v)| *d += v);
    }
    Ok(())
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_small_cnn, build_small_mlp, initialize, ParamKind};

    #[test]
    fn identity_linear_passes_input_through() {
        let spec = ModelSpec {
            input_channels: 3,
            input_size: Some((1, 1)),
            num_classes: 3,
            layers: vec![LayerSpec::Flatten],
        };
        let mut params = ParamStore::new();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        params.insert("classifier.weight", Tensor::new(vec![3, 3], eye).unwrap(), ParamKind::Weight);
        params.insert("classifier.bias", Tensor::zeros(vec![3]).unwrap(), ParamKind::Bias);
        let mask = Mask::dense(&params);
        let x = Tensor::new(vec![2, 3, 1, 1], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let f = forward(&spec, &mut params, &x, &mask, Mode::Eval).unwrap();
        assert_eq!(f.logits().data(), x.data());
        assert_eq!(f.logits().shape(), &[2, 3]);
    }

    #[test]
    fn zero_classifier_mask_gives_zero_logits() {
        let spec = build_small_cnn(3, &[4, 6], 5).unwrap();
        let mut params: ParamStore<f64> = initialize(&spec, 2).unwrap();
        let dense = Mask::dense(&params);
        let layers = dense
            .iter()
            .map(|(name, m)| {
                let keep = name != "classifier.weight";
                (name.to_string(), m.shape().to_vec(), vec![keep; m.len()])
            })
            .collect();
        let mask = Mask::from_bits(layers).unwrap();
        let x = Tensor::full(vec![2, 3, 6, 6], 0.7).unwrap();
        let f = forward(&spec, &mut params, &x, &mask, Mode::Train).unwrap();
        assert!(f.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_channel_mismatch_names_input() {
        let spec = build_small_cnn(3, &[4], 2).unwrap();
        let mut params: ParamStore<f64> = initialize(&spec, 0).unwrap();
        let mask = Mask::dense(&params);
        let x = Tensor::zeros(vec![1, 1, 4, 4]).unwrap();
        match forward(&spec, &mut params, &x, &mask, Mode::Eval) {
            Err(ModelError::Layer { layer, .. }) => assert_eq!(layer, "input"),
            _ => panic!("expected a layer error"),
        }
    }

    #[test]
    fn masked_weights_receive_zero_gradient() {
        let spec = build_small_mlp([1, 2, 2], &[3], 2).unwrap();
        let mut params: ParamStore<f64> = initialize(&spec, 4).unwrap();
        let dense = Mask::dense(&params);
        let layers = dense
            .iter()
            .map(|(name, m)| {
                let bits = (0..m.len()).map(|i| i % 2 == 0).collect();
                (name.to_string(), m.shape().to_vec(), bits)
            })
            .collect();
        let mask = Mask::from_bits(layers).unwrap();
        let x = Tensor::new(vec![2, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.1, 1.0, 1.0, -0.3, 0.2]).unwrap();
        let f = forward(&spec, &mut params, &x, &mask, Mode::Train).unwrap();
        let mut graph = f.graph;
        let loss = graph.cross_entropy(f.logits, &[0, 1]).unwrap();
        backward(&graph, loss, &mut params).unwrap();
        for (name, m) in mask.iter() {
            let g = params.tensor(name).unwrap().grad().unwrap();
            for (gv, &keep) in g.iter().zip(m.bits()) {
                if !keep {
                    assert_eq!(*gv, 0.0);
                }
            }
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }
}
