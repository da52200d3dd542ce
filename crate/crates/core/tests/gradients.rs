//! Finite-difference checks on the layer types the acceptance sweep does not
//! draw: strided and unpadded convolutions, max pooling and bottleneck blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ticketforge::model::{initialize, LayerSpec, ModelSpec, ParamKind, ParamStore};
use ticketforge::network::{backward, forward, Mode};
use ticketforge::pruning::{prune_global, Mask};
use ticketforge::Tensor;

fn loss(spec: &ModelSpec, params: &ParamStore<f64>, x: &Tensor<f64>, labels: &[usize], mask: &Mask) -> f64 {
    let mut p = params.clone();
    let f = forward(spec, &mut p, x, mask, Mode::Train).unwrap();
    let mut g = f.graph;
    let l = g.cross_entropy(f.logits, labels).unwrap();
    g.value(l).item().unwrap()
}

fn check_model(spec: &ModelSpec, input: [usize; 3], seed: u64, prune: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamStore<f64> = initialize(spec, seed).unwrap();
    for (_, p) in params.iter_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::BnBias | ParamKind::BnWeight) {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let mask = if prune {
        prune_global(&params, &Mask::dense(&params), 0.4).unwrap().0
    } else {
        Mask::dense(&params)
    };
    let n = 3;
    let [c, h, w] = input;
    let x = Tensor::new(
        vec![n, c, h, w],
        (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();

    let mut analytic = params.clone();
    let f = forward(spec, &mut analytic, &x, &mask, Mode::Train).unwrap();
    let mut g = f.graph;
    let l = g.cross_entropy(f.logits, &labels).unwrap();
    backward(&g, l, &mut analytic).unwrap();

    let h_step = 1e-5;
    let mut worst = 0.0f64;
    for (name, p) in params.iter() {
        if !p.kind.is_trainable() {
            continue;
        }
        let grad = analytic.tensor(name).unwrap().grad().unwrap().to_vec();
        let stride = (p.tensor.len() / 12).max(1);
        for j in (0..p.tensor.len()).step_by(stride) {
            let mut plus = params.clone();
            plus.tensor_mut(name).unwrap().data_mut()[j] += h_step;
            let mut minus = params.clone();
            minus.tensor_mut(name).unwrap().data_mut()[j] -= h_step;
            let numeric = (loss(spec, &plus, &x, &labels, &mask) - loss(spec, &minus, &x, &labels, &mask)) / (2.0 * h_step);
            let pruned = mask.get(name).is_some_and(|m| !m.bits()[j]);
            if pruned {
                assert_eq!(grad[j], 0.0, "{name}[{j}] is masked");
                continue;
            }
            let re = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-6);
            assert!(re < 1e-4, "{name}[{j}]: analytic {} numeric {numeric}", grad[j]);
            worst = worst.max(re);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn strided_and_unpadded_convolutions() {
    let spec = ModelSpec {
        input_channels: 2,
        input_size: None,
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: 4,
                kernel: 2,
                stride: 1,
                padding: 0,
                bias: false,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Gap,
        ],
    };
    check_model(&spec, [2, 7, 7], 1, false);
    check_model(&spec, [2, 7, 7], 2, true);
}

#[test]
fn max_pool_between_convolutions() {
    let spec = ModelSpec {
        input_channels: 1,
        input_size: None,
        num_classes: 2,
        layers: vec![
            LayerSpec::conv(2),
            LayerSpec::Relu,
            LayerSpec::max_pool(),
            LayerSpec::conv(3),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 1 },
            LayerSpec::Gap,
        ],
    };
    check_model(&spec, [1, 6, 6], 3, false);
    check_model(&spec, [1, 6, 6], 4, true);
}

#[test]
fn bottleneck_blocks_with_projection_and_identity_shortcuts() {
    let spec = ModelSpec {
        input_channels: 2,
        input_size: None,
        num_classes: 3,
        layers: vec![
            LayerSpec::conv(4),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            // projection shortcut: channels and stride change
            LayerSpec::Bottleneck {
                mid_channels: 2,
                out_channels: 6,
                stride: 2,
            },
            // identity shortcut
            LayerSpec::Bottleneck {
                mid_channels: 3,
                out_channels: 6,
                stride: 1,
            },
            LayerSpec::Gap,
        ],
    };
    let params: ParamStore<f64> = initialize(&spec, 0).unwrap();
    assert!(params.names().any(|n| n.contains("shortcut")));
    check_model(&spec, [2, 6, 6], 5, false);
    check_model(&spec, [2, 6, 6], 6, true);
}

#[test]
fn f32_forward_tracks_f64() {
    let spec = ModelSpec {
        input_channels: 1,
        input_size: None,
        num_classes: 4,
        layers: vec![
            LayerSpec::conv(3),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Bottleneck {
                mid_channels: 2,
                out_channels: 4,
                stride: 2,
            },
            LayerSpec::Gap,
        ],
    };
    let mut p64: ParamStore<f64> = initialize(&spec, 9).unwrap();
    let mut p32: ParamStore<f32> = p64.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..2 * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x64 = Tensor::new(vec![2, 1, 6, 6], x).unwrap();
    let x32: Tensor<f32> = x64.cast();
    let mask = Mask::dense(&p64);
    let a = forward(&spec, &mut p64, &x64, &mask, Mode::Eval).unwrap();
    let b = forward(&spec, &mut p32, &x32, &mask, Mode::Eval).unwrap();
    for (u, v) in a.logits().data().iter().zip(b.logits().data()) {
        assert!((u - *v as f64).abs() < 1e-4, "{u} vs {v}");
    }
}
