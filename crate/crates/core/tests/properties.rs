use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ticketforge::model::{build_small_cnn, build_small_mlp, build_vgg19, initialize, ParamStore};
use ticketforge::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use ticketforge::pruning::{layer_ratio_diagnostic, prune_global, Mask};
use ticketforge::reporting::{aggregate_curves, plotdata, ratio_report, ExperimentResult, RunRecord};
use ticketforge::ticket::{
    decode_checkpoint, decode_ticket, encode_checkpoint, encode_ticket, Ticket, TicketMeta, FORMAT_VERSION,
};
use ticketforge::Tensor;

fn ticket(widths: &[usize], conv: bool, seed: u64, rate: f64, extra: &[(String, String)]) -> Ticket<f64> {
    let spec = if conv {
        build_small_cnn(2, widths, 3).unwrap()
    } else {
        build_small_mlp([1, 3, 3], widths, 4).unwrap()
    };
    let snapshot: ParamStore<f64> = initialize(&spec, seed).unwrap();
    let (mask, _) = prune_global(&snapshot, &Mask::dense(&snapshot), rate).unwrap();
    Ticket {
        meta: TicketMeta {
            source_dataset_id: format!("synth/{seed}"),
            source_optimizer: "adam".into(),
            model_spec_hash: spec.topology_hash(),
            pruning_iteration: 1 + (seed % 30) as usize,
            remaining_fraction: mask.remaining_fraction(),
            late_reset_k: seed as usize % 7,
            seed,
            format_version: FORMAT_VERSION,
            extra: extra.iter().cloned().collect::<BTreeMap<_, _>>(),
        },
        spec,
        snapshot,
        mask,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ticket_round_trips(
        widths in prop::collection::vec(1usize..6, 1..3),
        conv in any::<bool>(),
        seed in any::<u64>(),
        rate in 0.05f64..0.95,
        extra in prop::collection::vec(("[a-z_]{1,8}", "[ -~]{0,12}"), 0..3),
    ) {
        let t = ticket(&widths, conv, seed, rate, &extra);
        let back: Ticket<f32> = decode_ticket(&encode_ticket(&t)).unwrap();
        prop_assert_eq!(&back, &t.cast::<f32>());
        back.validate().unwrap();
        let exact: Ticket<f64> = decode_checkpoint(&encode_checkpoint(&t)).unwrap();
        prop_assert_eq!(exact, t);
    }

    #[test]
    fn corrupted_or_truncated_tickets_are_rejected(
        seed in any::<u64>(),
        pos in any::<prop::sample::Index>(),
        flip in 1u8..=255,
        cut in any::<prop::sample::Index>(),
    ) {
        let bytes = encode_ticket(&ticket(&[3], false, seed, 0.5, &[]));
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= flip;
        prop_assert!(decode_ticket::<f32>(&bad).is_err());
        let n = cut.index(bytes.len());
        prop_assert!(decode_ticket::<f32>(&bytes[..n]).is_err());
    }

    #[test]
    fn curves_ignore_record_order(seed in any::<u64>(), n_seeds in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for condition in ["transferred", "random_global"] {
            for it in 1..=4usize {
                for s in 0..n_seeds as u64 {
                    records.push(RunRecord {
                        condition: condition.into(),
                        source_id: "a".into(),
                        target_id: "b".into(),
                        pruning_iteration: it,
                        remaining_fraction: 0.8f64.powi(it as i32),
                        seed: s,
                        test_accuracy: rand::Rng::random_range(&mut rng, 0.0..1.0),
                        train_accuracy: 1.0,
                        epochs: 3,
                        wall_time: 0.0,
                    });
                }
            }
        }
        let base = aggregate_curves(&ExperimentResult::new(records.clone())).unwrap();
        records.shuffle(&mut rng);
        let shuffled = aggregate_curves(&ExperimentResult::new(records.clone())).unwrap();
        prop_assert_eq!(plotdata(&base), plotdata(&shuffled));
        prop_assert_eq!(&base, &shuffled);
        // independent oracle for one point: two-pass mean and sample deviation
        let accs: Vec<f64> = records
            .iter()
            .filter(|r| r.condition == "transferred" && r.pruning_iteration == 2)
            .map(|r| r.test_accuracy)
            .collect();
        let p = base.iter().find(|c| c.condition == "transferred" && (c.remaining_fraction - 0.64).abs() < 1e-12).unwrap();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        prop_assert!((p.mean_acc - m).abs() < 1e-12);
        if accs.len() > 1 {
            let var = accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (accs.len() - 1) as f64;
            prop_assert!((p.std_acc - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_never_moves_masked_coordinates(
        seed in any::<u64>(),
        adam in any::<bool>(),
        rate in 0.1f64..0.9,
        steps in 1usize..6,
    ) {
        let spec = build_small_mlp([1, 2, 2], &[5], 3).unwrap();
        let mut params: ParamStore<f64> = initialize(&spec, seed).unwrap();
        let (mask, _) = prune_global(&params, &Mask::dense(&params), rate).unwrap();
        mask.apply(&mut params).unwrap();
        let before = params.clone();
        let cfg = if adam { OptimizerConfig::adam() } else { OptimizerConfig::sgd() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..steps {
            for (_, p) in params.iter_mut() {
                if p.kind.is_trainable() {
                    let g: Vec<f64> = (0..p.tensor.len()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
                    p.tensor.set_grad(g).unwrap();
                }
            }
            opt.step(&mut params, &mask, 0.01).unwrap();
        }
        for (name, m) in mask.iter() {
            let now = params.tensor(name).unwrap().data();
            let was = before.tensor(name).unwrap().data();
            let m1 = opt.first_moment(name).unwrap();
            for (j, &keep) in m.bits().iter().enumerate() {
                if keep {
                    prop_assert_ne!(now[j], was[j]);
                } else {
                    prop_assert_eq!(now[j], 0.0);
                    prop_assert_eq!(m1[j], 0.0);
                    if adam {
                        prop_assert_eq!(opt.second_moment(name).unwrap()[j], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn both_optimizers_descend_a_quadratic_bowl() {
    let target = [3.0, -2.0, 0.5, 1.0];
    for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
        let base = if kind == OptimizerKind::Adam { OptimizerConfig::adam() } else { OptimizerConfig::sgd() };
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            lr: 0.05,
            ..base
        };
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::zeros(vec![4]).unwrap(), ticketforge::ParamKind::Weight);
        let mask = Mask::dense(&params);
        let mut opt = Optimizer::new(cfg.clone()).unwrap();
        for _ in 0..2000 {
            let w = params.tensor("w").unwrap().data().to_vec();
            let g: Vec<f64> = w.iter().zip(target).map(|(w, t)| 2.0 * (w - t)).collect();
            params.tensor_mut("w").unwrap().set_grad(g).unwrap();
            opt.step(&mut params, &mask, cfg.lr).unwrap();
        }
        for (w, t) in params.tensor("w").unwrap().data().iter().zip(target) {
            assert!((w - t).abs() < 1e-3, "{kind:?}: {w} vs {t}");
        }
    }
}

/// Global pruning at initialization spares the small, high-variance first
/// convolution of VGG19 relative to uniform pruning.
#[test]
fn vgg19_global_pruning_spares_the_first_convolution() {
    let spec = build_vgg19(10);
    let params: ParamStore<f32> = initialize(&spec, 3).unwrap();
    let mut mask = Mask::dense(&params);
    let mut masks = Vec::new();
    for _ in 0..4 {
        mask = prune_global(&params, &mask, 0.2).unwrap().0;
        masks.push(mask.clone());
    }
    let ratios = layer_ratio_diagnostic(&mask);
    let first = ratios.iter().find(|(n, _)| n.starts_with("conv")).unwrap();
    assert!(first.1 < 1.0, "{first:?}");
    let table = ratio_report(&masks).unwrap();
    assert_eq!(table.levels, vec![1, 2, 3, 4]);
    let row = table.layers.iter().position(|l| *l == first.0).unwrap();
    assert!(table.values[row].iter().all(|&v| v < 1.0));
    assert_eq!(table.values[row][3], first.1);
}
