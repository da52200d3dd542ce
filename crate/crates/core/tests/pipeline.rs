use ticketforge::data::{synth_task_with, SynthConfig, SynthKind, TaskData};
use ticketforge::model::{build_small_cnn, build_small_mlp, initialize, ParamKind, ParamStore};
use ticketforge::optim::{LrSchedule, OptimizerConfig};
use ticketforge::pipeline::{
    generate_tickets, train, GenerationConfig, LateReset, PruneScope, TicketGenerator, TrainRunConfig,
};
use ticketforge::pruning::Mask;
use ticketforge::ticket::{decode_checkpoint, encode_checkpoint, Ticket};
use ticketforge::ModelSpec;

fn task(classes: usize, noise: f64) -> TaskData {
    let mut cfg = SynthConfig::new(SynthKind::Blobs, 30, classes, 11);
    cfg.size = 6;
    cfg.noise = noise;
    synth_task_with(&cfg).unwrap()
}

fn run_config(model: ModelSpec, epochs: usize, late: LateReset) -> TrainRunConfig {
    TrainRunConfig {
        model,
        optimizer: OptimizerConfig {
            lr: 0.05,
            ..OptimizerConfig::sgd()
        },
        schedule: LrSchedule::constant(),
        epochs,
        batch_size: 16,
        seed: 4,
        late_reset: late,
    }
}

fn gen_config(model: ModelSpec, iterations: usize, scope: PruneScope) -> GenerationConfig {
    GenerationConfig {
        train: run_config(model, 2, LateReset::Steps(3)),
        iterations,
        rate: 0.2,
        init_seed: 21,
        scope,
        prune_biases: false,
    }
}

fn mlp(task: &TaskData) -> ModelSpec {
    build_small_mlp([1, 6, 6], &[24], task.num_classes()).unwrap()
}

#[test]
fn masks_shrink_monotonically_at_the_pinned_rate() {
    let t = task(3, 0.5);
    for scope in [PruneScope::Global, PruneScope::Layerwise] {
        let (tickets, records) = generate_tickets::<f64>(&gen_config(mlp(&t), 5, scope), &t).unwrap();
        assert_eq!(tickets.len(), 5);
        let mut prev: Option<&Mask> = None;
        let mut ones = tickets[0].spec.prunable_count().unwrap();
        for (i, (tk, rec)) in tickets.iter().zip(&records).enumerate() {
            tk.validate().unwrap();
            assert_eq!(tk.meta.pruning_iteration, i + 1);
            assert_eq!(rec.remaining_fraction, tk.mask.remaining_fraction());
            if let Some(p) = prev {
                assert!(tk.mask.is_subset_of(p));
            }
            if scope == PruneScope::Global {
                ones -= ones / 5;
                let total = tickets[0].spec.prunable_count().unwrap();
                assert_eq!(tk.mask.remaining_fraction(), ones as f64 / total as f64);
            }
            prev = Some(&tk.mask);
        }
        // every ticket of a run shares the late-reset snapshot
        assert!(tickets.iter().all(|tk| tk.snapshot.same_values(&tickets[0].snapshot)));
    }
}

#[test]
fn rewind_zeroes_pruned_weights_and_resets_running_stats() {
    let t = task(3, 0.5);
    let spec = build_small_cnn(1, &[4, 6], 3).unwrap();
    let (tickets, _) = generate_tickets::<f64>(&gen_config(spec, 2, PruneScope::Global), &t).unwrap();
    let tk = &tickets[1];
    let rewound = tk.rewound().unwrap();
    for (name, p) in rewound.iter() {
        let snap = tk.snapshot.tensor(name).unwrap().data();
        match p.kind {
            ParamKind::RunningMean => assert!(p.tensor.data().iter().all(|&v| v == 0.0)),
            ParamKind::RunningVar => assert!(p.tensor.data().iter().all(|&v| v == 1.0)),
            _ => match tk.mask.get(name) {
                Some(m) => {
                    for ((&keep, &v), &s) in m.bits().iter().zip(p.tensor.data()).zip(snap) {
                        assert_eq!(v, if keep { s } else { 0.0 });
                    }
                }
                None => assert_eq!(p.tensor.data(), snap),
            },
        }
    }
}

#[test]
fn snapshot_at_step_zero_is_the_initialization() {
    let t = task(3, 0.5);
    let cfg = run_config(mlp(&t), 1, LateReset::Steps(0));
    let init: ParamStore<f64> = initialize(&cfg.model, 3).unwrap();
    let out = train(&cfg, &t, &init, &Mask::dense(&init), 0, false).unwrap();
    assert!(out.snapshot.unwrap().same_values(&init));
    assert!(!out.params.same_values(&init));
}

#[test]
fn masked_weights_stay_zero_through_training() {
    let t = task(3, 0.5);
    let (tickets, _) = generate_tickets::<f64>(&gen_config(mlp(&t), 2, PruneScope::Global), &t).unwrap();
    let tk = &tickets[1];
    let cfg = run_config(tk.spec.clone(), 2, LateReset::Steps(0));
    let out = train(&cfg, &t, &tk.rewound().unwrap(), &tk.mask, 0, false).unwrap();
    for (name, m) in tk.mask.iter() {
        let w = out.params.tensor(name).unwrap().data();
        for (&keep, &v) in m.bits().iter().zip(w) {
            if !keep {
                assert_eq!(v, 0.0, "{name}");
            }
        }
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let t = task(3, 0.5);
    let cfg = gen_config(mlp(&t), 4, PruneScope::Global);
    let (full, _) = generate_tickets::<f32>(&cfg, &t).unwrap();

    let mut g = TicketGenerator::<f32>::new(cfg.clone(), &t).unwrap();
    g.step().unwrap();
    let (second, _) = g.step().unwrap();
    let restored: Ticket<f32> = decode_checkpoint(&encode_checkpoint(&second)).unwrap();
    let mut resumed = TicketGenerator::resume(cfg.clone(), &t, restored).unwrap();
    assert_eq!(resumed.completed(), 2);
    let mut rest = Vec::new();
    while !resumed.is_done() {
        rest.push(resumed.step().unwrap().0);
    }
    assert_eq!(rest, full[2..].to_vec());

    let mut other = cfg.clone();
    other.init_seed += 1;
    assert!(TicketGenerator::resume(other, &t, second).is_err());
}

#[test]
fn identical_configs_give_identical_tickets() {
    let t = task(3, 0.5);
    let cfg = gen_config(mlp(&t), 3, PruneScope::Global);
    let (a, ra) = generate_tickets::<f64>(&cfg, &t).unwrap();
    let (b, rb) = generate_tickets::<f64>(&cfg, &t).unwrap();
    assert_eq!(a, b);
    let acc = |r: &[ticketforge::pipeline::IterationRecord]| r.iter().map(|x| x.test_accuracy).collect::<Vec<_>>();
    assert_eq!(acc(&ra), acc(&rb));
}

#[test]
fn separable_two_class_task_is_learned() {
    let t = task(2, 0.3);
    let cfg = run_config(mlp(&t), 5, LateReset::Steps(0));
    let init: ParamStore<f32> = initialize(&cfg.model, 0).unwrap();
    let out = train(&cfg, &t, &init, &Mask::dense(&init), 0, true).unwrap();
    assert!(out.test_accuracy > 0.95, "{}", out.test_accuracy);
    assert_eq!(out.metrics.len(), 5);
    assert!(out.metrics.iter().all(|m| m.test_accuracy.is_some()));
}

#[test]
fn mismatched_data_is_rejected_before_training() {
    let t = task(3, 0.5);
    let spec = build_small_mlp([1, 6, 6], &[8], 5).unwrap();
    let cfg = run_config(spec, 1, LateReset::Steps(0));
    let init: ParamStore<f64> = initialize(&cfg.model, 0).unwrap();
    let err = train(&cfg, &t, &init, &Mask::dense(&init), 0, false).unwrap_err();
    assert!(err.to_string().contains("classes"), "{err}");
}
