use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ticketforge::data::{
    adapt_channels, epoch_order, load_csv, load_idx, split_halves, ChannelAdapt, DataError, TaskData,
};
use ticketforge::model::{build_small_mlp, initialize, ParamStore};
use ticketforge::optim::{LrSchedule, OptimizerConfig};
use ticketforge::pipeline::{train, LateReset, TrainRunConfig};
use ticketforge::pruning::Mask;

fn write_idx(dir: &Path, name: &str, pixels: &[u8], labels: &[u8], rows: u32, cols: u32) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [labels.len() as u32, rows, cols] {
        img.extend(d.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = 0x0000_0801u32.to_be_bytes().to_vec();
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let pi = dir.join(format!("{name}-images.idx"));
    let pl = dir.join(format!("{name}-labels.idx"));
    std::fs::write(&pi, img).unwrap();
    std::fs::write(&pl, lab).unwrap();
    (pi, pl)
}

#[test]
fn idx_files_load_and_standardize() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..4 * 9).map(|i| (i * 7 % 256) as u8).collect();
    let (pi, pl) = write_idx(dir.path(), "train", &pixels, &[0, 1, 2, 1], 3, 3);
    let ds = load_idx(&pi, &pl).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.num_classes(), 3);
    assert_eq!(ds.image_size(), (3, 3));
    assert_eq!(ds.labels(), &[0, 1, 2, 1]);
    // raw pixels, scaled to [0, 1], survive the normalization round trip
    let raw = ds.raw_images();
    for (r, &p) in raw.iter().zip(&pixels) {
        assert!((r - p as f64 / 255.0).abs() < 1e-9, "{r} vs {p}");
    }
    let mean = ds.images().data().iter().sum::<f64>() / 36.0;
    assert!(mean.abs() < 1e-9);
}

#[test]
fn idx_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let pixels = vec![0u8; 2 * 4];
    let (pi, pl) = write_idx(dir.path(), "ok", &pixels, &[0, 1], 2, 2);

    let short = dir.path().join("short.idx");
    std::fs::write(&short, &std::fs::read(&pi).unwrap()[..20]).unwrap();
    assert!(matches!(load_idx(&short, &pl), Err(DataError::Truncated { .. })));

    assert!(matches!(load_idx(&pl, &pl), Err(DataError::BadMagic { .. })));

    let (_, three) = write_idx(dir.path(), "three", &[0u8; 12], &[0, 1, 0], 2, 2);
    assert!(matches!(load_idx(&pi, &three), Err(DataError::LengthMismatch { .. })));

    assert!(matches!(
        load_idx(&dir.path().join("absent"), &pl),
        Err(DataError::Io { .. })
    ));
}

fn separable_csv(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("label");
    for i in 0..16 {
        write!(text, ",p{i}").unwrap();
    }
    text.push('\n');
    for i in 0..n {
        let label = i % 2;
        write!(text, "{label}").unwrap();
        for px in 0..16 {
            // class 0 lights the left half of a 4x4 image, class 1 the right
            let lit = (px % 4 < 2) == (label == 0);
            let v = if lit { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3);
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn separable_csv_task_trains_above_95_percent() {
    let dir = tempfile::tempdir().unwrap();
    separable_csv(&dir.path().join("train.csv"), 200, 1);
    separable_csv(&dir.path().join("test.csv"), 100, 2);
    let train_ds = load_csv(&dir.path().join("train.csv"), [1, 4, 4], None).unwrap();
    let test_ds = load_csv(&dir.path().join("test.csv"), [1, 4, 4], Some(2)).unwrap();
    let task = TaskData::new(train_ds, test_ds).unwrap();
    let cfg = TrainRunConfig {
        model: build_small_mlp([1, 4, 4], &[8], 2).unwrap(),
        optimizer: OptimizerConfig {
            lr: 0.05,
            ..OptimizerConfig::sgd()
        },
        schedule: LrSchedule::constant(),
        epochs: 5,
        batch_size: 20,
        seed: 0,
        late_reset: LateReset::Steps(0),
    };
    let init: ParamStore<f32> = initialize(&cfg.model, 0).unwrap();
    let out = train(&cfg, &task, &init, &Mask::dense(&init), 0, false).unwrap();
    assert!(out.test_accuracy > 0.95, "{}", out.test_accuracy);
}

#[test]
fn csv_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "label,a,b\n0,1,2\n1,x,3\n").unwrap();
    assert!(matches!(load_csv(&p, [1, 1, 2], None), Err(DataError::Csv(_))));
    std::fs::write(&p, "label,a,b\n0,1,2\n5,1,3\n").unwrap();
    assert!(matches!(load_csv(&p, [1, 1, 2], Some(3)), Err(DataError::LabelOutOfRange { .. })));
    assert!(matches!(load_csv(&p, [1, 2, 2], None), Err(DataError::Csv(_))));
}

#[test]
fn halves_are_balanced_disjoint_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    separable_csv(&dir.path().join("d.csv"), 41, 3);
    let ds = load_csv(&dir.path().join("d.csv"), [1, 4, 4], None).unwrap();
    let (a, b) = split_halves(&ds, 17).unwrap();
    assert_eq!(a.len() + b.len(), ds.len());
    assert_eq!(a.class_counts(), vec![10, 10]);
    assert_eq!(b.class_counts(), vec![11, 10]);
    assert!(a.id.ends_with("/half-a") && b.id.ends_with("/half-b"));
    let (a2, _) = split_halves(&ds, 17).unwrap();
    assert_eq!(a, a2);
    let (a3, _) = split_halves(&ds, 18).unwrap();
    assert_ne!(a.raw_images(), a3.raw_images());
}

#[test]
fn channel_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    separable_csv(&dir.path().join("d.csv"), 10, 4);
    let ds = load_csv(&dir.path().join("d.csv"), [1, 4, 4], None).unwrap();
    assert!(adapt_channels(&ds, 3, ChannelAdapt::Strict).is_err());
    let rgb = adapt_channels(&ds, 3, ChannelAdapt::Auto).unwrap();
    assert_eq!(rgb.channels(), 3);
    let back = adapt_channels(&rgb, 1, ChannelAdapt::Auto).unwrap();
    for (u, v) in back.raw_images().iter().zip(ds.raw_images()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn epoch_orders_are_permutations_that_vary_by_epoch() {
    let a = epoch_order(50, 9, 0);
    let b = epoch_order(50, 9, 1);
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..50).collect::<Vec<_>>());
    assert_ne!(a, b);
    assert_eq!(a, epoch_order(50, 9, 0));
}
