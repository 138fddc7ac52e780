mod common;

use streamhl::checkpoint::Checkpoint;
use streamhl::metrics::{rows_to_csv, CSV_HEADER};
use streamhl::train::{evaluate, Trainer};

#[test]
fn reruns_are_bitwise_identical() {
    let (data, cfg) = common::quick_setup(3);
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        rows_to_csv(&t.run(&data.windows, Some(&data.windows), None, |_| {}).unwrap())
    };
    let first = run();
    assert!(first.starts_with(CSV_HEADER));
    assert_eq!(first, run());
}

#[test]
fn different_seeds_diverge() {
    let (data, cfg) = common::quick_setup(1);
    let run = |seed| {
        let mut c = cfg.clone();
        c.seed = seed;
        let mut t = Trainer::new(c).unwrap();
        t.train_epoch(&data.windows).unwrap();
        t.model.params.tensors()[0].clone()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn resuming_from_a_checkpoint_changes_nothing() {
    let (data, cfg) = common::quick_setup(4);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut reference = Vec::new();
    for _ in 0..4 {
        reference.push(straight.train_epoch(&data.windows).unwrap());
    }

    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.train_epoch(&data.windows).unwrap();
    first.train_epoch(&data.windows).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(cfg.clone(), &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 2);
    for expected in &reference[2..] {
        assert_eq!(&resumed.train_epoch(&data.windows).unwrap(), expected);
    }
    assert_eq!(resumed.model.params.tensors(), straight.model.params.tensors());
    assert_eq!(resumed.adam.t, straight.adam.t);
}

#[test]
fn run_writes_checkpoints_and_metrics() {
    let (data, mut cfg) = common::quick_setup(2);
    cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let rows = t.run(&data.windows, None, Some(dir.path()), |_| {}).unwrap();
    for f in ["checkpoint_epoch0.khl", "checkpoint_epoch1.khl", "checkpoint_epoch2.khl", "checkpoint.khl", "metrics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), rows_to_csv(&rows));
    let epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs.iter().filter(|&&e| e == 0).count(), cfg.deltas.len());
    assert_eq!(*epochs.last().unwrap(), 2);

    // A resumed run picks up where the saved one stopped.
    let ckpt = Checkpoint::load(dir.path().join("checkpoint_epoch1.khl")).unwrap();
    let mut again = Trainer::from_checkpoint(cfg, &ckpt).unwrap();
    let tail = again.run(&data.windows, None, None, |_| {}).unwrap();
    assert!(tail.iter().all(|r| r.epoch == 2));
    assert_eq!(tail, rows.iter().filter(|r| r.epoch == 2).cloned().collect::<Vec<_>>());
}

#[test]
fn zero_epochs_only_evaluates() {
    let (data, cfg) = common::quick_setup(0);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let before = t.model.params.tensors().to_vec();
    let rows = t.run(&data.windows, None, None, |_| {}).unwrap();
    assert!(rows.iter().all(|r| r.epoch == 0));
    assert_eq!(t.model.params.tensors(), &before[..]);
}

#[test]
fn evaluation_is_read_only_and_repeatable() {
    let (data, cfg) = common::quick_setup(1);
    let t = Trainer::new(cfg.clone()).unwrap();
    let a = evaluate(&t.model, &data.windows, &cfg).unwrap();
    let b = evaluate(&t.model, &data.windows, &cfg).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.tau, b.tau);
    let fractions: f64 = a.regions.iter().sum();
    assert!((fractions - 1.0).abs() < 1e-12);
}

#[test]
fn empty_split_is_an_error() {
    let (_, cfg) = common::quick_setup(1);
    let mut t = Trainer::new(cfg).unwrap();
    assert!(t.train_epoch(&[]).is_err());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (_, cfg) = common::quick_setup(1);
    let ckpt = Trainer::new(cfg.clone()).unwrap().checkpoint();
    let mut wider = cfg;
    wider.model.d_model = 24;
    assert!(Trainer::from_checkpoint(wider, &ckpt).is_err());
    let mut bytes = ckpt.to_bytes();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&ckpt.to_bytes()[..20]).is_err());
}
