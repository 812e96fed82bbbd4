use proptest::prelude::*;
use stylenet::data::synth::SynthConfig;
use stylenet::data::Dataset;
use stylenet::train::checkpoint::{self, load, load_variant, save};
use stylenet::train::{evaluate, train, EvalReport, TrainConfig};
use stylenet::{ArchConfig, CheckpointError, Error, Model, Variant};

fn small_data(per_class: usize, seed: u64) -> Dataset {
    SynthConfig {
        per_class,
        size: 32,
        seed,
        ..Default::default()
    }
    .dataset()
    .unwrap()
}

fn small_arch(v: Variant) -> ArchConfig {
    let mut a = ArchConfig::new(v).with_truncation(5);
    a.input_size = 32;
    a
}

fn cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: lr,
        seed: 4,
        ..Default::default()
    }
}

fn same_evaluation(a: &EvalReport, b: &EvalReport) -> bool {
    a.confusion_matrix == b.confusion_matrix && a.f1 == b.f1 && a.macro_f1 == b.macro_f1
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = small_data(4, 1);
    let mut m = Model::<f32>::build(&small_arch(Variant::TruncatedResnet)).unwrap();
    let before = m.params().clone();
    train(&mut m, &ds, None, &cfg(2, 0.0)).unwrap();
    assert_eq!(m.params(), &before);
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = small_data(4, 2);
    for v in Variant::ALL {
        let run = || {
            let mut m = Model::<f32>::build(&small_arch(v)).unwrap();
            let hist = train(&mut m, &ds, Some(&ds), &cfg(2, 3e-3)).unwrap();
            (m, hist)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.params(), b.params(), "{v}");
        assert_eq!(ha, hb);
    }
}

#[test]
fn small_set_is_memorized() {
    let ds = small_data(4, 3);
    let mut m = Model::<f32>::build(&small_arch(Variant::TruncatedResnet)).unwrap();
    let c = TrainConfig {
        batch_size: 4,
        ..cfg(60, 3e-3)
    };
    let hist = train(&mut m, &ds, None, &c).unwrap();
    assert!(hist.last().unwrap().train_loss < hist[0].train_loss);
    let acc = evaluate(&m, &ds).unwrap().accuracy();
    assert_eq!(
        acc,
        1.0,
        "{:?}",
        hist.iter().map(|h| h.train_loss).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_roundtrip_preserves_evaluation() {
    let ds = small_data(3, 5);
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let mut m = Model::<f32>::build(&small_arch(v)).unwrap();
        train(&mut m, &ds, None, &cfg(1, 3e-3)).unwrap();
        let path = dir.path().join(format!("{v}.ckpt"));
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
        assert!(same_evaluation(
            &evaluate(&m, &ds).unwrap(),
            &evaluate(&back, &ds).unwrap()
        ));
    }
}

#[test]
fn checkpoint_errors_are_distinct() {
    let m = Model::<f32>::build(&small_arch(Variant::GramAttention)).unwrap();
    let bytes = checkpoint::to_bytes(&m);
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(
        checkpoint::from_bytes(&bad),
        Err(Error::Checkpoint(CheckpointError::BadMagic))
    ));
    assert!(matches!(
        checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(CheckpointError::Truncated(_)))
    ));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    save(&m, &path).unwrap();
    assert!(matches!(
        load_variant(&path, Variant::MultiPatch),
        Err(Error::Checkpoint(CheckpointError::VariantMismatch { .. }))
    ));
    assert!(load_variant(&path, Variant::GramAttention).is_ok());
}

#[test]
fn out_of_range_label_names_the_file() {
    let mut ds = small_data(1, 6);
    ds.samples[2].label = 9;
    let path = ds.samples[2].path.clone();
    let mut m = Model::<f32>::build(&small_arch(Variant::MultiPatch)).unwrap();
    let err = train(&mut m, &ds, None, &cfg(1, 3e-3)).unwrap_err();
    assert!(matches!(err, Error::Data { .. }));
    assert!(
        err.to_string().contains(&path.display().to_string()),
        "{err}"
    );
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let ds = small_data(3, 7);
    let m = Model::<f32>::build(&small_arch(Variant::MultiPatch)).unwrap();
    let r = evaluate(&m, &ds).unwrap();
    let rows: Vec<usize> = r
        .confusion_matrix
        .iter()
        .map(|row| row.iter().sum())
        .collect();
    assert_eq!(rows, ds.class_counts());
    assert_eq!(r.sample_count, ds.len());
}

proptest! {
    #[test]
    fn macro_f1_is_invariant_to_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let names: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
        let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let a = EvalReport::from_predictions(&names, &t, &p, 0.0).unwrap();
        let tp: Vec<_> = t.iter().map(|&c| perm[c]).collect();
        let pp: Vec<_> = p.iter().map(|&c| perm[c]).collect();
        let b = EvalReport::from_predictions(&names, &tp, &pp, 0.0).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }
}
