mod common;

use common::tiny_data;
use xfer_core::experiment::{build_datasets, zero_rule_accuracy, Datasets};

#[test]
fn datasets_round_trip_through_a_directory() {
    let (_, data) = tiny_data(7);
    let dir = tempfile::tempdir().unwrap();
    let written = data.write_dir(dir.path()).unwrap();
    assert_eq!(written.len(), 11);
    assert!(written.iter().all(|p| p.exists()));
    let back = Datasets::read_dir(dir.path()).unwrap();
    assert_eq!(back.world, data.world);
    assert_eq!(back.vocab, data.vocab);
    assert_eq!(back.general_nli, data.general_nli);
    assert_eq!(back.general_summ, data.general_summ);
    assert_eq!(back.target_raw, data.target_raw);
    assert_eq!(back.target_test, data.target_test);
    assert_eq!(back.target_summ_test, data.target_summ_test);
    assert_eq!(back.val_raw, data.val_raw);
}

#[test]
fn datasets_are_a_function_of_the_seed() {
    let (cfg, a) = tiny_data(8);
    let b = build_datasets(&cfg).unwrap();
    assert_eq!(a.general_nli, b.general_nli);
    assert_eq!(a.target_test, b.target_test);
    let (_, c) = tiny_data(9);
    assert_ne!(a.target_raw, c.target_raw);
}

#[test]
fn target_splits_do_not_share_examples() {
    let (_, data) = tiny_data(10);
    for e in &data.target_test {
        assert!(!data.target_dev.contains(e));
    }
    let z = zero_rule_accuracy(&data).unwrap();
    assert!((0.0..=1.0).contains(&z));
}

#[test]
fn missing_split_file_names_its_path() {
    let (_, data) = tiny_data(11);
    let dir = tempfile::tempdir().unwrap();
    data.write_dir(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("data/target_test.jsonl")).unwrap();
    let err = Datasets::read_dir(dir.path()).unwrap_err().to_string();
    assert!(err.contains("target_test.jsonl"), "{err}");
}
