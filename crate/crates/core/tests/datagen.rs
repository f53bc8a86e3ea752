mod common;

use common::{never_stops, tiny_data};
use xfer_core::datagen::{contrastive_pairs, generate, pseudo_nli, GenConfig};
use xfer_core::objectives::{prepare_task, Direction, Task, TaskExample, TaskLabel};
use xfer_core::text::{NliLabel, Tokens};

fn gen_cfg() -> GenConfig {
    GenConfig { max_len: 6, ..GenConfig::default() }
}

#[test]
fn pseudo_nli_gives_one_hypothesis_per_label() {
    let (cfg, data) = tiny_data(3);
    let model = never_stops(&cfg, &data);
    let premises: Vec<Tokens> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
    let (out, report) = pseudo_nli(&model, &data.vocab, &premises, &gen_cfg()).unwrap();
    assert_eq!(out.len(), 3 * premises.len());
    assert_eq!((report.produced, report.dropped), (out.len(), 0));
    for (i, triple) in out.chunks(3).enumerate() {
        let mut labels: Vec<NliLabel> = triple.iter().map(|g| g.item.label).collect();
        labels.sort();
        assert_eq!(labels, NliLabel::ALL.to_vec());
        for g in triple {
            assert_eq!(g.source_id, i);
            assert_eq!(g.item.premise, premises[i]);
            assert_eq!(g.item.label, g.control_code.to_nli());
            assert!(!g.item.hypothesis.is_empty());
        }
    }
    let again = pseudo_nli(&model, &data.vocab, &premises, &gen_cfg()).unwrap();
    assert_eq!(out, again.0);
}

#[test]
fn pseudo_nli_counts_scale_with_premises() {
    let (cfg, data) = tiny_data(4);
    let model = never_stops(&cfg, &data);
    let premise = data.target_dev[0].premise.clone();
    let premises = vec![premise; 16];
    let (out, _) = pseudo_nli(&model, &data.vocab, &premises, &GenConfig { max_len: 2, ..GenConfig::default() }).unwrap();
    assert_eq!(out.len(), 48);
    assert!(pseudo_nli(&model, &data.vocab, &[], &gen_cfg()).is_err());
}

#[test]
fn contrastive_sets_hold_two_k_sentences() {
    let (cfg, data) = tiny_data(5);
    let model = never_stops(&cfg, &data);
    let anchors: Vec<Tokens> = data.target_dev.iter().take(3).map(|e| e.premise.clone()).collect();
    let gc = gen_cfg();
    assert_eq!((gc.k_pairs, gc.beam), (3, 5));
    let (sets, report) = contrastive_pairs(&model, &data.vocab, &anchors, &gc).unwrap();
    assert_eq!(sets.len(), anchors.len());
    assert_eq!(report.produced, 6 * anchors.len());
    for (i, s) in sets.iter().enumerate() {
        assert_eq!(s.source_id, i);
        assert_eq!(s.positives.len() + s.negatives.len(), 2 * gc.k_pairs);
    }
}

#[test]
fn single_beam_positive_is_the_greedy_generation() {
    let (cfg, data) = tiny_data(6);
    let model = never_stops(&cfg, &data);
    let anchor = data.target_dev[0].premise.clone();
    let gc = GenConfig { beam: 1, k_pairs: 1, max_len: 6 };
    let (sets, _) = contrastive_pairs(&model, &data.vocab, &[anchor.clone()], &gc).unwrap();
    let ex = TaskExample { task: Task::Nli, direction: Direction::Nlg, x1: anchor, x2: vec![], label: TaskLabel::Entailed };
    let prompt = prepare_task(&ex, &data.vocab).unwrap().src;
    let greedy = generate(&model, &data.vocab, &prompt, 6).unwrap();
    assert_eq!(sets[0].positives, vec![greedy]);
}
