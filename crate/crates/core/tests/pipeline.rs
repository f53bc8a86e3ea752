mod common;

use common::{fresh_model, never_stops, same_params, tiny_data};
use xfer_core::datagen::{contrastive_pairs, pseudo_nli, GenConfig};
use xfer_core::experiment::pretrain;
use xfer_core::pipeline::{
    base_warmup, classify_nli, contrastive_loss, embed_finetune, self_finetune, ContrastiveConfig, TrainConfig,
    WarmupConfig,
};
use xfer_core::text::{NliExample, Tokens, NUM_SENTINELS};

#[test]
fn copy_loss_halves_within_200_steps() {
    let (cfg, data) = tiny_data(1);
    let model = fresh_model(&cfg, &data);
    let first = data.vocab.sentinel(NUM_SENTINELS - 1) + 1;
    let tokens: Vec<u32> = (first..data.vocab.len() as u32).collect();
    let wc = WarmupConfig { steps: 200, mlm_share: 0.0, learning_rate: 1e-3, max_len: 8, ..WarmupConfig::default() };
    let (_, losses) = base_warmup(model, &tokens, &[], &wc).unwrap();
    let mean = |s: &[_]| s.iter().map(|b: &xfer_core::objectives::LossBreakdown| b.l_nlg).sum::<f64>() / s.len() as f64;
    let (start, end) = (mean(&losses[..10]), mean(&losses[190..]));
    assert!(end <= 0.5 * start, "copy loss {start} -> {end}");
}

#[test]
fn pretraining_record_and_checkpoint_selection() {
    let (cfg, data) = tiny_data(2);
    let base = fresh_model(&cfg, &data);
    let (model, record) = pretrain(&base, &data, &cfg.train).unwrap();
    assert_eq!(record.epochs.len(), cfg.train.epochs);
    for e in &record.epochs {
        for b in [&e.train, &e.validation] {
            assert!([b.l_mlm, b.l_nlu, b.l_nlg, b.l_task, b.l_joint].iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }
    let best = record
        .epochs
        .iter()
        .min_by(|a, b| a.validation.l_joint.total_cmp(&b.validation.l_joint))
        .unwrap();
    assert_eq!(record.selected_epoch, best.epoch);

    let (again, record2) = pretrain(&base, &data, &cfg.train).unwrap();
    assert_eq!(record, record2);
    assert!(same_params(&model, &again, |_| true));
}

#[test]
fn without_mlm_the_joint_loss_is_the_task_loss() {
    let (cfg, data) = tiny_data(3);
    let mut train = TrainConfig { epochs: 1, ..cfg.train.clone() };
    train.ablations.enable_mlm = false;
    let (_, record) = pretrain(&fresh_model(&cfg, &data), &data, &train).unwrap();
    for e in &record.epochs {
        for b in [&e.train, &e.validation] {
            assert_eq!(b.l_mlm, 0.0);
            assert!((b.l_joint - b.l_task).abs() < 1e-9);
        }
    }
}

fn pseudo_set(seed: u64) -> (common::Setup, Vec<NliExample>) {
    let (cfg, data) = tiny_data(seed);
    let model = never_stops(&cfg, &data);
    let premises: Vec<Tokens> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
    let gc = GenConfig { max_len: 6, ..GenConfig::default() };
    let (out, _) = pseudo_nli(&model, &data.vocab, &premises, &gc).unwrap();
    ((cfg, data, model), out.into_iter().map(|g| g.item).collect())
}

fn own_label_accuracy(s: &common::Setup, model: &xfer_core::model::Seq2SeqModel<f32>, pseudo: &[NliExample]) -> f64 {
    let hits = pseudo
        .iter()
        .filter(|e| classify_nli(model, &s.1.vocab, &e.premise, &e.hypothesis).unwrap() == e.label)
        .count();
    hits as f64 / pseudo.len() as f64
}

#[test]
fn self_finetuning_fits_its_own_pseudo_labels() {
    let (setup, pseudo) = pseudo_set(4);
    let sf = TrainConfig { epochs: 6, ..setup.0.self_finetune.clone() };
    let before = own_label_accuracy(&setup, &setup.2, &pseudo);
    let (model, losses) = self_finetune(setup.2.clone(), &setup.1.vocab, &pseudo, &sf).unwrap();
    let steps = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(steps as f64 >= 0.8 * (losses.len() - 1) as f64, "{losses:?}");
    assert!(own_label_accuracy(&setup, &model, &pseudo) >= before);
}

#[test]
fn self_finetune_edge_cases() {
    let (setup, pseudo) = pseudo_set(5);
    let zero = TrainConfig { epochs: 0, ..setup.0.self_finetune.clone() };
    let (same, losses) = self_finetune(setup.2.clone(), &setup.1.vocab, &pseudo, &zero).unwrap();
    assert!(losses.is_empty());
    assert!(same_params(&same, &setup.2, |_| true));
    assert!(self_finetune(setup.2.clone(), &setup.1.vocab, &[], &setup.0.self_finetune).is_err());
    let mut off = setup.0.self_finetune.clone();
    off.ablations.enable_self_finetune = false;
    assert!(self_finetune(setup.2.clone(), &setup.1.vocab, &pseudo, &off).is_err());
}

#[test]
fn embedding_finetune_trains_the_encoder_only() {
    let (cfg, data) = tiny_data(6);
    let model = never_stops(&cfg, &data);
    let anchors: Vec<Tokens> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
    let gc = GenConfig { max_len: 6, ..GenConfig::default() };
    let (sets, _) = contrastive_pairs(&model, &data.vocab, &anchors, &gc).unwrap();
    let cc = ContrastiveConfig { epochs: 4, batch_size: 3, learning_rate: 1e-3, ..ContrastiveConfig::default() };
    let before = contrastive_loss(&model, &data.vocab, &sets, cc.tau).unwrap();
    let (tuned, _) = embed_finetune(model.clone(), &data.vocab, &sets, &cc).unwrap();
    let after = contrastive_loss(&tuned, &data.vocab, &sets, cc.tau).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(same_params(&model, &tuned, |n| !n.starts_with("enc.")));
    assert!(!same_params(&model, &tuned, |n| n.starts_with("enc.")));

    let zero = ContrastiveConfig { epochs: 0, ..cc };
    let (same, _) = embed_finetune(model.clone(), &data.vocab, &sets, &zero).unwrap();
    assert!(same_params(&model, &same, |_| true));
}
