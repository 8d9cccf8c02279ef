use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::tokenizer::{train_bpe, SEP};

fn tok() -> TokenizerModel {
    train_bpe(&["take the tablet with water. do not take it twice."; 3], 290, &[SEP]).unwrap()
}

fn lm(t: &TokenizerModel) -> Model {
    Model::new(ModelConfig { vocab_size: t.vocab_size(), hidden: 16, layers: 1, heads: 2, max_len: 48, seed: 5 }).unwrap()
}

fn pair(i: usize) -> PreferencePair {
    PreferencePair {
        prompt: format!("question {i}"),
        chosen: format!("take it with water {i}"),
        rejected: format!("take it twice {i}"),
    }
}

#[test]
fn ranking_loss_values() {
    assert!((ranking_loss(0.0, 0.0) - 0.693147).abs() < 1e-6);
    assert!((ranking_loss(0.0, 0.0) - (2.0 as Float).ln()).abs() < 1e-15);
    assert!((ranking_loss(1.0, 0.0) - 0.313262).abs() < 1e-6);
    let tiny = ranking_loss(50.0, 0.0);
    assert!(tiny > 0.0 && tiny < 1e-20);
    assert!((ranking_loss(-800.0, 0.0) - 800.0).abs() < 1e-9);
}

#[test]
fn ranking_loss_gradient_signs() {
    for (a, b) in [(0.3, -1.2), (-5.0, 4.0), (0.0, 0.0), (30.0, -30.0)] {
        let rc = Tensor::leaf(vec![a], &[1]).unwrap();
        let rr = Tensor::leaf(vec![b], &[1]).unwrap();
        ranking_loss_tensor(&rc, &rr).unwrap().backward().unwrap();
        assert!(rc.grad().unwrap()[0] < 0.0 && rr.grad().unwrap()[0] > 0.0, "{a} {b}");
    }
}

#[test]
fn rm_init_copies_trunk_and_seeds_head() {
    let t = tok();
    let m = lm(&t);
    let a = RewardModel::from_lm(&m, &t, 1, None).unwrap();
    let b = RewardModel::from_lm(&m, &t, 1, None).unwrap();
    let c = RewardModel::from_lm(&m, &t, 2, None).unwrap();
    assert_eq!(a.trunk, m);
    assert_eq!(a.head, b.head);
    assert_ne!(a.head, c.head);
    assert_eq!(a.head.get("w1").unwrap().shape, vec![16, 4]);
    let other = TokenizerModel::byte_level(&[SEP]).unwrap();
    assert!(RewardModel::from_lm(&m, &other, 1, None).is_err());
    for i in 0..20 {
        let s = a.score_text(&t, &format!("prompt {i}"), "some response").unwrap();
        assert!(s.is_finite() && s.abs() < 10.0);
    }
}

#[test]
fn scores_are_batch_and_padding_invariant() {
    let t = tok();
    let rm = RewardModel::from_lm(&lm(&t), &t, 3, None).unwrap();
    let target = rm.encode_pair(&t, "q", "take the tablet").unwrap();
    let alone = rm.score_sequences(&[target.clone()]).unwrap()[0];
    let mut batch: Vec<Vec<u32>> = (0..7).map(|i| rm.encode_pair(&t, &"long prompt ".repeat(i % 3 + 1), "x").unwrap()).collect();
    batch.insert(4, target);
    let scores = rm.score_sequences(&batch).unwrap();
    assert!((scores[4] - alone).abs() < 1e-5);
    assert_eq!(rm.score_sequences(&batch).unwrap(), scores);
}

#[test]
fn overlong_inputs_report_lengths() {
    let t = tok();
    let rm = RewardModel::from_lm(&lm(&t), &t, 3, None).unwrap();
    let err = rm.score_text(&t, &"z".repeat(100), "y").unwrap_err().to_string();
    assert!(err.contains("max_len 48") && err.contains("#0"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let t = tok();
    let rm = RewardModel::from_lm(&lm(&t), &t, 3, None).unwrap();
    let ck = Checkpoint::from_bytes(&rm.to_checkpoint(4).to_bytes().unwrap()).unwrap();
    assert_eq!(RewardModel::from_checkpoint(&ck).unwrap(), rm);
    assert!(RewardModel::from_checkpoint(&Checkpoint::from_model("lm", &rm.trunk, 0)).is_err());
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let pairs: Vec<_> = (0..100).map(pair).collect();
    let (tr, ho) = split_pairs(&pairs, 5);
    assert_eq!(tr.len() + ho.len(), 100);
    assert!(!ho.is_empty() && ho.len() < 40);
    assert_eq!(split_pairs(&pairs, 5), (tr.clone(), ho.clone()));
    assert!(ho.iter().all(|p| !tr.iter().any(|q| q.prompt == p.prompt)));
}

#[test]
fn token_count_reward() {
    let r = TokenCountReward { token: 7 };
    assert_eq!(r.score(&[(vec![7, 7], vec![1, 7, 7, 3, 7]), (vec![], vec![])]).unwrap(), vec![3.0, 0.0]);
}

#[test]
fn training_step_lowers_loss_and_keeps_pairs_valid() {
    let t = tok();
    let mut rm = RewardModel::from_lm(&lm(&t), &t, 3, None).unwrap();
    let pairs: Vec<_> = (0..30).map(pair).collect();
    let mut opts = [AdamWState::new(), AdamWState::new()];
    let hp = RmHparams { epochs: 3, batch_size: 8, ..Default::default() };
    let log = train_rm(&mut rm, &mut opts, &t, &pairs, &hp).unwrap();
    assert!((log.steps[0].loss - (2.0 as Float).ln()).abs() < 0.1 * (2.0 as Float).ln());
    assert!(log.steps.last().unwrap().loss < log.steps[0].loss);
    assert_eq!(log.held_out_accuracy.len(), 3);
    let bad = [PreferencePair { prompt: "p".into(), chosen: "same".into(), rejected: "same".into() }];
    assert!(rm.accuracy(&t, &bad, 4).is_err());
}

proptest! {
    #[test]
    fn antisymmetry_bound(a in -50.0..50.0f64, b in -50.0..50.0f64) {
        let (a, b) = (a as Float, b as Float);
        let s = ranking_loss(a, b) + ranking_loss(b, a);
        prop_assert!(s >= 2.0 * (2.0 as Float).ln() - 1e-12);
    }

    #[test]
    fn translation_invariance_on_exact_grid(a in -4096i32..4096, b in -4096i32..4096, c in -4096i32..4096) {
        // multiples of 1/8 keep every sum and difference exact
        let f = |x: i32| x as Float / 8.0;
        prop_assert_eq!(ranking_loss(f(a) + f(c), f(b) + f(c)), ranking_loss(f(a), f(b)));
    }
}
