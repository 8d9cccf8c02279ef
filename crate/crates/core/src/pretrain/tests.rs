use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::model::{Checkpoint, ModelConfig};

fn corpora() -> BTreeMap<Category, Vec<u32>> {
    let mut c = BTreeMap::new();
    c.insert(Category::Web, (0..97).map(|i| (i % 13) as u32).collect());
    c.insert(Category::Papers, (0..61).map(|i| 13 + (i % 7) as u32).collect());
    c.insert(Category::Patents, (0..43).map(|i| 20 + (i % 5) as u32).collect());
    c.insert(Category::Books, vec![]);
    c
}

fn spec(pairs: &[(Category, f64)], budget: u64, seed: u64) -> StageSpec {
    StageSpec { token_budget: budget, mixture: pairs.iter().copied().collect(), seed }
}

fn model() -> Model {
    Model::new(ModelConfig { vocab_size: 25, hidden: 16, layers: 1, heads: 2, max_len: 16, seed: 3 }).unwrap()
}

const SHAPE: BlockShape = BlockShape { batch: 4, seq_len: 8 };

#[test]
fn single_category_stream() {
    let s = schedule_mixture(&corpora(), &spec(&[(Category::Papers, 1.0)], 320, 1), SHAPE).unwrap();
    let batches: Vec<_> = s.collect();
    assert_eq!(batches.len(), 10);
    assert!(batches.iter().flatten().all(|b| b.category == Category::Papers && b.ids.iter().all(|&t| (13..20).contains(&t))));
}

#[test]
fn packing_wraps_around_the_corpus() {
    let mut p = Packer { tokens: vec![1, 2, 3], pos: 0 };
    assert_eq!(p.next_block(4), vec![1, 2, 3, 1]);
    assert_eq!(p.next_block(4), vec![2, 3, 1, 2]);
}

#[test]
fn mixture_counts_match_multinomial() {
    let weights = [(Category::Web, 0.5), (Category::Papers, 0.3), (Category::Patents, 0.2)];
    let shape = BlockShape { batch: 10, seq_len: 4 };
    let s = schedule_mixture(&corpora(), &spec(&weights, 4000, 77), shape).unwrap();
    let blocks: Vec<TokenBlock> = s.flatten().collect();
    assert_eq!(blocks.len(), 1000);
    let mut chi2 = 0.0;
    for (cat, w) in weights {
        let n = blocks.iter().filter(|b| b.category == cat).count() as f64;
        let (mean, sd) = (1000.0 * w, (1000.0 * w * (1.0 - w)).sqrt());
        assert!((n - mean).abs() <= 3.0 * sd, "{cat}: {n}");
        chi2 += (n - mean).powi(2) / mean;
    }
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}

#[test]
fn stream_is_seed_deterministic_and_budgeted() {
    let sp = spec(&[(Category::Web, 0.6), (Category::Patents, 0.4)], 1000, 5);
    let a: Vec<_> = schedule_mixture(&corpora(), &sp, SHAPE).unwrap().collect();
    let b: Vec<_> = schedule_mixture(&corpora(), &sp, SHAPE).unwrap().collect();
    assert_eq!(a, b);
    let consumed: u64 = a.iter().flatten().map(|b| b.ids.len() as u64).sum();
    assert!(consumed >= 1000 && consumed < 1000 + SHAPE.tokens_per_batch());
    let c: Vec<_> = schedule_mixture(&corpora(), &StageSpec { seed: 6, ..sp }, SHAPE).unwrap().collect();
    assert_ne!(a, c);
}

#[test]
fn invalid_specs_rejected_upfront() {
    let c = corpora();
    assert!(schedule_mixture(&c, &spec(&[(Category::Books, 1.0)], 10, 0), SHAPE).is_err());
    assert!(schedule_mixture(&c, &spec(&[(Category::Chats, 1.0)], 10, 0), SHAPE).is_err());
    assert!(schedule_mixture(&c, &spec(&[(Category::Web, 0.5)], 10, 0), SHAPE).is_err());
    assert!(schedule_mixture(&c, &spec(&[(Category::Web, -1.0), (Category::Papers, 2.0)], 10, 0), SHAPE).is_err());
    assert!(schedule_mixture(&c, &spec(&[(Category::Web, 0.0)], 10, 0), SHAPE).is_err());
    // zero weight on an empty category is fine
    assert!(schedule_mixture(&c, &spec(&[(Category::Web, 1.0), (Category::Books, 0.0)], 10, 0), SHAPE).is_ok());
}

#[test]
fn initial_loss_near_log_vocab() {
    let m = model();
    let blocks: Vec<Vec<u32>> = schedule_mixture(&corpora(), &spec(&[(Category::Web, 1.0)], 32, 0), SHAPE)
        .unwrap()
        .flatten()
        .map(|b| b.ids)
        .collect();
    let loss = evaluate_lm(&m, &blocks).unwrap();
    let ln_v = (25.0 as Float).ln();
    assert!((loss - ln_v).abs() < 0.05 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn training_is_deterministic_and_accounts_tokens() {
    let sp = spec(&[(Category::Web, 0.7), (Category::Papers, 0.3)], 640, 2);
    let run = || {
        let mut m = model();
        let mut opt = AdamWState::new();
        let log = train_stage(&mut m, &mut opt, &corpora(), &sp, SHAPE, &TrainHparams::default()).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(m1, m2);
    assert_eq!(l1.steps, l2.steps);
    assert_eq!(l1.tokens_per_category, l2.tokens_per_category);
    assert_eq!(l1.steps.len(), 20);
    assert_eq!(l1.tokens_consumed, 640);
    assert_eq!(l1.tokens_per_category.values().sum::<u64>(), l1.tokens_consumed);
    assert!(l1.final_loss().unwrap() < l1.steps[0].loss);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_weights() {
    let mut m = model();
    m.params_mut().get_mut(crate::model::OUT_PROJ).unwrap().data[0] = Float::INFINITY;
    let before = m.clone();
    let mut opt = AdamWState::new();
    let err = train_stage(&mut m, &mut opt, &corpora(), &spec(&[(Category::Web, 1.0)], 64, 0), SHAPE, &TrainHparams::default())
        .unwrap_err();
    assert!(matches!(err, Error::TrainingAborted { step: 1, .. }), "{err}");
    assert_eq!(m, before);
    assert_eq!(opt.step, 0);
}

#[test]
fn zero_budget_stage_is_identity() {
    let mut m = model();
    let mut opt = AdamWState::new();
    let s1 = spec(&[(Category::Web, 1.0)], 96, 1);
    let s2 = spec(&[(Category::Patents, 1.0)], 0, 2);
    let mut snapshots = Vec::new();
    let log = run_two_stage(&mut m, &mut opt, &corpora(), &s1, &s2, SHAPE, &TrainHparams::default(), &mut |_, m, _| {
        snapshots.push(m.clone());
        Ok(())
    })
    .unwrap();
    assert!(log.stage2.steps.is_empty());
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn resuming_from_stage1_checkpoint_is_bitwise_equal() {
    let s1 = spec(&[(Category::Web, 1.0)], 160, 1);
    let s2 = spec(&[(Category::Web, 0.2), (Category::Patents, 0.8)], 96, 2);
    let hp = TrainHparams::default();
    let mut m = model();
    let mut opt = AdamWState::new();
    let mut saved = None;
    run_two_stage(&mut m, &mut opt, &corpora(), &s1, &s2, SHAPE, &hp, &mut |stage, m, o| {
        if stage == 1 {
            let mut ck = Checkpoint::from_model("lm", m, o.step);
            ck.optimizers.insert("model".into(), o.clone());
            saved = Some(ck.to_bytes()?);
        }
        Ok(())
    })
    .unwrap();

    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = ck.model().unwrap();
    let mut ropt = ck.optimizers["model"].clone();
    train_stage(&mut resumed, &mut ropt, &corpora(), &s2, SHAPE, &hp).unwrap();
    assert_eq!(resumed, m);
    assert_eq!(ropt, opt);
}
