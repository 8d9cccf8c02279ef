use super::*;
use crate::model::ModelConfig;
use crate::reward::TokenCountReward;

const TARGET: u32 = 7;
const STOP: u32 = 31;

fn actor() -> Model {
    Model::new(ModelConfig { vocab_size: 32, hidden: 16, layers: 1, heads: 2, max_len: 24, seed: 11 }).unwrap()
}

fn prompts() -> Vec<Vec<u32>> {
    (0..6).map(|i| vec![1, 2 + i as u32, 3 + (i % 2) as u32]).collect()
}

fn cfg() -> PpoConfig {
    PpoConfig { iterations: 3, prompts_per_iteration: 4, max_new: 6, lr: 5e-3, critic_lr: 5e-3, ..Default::default() }
}

const TOKENS: PolicyTokens = PolicyTokens { pad: 0, stop: Some(STOP) };

fn run(cfg: &PpoConfig) -> (Model, Model, RlhfLog) {
    let mut a = actor();
    let reference = a.clone();
    let mut critic = Critic::from_trunk(&a, 1);
    let mut opts = PpoOptimizers::default();
    let log = rlhf_train(
        &mut a,
        &reference,
        &mut critic,
        &mut opts,
        &TokenCountReward { token: TARGET },
        &prompts(),
        cfg,
        TOKENS,
        &mut |_, _, _| Ok(()),
    )
    .unwrap();
    (a, reference, log)
}

#[test]
fn best_selection_prefers_lowest_index_on_ties() {
    assert_eq!(select_best(&[0.1, 0.9, 0.4, 0.2]), Some(1));
    assert_eq!(select_best(&[0.5, 0.5, 0.1]), Some(0));
    assert_eq!(select_best(&[3.0]), Some(0));
    assert_eq!(select_best(&[]), None);
}

#[test]
fn reward_shaping_arithmetic() {
    let r = compute_rewards(&[-1.0, -2.0, -0.5], &[-1.5, -2.0, -1.0], 2.0, 0.1);
    let expect = [-0.05, 0.0, 1.95];
    assert!(r.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12), "{r:?}");
    assert_eq!(compute_rewards(&[-1.0, -3.0], &[-2.0, -0.1], 4.0, 0.0), vec![0.0, 4.0]);
    assert_eq!(compute_rewards(&[-1.0, -3.0], &[-1.0, -3.0], 4.0, 0.5), vec![0.0, 4.0]);
}

#[test]
fn gae_matches_hand_recursion() {
    let (adv, ret) = gae(&[1.0, 0.0, 2.0], &[0.5, 0.2, 0.1], 1.0, 0.95);
    for (a, b) in adv.iter().zip([2.31975, 1.705, 1.9]) {
        assert!((a - b).abs() < 1e-12, "{adv:?}");
    }
    for (a, b) in ret.iter().zip([2.81975, 1.905, 2.0]) {
        assert!((a - b).abs() < 1e-12, "{ret:?}");
    }
    // λ = 1 gives reward-to-go returns
    let (_, ret) = gae(&[1.0, 0.0, 2.0], &[0.5, 0.2, 0.1], 1.0, 1.0);
    assert!(ret.iter().zip([3.0, 2.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn surrogate_identities() {
    let adv = [0.5, -1.0, 2.0];
    let lp = Tensor::leaf(vec![-1.0, -2.0, -0.3], &[3]).unwrap();
    let loss = ppo_actor_loss(&lp, &[-1.0, -2.0, -0.3], &adv, 0.2).unwrap();
    assert!((loss.item() + (0.5 - 1.0 + 2.0) / 3.0).abs() < 1e-12);
    assert_eq!(clip_fraction(&[1.0, 1.0, 1.0], 0.2), 0.0);

    // A > 0, ρ = 1.5: the clipped branch wins and passes no gradient
    let lp = Tensor::leaf(vec![(1.5 as Float).ln()], &[1]).unwrap();
    let loss = ppo_actor_loss(&lp, &[0.0], &[1.0], 0.2).unwrap();
    assert!((loss.item() + 1.2).abs() < 1e-12);
    loss.backward().unwrap();
    assert_eq!(lp.grad().unwrap()[0], 0.0);
    // A < 0, ρ = 1.5: the unclipped branch is the minimum and keeps its gradient
    let lp = Tensor::leaf(vec![(1.5 as Float).ln()], &[1]).unwrap();
    let loss = ppo_actor_loss(&lp, &[0.0], &[-1.0], 0.2).unwrap();
    assert!((loss.item() - 1.5).abs() < 1e-12);
    loss.backward().unwrap();
    assert!((lp.grad().unwrap()[0] - 1.5).abs() < 1e-12);
    assert_eq!(clip_fraction(&[1.5, 1.0], 0.2), 0.5);
}

#[test]
fn kl_estimator_is_non_negative() {
    assert_eq!(kl_estimate(-1.3, -1.3), 0.0);
    for (a, b) in [(-0.1, -5.0), (-5.0, -0.1), (-2.0, -2.5)] {
        assert!(kl_estimate(a, b) > 0.0);
    }
}

#[test]
fn advantages_are_normalized_over_the_batch() {
    let mut rs = vec![
        Rollout { advantages: vec![1.0, 2.0], ..blank() },
        Rollout { advantages: vec![3.0], ..blank() },
    ];
    normalize_advantages(&mut rs);
    let all: Vec<Float> = rs.iter().flat_map(|r| r.advantages.clone()).collect();
    let mean = all.iter().sum::<Float>() / 3.0;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<Float>() / 3.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
}

fn blank() -> Rollout {
    Rollout {
        prompt: vec![],
        response: vec![],
        old_log_probs: vec![],
        ref_log_probs: vec![],
        score: 0.0,
        values: vec![],
        rewards: vec![],
        advantages: vec![],
        returns: vec![],
        sibling_scores: vec![],
        selected: 0,
    }
}

#[test]
fn rollouts_select_the_top_sibling_and_are_reproducible() {
    let a = actor();
    let c = PpoConfig { k: 4, ..cfg() };
    let seeds = SeedTree::new(3);
    let indexed: Vec<(usize, Vec<u32>)> = prompts().into_iter().enumerate().collect();
    let scorer = TokenCountReward { token: TARGET };
    let (rs, skipped) = rollout_best_of_k(&a, &scorer, &indexed, &c, Some(STOP), &seeds).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(rs.len(), 6);
    for r in &rs {
        assert_eq!(r.sibling_scores.len(), 4);
        assert!(r.sibling_scores.iter().all(|&s| r.score >= s));
        assert_eq!(r.score, r.sibling_scores[r.selected]);
        assert_eq!(scorer.score(&[(r.prompt.clone(), r.response.clone())]).unwrap()[0], r.score);
    }
    let (again, _) = rollout_best_of_k(&a, &scorer, &indexed, &c, Some(STOP), &seeds).unwrap();
    assert_eq!(rs, again);
    // k = 1 keeps the single sample
    let (one, _) = rollout_best_of_k(&a, &scorer, &indexed, &PpoConfig { k: 1, ..c }, Some(STOP), &seeds).unwrap();
    assert!(one.iter().all(|r| r.selected == 0 && r.sibling_scores.len() == 1));
}

#[test]
fn overlong_prompts_are_skipped() {
    let a = actor();
    let indexed = vec![(0, vec![1; 24]), (1, vec![1, 2])];
    let (rs, skipped) =
        rollout_best_of_k(&a, &TokenCountReward { token: TARGET }, &indexed, &cfg(), None, &SeedTree::new(0)).unwrap();
    assert_eq!(rs.len(), 1);
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].index, 0);
}

#[test]
fn identical_actor_and_reference_give_zero_kl_penalty() {
    let a = actor();
    let critic = Critic::from_trunk(&a, 0);
    let indexed: Vec<(usize, Vec<u32>)> = prompts().into_iter().enumerate().collect();
    let (mut rs, _) =
        rollout_best_of_k(&a, &TokenCountReward { token: TARGET }, &indexed, &cfg(), Some(STOP), &SeedTree::new(1)).unwrap();
    prepare_rollouts(&mut rs, &a, &a.clone(), &critic, &cfg(), 0).unwrap();
    for r in &rs {
        let n = r.rewards.len();
        assert!(r.rewards[..n - 1].iter().all(|&x| x == 0.0));
        assert_eq!(r.rewards[n - 1], r.score);
        // batched log-probs agree with the unbatched scorer
        let full = a.token_log_probs(&[r.prompt.as_slice(), &r.response].concat()).unwrap();
        let tail = &full[full.len() - n..];
        assert!(tail.iter().zip(&r.old_log_probs).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}

#[test]
fn training_keeps_reference_and_first_epoch_unclipped() {
    let (trained, reference, log) = run(&cfg());
    assert_eq!(reference, actor());
    assert_ne!(trained, reference);
    assert_eq!(log.iterations.len(), 3);
    for it in &log.iterations {
        assert_eq!(it.clip_fraction, 0.0);
        assert!(it.kl >= -1e-3 && it.kl.is_finite());
        assert!(!it.rejected);
        assert!(it.mean_reward >= it.mean_sample_reward);
    }
    assert_eq!(log.iterations[0].kl, 0.0);
    let (again, _, log2) = run(&cfg());
    assert_eq!(again, trained);
    assert_eq!(log2.iterations, log.iterations);
}

#[test]
fn zero_iterations_leave_the_actor_unchanged() {
    let (trained, _, log) = run(&PpoConfig { iterations: 0, ..cfg() });
    assert_eq!(trained, actor());
    assert!(log.iterations.is_empty());
}

#[test]
fn nan_ratios_reject_the_batch() {
    let mut a = actor();
    let mut critic = Critic::from_trunk(&a, 0);
    let indexed: Vec<(usize, Vec<u32>)> = prompts().into_iter().enumerate().collect();
    let (mut rs, _) =
        rollout_best_of_k(&a, &TokenCountReward { token: TARGET }, &indexed, &cfg(), Some(STOP), &SeedTree::new(1)).unwrap();
    prepare_rollouts(&mut rs, &a, &a.clone(), &critic, &cfg(), 0).unwrap();
    rs[2].old_log_probs[0] = Float::NAN;
    let (a0, c0) = (a.clone(), critic.clone());
    let mut opts = PpoOptimizers::default();
    let stats = ppo_update(&mut a, &mut critic, &mut opts, &rs, &cfg(), 0).unwrap();
    assert!(stats.rejected);
    assert_eq!(a, a0);
    assert_eq!(critic, c0);
    assert_eq!(opts, PpoOptimizers::default());
}

#[test]
fn invalid_configs_rejected() {
    for c in [
        PpoConfig { clip_eps: 0.0, ..cfg() },
        PpoConfig { clip_eps: 1.0, ..cfg() },
        PpoConfig { k: 0, ..cfg() },
        PpoConfig { gamma: 1.5, ..cfg() },
    ] {
        assert!(c.validate().is_err());
    }
}
