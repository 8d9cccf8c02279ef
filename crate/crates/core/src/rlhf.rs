//! Best-of-k rollouts and PPO against a frozen reference policy.
//!
//! One iteration: sample `k` responses per prompt, keep the highest-scoring
//! one, shape per-token rewards with a KL penalty, estimate advantages with
//! GAE from the critic, then run clipped-surrogate epochs over the full batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, GenerateParams, Model};
use crate::reward::{head_forward, init_head, RewardModel, Scorer};
use crate::rng::SeedTree;
use crate::tensor::optim::AdamWState;
use crate::tensor::{Binder, Float, ParamStore, Tensor};
use crate::train::{apply_update, TrainHparams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: Float,
    pub kl_coef: Float,
    pub gamma: Float,
    pub lam: Float,
    /// Responses sampled per prompt.
    pub k: usize,
    pub epochs: usize,
    pub lr: Float,
    pub critic_lr: Float,
    pub grad_clip: Float,
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    pub max_new: usize,
    pub temperature: Float,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.02,
            gamma: 1.0,
            lam: 0.95,
            k: 4,
            epochs: 2,
            lr: 1e-4,
            critic_lr: 1e-4,
            grad_clip: 1.0,
            iterations: 10,
            prompts_per_iteration: 8,
            max_new: 16,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid(format!("clip_eps must be in (0,1), got {}", self.clip_eps)));
        }
        if self.k == 0 || self.epochs == 0 || self.prompts_per_iteration == 0 || self.max_new == 0 {
            return Err(Error::invalid("k, epochs, prompts_per_iteration and max_new must be positive"));
        }
        if !(self.kl_coef >= 0.0) || !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::invalid("need kl_coef >= 0 and gamma, lam in [0,1]"));
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::invalid("learning rates must be positive and temperature non-negative"));
        }
        Ok(())
    }

    fn hparams(&self, lr: Float) -> TrainHparams {
        TrainHparams { min_lr: lr, max_lr: lr, warmup_steps: 0, grad_clip: self.grad_clip, ..TrainHparams::default() }
    }
}

/// One selected response with everything PPO needs. Per-token arrays all have
/// the response length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub old_log_probs: Vec<Float>,
    pub ref_log_probs: Vec<Float>,
    pub score: Float,
    pub values: Vec<Float>,
    pub rewards: Vec<Float>,
    pub advantages: Vec<Float>,
    pub returns: Vec<Float>,
    /// Scores of all k samples; `selected` indexes the kept one.
    pub sibling_scores: Vec<Float>,
    pub selected: usize,
}

impl Rollout {
    pub fn validate(&self) -> Result<()> {
        let n = self.response.len();
        let lens = [
            self.old_log_probs.len(),
            self.ref_log_probs.len(),
            self.values.len(),
            self.rewards.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::invalid(format!("rollout arrays {lens:?} disagree with response length {n}")));
        }
        if !self.score.is_finite() {
            return Err(Error::invalid("rollout score is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub index: usize,
    pub reason: String,
}

/// Lowest index among the maximal scores.
pub fn select_best(scores: &[Float]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Samples `cfg.k` responses per prompt and keeps the best by `scorer`.
/// Only prompt, response, score and sibling fields are filled.
pub fn rollout_best_of_k(
    actor: &Model,
    scorer: &dyn Scorer,
    prompts: &[(usize, Vec<u32>)],
    cfg: &PpoConfig,
    stop: Option<u32>,
    seeds: &SeedTree,
) -> Result<(Vec<Rollout>, Vec<SkippedPrompt>)> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (index, prompt) in prompts {
        let mut samples = Vec::with_capacity(cfg.k);
        let mut failure = None;
        for j in 0..cfg.k {
            let params = GenerateParams {
                max_new: cfg.max_new,
                temperature: cfg.temperature,
                top_k: cfg.top_k,
                seed: seeds.split_index(*index as u64).split_index(j as u64).seed(),
                stop,
            };
            match actor.generate(prompt, &params) {
                Ok(r) if !r.is_empty() => samples.push((prompt.clone(), r)),
                Ok(_) => failure = Some("prompt fills the context window".to_string()),
                Err(e) => failure = Some(e.to_string()),
            }
            if failure.is_some() {
                break;
            }
        }
        if let Some(reason) = failure {
            skipped.push(SkippedPrompt { index: *index, reason });
            continue;
        }
        let scores = scorer.score(&samples)?;
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            skipped.push(SkippedPrompt { index: *index, reason: format!("non-finite score {bad}") });
            continue;
        }
        let best = select_best(&scores).ok_or(Error::Empty("samples"))?;
        let (prompt, response) = samples.swap_remove(best);
        out.push(Rollout {
            prompt,
            response,
            old_log_probs: Vec::new(),
            ref_log_probs: Vec::new(),
            score: scores[best],
            values: Vec::new(),
            rewards: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            sibling_scores: scores,
            selected: best,
        });
    }
    Ok((out, skipped))
}

/// Left-pads `prompt ++ response` rows and lists, in rollout order, the flat
/// row index that predicts each response token.
fn response_rows(rollouts: &[Rollout], pad: u32) -> Result<(Batch, Vec<usize>, Vec<usize>)> {
    let seqs: Vec<Vec<u32>> = rollouts.iter().map(|r| [r.prompt.as_slice(), &r.response].concat()).collect();
    let batch = Batch::left_padded(&seqs, pad)?;
    let t = batch.seq_len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, r) in rollouts.iter().enumerate() {
        let start = b * t + (t - r.prompt.len() - r.response.len()) + r.prompt.len() - 1;
        rows.extend((0..r.response.len()).map(|i| start + i));
        targets.extend(r.response.iter().map(|&id| id as usize));
    }
    Ok((batch, rows, targets))
}

/// Response-token log-probs `[N]` over the whole batch, flattened in rollout order.
pub fn response_log_probs(model: &Model, bind: &Binder, rollouts: &[Rollout], pad: u32) -> Result<Tensor> {
    let (batch, rows, targets) = response_rows(rollouts, pad)?;
    model.forward(bind, &batch)?.gather_rows(&rows)?.log_softmax()?.pick(&targets)
}

fn split_flat(rollouts: &[Rollout], flat: &[Float]) -> Vec<Vec<Float>> {
    let mut at = 0;
    rollouts
        .iter()
        .map(|r| {
            let part = flat[at..at + r.response.len()].to_vec();
            at += r.response.len();
            part
        })
        .collect()
}

/// `-β(lp_actor - lp_ref)` per token, with the score added at the last token.
pub fn compute_rewards(actor_lp: &[Float], ref_lp: &[Float], score: Float, beta: Float) -> Vec<Float> {
    let mut r: Vec<Float> = actor_lp.iter().zip(ref_lp).map(|(a, b)| -beta * (a - b)).collect();
    if let Some(last) = r.last_mut() {
        *last += score;
    }
    r
}

/// GAE with a zero bootstrap after the final token. Returns (advantages, returns).
pub fn gae(rewards: &[Float], values: &[Float], gamma: Float, lam: Float) -> (Vec<Float>, Vec<Float>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lam * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit variance over every response token in the batch.
pub fn normalize_advantages(rollouts: &mut [Rollout]) {
    let all: Vec<Float> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as Float;
    let mean = all.iter().sum::<Float>() / n;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<Float>() / n).sqrt();
    for r in rollouts {
        for a in &mut r.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
}

/// Non-negative per-token KL(actor‖ref) estimate from actor samples.
pub fn kl_estimate(actor_lp: Float, ref_lp: Float) -> Float {
    let d = ref_lp - actor_lp;
    d.exp_m1() - d
}

/// Per-token value function: a trunk plus a scalar head read at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub trunk: Model,
    pub head: ParamStore,
}

impl Critic {
    /// Trunk and head both start from the reward model; the head is applied
    /// per token instead of only at the last one.
    pub fn from_rm(rm: &RewardModel) -> Self {
        Self { trunk: rm.trunk.clone(), head: rm.head.clone() }
    }

    /// A fresh head on a copy of `trunk`, for reward functions that have no model.
    pub fn from_trunk(trunk: &Model, seed: u64) -> Self {
        let h = trunk.config().hidden;
        let head = init_head(h, (h / 4).max(1), &SeedTree::new(seed).split("value-head"));
        Self { trunk: trunk.clone(), head }
    }

    pub fn values_graph(&self, trunk: &Binder, head: &Binder, rollouts: &[Rollout], pad: u32) -> Result<Tensor> {
        let (batch, rows, _) = response_rows(rollouts, pad)?;
        head_forward(head, &self.trunk.hidden(trunk, &batch)?.gather_rows(&rows)?)
    }

    pub fn values(&self, rollouts: &[Rollout], pad: u32) -> Result<Vec<Float>> {
        let g = self.values_graph(&Binder::frozen(self.trunk.params()), &Binder::frozen(&self.head), rollouts, pad)?;
        Ok(g.to_vec())
    }
}

/// Fills log-probs, values, rewards, advantages (normalized) and returns.
pub fn prepare_rollouts(
    rollouts: &mut [Rollout],
    actor: &Model,
    reference: &Model,
    critic: &Critic,
    cfg: &PpoConfig,
    pad: u32,
) -> Result<()> {
    if rollouts.is_empty() {
        return Ok(());
    }
    // the same batched path as the first update epoch, so ρ is exactly 1 there
    let old = response_log_probs(actor, &Binder::frozen(actor.params()), rollouts, pad)?.to_vec();
    let reference_lp = response_log_probs(reference, &Binder::frozen(reference.params()), rollouts, pad)?.to_vec();
    let values = critic.values(rollouts, pad)?;
    let (old, reference_lp, values) =
        (split_flat(rollouts, &old), split_flat(rollouts, &reference_lp), split_flat(rollouts, &values));
    for (((r, o), rf), v) in rollouts.iter_mut().zip(old).zip(reference_lp).zip(values) {
        r.rewards = compute_rewards(&o, &rf, r.score, cfg.kl_coef);
        let (adv, ret) = gae(&r.rewards, &v, cfg.gamma, cfg.lam);
        r.old_log_probs = o;
        r.ref_log_probs = rf;
        r.values = v;
        r.advantages = adv;
        r.returns = ret;
    }
    normalize_advantages(rollouts);
    rollouts.iter().try_for_each(Rollout::validate)
}

/// Clipped surrogate `-mean(min(ρA, clip(ρ, 1-ε, 1+ε)A))` with `ρ = exp(new - old)`.
pub fn ppo_actor_loss(new_lp: &Tensor, old_lp: &[Float], advantages: &[Float], eps: Float) -> Result<Tensor> {
    let n = old_lp.len();
    let ratio = new_lp.sub(&Tensor::new(old_lp.to_vec(), &[n])?)?.exp()?;
    let adv = Tensor::new(advantages.to_vec(), &[n])?;
    let unclipped = ratio.mul(&adv)?;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps)?.mul(&adv)?;
    unclipped.minimum(&clipped)?.mean()?.neg()
}

/// Fraction of tokens with `|ρ - 1| > ε`.
pub fn clip_fraction(ratios: &[Float], eps: Float) -> Float {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().filter(|r| (**r - 1.0).abs() > eps).count() as Float / ratios.len() as Float
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoOptimizers {
    pub actor: AdamWState,
    pub critic_trunk: AdamWState,
    pub critic_head: AdamWState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss_actor: Float,
    pub loss_critic: Float,
    /// Clip fraction measured in each epoch, before that epoch's step.
    pub clip_fraction: Vec<Float>,
    /// The whole batch was discarded because of a non-finite ratio, loss or gradient.
    pub rejected: bool,
}

/// `cfg.epochs` full-batch steps for actor and critic. On rejection every
/// model and optimizer is restored to its state on entry.
pub fn ppo_update(
    actor: &mut Model,
    critic: &mut Critic,
    opts: &mut PpoOptimizers,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    pad: u32,
) -> Result<UpdateStats> {
    if rollouts.is_empty() {
        return Ok(UpdateStats::default());
    }
    let snapshot = (actor.clone(), critic.clone(), opts.clone());
    let old: Vec<Float> = rollouts.iter().flat_map(|r| r.old_log_probs.iter().copied()).collect();
    let adv: Vec<Float> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    let ret: Vec<Float> = rollouts.iter().flat_map(|r| r.returns.iter().copied()).collect();
    let n = old.len();
    let mut stats = UpdateStats::default();
    let reject = |actor: &mut Model, critic: &mut Critic, opts: &mut PpoOptimizers, mut stats: UpdateStats| {
        (*actor, *critic, *opts) = snapshot.clone();
        stats.rejected = true;
        stats
    };
    for _ in 0..cfg.epochs {
        let bind = Binder::new(actor.params(), true);
        let new_lp = response_log_probs(actor, &bind, rollouts, pad)?;
        let ratios: Vec<Float> = new_lp.data().iter().zip(&old).map(|(a, b)| (a - b).exp()).collect();
        if ratios.iter().any(|r| r.is_nan()) {
            drop(bind);
            return Ok(reject(actor, critic, opts, stats));
        }
        stats.clip_fraction.push(clip_fraction(&ratios, cfg.clip_eps));
        let loss = ppo_actor_loss(&new_lp, &old, &adv, cfg.clip_eps)?;
        loss.backward()?;
        let mut ga = bind.gradients();
        drop(bind);

        let tb = Binder::new(critic.trunk.params(), true);
        let hb = Binder::new(&critic.head, true);
        let v = critic.values_graph(&tb, &hb, rollouts, pad)?;
        let closs = v.sub(&Tensor::new(ret.clone(), &[n])?)?.square()?.mean()?;
        closs.backward()?;
        let (mut gt, mut gh) = (tb.gradients(), hb.gradients());
        drop((tb, hb));

        let (la, lc) = (loss.item(), closs.item());
        if !(la.is_finite() && lc.is_finite() && ga.is_finite() && gt.is_finite() && gh.is_finite()) {
            return Ok(reject(actor, critic, opts, stats));
        }
        apply_update(actor.params_mut(), &mut opts.actor, &mut ga, la, cfg.lr, &cfg.hparams(cfg.lr))?;
        let chp = cfg.hparams(cfg.critic_lr);
        apply_update(critic.trunk.params_mut(), &mut opts.critic_trunk, &mut gt, lc, cfg.critic_lr, &chp)?;
        apply_update(&mut critic.head, &mut opts.critic_head, &mut gh, lc, cfg.critic_lr, &chp)?;
        stats.loss_actor = la;
        stats.loss_critic = lc;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean score of the selected rollouts.
    pub mean_reward: Float,
    /// Mean score over all k samples, selected or not.
    pub mean_sample_reward: Float,
    pub kl: Float,
    /// First-epoch clip fraction.
    pub clip_fraction: Float,
    pub loss_actor: Float,
    pub loss_critic: Float,
    pub rollouts: usize,
    pub skipped: Vec<SkippedPrompt>,
    pub rejected: bool,
    /// Best-of-k outcome per rollout, in rollout order.
    pub selections: Vec<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub sibling_scores: Vec<Float>,
    pub selected: usize,
    pub score: Float,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RlhfLog {
    pub iterations: Vec<IterationLog>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Token ids the loop needs: `pad` fills left padding, `stop` ends sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyTokens {
    pub pad: u32,
    pub stop: Option<u32>,
}

/// The reference model is only ever borrowed immutably.
/// `on_iteration(i, actor, log)` runs after every iteration (for checkpoints).
#[allow(clippy::too_many_arguments)]
pub fn rlhf_train(
    actor: &mut Model,
    reference: &Model,
    critic: &mut Critic,
    opts: &mut PpoOptimizers,
    scorer: &dyn Scorer,
    prompts: &[Vec<u32>],
    cfg: &PpoConfig,
    tokens: PolicyTokens,
    on_iteration: &mut dyn FnMut(usize, &Model, &IterationLog) -> Result<()>,
) -> Result<RlhfLog> {
    cfg.validate()?;
    if reference.config() != actor.config() {
        return Err(Error::invalid("reference and actor configurations differ"));
    }
    if critic.trunk.config().vocab_size != actor.config().vocab_size {
        return Err(Error::invalid("critic and actor vocabularies differ"));
    }
    if cfg.iterations > 0 && prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    let start = Instant::now();
    let seeds = SeedTree::new(cfg.seed).split("rlhf");
    let mut log = RlhfLog::default();
    for it in 0..cfg.iterations {
        let take = cfg.prompts_per_iteration.min(prompts.len());
        let batch: Vec<(usize, Vec<u32>)> = (0..take)
            .map(|j| {
                let idx = (it * cfg.prompts_per_iteration + j) % prompts.len();
                (idx, prompts[idx].clone())
            })
            .collect();
        let it_seeds = seeds.split("rollout").split_index(it as u64);
        let (mut rollouts, skipped) = rollout_best_of_k(actor, scorer, &batch, cfg, tokens.stop, &it_seeds)?;
        prepare_rollouts(&mut rollouts, actor, reference, critic, cfg, tokens.pad)?;
        let n_tok = rollouts.iter().map(|r| r.response.len()).sum::<usize>().max(1) as Float;
        let kl = rollouts
            .iter()
            .flat_map(|r| r.old_log_probs.iter().zip(&r.ref_log_probs))
            .map(|(&a, &b)| kl_estimate(a, b))
            .sum::<Float>()
            / n_tok;
        let mean = |xs: &mut dyn Iterator<Item = Float>| {
            let v: Vec<Float> = xs.collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<Float>() / v.len() as Float
            }
        };
        let mean_reward = mean(&mut rollouts.iter().map(|r| r.score));
        let mean_sample_reward = mean(&mut rollouts.iter().flat_map(|r| r.sibling_scores.iter().copied()));
        let stats = ppo_update(actor, critic, opts, &rollouts, cfg, tokens.pad)?;
        let entry = IterationLog {
            iteration: it + 1,
            mean_reward,
            mean_sample_reward,
            kl,
            clip_fraction: stats.clip_fraction.first().copied().unwrap_or(0.0),
            loss_actor: stats.loss_actor,
            loss_critic: stats.loss_critic,
            rollouts: rollouts.len(),
            skipped,
            rejected: stats.rejected,
            selections: rollouts
                .iter()
                .map(|r| Selection { sibling_scores: r.sibling_scores.clone(), selected: r.selected, score: r.score })
                .collect(),
        };
        on_iteration(it + 1, actor, &entry)?;
        log.iterations.push(entry);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests;
