//! Pairwise reward model: LM trunk plus a two-layer scalar head read at the
//! last position of left-padded `BOS prompt SEP response EOS` sequences.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, Model};
use crate::rng::SeedTree;
use crate::sft::format_prompt;
use crate::tensor::optim::AdamWState;
use crate::tensor::{log_sigmoid, Binder, Float, Param, ParamStore, Tensor};
use crate::tokenizer::TokenizerModel;
use crate::train::{apply_update, StepLog, TrainHparams};

const HEAD_STD: Float = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::invalid("preference pair fields must be non-empty"));
        }
        if self.chosen == self.rejected {
            return Err(Error::invalid("chosen and rejected responses are identical"));
        }
        Ok(())
    }
}

/// `-log σ(r_c - r_r)`, computed without overflow for any finite margin.
pub fn ranking_loss(r_chosen: Float, r_rejected: Float) -> Float {
    -log_sigmoid(r_chosen - r_rejected)
}

/// Batched graph form of [`ranking_loss`], averaged.
pub fn ranking_loss_tensor(chosen: &Tensor, rejected: &Tensor) -> Result<Tensor> {
    chosen.sub(rejected)?.log_sigmoid()?.mean()?.neg()
}

/// Pairs whose prompt hashes to 0 mod `modulus` are held out.
pub fn is_held_out(prompt: &str, modulus: u64) -> bool {
    let h = crate::io::sha256_hex(prompt.as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest") % modulus.max(1) == 0
}

pub fn split_pairs(pairs: &[PreferencePair], modulus: u64) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    pairs.iter().cloned().partition(|p| !is_held_out(&p.prompt, modulus))
}

/// Anything that assigns a scalar to (prompt ids, response ids).
pub trait Scorer {
    fn score(&self, items: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Float>>;
}

/// Shared scalar head: `[N, H] → GELU(H → M) → 1`.
pub(crate) fn head_forward(bind: &Binder, h: &Tensor) -> Result<Tensor> {
    let z = h.matmul(&bind.get("w1")?)?.add(&bind.get("b1")?)?.gelu()?;
    let n = h.shape()[0];
    z.matmul(&bind.get("w2")?)?.add(&bind.get("b2")?)?.reshape(&[n])
}

pub(crate) fn init_head(hidden: usize, bottleneck: usize, seeds: &SeedTree) -> ParamStore {
    let mut head = ParamStore::new();
    head.insert("w1", Param::normal(&[hidden, bottleneck], HEAD_STD, &mut seeds.split("w1").rng()));
    head.insert("b1", Param::zeros(&[bottleneck]));
    head.insert("w2", Param::normal(&[bottleneck, 1], HEAD_STD, &mut seeds.split("w2").rng()));
    head.insert("b2", Param::zeros(&[1]));
    head
}

/// Hidden state at the final position of each left-padded row, `[B, H]`.
fn last_hidden(trunk: &Model, bind: &Binder, batch: &Batch) -> Result<Tensor> {
    let t = batch.seq_len();
    let rows: Vec<usize> = (0..batch.len()).map(|b| b * t + t - 1).collect();
    trunk.hidden(bind, batch)?.gather_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub trunk: Model,
    pub head: ParamStore,
    pub pad: u32,
    pub eos: u32,
}

impl RewardModel {
    /// Copies the LM trunk and draws a fresh head from `seed`.
    pub fn from_lm(lm: &Model, tok: &TokenizerModel, seed: u64, bottleneck: Option<usize>) -> Result<Self> {
        if tok.vocab_size() != lm.config().vocab_size {
            return Err(Error::invalid(format!(
                "tokenizer has {} tokens, checkpoint vocabulary is {}",
                tok.vocab_size(),
                lm.config().vocab_size
            )));
        }
        let h = lm.config().hidden;
        let m = bottleneck.unwrap_or((h / 4).max(1));
        let head = init_head(h, m, &SeedTree::new(seed).split("rm-head"));
        Ok(Self { trunk: lm.clone(), head, pad: tok.pad(), eos: tok.eos() })
    }

    /// `prompt ++ response`, with EOS appended unless already final.
    pub fn join(&self, prompt: &[u32], response: &[u32]) -> Vec<u32> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(response);
        if ids.last() != Some(&self.eos) {
            ids.push(self.eos);
        }
        ids
    }

    pub fn encode_pair(&self, tok: &TokenizerModel, prompt: &str, response: &str) -> Result<Vec<u32>> {
        Ok(self.join(&format_prompt(tok, prompt)?, &tok.encode(response)))
    }

    fn check_lengths(&self, seqs: &[Vec<u32>]) -> Result<()> {
        let max_len = self.trunk.config().max_len;
        let over: Vec<String> =
            seqs.iter().enumerate().filter(|(_, s)| s.len() > max_len).map(|(i, s)| format!("#{i}: {}", s.len())).collect();
        if over.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("sequences exceed max_len {max_len}: {}", over.join(", "))))
        }
    }

    /// Scores as a graph node `[B]` under the given bindings.
    pub fn score_graph(&self, trunk: &Binder, head: &Binder, seqs: &[Vec<u32>]) -> Result<Tensor> {
        self.check_lengths(seqs)?;
        let batch = Batch::left_padded(seqs, self.pad)?;
        head_forward(head, &last_hidden(&self.trunk, trunk, &batch)?)
    }

    pub fn score_sequences(&self, seqs: &[Vec<u32>]) -> Result<Vec<Float>> {
        let s = self.score_graph(&Binder::frozen(self.trunk.params()), &Binder::frozen(&self.head), seqs)?;
        Ok(s.to_vec())
    }

    pub fn score_text(&self, tok: &TokenizerModel, prompt: &str, response: &str) -> Result<Float> {
        Ok(self.score_sequences(&[self.encode_pair(tok, prompt, response)?])?[0])
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::from_model("reward", &self.trunk, step);
        ck.extra = self.head.clone();
        ck.meta.insert("pad".into(), self.pad.into());
        ck.meta.insert("eos".into(), self.eos.into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "reward" {
            return Err(Error::Checkpoint(format!("expected a reward checkpoint, found {:?}", ck.kind)));
        }
        let id = |k: &str| {
            ck.meta.get(k).and_then(|v| v.as_u64()).map(|v| v as u32).ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        for name in ["w1", "b1", "w2", "b2"] {
            ck.extra.get(name)?;
        }
        Ok(Self { trunk: ck.model()?, head: ck.extra.clone(), pad: id("pad")?, eos: id("eos")? })
    }

    pub fn accuracy(&self, tok: &TokenizerModel, pairs: &[PreferencePair], batch_size: usize) -> Result<Float> {
        if pairs.is_empty() {
            return Err(Error::Empty("accuracy pairs"));
        }
        let mut correct = 0usize;
        for chunk in pairs.chunks(batch_size.max(1)) {
            let (c, r) = self.encode_chunk(tok, chunk)?;
            let sc = self.score_sequences(&c)?;
            let sr = self.score_sequences(&r)?;
            correct += sc.iter().zip(&sr).filter(|(a, b)| a > b).count();
        }
        Ok(correct as Float / pairs.len() as Float)
    }

    fn encode_chunk(&self, tok: &TokenizerModel, chunk: &[PreferencePair]) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        let mut c = Vec::with_capacity(chunk.len());
        let mut r = Vec::with_capacity(chunk.len());
        for p in chunk {
            p.validate()?;
            c.push(self.encode_pair(tok, &p.prompt, &p.chosen)?);
            r.push(self.encode_pair(tok, &p.prompt, &p.rejected)?);
        }
        Ok((c, r))
    }
}

impl Scorer for RewardModel {
    fn score(&self, items: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Float>> {
        let seqs: Vec<Vec<u32>> = items.iter().map(|(p, r)| self.join(p, r)).collect();
        self.score_sequences(&seqs)
    }
}

/// Counts occurrences of one token in the response; a stand-in reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenCountReward {
    pub token: u32,
}

impl Scorer for TokenCountReward {
    fn score(&self, items: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Float>> {
        Ok(items.iter().map(|(_, r)| r.iter().filter(|&&t| t == self.token).count() as Float).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmHparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub held_out_modulus: u64,
    pub train: TrainHparams,
}

impl Default for RmHparams {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            seed: 0,
            held_out_modulus: 5,
            train: TrainHparams { min_lr: 1e-4, max_lr: 1e-3, ..TrainHparams::default() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmLog {
    pub steps: Vec<StepLog>,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub initial_accuracy: Float,
    /// Held-out accuracy after each epoch.
    pub held_out_accuracy: Vec<Float>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Trunk and head are trained jointly with separate AdamW moment sets.
pub fn train_rm(
    rm: &mut RewardModel,
    opts: &mut [AdamWState; 2],
    tok: &TokenizerModel,
    pairs: &[PreferencePair],
    hp: &RmHparams,
) -> Result<RmLog> {
    hp.train.validate()?;
    let (train, held) = split_pairs(pairs, hp.held_out_modulus);
    if train.is_empty() || held.is_empty() {
        return Err(Error::invalid(format!("split left {} train and {} held-out pairs", train.len(), held.len())));
    }
    let start = Instant::now();
    let bs = hp.batch_size.max(1);
    let per_epoch = train.len().div_ceil(bs) as u64;
    let schedule = hp.train.schedule(per_epoch * hp.epochs as u64);
    let seeds = SeedTree::new(hp.seed).split("rm");
    let mut log = RmLog {
        train_pairs: train.len(),
        held_out_pairs: held.len(),
        initial_accuracy: rm.accuracy(tok, &held, bs)?,
        ..Default::default()
    };
    let mut local = 0;
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        seeds.split_index(epoch as u64).rng().shuffle(&mut order);
        for chunk in order.chunks(bs) {
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (c, r) = rm.encode_chunk(tok, &batch)?;
            let n = c.len();
            let both: Vec<Vec<u32>> = c.into_iter().chain(r).collect();
            let tb = Binder::new(rm.trunk.params(), true);
            let hb = Binder::new(&rm.head, true);
            let scores = rm.score_graph(&tb, &hb, &both)?;
            let loss = ranking_loss_tensor(&scores.slice(0, 0, n)?, &scores.slice(0, n, n)?)?;
            loss.backward()?;
            let (mut gt, mut gh) = (tb.gradients(), hb.gradients());
            drop((tb, hb));
            let lr = schedule.at(local);
            local += 1;
            let lv = loss.item();
            // both groups are checked before either is touched
            if !gt.is_finite() || !gh.is_finite() || !lv.is_finite() {
                return Err(Error::TrainingAborted { step: opts[0].step + 1, reason: "non-finite loss or gradient".into() });
            }
            let [ot, oh] = opts;
            let norm_t = apply_update(rm.trunk.params_mut(), ot, &mut gt, lv, lr, &hp.train)?;
            let norm_h = apply_update(&mut rm.head, oh, &mut gh, lv, lr, &hp.train)?;
            log.steps.push(StepLog { step: ot.step, loss: lv, lr, grad_norm: norm_t.hypot(norm_h), tokens: both.iter().map(|s| s.len() as u64).sum() });
        }
        log.held_out_accuracy.push(rm.accuracy(tok, &held, bs)?);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests;
