//! Mixture-scheduled block packing and the next-token training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datapipe::Category;
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::rng::{SeedTree, Stream};
use crate::tensor::optim::AdamWState;
use crate::tensor::{Binder, Float, Tensor};
use crate::tokenizer::TokenizerModel;
use crate::train::{apply_update, StepLog, TrainHparams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Zero makes the stage a no-op.
    pub token_budget: u64,
    pub mixture: BTreeMap<Category, f64>,
    pub seed: u64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mixture.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        if !self.mixture.values().any(|&w| w > 0.0) {
            return Err(Error::invalid("mixture needs at least one positive weight"));
        }
        let sum: f64 = self.mixture.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("mixture weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockShape {
    pub batch: usize,
    pub seq_len: usize,
}

impl BlockShape {
    pub fn tokens_per_batch(&self) -> u64 {
        (self.batch * self.seq_len) as u64
    }

    /// Batches needed to reach `budget`: the stream stops at the first batch
    /// boundary at or past it.
    pub fn batches_for(&self, budget: u64) -> u64 {
        budget.div_ceil(self.tokens_per_batch())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    pub category: Category,
    pub ids: Vec<u32>,
}

/// Every document followed by EOS, concatenated.
pub fn encode_corpus<S: AsRef<str>>(tok: &TokenizerModel, docs: &[S]) -> Vec<u32> {
    let eos = tok.eos();
    docs.iter().flat_map(|d| tok.encode(d.as_ref()).into_iter().chain(std::iter::once(eos))).collect()
}

/// Cycles through one category's token stream in fixed-length blocks.
#[derive(Debug, Clone)]
struct Packer {
    tokens: Vec<u32>,
    pos: usize,
}

impl Packer {
    fn next_block(&mut self, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let take = (len - out.len()).min(self.tokens.len() - self.pos);
            out.extend_from_slice(&self.tokens[self.pos..self.pos + take]);
            self.pos = (self.pos + take) % self.tokens.len();
        }
        out
    }
}

/// Batches of blocks whose categories are drawn from the stage mixture.
pub struct MixtureStream {
    packers: BTreeMap<Category, Packer>,
    cats: Vec<Category>,
    weights: Vec<f64>,
    rng: Stream,
    shape: BlockShape,
    budget: u64,
    consumed: u64,
}

pub fn schedule_mixture(
    corpora: &BTreeMap<Category, Vec<u32>>,
    spec: &StageSpec,
    shape: BlockShape,
) -> Result<MixtureStream> {
    spec.validate()?;
    if shape.batch == 0 || shape.seq_len < 2 {
        return Err(Error::invalid("blocks need batch >= 1 and seq_len >= 2"));
    }
    let mut packers = BTreeMap::new();
    let (mut cats, mut weights) = (Vec::new(), Vec::new());
    for (&cat, &w) in &spec.mixture {
        if w == 0.0 {
            continue;
        }
        let tokens = corpora.get(&cat).filter(|t| !t.is_empty()).ok_or_else(|| {
            Error::invalid(format!("category {cat} has weight {w} but no data"))
        })?;
        packers.insert(cat, Packer { tokens: tokens.clone(), pos: 0 });
        cats.push(cat);
        weights.push(w);
    }
    Ok(MixtureStream {
        packers,
        cats,
        weights,
        rng: SeedTree::new(spec.seed).split("mixture").rng(),
        shape,
        budget: spec.token_budget,
        consumed: 0,
    })
}

impl MixtureStream {
    pub fn total_batches(&self) -> u64 {
        self.shape.batches_for(self.budget)
    }
}

impl Iterator for MixtureStream {
    type Item = Vec<TokenBlock>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.consumed >= self.budget {
            return None;
        }
        let blocks = (0..self.shape.batch)
            .map(|_| {
                let cat = self.cats[self.rng.categorical(&self.weights)];
                let ids = self.packers.get_mut(&cat).expect("packer per category").next_block(self.shape.seq_len);
                TokenBlock { category: cat, ids }
            })
            .collect();
        self.consumed += self.shape.tokens_per_batch();
        Some(blocks)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunLog {
    pub steps: Vec<StepLog>,
    pub tokens_per_category: BTreeMap<Category, u64>,
    pub tokens_consumed: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainRunLog {
    pub fn final_loss(&self) -> Option<Float> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Mean next-token NLL over every block position that has a successor.
pub fn lm_loss(model: &Model, bind: &Binder, blocks: &[Vec<u32>]) -> Result<Tensor> {
    let batch = Batch::new(blocks.to_vec())?;
    let t = batch.seq_len();
    let logits = model.forward(bind, &batch)?;
    let mut targets = Vec::with_capacity(blocks.len() * t);
    let mut weight = Vec::with_capacity(blocks.len() * t);
    for b in blocks {
        for i in 0..t {
            targets.push(if i + 1 < t { b[i + 1] as usize } else { 0 });
            weight.push(if i + 1 < t { 1.0 } else { 0.0 });
        }
    }
    let n = (blocks.len() * (t - 1)) as Float;
    let w = Tensor::new(weight, &[blocks.len() * t])?;
    logits.cross_entropy(&targets)?.mul(&w)?.sum()?.scale(1.0 / n)
}

/// Inference-only mean NLL over `blocks`.
pub fn evaluate_lm(model: &Model, blocks: &[Vec<u32>]) -> Result<Float> {
    Ok(lm_loss(model, &Binder::frozen(model.params()), blocks)?.item())
}

/// Trains on every batch of `stream`. On a non-finite loss or gradient this
/// returns [`Error::TrainingAborted`] with `model` still holding the weights
/// from the last completed step.
pub fn train_lm(
    model: &mut Model,
    opt: &mut AdamWState,
    stream: impl Iterator<Item = Vec<TokenBlock>>,
    total_steps: u64,
    hp: &TrainHparams,
) -> Result<TrainRunLog> {
    hp.validate()?;
    let start = Instant::now();
    let schedule = hp.schedule(total_steps);
    let mut log = TrainRunLog::default();
    for (i, blocks) in stream.enumerate() {
        let ids: Vec<Vec<u32>> = blocks.iter().map(|b| b.ids.clone()).collect();
        let bind = Binder::new(model.params(), true);
        let loss = lm_loss(model, &bind, &ids)?;
        loss.backward()?;
        let mut grads = bind.gradients();
        let lr = schedule.at(i as u64);
        let loss_v = loss.item();
        drop(bind);
        let grad_norm = apply_update(model.params_mut(), opt, &mut grads, loss_v, lr, hp)?;
        let tokens: u64 = blocks.iter().map(|b| b.ids.len() as u64).sum();
        for b in &blocks {
            *log.tokens_per_category.entry(b.category).or_insert(0) += b.ids.len() as u64;
        }
        log.tokens_consumed += tokens;
        log.steps.push(StepLog { step: opt.step, loss: loss_v, lr, grad_norm, tokens });
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// One stage: schedule its mixture and train through its budget.
pub fn train_stage(
    model: &mut Model,
    opt: &mut AdamWState,
    corpora: &BTreeMap<Category, Vec<u32>>,
    spec: &StageSpec,
    shape: BlockShape,
    hp: &TrainHparams,
) -> Result<TrainRunLog> {
    let stream = schedule_mixture(corpora, spec, shape)?;
    let total = stream.total_batches();
    train_lm(model, opt, stream, total, hp)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoStageLog {
    pub stage1: TrainRunLog,
    pub stage2: TrainRunLog,
}

/// Stage 2 continues from exactly the stage-1 weights and optimizer state.
/// `on_stage_end(stage, model, opt)` runs after each stage (for checkpoints).
#[allow(clippy::too_many_arguments)]
pub fn run_two_stage(
    model: &mut Model,
    opt: &mut AdamWState,
    corpora: &BTreeMap<Category, Vec<u32>>,
    stage1: &StageSpec,
    stage2: &StageSpec,
    shape: BlockShape,
    hp: &TrainHparams,
    on_stage_end: &mut dyn FnMut(usize, &Model, &AdamWState) -> Result<()>,
) -> Result<TwoStageLog> {
    let s1 = train_stage(model, opt, corpora, stage1, shape, hp)?;
    on_stage_end(1, model, opt)?;
    let s2 = train_stage(model, opt, corpora, stage2, shape, hp)?;
    on_stage_end(2, model, opt)?;
    Ok(TwoStageLog { stage1: s1, stage2: s2 })
}

#[cfg(test)]
mod tests;
