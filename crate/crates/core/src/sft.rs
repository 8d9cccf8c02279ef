//! Instruction finetuning: `BOS instruction SEP output EOS`, loss only on
//! output tokens and EOS, scaled per sample by its weight class.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::rng::SeedTree;
use crate::tensor::optim::AdamWState;
use crate::tensor::{Binder, Float, Tensor};
use crate::tokenizer::{TokenizerModel, SEP};
use crate::train::{apply_update, StepLog, TrainHparams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightClass {
    Expert,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSample {
    pub instruction: String,
    pub output: String,
    pub weight_class: WeightClass,
    #[serde(default)]
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeights {
    pub expert: Float,
    pub generic: Float,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { expert: 1.0, generic: 0.1 }
    }
}

impl ClassWeights {
    pub fn alpha(&self, c: WeightClass) -> Float {
        match c {
            WeightClass::Expert => self.expert,
            WeightClass::Generic => self.generic,
        }
    }
}

/// Right-padded token rows with per-position target flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub ids: Vec<Vec<u32>>,
    /// `mask[b][t] == 1` marks `ids[b][t]` as a target predicted from position `t - 1`.
    pub mask: Vec<Vec<u8>>,
    pub alpha: Vec<Float>,
    /// Index of the first output token (one past the separator).
    pub output_start: Vec<usize>,
    /// Unpadded length.
    pub lengths: Vec<usize>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.seq_len();
        let b = self.len();
        if b == 0 || t < 2 {
            return Err(Error::Empty("sft batch"));
        }
        let consistent = self.ids.iter().all(|r| r.len() == t)
            && self.mask.len() == b
            && self.mask.iter().all(|r| r.len() == t && r[0] == 0 && r.iter().all(|&m| m <= 1))
            && self.alpha.len() == b;
        if !consistent {
            return Err(Error::invalid("masked batch rows disagree in shape or mask the first position"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub index: usize,
    pub tokens: usize,
    pub max_len: usize,
}

/// `BOS instruction SEP`: the prefix a model continues at inference time.
pub fn format_prompt(tok: &TokenizerModel, instruction: &str) -> Result<Vec<u32>> {
    let sep = tok.special(SEP).ok_or_else(|| Error::Tokenizer("SFT template needs a `sep` special token".into()))?;
    let mut ids = vec![tok.bos()];
    ids.extend(tok.encode(instruction));
    ids.push(sep);
    Ok(ids)
}

/// Formats and masks `samples`; any sample longer than `max_len` is skipped
/// and reported. An empty output yields an all-zero mask and no EOS.
pub fn build_sft_batch(
    samples: &[InstructionSample],
    tok: &TokenizerModel,
    max_len: usize,
    weights: &ClassWeights,
) -> Result<(Option<MaskedBatch>, Vec<SkippedSample>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let mut ids = format_prompt(tok, &s.instruction)?;
        let start = ids.len();
        if !s.output.is_empty() {
            ids.extend(tok.encode(&s.output));
            ids.push(tok.eos());
        }
        if ids.len() > max_len {
            skipped.push(SkippedSample { index, tokens: ids.len(), max_len });
            continue;
        }
        rows.push((ids, start, weights.alpha(s.weight_class)));
    }
    if rows.is_empty() {
        return Ok((None, skipped));
    }
    let t = rows.iter().map(|r| r.0.len()).max().expect("non-empty").max(2);
    let pad = tok.pad();
    let mut batch =
        MaskedBatch { ids: vec![], mask: vec![], alpha: vec![], output_start: vec![], lengths: vec![] };
    for (mut ids, start, alpha) in rows {
        let len = ids.len();
        let mask = (0..t).map(|i| u8::from(i >= start && i < len)).collect();
        ids.resize(t, pad);
        batch.ids.push(ids);
        batch.mask.push(mask);
        batch.alpha.push(alpha);
        batch.output_start.push(start);
        batch.lengths.push(len);
    }
    Ok((Some(batch), skipped))
}

/// `mean_b α_b Σ_{t: mask=1} -log p(ids[b][t] | ids[b][..t])` from logits `[B*T, V]`.
pub fn sft_loss(logits: &Tensor, batch: &MaskedBatch) -> Result<Tensor> {
    batch.validate()?;
    let (b, t) = (batch.len(), batch.seq_len());
    if logits.shape().len() != 2 || logits.shape()[0] != b * t {
        return Err(Error::ShapeMismatch { op: "sft_loss", lhs: logits.shape().to_vec(), rhs: vec![b * t] });
    }
    let mut targets = Vec::with_capacity(b * t);
    let mut weight = Vec::with_capacity(b * t);
    for (ids, mask) in batch.ids.iter().zip(&batch.mask) {
        for i in 0..t {
            let next = i + 1 < t;
            targets.push(if next { ids[i + 1] as usize } else { 0 });
            weight.push(if next { Float::from(mask[i + 1]) } else { 0.0 });
        }
    }
    let masked = logits.cross_entropy(&targets)?.mul(&Tensor::new(weight, &[b * t])?)?;
    let per_sample = masked.reshape(&[b, t])?.sum_last()?;
    let alpha: Vec<Float> = batch.alpha.iter().map(|a| a / b as Float).collect();
    per_sample.mul(&Tensor::new(alpha, &[b])?)?.sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftHparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub weights: ClassWeights,
    pub train: TrainHparams,
}

impl Default for SftHparams {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            max_len: 64,
            seed: 0,
            weights: ClassWeights::default(),
            train: TrainHparams { min_lr: 1e-4, max_lr: 1e-3, ..TrainHparams::default() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLog {
    pub steps: Vec<StepLog>,
    pub skipped: Vec<SkippedSample>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Shuffled minibatch epochs over `data`; zero epochs leaves `model` untouched.
pub fn train_sft(
    model: &mut Model,
    opt: &mut AdamWState,
    data: &[InstructionSample],
    tok: &TokenizerModel,
    hp: &SftHparams,
) -> Result<SftLog> {
    if data.is_empty() {
        return Err(Error::Empty("instruction dataset"));
    }
    if hp.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if tok.vocab_size() > model.config().vocab_size {
        return Err(Error::invalid(format!(
            "tokenizer has {} tokens but the model only {}",
            tok.vocab_size(),
            model.config().vocab_size
        )));
    }
    hp.train.validate()?;
    let start = Instant::now();
    let max_len = hp.max_len.min(model.config().max_len);
    let per_epoch = data.len().div_ceil(hp.batch_size) as u64;
    let schedule = hp.train.schedule(per_epoch * hp.epochs as u64);
    let seeds = SeedTree::new(hp.seed).split("sft");
    let mut log = SftLog::default();
    let mut local = 0u64;
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        seeds.split_index(epoch as u64).rng().shuffle(&mut order);
        for chunk in order.chunks(hp.batch_size) {
            let samples: Vec<InstructionSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (batch, skipped) = build_sft_batch(&samples, tok, max_len, &hp.weights)?;
            if epoch == 0 {
                log.skipped.extend(skipped.into_iter().map(|s| SkippedSample { index: chunk[s.index], ..s }));
            }
            let lr = schedule.at(local);
            local += 1;
            let Some(batch) = batch else { continue };
            let bind = Binder::new(model.params(), true);
            let logits = model.forward(&bind, &Batch::new(batch.ids.clone())?)?;
            let loss = sft_loss(&logits, &batch)?;
            loss.backward()?;
            let mut grads = bind.gradients();
            drop(bind);
            let grad_norm = apply_update(model.params_mut(), opt, &mut grads, loss.item(), lr, &hp.train)?;
            let tokens = batch.lengths.iter().sum::<usize>() as u64;
            log.steps.push(StepLog { step: opt.step, loss: loss.item(), lr, grad_norm, tokens });
        }
    }
    log.skipped.sort_by_key(|s| s.index);
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::train_bpe;

    fn tok() -> TokenizerModel {
        train_bpe(&["what class is metformin? biguanide. what class is atenolol? beta blocker."], 300, &[SEP]).unwrap()
    }

    fn sample(instruction: &str, output: &str, c: WeightClass) -> InstructionSample {
        InstructionSample { instruction: instruction.into(), output: output.into(), weight_class: c, source_tag: "t".into() }
    }

    /// Vocabulary of 4 with hand-placed targets, so logits can be chosen freely.
    fn hand_batch(alpha: Float, mask: Vec<u8>) -> MaskedBatch {
        let t = mask.len();
        MaskedBatch {
            ids: vec![(0..t).map(|i| (i % 4) as u32).collect()],
            mask: vec![mask],
            alpha: vec![alpha],
            output_start: vec![1],
            lengths: vec![t],
        }
    }

    #[test]
    fn template_and_mask_counts() {
        let t = tok();
        let instr = "what class is metformin?";
        let n_instr = t.encode(instr).len();
        let out = "biguanide.";
        let n_out = t.encode(out).len();
        let (b, skipped) =
            build_sft_batch(&[sample(instr, out, WeightClass::Expert)], &t, 64, &ClassWeights::default()).unwrap();
        let b = b.unwrap();
        assert!(skipped.is_empty());
        assert_eq!(b.lengths[0], 1 + n_instr + 1 + n_out + 1);
        assert_eq!(b.ids[0][0], t.bos());
        assert_eq!(b.ids[0][n_instr + 1], t.special(SEP).unwrap());
        assert_eq!(*b.ids[0].last().unwrap(), t.eos());
        assert_eq!(b.mask[0].iter().map(|&m| m as usize).sum::<usize>(), n_out + 1);
        assert_eq!(b.output_start[0], n_instr + 2);
        assert_eq!(b.alpha, vec![1.0]);
    }

    #[test]
    fn seven_instruction_three_output_tokens_mask_four() {
        // byte-level tokenizer: one token per ASCII char
        let t = TokenizerModel::byte_level(&[SEP]).unwrap();
        let (b, _) =
            build_sft_batch(&[sample("abcdefg", "xyz", WeightClass::Generic)], &t, 64, &ClassWeights::default()).unwrap();
        let b = b.unwrap();
        assert_eq!(b.mask[0], vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(b.alpha, vec![0.1]);
    }

    #[test]
    fn empty_output_has_zero_mask_and_zero_loss() {
        let t = tok();
        let (b, _) = build_sft_batch(&[sample("what class is metformin?", "", WeightClass::Expert)], &t, 64, &ClassWeights::default())
            .unwrap();
        let b = b.unwrap();
        assert!(b.mask[0].iter().all(|&m| m == 0));
        let logits = Tensor::leaf(vec![0.3; b.seq_len() * 300], &[b.seq_len(), 300]).unwrap();
        let loss = sft_loss(&logits, &b).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn overlong_samples_are_skipped_and_reported() {
        let t = TokenizerModel::byte_level(&[SEP]).unwrap();
        let data = [sample("ab", "c", WeightClass::Expert), sample(&"z".repeat(40), "c", WeightClass::Expert)];
        let (b, skipped) = build_sft_batch(&data, &t, 10, &ClassWeights::default()).unwrap();
        assert_eq!(b.unwrap().len(), 1);
        assert_eq!(skipped, vec![SkippedSample { index: 1, tokens: 44, max_len: 10 }]);
    }

    #[test]
    fn uniform_logits_generic_three_targets() {
        let b = hand_batch(0.1, vec![0, 0, 1, 1, 1]);
        let logits = Tensor::new(vec![0.0; 5 * 4], &[5, 4]).unwrap();
        let loss = sft_loss(&logits, &b).unwrap().item();
        assert!((loss - 0.1 * 3.0 * (4.0 as Float).ln()).abs() < 1e-12);
        assert!((loss - 0.41589).abs() < 1e-4);
    }

    #[test]
    fn expert_is_exactly_ten_times_generic() {
        let mut rng = SeedTree::new(1).rng();
        let logits = Tensor::new((0..6 * 4).map(|_| rng.normal()).collect(), &[6, 4]).unwrap();
        let mask = vec![0, 0, 1, 1, 0, 1];
        let e = sft_loss(&logits, &hand_batch(1.0, mask.clone())).unwrap().item();
        let g = sft_loss(&logits, &hand_batch(0.1, mask)).unwrap().item();
        assert!((e / g - 10.0).abs() < 1e-12);
    }

    #[test]
    fn unmasked_targets_do_not_leak() {
        let mut rng = SeedTree::new(2).rng();
        let logits = Tensor::new((0..6 * 4).map(|_| rng.normal()).collect(), &[6, 4]).unwrap();
        let b = hand_batch(1.0, vec![0, 1, 0, 1, 0, 0]);
        let base = sft_loss(&logits, &b).unwrap().item();
        for pos in [0, 2, 4, 5] {
            let mut p = b.clone();
            p.ids[0][pos] = (p.ids[0][pos] + 1) % 4;
            assert_eq!(sft_loss(&logits, &p).unwrap().item(), base);
        }
    }

    #[test]
    fn one_hot_logits_give_near_zero_loss() {
        let b = hand_batch(1.0, vec![0, 1, 1, 1]);
        let mut data = vec![-50.0; 4 * 4];
        for i in 0..3 {
            data[i * 4 + b.ids[0][i + 1] as usize] = 50.0;
        }
        let loss = sft_loss(&Tensor::new(data, &[4, 4]).unwrap(), &b).unwrap().item();
        assert!(loss < 1e-30);
    }

    #[test]
    fn full_mask_alpha_one_equals_summed_nll() {
        let m = Model::new(ModelConfig { vocab_size: 4, hidden: 8, layers: 1, heads: 2, max_len: 8, seed: 1 }).unwrap();
        let b = hand_batch(1.0, vec![0, 1, 1, 1, 1, 1]);
        let logits = m.logits(&b.ids[0]).unwrap();
        let sft = sft_loss(&logits, &b).unwrap().item();
        let nll = -m.sequence_log_prob(&b.ids[0]).unwrap();
        assert!((sft - nll).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_is_identity_and_training_reduces_loss() {
        let t = tok();
        let cfg = ModelConfig { vocab_size: t.vocab_size(), hidden: 16, layers: 1, heads: 2, max_len: 48, seed: 4 };
        let data = vec![
            sample("what class is metformin?", "biguanide.", WeightClass::Expert),
            sample("what class is atenolol?", "beta blocker.", WeightClass::Generic),
        ];
        let mut m = Model::new(cfg).unwrap();
        let before = m.clone();
        let mut opt = AdamWState::new();
        let log = train_sft(&mut m, &mut opt, &data, &t, &SftHparams { epochs: 0, ..Default::default() }).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(m, before);

        let hp = SftHparams { epochs: 40, batch_size: 2, train: TrainHparams { min_lr: 1e-3, max_lr: 1e-2, ..TrainHparams::default() }, ..Default::default() };
        let log = train_sft(&mut m, &mut opt, &data, &t, &hp).unwrap();
        assert!(log.steps.last().unwrap().loss < 0.5 * log.steps[0].loss);
        assert!(train_sft(&mut m, &mut opt, &[], &t, &hp).is_err());
    }

    #[test]
    fn sample_jsonl_shape() {
        let s: InstructionSample = serde_json::from_str(
            r#"{"instruction":"q","output":"a","weight_class":"generic","source_tag":"multi_intention"}"#,
        )
        .unwrap();
        assert_eq!(s.weight_class, WeightClass::Generic);
    }
}
