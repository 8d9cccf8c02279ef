//! Decoder-only transformer: pre-norm blocks, learned absolute positions,
//! untied input embedding and output projection.

mod checkpoint;
mod generate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::optim::AdamWState;
use crate::tensor::{Binder, Float, Param, ParamStore, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::GenerateParams;

pub const TOK_EMB: &str = "tok_emb";
pub const POS_EMB: &str = "pos_emb";
pub const OUT_PROJ: &str = "out_proj";
const LN_EPS: Float = 1e-5;
const INIT_STD: Float = 0.02;
const MASKED: Float = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 300, hidden: 128, layers: 4, heads: 4, max_len: 256, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }
}

/// How rows appended by [`Model::resize_vocab`] are filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Mean of the existing rows plus seeded Gaussian noise.
    MeanPlusNoise { std: Float },
    Zeros,
    Normal { std: Float },
}

impl Default for InitRule {
    fn default() -> Self {
        InitRule::MeanPlusNoise { std: INIT_STD }
    }
}

/// Equal-length sequences; sequence `b` has `pad_left[b]` leading pad tokens
/// that are never attended to and do not shift positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub pad_left: Vec<usize>,
}

impl Batch {
    pub fn new(ids: Vec<Vec<u32>>) -> Result<Self> {
        let pad_left = vec![0; ids.len()];
        Self::with_padding(ids, pad_left)
    }

    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::new(vec![ids.to_vec()])
    }

    pub fn with_padding(ids: Vec<Vec<u32>>, pad_left: Vec<usize>) -> Result<Self> {
        let t = ids.first().ok_or(Error::Empty("batch"))?.len();
        if t == 0 {
            return Err(Error::Empty("sequence"));
        }
        if ids.iter().any(|s| s.len() != t) || pad_left.len() != ids.len() || pad_left.iter().any(|&p| p >= t) {
            return Err(Error::invalid("batch sequences must share a length and keep at least one real token"));
        }
        Ok(Self { ids, pad_left })
    }

    /// Pads every sequence on the left to the longest length.
    pub fn left_padded(seqs: &[Vec<u32>], pad: u32) -> Result<Self> {
        let t = seqs.iter().map(Vec::len).max().ok_or(Error::Empty("batch"))?;
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Empty("sequence"));
        }
        let ids = seqs
            .iter()
            .map(|s| std::iter::repeat_n(pad, t - s.len()).chain(s.iter().copied()).collect())
            .collect();
        Self::with_padding(ids, seqs.iter().map(|s| t - s.len()).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids[0].len()
    }

    fn positions(&self) -> Vec<usize> {
        let t = self.seq_len();
        self.pad_left.iter().flat_map(|&p| (0..t).map(move |i| i.saturating_sub(p))).collect()
    }

    /// Additive `[B, T, T]` mask: causal, and pad keys hidden from real queries.
    fn mask(&self) -> Result<Tensor> {
        let t = self.seq_len();
        let mut m = vec![MASKED; self.len() * t * t];
        for (b, &p) in self.pad_left.iter().enumerate() {
            for i in 0..t {
                let row = &mut m[(b * t + i) * t..][..t];
                if i < p {
                    row[i] = 0.0;
                } else {
                    row[p..=i].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Tensor::new(m, &[self.len(), t, t])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

fn layer_name(l: usize, p: &str) -> String {
    format!("layers.{l}.{p}")
}

impl Model {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed).split("model-init");
        let (v, h, f) = (config.vocab_size, config.hidden, config.mlp_hidden());
        let resid_std = INIT_STD / ((2 * config.layers) as Float).sqrt();
        let normal = |name: &str, shape: &[usize], std: Float| Param::normal(shape, std, &mut seeds.split(name).rng());
        let mut params = ParamStore::new();
        params.insert(TOK_EMB, normal(TOK_EMB, &[v, h], INIT_STD));
        params.insert(POS_EMB, normal(POS_EMB, &[config.max_len, h], INIT_STD));
        params.insert(OUT_PROJ, normal(OUT_PROJ, &[v, h], INIT_STD));
        params.insert("ln_f.gamma", Param::filled(&[h], 1.0));
        params.insert("ln_f.beta", Param::zeros(&[h]));
        for l in 0..config.layers {
            let n = |p: &str| layer_name(l, p);
            for ln in ["ln1", "ln2"] {
                params.insert(n(&format!("{ln}.gamma")), Param::filled(&[h], 1.0));
                params.insert(n(&format!("{ln}.beta")), Param::zeros(&[h]));
            }
            for w in ["wq", "wk", "wv"] {
                params.insert(n(w), normal(&n(w), &[h, h], INIT_STD));
            }
            params.insert(n("wo"), normal(&n("wo"), &[h, h], resid_std));
            params.insert(n("mlp.w1"), normal(&n("mlp.w1"), &[h, f], INIT_STD));
            params.insert(n("mlp.b1"), Param::zeros(&[f]));
            params.insert(n("mlp.w2"), normal(&n("mlp.w2"), &[f, h], resid_std));
            params.insert(n("mlp.b2"), Param::zeros(&[h]));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(ModelConfig { seed: 0, ..config })?;
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} model tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape != p.shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", got.shape, p.shape)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len() > self.config.max_len {
            return Err(Error::SequenceTooLong { len: batch.seq_len(), max_len: self.config.max_len });
        }
        let v = self.config.vocab_size;
        match batch.ids.iter().flatten().find(|&&id| id as usize >= v) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab: v }),
            None => Ok(()),
        }
    }

    /// Final-norm hidden states, `[B*T, H]`.
    pub fn hidden(&self, bind: &Binder, batch: &Batch) -> Result<Tensor> {
        self.check_ids(batch)?;
        let ids: Vec<usize> = batch.ids.iter().flatten().map(|&i| i as usize).collect();
        let mut x = bind.get(TOK_EMB)?.gather_rows(&ids)?.add(&bind.get(POS_EMB)?.gather_rows(&batch.positions())?)?;
        let mask = batch.mask()?;
        for l in 0..self.config.layers {
            let p = |s: &str| bind.get(&layer_name(l, s));
            let h = x.layer_norm(&p("ln1.gamma")?, &p("ln1.beta")?, LN_EPS)?;
            x = x.add(&self.attention(bind, l, &h, batch, &mask)?)?;
            let h = x.layer_norm(&p("ln2.gamma")?, &p("ln2.beta")?, LN_EPS)?;
            let h = h.matmul(&p("mlp.w1")?)?.add(&p("mlp.b1")?)?.gelu()?;
            x = x.add(&h.matmul(&p("mlp.w2")?)?.add(&p("mlp.b2")?)?)?;
        }
        x.layer_norm(&bind.get("ln_f.gamma")?, &bind.get("ln_f.beta")?, LN_EPS)
    }

    fn attention(&self, bind: &Binder, l: usize, h: &Tensor, batch: &Batch, mask: &Tensor) -> Result<Tensor> {
        let (b, t) = (batch.len(), batch.seq_len());
        let nh = self.config.heads;
        let hd = self.config.hidden / nh;
        let w = |s: &str| bind.get(&layer_name(l, s));
        let q = h.matmul(&w("wq")?)?;
        let k = h.matmul(&w("wk")?)?;
        let v = h.matmul(&w("wv")?)?;
        let scale = 1.0 / (hd as Float).sqrt();
        let mut heads = Vec::with_capacity(nh);
        for head in 0..nh {
            let split = |m: &Tensor| m.slice(1, head * hd, hd)?.reshape(&[b, t, hd]);
            let scores = split(&q)?.matmul(&split(&k)?.transpose()?)?.scale(scale)?.add(mask)?;
            heads.push(scores.softmax()?.matmul(&split(&v)?)?.reshape(&[b * t, hd])?);
        }
        Tensor::concat(&heads, 1)?.matmul(&w("wo")?)
    }

    /// Next-token logits `[B*T, V]`; row `b*T + i` predicts token `i + 1` of sequence `b`.
    pub fn forward(&self, bind: &Binder, batch: &Batch) -> Result<Tensor> {
        self.hidden(bind, batch)?.matmul(&bind.get(OUT_PROJ)?.transpose()?)
    }

    /// Inference logits `[T, V]` for one sequence.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        self.forward(&Binder::frozen(&self.params), &Batch::single(ids)?)
    }

    /// `log p(ids[i] | ids[..i])` for `i = 1..len`.
    pub fn token_log_probs(&self, ids: &[u32]) -> Result<Vec<Float>> {
        if ids.len() < 2 {
            return Ok(Vec::new());
        }
        let lp = self.logits(&ids[..ids.len() - 1])?.log_softmax()?;
        let v = self.config.vocab_size;
        Ok(ids[1..].iter().enumerate().map(|(i, &tok)| lp.data()[i * v + tok as usize]).collect())
    }

    /// Sum of next-token log-probabilities after the first token.
    pub fn sequence_log_prob(&self, ids: &[u32]) -> Result<Float> {
        Ok(self.token_log_probs(ids)?.iter().sum())
    }

    /// Grows the embedding and output matrices to `new_vocab` rows. Existing rows
    /// are copied bit for bit; optimizer moments for the new rows start at zero.
    pub fn resize_vocab(&mut self, new_vocab: usize, rule: InitRule, optimizer: Option<&mut AdamWState>) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab <= old {
            return Err(Error::invalid(format!("new vocabulary {new_vocab} must exceed {old}")));
        }
        let h = self.config.hidden;
        let seeds = SeedTree::new(self.config.seed).split("resize").split_index(new_vocab as u64);
        for name in [TOK_EMB, OUT_PROJ] {
            let p = self.params.get_mut(name)?;
            let mut rng = seeds.split(name).rng();
            let mean: Vec<Float> =
                (0..h).map(|j| (0..old).map(|r| p.data[r * h + j]).sum::<Float>() / old as Float).collect();
            for _ in old..new_vocab {
                for &m in &mean {
                    let x = match rule {
                        InitRule::MeanPlusNoise { std } => m + std * rng.normal(),
                        InitRule::Zeros => 0.0,
                        InitRule::Normal { std } => std * rng.normal(),
                    };
                    p.data.push(x);
                }
            }
            p.shape = vec![new_vocab, h];
        }
        if let Some(opt) = optimizer {
            opt.grow_rows(TOK_EMB, new_vocab * h);
            opt.grow_rows(OUT_PROJ, new_vocab * h);
        }
        self.config.vocab_size = new_vocab;
        Ok(())
    }
}
