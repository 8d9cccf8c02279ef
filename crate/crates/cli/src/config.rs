//! Run configuration: one JSON document, strictly validated, with dotted-path
//! overrides applied to the raw JSON before the schema sees it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pharmakit::datapipe::{Category, PipelineConfig};
use pharmakit::eval::BleuTokenization;
use pharmakit::pretrain::BlockShape;
use pharmakit::rlhf::PpoConfig;
use pharmakit::rng::SeedTree;
use pharmakit::sft::ClassWeights;
use pharmakit::train::TrainHparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub datapipe: PipelineConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub sft: SftSection,
    pub rm: RmSection,
    pub ppo: PpoSection,
    pub eval: EvalSection,
}

/// Shipped inputs are required; artifact paths are filled in by `pipeline`
/// or set by hand when a stage runs on its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub general_text: PathBuf,
    pub domain_text: PathBuf,
    pub sft_data: PathBuf,
    pub preferences: PathBuf,
    pub ppo_prompts: PathBuf,
    pub exam: PathBuf,
    pub translations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_tokenizer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tokenizer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exam_report: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu_report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub base_vocab: usize,
    pub target_vocab: usize,
    #[serde(default)]
    pub extra_specials: Vec<String>,
    /// Clean-corpus categories added to the domain tokenizer's training text.
    #[serde(default)]
    pub domain_categories: Vec<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

/// Per-stage optimizer settings. Parallelism degrees are accepted and ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub batch_size: usize,
    pub global_batch: usize,
    pub min_lr: f64,
    pub max_lr: f64,
    pub max_len: usize,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor_parallel: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline_parallel: Option<u64>,
}

fn default_clip() -> f64 {
    1.0
}

impl Hyper {
    pub fn train(&self) -> TrainHparams {
        TrainHparams {
            min_lr: self.min_lr,
            max_lr: self.max_lr,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            ..TrainHparams::default()
        }
    }

    fn check(&self, stage: &str, warnings: &mut Vec<String>) -> Result<()> {
        if self.batch_size == 0 || self.max_len < 2 {
            bail!("{stage}.hyper: batch_size must be positive and max_len at least 2");
        }
        // No gradient accumulation: one optimizer step per local batch.
        if self.global_batch != self.batch_size {
            bail!(
                "{stage}.hyper.global_batch ({}) must equal batch_size ({}); gradient accumulation is not supported",
                self.global_batch,
                self.batch_size
            );
        }
        for (name, v) in [("tensor_parallel", self.tensor_parallel), ("pipeline_parallel", self.pipeline_parallel)] {
            if let Some(v) = v {
                warnings.push(format!("{stage}.hyper.{name}={v} ignored: training runs in one process"));
            }
        }
        self.train().validate().with_context(|| format!("{stage}.hyper"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    pub token_budget: u64,
    pub mixture: BTreeMap<Category, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub hyper: Hyper,
    pub stage1: StageBudget,
    pub stage2: StageBudget,
}

impl PretrainSection {
    pub fn shape(&self) -> BlockShape {
        BlockShape { batch: self.hyper.batch_size, seq_len: self.hyper.max_len }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub hyper: Hyper,
    #[serde(default)]
    pub weights: ClassWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmSection {
    pub epochs: usize,
    pub hyper: Hyper,
    pub held_out_modulus: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSection {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub gamma: f64,
    pub lam: f64,
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    pub max_new: usize,
    pub temperature: f64,
    #[serde(default)]
    pub top_k: usize,
    /// Write a policy checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl PpoSection {
    pub fn ppo_config(&self, seed: u64) -> PpoConfig {
        PpoConfig {
            clip_eps: self.clip_eps,
            kl_coef: self.kl_coef,
            gamma: self.gamma,
            lam: self.lam,
            k: self.k,
            epochs: self.epochs,
            lr: self.lr,
            critic_lr: self.critic_lr,
            grad_clip: self.grad_clip,
            iterations: self.iterations,
            prompts_per_iteration: self.prompts_per_iteration,
            max_new: self.max_new,
            temperature: self.temperature,
            top_k: self.top_k,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub baseline_seeds: usize,
    pub bleu_max_n: usize,
    #[serde(default)]
    pub bleu_tokenization: BleuTokenization,
    pub translate_max_new: usize,
}

/// Applies `key=value` overrides; the value parses as JSON, else as a string.
pub fn apply_overrides(doc: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
        if key.is_empty() {
            bail!("override {o:?} has an empty key");
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cur = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = cur.as_object_mut().with_context(|| format!("override {key}: {} is not an object", parts[..i].join(".")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
        }
    }
    Ok(())
}

/// A validated config plus what is needed to reproduce and report it.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    /// SHA-256 of the canonical resolved config.
    pub hash: String,
    pub warnings: Vec<String>,
}

pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    apply_overrides(&mut doc, overrides)?;
    if let Some(s) = seed {
        apply_overrides(&mut doc, &[format!("seed={s}")])?;
    }
    let mut config: Config = serde_json::from_value(doc).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.paths.resolve(base);
    let warnings = config.validate()?;
    let hash = pharmakit::io::sha256_hex(&serde_json::to_vec(&config)?);
    Ok(Loaded { config, hash, warnings })
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.general_text,
            &mut self.domain_text,
            &mut self.sft_data,
            &mut self.preferences,
            &mut self.ppo_prompts,
            &mut self.exam,
            &mut self.translations,
        ] {
            fix(p);
        }
        for p in [
            &mut self.reference,
            &mut self.clean_corpus,
            &mut self.base_tokenizer,
            &mut self.domain_tokenizer,
            &mut self.tokenizer,
            &mut self.pretrained,
            &mut self.sft_model,
            &mut self.reward_model,
            &mut self.policy,
            &mut self.exam_report,
            &mut self.bleu_report,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

impl Config {
    /// Schema-level checks that need no files; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let t = &self.tokenizer;
        if t.base_vocab <= pharmakit::tokenizer::BYTE_TOKENS || t.target_vocab <= t.base_vocab {
            bail!("tokenizer: need 256 < base_vocab < target_vocab, got {} and {}", t.base_vocab, t.target_vocab);
        }
        if !t.extra_specials.iter().any(|s| s == pharmakit::tokenizer::SEP) {
            bail!("tokenizer.extra_specials must include \"sep\" for the instruction template");
        }
        self.model_config(t.target_vocab).validate().context("model")?;
        self.pretrain.hyper.check("pretrain", &mut warnings)?;
        if self.pretrain.hyper.max_len > self.model.max_len {
            bail!("pretrain.hyper.max_len {} exceeds model.max_len {}", self.pretrain.hyper.max_len, self.model.max_len);
        }
        for (name, s) in [("stage1", &self.pretrain.stage1), ("stage2", &self.pretrain.stage2)] {
            pharmakit::pretrain::StageSpec { token_budget: s.token_budget, mixture: s.mixture.clone(), seed: 0 }
                .validate()
                .with_context(|| format!("pretrain.{name}"))?;
        }
        self.sft.hyper.check("sft", &mut warnings)?;
        self.rm.hyper.check("rm", &mut warnings)?;
        if self.rm.held_out_modulus < 2 {
            bail!("rm.held_out_modulus must be at least 2");
        }
        self.ppo.ppo_config(0).validate().context("ppo")?;
        if self.eval.baseline_seeds == 0 || self.eval.bleu_max_n == 0 {
            bail!("eval.baseline_seeds and eval.bleu_max_n must be positive");
        }
        Ok(warnings)
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn model_config(&self, vocab_size: usize) -> pharmakit::model::ModelConfig {
        pharmakit::model::ModelConfig {
            vocab_size,
            hidden: self.model.hidden,
            layers: self.model.layers,
            heads: self.model.heads,
            max_len: self.model.max_len,
            seed: self.seeds().split("model").seed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_values_and_fall_back_to_strings() {
        let mut doc = serde_json::json!({"a": {"b": 1}});
        apply_overrides(&mut doc, &["a.b=2".into(), "a.c=hello".into(), "d.e=[1,2]".into()]).unwrap();
        assert_eq!(doc, serde_json::json!({"a": {"b": 2, "c": "hello"}, "d": {"e": [1, 2]}}));
    }

    #[test]
    fn override_through_a_scalar_is_rejected() {
        let mut doc = serde_json::json!({"a": 1});
        assert!(apply_overrides(&mut doc, &["a.b=2".into()]).is_err());
        assert!(apply_overrides(&mut doc, &["novalue".into()]).is_err());
    }
}
