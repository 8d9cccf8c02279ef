//! One function per command. Each reads its inputs from `cfg.paths`, writes
//! under the run directory and points `cfg.paths` at what it produced, so
//! `pipeline` is just the stages in order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pharmakit::datapipe::{run_pipeline, Category, CorpusDocument};
use pharmakit::eval::{
    report, score_exam, score_translations, translate, BleuReport, EvalResults, ExamItem, ExamReport, ReferenceTable,
    TranslationItem,
};
use pharmakit::io::{read_json, read_jsonl, sha256_hex};
use pharmakit::model::{Checkpoint, Model};
use pharmakit::pretrain::{encode_corpus, evaluate_lm, run_two_stage, StageSpec};
use pharmakit::reward::{train_rm, PreferencePair, RewardModel, RmHparams};
use pharmakit::rlhf::{rlhf_train, Critic, IterationLog, PolicyTokens, PpoOptimizers};
use pharmakit::sft::{format_prompt, train_sft, InstructionSample, SftHparams};
use pharmakit::tensor::optim::AdamWState;
use pharmakit::tokenizer::{compression_ratio, merge_to, train_bpe, train_extension, TokenizerModel};

use crate::config::Config;
use crate::run::{Failure, Kind, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Datapipe,
    TokTrain,
    TokMerge,
    Pretrain,
    Sft,
    RmTrain,
    Ppo,
    EvalExam,
    EvalBleu,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Datapipe,
        Stage::TokTrain,
        Stage::TokMerge,
        Stage::Pretrain,
        Stage::Sft,
        Stage::RmTrain,
        Stage::Ppo,
        Stage::EvalExam,
        Stage::EvalBleu,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Datapipe => "datapipe",
            Stage::TokTrain => "tok-train",
            Stage::TokMerge => "tok-merge",
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::RmTrain => "rm-train",
            Stage::Ppo => "ppo",
            Stage::EvalExam => "eval-exam",
            Stage::EvalBleu => "eval-bleu",
            Stage::Report => "report",
        }
    }

    /// Config keys this stage reads when run on its own; `None` values are
    /// reported as missing before anything runs.
    pub fn inputs(self, cfg: &Config) -> Vec<(&'static str, Option<PathBuf>)> {
        let p = &cfg.paths;
        let mut v = match self {
            Stage::Datapipe => vec![("paths.corpus", Some(p.corpus.clone()))],
            Stage::TokTrain => {
                let mut v =
                    vec![("paths.general_text", Some(p.general_text.clone())), ("paths.domain_text", Some(p.domain_text.clone()))];
                if !cfg.tokenizer.domain_categories.is_empty() {
                    v.push(("paths.clean_corpus", p.clean_corpus.clone()));
                }
                v
            }
            Stage::TokMerge => vec![
                ("paths.base_tokenizer", p.base_tokenizer.clone()),
                ("paths.domain_tokenizer", p.domain_tokenizer.clone()),
                ("paths.domain_text", Some(p.domain_text.clone())),
            ],
            Stage::Pretrain => vec![("paths.tokenizer", p.tokenizer.clone()), ("paths.clean_corpus", p.clean_corpus.clone())],
            Stage::Sft => vec![
                ("paths.tokenizer", p.tokenizer.clone()),
                ("paths.pretrained", p.pretrained.clone()),
                ("paths.sft_data", Some(p.sft_data.clone())),
            ],
            Stage::RmTrain => vec![
                ("paths.tokenizer", p.tokenizer.clone()),
                ("paths.sft_model", p.sft_model.clone()),
                ("paths.preferences", Some(p.preferences.clone())),
            ],
            Stage::Ppo => vec![
                ("paths.tokenizer", p.tokenizer.clone()),
                ("paths.sft_model", p.sft_model.clone()),
                ("paths.reward_model", p.reward_model.clone()),
                ("paths.ppo_prompts", Some(p.ppo_prompts.clone())),
            ],
            Stage::EvalExam => {
                let mut v = vec![("paths.tokenizer", p.tokenizer.clone()), ("paths.exam", Some(p.exam.clone()))];
                for (k, ck) in [("paths.pretrained", &p.pretrained), ("paths.sft_model", &p.sft_model), ("paths.policy", &p.policy)] {
                    if ck.is_some() {
                        v.push((k, ck.clone()));
                    }
                }
                v
            }
            Stage::EvalBleu => vec![
                ("paths.tokenizer", p.tokenizer.clone()),
                ("paths.translations", Some(p.translations.clone())),
                ("paths.sft_model", p.sft_model.clone()),
            ],
            Stage::Report => {
                let mut v = Vec::new();
                for (k, r) in [("paths.exam_report", &p.exam_report), ("paths.bleu_report", &p.bleu_report)] {
                    if r.is_some() {
                        v.push((k, r.clone()));
                    }
                }
                v
            }
        };
        if let (Stage::Report, Some(r)) = (self, &p.reference) {
            v.push(("paths.reference", Some(r.clone())));
        }
        v
    }

    pub fn run(self, cfg: &mut Config, run: &mut Run) -> Result<Value> {
        match self {
            Stage::Datapipe => datapipe(cfg, run),
            Stage::TokTrain => tok_train(cfg, run),
            Stage::TokMerge => tok_merge(cfg, run),
            Stage::Pretrain => pretrain(cfg, run),
            Stage::Sft => sft(cfg, run),
            Stage::RmTrain => rm_train(cfg, run),
            Stage::Ppo => ppo(cfg, run),
            Stage::EvalExam => eval_exam(cfg, run),
            Stage::EvalBleu => eval_bleu(cfg, run),
            Stage::Report => report_stage(cfg, run),
        }
    }
}

/// Fails with a missing-input error naming every absent key or file.
pub fn check_inputs(list: &[(&'static str, Option<PathBuf>)]) -> Result<()> {
    let mut missing = Vec::new();
    for (key, p) in list {
        match p {
            None => missing.push(format!("{key} is not set")),
            Some(p) if !p.is_file() => missing.push(format!("{key}: {} not found", p.display())),
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(Failure::new(Kind::MissingInput, missing.join("; ")));
    }
    Ok(())
}

fn path(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Failure::new(Kind::MissingInput, format!("{key} is not set")))
}

fn load_tokenizer(cfg: &Config, run: &mut Run) -> Result<TokenizerModel> {
    let p = path(&cfg.paths.tokenizer, "paths.tokenizer")?;
    run.input("tokenizer", &p)?;
    Ok(TokenizerModel::load(&p)?)
}

fn load_model(run: &mut Run, label: &str, p: &Option<PathBuf>, tok: &TokenizerModel) -> Result<Model> {
    let p = path(p, &format!("paths.{label}"))?;
    run.input(label, &p)?;
    let model = Checkpoint::load(&p)?.model()?;
    if model.config().vocab_size != tok.vocab_size() {
        bail!("{}: model vocabulary {} does not match tokenizer {}", p.display(), model.config().vocab_size, tok.vocab_size());
    }
    Ok(model)
}

fn read_lines(run: &mut Run, label: &str, p: &Path) -> Result<Vec<String>> {
    run.input(label, p)?;
    Ok(read_jsonl(p)?)
}

/// Saves the last good weights on a training abort and reports where.
fn abort_guard<T>(r: pharmakit::Result<T>, run: &mut Run, rel: &str, ck: impl FnOnce() -> Checkpoint) -> Result<T> {
    match r {
        Ok(v) => Ok(v),
        Err(e @ pharmakit::Error::TrainingAborted { .. }) => {
            run.save_checkpoint(rel, &ck())?;
            Err(Failure::new(Kind::Aborted, format!("{e}; last good weights kept in {rel}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn clean_corpus(cfg: &Config, run: &mut Run) -> Result<Vec<CorpusDocument>> {
    let p = path(&cfg.paths.clean_corpus, "paths.clean_corpus")?;
    run.input("clean_corpus", &p)?;
    Ok(read_jsonl(&p)?)
}

fn datapipe(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    run.input("corpus", &cfg.paths.corpus)?;
    let docs: Vec<CorpusDocument> = read_jsonl(&cfg.paths.corpus)?;
    let (kept, rep) = run_pipeline(docs, &cfg.datapipe)?;
    cfg.paths.clean_corpus = Some(run.write_jsonl("datapipe/clean_corpus.jsonl", &kept)?);
    run.write_json("datapipe/report.json", &rep)?;
    let mut per_category: BTreeMap<Category, usize> = BTreeMap::new();
    for d in &kept {
        *per_category.entry(d.category).or_default() += 1;
    }
    Ok(json!({
        "input": rep.input,
        "output": rep.output,
        "quality_dropped": rep.quality.dropped,
        "exact_duplicates": rep.exact_duplicates.len(),
        "near_duplicates": rep.near_duplicates.len(),
        "pii_matches": rep.pii_matches,
        "per_category": per_category,
    }))
}

fn tok_train(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let t = cfg.tokenizer.clone();
    let general = read_lines(run, "general_text", &cfg.paths.general_text.clone())?;
    let mut domain = read_lines(run, "domain_text", &cfg.paths.domain_text.clone())?;
    if !t.domain_categories.is_empty() {
        domain.extend(clean_corpus(cfg, run)?.into_iter().filter(|d| t.domain_categories.contains(&d.category)).map(|d| d.text));
    }
    let specials: Vec<&str> = t.extra_specials.iter().map(String::as_str).collect();
    let base = train_bpe(&general, t.base_vocab, &specials)?;
    let ext = train_extension(&base, &domain, t.target_vocab)?;
    let bp = run.output("tokenizer/base.json")?;
    base.save(&bp)?;
    let dp = run.output("tokenizer/domain.json")?;
    ext.save(&dp)?;
    cfg.paths.base_tokenizer = Some(bp);
    cfg.paths.domain_tokenizer = Some(dp);
    Ok(json!({ "base_vocab": base.vocab_size(), "domain_vocab": ext.vocab_size(), "domain_docs": domain.len() }))
}

fn tok_merge(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let bp = path(&cfg.paths.base_tokenizer, "paths.base_tokenizer")?;
    let dp = path(&cfg.paths.domain_tokenizer, "paths.domain_tokenizer")?;
    run.input("base_tokenizer", &bp)?;
    run.input("domain_tokenizer", &dp)?;
    let base = TokenizerModel::load(&bp)?;
    let domain = TokenizerModel::load(&dp)?;
    let merged = merge_to(&base, &domain, Some(cfg.tokenizer.target_vocab))?;
    let text = read_lines(run, "domain_text", &cfg.paths.domain_text.clone())?;
    let (before, after) = (compression_ratio(&base, &text)?, compression_ratio(&merged, &text)?);
    let p = run.output("tokenizer/merged.json")?;
    merged.save(&p)?;
    cfg.paths.tokenizer = Some(p);
    let summary = json!({
        "base_vocab": base.vocab_size(),
        "domain_vocab": domain.vocab_size(),
        "merged_vocab": merged.vocab_size(),
        "domain_tokens_per_byte_base": before,
        "domain_tokens_per_byte_merged": after,
        "domain_token_reduction": 1.0 - after / before,
    });
    run.write_json("tokenizer/report.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
struct BudgetReport {
    token_budget: u64,
    tokens_consumed: u64,
    batches: usize,
    tokens_per_batch: u64,
    tokens_per_category: BTreeMap<Category, u64>,
}

fn pretrain(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    let mut by_cat: BTreeMap<Category, Vec<String>> = BTreeMap::new();
    for d in clean_corpus(cfg, run)? {
        by_cat.entry(d.category).or_default().push(d.text);
    }
    let corpora: BTreeMap<Category, Vec<u32>> = by_cat.iter().map(|(c, docs)| (*c, encode_corpus(&tok, docs))).collect();
    let pt = cfg.pretrain.clone();
    let seeds = cfg.seeds().split("pretrain");
    let spec = |name: &str, s: &crate::config::StageBudget| StageSpec {
        token_budget: s.token_budget,
        mixture: s.mixture.clone(),
        seed: seeds.split(name).seed(),
    };
    let (s1, s2) = (spec("stage1", &pt.stage1), spec("stage2", &pt.stage2));
    let shape = pt.shape();
    let hp = pt.hyper.train();

    let mut model = Model::new(cfg.model_config(tok.vocab_size()))?;
    // Initial loss on the first blocks each stage-1 category contributes.
    let probe: Vec<Vec<u32>> = s1
        .mixture
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .filter_map(|(c, _)| corpora.get(c))
        .flat_map(|t| t.chunks(shape.seq_len).filter(|b| b.len() == shape.seq_len).take(shape.batch).map(<[u32]>::to_vec))
        .collect();
    let initial_probe_loss = if probe.is_empty() { None } else { Some(evaluate_lm(&model, &probe)?) };
    let mut opt = AdamWState::new();
    let ckpt = |m: &Model, o: &AdamWState, stage: usize| {
        let mut ck = Checkpoint::from_model("lm", m, o.step);
        ck.optimizers.insert("adamw".into(), o.clone());
        ck.meta.insert("stage".into(), json!(stage));
        ck
    };
    let mut saved = Vec::new();
    let result = run_two_stage(&mut model, &mut opt, &corpora, &s1, &s2, shape, &hp, &mut |stage, m, o| {
        let rel = if stage == 1 { "pretrain/stage1.ckpt" } else { "pretrain/final.ckpt" };
        saved.push((rel, ckpt(m, o, stage)));
        Ok(())
    });
    for (rel, ck) in &saved {
        run.save_checkpoint(rel, ck)?;
    }
    let log = abort_guard(result, run, "pretrain/aborted.ckpt", || ckpt(&model, &opt, 0))?;
    cfg.paths.pretrained = Some(run.output("pretrain/final.ckpt")?);
    let mut steps = log.stage1.steps.clone();
    steps.extend(log.stage2.steps.iter().cloned());
    run.write_jsonl("pretrain/steps.jsonl", &steps)?;
    let final_probe_loss = if probe.is_empty() { None } else { Some(evaluate_lm(&model, &probe)?) };

    let budget = |spec: &StageSpec, l: &pharmakit::pretrain::TrainRunLog| BudgetReport {
        token_budget: spec.token_budget,
        tokens_consumed: l.tokens_consumed,
        batches: l.steps.len(),
        tokens_per_batch: shape.tokens_per_batch(),
        tokens_per_category: l.tokens_per_category.clone(),
    };
    let summary = json!({
        "parameters": model.num_parameters(),
        "vocab_size": tok.vocab_size(),
        "stage1": budget(&s1, &log.stage1),
        "stage2": budget(&s2, &log.stage2),
        "initial_loss": steps.first().map(|s| s.loss),
        "final_loss": steps.last().map(|s| s.loss),
        "initial_probe_loss": initial_probe_loss,
        "final_probe_loss": final_probe_loss,
        "steps": steps.len(),
    });
    run.write_json("pretrain/report.json", &summary)?;
    Ok(summary)
}

fn sft(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    let mut model = load_model(run, "pretrained", &cfg.paths.pretrained.clone(), &tok)?;
    run.input("sft_data", &cfg.paths.sft_data)?;
    let data: Vec<InstructionSample> = read_jsonl(&cfg.paths.sft_data)?;
    let s = &cfg.sft;
    let hp = SftHparams {
        epochs: s.epochs,
        batch_size: s.hyper.batch_size,
        max_len: s.hyper.max_len,
        seed: cfg.seeds().split("sft").seed(),
        weights: s.weights,
        train: s.hyper.train(),
    };
    let mut opt = AdamWState::new();
    let result = train_sft(&mut model, &mut opt, &data, &tok, &hp);
    let log = abort_guard(result, run, "sft/aborted.ckpt", || Checkpoint::from_model("lm", &model, opt.step))?;
    let mut ck = Checkpoint::from_model("lm", &model, opt.step);
    ck.optimizers.insert("adamw".into(), opt.clone());
    cfg.paths.sft_model = Some(run.save_checkpoint("sft/model.ckpt", &ck)?);
    run.write_jsonl("sft/steps.jsonl", &log.steps)?;
    let summary = json!({
        "samples": data.len(),
        "steps": log.steps.len(),
        "skipped": log.skipped,
        "initial_loss": log.steps.first().map(|s| s.loss),
        "final_loss": log.steps.last().map(|s| s.loss),
    });
    run.write_json("sft/report.json", &summary)?;
    Ok(summary)
}

fn rm_train(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    let lm = load_model(run, "sft_model", &cfg.paths.sft_model.clone(), &tok)?;
    run.input("preferences", &cfg.paths.preferences)?;
    let pairs: Vec<PreferencePair> = read_jsonl(&cfg.paths.preferences)?;
    let r = &cfg.rm;
    let seeds = cfg.seeds().split("rm");
    let mut rm = RewardModel::from_lm(&lm, &tok, seeds.split("head").seed(), r.bottleneck)?;
    let hp = RmHparams {
        epochs: r.epochs,
        batch_size: r.hyper.batch_size,
        seed: seeds.split("train").seed(),
        held_out_modulus: r.held_out_modulus,
        train: r.hyper.train(),
    };
    let mut opts = [AdamWState::new(), AdamWState::new()];
    let result = train_rm(&mut rm, &mut opts, &tok, &pairs, &hp);
    let log = abort_guard(result, run, "rm/aborted.ckpt", || rm.to_checkpoint(0))?;
    let mut ck = rm.to_checkpoint(opts[0].step);
    ck.optimizers.insert("trunk".into(), opts[0].clone());
    ck.optimizers.insert("head".into(), opts[1].clone());
    cfg.paths.reward_model = Some(run.save_checkpoint("rm/model.ckpt", &ck)?);
    run.write_jsonl("rm/steps.jsonl", &log.steps)?;
    let summary = json!({
        "train_pairs": log.train_pairs,
        "held_out_pairs": log.held_out_pairs,
        "initial_loss": log.steps.first().map(|s| s.loss),
        "final_loss": log.steps.last().map(|s| s.loss),
        "initial_accuracy": log.initial_accuracy,
        "held_out_accuracy": log.held_out_accuracy,
    });
    run.write_json("rm/report.json", &summary)?;
    Ok(summary)
}

fn params_hash(m: &Model) -> Result<String> {
    Ok(sha256_hex(&Checkpoint::from_model("lm", m, 0).to_bytes()?))
}

fn ppo(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    let reference = load_model(run, "sft_model", &cfg.paths.sft_model.clone(), &tok)?;
    let rp = path(&cfg.paths.reward_model, "paths.reward_model")?;
    run.input("reward_model", &rp)?;
    let rm = RewardModel::from_checkpoint(&Checkpoint::load(&rp)?)?;
    let texts = read_lines(run, "ppo_prompts", &cfg.paths.ppo_prompts.clone())?;
    let prompts = texts.iter().map(|t| format_prompt(&tok, t)).collect::<pharmakit::Result<Vec<_>>>()?;
    let pcfg = cfg.ppo.ppo_config(cfg.seeds().split("ppo").seed());
    let every = cfg.ppo.checkpoint_every;

    let ref_before = params_hash(&reference)?;
    let mut actor = reference.clone();
    let mut critic = Critic::from_rm(&rm);
    let mut opts = PpoOptimizers::default();
    let tokens = PolicyTokens { pad: tok.pad(), stop: Some(tok.eos()) };
    let mut logs: Vec<IterationLog> = Vec::new();
    let mut periodic = Vec::new();
    let result = rlhf_train(&mut actor, &reference, &mut critic, &mut opts, &rm, &prompts, &pcfg, tokens, &mut |i, m, l| {
        logs.push(l.clone());
        if every > 0 && (i + 1) % every == 0 {
            periodic.push((format!("ppo/policy-iter{:04}.ckpt", i + 1), Checkpoint::from_model("lm", m, i as u64 + 1)));
        }
        Ok(())
    });
    for (rel, ck) in &periodic {
        run.save_checkpoint(rel, ck)?;
    }
    run.write_jsonl("ppo/iterations.jsonl", &logs)?;
    let log = abort_guard(result, run, "ppo/aborted.ckpt", || Checkpoint::from_model("lm", &actor, logs.len() as u64))?;
    let mut ck = Checkpoint::from_model("lm", &actor, log.iterations.len() as u64);
    ck.optimizers.insert("actor".into(), opts.actor.clone());
    cfg.paths.policy = Some(run.save_checkpoint("ppo/policy.ckpt", &ck)?);
    let mut critic_ck = Checkpoint::from_model("critic", &critic.trunk, log.iterations.len() as u64);
    critic_ck.extra = critic.head.clone();
    run.save_checkpoint("ppo/critic.ckpt", &critic_ck)?;
    let reference_unchanged = params_hash(&reference)? == ref_before;
    if !reference_unchanged {
        bail!("reference policy changed during PPO");
    }
    let summary = json!({
        "iterations": log.iterations.len(),
        "first_mean_reward": log.iterations.first().map(|l| l.mean_reward),
        "last_mean_reward": log.iterations.last().map(|l| l.mean_reward),
        "first_epoch_clip_fraction": log.iterations.iter().map(|l| l.clip_fraction).collect::<Vec<_>>(),
        "rejected_updates": log.iterations.iter().filter(|l| l.rejected).count(),
        "reference_unchanged": reference_unchanged,
    });
    run.write_json("ppo/report.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineBand {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExamFile {
    pub baseline: BaselineBand,
    /// Trained checkpoints in pipeline order.
    pub runs: Vec<(String, ExamReport)>,
}

fn eval_exam(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    run.input("exam", &cfg.paths.exam)?;
    let items: Vec<ExamItem> = read_jsonl(&cfg.paths.exam)?;
    let bseeds = cfg.seeds().split("eval-baseline");
    let mut seeds = Vec::new();
    let mut accuracies = Vec::new();
    for i in 0..cfg.eval.baseline_seeds as u64 {
        let mut mc = cfg.model_config(tok.vocab_size());
        mc.seed = bseeds.split_index(i).seed();
        let r = score_exam(&Model::new(mc)?, &items, &tok)?;
        seeds.push(mc.seed);
        accuracies.push(r.overall.accuracy);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let baseline = BaselineBand {
        seeds,
        mean,
        min: accuracies.iter().copied().fold(f64::INFINITY, f64::min),
        max: accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        accuracies,
    };
    let mut runs = Vec::new();
    for (label, p) in [("pretrained", cfg.paths.pretrained.clone()), ("sft", cfg.paths.sft_model.clone()), ("ppo", cfg.paths.policy.clone())] {
        if p.is_none() {
            continue;
        }
        let model = load_model(run, label, &p, &tok)?;
        runs.push((label.to_string(), score_exam(&model, &items, &tok)?));
    }
    let file = ExamFile { baseline, runs };
    cfg.paths.exam_report = Some(run.write_json("eval/exam.json", &file)?);
    Ok(json!({
        "items": items.len(),
        "baseline_mean": file.baseline.mean,
        "baseline_range": [file.baseline.min, file.baseline.max],
        "accuracy": file.runs.iter().map(|(l, r)| (l.clone(), r.overall.accuracy)).collect::<BTreeMap<_, _>>(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuFile {
    pub model: String,
    pub candidates: Vec<String>,
    pub report: BleuReport,
}

fn eval_bleu(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let tok = load_tokenizer(cfg, run)?;
    let model = load_model(run, "sft_model", &cfg.paths.sft_model.clone(), &tok)?;
    run.input("translations", &cfg.paths.translations)?;
    let items: Vec<TranslationItem> = read_jsonl(&cfg.paths.translations)?;
    let candidates = translate(&model, &tok, &items, cfg.eval.translate_max_new)?;
    let report = score_translations(&items, &candidates, cfg.eval.bleu_tokenization, cfg.eval.bleu_max_n)?;
    let summary = json!({ "items": items.len(), "by_granularity": report.by_granularity });
    let file = BleuFile { model: "sft".into(), candidates, report };
    cfg.paths.bleu_report = Some(run.write_json("eval/bleu.json", &file)?);
    Ok(summary)
}

fn report_stage(cfg: &mut Config, run: &mut Run) -> Result<Value> {
    let mut results = EvalResults::default();
    let mut baseline = None;
    if let Some(p) = cfg.paths.exam_report.clone() {
        run.input("exam_report", &p)?;
        let f: ExamFile = read_json(&p)?;
        results.exams = f.runs;
        baseline = Some(f.baseline);
    }
    if let Some(p) = cfg.paths.bleu_report.clone() {
        run.input("bleu_report", &p)?;
        let f: BleuFile = read_json(&p)?;
        results.bleu = Some(f.report);
    }
    let reference = match cfg.paths.reference.clone() {
        Some(p) => {
            run.input("reference", &p)?;
            read_json(&p).with_context(|| format!("reading reference table {}", p.display()))?
        }
        None => ReferenceTable::default(),
    };
    let rep = report(&results, &reference);
    let mut text = rep.text;
    let mut json = rep.json;
    if let Some(b) = &baseline {
        text.push_str(&format!(
            "\nUntrained baseline over {} seeds: mean {:.1}%, range {:.1}-{:.1}%\n",
            b.seeds.len(),
            100.0 * b.mean,
            100.0 * b.min,
            100.0 * b.max
        ));
        json["baseline"] = serde_json::to_value(b)?;
    }
    run.write_text("report/report.txt", &text)?;
    run.write_json("report/report.json", &json)?;
    Ok(json!({ "warnings": json["warnings"], "monotonic": json["monotonic"] }))
}
