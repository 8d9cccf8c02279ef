//! Writes the shipped fixture set and the desk-scale config that runs on it.

use std::path::Path;

use anyhow::Result;
use serde_json::{json, Value};

use pharmakit::eval::ReferenceTable;
use pharmakit::fixtures as fx;
use pharmakit::io::{write_json, write_jsonl};

pub const DESK_CONFIG: &str = "desk.json";

/// Returns the written file names.
pub fn write_all(dir: &Path, seed: u64) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut put = |name: &str, r: Result<()>| -> Result<()> {
        r?;
        names.push(name.to_string());
        Ok(())
    };
    put("corpus.jsonl", write_jsonl(&dir.join("corpus.jsonl"), &fx::raw_corpus(seed)).map_err(Into::into))?;
    put("general_text.jsonl", write_jsonl(&dir.join("general_text.jsonl"), &fx::general_corpus(200, 1)).map_err(Into::into))?;
    put("domain_text.jsonl", write_jsonl(&dir.join("domain_text.jsonl"), &fx::domain_corpus(300, 2)).map_err(Into::into))?;
    put("sft.jsonl", write_jsonl(&dir.join("sft.jsonl"), &fx::sft_samples(seed)).map_err(Into::into))?;
    put("preferences.jsonl", write_jsonl(&dir.join("preferences.jsonl"), &fx::preference_pairs(200, 3)).map_err(Into::into))?;
    put("ppo_prompts.jsonl", write_jsonl(&dir.join("ppo_prompts.jsonl"), &fx::ppo_prompts()).map_err(Into::into))?;
    put("exam.jsonl", write_jsonl(&dir.join("exam.jsonl"), &fx::exam_items()).map_err(Into::into))?;
    put("translations.jsonl", write_jsonl(&dir.join("translations.jsonl"), &fx::translation_items()).map_err(Into::into))?;
    put("reference.json", write_json(&dir.join("reference.json"), &ReferenceTable::default()).map_err(Into::into))?;
    put(DESK_CONFIG, write_json(&dir.join(DESK_CONFIG), &desk_config()).map_err(Into::into))?;
    Ok(names)
}

fn hyper(batch: usize, min_lr: f64, max_lr: f64, max_len: usize, warmup: u64) -> Value {
    json!({
        "batch_size": batch,
        "global_batch": batch,
        "min_lr": min_lr,
        "max_lr": max_lr,
        "max_len": max_len,
        "warmup_steps": warmup,
        "grad_clip": 1.0,
        "weight_decay": 0.0,
    })
}

/// About 100k parameters; stage budgets in the 153:43 ratio at 1k-token scale.
pub fn desk_config() -> Value {
    json!({
        "seed": 7,
        "paths": {
            "corpus": "corpus.jsonl",
            "general_text": "general_text.jsonl",
            "domain_text": "domain_text.jsonl",
            "sft_data": "sft.jsonl",
            "preferences": "preferences.jsonl",
            "ppo_prompts": "ppo_prompts.jsonl",
            "exam": "exam.jsonl",
            "translations": "translations.jsonl",
            "reference": "reference.json",
        },
        "datapipe": {},
        "tokenizer": {
            "base_vocab": 300,
            "target_vocab": 450,
            "extra_specials": ["sep"],
            "domain_categories": ["papers"],
        },
        "model": { "hidden": 48, "layers": 2, "heads": 4, "max_len": 64 },
        "pretrain": {
            "hyper": hyper(8, 1e-3, 1e-2, 64, 10),
            "stage1": { "token_budget": 153_000, "mixture": { "web": 0.5, "papers": 0.5 } },
            "stage2": { "token_budget": 43_000, "mixture": { "web": 0.1, "papers": 0.9 } },
        },
        "sft": { "epochs": 20, "hyper": hyper(16, 1e-4, 3e-3, 64, 10), "weights": { "expert": 1.0, "generic": 0.1 } },
        "rm": { "epochs": 12, "hyper": hyper(16, 1e-4, 3e-3, 64, 10), "held_out_modulus": 5 },
        "ppo": {
            "clip_eps": 0.2,
            "kl_coef": 0.02,
            "gamma": 1.0,
            "lam": 0.95,
            "k": 4,
            "epochs": 2,
            "lr": 1e-5,
            "critic_lr": 1e-4,
            "grad_clip": 1.0,
            "iterations": 4,
            "prompts_per_iteration": 8,
            "max_new": 12,
            "temperature": 1.0,
            "top_k": 0,
            "checkpoint_every": 2,
        },
        "eval": { "baseline_seeds": 10, "bleu_max_n": 4, "bleu_tokenization": "whitespace", "translate_max_new": 24 },
    })
}
