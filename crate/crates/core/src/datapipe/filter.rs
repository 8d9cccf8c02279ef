use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{CorpusDocument, Language};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityParams {
    pub min_chars: usize,
    /// Share of characters that are neither alphanumeric nor whitespace.
    pub max_symbol_ratio: f64,
    /// `1 - distinct/total` over whitespace-separated words.
    pub max_repeat_ratio: f64,
    pub lang_allowlist: Vec<Language>,
}

impl Default for QualityParams {
    fn default() -> Self {
        Self { min_chars: 100, max_symbol_ratio: 0.3, max_repeat_ratio: 0.5, lang_allowlist: vec![Language::Zh, Language::En] }
    }
}

impl QualityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("max_symbol_ratio", self.max_symbol_ratio), ("max_repeat_ratio", self.max_repeat_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    MalformedUtf8,
    TooShort,
    Language,
    SymbolRatio,
    RepeatRatio,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::MalformedUtf8 => "malformed_utf8",
            DropReason::TooShort => "too_short",
            DropReason::Language => "language",
            DropReason::SymbolRatio => "symbol_ratio",
            DropReason::RepeatRatio => "repeat_ratio",
        }
    }
}

pub fn symbol_ratio(text: &str) -> f64 {
    let (mut sym, mut total) = (0usize, 0usize);
    for c in text.chars() {
        total += 1;
        if !c.is_alphanumeric() && !c.is_whitespace() {
            sym += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        sym as f64 / total as f64
    }
}

pub fn repeat_ratio(text: &str) -> f64 {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&str> = words.iter().copied().collect();
    1.0 - distinct.len() as f64 / words.len() as f64
}

/// First failing rule of the cascade, or `None` to keep.
///
/// Text read through the lossy JSONL loader carries U+FFFD where the source
/// bytes were not UTF-8; that is the malformed-input rule.
pub fn quality_filter(doc: &CorpusDocument, p: &QualityParams) -> Option<DropReason> {
    let text = &doc.text;
    if text.contains('\u{FFFD}') {
        Some(DropReason::MalformedUtf8)
    } else if text.chars().count() < p.min_chars {
        Some(DropReason::TooShort)
    } else if !p.lang_allowlist.contains(&doc.language) {
        Some(DropReason::Language)
    } else if symbol_ratio(text) > p.max_symbol_ratio {
        Some(DropReason::SymbolRatio)
    } else if repeat_ratio(text) > p.max_repeat_ratio {
        Some(DropReason::RepeatRatio)
    } else {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    /// `(id, reason)` for every dropped document, in input order.
    pub drops: Vec<(String, DropReason)>,
}

impl FilterReport {
    pub fn record(&mut self, id: &str, verdict: Option<DropReason>) {
        match verdict {
            None => self.kept += 1,
            Some(r) => {
                *self.dropped.entry(r).or_insert(0) += 1;
                self.drops.push((id.to_string(), r));
            }
        }
    }

    pub fn total(&self) -> usize {
        self.kept + self.dropped.values().sum::<usize>()
    }
}
