//! Corpus cleaning: quality filter, exact then near dedup, PII redaction.

mod dedup;
mod filter;
mod pii;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use dedup::{dedup_exact, dedup_near, jaccard, normalize_whitespace, shingles, DedupOutcome, NearDupParams};
pub use filter::{quality_filter, DropReason, FilterReport, QualityParams};
pub use pii::{PiiRule, PiiRuleset, Redaction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Web,
    News,
    Patents,
    Papers,
    Books,
    Chats,
    Exams,
    Codes,
    ResearchReports,
    Supervised,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Web,
        Category::News,
        Category::Patents,
        Category::Papers,
        Category::Books,
        Category::Chats,
        Category::Exams,
        Category::Codes,
        Category::ResearchReports,
        Category::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Web => "web",
            Category::News => "news",
            Category::Patents => "patents",
            Category::Papers => "papers",
            Category::Books => "books",
            Category::Chats => "chats",
            Category::Exams => "exams",
            Category::Codes => "codes",
            Category::ResearchReports => "research-reports",
            Category::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDocument {
    pub id: String,
    pub category: Category,
    pub language: Language,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl CorpusDocument {
    pub fn new(id: impl Into<String>, category: Category, language: Language, text: impl Into<String>) -> Self {
        Self { id: id.into(), category, language, text: text.into(), meta: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub quality: QualityParams,
    #[serde(default)]
    pub near_dup: NearDupParams,
    /// Empty selects the default email/phone/id rules.
    #[serde(default)]
    pub pii_rules: Vec<PiiRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input: usize,
    pub quality: FilterReport,
    pub exact_duplicates: Vec<(String, String)>,
    pub near_duplicates: Vec<(String, String)>,
    pub pii_matches: BTreeMap<String, usize>,
    pub output: usize,
}

/// The fixed stage order; output depends only on input order and config.
pub fn run_pipeline(docs: Vec<CorpusDocument>, cfg: &PipelineConfig) -> Result<(Vec<CorpusDocument>, PipelineReport)> {
    cfg.quality.validate()?;
    cfg.near_dup.validate()?;
    let rules = if cfg.pii_rules.is_empty() { PiiRuleset::default_rules() } else { PiiRuleset::new(cfg.pii_rules.clone())? };
    let input = docs.len();
    let mut kept = Vec::with_capacity(docs.len());
    let mut quality = FilterReport::default();
    for d in docs {
        let verdict = quality_filter(&d, &cfg.quality);
        quality.record(&d.id, verdict);
        if verdict.is_none() {
            kept.push(d);
        }
    }
    let exact = dedup_exact(kept);
    let near = dedup_near(exact.kept, &cfg.near_dup)?;
    let mut out = near.kept;
    let mut pii_matches = BTreeMap::new();
    for d in &mut out {
        let r = rules.redact(&d.text);
        for (name, n) in r.counts {
            *pii_matches.entry(name).or_insert(0) += n;
        }
        d.text = r.text;
    }
    let report = PipelineReport {
        input,
        quality,
        exact_duplicates: exact.removed,
        near_duplicates: near.removed,
        pii_matches,
        output: out.len(),
    };
    Ok((out, report))
}
