//! Multiple-choice exam scoring, sentence BLEU, and comparison reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, GenerateParams, Model};
use crate::sft::format_prompt;
use crate::tensor::{Binder, Float};
use crate::tokenizer::TokenizerModel;

/// Smoothing numerator for n-gram orders with no clipped matches.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const REFERENCE_LABEL: &str = "published reference, not reproduced";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamItem {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub section: String,
}

impl ExamItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::invalid(format!("exam item needs >= 2 options, got {}", self.options.len())));
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::invalid(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            )));
        }
        Ok(())
    }
}

/// Anything that can score continuations of a prompt token by token.
pub trait LikelihoodModel {
    fn max_len(&self) -> usize;
    /// Per-token log-probs of each continuation given `prompt`.
    fn continuation_log_probs(&self, prompt: &[u32], continuations: &[Vec<u32>]) -> Result<Vec<Vec<Float>>>;
}

impl LikelihoodModel for Model {
    fn max_len(&self) -> usize {
        self.config().max_len
    }

    /// All continuations share one left-padded batch.
    fn continuation_log_probs(&self, prompt: &[u32], continuations: &[Vec<u32>]) -> Result<Vec<Vec<Float>>> {
        let seqs: Vec<Vec<u32>> = continuations.iter().map(|c| [prompt, c.as_slice()].concat()).collect();
        let batch = Batch::left_padded(&seqs, 0)?;
        let t = batch.seq_len();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, c) in continuations.iter().enumerate() {
            let start = b * t + (t - prompt.len() - c.len()) + prompt.len() - 1;
            rows.extend((0..c.len()).map(|i| start + i));
            targets.extend(c.iter().map(|&id| id as usize));
        }
        let lp = self.forward(&Binder::frozen(self.params()), &batch)?.gather_rows(&rows)?.log_softmax()?.pick(&targets)?;
        let mut at = 0;
        Ok(continuations
            .iter()
            .map(|c| {
                let part = lp.data()[at..at + c.len()].to_vec();
                at += c.len();
                part
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub section: String,
    pub answer_index: usize,
    pub predicted: Option<usize>,
    pub correct: bool,
    /// Mean per-token log-prob of each option.
    pub option_scores: Vec<Float>,
    pub unscorable: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SectionScore {
    pub total: usize,
    pub scored: usize,
    pub unscorable: usize,
    pub correct: usize,
    /// `correct / scored`; 0 when nothing was scorable.
    pub accuracy: Float,
}

impl SectionScore {
    fn add(&mut self, r: &ItemRecord) {
        self.total += 1;
        if r.unscorable.is_some() {
            self.unscorable += 1;
        } else {
            self.scored += 1;
            self.correct += r.correct as usize;
        }
        self.accuracy = if self.scored == 0 { 0.0 } else { self.correct as Float / self.scored as Float };
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamReport {
    pub overall: SectionScore,
    pub sections: BTreeMap<String, SectionScore>,
    pub records: Vec<ItemRecord>,
}

/// The prompt is `BOS question SEP`; each option is scored as `option EOS`
/// by mean token log-probability. Ties go to the lowest option index.
pub fn score_exam(model: &dyn LikelihoodModel, items: &[ExamItem], tok: &TokenizerModel) -> Result<ExamReport> {
    let mut report = ExamReport::default();
    for (index, item) in items.iter().enumerate() {
        item.validate()?;
        let prompt = format_prompt(tok, &item.question)?;
        let options: Vec<Vec<u32>> = item
            .options
            .iter()
            .map(|o| tok.encode(o).into_iter().chain(std::iter::once(tok.eos())).collect())
            .collect();
        let longest = options.iter().map(Vec::len).max().unwrap_or(0) + prompt.len();
        let mut record = ItemRecord {
            index,
            section: item.section.clone(),
            answer_index: item.answer_index,
            predicted: None,
            correct: false,
            option_scores: Vec::new(),
            unscorable: None,
        };
        if longest > model.max_len() {
            record.unscorable = Some(format!("{longest} tokens exceed max_len {}", model.max_len()));
        } else {
            let lps = model.continuation_log_probs(&prompt, &options)?;
            record.option_scores = lps.iter().map(|lp| lp.iter().sum::<Float>() / lp.len() as Float).collect();
            let pred = argmax_first(&record.option_scores);
            record.predicted = Some(pred);
            record.correct = pred == item.answer_index;
        }
        report.overall.add(&record);
        report.sections.entry(item.section.clone()).or_default().add(&record);
        report.records.push(record);
    }
    Ok(report)
}

fn argmax_first(xs: &[Float]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Paragraph,
    Sentence,
    Word,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Paragraph, Granularity::Sentence, Granularity::Word];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Paragraph => "paragraph",
            Granularity::Sentence => "sentence",
            Granularity::Word => "word",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationItem {
    pub source: String,
    pub references: Vec<String>,
    pub granularity: Granularity,
}

impl TranslationItem {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.references.is_empty() || self.references.iter().any(String::is_empty) {
            return Err(Error::invalid("translation items need a source and non-empty references"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuTokenization {
    #[default]
    Whitespace,
    /// One token per non-whitespace character, for unsegmented scripts.
    Char,
}

impl BleuTokenization {
    pub fn tokenize(self, s: &str) -> Vec<String> {
        match self {
            BleuTokenization::Whitespace => s.split_whitespace().map(str::to_string).collect(),
            BleuTokenization::Char => s.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

fn ngram_counts<'a>(toks: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate total for order `n`.
pub fn modified_precision(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU over pre-tokenized text.
///
/// Orders run to `min(max_n, |candidate|)`; an order with zero clipped
/// matches uses [`BLEU_EPSILON`] as its numerator. The brevity penalty uses
/// the reference length closest to the candidate (shorter on ties).
pub fn bleu_tokens(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let c = candidate.len();
    let order = max_n.min(c);
    let mut log_sum = 0.0;
    for n in 1..=order {
        let (m, total) = modified_precision(candidate, references, n);
        let num = if m == 0 { BLEU_EPSILON } else { m as f64 };
        log_sum += (num / total as f64).ln();
    }
    let r = references.iter().map(Vec::len).min_by_key(|&l| (l.abs_diff(c), l)).expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / order as f64).exp()
}

pub fn bleu<S: AsRef<str>>(candidate: &str, references: &[S], max_n: usize, tokenization: BleuTokenization) -> f64 {
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenization.tokenize(r.as_ref())).collect();
    bleu_tokens(&tokenization.tokenize(candidate), &refs, max_n)
}

/// Greedy model translations, one per item.
pub fn translate(model: &Model, tok: &TokenizerModel, items: &[TranslationItem], max_new: usize) -> Result<Vec<String>> {
    items
        .iter()
        .map(|it| {
            let prompt = format_prompt(tok, &it.source)?;
            if prompt.len() >= model.config().max_len {
                return Ok(String::new());
            }
            let params = GenerateParams { max_new, stop: Some(tok.eos()), ..GenerateParams::default() };
            let out = model.generate(&prompt, &params)?;
            let body: Vec<u32> = out.into_iter().filter(|&t| !tok.is_special(t)).collect();
            Ok(tok.decode(&body))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuSummary {
    pub items: usize,
    /// Mean sentence BLEU scaled to 0..100.
    pub mean_bleu: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub tokenization: BleuTokenization,
    pub max_n: usize,
    pub by_granularity: BTreeMap<Granularity, BleuSummary>,
    pub scores: Vec<f64>,
}

pub fn score_translations(
    items: &[TranslationItem],
    candidates: &[String],
    tokenization: BleuTokenization,
    max_n: usize,
) -> Result<BleuReport> {
    if items.len() != candidates.len() {
        return Err(Error::invalid(format!("{} items but {} candidates", items.len(), candidates.len())));
    }
    let mut report = BleuReport { tokenization, max_n, ..Default::default() };
    let mut sums: BTreeMap<Granularity, (usize, f64)> = BTreeMap::new();
    for (it, cand) in items.iter().zip(candidates) {
        it.validate()?;
        let s = bleu(cand, &it.references, max_n, tokenization);
        let e = sums.entry(it.granularity).or_default();
        e.0 += 1;
        e.1 += s;
        report.scores.push(s);
    }
    report.by_granularity =
        sums.into_iter().map(|(g, (n, s))| (g, BleuSummary { items: n, mean_bleu: 100.0 * s / n as f64 })).collect();
    Ok(report)
}

/// Published comparison numbers; display-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    /// Model version → NAPLEX I/II/III percentages.
    pub naplex: Vec<(String, [f64; 3])>,
    pub bleu: BTreeMap<Granularity, f64>,
    pub exam_range_note: String,
}

impl Default for ReferenceTable {
    fn default() -> Self {
        Self {
            naplex: vec![
                ("0.1".into(), [5.0, 2.5, 3.5]),
                ("0.3".into(), [42.0, 48.0, 46.5]),
                ("0.5".into(), [57.0, 59.0, 58.0]),
                ("0.7".into(), [66.0, 68.0, 76.0]),
            ],
            bleu: [(Granularity::Paragraph, 30.0), (Granularity::Sentence, 18.0), (Granularity::Word, 10.0)]
                .into_iter()
                .collect(),
            exam_range_note: "70-80%".into(),
        }
    }
}

pub const NAPLEX_SECTIONS: [&str; 3] = ["NAPLEX I", "NAPLEX II", "NAPLEX III"];

/// Local results to report; `exams` is a sweep ordered by model size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub exams: Vec<(String, ExamReport)>,
    pub bleu: Option<BleuReport>,
}

/// Per section, whether accuracy never decreases along the sweep. Sections
/// missing from any run are left out.
pub fn monotonicity(exams: &[(String, ExamReport)]) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    if exams.len() < 2 {
        return out;
    }
    for section in exams[0].1.sections.keys() {
        let accs: Option<Vec<Float>> = exams.iter().map(|(_, r)| r.sections.get(section).map(|s| s.accuracy)).collect();
        if let Some(a) = accs {
            out.insert(section.clone(), a.windows(2).all(|w| w[1] >= w[0]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
}

pub fn report(results: &EvalResults, reference: &ReferenceTable) -> Report {
    let mut t = String::new();
    let mut warnings = Vec::new();
    let _ = writeln!(t, "Evaluation report");
    let _ = writeln!(t, "exam protocol: mean per-token log-likelihood of `option EOS`, argmax, ties to lowest index");
    if let Some(b) = &results.bleu {
        let _ = writeln!(
            t,
            "bleu: sentence level, orders 1..={} capped at candidate length, epsilon {:e} on zero matches, {:?} tokens",
            b.max_n, BLEU_EPSILON, b.tokenization
        );
    }
    if results.exams.is_empty() && results.bleu.is_none() {
        warnings.push("no local results; only reference columns are shown".to_string());
    }
    for w in &warnings {
        let _ = writeln!(t, "WARNING: {w}");
    }

    let _ = writeln!(t, "\nExam accuracy (%)");
    let mut header = format!("{:<28}", "run");
    for s in NAPLEX_SECTIONS {
        let _ = write!(header, "{s:>12}");
    }
    let _ = writeln!(t, "{header}{:>12}{:>12}", "overall", "unscorable");
    for (label, r) in &results.exams {
        let mut row = format!("{:<28}", format!("local {label}"));
        for s in NAPLEX_SECTIONS {
            match r.sections.get(s) {
                Some(sc) => {
                    let _ = write!(row, "{:>12.1}", 100.0 * sc.accuracy);
                }
                None => {
                    let _ = write!(row, "{:>12}", "-");
                }
            }
        }
        let _ = writeln!(t, "{row}{:>12.1}{:>12}", 100.0 * r.overall.accuracy, r.overall.unscorable);
    }
    for (version, v) in &reference.naplex {
        let _ = writeln!(
            t,
            "{:<28}{:>12.1}{:>12.1}{:>12.1}   [{REFERENCE_LABEL}]",
            format!("published v{version}"),
            v[0],
            v[1],
            v[2]
        );
    }
    let _ = writeln!(t, "reference exam range: {} [{REFERENCE_LABEL}]", reference.exam_range_note);

    let mono = monotonicity(&results.exams);
    if !mono.is_empty() {
        let _ = writeln!(t, "\nScaling trend (accuracy non-decreasing with size)");
        for (s, ok) in &mono {
            let _ = writeln!(t, "  {s}: {ok}");
        }
    }

    let _ = writeln!(t, "\nBLEU (0-100)");
    for g in Granularity::ALL {
        let local = results.bleu.as_ref().and_then(|b| b.by_granularity.get(&g)).map(|s| format!("{:.2}", s.mean_bleu));
        let published = reference.bleu.get(&g).map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            t,
            "  {:<10} local {:>8}   published {:>6} [{REFERENCE_LABEL}]",
            g.as_str(),
            local.unwrap_or_else(|| "-".into()),
            published
        );
    }

    let json = serde_json::json!({
        "warnings": warnings,
        "local": results,
        "monotonic": mono,
        "reference": { "label": REFERENCE_LABEL, "table": reference },
    });
    Report { text: t, json }
}

#[cfg(test)]
mod tests;
