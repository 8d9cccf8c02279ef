use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusDocument;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<CorpusDocument>,
    /// `(dropped id, id of the earlier kept document it duplicates)`.
    pub removed: Vec<(String, String)>,
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First occurrence of each whitespace-normalized text survives.
pub fn dedup_exact(docs: Vec<CorpusDocument>) -> DedupOutcome {
    let mut seen: HashMap<[u8; 32], String> = HashMap::new();
    let mut kept = Vec::with_capacity(docs.len());
    let mut removed = Vec::new();
    for d in docs {
        let key: [u8; 32] = Sha256::digest(normalize_whitespace(&d.text).as_bytes()).into();
        match seen.get(&key) {
            Some(first) => removed.push((d.id, first.clone())),
            None => {
                seen.insert(key, d.id.clone());
                kept.push(d);
            }
        }
    }
    DedupOutcome { kept, removed }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearDupParams {
    pub shingle_k: usize,
    pub jaccard_threshold: f64,
}

impl Default for NearDupParams {
    fn default() -> Self {
        Self { shingle_k: 5, jaccard_threshold: 0.8 }
    }
}

impl NearDupParams {
    pub fn validate(&self) -> Result<()> {
        if self.shingle_k == 0 {
            return Err(Error::invalid("shingle_k must be at least 1"));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(Error::invalid(format!("jaccard_threshold must lie in (0, 1], got {}", self.jaccard_threshold)));
        }
        Ok(())
    }
}

/// Word k-shingles; a document shorter than `k` words is a single shingle.
pub fn shingles(text: &str, k: usize) -> HashSet<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= k {
        return std::iter::once(words.join(" ")).collect();
    }
    words.windows(k).map(|w| w.join(" ")).collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|s| large.contains(*s)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy scan: a document is dropped when its exact shingle Jaccard with any
/// earlier kept document reaches the threshold.
pub fn dedup_near(docs: Vec<CorpusDocument>, p: &NearDupParams) -> Result<DedupOutcome> {
    p.validate()?;
    let mut kept: Vec<CorpusDocument> = Vec::with_capacity(docs.len());
    let mut kept_sets: Vec<HashSet<String>> = Vec::new();
    let mut removed = Vec::new();
    for d in docs {
        let s = shingles(&d.text, p.shingle_k);
        // |A∩B|/|A∪B| <= min/max, which rules most pairs out without a set scan
        let dup = kept_sets.iter().position(|k| {
            let (lo, hi) = (k.len().min(s.len()), k.len().max(s.len()));
            lo as f64 >= p.jaccard_threshold * hi as f64 && jaccard(k, &s) >= p.jaccard_threshold
        });
        match dup {
            Some(i) => removed.push((d.id, kept[i].id.clone())),
            None => {
                kept_sets.push(s);
                kept.push(d);
            }
        }
    }
    Ok(DedupOutcome { kept, removed })
}
