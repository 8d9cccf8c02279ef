//! Byte-level BPE: training, base+domain merging, encoding.
//!
//! Ids `0..256` are the raw bytes, so every UTF-8 string (and every byte
//! string) encodes. Token strings use the usual printable byte-to-char
//! mapping so that the vocabulary serializes as plain JSON strings.
//! Whitespace is an ordinary byte: there is no pre-tokenization split.

mod bytes;
mod train;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::train_bpe;

pub const BYTE_TOKENS: usize = 256;
pub const FORMAT_VERSION: u32 = 1;

pub const BOS: &str = "bos";
pub const EOS: &str = "eos";
pub const PAD: &str = "pad";
pub const SEP: &str = "sep";

/// Names every tokenizer must define, in id order after the byte block.
pub const REQUIRED_SPECIALS: [&str; 3] = [BOS, EOS, PAD];

pub fn special_string(name: &str) -> String {
    format!("<|{name}|>")
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    special: BTreeMap<String, u32>,
    index: HashMap<String, u32>,
    special_ids: HashSet<u32>,
    /// (left, right) → (priority, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    vocab: Vec<String>,
    merges: Vec<[String; 2]>,
    special: BTreeMap<String, u32>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.merges == other.merges && self.special == other.special
    }
}

impl TokenizerModel {
    /// Assembles and validates a tokenizer from its serialized parts.
    pub fn from_parts(
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
        special: BTreeMap<String, u32>,
    ) -> Result<Self> {
        if vocab.len() < BYTE_TOKENS {
            return Err(Error::Tokenizer("vocabulary smaller than the byte block".into()));
        }
        for (b, tok) in vocab.iter().take(BYTE_TOKENS).enumerate() {
            if *tok != bytes::byte_token(b as u8) {
                return Err(Error::Tokenizer(format!("id {b} is not the byte-fallback token")));
            }
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {tok:?}")));
            }
        }
        for name in REQUIRED_SPECIALS {
            if !special.contains_key(name) {
                return Err(Error::Tokenizer(format!("missing special token {name:?}")));
            }
        }
        let mut special_ids = HashSet::new();
        for (name, &id) in &special {
            if vocab.get(id as usize) != Some(&special_string(name)) {
                return Err(Error::SpecialTokenConflict(name.clone()));
            }
            special_ids.insert(id);
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut produced: HashSet<u32> = (0..BYTE_TOKENS as u32).collect();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index.get(s).copied().ok_or_else(|| Error::Tokenizer(format!("merge references unknown token {s:?}")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            if special_ids.contains(&li) || special_ids.contains(&ri) || special_ids.contains(&merged) {
                return Err(Error::Tokenizer(format!("merge ({l:?}, {r:?}) touches a special token")));
            }
            if !produced.contains(&li) || !produced.contains(&ri) {
                return Err(Error::Tokenizer(format!("merge ({l:?}, {r:?}) uses a token before it exists")));
            }
            produced.insert(merged);
            ranks.entry((li, ri)).or_insert((rank, merged));
        }
        for (i, tok) in vocab.iter().enumerate() {
            let id = i as u32;
            if !produced.contains(&id) && !special_ids.contains(&id) {
                return Err(Error::Tokenizer(format!("token {tok:?} is unreachable from bytes")));
            }
        }
        Ok(Self { vocab, merges, special, index, special_ids, ranks })
    }

    /// A tokenizer with only the byte block and the given specials.
    pub fn byte_level(extra_specials: &[&str]) -> Result<Self> {
        let mut vocab: Vec<String> = (0..=255u8).map(bytes::byte_token).collect();
        let mut special = BTreeMap::new();
        for name in REQUIRED_SPECIALS.iter().chain(extra_specials) {
            if special.contains_key(*name) {
                return Err(Error::SpecialTokenConflict(name.to_string()));
            }
            special.insert(name.to_string(), vocab.len() as u32);
            vocab.push(special_string(name));
        }
        Self::from_parts(vocab, Vec::new(), special)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> &BTreeMap<String, u32> {
        &self.special
    }

    pub fn special(&self, name: &str) -> Option<u32> {
        self.special.get(name).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special_ids.contains(&id)
    }

    pub fn bos(&self) -> u32 {
        self.special[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.special[EOS]
    }

    pub fn pad(&self) -> u32 {
        self.special[PAD]
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Raw bytes a token stands for; empty for specials.
    pub fn token_bytes(&self, id: u32) -> Vec<u8> {
        if self.is_special(id) {
            return Vec::new();
        }
        self.vocab.get(id as usize).map(|t| bytes::token_to_bytes(t)).unwrap_or_default()
    }

    /// Applies merges in priority order to the byte sequence of `text`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, raw: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = raw.iter().map(|&b| b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, w[0], w[1], merged)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, l, r, merged)) = best else { break };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Concatenated bytes of non-special tokens; out-of-range ids are skipped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().flat_map(|&id| self.token_bytes(id)).collect()
    }

    /// Lossy for byte sequences that are not valid UTF-8.
    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// The tokenizer as it was after its first `vocab_size` tokens were learned.
    pub fn truncated(&self, vocab_size: usize) -> Result<Self> {
        let floor = BYTE_TOKENS + self.special.len();
        if vocab_size < floor || vocab_size > self.vocab.len() {
            return Err(Error::invalid(format!("cannot truncate to {vocab_size} (range {floor}..={})", self.vocab.len())));
        }
        if self.special.values().any(|&id| id as usize >= vocab_size) {
            return Err(Error::invalid("truncation would drop a special token"));
        }
        let keep = |s: &str| self.index.get(s).is_some_and(|&id| (id as usize) < vocab_size);
        let merges = self
            .merges
            .iter()
            .filter(|(l, r)| keep(l) && keep(r) && keep(&format!("{l}{r}")))
            .cloned()
            .collect();
        Self::from_parts(self.vocab[..vocab_size].to_vec(), merges, self.special.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            vocab: self.vocab.clone(),
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            special: self.special.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(s)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Tokenizer(format!("unsupported tokenizer version {}", file.version)));
        }
        let merges = file.merges.into_iter().map(|[l, r]| (l, r)).collect();
        Self::from_parts(file.vocab, merges, file.special)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Extends `base` with the tokens and merge rules of `domain`.
///
/// Base ids are untouched; domain tokens missing from the base are appended
/// in domain id order, and domain merge rules follow all base rules.
pub fn merge_tokenizers(base: &TokenizerModel, domain: &TokenizerModel) -> Result<TokenizerModel> {
    if base.vocab[..BYTE_TOKENS] != domain.vocab[..BYTE_TOKENS] {
        return Err(Error::Tokenizer("tokenizers disagree on the byte block".into()));
    }
    for (name, &id) in &domain.special {
        let s = &domain.vocab[id as usize];
        match base.special.get(name) {
            Some(&bid) if base.vocab[bid as usize] != *s => return Err(Error::SpecialTokenConflict(name.clone())),
            Some(_) => {}
            None if base.index.contains_key(s) => return Err(Error::SpecialTokenConflict(name.clone())),
            None => {}
        }
    }
    for (name, &id) in &base.special {
        if let Some(&did) = domain.index.get(&base.vocab[id as usize]) {
            if !domain.is_special(did) {
                return Err(Error::SpecialTokenConflict(name.clone()));
            }
        }
    }

    let mut vocab = base.vocab.clone();
    let mut present: HashSet<&str> = base.vocab.iter().map(String::as_str).collect();
    let mut special = base.special.clone();
    let domain_special_names: HashMap<u32, &String> = domain.special.iter().map(|(n, &id)| (id, n)).collect();
    for (id, tok) in domain.vocab.iter().enumerate().skip(BYTE_TOKENS) {
        if present.insert(tok.as_str()) {
            if let Some(name) = domain_special_names.get(&(id as u32)) {
                special.insert((*name).clone(), vocab.len() as u32);
            }
            vocab.push(tok.clone());
        }
    }
    let mut seen: HashSet<&(String, String)> = base.merges.iter().collect();
    let mut merges = base.merges.clone();
    for m in &domain.merges {
        if seen.insert(m) {
            merges.push(m.clone());
        }
    }
    TokenizerModel::from_parts(vocab, merges, special)
}

/// Trains a domain tokenizer on `domain_corpus` large enough that merging it
/// into `base` yields at least `target` tokens.
pub fn train_extension<S: AsRef<str>>(
    base: &TokenizerModel,
    domain_corpus: &[S],
    target: usize,
) -> Result<TokenizerModel> {
    if target <= base.vocab_size() {
        return Err(Error::invalid(format!("target {target} must exceed base size {}", base.vocab_size())));
    }
    let extra: Vec<&str> = base
        .special
        .keys()
        .filter(|n| !REQUIRED_SPECIALS.contains(&n.as_str()))
        .map(String::as_str)
        .collect();
    let mut domain_target = target;
    loop {
        let domain = train_bpe(domain_corpus, domain_target, &extra)?;
        let merged = merge_tokenizers(base, &domain)?.vocab_size();
        if merged >= target {
            return Ok(domain);
        }
        if domain.vocab_size() < domain_target {
            return Err(Error::Tokenizer(format!("domain corpus only supports {merged} merged tokens, wanted {target}")));
        }
        domain_target += target - merged;
    }
}

/// [`merge_tokenizers`], then cut to `target` tokens when given.
pub fn merge_to(base: &TokenizerModel, domain: &TokenizerModel, target: Option<usize>) -> Result<TokenizerModel> {
    let merged = merge_tokenizers(base, domain)?;
    match target {
        Some(t) if t > merged.vocab_size() => {
            Err(Error::Tokenizer(format!("merged vocabulary has {} tokens, fewer than {t}", merged.vocab_size())))
        }
        Some(t) => merged.truncated(t),
        None => Ok(merged),
    }
}

/// Grows `base` to exactly `target` tokens with vocabulary learned on `domain_corpus`.
pub fn extend_tokenizer<S: AsRef<str>>(base: &TokenizerModel, domain_corpus: &[S], target: usize) -> Result<TokenizerModel> {
    merge_to(base, &train_extension(base, domain_corpus, target)?, Some(target))
}

/// Tokens per byte over a corpus.
pub fn compression_ratio<S: AsRef<str>>(t: &TokenizerModel, corpus: &[S]) -> Result<f64> {
    let bytes: usize = corpus.iter().map(|d| d.as_ref().len()).sum();
    if bytes == 0 {
        return Err(Error::Empty("compression corpus"));
    }
    let tokens: usize = corpus.iter().map(|d| t.encode(d.as_ref()).len()).sum();
    Ok(tokens as f64 / bytes as f64)
}
