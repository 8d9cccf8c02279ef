use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};

use super::{bytes, special_string, TokenizerModel, BYTE_TOKENS, REQUIRED_SPECIALS};
use crate::error::{Error, Result};

/// Greedy BPE over whole documents.
///
/// Each round merges the most frequent adjacent pair, preferring the smaller
/// merged byte string on ties, until `target_vocab` tokens exist or no pair
/// occurs twice. Specials take ids right after the byte block.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab: usize, extra_specials: &[&str]) -> Result<TokenizerModel> {
    let base = TokenizerModel::byte_level(extra_specials)?;
    let floor = BYTE_TOKENS + REQUIRED_SPECIALS.len() + extra_specials.len();
    if target_vocab < floor {
        return Err(Error::invalid(format!("target vocabulary {target_vocab} is below the minimum {floor}")));
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(Error::Empty("tokenizer training corpus"));
    }

    let mut vocab = base.vocab.clone();
    let special = base.special.clone();
    let special_strings: HashSet<String> = special.keys().map(|n| special_string(n)).collect();
    let mut index: HashMap<String, u32> = base.index.clone();
    let mut raw: Vec<Vec<u8>> = (0..vocab.len() as u32).map(|id| base.token_bytes(id)).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    let mut seqs: Vec<Vec<u32>> =
        corpus.iter().map(|d| d.as_ref().bytes().map(u32::from).collect()).filter(|s: &Vec<u32>| s.len() > 1).collect();

    while vocab.len() < target_vocab {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        // (count desc, merged bytes asc, pair asc) is total, so HashMap order is irrelevant
        let best = counts
            .iter()
            .filter(|&(pair, &c)| c >= 2 && !banned.contains(pair))
            .map(|(&pair, &c)| (Reverse(c), concat(&raw, pair), pair))
            .min();
        let Some((_, merged_raw, (l, r))) = best else { break };
        let merged = bytes::bytes_to_token(&merged_raw);
        if special_strings.contains(&merged) {
            banned.insert((l, r));
            continue;
        }
        let id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged.clone());
                index.insert(merged, id);
                raw.push(merged_raw);
                id
            }
        };
        merges.push((vocab[l as usize].clone(), vocab[r as usize].clone()));
        for s in &mut seqs {
            apply(s, l, r, id);
        }
        seqs.retain(|s| s.len() > 1);
    }
    TokenizerModel::from_parts(vocab, merges, special)
}

fn concat(raw: &[Vec<u8>], (l, r): (u32, u32)) -> Vec<u8> {
    let mut v = raw[l as usize].clone();
    v.extend_from_slice(&raw[r as usize]);
    v
}

fn apply(seq: &mut Vec<u32>, l: u32, r: u32, id: u32) {
    let mut w = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            seq[w] = id;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}
