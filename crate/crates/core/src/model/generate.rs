use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateParams {
    pub max_new: usize,
    /// 0 selects greedy decoding.
    pub temperature: Float,
    /// 0 keeps the full distribution.
    pub top_k: usize,
    pub seed: u64,
    /// Decoding ends after this token is emitted.
    pub stop: Option<u32>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self { max_new: 16, temperature: 0.0, top_k: 0, seed: 0, stop: None }
    }
}

impl Model {
    /// Continues `prompt`, returning only the new tokens (including `stop` if hit).
    ///
    /// Generation also ends early when the context reaches `max_len`.
    pub fn generate(&self, prompt: &[u32], params: &GenerateParams) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if params.max_new == 0 {
            return Err(Error::invalid("max_new must be positive"));
        }
        if !(params.temperature >= 0.0) {
            return Err(Error::invalid(format!("temperature must be >= 0, got {}", params.temperature)));
        }
        let v = self.config.vocab_size;
        let mut rng = SeedTree::new(params.seed).split("generate").rng();
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < params.max_new && ctx.len() < self.config.max_len {
            let logits = self.logits(&ctx)?;
            let last = &logits.data()[(ctx.len() - 1) * v..][..v];
            let next = if params.temperature == 0.0 || params.top_k == 1 {
                argmax(last)
            } else {
                sample(last, params.temperature, params.top_k, &mut rng)
            } as u32;
            ctx.push(next);
            out.push(next);
            if Some(next) == params.stop {
                break;
            }
        }
        Ok(out)
    }
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[Float]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[Float], temperature: Float, top_k: usize, rng: &mut crate::rng::Stream) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower ids first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (((logits[i] - max) / temperature) as f64).exp()).collect();
    order[rng.categorical(&weights)]
}
