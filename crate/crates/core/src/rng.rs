//! Named, splittable random streams.
//!
//! Every consumer of randomness derives its own stream from a root seed and a
//! path of names (`root.split("pretrain").split("stage1")`). Streams are
//! ChaCha8, which is counter-based, so a stream's output depends only on its
//! derived key and never on how many draws other stages made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"seed-tree/root");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn split(&self, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn split_index(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(index.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// A 64-bit seed summarizing this node, for configs that store plain seeds.
    pub fn seed(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().expect("8 bytes"))
    }

    pub fn rng(&self) -> Stream {
        Stream(ChaCha8Rng::from_seed(self.key))
    }
}

/// A single deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn uniform(&mut self) -> Float {
        self.0.random::<f64>() as Float
    }

    pub fn normal(&mut self) -> Float {
        let z: f64 = self.0.sample(StandardNormal);
        z as Float
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }

    /// Draws an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.0.random::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // Rounding can leave u just above the last bucket.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_independent_of_draw_order() {
        let root = SeedTree::new(7);
        let mut a = root.split("a").rng();
        let first: Vec<_> = (0..4).map(|_| a.uniform()).collect();

        let mut b = root.split("b").rng();
        for _ in 0..100 {
            b.uniform();
        }
        let mut a2 = root.split("a").rng();
        let again: Vec<_> = (0..4).map(|_| a2.uniform()).collect();
        assert_eq!(first, again);
        assert_ne!(root.split("a"), root.split("b"));
        assert_ne!(root.split_index(0), root.split_index(1));
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut s = SeedTree::new(1).rng();
        for _ in 0..1000 {
            assert_ne!(s.categorical(&[0.5, 0.0, 0.5]), 1);
        }
    }
}
