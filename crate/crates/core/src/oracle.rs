//! Finite-difference gradient verification for every primitive and for the
//! training losses, shared by the test suites and the acceptance gate.

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::reward::{ranking_loss_tensor, RewardModel};
use crate::rlhf::{ppo_actor_loss, response_log_probs, Rollout};
use crate::rng::SeedTree;
use crate::sft::{sft_loss, MaskedBatch};
use crate::tensor::{Binder, Float, ParamStore, Tensor};
use crate::tokenizer::{TokenizerModel, SEP};

pub const FD_STEP: Float = 1e-4;
pub const FD_REL_TOL: Float = 1e-4;
/// Denominator floor for relative error so near-zero gradients are compared
/// on an absolute scale of `FD_FLOOR * FD_REL_TOL`.
pub const FD_FLOOR: Float = 1e-3;

pub fn rel_err(a: Float, b: Float) -> Float {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

type Inputs = [(Vec<Float>, Vec<usize>)];

/// Central differences of a scalar function of several inputs.
pub fn numeric_grad(inputs: &Inputs, f: &dyn Fn(&[Tensor]) -> Result<Tensor>, h: Float) -> Result<Vec<Vec<Float>>> {
    let eval = |vals: &Inputs| -> Result<Float> {
        let ts = vals.iter().map(|(d, s)| Tensor::new(d.clone(), s)).collect::<Result<Vec<_>>>()?;
        Ok(f(&ts)?.item())
    };
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].0.len());
        for j in 0..inputs[i].0.len() {
            let mut plus = inputs.to_vec();
            plus[i].0[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].0[j] -= h;
            g.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Worst elementwise relative error between autodiff and finite differences.
pub fn gradcheck(inputs: &Inputs, f: &dyn Fn(&[Tensor]) -> Result<Tensor>) -> Result<Float> {
    let leaves = inputs.iter().map(|(d, s)| Tensor::leaf(d.clone(), s)).collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let numeric = numeric_grad(inputs, f, FD_STEP)?;
    let mut worst: Float = 0.0;
    for (leaf, num) in leaves.iter().zip(&numeric) {
        let analytic = leaf.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; num.len()]);
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

/// Same check over `samples` random coordinates of a parameter store.
pub fn param_gradcheck(
    store: &ParamStore,
    f: &dyn Fn(&Binder) -> Result<Tensor>,
    samples: usize,
    seed: &SeedTree,
) -> Result<Float> {
    let bind = Binder::new(store, true);
    f(&bind)?.backward()?;
    let grads = bind.gradients();
    drop(bind);
    let names: Vec<&String> = store.iter().map(|(n, _)| n).collect();
    let mut rng = seed.rng();
    let mut worst: Float = 0.0;
    for _ in 0..samples {
        let name = names[rng.below(names.len())];
        let j = rng.below(store.get(name)?.len());
        let at = |delta: Float| -> Result<Float> {
            let mut s = store.clone();
            s.get_mut(name)?.data[j] += delta;
            Ok(f(&Binder::frozen(&s))?.item())
        };
        let numeric = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = grads.get(name).map_or(0.0, |g| g[j]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}

pub fn randn(seed: &SeedTree, n: usize, scale: Float) -> Vec<Float> {
    let mut r = seed.rng();
    (0..n).map(|_| r.normal() * scale).collect()
}

/// Weighted sum with fixed random weights, turning any output into a scalar.
pub fn project(y: &Tensor, seed: &SeedTree) -> Result<Tensor> {
    let w = Tensor::new(randn(seed, y.numel(), 1.0), y.shape())?;
    y.mul(&w)?.sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: Float,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < FD_REL_TOL
    }
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&[Tensor], &SeedTree) -> Result<Tensor>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |x, s| project(&x[0].matmul(&x[1])?, s)),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |x, s| project(&x[0].matmul(&x[1])?, s)),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |x, s| project(&x[0].add(&x[1])?, s)),
        ("sub", vec![vec![3, 4], vec![3, 4]], |x, s| project(&x[0].sub(&x[1])?, s)),
        ("mul_broadcast", vec![vec![2, 3], vec![2, 1]], |x, s| project(&x[0].mul(&x[1])?, s)),
        ("broadcast_to", vec![vec![1, 3]], |x, s| project(&x[0].broadcast_to(&[4, 3])?, s)),
        ("transpose", vec![vec![3, 5]], |x, s| project(&x[0].transpose()?, s)),
        ("reshape", vec![vec![3, 4]], |x, s| project(&x[0].reshape(&[2, 6])?, s)),
        ("gather_rows", vec![vec![5, 3]], |x, s| project(&x[0].gather_rows(&[4, 0, 4, 2])?, s)),
        ("pick", vec![vec![3, 4]], |x, s| project(&x[0].pick(&[1, 3, 0])?, s)),
        ("softmax", vec![vec![3, 6]], |x, s| project(&x[0].softmax()?, s)),
        ("log_softmax", vec![vec![3, 6]], |x, s| project(&x[0].log_softmax()?, s)),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |x, s| project(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, s)),
        ("gelu", vec![vec![3, 4]], |x, s| project(&x[0].gelu()?, s)),
        ("exp", vec![vec![3, 4]], |x, s| project(&x[0].exp()?, s)),
        ("ln", vec![vec![3, 4]], |x, s| project(&x[0].square()?.add_scalar(0.5)?.ln()?, s)),
        ("softplus", vec![vec![3, 4]], |x, s| project(&x[0].softplus()?, s)),
        ("log_sigmoid", vec![vec![3, 4]], |x, s| project(&x[0].log_sigmoid()?, s)),
        ("cross_entropy", vec![vec![4, 7]], |x, s| project(&x[0].cross_entropy(&[0, 6, 3, 3])?, s)),
        ("concat", vec![vec![2, 3], vec![2, 2]], |x, s| project(&Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?, s)),
        ("slice", vec![vec![4, 5]], |x, s| project(&x[0].slice(1, 1, 3)?, s)),
        ("sum_last", vec![vec![3, 4]], |x, s| project(&x[0].sum_last()?, s)),
        ("mean", vec![vec![3, 4]], |x, _| x[0].square()?.mean()),
        ("scale_add_scalar", vec![vec![5]], |x, s| project(&x[0].scale(-1.7)?.add_scalar(0.3)?, s)),
        ("neg", vec![vec![4]], |x, s| project(&x[0].neg()?, s)),
        // kinked ops: inputs are moved at least 0.05 from the kinks
        ("clamp", vec![vec![3, 4]], |x, s| project(&x[0].clamp(-0.5, 0.5)?, s)),
        ("minimum", vec![vec![3, 4], vec![3, 4]], |x, s| project(&x[0].minimum(&x[1])?, s)),
    ]
}

fn away_from_kinks(name: &str, inputs: &mut [(Vec<Float>, Vec<usize>)]) {
    match name {
        "clamp" => {
            for v in inputs[0].0.iter_mut() {
                for k in [-0.5, 0.5] {
                    if (*v - k).abs() < 0.05 {
                        *v += 0.1;
                    }
                }
            }
        }
        "minimum" => {
            let (a, b) = inputs.split_at_mut(1);
            for (x, y) in a[0].0.iter_mut().zip(b[0].0.iter()) {
                if (*x - y).abs() < 0.05 {
                    *x += 0.1;
                }
            }
        }
        _ => {}
    }
}

/// Three dense layers with GELU; input and every weight differentiated.
fn mlp(x: &[Tensor]) -> Result<Tensor> {
    let mut h = x[0].clone();
    for l in 0..3 {
        h = h.matmul(&x[1 + 2 * l])?.add(&x[2 + 2 * l])?;
        if l < 2 {
            h = h.gelu()?;
        }
    }
    h.square()?.sum()
}

/// Every primitive op plus a three-layer MLP, `instances` draws each.
pub fn primitive_checks(instances: u64, seed: u64) -> Result<Vec<CheckResult>> {
    let root = SeedTree::new(seed).split("primitives");
    let mut out = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let mut worst: Float = 0.0;
        for inst in 0..instances {
            let s = root.split(name).split_index(inst);
            let mut inputs: Vec<(Vec<Float>, Vec<usize>)> = shapes
                .iter()
                .enumerate()
                .map(|(k, sh)| (randn(&s.split_index(k as u64), sh.iter().product(), 1.0), sh.clone()))
                .collect();
            away_from_kinks(name, &mut inputs);
            let proj = s.split("proj");
            worst = worst.max(gradcheck(&inputs, &|x| f(x, &proj))?);
        }
        out.push(CheckResult { name: name.into(), instances: instances as usize, worst });
    }
    let dims = [4, 6, 5, 3];
    let mut worst: Float = 0.0;
    for inst in 0..instances {
        let s = root.split("mlp").split_index(inst);
        let mut inputs = vec![(randn(&s.split("x"), 2 * dims[0], 1.0), vec![2, dims[0]])];
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            inputs.push((randn(&s.split_index(2 * l as u64), i * o, 0.5), vec![i, o]));
            inputs.push((randn(&s.split_index(2 * l as u64 + 1), o, 0.1), vec![o]));
        }
        worst = worst.max(gradcheck(&inputs, &mlp)?);
    }
    out.push(CheckResult { name: "mlp_3_layer".into(), instances: instances as usize, worst });
    Ok(out)
}

fn random_masked_batch(s: &SeedTree, b: usize, t: usize, v: usize) -> MaskedBatch {
    let mut rng = s.rng();
    let ids: Vec<Vec<u32>> = (0..b).map(|_| (0..t).map(|_| rng.below(v) as u32).collect()).collect();
    let mask: Vec<Vec<u8>> = (0..b)
        .map(|_| {
            let start = 1 + rng.below(t - 1);
            (0..t).map(|i| u8::from(i >= start)).collect()
        })
        .collect();
    let alpha = (0..b).map(|_| if rng.below(2) == 0 { 1.0 } else { 0.1 }).collect();
    let output_start = mask.iter().map(|m| m.iter().position(|&x| x == 1).unwrap_or(t)).collect();
    MaskedBatch { ids, mask, alpha, output_start, lengths: vec![t; b] }
}

fn tiny_model(v: usize, seed: u64) -> Result<Model> {
    let mut m = Model::new(ModelConfig { vocab_size: v, hidden: 8, layers: 1, heads: 2, max_len: 12, seed })?;
    // spread the weights so gradients are not all near the floor
    let mut rng = SeedTree::new(seed).split("spread").rng();
    for (_, p) in m.params_mut().iter_mut() {
        for x in &mut p.data {
            *x += 0.3 * rng.normal();
        }
    }
    Ok(m)
}

/// A ratio `exp(d)` kept at least 0.05 from the clip edges `1 ± 0.2`.
fn ratio_offset(rng: &mut crate::rng::Stream) -> Float {
    const BANDS: [(Float, Float); 3] = [(0.55, 0.75), (0.85, 1.15), (1.25, 1.6)];
    let (lo, hi) = BANDS[rng.below(BANDS.len())];
    (lo + (hi - lo) * rng.uniform()).ln()
}

/// The SFT, ranking and clipped-surrogate losses, each checked both on raw
/// inputs and end to end through a small transformer's parameters.
pub fn loss_graph_checks(instances: u64, seed: u64) -> Result<Vec<CheckResult>> {
    let root = SeedTree::new(seed).split("loss-graphs");
    let kinds = ["sft_loss", "sft_loss_model", "ranking_loss", "ranking_loss_model", "ppo_surrogate", "ppo_surrogate_model"];
    let mut out = Vec::new();
    for kind in kinds {
        let mut worst: Float = 0.0;
        for inst in 0..instances {
            let s = root.split(kind).split_index(inst);
            let err = match kind {
                "sft_loss" => {
                    let (b, t, v) = (3, 5, 6);
                    let batch = random_masked_batch(&s.split("batch"), b, t, v);
                    let logits = vec![(randn(&s.split("logits"), b * t * v, 1.5), vec![b * t, v])];
                    gradcheck(&logits, &|x| sft_loss(&x[0], &batch))?
                }
                "sft_loss_model" => {
                    let m = tiny_model(10, inst)?;
                    let batch = random_masked_batch(&s.split("batch"), 2, 6, 10);
                    let f = |bind: &Binder| sft_loss(&m.forward(bind, &crate::model::Batch::new(batch.ids.clone())?)?, &batch);
                    param_gradcheck(m.params(), &f, 40, &s.split("coords"))?
                }
                "ranking_loss" => {
                    let n = 4;
                    let inputs = vec![(randn(&s.split("c"), n, 2.0), vec![n]), (randn(&s.split("r"), n, 2.0), vec![n])];
                    gradcheck(&inputs, &|x| ranking_loss_tensor(&x[0], &x[1]))?
                }
                "ranking_loss_model" => {
                    let tok = TokenizerModel::byte_level(&[SEP])?;
                    let lm = tiny_model(tok.vocab_size(), inst)?;
                    let rm = RewardModel::from_lm(&lm, &tok, inst, Some(4))?;
                    let mut rng = s.split("ids").rng();
                    let mut seq = || -> Vec<u32> { (0..2 + rng.below(6)).map(|_| rng.below(256) as u32).collect() };
                    let (c, r): (Vec<Vec<u32>>, Vec<Vec<u32>>) = (0..3).map(|_| (seq(), seq())).unzip();
                    let both: Vec<Vec<u32>> = c.iter().chain(&r).cloned().collect();
                    let head = rm.head.clone();
                    let trunk_f = |bind: &Binder| {
                        let sc = rm.score_graph(bind, &Binder::frozen(&head), &both)?;
                        ranking_loss_tensor(&sc.slice(0, 0, 3)?, &sc.slice(0, 3, 3)?)
                    };
                    let head_f = |bind: &Binder| {
                        let sc = rm.score_graph(&Binder::frozen(rm.trunk.params()), bind, &both)?;
                        ranking_loss_tensor(&sc.slice(0, 0, 3)?, &sc.slice(0, 3, 3)?)
                    };
                    param_gradcheck(rm.trunk.params(), &trunk_f, 30, &s.split("trunk"))?
                        .max(param_gradcheck(&head, &head_f, 10, &s.split("head"))?)
                }
                "ppo_surrogate" => {
                    let n = 6;
                    let mut rng = s.split("ratio").rng();
                    let new = randn(&s.split("new"), n, 1.0);
                    let old: Vec<Float> = new.iter().map(|x| x - ratio_offset(&mut rng)).collect();
                    let adv = randn(&s.split("adv"), n, 1.0);
                    gradcheck(&[(new, vec![n])], &|x| ppo_actor_loss(&x[0], &old, &adv, 0.2))?
                }
                "ppo_surrogate_model" => {
                    let m = tiny_model(10, inst)?;
                    let mut rng = s.split("ids").rng();
                    let mut rollouts = Vec::new();
                    for _ in 0..3 {
                        let prompt: Vec<u32> = (0..1 + rng.below(3)).map(|_| rng.below(10) as u32).collect();
                        let response: Vec<u32> = (0..1 + rng.below(4)).map(|_| rng.below(10) as u32).collect();
                        rollouts.push(Rollout {
                            prompt,
                            response,
                            old_log_probs: vec![],
                            ref_log_probs: vec![],
                            score: 0.0,
                            values: vec![],
                            rewards: vec![],
                            advantages: vec![],
                            returns: vec![],
                            sibling_scores: vec![],
                            selected: 0,
                        });
                    }
                    let cur = response_log_probs(&m, &Binder::frozen(m.params()), &rollouts, 0)?.to_vec();
                    let old: Vec<Float> = cur.iter().map(|x| x - ratio_offset(&mut rng)).collect();
                    let adv = randn(&s.split("adv"), cur.len(), 1.0);
                    let f = |bind: &Binder| ppo_actor_loss(&response_log_probs(&m, bind, &rollouts, 0)?, &old, &adv, 0.2);
                    param_gradcheck(m.params(), &f, 40, &s.split("coords"))?
                }
                _ => unreachable!("kinds listed above"),
            };
            worst = worst.max(err);
        }
        out.push(CheckResult { name: kind.into(), instances: instances as usize, worst });
    }
    Ok(out)
}
