//! Scalar reference implementations and batch fixtures shared by the
//! integration tests. Nothing here goes through the autodiff graph.

#![allow(dead_code)]

use protomix::losses::{self, LabelWeights, LossKind, Permutation};
use protomix::numerics::{finite_difference_gradient, gradient_mismatch, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Raw embeddings for one batch: support `[N, M-1, D]` and query `[N, D]`.
#[derive(Debug, Clone)]
pub struct RawBatch {
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub support: Vec<f64>,
    pub query: Vec<f64>,
    pub w: f64,
    pub b: f64,
}

impl RawBatch {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, m: usize, dim: usize) -> Self {
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let support = draw(n * (m - 1) * dim);
        let query = draw(n * dim);
        Self {
            n,
            m,
            dim,
            support,
            query,
            w: rng.random_range(2.0..12.0),
            b: rng.random_range(-6.0..1.0),
        }
    }

    pub fn support_row(&self, j: usize, i: usize) -> &[f64] {
        let start = (j * (self.m - 1) + i) * self.dim;
        &self.support[start..start + self.dim]
    }

    pub fn query_row(&self, j: usize) -> &[f64] {
        &self.query[j * self.dim..(j + 1) * self.dim]
    }
}

pub struct BatchGraph {
    pub graph: Graph,
    pub support: Var,
    pub query: Var,
    pub w: Var,
    pub b: Var,
    pub s: Var,
    pub loss: Var,
}

/// Builds centroids, similarity matrix and the requested loss on a graph.
pub fn build_batch_graph(batch: &RawBatch, kind: LossKind, d: &LabelWeights) -> BatchGraph {
    let mut g = Graph::new();
    let support = g
        .param(vec![batch.n, batch.m - 1, batch.dim], batch.support.clone())
        .unwrap();
    let query = g.param(vec![batch.n, batch.dim], batch.query.clone()).unwrap();
    let w = g.param(vec![], vec![batch.w]).unwrap();
    let b = g.param(vec![], vec![batch.b]).unwrap();
    let c = losses::compute_centroids(&mut g, support).unwrap();
    let s = losses::compute_similarity_matrix(&mut g, query, c, w, b).unwrap();
    let loss = losses::loss_for(&mut g, kind, s, d).unwrap();
    BatchGraph {
        graph: g,
        support,
        query,
        w,
        b,
        s,
        loss,
    }
}

/// Worst FD mismatch ratio (≤ 1 passes) over every leaf of a batch graph.
pub fn batch_gradient_mismatch(bg: &mut BatchGraph, rel: f64, abs_floor: f64) -> f64 {
    bg.graph.backward(bg.loss).unwrap();
    let mut worst: f64 = 0.0;
    for leaf in [bg.support, bg.query, bg.w, bg.b] {
        let analytic = bg.graph.grad(leaf).unwrap().to_vec();
        let start = bg.graph.values(leaf).to_vec();
        let mut probe = bg.graph.clone();
        let terminal = bg.loss;
        let numeric = finite_difference_gradient(
            |p| {
                probe.set_values(leaf, p)?;
                probe.forward()?;
                Ok(probe.scalar(terminal))
            },
            &start,
            1e-6,
        )
        .unwrap();
        worst = worst.max(gradient_mismatch(&analytic, &numeric, rel, abs_floor));
    }
    worst
}

// ---- scalar oracles --------------------------------------------------------

pub fn oracle_centroids(batch: &RawBatch) -> Vec<Vec<f64>> {
    (0..batch.n)
        .map(|j| {
            let mut c = vec![0.0; batch.dim];
            for i in 0..batch.m - 1 {
                for (acc, x) in c.iter_mut().zip(batch.support_row(j, i)) {
                    *acc += x;
                }
            }
            c.iter().map(|x| x / (batch.m - 1) as f64).collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn oracle_similarity(batch: &RawBatch) -> Vec<Vec<f64>> {
    let centroids = oracle_centroids(batch);
    (0..batch.n)
        .map(|j| {
            let q = batch.query_row(j);
            centroids
                .iter()
                .map(|c| {
                    let dot: f64 = q.iter().zip(c).map(|(a, b)| a * b).sum();
                    batch.w * dot / (norm(q) * norm(c)) + batch.b
                })
                .collect()
        })
        .collect()
}

/// `-(1/N) Σ_j log(e^{S_jj} / Σ_k e^{S_jk})`, evaluated literally.
pub fn oracle_ap(s: &[Vec<f64>]) -> f64 {
    let n = s.len() as f64;
    -s.iter()
        .enumerate()
        .map(|(j, row)| (row[j].exp() / row.iter().map(|x| x.exp()).sum::<f64>()).ln())
        .sum::<f64>()
        / n
}

pub fn oracle_ce_mixup(s: &[Vec<f64>], shuffle: &[usize], lambda: f64) -> f64 {
    let n = s.len() as f64;
    -s.iter()
        .enumerate()
        .map(|(i, row)| {
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            lambda * (row[i].exp() / denom).ln() + (1.0 - lambda) * (row[shuffle[i]].exp() / denom).ln()
        })
        .sum::<f64>()
        / n
}

pub fn oracle_contrastive(s: &[Vec<f64>], d: &[Vec<f64>]) -> f64 {
    let n = s.len() as f64;
    -s.iter()
        .zip(d)
        .map(|(row, weights)| {
            let num: f64 = row.iter().zip(weights).map(|(x, w)| w * x.exp()).sum();
            let den: f64 = row.iter().map(|x| x.exp()).sum();
            (num / den).ln()
        })
        .sum::<f64>()
        / n
}

/// Label weights written out case by case.
pub fn oracle_label_weights(shuffle: &[usize], lambda: f64) -> Vec<Vec<f64>> {
    let n = shuffle.len();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|k| {
                    if k == j && shuffle[j] == j {
                        1.0
                    } else if k == j {
                        lambda
                    } else if k == shuffle[j] {
                        1.0 - lambda
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn oracle_cross_entropy(logits: &[f64], label: usize) -> f64 {
    -(logits[label].exp() / logits.iter().map(|x| x.exp()).sum::<f64>()).ln()
}

pub fn to_rows(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    Permutation::new(p).unwrap()
}
