//! Prototypical losses over a batch of `N` speakers with `M` utterances each.
//!
//! The first `M - 1` utterances of every speaker are support examples whose
//! mean is the speaker centroid; the last one is the query. All losses take
//! the `N x N` similarity matrix between queries and centroids:
//!
//! * [`ap_loss`]: softmax cross-entropy with the diagonal as target.
//! * [`ce_mixup_loss`]: λ-weighted sum of the cross-entropies against the
//!   query's own speaker and against its mixing partner.
//! * [`contrastive_mixup_loss`]: log of the label-weighted softmax mass,
//!   with weights from [`build_label_weights`].
//!
//! Every exponentiation goes through max-shifted log-sum-exp.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Lower bound enforced on the similarity scale after each update.
pub const MIN_SCALE: f64 = 1e-6;

/// Bijection on `0..n`, stored as `perm[i] = R_i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &target in &map {
            if target >= map.len() || std::mem::replace(&mut seen[target], true) {
                return Err(Error::contract(format!("{map:?} is not a permutation of 0..{}", map.len())));
            }
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Builds from 1-based indices as written in math notation.
    pub fn from_one_based(map: &[usize]) -> Result<Self> {
        if map.contains(&0) {
            return Err(Error::contract("one-based permutation contains 0"));
        }
        Self::new(map.iter().map(|i| i - 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &r)| i == r)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &r) in self.0.iter().enumerate() {
            inv[r] = i;
        }
        Self(inv)
    }

    /// `(self ∘ other)[i] = self[other[i]]`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::contract("composing permutations of different lengths"));
        }
        Ok(Self(other.0.iter().map(|&i| self.0[i]).collect()))
    }
}

impl std::ops::Index<usize> for Permutation {
    type Output = usize;

    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Trainable scale `w` and bias `b` of the scaled cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub w: f64,
    pub b: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl SimilarityParams {
    pub fn clamp(&mut self) {
        self.w = self.w.max(MIN_SCALE);
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ap,
    CeMixup,
    ContrastiveMixup,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ap => "ap",
            LossKind::CeMixup => "ce_mixup",
            LossKind::ContrastiveMixup => "contrastive_mixup",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap" => Ok(LossKind::Ap),
            "ce_mixup" => Ok(LossKind::CeMixup),
            "contrastive_mixup" => Ok(LossKind::ContrastiveMixup),
            other => Err(Error::config(format!(
                "unknown loss `{other}` (expected ap, ce_mixup or contrastive_mixup)"
            ))),
        }
    }
}

/// Row-stochastic virtual labels: `λ` on the query's own speaker and
/// `1 - λ` on its mixing partner `R_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights {
    n: usize,
    lambda: f64,
    shuffle: Permutation,
    d: Vec<f64>,
}

impl LabelWeights {
    pub fn identity(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for j in 0..n {
            d[j * n + j] = 1.0;
        }
        Self {
            n,
            lambda: 1.0,
            shuffle: Permutation::identity(n),
            d,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn shuffle(&self) -> &Permutation {
        &self.shuffle
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.d[j * self.n..(j + 1) * self.n]
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.d[j * self.n + k]
    }

    /// Row-major `N x N` weights.
    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `d[j][j] = λ`, `d[j][R_j] = 1 - λ`, zero elsewhere. When `R_j = j` the
/// two masses land on the same cell, which is set to exactly 1.
pub fn build_label_weights(n: usize, shuffle: &Permutation, lambda: f64) -> Result<LabelWeights> {
    check_lambda(lambda)?;
    if shuffle.len() != n {
        return Err(Error::contract(format!(
            "shuffle has length {} for {n} speakers",
            shuffle.len()
        )));
    }
    let mut d = vec![0.0; n * n];
    for j in 0..n {
        let partner = shuffle[j];
        if partner == j {
            d[j * n + j] = 1.0;
        } else {
            d[j * n + j] = lambda;
            d[j * n + partner] = 1.0 - lambda;
        }
    }
    Ok(LabelWeights {
        n,
        lambda,
        shuffle: shuffle.clone(),
        d,
    })
}

/// Mean of the support embeddings of each speaker: `[N, M-1, D] -> [N, D]`.
pub fn compute_centroids(g: &mut Graph, support: Var) -> Result<Var> {
    if g.value(support).shape().len() != 3 {
        return Err(Error::contract(format!(
            "support must be [N, M-1, D], got {:?}",
            g.value(support).shape()
        )));
    }
    g.mean_axis(support, 1)
}

/// `S[j][k] = w * cos(query_j, centroid_k) + b`.
pub fn compute_similarity_matrix(
    g: &mut Graph,
    query: Var,
    centroids: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (qs, cs) = (g.value(query).shape(), g.value(centroids).shape());
    if qs.len() != 2 || cs.len() != 2 || qs[0] != cs[0] || qs[1] != cs[1] {
        return Err(Error::contract(format!(
            "queries {qs:?} and centroids {cs:?} must both be [N, D]"
        )));
    }
    let cos = g.cosine(query, centroids)?;
    let scaled = g.mul_scalar(cos, w)?;
    g.add_scalar(scaled, b)
}

fn square_side(g: &Graph, s: Var) -> Result<usize> {
    match g.value(s).shape() {
        [r, c] if r == c => Ok(*r),
        other => Err(Error::contract(format!("similarity matrix must be square, got {other:?}"))),
    }
}

/// Angular prototypical loss: `-(1/N) Σ_j log softmax(S_j)[j]`.
pub fn ap_loss(g: &mut Graph, s: Var) -> Result<Var> {
    let n = square_side(g, s)?;
    let lse = g.logsumexp_rows(s)?;
    let diag = g.select_per_row(s, (0..n).collect())?;
    let nll = g.sub(lse, diag)?;
    g.mean(nll)
}

/// `-(1/N) Σ_i [λ log softmax(S̄_i)[i] + (1-λ) log softmax(S̄_i)[R_i]]`.
pub fn ce_mixup_loss(g: &mut Graph, s_bar: Var, shuffle: &Permutation, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let n = square_side(g, s_bar)?;
    if shuffle.len() != n {
        return Err(Error::contract(format!(
            "shuffle has length {} for a {n}x{n} similarity matrix",
            shuffle.len()
        )));
    }
    let lse = g.logsumexp_rows(s_bar)?;
    let own = g.select_per_row(s_bar, (0..n).collect())?;
    let partner = g.select_per_row(s_bar, shuffle.as_slice().to_vec())?;
    let own_nll = g.sub(lse, own)?;
    let partner_nll = g.sub(lse, partner)?;
    let own_term = g.scale(own_nll, lambda)?;
    let partner_term = g.scale(partner_nll, 1.0 - lambda)?;
    let total = g.add(own_term, partner_term)?;
    g.mean(total)
}

/// `-(1/N) Σ_j log( Σ_k d[j][k] e^{S̄[j][k]} / Σ_k e^{S̄[j][k]} )`.
pub fn contrastive_mixup_loss(g: &mut Graph, s_bar: Var, d: &LabelWeights) -> Result<Var> {
    let n = square_side(g, s_bar)?;
    if d.n() != n {
        return Err(Error::contract(format!(
            "label weights are {0}x{0} for a {n}x{n} similarity matrix",
            d.n()
        )));
    }
    for j in 0..n {
        let row_sum: f64 = d.row(j).iter().sum();
        if (row_sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("label weight row {j} sums to {row_sum}")));
        }
    }
    let denominator = g.logsumexp_rows(s_bar)?;
    let numerator = g.weighted_logsumexp_rows(s_bar, d.as_slice().to_vec())?;
    let nll = g.sub(denominator, numerator)?;
    g.mean(nll)
}

/// Closed-set mixup cross-entropy on `[B, C]` logits:
/// `λ CE(logits, y) + (1-λ) CE(logits, y_R)`, averaged over the batch.
pub fn mixup_classification_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    shuffled_labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let (batch, classes) = match g.value(logits).shape() {
        [b, c] => (*b, *c),
        other => return Err(Error::contract(format!("logits must be [B, C], got {other:?}"))),
    };
    if labels.len() != batch || shuffled_labels.len() != batch {
        return Err(Error::contract("one label and one shuffled label per row are required"));
    }
    if let Some(bad) = labels.iter().chain(shuffled_labels).find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    let lse = g.logsumexp_rows(logits)?;
    let own = g.select_per_row(logits, labels.to_vec())?;
    let other = g.select_per_row(logits, shuffled_labels.to_vec())?;
    let own_nll = g.sub(lse, own)?;
    let other_nll = g.sub(lse, other)?;
    let a = g.scale(own_nll, lambda)?;
    let b = g.scale(other_nll, 1.0 - lambda)?;
    let total = g.add(a, b)?;
    g.mean(total)
}

/// Dispatches to the configured loss. Mixup losses use the shuffle and λ
/// recorded in `d`.
pub fn loss_for(g: &mut Graph, kind: LossKind, s: Var, d: &LabelWeights) -> Result<Var> {
    match kind {
        LossKind::Ap => ap_loss(g, s),
        LossKind::CeMixup => ce_mixup_loss(g, s, d.shuffle(), d.lambda()),
        LossKind::ContrastiveMixup => contrastive_mixup_loss(g, s, d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(g: &mut Graph, n: usize, values: &[f64]) -> Var {
        g.constant(vec![n, n], values.to_vec()).unwrap()
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![1, 0, 2]).is_ok());
        assert!(Permutation::new(vec![1, 1, 2]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
        let p = Permutation::from_one_based(&[2, 3, 1]).unwrap();
        assert_eq!(p.as_slice(), &[1, 2, 0]);
        assert!(p.compose(&p.inverse()).unwrap().is_identity());
    }

    #[test]
    fn label_weights_for_cyclic_shuffle() {
        let r = Permutation::from_one_based(&[2, 3, 1]).unwrap();
        let d = build_label_weights(3, &r, 0.7).unwrap();
        assert_eq!(d.row(0), &[0.7, 1.0 - 0.7, 0.0]);
        assert_eq!(d.row(1), &[0.0, 0.7, 1.0 - 0.7]);
        assert_eq!(d.row(2), &[1.0 - 0.7, 0.0, 0.7]);
        assert!((d.get(0, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn label_weights_reduce_to_identity() {
        let id = LabelWeights::identity(4);
        for lambda in [0.0, 0.3, 1.0] {
            let d = build_label_weights(4, &Permutation::identity(4), lambda).unwrap();
            assert_eq!(d.as_slice(), id.as_slice());
        }
        let swap = Permutation::new(vec![1, 0, 3, 2]).unwrap();
        let d = build_label_weights(4, &swap, 1.0).unwrap();
        assert_eq!(d.as_slice(), id.as_slice());
        assert!(build_label_weights(4, &swap, 1.5).is_err());
        assert!(build_label_weights(3, &swap, 0.5).is_err());
    }

    #[test]
    fn ap_loss_of_uniform_matrix_is_log_n() {
        let mut g = Graph::new();
        let s = matrix(&mut g, 2, &[3.0; 4]);
        let l = ap_loss(&mut g, s).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ap_loss_saturates_under_separation() {
        let mut g = Graph::new();
        let s = matrix(&mut g, 2, &[10.0, -10.0, -10.0, 10.0]);
        let l = ap_loss(&mut g, s).unwrap();
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-14);
        assert!((g.scalar(l) - 2.1e-9).abs() < 1e-10);
    }

    #[test]
    fn half_mixed_pair_gives_log_two() {
        let swap = Permutation::new(vec![1, 0]).unwrap();
        let d = build_label_weights(2, &swap, 0.5).unwrap();
        for s in [[1.0, 2.0, -3.0, 0.5], [9.0, -9.0, 4.0, 4.0]] {
            let mut g = Graph::new();
            let s = matrix(&mut g, 2, &s);
            let l = contrastive_mixup_loss(&mut g, s, &d).unwrap();
            assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn similarity_of_parallel_and_orthogonal_vectors() {
        let mut g = Graph::new();
        let q = g.constant(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let c = g.constant(vec![2, 2], vec![1.0, 0.0, 5.0, 5.0]).unwrap();
        let w = g.param(vec![], vec![10.0]).unwrap();
        let b = g.param(vec![], vec![-5.0]).unwrap();
        let s = compute_similarity_matrix(&mut g, q, c, w, b).unwrap();
        let v = g.values(s);
        assert!((v[0] - 5.0).abs() < 1e-12);
        assert!((v[2] - -5.0).abs() < 1e-12);
        assert!((v[1] - (10.0 / 2f64.sqrt() - 5.0)).abs() < 1e-12);
    }

    #[test]
    fn centroid_of_three_supports() {
        let mut g = Graph::new();
        let s = g
            .constant(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
            .unwrap();
        let c = compute_centroids(&mut g, s).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2]);
        for v in g.values(c) {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        let flat = g.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(compute_centroids(&mut g, flat), Err(Error::Contract(_))));
    }

    #[test]
    fn opposite_supports_trip_the_cosine_guard() {
        let mut g = Graph::new();
        let s = g.constant(vec![2, 2, 2], vec![1.0, 2.0, -1.0, -2.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = compute_centroids(&mut g, s).unwrap();
        assert_eq!(&g.values(c)[..2], &[0.0, 0.0]);
        let q = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = g.constant(vec![], vec![10.0]).unwrap();
        let b = g.constant(vec![], vec![-5.0]).unwrap();
        assert!(matches!(
            compute_similarity_matrix(&mut g, q, c, w, b),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn contrastive_rejects_bad_rows() {
        let mut g = Graph::new();
        let s = matrix(&mut g, 2, &[0.0; 4]);
        let d = LabelWeights {
            n: 2,
            lambda: 1.0,
            shuffle: Permutation::identity(2),
            d: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!(matches!(contrastive_mixup_loss(&mut g, s, &d), Err(Error::Contract(_))));
    }

    #[test]
    fn classification_mixup_label_range() {
        let mut g = Graph::new();
        let logits = g.constant(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(mixup_classification_loss(&mut g, logits, &[0, 2], &[1, 0], 0.5).is_err());
        assert!(mixup_classification_loss(&mut g, logits, &[0, 1], &[1, 0], 0.5).is_ok());
    }

    #[test]
    fn scale_clamp() {
        let mut p = SimilarityParams { w: -3.0, b: 0.0 };
        p.clamp();
        assert_eq!(p.w, MIN_SCALE);
        assert_eq!(SimilarityParams::default(), SimilarityParams { w: 10.0, b: -5.0 });
    }
}
