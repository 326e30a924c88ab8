mod common;

use common::*;
use proptest::prelude::*;
use protomix::losses::{
    ap_loss, build_label_weights, ce_mixup_loss, compute_similarity_matrix, contrastive_mixup_loss,
    mixup_classification_loss, LabelWeights, LossKind, Permutation,
};
use protomix::numerics::Graph;
use rand::Rng;

fn s_graph(s: &[Vec<f64>]) -> (Graph, protomix::numerics::Var) {
    let n = s.len();
    let mut g = Graph::new();
    let v = g.constant(vec![n, n], s.concat()).unwrap();
    (g, v)
}

fn random_s(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..n).map(|_| rng.random_range(-8.0..8.0)).collect()).collect()
}

#[test]
#[allow(clippy::approx_constant)]
fn similarity_of_axis_and_diagonal() {
    let mut g = Graph::new();
    let q = g.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let c = g.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let w = g.constant(vec![], vec![1.0]).unwrap();
    let b = g.constant(vec![], vec![0.0]).unwrap();
    let s = compute_similarity_matrix(&mut g, q, c, w, b).unwrap();
    // hand evaluation: dot = 1, norms 1 and sqrt 2
    assert!((g.values(s)[0] - 0.70711).abs() < 1e-5);
    assert!((g.values(s)[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn ap_loss_matches_scalar_oracle() {
    let mut rng = rng(11);
    for _ in 0..50 {
        let s = random_s(&mut rng, 3);
        let (mut g, v) = s_graph(&s);
        let l = ap_loss(&mut g, v).unwrap();
        assert!((g.scalar(l) - oracle_ap(&s)).abs() < 1e-12);
    }
}

#[test]
fn classification_mixup_cases() {
    let logits = [1.5, -0.5, 0.25, 2.0];
    let mut g = Graph::new();
    let v = g.constant(vec![2, 2], logits.to_vec()).unwrap();
    let plain = (oracle_cross_entropy(&logits[..2], 0) + oracle_cross_entropy(&logits[2..], 1)) / 2.0;

    let l = mixup_classification_loss(&mut g, v, &[0, 1], &[1, 0], 1.0).unwrap();
    assert!((g.scalar(l) - plain).abs() < 1e-12);
    for lambda in [0.0, 0.4, 0.9] {
        let l = mixup_classification_loss(&mut g, v, &[0, 1], &[0, 1], lambda).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-12);
    }

    let l = mixup_classification_loss(&mut g, v, &[0, 1], &[1, 0], 0.3).unwrap();
    let oracle = (0.3 * oracle_cross_entropy(&logits[..2], 0)
        + 0.7 * oracle_cross_entropy(&logits[..2], 1)
        + 0.3 * oracle_cross_entropy(&logits[2..], 1)
        + 0.7 * oracle_cross_entropy(&logits[2..], 0))
        / 2.0;
    assert!((g.scalar(l) - oracle).abs() < 1e-12);
}

#[test]
fn ce_mixup_cases() {
    let mut rng = rng(12);
    let r = Permutation::from_one_based(&[2, 3, 1]).unwrap();
    for _ in 0..20 {
        let s = random_s(&mut rng, 3);
        let (mut g, v) = s_graph(&s);
        let ap = ap_loss(&mut g, v).unwrap();
        let ap = g.scalar(ap);

        let l = ce_mixup_loss(&mut g, v, &r, 1.0).unwrap();
        assert_eq!(g.scalar(l), ap);
        for lambda in [0.0, 0.2, 0.65] {
            let l = ce_mixup_loss(&mut g, v, &Permutation::identity(3), lambda).unwrap();
            assert!((g.scalar(l) - ap).abs() < 1e-12);
        }
        let l = ce_mixup_loss(&mut g, v, &r, 0.7).unwrap();
        assert!((g.scalar(l) - oracle_ce_mixup(&s, r.as_slice(), 0.7)).abs() < 1e-12);
    }
    let (mut g, v) = s_graph(&random_s(&mut rng, 3));
    assert!(ce_mixup_loss(&mut g, v, &Permutation::identity(2), 0.5).is_err());
}

#[test]
fn contrastive_mixup_cases() {
    let mut rng = rng(13);
    let r = Permutation::from_one_based(&[2, 3, 1]).unwrap();
    let d = build_label_weights(3, &r, 0.7).unwrap();
    for _ in 0..20 {
        let s = random_s(&mut rng, 3);
        let (mut g, v) = s_graph(&s);
        let ap = ap_loss(&mut g, v).unwrap();
        let ap = g.scalar(ap);
        let l = contrastive_mixup_loss(&mut g, v, &LabelWeights::identity(3)).unwrap();
        assert!((g.scalar(l) - ap).abs() < 1e-12);

        let l = contrastive_mixup_loss(&mut g, v, &d).unwrap();
        let dense = to_rows(d.as_slice(), 3);
        assert!((g.scalar(l) - oracle_contrastive(&s, &dense)).abs() < 1e-12);
    }
}

#[test]
fn label_weights_exhaustive_row_stochastic() {
    for n in 1..=5 {
        for perm in all_permutations(n) {
            let r = Permutation::new(perm.clone()).unwrap();
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let d = build_label_weights(n, &r, lambda).unwrap();
                let oracle = oracle_label_weights(&perm, lambda);
                for j in 0..n {
                    assert_eq!(d.row(j), oracle[j].as_slice());
                    assert_eq!(d.row(j).iter().sum::<f64>(), 1.0);
                    assert!(d.row(j).iter().filter(|&&x| x != 0.0).count() <= 2);
                    assert!(d.row(j).iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
            }
        }
    }
}

#[test]
fn contrastive_gradient_on_three_by_two_batch() {
    let mut rng = rng(14);
    for _ in 0..5 {
        let batch = RawBatch::random(&mut rng, 3, 2, 4);
        let r = random_permutation(&mut rng, 3);
        let d = build_label_weights(3, &r, rng.random_range(0.0..1.0)).unwrap();
        let mut bg = build_batch_graph(&batch, LossKind::ContrastiveMixup, &d);
        assert!(batch_gradient_mismatch(&mut bg, 1e-4, 1e-7) <= 1.0);
    }
}

#[test]
fn ap_gradient_on_two_by_three_batch() {
    let batch = RawBatch {
        n: 2,
        m: 3,
        dim: 3,
        support: vec![0.5, -0.2, 0.9, 0.1, 0.4, -0.7, -0.3, 0.8, 0.2, 0.6, 0.6, -0.1],
        query: vec![0.3, 0.1, -0.5, -0.4, 0.9, 0.05],
        w: 10.0,
        b: -5.0,
    };
    let mut bg = build_batch_graph(&batch, LossKind::Ap, &LabelWeights::identity(2));
    let s_oracle = oracle_similarity(&batch);
    let s = bg.graph.values(bg.s).to_vec();
    for (a, b) in s.iter().zip(s_oracle.concat()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((bg.graph.scalar(bg.loss) - oracle_ap(&s_oracle)).abs() < 1e-12);
    assert!(batch_gradient_mismatch(&mut bg, 1e-4, 1e-7) <= 1.0);
}

#[test]
fn losses_are_permutation_equivariant() {
    let mut rng = rng(15);
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let m = rng.random_range(2..4);
        let batch = RawBatch::random(&mut rng, n, m, 5);
        let r = random_permutation(&mut rng, n);
        let lambda = rng.random_range(0.0..1.0);
        let d = build_label_weights(n, &r, lambda).unwrap();

        // relabel speakers: new speaker p was old speaker pi[p]
        let pi = random_permutation(&mut rng, n);
        let pi_inv = pi.inverse();
        let mut relabeled = batch.clone();
        relabeled.support.clear();
        relabeled.query.clear();
        for p in 0..n {
            for i in 0..m - 1 {
                relabeled.support.extend_from_slice(batch.support_row(pi[p], i));
            }
            relabeled.query.extend_from_slice(batch.query_row(pi[p]));
        }
        // partner of new p is the relabeled partner of old pi[p]
        let r_new = Permutation::new((0..n).map(|p| pi_inv[r[pi[p]]]).collect()).unwrap();
        let d_new = build_label_weights(n, &r_new, lambda).unwrap();

        for kind in [LossKind::Ap, LossKind::CeMixup, LossKind::ContrastiveMixup] {
            let a = build_batch_graph(&batch, kind, &d);
            let b = build_batch_graph(&relabeled, kind, &d_new);
            let (la, lb) = (a.graph.scalar(a.loss), b.graph.scalar(b.loss));
            assert!((la - lb).abs() < 1e-12, "{kind}: {la} vs {lb}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn increasing_scale_keeps_row_argmax(
        seed in any::<u64>(),
        n in 2usize..6,
        w1 in 0.01f64..20.0,
        factor in 1.0f64..10.0,
    ) {
        let mut rng = rng(seed);
        let mut batch = RawBatch::random(&mut rng, n, 2, 4);
        batch.w = w1;
        let s1 = oracle_similarity(&batch);
        batch.w = w1 * factor;
        let mut bg = build_batch_graph(&batch, LossKind::Ap, &LabelWeights::identity(n));
        let s2 = to_rows(bg.graph.values(bg.s), n);
        let argmax = |row: &Vec<f64>| {
            row.iter().enumerate().fold(0, |best, (k, &x)| if x > row[best] { k } else { best })
        };
        for (r1, r2) in s1.iter().zip(&s2) {
            prop_assert_eq!(argmax(r1), argmax(r2));
        }
        // gradient sanity on the way
        bg.graph.backward(bg.loss).unwrap();
    }

    #[test]
    fn reduction_chain_holds(seed in any::<u64>(), n in 2usize..8, m in 2usize..4) {
        let mut rng = rng(seed);
        let batch = RawBatch::random(&mut rng, n, m, 6);
        let r = random_permutation(&mut rng, n);
        let at_one = build_label_weights(n, &r, 1.0).unwrap();
        let ap = build_batch_graph(&batch, LossKind::Ap, &at_one);
        let ce = build_batch_graph(&batch, LossKind::CeMixup, &at_one);
        let cm = build_batch_graph(&batch, LossKind::ContrastiveMixup, &at_one);
        let base = ap.graph.scalar(ap.loss);
        prop_assert!((ce.graph.scalar(ce.loss) - base).abs() < 1e-12);
        prop_assert!((cm.graph.scalar(cm.loss) - base).abs() < 1e-12);
    }
}
