use protomix::numerics::{finite_difference_gradient, gradient_mismatch, logsumexp, Graph, Tensor, Var};
use protomix::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 20;

/// Input generator for one leaf: shape plus a value sampler.
struct Input {
    shape: Vec<usize>,
    sample: fn(&mut ChaCha8Rng) -> f64,
}

fn normal_ish(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-2.0..2.0)
}

fn positive(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.2..3.0)
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let x: f64 = rng.random_range(0.05..2.0);
    if rng.random_bool(0.5) {
        x
    } else {
        -x
    }
}

/// Checks backward against central differences for an op built by `build`,
/// contracted to a scalar with random weights.
fn check_op(name: &str, inputs: &[Input], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..TRIALS {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|inp| {
                let n: usize = inp.shape.iter().product();
                let values = (0..n).map(|_| (inp.sample)(&mut rng)).collect();
                g.param(inp.shape.clone(), values).unwrap()
            })
            .collect();
        let out = build(&mut g, &leaves);
        let shape = g.value(out).shape().to_vec();
        let weights: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = g.constant(shape, weights).unwrap();
        let prod = g.mul(out, w).unwrap();
        let terminal = g.sum(prod).unwrap();
        g.backward(terminal).unwrap();

        for (k, &leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(leaf).unwrap().to_vec();
            let start = g.values(leaf).to_vec();
            let mut probe = g.clone();
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
            let ratio = gradient_mismatch(&analytic, &numeric, 1e-4, 1e-7);
            assert!(
                ratio <= 1.0,
                "{name} trial {trial} input {k}: ratio {ratio}\n{analytic:?}\n{numeric:?}"
            );
        }
    }
}

fn inp(shape: &[usize], sample: fn(&mut ChaCha8Rng) -> f64) -> Input {
    Input {
        shape: shape.to_vec(),
        sample,
    }
}

#[test]
fn elementwise_binary_ops() {
    check_op("add", &[inp(&[3, 4], normal_ish), inp(&[3, 4], normal_ish)], |g, v| g.add(v[0], v[1]).unwrap());
    check_op("sub", &[inp(&[5], normal_ish), inp(&[5], normal_ish)], |g, v| g.sub(v[0], v[1]).unwrap());
    check_op("mul", &[inp(&[2, 3], normal_ish), inp(&[2, 3], normal_ish)], |g, v| g.mul(v[0], v[1]).unwrap());
    // fan-out: the same leaf used twice
    check_op("square", &[inp(&[4], normal_ish)], |g, v| g.mul(v[0], v[0]).unwrap());
}

#[test]
fn broadcast_and_scalar_ops() {
    check_op("add_row", &[inp(&[4, 3], normal_ish), inp(&[3], normal_ish)], |g, v| g.add_row(v[0], v[1]).unwrap());
    check_op("mul_scalar", &[inp(&[3, 2], normal_ish), inp(&[], normal_ish)], |g, v| {
        g.mul_scalar(v[0], v[1]).unwrap()
    });
    check_op("add_scalar", &[inp(&[3, 2], normal_ish), inp(&[], normal_ish)], |g, v| {
        g.add_scalar(v[0], v[1]).unwrap()
    });
    check_op("scale", &[inp(&[6], normal_ish)], |g, v| g.scale(v[0], -1.7).unwrap());
}

#[test]
fn matmul_op() {
    check_op("matmul", &[inp(&[3, 4], normal_ish), inp(&[4, 2], normal_ish)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op("matvec", &[inp(&[4], normal_ish), inp(&[4, 5], normal_ish)], |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn reductions() {
    check_op("sum", &[inp(&[2, 5], normal_ish)], |g, v| g.sum(v[0]).unwrap());
    check_op("mean", &[inp(&[2, 5], normal_ish)], |g, v| g.mean(v[0]).unwrap());
    check_op("mean_axis0", &[inp(&[3, 4], normal_ish)], |g, v| g.mean_axis(v[0], 0).unwrap());
    check_op("mean_axis1_3d", &[inp(&[2, 3, 4], normal_ish)], |g, v| g.mean_axis(v[0], 1).unwrap());
    check_op("row_norm", &[inp(&[3, 4], away_from_zero)], |g, v| g.row_norm(v[0]).unwrap());
}

#[test]
fn cosine_op() {
    check_op("cosine", &[inp(&[3, 5], away_from_zero), inp(&[4, 5], away_from_zero)], |g, v| {
        g.cosine(v[0], v[1]).unwrap()
    });
}

#[test]
fn unary_ops() {
    check_op("exp", &[inp(&[7], normal_ish)], |g, v| g.exp(v[0]).unwrap());
    check_op("log", &[inp(&[7], positive)], |g, v| g.log(v[0]).unwrap());
    check_op("tanh", &[inp(&[7], normal_ish)], |g, v| g.tanh(v[0]).unwrap());
    check_op("relu", &[inp(&[7], away_from_zero)], |g, v| g.relu(v[0]).unwrap());
}

#[test]
fn row_softmax_family() {
    check_op("softmax_rows", &[inp(&[3, 4], normal_ish)], |g, v| g.softmax_rows(v[0]).unwrap());
    check_op("logsumexp_rows", &[inp(&[3, 4], normal_ish)], |g, v| g.logsumexp_rows(v[0]).unwrap());
    check_op("weighted_logsumexp_rows", &[inp(&[3, 3], normal_ish)], |g, v| {
        g.weighted_logsumexp_rows(v[0], vec![0.7, 0.3, 0.0, 0.0, 1.0, 0.0, 0.25, 0.0, 0.75])
            .unwrap()
    });
    check_op("select_per_row", &[inp(&[3, 4], normal_ish)], |g, v| g.select_per_row(v[0], vec![2, 0, 3]).unwrap());
}

#[test]
fn structural_ops() {
    check_op("reshape", &[inp(&[2, 6], normal_ish)], |g, v| {
        let r = g.reshape(v[0], vec![3, 4]).unwrap();
        g.tanh(r).unwrap()
    });
    check_op("concat_rows", &[inp(&[2, 3], normal_ish), inp(&[3], normal_ish)], |g, v| {
        g.concat_rows(&[v[0], v[1], v[0]]).unwrap()
    });
}

#[test]
fn forward_two_plus_three() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::scalar(2.0).unwrap());
    let b = g.leaf(Tensor::scalar(3.0).unwrap());
    g.add(a, b).unwrap();
    assert_eq!(g.forward().unwrap().values(), &[5.0]);
}

#[test]
fn forward_softmax_of_zeros() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    g.softmax_rows(x).unwrap();
    for v in g.forward().unwrap().values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn logsumexp_does_not_overflow() {
    // Shifted-exponent scalar oracle: 1000 + ln(e^0 + e^0).
    let oracle = 1000.0 + (2.0f64).ln();
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vec![1000.0, 1000.0]).unwrap();
    g.logsumexp_rows(x).unwrap();
    let v = g.forward().unwrap().values()[0];
    assert_eq!(v, oracle);
    assert_eq!(logsumexp(&[1000.0, 1000.0]), oracle);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(vec![2, 2], vec![1.0, -4.0, 2.5, 0.0]).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn backward_of_square_at_three() {
    let mut g = Graph::new();
    let x = g.param(vec![], vec![3.0]).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_needs_scalar_terminal() {
    let mut g = Graph::new();
    let x = g.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    match g.add(a, b) {
        Err(Error::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "add");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(vec![2], vec![1.0, -1.0]).unwrap();
    assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log", .. })));
    let big = g.constant(vec![1], vec![800.0]).unwrap();
    assert!(matches!(g.exp(big), Err(Error::NonFinite { op: "exp", .. })));
}

#[test]
fn zero_norm_cosine_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let b = g.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
    match g.cosine(a, b) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("row 1"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn forward_is_deterministic_and_replays_leaf_updates() {
    let build = || {
        let mut g = Graph::new();
        let x = g.param(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let w = g.param(vec![3, 2], vec![1.0, 0.5, -0.25, 2.0, 0.0, 1.5]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h).unwrap();
        let l = g.logsumexp_rows(t).unwrap();
        let s = g.mean(l).unwrap();
        (g, x, s)
    };
    let (mut g1, x, s) = build();
    let (mut g2, _, _) = build();
    assert_eq!(g1.forward().unwrap().values()[0].to_bits(), g2.forward().unwrap().values()[0].to_bits());

    let before = g1.scalar(s);
    g1.set_values(x, &[0.0; 6]).unwrap();
    g1.forward().unwrap();
    assert_ne!(g1.scalar(s), before);
    assert!(matches!(g1.set_values(s, &[1.0]), Err(Error::Contract(_))));
}

#[test]
fn weighted_logsumexp_with_one_hot_weights_selects_entry() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![0.3, 5.0, -1.0, 2.0, 2.0, 9.0]).unwrap();
    let v = g
        .weighted_logsumexp_rows(x, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        .unwrap();
    assert_eq!(g.values(v), &[0.3, 2.0]);
    assert!(matches!(
        g.weighted_logsumexp_rows(x, vec![0.0; 6]),
        Err(Error::Contract(_))
    ));
}
