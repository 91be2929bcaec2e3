use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::{Error, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 4.0]);

    let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let out = g.matmul(row, col).unwrap();
    assert_eq!(g.shape(out), &[1, 1]);
    assert_eq!(g.value(out).data(), &[11.0]);

    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![2.0, 1.0, 0.0]));
    let y = g.masked_softmax_rows(x, &[vec![0, 1]]).unwrap();
    let e = std::f64::consts::E;
    let expected = [e * e / (e * e + e), e / (e * e + e), 0.0];
    for (a, b) in g.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((g.value(y).data()[0] - 0.73106).abs() < 1e-5);
    assert_eq!(g.value(y).data()[2], 0.0);

    let x = g.constant(Tensor::vector(vec![5.0, 5.0]));
    let y = g.masked_softmax_rows(x, &[vec![0, 1]]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![7.0, -3.0, 2.0]));
    let y = g.masked_softmax_rows(x, &[vec![1]]).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);

    assert!(matches!(
        g.masked_softmax_rows(x, &[vec![]]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(g.masked_softmax_rows(x, &[vec![3]]).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0.3; 4]));
    let ce = g.log_softmax_cross_entropy(x, 2).unwrap();
    assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-15);
    assert!((g.scalar(ce) - 1.38629).abs() < 1e-5);

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let ce = g.log_softmax_cross_entropy(x, 0).unwrap();
    assert!(g.scalar(ce).is_finite());
    assert!(g.scalar(ce).abs() < 1e-300);

    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(
        g.log_softmax_cross_entropy(x, 5),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let twice = g.add(x, x).unwrap();
    g.backward(twice).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);

    let v = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::InvalidArgument(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = g.param(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(c, x).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn gradcheck_quadratic() {
    // f(x) = Σ (A x)², analytic gradient 2 Aᵀ A x.
    let a = t(&[3, 2], &[1.0, 2.0, -0.5, 0.3, 0.7, -1.1]);
    let mut params = vec![("x".to_string(), t(&[2, 1], &[0.4, -0.9]))];
    let report = finite_diff_check(
        |g, vars| {
            let a = g.constant(a.clone());
            let ax = g.matmul(a, vars[0])?;
            let sq = g.mul(ax, ax)?;
            g.sum(sq)
        },
        &mut params,
        1e-5,
        1e-7,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_error < 1e-7);
    assert_eq!(report.checked, 2);
    assert_eq!(params[0].1.data(), &[0.4, -0.9]);
}

#[test]
fn gradcheck_catches_corrupted_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = vec![
        ("w".to_string(), random(&[3, 4], &mut rng)),
        ("x".to_string(), random(&[2, 3], &mut rng)),
    ];
    let report = finite_diff_check(
        |g, vars| {
            g.set_fault(Some(Fault::MatMulBackward));
            let y = g.matmul(vars[1], vars[0])?;
            let y = g.activation(y, Activation::Gelu)?;
            g.sum(y)
        },
        &mut params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed());
    // Only the left operand's rule is corrupted.
    assert_eq!(report.failing_params(), vec!["x"]);
    let worst = report.worst.unwrap();
    assert_eq!(worst.param, "x");
    assert!(worst.rel_error > 1e-3);
}

#[test]
fn gradcheck_reports_non_finite_loss() {
    let mut params = vec![("p".to_string(), Tensor::vector(vec![1.0]))];
    let err = finite_diff_check(
        |g, vars| {
            let big = g.scale(vars[0], 1e308)?;
            let big = g.scale(big, 10.0)?;
            g.sum(big)
        },
        &mut params,
        1e-5,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

/// Finite-difference check of every op with random inputs, via a random
/// linear functional of the op output.
fn check_op(
    shapes: &[&[usize]],
    seed: u64,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<(String, Tensor<f64>)> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("in{i}"), random(s, &mut rng)))
        .collect();
    let probe_seed = rng.gen::<u64>();
    let report = finite_diff_check(
        |g, vars| {
            let out = op(g, vars)?;
            let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
            let w: Vec<f64> = (0..g.value(out).numel())
                .map(|_| r.gen_range(-1.0..1.0))
                .collect();
            g.dot_const(out, &w)
        },
        &mut params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
}

#[test]
fn op_gradients() {
    check_op(&[&[3, 4], &[4, 2]], 1, |g, v| g.matmul(v[0], v[1]));
    check_op(&[&[3, 4], &[2, 4]], 2, |g, v| g.matmul_t(v[0], v[1]));
    check_op(&[&[3, 4]], 3, |g, v| g.transpose(v[0]));
    check_op(&[&[3, 4], &[3, 4]], 4, |g, v| g.sub(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], 5, |g, v| g.mul(v[0], v[1]));
    check_op(&[&[3, 4], &[4]], 6, |g, v| g.add_row(v[0], v[1]));
    for (i, act) in [Activation::Gelu, Activation::Silu].into_iter().enumerate() {
        check_op(&[&[3, 4]], 7 + i as u64, move |g, v| {
            g.activation(v[0], act)
        });
    }
    check_op(&[&[3, 4]], 9, |g, v| g.mean_rows(v[0]));
    check_op(&[&[3, 4]], 10, |g, v| g.softmax_rows(v[0]));
    check_op(&[&[3, 4]], 11, |g, v| {
        g.masked_softmax_rows(v[0], &[vec![0, 2], vec![3], vec![1, 2, 3]])
    });
    check_op(&[&[3, 5]], 12, |g, v| g.target_log_probs(v[0], &[4, 0, 2]));
    check_op(&[&[4, 3]], 13, |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    check_op(&[&[4, 3]], 14, |g, v| {
        g.gather_elements(v[0], &[(0, 1), (3, 2), (0, 1)])
    });
    check_op(&[&[3, 4], &[3]], 15, |g, v| g.scale_rows(v[0], v[1]));
    check_op(&[&[2, 3], &[3, 3]], 16, |g, v| {
        g.combine_rows(&[(v[0], vec![3, 1]), (v[1], vec![0, 3, 2])], 4, 3)
    });
    check_op(&[&[3, 4], &[4]], 17, |g, v| g.rms_norm(v[0], v[1], 1e-6));
    check_op(&[&[6, 4], &[6, 4], &[6, 4]], 18, |g, v| {
        g.causal_attention(v[0], v[1], v[2], 2, 3, 2)
    });
    check_op(&[&[6]], 19, |g, v| {
        g.weighted_segments(v[0], 3, &[0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
    });
    check_op(&[&[1], &[1], &[1]], 20, |g, v| g.stack(&[v[0], v[1], v[2]]));
    check_op(&[&[2, 3]], 21, |g, v| g.reshape(v[0], &[3, 2]));
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&[4, 2], &mut rng);
    let k = random(&[4, 2], &mut rng);
    let mut v = random(&[4, 2], &mut rng);
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let o = g.causal_attention(qv, kv, vv, 1, 4, 1).unwrap();
        g.value(o).clone()
    };
    let before = run(&v);
    // Changing the last value row must not affect earlier outputs.
    v.data_mut()[6] += 1.0;
    let after = run(&v);
    assert_eq!(before.data()[..6], after.data()[..6]);
    assert_ne!(before.data()[6..], after.data()[6..]);
}

proptest! {
    #[test]
    fn masked_softmax_normalizes(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        pick in prop::collection::vec(any::<bool>(), 12),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut mask: Vec<usize> = (0..n).filter(|&i| pick[i]).collect();
        if mask.is_empty() {
            mask.push(n - 1);
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(logits.clone()));
        let y = g.masked_softmax_rows(x, &[mask.clone()]).unwrap();
        let yv = g.value(y).data().to_vec();
        let total: f64 = mask.iter().map(|&i| yv[i]).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for i in (0..n).filter(|i| !mask.contains(i)) {
            prop_assert_eq!(yv[i], 0.0);
        }
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let xs = g.constant(Tensor::vector(shifted));
        let ys = g.masked_softmax_rows(xs, &[mask]).unwrap();
        for (a, b) in yv.iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_additive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&[2, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let f = |g: &mut Graph<f64>, x: Var| -> Var {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let y = g.activation(y, Activation::Silu).unwrap();
            g.sum(y).unwrap()
        };
        let h = |g: &mut Graph<f64>, x: Var| -> Var {
            let s = g.softmax_rows(x).unwrap();
            let p = g.mul(s, x).unwrap();
            g.sum(p).unwrap()
        };
        let grad_of = |which: u8| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.param(x0.clone());
            let root = match which {
                0 => f(&mut g, x),
                1 => h(&mut g, x),
                _ => {
                    let a = f(&mut g, x);
                    let b = h(&mut g, x);
                    g.add(a, b).unwrap()
                }
            };
            g.backward(root).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let (gf, gh, gsum) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gsum.len() {
            prop_assert!((gsum[i] - (gf[i] + gh[i])).abs() <= 1e-12);
        }
    }
}
