//! Every differentiable op against central finite differences on 100
//! random small inputs, plus value oracles for the kernels.

use gencopy_core::tensor::{finite_difference_check, Graph, ParamStore, Probes, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 100;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

/// Contracts `out` with fixed random weights so no output coordinate has a
/// trivially zero gradient (a plain sum would, e.g., for softmax).
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product::<usize>().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, wt)?;
    Ok(g.sum(prod))
}

/// Runs `build` on 100 seeded random parameter sets and checks all coordinates.
fn check_op<P, F>(op: &str, make: P, build: F)
where
    P: Fn(&mut ChaCha8Rng) -> ParamStore,
    F: for<'g> Fn(&mut Graph<'g>, &ParamStore) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let params = make(&mut rng);
        let report = finite_difference_check(
            |g| {
                let out = build(g, &params)?;
                project(g, out, case)
            },
            &params,
            1e-5,
            &Probes::All,
        )
        .unwrap_or_else(|e| panic!("{op} case {case}: {e}"));
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{op}: max relative error {worst:e}");
}

fn store(items: Vec<(&str, Tensor)>) -> ParamStore {
    items.into_iter().map(|(k, t)| (k.to_string(), t)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

#[test]
fn matmul_matrix_and_vector() {
    check_op(
        "matmul",
        |r| {
            let (n, k, m) = dims(r);
            let a_shape = if r.gen_bool(0.3) { vec![k] } else { vec![n, k] };
            store(vec![("a", rand_tensor(r, &a_shape, -1.0, 1.0)), ("b", rand_tensor(r, &[k, m], -1.0, 1.0))])
        },
        |g, _| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b)
        },
    );
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let (n, k, m) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[n, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, m], -2.0, 2.0);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.data()[i * k + kk] * b.data()[kk * m + j];
                }
                assert!((g.value(c).data()[i * m + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bias_and_linear() {
    check_op(
        "add_bias/linear",
        |r| {
            let (n, k, m) = dims(r);
            store(vec![
                ("x", rand_tensor(r, &[n, k], -1.0, 1.0)),
                ("w", rand_tensor(r, &[k, m], -1.0, 1.0)),
                ("b", rand_tensor(r, &[m], -1.0, 1.0)),
            ])
        },
        |g, _| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = g.linear(x, w, b)?;
            g.add_bias(y, b)
        },
    );
}

fn pair(r: &mut ChaCha8Rng) -> ParamStore {
    let (n, m, _) = dims(r);
    store(vec![("a", rand_tensor(r, &[n, m], -1.5, 1.5)), ("b", rand_tensor(r, &[n, m], -1.5, 1.5))])
}

#[test]
fn elementwise_binary() {
    check_op("add", pair, |g, _| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.add(a, b)
    });
    check_op("sub", pair, |g, _| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.sub(a, b)
    });
    check_op("mul", pair, |g, _| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        g.mul(a, b)
    });
    // shared operand: gradients from both inputs accumulate
    check_op("mul(a, a)", pair, |g, _| {
        let a = g.param("a")?;
        g.mul(a, a)
    });
}

fn single(r: &mut ChaCha8Rng) -> ParamStore {
    let (n, m, _) = dims(r);
    store(vec![("x", rand_tensor(r, &[n, m], -2.0, 2.0))])
}

#[test]
fn elementwise_unary() {
    check_op("tanh", single, |g, _| {
        let x = g.param("x")?;
        Ok(g.tanh(x))
    });
    check_op("sigmoid", single, |g, _| {
        let x = g.param("x")?;
        Ok(g.sigmoid(x))
    });
    check_op("affine", single, |g, _| {
        let x = g.param("x")?;
        Ok(g.affine(x, -1.7, 0.3))
    });
    check_op("neg/one_minus", single, |g, _| {
        let x = g.param("x")?;
        let n = g.neg(x);
        Ok(g.one_minus(n))
    });
    check_op(
        "log",
        |r| {
            let n = r.gen_range(1..6);
            store(vec![("x", rand_tensor(r, &[n], 0.3, 3.0))])
        },
        |g, _| {
            let x = g.param("x")?;
            Ok(g.log(x))
        },
    );
}

#[test]
fn scale_by_scalar_var() {
    check_op(
        "scale_by",
        |r| {
            let n = r.gen_range(1..7);
            store(vec![("x", rand_tensor(r, &[n], -1.0, 1.0)), ("s", rand_tensor(r, &[1], -2.0, 2.0))])
        },
        |g, _| {
            let (x, s) = (g.param("x")?, g.param("s")?);
            g.scale_by(x, s)
        },
    );
}

#[test]
fn shape_ops() {
    check_op(
        "concat",
        |r| {
            let n = r.gen_range(1..4);
            let (ca, cb) = (r.gen_range(1..4), r.gen_range(1..4));
            store(vec![("a", rand_tensor(r, &[n, ca], -1.0, 1.0)), ("b", rand_tensor(r, &[n, cb], -1.0, 1.0))])
        },
        |g, _| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.concat(&[a, b, a])
        },
    );
    check_op(
        "slice",
        |r| {
            let n = r.gen_range(3..9);
            store(vec![("x", rand_tensor(r, &[n], -1.0, 1.0))])
        },
        |g, p| {
            let n = p.get("x")?.numel();
            let x = g.param("x")?;
            g.slice(x, 1, n - 2)
        },
    );
    check_op("row/stack", single, |g, p| {
        let rows = p.get("x")?.rows();
        let x = g.param("x")?;
        let mut rs = Vec::new();
        for i in (0..rows).rev() {
            rs.push(g.row(x, i)?);
        }
        rs.push(g.row(x, 0)?);
        g.stack(&rs)
    });
    check_op("reshape", single, |g, p| {
        let n = p.get("x")?.numel();
        let x = g.param("x")?;
        g.reshape(x, vec![n])
    });
}

#[test]
fn gather_with_repeated_ids() {
    check_op(
        "gather",
        |r| {
            let c = r.gen_range(1..4);
            store(vec![("t", rand_tensor(r, &[5, c], -1.0, 1.0))])
        },
        |g, _| {
            let t = g.param("t")?;
            g.gather(t, &[3, 0, 3, 4, 3])
        },
    );
}

#[test]
fn softmax_plain_and_masked() {
    let vec_param = |r: &mut ChaCha8Rng| {
        let n = r.gen_range(2..8);
        store(vec![("x", rand_tensor(r, &[n], -3.0, 3.0))])
    };
    check_op("softmax", vec_param, |g, _| {
        let x = g.param("x")?;
        g.softmax(x, None)
    });
    check_op("masked softmax", vec_param, |g, p| {
        let n = p.get("x")?.numel();
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = g.param("x")?;
        g.softmax(x, Some(&mask))
    });
}

#[test]
fn reductions_and_pick() {
    check_op("sum/mean", single, |g, _| {
        let x = g.param("x")?;
        let s = g.sum(x);
        let m = g.mean(x);
        let t = g.tanh(s);
        g.mul(t, m)
    });
    check_op(
        "pick",
        |r| {
            let n = r.gen_range(3..7);
            store(vec![("x", rand_tensor(r, &[n], -1.0, 1.0))])
        },
        |g, _| {
            let x = g.param("x")?;
            let a = g.pick(x, 2)?;
            let b = g.pick(x, 0)?;
            g.mul(a, b)
        },
    );
}

#[test]
fn scatter_add_repeated_indices() {
    check_op(
        "scatter_add",
        |r| store(vec![("base", rand_tensor(r, &[4], -1.0, 1.0)), ("src", rand_tensor(r, &[5], -1.0, 1.0))]),
        |g, _| {
            let (b, s) = (g.param("base")?, g.param("src")?);
            g.scatter_add(b, s, &[1, 5, 1, 6, 5], 7)
        },
    );
}

#[test]
fn dropout_with_a_fixed_mask() {
    check_op("dropout", single, |g, _| {
        let x = g.param("x")?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        g.dropout(x, 0.4, &mut rng)
    });
}

#[test]
fn inference_forward_equals_recording_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = store(vec![("w", rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)), ("x", rand_tensor(&mut rng, &[2, 4], -1.0, 1.0))]);
    let run = |g: &mut Graph<'_>| {
        let (w, x) = (g.param("w").unwrap(), g.param("x").unwrap());
        let y = g.matmul(x, w).unwrap();
        let y = g.tanh(y);
        let r = g.row(y, 1).unwrap();
        let s = g.softmax(r, None).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(&mut Graph::with_params(&p)), run(&mut Graph::inference(&p)));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..20), keep in prop::collection::vec(any::<bool>(), 20)) {
        let n = xs.len();
        let mut mask: Vec<bool> = keep[..n].to_vec();
        mask[0] = true;
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs));
        let p = g.softmax(x, Some(&mask)).unwrap();
        let v = g.value(p).data();
        prop_assert!(v.iter().all(|&a| a >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(v.iter().zip(&mask).all(|(&a, &m)| m || a == 0.0));
    }
}
