use dfcil_autograd::{Array, Conv2dSpec, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Compares the tape gradient of `f` against central differences for every
/// input element; returns the worst relative error.
fn check<F>(inputs: &[Array], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let eval = |arrays: &[Array]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = arrays.iter().map(|a| t.constant(a.clone())).collect();
        f(&t, &vs).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Array::zeros(input.raw_dim()));
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            worst = worst.max(err);
        }
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn elementwise_and_broadcasting() {
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    let b = random(&[1, 4], &mut r);
    let c = random(&[4], &mut r).mapv(|v| v.abs() + 0.5);
    let err = check(&[a, b, c], |_, v| {
        let x = v[0].add(v[1]).mul(v[2]).sub(v[1]).div(v[2]);
        x.tanh().square().add(x.exp()).sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn unary_functions() {
    let mut r = rng();
    let a = random(&[2, 5], &mut r).mapv(|v| v.abs() + 0.2);
    let err = check(&[a], |_, v| {
        let x = v[0];
        x.ln()
            .add(x.sqrt())
            .add(x.scale(-0.3).add_scalar(0.05).relu())
            .add(x.scale(-1.0).add_scalar(0.6).leaky_relu(0.2))
            .neg()
            .mean()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reductions_reshape_select_concat() {
    let mut r = rng();
    let a = random(&[2, 3, 4], &mut r);
    let b = random(&[2, 3, 2], &mut r);
    let err = check(&[a, b], |_, v| {
        let c = Var::concat(&[v[0], v[1]], 2);
        let s = c.sum_axes_keepdim(&[0, 2]).square();
        let m = c.mean_axes_keepdim(&[1]).reshape(&[2, 6]).select(1, &[5, 0, 0, 3]);
        s.sum().add(m.square().sum())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_and_log_softmax() {
    let mut r = rng();
    let a = random(&[4, 3], &mut r);
    let w = random(&[3, 5], &mut r);
    let target = random(&[4, 5], &mut r).mapv(f64::abs);
    let err = check(&[a, w], move |t, v| {
        let target = t.constant(target.clone());
        v[0].matmul(v[1]).scale(3.0).log_softmax().mul(target).sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv2d_strided_and_padded() {
    let mut r = rng();
    let x = random(&[2, 3, 5, 5], &mut r);
    let w = random(&[4, 3, 3, 3], &mut r);
    for spec in [
        Conv2dSpec { stride: 1, padding: 1 },
        Conv2dSpec { stride: 2, padding: 1 },
        Conv2dSpec { stride: 1, padding: 0 },
        Conv2dSpec { stride: 2, padding: 0 },
        Conv2dSpec { stride: 3, padding: 2 },
    ] {
        let err = check(&[x.clone(), w.clone()], move |_, v| {
            v[0].conv2d(v[1], spec).square().sum()
        });
        assert!(err < 1e-6, "{spec:?}: {err}");
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut r = rng();
    let x = random(&[2, 2, 5, 4], &mut r);
    let w = random(&[3, 2, 3, 3], &mut r);
    for (stride, padding) in [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (3, 2)] {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), Conv2dSpec { stride, padding })
            .value();
        let (ho, wo) = ((5 + 2 * padding - 3) / stride + 1, (4 + 2 * padding - 3) / stride + 1);
        assert_eq!(y.shape(), &[2, 3, ho, wo]);
        for n in 0..2 {
            for o in 0..3 {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    let ii = (stride * i + a) as isize - padding as isize;
                                    let jj = (stride * j + b) as isize - padding as isize;
                                    if (0..5).contains(&ii) && (0..4).contains(&jj) {
                                        acc += w[[o, c, a, b]] * x[[n, c, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[n, o, i, j]] - acc).abs() < 1e-12, "stride {stride} padding {padding}");
                    }
                }
            }
        }
    }
}

#[test]
fn batch_norm_train_gradients() {
    let mut r = rng();
    let x = random(&[4, 3, 2, 2], &mut r);
    let g = random(&[3], &mut r);
    let b = random(&[3], &mut r);
    let weights = random(&[4, 3, 2, 2], &mut r);
    let err = check(&[x, g, b], move |t, v| {
        let w = t.constant(weights.clone());
        v[0].batch_norm_train(v[1], v[2], 1e-5).out.mul(w).tanh().sum()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_reports_biased_moments() {
    let tape = Tape::new();
    let x = Array::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let one = tape.constant(Array::ones(IxDyn(&[1])));
    let zero = tape.constant(Array::zeros(IxDyn(&[1])));
    let bn = tape.constant(x).batch_norm_train(one, zero, 0.0);
    assert!((bn.mean[0] - 3.0).abs() < 1e-12);
    assert!((bn.var[0] - 3.5).abs() < 1e-12);
    let out = bn.out.value();
    assert!(out.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn upsample_and_filter() {
    let mut r = rng();
    let x = random(&[1, 2, 3, 4], &mut r);
    let k = [[0.1, 0.2, 0.1], [0.2, 0.4, 0.2], [0.1, 0.2, 0.1]];
    let err = check(&[x], move |_, v| {
        v[0].upsample2x().filter3x3_reflect(k).square().sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn detach_cuts_gradient_exactly() {
    let tape = Tape::new();
    let a = tape.leaf(Array::from_elem(IxDyn(&[3]), 2.0));
    let b = tape.leaf(Array::from_elem(IxDyn(&[3]), 5.0));
    let loss = a.detach().mul(b).sum();
    let grads = tape.backward(loss);
    assert!(grads.get(a).is_none());
    assert!(grads.get(b).unwrap().iter().all(|&g| g == 2.0));
}

#[test]
fn unused_leaf_has_no_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(Array::ones(IxDyn(&[2])));
    let b = tape.leaf(Array::ones(IxDyn(&[2])));
    let loss = a.square().sum();
    let grads = tape.backward(loss);
    assert!(grads.get(b).is_none());
    assert!(grads.get(a).is_some());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn log_softmax_rows_normalize(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let tape = Tape::new();
            let x = tape.constant(Array::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap());
            let lp = x.log_softmax().value();
            for row in lp.rows() {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
