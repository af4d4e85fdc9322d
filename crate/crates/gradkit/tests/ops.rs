use gradkit::gradcheck::{check_leaves, relative_error};
use gradkit::{GradError, Graph, ParamStore, SoftmaxAxis, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    t(shape, &v)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::identity(2));
    let b = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(GradError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let w = random(&[3, 2], &mut rng);
    let report = check_leaves(&[a, b], 1e-4, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        let wc = g.constant(w.clone());
        let p = g.mul(c, wc)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert_eq!(report.checked, 20);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn elementwise_basics() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.constant(t(&[3, 1], &[-1., 0., 2.]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);

    let a = g.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(g.add(a, x), Err(GradError::Shape { .. })));
}

#[test]
fn tanh_gradient_at_point_three() {
    let report = check_leaves(&[Tensor::scalar(0.3)], 1e-4, |g, v| Ok(g.tanh(v[0]))).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(0.3));
    let y = g.tanh(x);
    let grads = g.backward(y).unwrap();
    let want = 1.0 - 0.3f64.tanh().powi(2);
    assert!((grads.wrt(x).unwrap().item() - want).abs() < 1e-12);
}

#[test]
fn softmax_uniform_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 2]));
    let y = g.softmax_masked(x, &[true; 6], SoftmaxAxis::Columns).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = g.constant(Tensor::full(&[2, 3], 0.7));
    let y = g.softmax_masked(x, &[true; 6], SoftmaxAxis::Global).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_columns_direct_evaluation() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1., 2., 3., 0.]));
    let y = g.softmax_masked(x, &[true; 4], SoftmaxAxis::Columns).unwrap();
    let y = g.value(y);
    // column 0 holds scores 1 and 3, column 1 holds 2 and 0
    let e = f64::exp;
    let want = [
        e(1.) / (e(1.) + e(3.)),
        e(2.) / (e(2.) + e(0.)),
        e(3.) / (e(1.) + e(3.)),
        e(0.) / (e(2.) + e(0.)),
    ];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((y.get(0, 0) + y.get(1, 0) - 1.0).abs() < 1e-6);
    assert!((y.get(0, 1) + y.get(1, 1) - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_fully_masked_group_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let mask = [true, false, true, false];
    assert!(matches!(
        g.softmax_masked(x, &mask, SoftmaxAxis::Columns),
        Err(GradError::Degenerate { .. })
    ));
    let y = g
        .softmax_masked_or_zero(x, &mask, SoftmaxAxis::Columns)
        .unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5, 0.0]);
}

#[test]
fn max_over_time_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1, 3], &[1., 5., 2.]));
    let p = g.max_over_time(x, &[true; 3]).unwrap();
    assert_eq!(g.value(p.value).item(), 5.0);
    assert_eq!(p.argmax, vec![1]);

    let q = g.max_over_time(x, &[true, false, true]).unwrap();
    assert_eq!(g.value(q.value).item(), 2.0);
    assert_eq!(q.argmax, vec![2]);

    assert!(matches!(
        g.max_over_time(x, &[false; 3]),
        Err(GradError::Degenerate { .. })
    ));
}

#[test]
fn max_over_time_gradient_hits_argmax_only() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2, 4], &[0.1, 0.9, 0.9, -1., 3., 2., 1., 0.]));
    let p = g.max_over_time(x, &[true; 4]).unwrap();
    assert_eq!(p.argmax, vec![1, 0]);
    let s = g.sum(p.value);
    let grads = g.backward(s).unwrap();
    assert_eq!(
        grads.wrt(x).unwrap().data(),
        &[0., 1., 0., 0., 1., 0., 0., 0.]
    );
}

#[test]
fn dropout_identity_cases_and_rate_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[4, 4], 2.0));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(
        g.dropout(x, 1.0, true, &mut rng),
        Err(GradError::Config(_))
    ));
    assert!(g.dropout(x, -0.1, false, &mut rng).is_err());
}

#[test]
fn inverted_dropout_keeps_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[10_000, 1], 1.0));
    let y = g.dropout(x, 0.35, true, &mut rng).unwrap();
    let vals = g.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.35).abs() < 0.02, "zero fraction {zeros}");
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

#[test]
fn dropout_is_deterministic_given_rng_state() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[50, 3], 1.5));
        let y = g.dropout(x, 0.35, true, &mut rng).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_square_and_sigmoid_product() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 6.0);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(1.0));
    let y = g.leaf(Tensor::scalar(2.0));
    let xy = g.mul(x, y).unwrap();
    let s = g.sigmoid(xy);
    let grads = g.backward(s).unwrap();
    let closed = sigmoid(2.0) * (1.0 - sigmoid(2.0)) * 2.0;
    let fd = (sigmoid(1.0001 * 2.0) - sigmoid(0.9999 * 2.0)) / 2e-4;
    let dx = grads.wrt(x).unwrap().item();
    assert!((dx - closed).abs() < 1e-12);
    assert!(relative_error(dx, fd) < 1e-4);
}

#[test]
fn backward_requires_scalar_seed() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 1]));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(GradError::NonScalarSeed(_))));
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let unused = g.leaf(Tensor::zeros(&[2, 3]));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    let gu = grads.wrt(unused).unwrap();
    assert_eq!(gu.shape(), &[2, 3]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn concat_rows_shapes_and_gradient_slices() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2, 3], 1.0));
    let b = g.leaf(Tensor::full(&[4, 3], 2.0));
    let c = g.concat_rows(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[6, 3]);
    assert_eq!(g.concat_rows(&[a]).unwrap(), a);

    let w: Vec<f64> = (0..18).map(|v| v as f64).collect();
    let wc = g.constant(t(&[6, 3], &w));
    let p = g.mul(c, wc).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(a).unwrap().data(), &w[..6]);
    assert_eq!(grads.wrt(b).unwrap().data(), &w[6..]);

    let bad = g.leaf(Tensor::zeros(&[1, 2]));
    assert!(matches!(g.concat_rows(&[a, bad]), Err(GradError::Shape { .. })));
}

#[test]
fn embed_accumulates_repeated_rows_into_params() {
    let mut store = ParamStore::<f64>::new();
    let table: Vec<f64> = (0..20).map(|v| v as f64 * 0.1).collect();
    let id = store.add("table", t(&[5, 4], &table));
    let mut g = Graph::with_params(&store);
    let tv = g.param(id).unwrap();
    let e = g.embed(tv, &[3, 3]).unwrap();
    assert_eq!(g.value(e).column_values(0), g.value(e).column_values(1));
    let s = g.sum(e);
    let grads = g.backward(s).unwrap();
    let dense = grads.param_dense(id, 20);
    assert_eq!(&dense[12..16], &[2.0; 4]);
    assert_eq!(dense.iter().sum::<f64>(), 8.0);
    assert!(matches!(
        g.embed(tv, &[5]),
        Err(GradError::IndexOutOfRange { index: 5, rows: 5 })
    ));
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 4], &mut rng);
    let y = random(&[3, 4], &mut rng);
    let col = random(&[3, 1], &mut rng);
    let w: &'static Tensor<f64> = Box::leak(Box::new(random(&[3, 4], &mut rng)));
    let tol = 1e-4;

    type Case = Box<dyn Fn(&mut Graph<f64>, &[gradkit::Var]) -> gradkit::Result<gradkit::Var>>;
    let weighted = move |g: &mut Graph<f64>, v: gradkit::Var| -> gradkit::Result<gradkit::Var> {
        let wv = g.constant(w.clone());
        let p = g.mul(v, wv)?;
        Ok(g.sum(p))
    };
    let cases: Vec<(&str, Case)> = vec![
        ("add", Box::new(move |g, v| {
            let r = g.add(v[0], v[1])?;
            weighted(g, r)
        })),
        ("sub", Box::new(move |g, v| {
            let r = g.sub(v[0], v[1])?;
            weighted(g, r)
        })),
        ("mul", Box::new(move |g, v| {
            let r = g.mul(v[0], v[1])?;
            weighted(g, r)
        })),
        ("sigmoid", Box::new(move |g, v| {
            let r = g.sigmoid(v[0]);
            weighted(g, r)
        })),
        ("tanh", Box::new(move |g, v| {
            let r = g.tanh(v[0]);
            weighted(g, r)
        })),
        ("scale", Box::new(move |g, v| {
            let r = g.scale(v[0], -1.7);
            weighted(g, r)
        })),
        ("softmax_columns", Box::new(move |g, v| {
            let mut mask = vec![true; 12];
            mask[5] = false;
            let r = g.softmax_masked(v[0], &mask, SoftmaxAxis::Columns)?;
            weighted(g, r)
        })),
        ("softmax_global", Box::new(move |g, v| {
            let r = g.softmax_masked(v[0], &[true; 12], SoftmaxAxis::Global)?;
            weighted(g, r)
        })),
        ("softmax_rows", Box::new(move |g, v| {
            let r = g.softmax_masked(v[0], &[true; 12], SoftmaxAxis::Rows)?;
            weighted(g, r)
        })),
        ("transpose", Box::new(move |g, v| {
            let r = g.transpose(v[0]);
            let r = g.transpose(r);
            weighted(g, r)
        })),
        ("concat_slice", Box::new(move |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let s = g.slice_cols(c, 2, 4)?;
            let r = g.slice_rows(s, 0, 3)?;
            weighted(g, r)
        })),
        ("unfold", Box::new(move |g, v| {
            let u = g.unfold(v[0], 3, 1)?;
            let t = g.tanh(u);
            Ok(g.sum(t))
        })),
        ("mask_cols", Box::new(move |g, v| {
            let r = g.mask_cols(v[0], &[true, false, true, true])?;
            weighted(g, r)
        })),
        ("cosine", Box::new(move |g, v| g.cosine(v[0], v[1]))),
        ("max_over_time", Box::new(move |g, v| {
            let p = g.max_over_time(v[0], &[true, true, false, true])?;
            let t = g.tanh(p.value);
            Ok(g.sum(t))
        })),
    ];
    for (name, f) in &cases {
        let report = check_leaves(&[x.clone(), y.clone()], 1e-4, f).unwrap();
        assert!(report.passes(tol), "{name}: {report:?}");
    }
    let report = check_leaves(&[x.clone(), col], 1e-4, |g, v| {
        let r = g.add_col_broadcast(v[0], v[1])?;
        let r = g.sigmoid(r);
        Ok(g.sum(r))
    })
    .unwrap();
    assert!(report.passes(tol), "add_col_broadcast: {report:?}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn softmax_groups_sum_to_one(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            mask_bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let mut mask = mask_bits;
            for j in 0..4 { mask[j] = true; } // first row alive keeps every column non-empty
            let mut g = Graph::<f64>::new();
            let x = g.constant(t(&[3, 4], &vals));
            let y = g.softmax_masked(x, &mask, SoftmaxAxis::Columns).unwrap();
            let y = g.value(y);
            for j in 0..4 {
                let s: f64 = (0..3).map(|i| y.get(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for i in 0..3 {
                    if !mask[i * 4 + j] { prop_assert_eq!(y.get(i, j), 0.0); }
                }
            }
        }

        #[test]
        fn max_over_time_ignores_masked_values(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            junk in proptest::collection::vec(-100.0f64..100.0, 2),
        ) {
            let mask = [true, false, true, true];
            let mut other = vals.clone();
            other[1] = junk[0];
            other[5] = junk[1];
            let mut g = Graph::<f64>::new();
            let a = g.constant(t(&[2, 4], &vals));
            let b = g.constant(t(&[2, 4], &other));
            let pa = g.max_over_time(a, &mask).unwrap();
            let pb = g.max_over_time(b, &mask).unwrap();
            prop_assert_eq!(g.value(pa.value), g.value(pb.value));
            prop_assert_eq!(pa.argmax, pb.argmax);
        }

        #[test]
        fn lstm_like_chain_gradient_check(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&[3, 2], &mut rng);
            let x = random(&[2, 1], &mut rng);
            let h = random(&[3, 1], &mut rng);
            let report = check_leaves(&[w, x, h], 1e-4, |g, v| {
                let wx = g.matmul(v[0], v[1])?;
                let s = g.sigmoid(wx);
                let th = g.tanh(v[2]);
                let p = g.mul(s, th)?;
                Ok(g.sum(p))
            }).unwrap();
            prop_assert!(report.passes(1e-4), "{:?}", report);
        }
    }
}
