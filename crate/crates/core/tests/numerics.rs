use dmpt::numerics::{
    grad_check, linear, BlockShape, Graph, ParamStore, Tensor, TransformerBlock, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
    Tensor::matrix(r, c, d.to_vec()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn row_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn matmul_identity_and_dot() {
    let g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let b = g.constant(mat(2, 2, &[3., 4., 5., 6.]));
    assert_eq!(i2.matmul(b).unwrap().value().data(), &[3., 4., 5., 6.]);
    let r = g.constant(mat(1, 2, &[1., 2.]));
    let c = g.constant(mat(2, 1, &[3., 4.]));
    assert_eq!(r.matmul(c).unwrap().value().data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let g = Graph::new();
    let c = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
    for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 5]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let s = g.constant(Tensor::vector(vec![0.0, 0.0])).softmax().unwrap().value();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = g.constant(Tensor::vector(vec![1000.0, 1000.0])).softmax().unwrap().value();
    assert_eq!(s.data(), &[0.5, 0.5]);

    // Reference: exact sums of e^0, e^1, e^2 after shifting by the max.
    let s = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).softmax().unwrap().value();
    let e = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
    let z = e[0] + e[1] + e[2];
    for (x, y) in s.data().iter().zip(e.iter()) {
        assert!((x - y / z).abs() < 1e-12);
    }
    assert!(g.constant(Tensor::zeros(&[2, 0])).softmax().is_err());
}

#[test]
fn layer_norm_examples() {
    let g = Graph::new();
    let one = g.constant(Tensor::full(&[4], 1.0));
    let zero = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let y = x.layer_norm(one, zero, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|v| *v == 0.0));

    let one2 = g.constant(Tensor::full(&[2], 1.0));
    let zero2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(mat(1, 2, &[1.0, -1.0]));
    assert_eq!(x.layer_norm(one2, zero2, 0.0).unwrap().value().data(), &[1.0, -1.0]);

    let mut r = rng(2);
    let one16 = g.constant(Tensor::full(&[16], 1.0));
    let zero16 = g.constant(Tensor::zeros(&[16]));
    let x = g.constant(Tensor::randn(&[1, 16], 3.0, &mut r));
    let y = x.layer_norm(one16, zero16, 1e-5).unwrap().value();
    let mu: f64 = y.data().iter().sum::<f64>() / 16.0;
    let var: f64 = y.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
    assert!(mu.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6);

    assert!(x.layer_norm(one2, zero16, 1e-5).is_err());
}

#[test]
fn linear_examples() {
    let mut r = rng(3);
    let g = Graph::new();
    let x = g.constant(Tensor::randn(&[2, 3], 1.0, &mut r));
    let y = linear(x, g.constant(Tensor::identity(3)), g.constant(Tensor::zeros(&[3]))).unwrap();
    assert_eq!(y.value(), x.value());
    let c = Tensor::vector(vec![1.0, -2.0]);
    let y = linear(x, g.constant(Tensor::zeros(&[3, 2])), g.constant(c.clone())).unwrap();
    for i in 0..2 {
        assert_eq!(y.value().row(i), c.data());
    }
    let w = Tensor::randn(&[3, 2], 1.0, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    let y = linear(x, g.constant(w.clone()), g.constant(b.clone())).unwrap().value();
    let prod = naive_matmul(&x.value(), &w);
    for i in 0..2 {
        for j in 0..2 {
            assert!((y.at(i, j) - (prod[i * 2 + j] + b.data()[j])).abs() < 1e-12);
        }
    }
    assert!(linear(x, g.constant(Tensor::zeros(&[4, 2])), g.constant(c)).is_err());
}

fn random_block(store: &mut ParamStore, shape: BlockShape, seed: u64) -> TransformerBlock {
    let mut r = rng(seed);
    let block = TransformerBlock::register(store, "blk", shape, false, false, &mut r).unwrap();
    // Non-trivial norms and biases so the oracle exercises every parameter.
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        if shape.len() == 1 {
            let v = Tensor::randn(&shape, 0.5, &mut r).map(|x| x + 1.0);
            store.set_value(id, v).unwrap();
        }
    }
    block
}

/// Hand-rolled pre-norm block, one head.
fn scripted_block(store: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
    let get = |n: &str| store.by_name(n).unwrap().value.clone();
    let (t, d) = (x.rows(), x.cols());
    let ln = |rows: &Vec<Vec<f64>>, gname: &str, bname: &str| -> Vec<Vec<f64>> {
        let (gm, bt) = (get(gname), get(bname));
        rows.iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                (0..d)
                    .map(|j| (r[j] - mu) / (var + 1e-5).sqrt() * gm.data()[j] + bt.data()[j])
                    .collect()
            })
            .collect()
    };
    let aff = |rows: &Vec<Vec<f64>>, p: &str| -> Vec<Vec<f64>> {
        let (w, b) = (get(&format!("{p}/weight")), get(&format!("{p}/bias")));
        rows.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|j| b.data()[j] + (0..w.rows()).map(|k| r[k] * w.at(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let xs: Vec<Vec<f64>> = (0..t).map(|i| x.row(i).to_vec()).collect();
    let h = ln(&xs, "blk/ln1/gamma", "blk/ln1/beta");
    let (q, k, v) = (aff(&h, "blk/attn/q"), aff(&h, "blk/attn/k"), aff(&h, "blk/attn/v"));
    let mut attn = vec![vec![0.0; d]; t];
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let w = row_softmax(&logits);
        for j in 0..t {
            for c in 0..d {
                attn[i][c] += w[j] * v[j][c];
            }
        }
    }
    let o = aff(&attn, "blk/attn/o");
    let x1: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|c| xs[i][c] + o[i][c]).collect()).collect();
    let h2 = ln(&x1, "blk/ln2/gamma", "blk/ln2/beta");
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let f1: Vec<Vec<f64>> = aff(&h2, "blk/ffn/fc1").into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let f2 = aff(&f1, "blk/ffn/fc2");
    (0..t).map(|i| (0..d).map(|c| x1[i][c] + f2[i][c]).collect()).collect()
}

#[test]
fn mhsa_block_matches_scripted_attention() {
    let shape = BlockShape { width: 4, hidden: 8, heads: 1 };
    let mut store = ParamStore::new();
    let block = random_block(&mut store, shape, 11);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(12));
    let g = Graph::new();
    let p = store.bind(&g);
    let y = block.forward(&p, g.constant(x.clone())).unwrap().value();
    let oracle = scripted_block(&store, &x);
    for i in 0..3 {
        for j in 0..4 {
            assert!((y.at(i, j) - oracle[i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn mhsa_single_token_and_identical_tokens() {
    let shape = BlockShape { width: 6, hidden: 12, heads: 2 };
    let mut store = ParamStore::new();
    let block = random_block(&mut store, shape, 21);
    let g = Graph::new();
    let p = store.bind(&g);
    let tok = Tensor::randn(&[1, 6], 1.0, &mut rng(22));

    // One token: the attention output is exactly the value projection.
    let y = block.forward(&p, g.constant(tok.clone())).unwrap().value();
    let x = g.constant(tok.clone());
    let h = block.ln1.forward(&p, x).unwrap();
    let v = block.v.forward(&p, h).unwrap();
    let x1 = x.add(block.o.forward(&p, v).unwrap()).unwrap();
    let f = block.ff2.forward(&p, block.ff1.forward(&p, block.ln2.forward(&p, x1).unwrap()).unwrap().gelu()).unwrap();
    let manual = x1.add(f).unwrap().value();
    assert!(y.max_abs_diff(&manual) < 1e-12);

    let rep = Tensor::from_rows(&[tok.data().to_vec(), tok.data().to_vec(), tok.data().to_vec()]).unwrap();
    let y = block.forward(&p, g.constant(rep)).unwrap().value();
    assert_eq!(y.row(0), y.row(1));
    assert_eq!(y.row(1), y.row(2));
}

#[test]
fn mhsa_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let err = TransformerBlock::register(
        &mut store,
        "b",
        BlockShape { width: 6, hidden: 4, heads: 4 },
        true,
        false,
        &mut rng(0),
    )
    .unwrap_err();
    assert!(matches!(err, dmpt::Error::Config(_)));
}

#[test]
fn backward_examples() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().item(), 6.0);

    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(5.0)).add(x.sum().scale(0.0)).unwrap();
    g.backward(c).unwrap();
    assert!(x.grad().map_or(true, |t| t.data().iter().all(|v| *v == 0.0)));

    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(dmpt::Error::Contract(_))));
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut store = ParamStore::new();
    store.add("logits", Tensor::randn(&[3, 5], 1.0, &mut rng(5)), false).unwrap();
    let target = Tensor::randn(&[3, 5], 1.0, &mut rng(6)).map(f64::abs);
    let report = grad_check(&store, 1e-5, |g, p| {
        let id = store.id("logits").unwrap();
        let lp = p[id].log_softmax()?;
        Ok(lp.mul(g.constant(target.clone()))?.sum().scale(-1.0))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, 15);
}

#[test]
fn grad_check_quadratic_and_frozen() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![0.3, -1.2, 2.0]), false).unwrap();
    store.add("frozen", Tensor::vector(vec![1.0, 2.0, 3.0]), true).unwrap();
    let x = store.id("x").unwrap();
    let f = store.id("frozen").unwrap();
    let report = grad_check(&store, 1e-4, |_, p| Ok(p[x].mul(p[x])?.mul(p[f])?.sum())).unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
    assert_eq!(report.excluded, vec!["frozen".to_string()]);
    assert_eq!(report.checked, 3);
}

#[test]
fn grad_check_reports_non_finite() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![1e-6]), false).unwrap();
    let x = store.id("x").unwrap();
    let err = grad_check(&store, 1e-3, |_, p| Ok(p[x].ln().sum())).unwrap_err();
    assert!(err.to_string().contains("x[0]"), "{err}");
}

#[test]
fn double_backward_accumulates() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.5]));
    let y = x.mul(x).unwrap().sum();
    g.backward(y).unwrap();
    let once = x.grad().unwrap();
    g.backward(y).unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(x.grad().is_none());
}

/// Every differentiable primitive against central differences.
#[test]
fn primitive_gradients_match_finite_differences() {
    type Build = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> dmpt::Result<Var<'g>>>;
    let mut r = rng(9);
    let w = Tensor::randn(&[3, 4], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    let gamma = Tensor::randn(&[4], 1.0, &mut r);
    let weights = Tensor::randn(&[2, 4], 1.0, &mut r);
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", Box::new(move |g, x| Ok(x.t().matmul(g.constant(w.clone()))?.sum()))),
        ("add_row", Box::new(move |g, x| Ok(x.add_row(g.constant(bias.clone()))?.mul(x)?.sum()))),
        ("softmax", {
            let weights = weights.clone();
            Box::new(move |g, x| Ok(x.softmax()?.mul(g.constant(weights.clone()))?.sum()))
        }),
        ("log_softmax", {
            let weights = weights.clone();
            Box::new(move |g, x| Ok(x.log_softmax()?.mul(g.constant(weights.clone()))?.sum()))
        }),
        ("layer_norm", {
            let weights = weights.clone();
            Box::new(move |g, x| {
                let y = x.layer_norm(g.constant(gamma.clone()), g.constant(Tensor::zeros(&[4])), 1e-5)?;
                Ok(y.mul(g.constant(weights.clone()))?.sum())
            })
        }),
        ("normalize_rows", {
            let weights = weights.clone();
            Box::new(move |g, x| Ok(x.normalize_rows()?.mul(g.constant(weights.clone()))?.sum()))
        }),
        ("pairwise_sq_dist", Box::new(|_, x| Ok(x.pairwise_sq_dist().add_scalar(1.0).sqrt().sum()))),
        ("gelu_exp", Box::new(|_, x| Ok(x.gelu().exp().mean()))),
        ("abs_relu", Box::new(|_, x| Ok(x.abs().add(x.relu())?.sum()))),
        ("slices", Box::new(|g, x| {
            let a = x.slice_cols(1, 3)?;
            let b = x.slice_rows(1, 2)?;
            let c = g.concat_cols(&[a, a])?;
            let d = g.concat_rows(&[b, b])?;
            Ok(c.mul(c)?.sum().add(d.mul(d)?.sum())?)
        })),
        ("pick", Box::new(|_, x| Ok(x.pick(&[0, 5, 5, 7])?.exp().sum()))),
    ];
    for (name, build) in cases {
        let mut store = ParamStore::new();
        let base = Tensor::randn(&[2, 4], 1.0, &mut r);
        let id = store.add("x", if name == "matmul" { Tensor::randn(&[3, 2], 1.0, &mut r) } else { base }, false).unwrap();
        let report = grad_check(&store, 1e-5, |g, p| build(g, p[id])).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..8), c in -100.0f64..100.0) {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(v.clone())).softmax().unwrap().value();
        let b = g.constant(Tensor::vector(v.iter().map(|x| x + c).collect())).softmax().unwrap().value();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        prop_assert!(a.data().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let c = Tensor::randn(&[n, p], 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn block_gradients_match_finite_differences(seed in 0u64..50) {
        let shape = BlockShape { width: 4, hidden: 6, heads: 2 };
        let mut store = ParamStore::new();
        let block = random_block(&mut store, shape, seed);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(seed + 100));
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng(seed + 200));
        let report = grad_check(&store, 1e-5, |g, p| {
            Ok(block.forward(p, g.constant(x.clone()))?.mul(g.constant(w.clone()))?.sum())
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }
}
