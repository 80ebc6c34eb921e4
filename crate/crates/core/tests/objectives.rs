mod common;

use common::rng;
use dmpt::error::Error;
use dmpt::numerics::{grad_check, Graph, ParamStore, Tensor};
use dmpt::objectives::{
    center_mae, contrastive_loss, cross_entropy_smoothed, total_loss, triplet_batch_hard, BatchFeatures, JointPair,
    LossConfig, LossWeights,
};
use proptest::prelude::*;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn oracle_contrastive(z: &Tensor, a: &Tensor, targets: &[usize], tau: f64) -> f64 {
    let (z, a) = (rows(z), rows(a));
    let mut total = 0.0;
    for (zi, &t) in z.iter().zip(targets) {
        let logits: Vec<f64> = a.iter().map(|aj| cosine(zi, aj) / tau).collect();
        total += log_sum_exp(&logits) - logits[t];
    }
    total / z.len() as f64
}

fn oracle_ce(logits: &Tensor, labels: &[usize], eps: f64) -> f64 {
    let n = logits.cols();
    let mut total = 0.0;
    for (row, &y) in rows(logits).iter().zip(labels) {
        let lse = log_sum_exp(row);
        for (c, x) in row.iter().enumerate() {
            let q = eps / n as f64 + if c == y { 1.0 - eps } else { 0.0 };
            total -= q * (x - lse);
        }
    }
    total / labels.len() as f64
}

fn oracle_triplet(f: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let f = rows(f);
    let b = f.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut hp = f64::NEG_INFINITY;
        let mut hn = f64::INFINITY;
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = dist(&f[i], &f[j]);
            if labels[i] == labels[j] {
                hp = hp.max(d);
            } else {
                hn = hn.min(d);
            }
        }
        total += (hp - hn + margin).max(0.0);
    }
    total / b as f64
}

fn oracle_center(f: &Tensor, labels: &[usize]) -> f64 {
    let f = rows(f);
    let d = f[0].len();
    let mut total = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let members: Vec<&Vec<f64>> = f.iter().zip(labels).filter(|(_, &l)| l == labels[i]).map(|(r, _)| r).collect();
        let center: Vec<f64> = (0..d).map(|c| members.iter().map(|r| r[c]).sum::<f64>() / members.len() as f64).collect();
        total += fi.iter().zip(&center).map(|(x, c)| (x - c).abs()).sum::<f64>() / d as f64;
    }
    total / f.len() as f64
}

fn randn(r: usize, c: usize, seed: u64) -> Tensor {
    Tensor::randn(&[r, c], 1.0, &mut rng(seed))
}

#[test]
fn contrastive_single_anchor_is_zero() {
    let g = Graph::new();
    let z = g.constant(randn(3, 4, 1));
    let a = g.constant(randn(1, 4, 2));
    let l = contrastive_loss(z, a, &[0, 0, 0], 0.07).unwrap();
    assert!(l.item().abs() < 1e-9);
}

#[test]
fn contrastive_equidistant_anchors_give_ln2() {
    let g = Graph::new();
    let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap());
    let l = contrastive_loss(z, a, &[1], 0.07).unwrap();
    assert!((l.item() - 2f64.ln()).abs() < 1e-9, "{}", l.item());
}

#[test]
fn contrastive_matches_direct_formula() {
    let (z, a) = (randn(4, 5, 3), randn(3, 5, 4));
    let targets = [0, 2, 1, 2];
    let g = Graph::new();
    let l = contrastive_loss(g.constant(z.clone()), g.constant(a.clone()), &targets, 0.07).unwrap();
    assert!((l.item() - oracle_contrastive(&z, &a, &targets, 0.07)).abs() < 1e-10);
}

#[test]
fn contrastive_rejects_bad_inputs() {
    let g = Graph::new();
    let z = g.constant(randn(2, 3, 5));
    let a = g.constant(randn(2, 3, 6));
    assert!(matches!(contrastive_loss(z, a, &[0, 2], 0.07), Err(Error::Index { .. })));
    assert!(contrastive_loss(z, a, &[0, 1], 0.0).is_err());
    let zero = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(contrastive_loss(zero, a, &[0, 1], 0.07), Err(Error::Numeric(_))));
}

#[test]
fn ce_uniform_logits_give_ln_n() {
    for &eps in &[0.0, 0.1, 0.5] {
        let g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 7], 2.5));
        let l = cross_entropy_smoothed(logits, &[0, 3, 6], eps).unwrap();
        assert!((l.item() - 7f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn ce_large_gap_vanishes() {
    let g = Graph::new();
    let logits = g.constant(Tensor::matrix(1, 3, vec![40.0, 0.0, 0.0]).unwrap());
    let l = cross_entropy_smoothed(logits, &[0], 0.0).unwrap();
    assert!(l.item() < 1e-6);
}

#[test]
fn ce_matches_direct_formula() {
    let logits = randn(3, 5, 7);
    let labels = [4, 0, 2];
    let g = Graph::new();
    let l = cross_entropy_smoothed(g.constant(logits.clone()), &labels, 0.1).unwrap();
    assert!((l.item() - oracle_ce(&logits, &labels, 0.1)).abs() < 1e-10);
}

#[test]
fn ce_rejects_out_of_range_label() {
    let g = Graph::new();
    let logits = g.constant(randn(2, 3, 8));
    assert!(matches!(cross_entropy_smoothed(logits, &[0, 3], 0.1), Err(Error::Index { .. })));
}

#[test]
fn triplet_identical_features_give_margin() {
    let g = Graph::new();
    let f = g.constant(Tensor::full(&[4, 3], 0.7));
    let l = triplet_batch_hard(f, &[0, 0, 1, 1], 0.3).unwrap();
    assert!((l.item() - 0.3).abs() < 1e-9);
}

#[test]
fn triplet_separated_clusters_give_zero() {
    let g = Graph::new();
    let f = g.constant(Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0]).unwrap());
    let l = triplet_batch_hard(f, &[0, 0, 1, 1], 0.3).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn triplet_matches_exhaustive_scan() {
    let f = randn(8, 4, 9);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let g = Graph::new();
    let l = triplet_batch_hard(g.constant(f.clone()), &labels, 0.3).unwrap();
    assert!((l.item() - oracle_triplet(&f, &labels, 0.3)).abs() < 1e-10);
}

#[test]
fn triplet_reports_missing_positive() {
    let g = Graph::new();
    let f = g.constant(randn(3, 2, 10));
    match triplet_batch_hard(f, &[0, 0, 5], 0.3) {
        Err(Error::Sampling(msg)) => assert!(msg.contains('5'), "{msg}"),
        other => panic!("expected a sampling error, got {other:?}"),
    }
    let f = g.constant(randn(2, 2, 11));
    assert!(matches!(triplet_batch_hard(f, &[1, 1], 0.3), Err(Error::Sampling(_))));
}

#[test]
fn center_singletons_give_zero() {
    let g = Graph::new();
    let l = center_mae(g.constant(randn(4, 3, 12)), &[0, 1, 2, 3]).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn center_symmetric_pair_gives_one() {
    let g = Graph::new();
    let f = g.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap());
    assert!((center_mae(f, &[0, 0]).unwrap().item() - 1.0).abs() < 1e-12);
}

#[test]
fn center_matches_two_pass_oracle() {
    let f = randn(6, 3, 13);
    let labels = [0, 1, 0, 1, 1, 0];
    let g = Graph::new();
    let l = center_mae(g.constant(f.clone()), &labels).unwrap();
    assert!((l.item() - oracle_center(&f, &labels)).abs() < 1e-12);
}

fn zero_batch(g: &Graph) -> BatchFeatures<'_> {
    // Two far-apart tight clusters and confident logits; contrastive uses a
    // single anchor, so every term is zero.
    let features = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 50.0, 0.0]).unwrap();
    let logits = Tensor::matrix(4, 2, vec![1e3, 0.0, 1e3, 0.0, 0.0, 1e3, 0.0, 1e3]).unwrap();
    BatchFeatures {
        features: g.constant(features),
        labels: vec![0, 0, 1, 1],
        logits: g.constant(logits),
        joint: vec![JointPair {
            z: g.constant(randn(4, 3, 14)),
            anchors: g.constant(randn(1, 3, 15)),
            targets: vec![0; 4],
        }],
    }
}

#[test]
fn total_all_zero_terms() {
    let g = Graph::new();
    let cfg = LossConfig {
        smoothing: 0.0,
        ..LossConfig::default()
    };
    let out = total_loss(&zero_batch(&g), &cfg).unwrap();
    assert!(out.total.item().abs() < 1e-12, "{out:?}");
}

fn random_batch(g: &Graph, seed: u64) -> BatchFeatures<'_> {
    BatchFeatures {
        features: g.constant(randn(6, 4, seed)),
        labels: vec![0, 0, 1, 1, 2, 2],
        logits: g.constant(randn(6, 3, seed + 1)),
        joint: (0..3)
            .map(|m| JointPair {
                z: g.constant(randn(6, 5, seed + 2 + m)),
                anchors: g.constant(randn(3, 5, seed + 10 + m)),
                targets: vec![m as usize; 6],
            })
            .collect(),
    }
}

#[test]
fn total_masking_keeps_ce_only() {
    let g = Graph::new();
    let batch = random_batch(&g, 20);
    let cfg = LossConfig {
        weights: LossWeights {
            ce: 1.0,
            triplet: 0.0,
            center: 0.0,
            contrastive: 0.0,
        },
        ..LossConfig::default()
    };
    let out = total_loss(&batch, &cfg).unwrap();
    let ce = cross_entropy_smoothed(batch.logits, &batch.labels, cfg.smoothing).unwrap();
    assert!((out.total.item() - ce.item()).abs() < 1e-12);
    assert!(out.triplet > 0.0 && out.center > 0.0 && out.contrastive > 0.0);
}

#[test]
fn total_recomposes_from_terms() {
    let g = Graph::new();
    let batch = random_batch(&g, 30);
    let cfg = LossConfig::default();
    let out = total_loss(&batch, &cfg).unwrap();
    let ce = cross_entropy_smoothed(batch.logits, &batch.labels, cfg.smoothing).unwrap().item();
    let tri = triplet_batch_hard(batch.features, &batch.labels, cfg.margin).unwrap().item();
    let mae = center_mae(batch.features, &batch.labels).unwrap().item();
    let con: f64 = batch
        .joint
        .iter()
        .map(|p| contrastive_loss(p.z, p.anchors, &p.targets, cfg.tau).unwrap().item())
        .sum();
    assert!((out.total.item() - (ce + tri + mae + con)).abs() < 1e-12);
    assert_eq!((out.ce, out.triplet, out.center, out.contrastive), (ce, tri, mae, con));
}

#[test]
fn total_rejects_invalid_config() {
    let g = Graph::new();
    let batch = random_batch(&g, 40);
    for cfg in [
        LossConfig { tau: 0.0, ..LossConfig::default() },
        LossConfig { margin: -0.1, ..LossConfig::default() },
        LossConfig { smoothing: 1.0, ..LossConfig::default() },
    ] {
        assert!(matches!(total_loss(&batch, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn every_term_passes_grad_check() {
    let mut store = ParamStore::new();
    store.add("f", randn(4, 3, 50), false).unwrap();
    store.add("logits", randn(4, 3, 51), false).unwrap();
    store.add("z", randn(4, 3, 52), false).unwrap();
    store.add("anchors", randn(3, 3, 53), false).unwrap();
    let labels = [0, 0, 1, 1];
    let ids = ["f", "logits", "z", "anchors"].map(|n| store.id(n).unwrap());
    let report = grad_check(&store, 1e-6, |_, p| {
        let batch = BatchFeatures {
            features: p[ids[0]],
            labels: labels.to_vec(),
            logits: p[ids[1]],
            joint: vec![JointPair {
                z: p[ids[2]],
                anchors: p[ids[3]],
                targets: vec![0, 1, 2, 0],
            }],
        };
        Ok(total_loss(&batch, &LossConfig::default())?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert_eq!(report.checked, 12 * 3 + 9);
}

fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(f in matrix_strategy(6, 3), logits in matrix_strategy(6, 4), eps in 0.0f64..0.9) {
        let labels = [0, 1, 2, 0, 1, 2];
        let g = Graph::new();
        prop_assert!(cross_entropy_smoothed(g.constant(logits), &labels, eps).unwrap().item() >= 0.0);
        prop_assert!(triplet_batch_hard(g.constant(f.clone()), &labels, 0.3).unwrap().item() >= 0.0);
        prop_assert!(center_mae(g.constant(f.clone()), &labels).unwrap().item() >= 0.0);
        let anchors = g.constant(Tensor::identity(3));
        let shifted = f.map(|x| x + 3.5);
        prop_assert!(contrastive_loss(g.constant(shifted), anchors, &[0, 1, 2, 0, 1, 2], 0.07).unwrap().item() >= 0.0);
    }

    #[test]
    fn contrastive_is_scale_invariant(z in matrix_strategy(3, 4), s in 0.01f64..100.0) {
        let z = z.map(|x| x + 3.5);
        let a = Tensor::randn(&[2, 4], 1.0, &mut rng(1));
        let g = Graph::new();
        let base = contrastive_loss(g.constant(z.clone()), g.constant(a.clone()), &[0, 1, 1], 0.07).unwrap().item();
        let scaled = contrastive_loss(g.constant(z.map(|x| x * s)), g.constant(a), &[0, 1, 1], 0.07).unwrap().item();
        prop_assert!((base - scaled).abs() < 1e-10);
    }

    #[test]
    fn triplet_is_translation_invariant(f in matrix_strategy(4, 3), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let labels = [0, 1, 0, 1];
        let moved = Tensor::from_rows(&rows(&f).iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect::<Vec<_>>()).unwrap();
        let g = Graph::new();
        let a = triplet_batch_hard(g.constant(f), &labels, 0.3).unwrap().item();
        let b = triplet_batch_hard(g.constant(moved), &labels, 0.3).unwrap().item();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn smoothed_ce_at_zero_is_plain_ce(logits in matrix_strategy(3, 5)) {
        let labels = [1, 4, 0];
        let g = Graph::new();
        let l = cross_entropy_smoothed(g.constant(logits.clone()), &labels, 0.0).unwrap().item();
        let plain: f64 = rows(&logits).iter().zip(&labels).map(|(r, &y)| log_sum_exp(r) - r[y]).sum::<f64>() / 3.0;
        prop_assert!((l - plain).abs() < 1e-12);
    }
}
