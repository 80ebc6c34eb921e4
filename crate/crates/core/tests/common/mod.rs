#![allow(dead_code)]

use dmpt::backbone::EncoderConfig;
use dmpt::numerics::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "row width");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn tiny_encoder(layers: usize, d: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        d_v: d,
        d_t: d,
        d_e: d,
        heads,
        grid: 2,
        patch: 2,
        channels: 1,
        ffn_mult: 2,
    }
}

/// Row-wise `x W + b`, read from `<prefix>/weight` and `<prefix>/bias`.
pub fn affine(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let w = &store.by_name(&format!("{prefix}/weight")).expect("weight").value;
    let b = &store.by_name(&format!("{prefix}/bias")).expect("bias").value;
    affine_with(w, b.data(), x)
}

pub fn affine_with(w: &Tensor, b: &[f64], x: &Rows) -> Rows {
    x.iter()
        .map(|r| {
            (0..w.cols())
                .map(|j| b[j] + (0..w.rows()).map(|k| r[k] * w.at(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let g = store.by_name(&format!("{prefix}/gamma")).expect("gamma").value.clone();
    let b = store.by_name(&format!("{prefix}/beta")).expect("beta").value.clone();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mu = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            (0..r.len())
                .map(|j| (r[j] - mu) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

/// `softmax(q kᵀ · scale) v` for one head.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, scale: f64) -> Rows {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let w = softmax(&logits);
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn cols(x: &Rows, a: usize, b: usize) -> Rows {
    x.iter().map(|r| r[a..b].to_vec()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Hand-rolled pre-norm transformer block with `heads` heads.
pub fn scripted_block(store: &ParamStore, prefix: &str, heads: usize, x: &Rows) -> Rows {
    let d = x[0].len();
    let dh = d / heads;
    let h = layer_norm(store, &format!("{prefix}/ln1"), x);
    let q = affine(store, &format!("{prefix}/attn/q"), &h);
    let k = affine(store, &format!("{prefix}/attn/k"), &h);
    let v = affine(store, &format!("{prefix}/attn/v"), &h);
    let mut attn = vec![Vec::with_capacity(d); x.len()];
    for i in 0..heads {
        let (a, b) = (i * dh, (i + 1) * dh);
        let out = attention(&cols(&q, a, b), &cols(&k, a, b), &cols(&v, a, b), 1.0 / (dh as f64).sqrt());
        for (row, o) in attn.iter_mut().zip(out) {
            row.extend(o);
        }
    }
    let o = affine(store, &format!("{prefix}/attn/o"), &attn);
    let x1: Rows = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let h2 = layer_norm(store, &format!("{prefix}/ln2"), &x1);
    let f1: Rows = affine(store, &format!("{prefix}/ffn/fc1"), &h2)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f2 = affine(store, &format!("{prefix}/ffn/fc2"), &f1);
    x1.iter().zip(&f2).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Replaces every tensor whose name starts with `prefix` by Gaussian noise
/// (1-D tensors around 1 so norms and biases are non-trivial).
pub fn randomize(store: &mut ParamStore, prefix: &str, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, p)| (id, p.value.shape().to_vec()))
        .collect();
    for (id, shape) in ids {
        let t = if shape.len() == 1 {
            Tensor::randn(&shape, 0.3, &mut r).map(|x| x + 1.0)
        } else {
            Tensor::randn(&shape, 0.5, &mut r)
        };
        store.set_value(id, t).unwrap();
    }
}

/// Reference evaluator: full cosine matrix, definitional AP and first-hit
/// CMC. Returns `(map, rank1, rank5, rank10, kept, skipped)`.
pub fn brute_force_eval(
    queries: &[dmpt::retrieval::Entry],
    gallery: &[dmpt::retrieval::Entry],
) -> (f64, f64, f64, f64, usize, usize) {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let g: Vec<Vec<f64>> = gallery.iter().map(|e| unit(&e.feature)).collect();
    let sim: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            let q = unit(&q.feature);
            g.iter().map(|gi| q.iter().zip(gi).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    let mut skipped = 0;
    for (qi, q) in queries.iter().enumerate() {
        // Selection sort: repeatedly take the most similar remaining item,
        // lowest id on ties.
        let mut left: Vec<usize> = (0..gallery.len()).collect();
        let mut order = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for c in 1..left.len() {
                let (a, b) = (left[c], left[best]);
                if sim[qi][a] > sim[qi][b] || (sim[qi][a] == sim[qi][b] && gallery[a].id < gallery[b].id) {
                    best = c;
                }
            }
            order.push(left.remove(best));
        }
        let rel: Vec<bool> = order.iter().map(|&i| gallery[i].label == q.label).collect();
        let positions: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
        if positions.is_empty() {
            skipped += 1;
            continue;
        }
        let mut ap = 0.0;
        for &p in &positions {
            let in_top = rel[..=p].iter().filter(|&&r| r).count();
            ap += in_top as f64 / (p + 1) as f64;
        }
        aps.push(ap / positions.len() as f64);
        first_hits.push(positions[0] + 1);
    }
    let n = aps.len();
    let map = if n == 0 { 0.0 } else { aps.iter().sum::<f64>() / n as f64 };
    let cmc = |k: usize| {
        if n == 0 {
            0.0
        } else {
            first_hits.iter().filter(|&&r| r <= k).count() as f64 / n as f64
        }
    };
    (map, cmc(1), cmc(5), cmc(10), n, skipped)
}

/// Random retrieval fixture: every query label is present in the gallery.
pub fn retrieval_fixture(seed: u64) -> (Vec<dmpt::retrieval::Entry>, Vec<dmpt::retrieval::Entry>) {
    use dmpt::retrieval::Entry;
    use rand::Rng;
    let mut r = rng(seed);
    let g_len = r.gen_range(1..=50);
    let ids = r.gen_range(1..=8usize);
    let dim = r.gen_range(2..=6);
    let feature = |r: &mut ChaCha8Rng| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let gallery: Vec<Entry> = (0..g_len)
        .map(|i| Entry {
            id: 1000 + i as u64,
            label: r.gen_range(0..ids),
            feature: feature(&mut r),
        })
        .collect();
    let q_len = r.gen_range(1..=20);
    let queries = (0..q_len)
        .map(|i| Entry {
            id: i as u64,
            label: gallery[r.gen_range(0..g_len)].label,
            feature: feature(&mut r),
        })
        .collect();
    (queries, gallery)
}

/// Closed-form trainable counts `[semantic, modality, interaction, head, text]`,
/// written out independently of the library's own accounting.
pub fn closed_form_terms(cfg: &dmpt::harness::RunConfig) -> [usize; 5] {
    use dmpt::model::AnchorMode;
    let e = &cfg.encoder;
    let c = cfg.components;
    let (l, d, dt) = (e.layers, e.d_v, e.d_t);
    let s = if c.semantic { cfg.semantic_len } else { 0 };
    let m = if c.modality { cfg.modal_len } else { 0 };
    let linear = |i: usize, o: usize| i * o + o;
    let semantic = 3 * l * s * d;
    let projections = if cfg.shared_projection { 1 } else { l };
    let modality = if m == 0 { 0 } else { 3 * m * dt + projections * linear(dt, d) };
    let h = e.ffn_mult * d;
    let block = 4 * d + 4 * linear(d, d) + linear(d, h) + linear(h, d);
    let depth = if c.bind && s > 0 { cfg.depth } else { 0 };
    let interaction = depth * (7 * linear(d, d) + 3 * block);
    let head = 3 * d * cfg.num_ids;
    let text = if c.text && cfg.anchor_mode == AnchorMode::Identity { 3 * cfg.num_ids * e.d_e } else { 0 };
    [semantic, modality, interaction, head, text]
}

/// A random valid configuration, small enough to build quickly.
pub fn random_config(seed: u64) -> dmpt::harness::RunConfig {
    use dmpt::model::{AnchorMode, Components};
    use rand::Rng;
    let mut r = rng(seed);
    let mut cfg = dmpt::harness::RunConfig::default();
    let heads = r.gen_range(1..=3);
    let d = heads * r.gen_range(2..=6);
    cfg.encoder.layers = r.gen_range(1..=3);
    cfg.encoder.d_v = d;
    cfg.encoder.d_t = heads * r.gen_range(2..=6);
    cfg.encoder.d_e = r.gen_range(2..=10);
    cfg.encoder.heads = heads;
    cfg.encoder.ffn_mult = r.gen_range(1..=3);
    cfg.semantic_len = r.gen_range(0..=6);
    cfg.modal_len = r.gen_range(0..=3);
    cfg.depth = r.gen_range(0..=2);
    cfg.num_ids = r.gen_range(2..=12);
    cfg.shared_projection = r.gen_bool(0.3);
    cfg.anchor_mode = if r.gen_bool(0.5) { AnchorMode::Identity } else { AnchorMode::Modality };
    let semantic = r.gen_bool(0.8);
    cfg.components = Components {
        semantic,
        modality: semantic && r.gen_bool(0.6),
        bind: semantic && r.gen_bool(0.6),
        text: r.gen_bool(0.5),
    };
    cfg.seed = r.gen();
    cfg
}
