//! Training objective: label-smoothed cross-entropy, batch-hard triplet,
//! center-MAE and image-text contrastive terms, unit-weighted by default.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Added under the square root so coincident features keep a finite gradient.
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub triplet: f64,
    pub center: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            triplet: 1.0,
            center: 1.0,
            contrastive: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature τ.
    pub tau: f64,
    pub margin: f64,
    /// Label-smoothing mass ε.
    pub smoothing: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            margin: 0.3,
            smoothing: 0.1,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing must be in [0, 1), got {}", self.smoothing)));
        }
        Ok(())
    }
}

/// InfoNCE over cosine similarities: mean over rows of
/// `-log softmax(cos(z, anchors) / τ)[target]`.
pub fn contrastive_loss<'g>(z: Var<'g>, anchors: Var<'g>, targets: &[usize], tau: f64) -> Result<Var<'g>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if z.rows() != targets.len() {
        return Err(Error::dim("contrastive_loss", &z.shape(), &[targets.len()]));
    }
    if z.cols() != anchors.cols() {
        return Err(Error::dim("contrastive_loss", &z.shape(), &anchors.shape()));
    }
    let a = anchors.rows();
    if let Some(&t) = targets.iter().find(|&&t| t >= a) {
        return Err(Error::Index {
            what: "contrastive target",
            index: t,
            len: a,
        });
    }
    let zn = z.normalize_rows()?;
    let an = anchors.normalize_rows()?;
    let logp = zn.matmul(an.t())?.scale(1.0 / tau).log_softmax()?;
    let flat: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * a + t).collect();
    Ok(logp.pick(&flat)?.mean().scale(-1.0))
}

/// Cross-entropy against `(1-ε)·onehot + ε/N`, mean over the batch.
pub fn cross_entropy_smoothed<'g>(logits: Var<'g>, labels: &[usize], eps: f64) -> Result<Var<'g>> {
    let (b, n) = (logits.rows(), logits.cols());
    if b != labels.len() {
        return Err(Error::dim("cross_entropy", &logits.shape(), &[labels.len()]));
    }
    let mut target = vec![eps / n as f64; b * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::Index {
                what: "class label",
                index: y,
                len: n,
            });
        }
        target[i * n + y] += 1.0 - eps;
    }
    let target = logits.graph().constant(Tensor::matrix(b, n, target)?);
    Ok(logits.log_softmax()?.mul(target)?.sum().scale(-1.0 / b as f64))
}

/// Hardest-positive / hardest-negative indices per anchor, from a B×B
/// squared-distance matrix.
fn hardest_pairs(dist: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = dist.at(i, j);
            if labels[j] == labels[i] {
                if pos.map_or(true, |p| d > dist.at(i, p)) {
                    pos = Some(j);
                }
            } else if neg.map_or(true, |q| d < dist.at(i, q)) {
                neg = Some(j);
            }
        }
        match (pos, neg) {
            (Some(p), Some(q)) => out.push((p, q)),
            (None, _) => {
                return Err(Error::Sampling(format!(
                    "identity {} has no positive for anchor {i}",
                    labels[i]
                )))
            }
            (_, None) => {
                return Err(Error::Sampling(format!(
                    "identity {} has no negative for anchor {i}",
                    labels[i]
                )))
            }
        }
    }
    Ok(out)
}

/// Mean over anchors of `max(0, d(a, hardest +) - d(a, hardest -) + margin)`.
pub fn triplet_batch_hard<'g>(features: Var<'g>, labels: &[usize], margin: f64) -> Result<Var<'g>> {
    let b = features.rows();
    if b != labels.len() {
        return Err(Error::dim("triplet", &features.shape(), &[labels.len()]));
    }
    let sq = features.pairwise_sq_dist();
    let pairs = hardest_pairs(&sq.value(), labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(i, &(p, _))| i * b + p).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(i, &(_, q))| i * b + q).collect();
    let d_pos = sq.pick(&pos)?.add_scalar(DIST_EPS).sqrt();
    let d_neg = sq.pick(&neg)?.add_scalar(DIST_EPS).sqrt();
    Ok(d_pos.sub(d_neg)?.add_scalar(margin).relu().mean())
}

/// Mean absolute deviation of every feature from its in-batch identity center.
pub fn center_mae<'g>(features: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let b = features.rows();
    if b != labels.len() {
        return Err(Error::dim("center_mae", &features.shape(), &[labels.len()]));
    }
    if b == 0 {
        return Err(Error::Domain("center_mae on an empty batch".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    let mut avg = vec![0.0; b * b];
    for i in 0..b {
        let w = 1.0 / counts[&labels[i]] as f64;
        for j in 0..b {
            if labels[i] == labels[j] {
                avg[i * b + j] = w;
            }
        }
    }
    let centers = features.graph().constant(Tensor::matrix(b, b, avg)?).matmul(features)?;
    Ok(features.sub(centers)?.abs().mean())
}

/// Image features of one modality against their text anchors.
#[derive(Clone, Debug)]
pub struct JointPair<'g> {
    pub z: Var<'g>,
    pub anchors: Var<'g>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchFeatures<'g> {
    /// `B×D` retrieval features.
    pub features: Var<'g>,
    pub labels: Vec<usize>,
    /// `B×N` classifier outputs.
    pub logits: Var<'g>,
    /// One pair per modality; empty when text alignment is off.
    pub joint: Vec<JointPair<'g>>,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<'g> {
    pub total: Var<'g>,
    pub ce: f64,
    pub triplet: f64,
    pub center: f64,
    pub contrastive: f64,
}

/// Weighted sum of the four terms. A term with weight 0 is still evaluated
/// and reported.
pub fn total_loss<'g>(batch: &BatchFeatures<'g>, cfg: &LossConfig) -> Result<LossBreakdown<'g>> {
    cfg.validate()?;
    let w = cfg.weights;
    let ce = cross_entropy_smoothed(batch.logits, &batch.labels, cfg.smoothing)?;
    let tri = triplet_batch_hard(batch.features, &batch.labels, cfg.margin)?;
    let mae = center_mae(batch.features, &batch.labels)?;
    let mut total = ce.scale(w.ce).add(tri.scale(w.triplet))?.add(mae.scale(w.center))?;
    let mut con_value = 0.0;
    if !batch.joint.is_empty() {
        let mut con: Option<Var<'g>> = None;
        for pair in &batch.joint {
            let l = contrastive_loss(pair.z, pair.anchors, &pair.targets, cfg.tau)?;
            con = Some(match con {
                None => l,
                Some(c) => c.add(l)?,
            });
        }
        let con = con.expect("non-empty");
        con_value = con.item();
        total = total.add(con.scale(w.contrastive))?;
    }
    Ok(LossBreakdown {
        total,
        ce: ce.item(),
        triplet: tri.item(),
        center: mae.item(),
        contrastive: con_value,
    })
}
