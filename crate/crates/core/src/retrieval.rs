//! Gallery ranking and the mAP / CMC evaluation protocol.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One labelled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: u64,
    pub label: usize,
    pub feature: Vec<f64>,
}

/// Unit-normalized gallery.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub ranking: Vec<usize>,
    pub relevance: Vec<bool>,
    /// `None` when no gallery item shares the query label.
    pub ap: Option<f64>,
}

impl RetrievalIndex {
    pub fn new(entries: &[Entry]) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.feature.len());
        let mut features = Vec::with_capacity(entries.len());
        for e in entries {
            if e.feature.len() != dim {
                return Err(Error::dim("retrieval index", &[dim], &[e.feature.len()]));
            }
            features.push(l2_normalize(&e.feature)?);
        }
        Ok(RetrievalIndex {
            features,
            labels: entries.iter().map(|e| e.label).collect(),
            ids: entries.iter().map(|e| e.id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn query(&self, feature: &[f64], label: usize) -> Result<QueryResult> {
        let ranking = rank_gallery(feature, self)?;
        let relevance: Vec<bool> = ranking.iter().map(|&i| self.labels[i] == label).collect();
        let ap = average_precision(&relevance);
        Ok(QueryResult {
            ranking,
            relevance,
            ap,
        })
    }
}

/// Gallery indices by descending cosine similarity; ties by ascending id.
pub fn rank_gallery(query: &[f64], index: &RetrievalIndex) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Domain("cannot rank an empty gallery".into()));
    }
    if query.len() != index.features[0].len() {
        return Err(Error::dim("rank_gallery", &[query.len()], &[index.features[0].len()]));
    }
    let q = l2_normalize(query)?;
    let sims: Vec<f64> = index.features.iter().map(|g| dot(&q, g)).collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then(index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order)
}

/// Mean over relevant positions of precision at that position; `None`
/// when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of queries whose first relevant item sits within the top `k`.
pub fn cmc_at_k(relevance: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("CMC rank must be >= 1".into()));
    }
    if relevance.is_empty() {
        return Ok(0.0);
    }
    let hits = relevance
        .iter()
        .filter(|r| r.iter().take(k).any(|&x| x))
        .count();
    Ok(hits as f64 / relevance.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub skipped: usize,
}

impl Metrics {
    /// Aggregates per-query relevance vectors; all-zero rows are skipped.
    pub fn from_relevance(rows: &[Vec<bool>]) -> Result<Self> {
        let mut kept = Vec::with_capacity(rows.len());
        let mut aps = Vec::with_capacity(rows.len());
        let mut skipped = 0;
        for r in rows {
            match average_precision(r) {
                Some(ap) => {
                    aps.push(ap);
                    kept.push(r.clone());
                }
                None => {
                    log::warn!("query without a gallery match skipped");
                    skipped += 1;
                }
            }
        }
        let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        Ok(Metrics {
            map,
            rank1: cmc_at_k(&kept, 1)?,
            rank5: cmc_at_k(&kept, 5)?,
            rank10: cmc_at_k(&kept, 10)?,
            num_queries: kept.len(),
            skipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Ranks every query against the gallery and aggregates mAP and CMC.
pub fn evaluate_entries(queries: &[Entry], gallery: &[Entry]) -> Result<Metrics> {
    let gallery_ids: BTreeSet<u64> = gallery.iter().map(|e| e.id).collect();
    let overlap: Vec<u64> = queries.iter().map(|q| q.id).filter(|id| gallery_ids.contains(id)).collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!("query and gallery share sample ids {overlap:?}")));
    }
    let gallery_labels: BTreeSet<usize> = gallery.iter().map(|e| e.label).collect();
    let missing: BTreeSet<usize> = queries
        .iter()
        .map(|q| q.label)
        .filter(|l| !gallery_labels.contains(l))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("query identities absent from gallery: {missing:?}")));
    }
    let index = RetrievalIndex::new(gallery)?;
    let rows = queries
        .iter()
        .map(|q| Ok(index.query(&q.feature, q.label)?.relevance))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_relevance(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true]), Some(1.0));
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_examples() {
        let all_top = vec![vec![true, false], vec![true, true]];
        assert_eq!(cmc_at_k(&all_top, 1).unwrap(), 1.0);
        let second = vec![vec![false, true, false, false, false]; 3];
        assert_eq!(cmc_at_k(&second, 1).unwrap(), 0.0);
        assert_eq!(cmc_at_k(&second, 5).unwrap(), 1.0);
        assert!(cmc_at_k(&second, 0).is_err());
    }

    #[test]
    fn empty_gallery_is_rejected() {
        let idx = RetrievalIndex::new(&[]).unwrap();
        assert!(matches!(rank_gallery(&[1.0], &idx), Err(Error::Domain(_))));
    }
}
