//! Ablation grids: every cell is trained and evaluated once per seed and
//! summarized as mean ± standard deviation.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::train_and_evaluate;
use crate::model::Components;
use crate::retrieval::Metrics;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    /// Empty axes keep the base config's value.
    pub components: Vec<Components>,
    pub depths: Vec<usize>,
    pub semantic_lens: Vec<usize>,
    pub modal_lens: Vec<usize>,
}

impl AblationGrid {
    /// The four component rows, in order: semantic; semantic+bind;
    /// semantic+modality+bind; all four.
    pub fn component_rows() -> Vec<Components> {
        ["semantic", "semantic+bind", "semantic+modality+bind", "semantic+modality+bind+text"]
            .iter()
            .map(|s| Components::parse(s).expect("preset"))
            .collect()
    }

    /// Parses `axis=v1,v2;axis=...` with axes `components`, `depth`,
    /// `semantic_len`, `modal_len`. A bare axis name selects its preset.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut grid = AblationGrid {
            components: Vec::new(),
            depths: Vec::new(),
            semantic_lens: Vec::new(),
            modal_lens: Vec::new(),
        };
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (axis, values) = match part.split_once('=') {
                Some((a, v)) => (a.trim(), Some(v)),
                None => (part, None),
            };
            let nums = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad value {x:?} on axis {axis}")))
                    })
                    .collect()
            };
            match (axis, values) {
                ("components", None) => grid.components = Self::component_rows(),
                ("components", Some(v)) => {
                    grid.components = v.split(',').map(|c| Components::parse(c.trim())).collect::<Result<_>>()?
                }
                ("depth", None) => grid.depths = vec![0, 1, 2],
                ("depth", Some(v)) => grid.depths = nums(v)?,
                ("semantic_len", None) => grid.semantic_lens = vec![4, 8, 16, 32],
                ("semantic_len", Some(v)) => grid.semantic_lens = nums(v)?,
                ("modal_len", None) => grid.modal_lens = vec![0, 1, 2, 3],
                ("modal_len", Some(v)) => grid.modal_lens = nums(v)?,
                _ => return Err(Error::Config(format!("unknown ablation axis {axis:?}"))),
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            c.validate()?;
        }
        if let Some(d) = self.depths.iter().find(|&&d| d > 2) {
            return Err(Error::Config(format!("interaction depth {d} outside {{0, 1, 2}}")));
        }
        if let Some(m) = self.modal_lens.iter().find(|&&m| m > 3) {
            return Err(Error::Config(format!("modality prompt length {m} outside {{0, 1, 2, 3}}")));
        }
        Ok(())
    }

    /// Cell configurations in row order (components outermost).
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for c in axis(&self.components, base.components) {
            for d in axis(&self.depths, base.depth) {
                for s in axis(&self.semantic_lens, base.semantic_len) {
                    for m in axis(&self.modal_lens, base.modal_len) {
                        out.push(RunConfig {
                            components: c,
                            depth: d,
                            semantic_len: s,
                            modal_len: m,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub components: Components,
    pub depth: usize,
    pub semantic_len: usize,
    pub modal_len: usize,
    pub per_seed: Vec<Metrics>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn stat(&self, pick: impl Fn(&Metrics) -> f64) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(pick).collect::<Vec<_>>())
    }

    pub fn map(&self) -> (f64, f64) {
        self.stat(|m| m.map)
    }
}

/// Trains every cell of `grid` for seeds `base.seed .. base.seed + base.seeds`.
pub fn ablate(base: &RunConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    if base.seeds == 0 {
        return Err(Error::Config("seeds must be >= 1".into()));
    }
    let cells = grid.cells(base);
    for c in &cells {
        c.validate()?;
    }
    let jobs: Vec<(usize, RunConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            (0..base.seeds as u64).map(move |s| {
                (
                    i,
                    RunConfig {
                        seed: base.seed + s,
                        ..c.clone()
                    },
                )
            })
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|(i, cfg)| Ok((*i, train_and_evaluate(cfg, &mut |_| {})?.1.metrics)))
        .collect::<Result<Vec<_>>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, c)| AblationRow {
            components: c.components,
            depth: c.depth,
            semantic_len: c.semantic_len,
            modal_len: c.modal_len,
            per_seed: results.iter().filter(|(j, _)| *j == i).map(|(_, m)| m.clone()).collect(),
        })
        .collect())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Format(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "components",
        "depth",
        "semantic_len",
        "modal_len",
        "seeds",
        "map_mean",
        "map_std",
        "rank1_mean",
        "rank1_std",
        "rank5_mean",
        "rank5_std",
        "rank10_mean",
        "rank10_std",
    ])
    .map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.components.to_string(),
            r.depth.to_string(),
            r.semantic_len.to_string(),
            r.modal_len.to_string(),
            r.per_seed.len().to_string(),
        ];
        let picks: [fn(&Metrics) -> f64; 4] = [|m| m.map, |m| m.rank1, |m| m.rank5, |m| m.rank10];
        for pick in picks {
            let (mean, std) = r.stat(pick);
            rec.push(format!("{mean:.6}"));
            rec.push(format!("{std:.6}"));
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
