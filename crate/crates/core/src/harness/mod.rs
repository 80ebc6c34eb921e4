//! Orchestration: configuration, training, evaluation, ablation grids,
//! parameter accounting and gradient checks.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

pub use ablate::{ablate, AblationGrid, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use optim::{Adam, AdamConfig};
pub use train::{
    evaluate_model, extract_entries, load_corpus, train_and_evaluate, write_features_csv, Evaluation, StepRecord,
    Trainer,
};

use crate::datagen::{generate_corpus, PkSampler};
use crate::error::{Error, Result};
use crate::model::{DmptModel, ParamBreakdown, Partition};
use crate::numerics::{grad_check, GradCheckReport};
use crate::objectives::total_loss;

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    /// Closed-form counts.
    pub formula: ParamBreakdown,
    /// Counts read off the built model.
    pub partition: Partition,
}

impl ParamReport {
    pub fn ratio(&self) -> f64 {
        self.partition.ratio()
    }

    pub fn summary(&self) -> String {
        let f = &self.formula;
        format!(
            "trainable={} frozen={} ratio={:.3} semantic={} modality={} interaction={} head={} text={}",
            self.partition.trainable_count,
            self.partition.frozen_count,
            self.ratio(),
            f.semantic,
            f.modality,
            f.interaction,
            f.head,
            f.text
        )
    }
}

/// Builds the model described by `cfg` and counts its parameters.
pub fn count_params(cfg: &RunConfig) -> Result<ParamReport> {
    let mc = cfg.model_config(cfg.num_ids);
    let model = DmptModel::new(mc, cfg.seed)?;
    let partition = model.parameter_partition()?;
    let formula = mc.param_breakdown();
    if formula.trainable() != partition.trainable_count || formula.frozen != partition.frozen_count {
        return Err(Error::Integrity(format!(
            "closed-form counts {}/{} disagree with the built model {}/{}",
            formula.trainable(),
            formula.frozen,
            partition.trainable_count,
            partition.frozen_count
        )));
    }
    Ok(ParamReport { formula, partition })
}

/// Central-difference check of the full training loss on one micro-batch.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.encoder.d_v > 16 || cfg.encoder.patch_tokens() > 4 {
        return Err(Error::Config(format!(
            "gradcheck needs a micro-config (d_v <= 16, at most 4 patch tokens), got d_v={} and {} patches",
            cfg.encoder.d_v,
            cfg.encoder.patch_tokens()
        )));
    }
    let corpus = generate_corpus(&cfg.corpus_spec(cfg.seed))?;
    let model = DmptModel::new(cfg.model_config(cfg.num_ids), cfg.seed)?;
    let idx = PkSampler::new(&corpus.train, cfg.batch_p, cfg.batch_k, cfg.seed)?.next_batch();
    let images: Vec<[Vec<f64>; 3]> = idx.iter().map(|&i| corpus.train[i].images_f64()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| corpus.train[i].identity as usize).collect();
    let loss_cfg = cfg.loss;
    grad_check(&model.store, GRADCHECK_STEP, |_, p| {
        let views: Vec<[&[f64]; 3]> = images.iter().map(|im| [&im[0][..], &im[1][..], &im[2][..]]).collect();
        let batch = model.forward_batch(p, &views, &labels)?;
        Ok(total_loss(&batch, &loss_cfg)?.total)
    })
}
