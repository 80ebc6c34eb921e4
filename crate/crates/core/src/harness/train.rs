//! Training loop, evaluation and feature export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{generate_corpus, read_corpus, Corpus, IdentitySample, PkSampler};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, Record, RecordKind};
use crate::harness::config::RunConfig;
use crate::harness::optim::Adam;
use crate::model::DmptModel;
use crate::numerics::Graph;
use crate::objectives::total_loss;
use crate::retrieval::{evaluate_entries, Entry, Metrics};

/// The dataset named in the config, or a corpus generated from its corpus
/// keys and seed.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = match &cfg.dataset {
        Some(path) => read_corpus(path)?,
        None => generate_corpus(&cfg.corpus_spec(cfg.seed))?,
    };
    let side = cfg.encoder.image_side();
    if corpus.spec.grid != side {
        return Err(Error::Config(format!(
            "dataset grid {} does not match encoder image side {side}",
            corpus.spec.grid
        )));
    }
    Ok(corpus)
}

/// Per-step training record, printed as `key=value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub center: f64,
    pub contrastive: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:.6e} loss={:.6} ce={:.6} triplet={:.6} center={:.6} contrastive={:.6}",
            self.step, self.epoch, self.lr, self.total, self.ce, self.triplet, self.center, self.contrastive
        )
    }
}

fn as_f64(samples: &[IdentitySample]) -> Vec<[Vec<f64>; 3]> {
    samples.iter().map(IdentitySample::images_f64).collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: DmptModel,
    pub adam: Adam,
    pub sampler: PkSampler,
    /// Steps completed.
    pub step: usize,
    train_images: Vec<[Vec<f64>; 3]>,
    train_labels: Vec<usize>,
    frozen_checksum: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let model = DmptModel::new(config.model_config(corpus.spec.num_ids), config.seed)?;
        let adam = Adam::new(config.adam(), &model.store);
        let sampler = PkSampler::new(&corpus.train, config.batch_p, config.batch_k, config.seed)?;
        Ok(Trainer {
            frozen_checksum: model.store.frozen_checksum(),
            train_images: as_f64(&corpus.train),
            train_labels: corpus.train.iter().map(|s| s.identity as usize).collect(),
            config,
            model,
            adam,
            sampler,
            step: 0,
        })
    }

    /// Rebuilds the trainer exactly as it was when `ckpt` was taken.
    pub fn from_checkpoint(ckpt: &Checkpoint, corpus: &Corpus) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone(), corpus)?;
        let mut by_name: BTreeMap<(&str, u8), &Record> = BTreeMap::new();
        for r in &ckpt.records {
            by_name.insert((r.name.as_str(), r.kind as u8), r);
        }
        let ids: Vec<_> = t.model.store.iter().map(|(id, p)| (id, p.name.clone(), p.frozen)).collect();
        for (i, (id, name, frozen)) in ids.into_iter().enumerate() {
            let kind = if frozen { RecordKind::Frozen } else { RecordKind::Trainable };
            let rec = by_name
                .get(&(name.as_str(), kind as u8))
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {name}")))?;
            t.model.store.set_value(id, rec.tensor.clone())?;
            if !frozen {
                for (slot, k) in [(&mut t.adam.m[i], RecordKind::AdamM), (&mut t.adam.v[i], RecordKind::AdamV)] {
                    let rec = by_name
                        .get(&(name.as_str(), k as u8))
                        .ok_or_else(|| Error::Integrity(format!("checkpoint lacks moments of {name}")))?;
                    *slot = Some(rec.tensor.clone());
                }
            }
        }
        let expected = t.model.store.len() + 2 * t.adam.m.iter().flatten().count();
        if ckpt.records.len() != expected {
            return Err(Error::Integrity(format!(
                "checkpoint has {} records, model expects {expected}",
                ckpt.records.len()
            )));
        }
        t.model.refresh_text_features()?;
        t.adam.t = ckpt.adam_t;
        t.step = ckpt.step;
        t.sampler.restore(ckpt.sampler);
        t.frozen_checksum = t.model.store.frozen_checksum();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut records = Vec::new();
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            let kind = if p.frozen { RecordKind::Frozen } else { RecordKind::Trainable };
            records.push(Record {
                name: p.name.clone(),
                kind,
                tensor: p.value.clone(),
            });
            if let (Some(m), Some(v)) = (&self.adam.m[i], &self.adam.v[i]) {
                for (kind, t) in [(RecordKind::AdamM, m), (RecordKind::AdamV, v)] {
                    records.push(Record {
                        name: p.name.clone(),
                        kind,
                        tensor: t.clone(),
                    });
                }
            }
        }
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            sampler: self.sampler.state(),
            adam_t: self.adam.t,
            records,
        }
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.frozen_checksum
    }

    pub fn check_frozen(&self) -> Result<()> {
        let now = self.model.store.frozen_checksum();
        if now != self.frozen_checksum {
            return Err(Error::Integrity(format!(
                "frozen parameters drifted at step {}: checksum {now:016x} != {:016x}",
                self.step, self.frozen_checksum
            )));
        }
        Ok(())
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let epoch_before = self.sampler.state().epoch;
        let idx = self.sampler.next_batch();
        if self.sampler.state().epoch != epoch_before {
            self.check_frozen()?;
        }
        let images: Vec<[&[f64]; 3]> = idx
            .iter()
            .map(|&i| {
                let im = &self.train_images[i];
                [im[0].as_slice(), im[1].as_slice(), im[2].as_slice()]
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.train_labels[i]).collect();

        let g = Graph::new();
        let p = self.model.store.bind(&g);
        let batch = self.model.forward_batch(&p, &images, &labels)?;
        let loss = total_loss(&batch, &self.config.loss)?;
        let total = loss.total.item();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at step {}", self.step + 1)));
        }
        g.backward(loss.total)?;
        let grads = p.grads(&self.model.store);
        let lr = self.adam.config.lr_at(self.step);
        self.adam.step(&mut self.model.store, &grads, self.step)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.sampler.state().epoch,
            lr,
            total,
            ce: loss.ce,
            triplet: loss.triplet,
            center: loss.center,
            contrastive: loss.contrastive,
        })
    }

    /// Trains up to `config.steps`, writing interval and final checkpoints
    /// when `out_dir` is given.
    pub fn run(&mut self, out_dir: Option<&Path>, sink: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.train_step()?;
            sink(&rec);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                    self.checkpoint().save(&dir.join(format!("step{}.ckpt", self.step)))?;
                }
            }
        }
        self.check_frozen()?;
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Unit-norm features of every sample in `samples`.
pub fn extract_entries(model: &DmptModel, samples: &[IdentitySample]) -> Result<Vec<Entry>> {
    samples
        .par_iter()
        .map(|s| {
            let images = s.images_f64();
            let feature = model.extract_feature([&images[0], &images[1], &images[2]])?;
            Ok(Entry {
                id: s.sample_id as u64,
                label: s.identity as usize,
                feature,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub query: Vec<Entry>,
    pub gallery: Vec<Entry>,
}

pub fn evaluate_model(model: &DmptModel, corpus: &Corpus) -> Result<Evaluation> {
    if corpus.spec.grid != model.config.encoder.image_side() {
        return Err(Error::Config(format!(
            "dataset grid {} does not match encoder image side {}",
            corpus.spec.grid,
            model.config.encoder.image_side()
        )));
    }
    if corpus.spec.num_ids != model.config.num_ids {
        return Err(Error::Config(format!(
            "dataset has {} identities, model head has {}",
            corpus.spec.num_ids, model.config.num_ids
        )));
    }
    let query = extract_entries(model, &corpus.query)?;
    let gallery = extract_entries(model, &corpus.gallery)?;
    let metrics = evaluate_entries(&query, &gallery)?;
    Ok(Evaluation {
        metrics,
        query,
        gallery,
    })
}

/// `sample_id,label,f0..f{D-1}` rows.
pub fn write_features_csv(path: &Path, entries: &[Entry]) -> Result<()> {
    let io = |e: csv::Error| Error::Format(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let dim = entries.first().map_or(0, |e| e.feature.len());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(io)?;
    for e in entries {
        let mut row = vec![e.id.to_string(), e.label.to_string()];
        row.extend(e.feature.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the config's corpus and evaluates the result.
pub fn train_and_evaluate(cfg: &RunConfig, sink: &mut dyn FnMut(&StepRecord)) -> Result<(Trainer, Evaluation)> {
    let corpus = load_corpus(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), &corpus)?;
    trainer.run(None, sink)?;
    let eval = evaluate_model(&trainer.model, &corpus)?;
    Ok((trainer, eval))
}
