//! Run configuration as flat `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::{EncoderConfig, ObjectKind};
use crate::datagen::CorpusSpec;
use crate::error::{Error, Result};
use crate::harness::optim::AdamConfig;
use crate::model::{AnchorMode, Components, ModelConfig};
use crate::objectives::LossConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub object: ObjectKind,
    pub semantic_len: usize,
    pub modal_len: usize,
    pub depth: usize,
    pub components: Components,
    pub anchor_mode: AnchorMode,
    pub shared_projection: bool,
    pub loss: LossConfig,
    pub lr: f64,
    /// `None` means 10% of `steps`.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seeds per ablation cell, starting at `seed`.
    pub seeds: usize,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Corpus parameters used when no dataset file is given.
    pub num_ids: usize,
    pub samples_per_id: usize,
    pub rho: f64,
    pub noise_sigma: f64,
    pub nuisance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            object: ObjectKind::Person,
            semantic_len: 32,
            modal_len: 1,
            depth: 1,
            components: Components::FULL,
            anchor_mode: AnchorMode::Modality,
            shared_projection: false,
            loss: LossConfig::default(),
            lr: 1e-3,
            warmup_steps: None,
            weight_decay: 1e-4,
            batch_p: 4,
            batch_k: 4,
            steps: 300,
            seed: 0,
            seeds: 5,
            dataset: None,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            num_ids: 16,
            samples_per_id: 8,
            rho: 0.5,
            noise_sigma: 0.6,
            nuisance: 0.95,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Every recognised key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "d_v",
        "d_t",
        "d_e",
        "heads",
        "patch_grid",
        "patch_size",
        "channels",
        "ffn_mult",
        "object",
        "semantic_len",
        "modal_len",
        "depth",
        "components",
        "anchor_mode",
        "shared_projection",
        "tau",
        "margin",
        "smoothing",
        "w_ce",
        "w_triplet",
        "w_center",
        "w_contrastive",
        "lr",
        "warmup_steps",
        "weight_decay",
        "batch_p",
        "batch_k",
        "steps",
        "seed",
        "seeds",
        "dataset",
        "out_dir",
        "checkpoint_every",
        "num_ids",
        "samples_per_id",
        "rho",
        "noise_sigma",
        "nuisance",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let e = &mut self.encoder;
        let w = &mut self.loss.weights;
        match key.trim() {
            "layers" => e.layers = parse(key, value)?,
            "d_v" => e.d_v = parse(key, value)?,
            "d_t" => e.d_t = parse(key, value)?,
            "d_e" => e.d_e = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "patch_grid" => e.grid = parse(key, value)?,
            "patch_size" => e.patch = parse(key, value)?,
            "channels" => e.channels = parse(key, value)?,
            "ffn_mult" => e.ffn_mult = parse(key, value)?,
            "object" => self.object = value.parse()?,
            "semantic_len" => self.semantic_len = parse(key, value)?,
            "modal_len" => self.modal_len = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "components" => self.components = Components::parse(value)?,
            "anchor_mode" => self.anchor_mode = value.parse()?,
            "shared_projection" => self.shared_projection = parse_bool(key, value)?,
            "tau" => self.loss.tau = parse(key, value)?,
            "margin" => self.loss.margin = parse(key, value)?,
            "smoothing" => self.loss.smoothing = parse(key, value)?,
            "w_ce" => w.ce = parse(key, value)?,
            "w_triplet" => w.triplet = parse(key, value)?,
            "w_center" => w.center = parse(key, value)?,
            "w_contrastive" => w.contrastive = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => {
                self.warmup_steps = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_p" => self.batch_p = parse(key, value)?,
            "batch_k" => self.batch_k = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "dataset" => self.dataset = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "num_ids" => self.num_ids = parse(key, value)?,
            "samples_per_id" => self.samples_per_id = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "nuisance" => self.nuisance = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let e = &self.encoder;
        let w = &self.loss.weights;
        Ok(match key {
            "layers" => e.layers.to_string(),
            "d_v" => e.d_v.to_string(),
            "d_t" => e.d_t.to_string(),
            "d_e" => e.d_e.to_string(),
            "heads" => e.heads.to_string(),
            "patch_grid" => e.grid.to_string(),
            "patch_size" => e.patch.to_string(),
            "channels" => e.channels.to_string(),
            "ffn_mult" => e.ffn_mult.to_string(),
            "object" => self.object.word().to_string(),
            "semantic_len" => self.semantic_len.to_string(),
            "modal_len" => self.modal_len.to_string(),
            "depth" => self.depth.to_string(),
            "components" => self.components.to_string(),
            "anchor_mode" => self.anchor_mode.to_string(),
            "shared_projection" => self.shared_projection.to_string(),
            "tau" => self.loss.tau.to_string(),
            "margin" => self.loss.margin.to_string(),
            "smoothing" => self.loss.smoothing.to_string(),
            "w_ce" => w.ce.to_string(),
            "w_triplet" => w.triplet.to_string(),
            "w_center" => w.center.to_string(),
            "w_contrastive" => w.contrastive.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_steps" => self.warmup_steps.map_or("auto".into(), |s| s.to_string()),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_p" => self.batch_p.to_string(),
            "batch_k" => self.batch_k.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.to_string(),
            "dataset" => self.dataset.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "num_ids" => self.num_ids.to_string(),
            "samples_per_id" => self.samples_per_id.to_string(),
            "rho" => self.rho.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "nuisance" => self.nuisance.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.components.validate()?;
        self.loss.validate()?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config("batch_p and batch_k must be >= 2 for the triplet loss".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.encoder.channels != 1 {
            return Err(Error::Config("synthetic corpora are single-channel".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_ids: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            object: self.object,
            semantic_len: self.semantic_len,
            modal_len: self.modal_len,
            depth: self.depth,
            components: self.components,
            anchor_mode: self.anchor_mode,
            shared_projection: self.shared_projection,
            num_ids,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps.unwrap_or(self.steps / 10),
            ..AdamConfig::default()
        }
    }

    pub fn corpus_spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_ids: self.num_ids,
            samples_per_id: self.samples_per_id,
            grid: self.encoder.image_side(),
            noise_sigma: self.noise_sigma,
            rho: self.rho,
            nuisance: self.nuisance,
            seed,
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        RunConfig {
            encoder: EncoderConfig {
                layers: 1,
                d_v: 8,
                d_t: 8,
                d_e: 8,
                heads: 2,
                grid: 2,
                patch: 2,
                channels: 1,
                ffn_mult: 2,
            },
            semantic_len: 2,
            modal_len: 1,
            depth: 1,
            batch_p: 2,
            batch_k: 2,
            num_ids: 2,
            samples_per_id: 4,
            ..RunConfig::default()
        }
    }
}
