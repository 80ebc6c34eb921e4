use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dmpt::datagen::{generate_corpus, write_corpus};
use dmpt::harness::ablate::write_ablation_csv;
use dmpt::harness::{
    ablate, count_params, evaluate_model, gradcheck, load_corpus, write_features_csv, AblationGrid, Checkpoint,
    Evaluation, RunConfig, Trainer, GRADCHECK_TOLERANCE,
};

#[derive(Parser)]
#[command(name = "dmpt", version, about = "Decoupled modality-aware prompt tuning for multi-modal ReID")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each mirrors a config key.
#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set depth=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic DMPTDS1 corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, then evaluate on the query/gallery splits.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.json and features.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of a grid over `seeds` seeds.
    Ablate {
        /// e.g. `components`, `depth=0,1`, `semantic_len=8,16;modal_len=0,1`.
        #[arg(long, default_value = "components")]
        grid: String,
    },
    /// Print trainable and frozen parameter counts.
    CountParams,
    /// Finite-difference check of the full loss on a micro-config.
    Gradcheck,
}

fn build_config(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut cfg = base;
    if let Ok(seed) = std::env::var("DMPT_SEED") {
        cfg.set("seed", &seed).context("DMPT_SEED")?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out_dir {
        cfg.out_dir = o.clone();
    }
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::write(dir.join("metrics.json"), eval.metrics.to_json() + "\n")?;
    let mut all = eval.query.clone();
    all.extend(eval.gallery.iter().cloned());
    write_features_csv(&dir.join("features.csv"), &all)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let base = match cli.command {
        Command::Gradcheck => RunConfig::micro(),
        _ => RunConfig::default(),
    };
    let cfg = build_config(base, &cli.common)?;
    match cli.command {
        Command::Generate { out } => {
            let corpus = generate_corpus(&cfg.corpus_spec(cfg.seed))?;
            write_corpus(&corpus, &out)?;
            println!(
                "wrote {} (train={} query={} gallery={})",
                out.display(),
                corpus.train.len(),
                corpus.query.len(),
                corpus.gallery.len()
            );
        }
        Command::Train { resume } => {
            fs::create_dir_all(&cfg.out_dir)?;
            let mut trainer = match &resume {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(path)?;
                    // Warm-up defaults to a fraction of `steps`; keep the one already in use.
                    ckpt.config.warmup_steps = Some(ckpt.config.adam().warmup_steps);
                    ckpt.config.steps = cfg.steps;
                    let corpus = load_corpus(&ckpt.config)?;
                    Trainer::from_checkpoint(&ckpt, &corpus)?
                }
                None => Trainer::new(cfg.clone(), &load_corpus(&cfg)?)?,
            };
            let corpus = load_corpus(&trainer.config)?;
            let mut log = BufWriter::new(File::create(cfg.out_dir.join("train.log"))?);
            let mut io_err = None;
            trainer.run(Some(&cfg.out_dir), &mut |rec| {
                println!("{rec}");
                if let Err(e) = writeln!(log, "{rec}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            log.flush()?;
            println!("frozen_checksum={:016x}", trainer.frozen_checksum());
            let eval = evaluate_model(&trainer.model, &corpus)?;
            write_evaluation(&cfg.out_dir, &eval)?;
            println!("{}", eval.metrics.to_json());
        }
        Command::Evaluate { checkpoint } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            if cli.common.dataset.is_some() {
                ckpt.config.dataset = cfg.dataset.clone();
            }
            let corpus = load_corpus(&ckpt.config)?;
            let trainer = Trainer::from_checkpoint(&ckpt, &corpus)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let eval = evaluate_model(&trainer.model, &corpus)?;
            write_evaluation(&cfg.out_dir, &eval)?;
            println!("{}", eval.metrics.to_json());
        }
        Command::Ablate { grid } => {
            let grid = AblationGrid::parse(&grid)?;
            let rows = ablate(&cfg, &grid)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("ablation.csv");
            write_ablation_csv(&path, &rows)?;
            for r in &rows {
                let (mean, std) = r.map();
                println!(
                    "components={} depth={} semantic_len={} modal_len={} map={mean:.4}±{std:.4}",
                    r.components, r.depth, r.semantic_len, r.modal_len
                );
            }
            println!("wrote {}", path.display());
        }
        Command::CountParams => {
            println!("{}", count_params(&cfg)?.summary());
        }
        Command::Gradcheck => {
            let report = gradcheck(&cfg)?;
            println!(
                "checked={} max_rel_error={:.3e} max_abs_grad={:.3e}",
                report.checked, report.max_rel_error, report.max_abs_grad
            );
            if let Some(w) = &report.worst {
                println!(
                    "worst={}[{}] analytic={:.9e} numeric={:.9e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            if report.max_rel_error >= GRADCHECK_TOLERANCE {
                eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_error);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
