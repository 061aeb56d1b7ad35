//! Command-line surface: `gen-data`, `pretrain-lm`, `train`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::Dataset;
use crate::envs::{generate_dataset, Family};
use crate::error::{Error, Result};
use crate::lm::{bundled_corpus_path, lm_pretrain, CharCorpus};
use crate::model::{write_json, LpdtModel, RegMode};
use crate::train::{ablate, evaluate, run_experiment, AblationGrid, ExperimentConfig, Init, TargetReturn};

#[derive(Debug, Parser)]
#[command(name = "lpdt", version, about = "Prompt-conditioned decision transformers with LoRA and prompt regularization")]
pub struct Cli {
    /// Random seed (generator seed for gen-data; the only training seed for train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Force fully serial, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset for one task family.
    GenData {
        #[arg(long, default_value = "point_dir")]
        family: String,
        /// Trajectories per task and noise level.
        #[arg(long, default_value_t = 20)]
        n_traj: usize,
        /// Comma-separated task indexes (default: every task of the family).
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<usize>,
    },
    /// Pre-train the transformer body as a character-level language model.
    PretrainLm {
        /// Plain-text corpus (default: the bundled one).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune on a dataset and evaluate on held-out tasks.
    Train(TrainArgs),
    /// Evaluate a checkpoint on tasks of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the regularization × initialization × data-ratio grid.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Language-pretrained body for the lm_pretrained cells.
        #[arg(long)]
        lm_body: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `random` or the path of a pretrained body file.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub reg_mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub target_return: Option<f64>,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(init) = &a.init {
        cfg.init = if init == "random" { Init::Random } else { Init::LmPretrained(PathBuf::from(init)) };
    }
    if let Some(r) = &a.reg_mode {
        cfg.model.reg_mode = r.parse::<RegMode>()?;
    }
    if let Some(s) = a.steps {
        cfg.train_steps = s;
    }
    if let Some(r) = a.ratio {
        cfg.ratio = r;
    }
    if let Some(l) = a.lambda {
        cfg.model.lambda = l;
    }
    if let Some(e) = a.eval_episodes {
        cfg.eval_episodes = e;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    if let Some(w) = a.warmup_steps {
        cfg.warmup_steps = w;
    }
    if let Some(t) = a.target_return {
        cfg.target_return = TargetReturn::Fixed(t);
    }
    Ok(())
}

fn load_dataset_for(cfg: &mut ExperimentConfig) -> Result<Dataset> {
    cfg.validate_paths()?;
    let ds = Dataset::load(&cfg.dataset)?;
    cfg.fit_to_dataset(&ds);
    cfg.validate()?;
    Ok(ds)
}

impl ExperimentConfig {
    fn validate_paths(&self) -> Result<()> {
        if !self.dataset.join("meta.json").is_file() {
            return Err(Error::Config(format!("dataset not found: {} (no meta.json)", self.dataset.display())));
        }
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        info!("deterministic mode: single-threaded execution");
    }
    match &cli.command {
        Command::GenData { family, n_traj, tasks } => {
            let family: Family = family.parse()?;
            let tasks = if tasks.is_empty() { (0..family.n_tasks()).collect() } else { tasks.clone() };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("data/{family}")));
            let ds = generate_dataset(family, &tasks, *n_traj, cli.seed.unwrap_or(0))?;
            ds.save(&out)?;
            println!("wrote {} trajectories for {} tasks to {}", ds.n_trajectories(), tasks.len(), out.display());
        }
        Command::PretrainLm { corpus, steps } => {
            let cfg = base_config(cli)?;
            let mut lm_cfg = cfg.lm.clone();
            if let Some(s) = steps {
                lm_cfg.steps = *s;
            }
            let corpus_path = corpus.clone().unwrap_or_else(bundled_corpus_path);
            let corpus = CharCorpus::load(&corpus_path)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("lm"));
            std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
            let (lm, report) = lm_pretrain::<f32>(&cfg.model.transformer, &corpus, &lm_cfg, cli.seed.unwrap_or(0))?;
            lm.body.save(&out.join("body.nt"))?;
            write_json(&out.join("transformer.json"), &cfg.model.transformer)?;
            write_json(&out.join("lm_report.json"), &report)?;
            println!(
                "validation loss {:.4} -> {:.4} (uniform {:.4}); body written to {}",
                report.initial_val_loss,
                report.final_val_loss,
                report.uniform_loss,
                out.join("body.nt").display()
            );
        }
        Command::Train(args) => {
            let mut cfg = base_config(cli)?;
            apply_train_args(&mut cfg, args)?;
            load_dataset_for(&mut cfg)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "held-out mean return {:.3} ± {:.3} over {} seed(s); metrics in {}",
                summary.mean_return,
                summary.std_return,
                summary.seeds.len(),
                cfg.out.join("metrics.csv").display()
            );
        }
        Command::Eval { checkpoint, dataset, tasks, episodes } => {
            let cfg = base_config(cli)?;
            let dataset = dataset.clone().unwrap_or(cfg.dataset.clone());
            if !dataset.join("meta.json").is_file() {
                return Err(Error::Config(format!("dataset not found: {} (no meta.json)", dataset.display())));
            }
            if !checkpoint.join("model.nt").is_file() {
                return Err(Error::Config(format!("checkpoint not found: {}", checkpoint.display())));
            }
            let (model, norm) = LpdtModel::<f32>::load(checkpoint)?;
            let raw = Dataset::load(&dataset)?;
            let data = raw.normalized(&norm);
            let tasks = if tasks.is_empty() { crate::envs::task_split(raw.meta.family).1 } else { tasks.clone() };
            let target = match cfg.target_return {
                TargetReturn::MaxTrain => raw.meta.max_train_return,
                TargetReturn::Fixed(v) => v,
            };
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            let result = evaluate(&model, &norm, &data, &tasks, episodes, target, cli.seed.unwrap_or(0))?;
            for t in &result.per_task {
                println!("task {}: return {:.3} ± {:.3}", t.task, t.mean, t.std);
            }
            println!("mean return {:.3}", result.mean_return());
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(Error::io(out))?;
                write_json(&out.join("eval.json"), &result)?;
            }
        }
        Command::Ablate { train, lm_body } => {
            let mut cfg = base_config(cli)?;
            apply_train_args(&mut cfg, train)?;
            if !lm_body.is_file() {
                return Err(Error::Config(format!("pretrained body not found: {}", lm_body.display())));
            }
            load_dataset_for(&mut cfg)?;
            let (_, summary) = ablate(&cfg, &AblationGrid::full(lm_body.clone()))?;
            for r in &summary {
                println!("{:>10} {:>13} ratio {:>4}: {:.3} ± {:.3} (n={})", r.reg, r.init, r.ratio, r.return_mean, r.return_std, r.n_ok);
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}
