//! Fine-tuning loop, few-shot evaluation rollouts, metrics files and the
//! ablation grid.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use lpdt_tensor::{clip_grad_norm, AdamW, Graph, Tensor};
use log::{info, warn};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_input_with_rtg, sample_batch, sample_prompt, subsample, Dataset, NormStats, Prompt, Trajectory};
use crate::envs::{episode_seed, reset, scripted_policy, step, task_split, EnvState, TaskSpec, HORIZON};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::model::{classifier_accuracy, write_json, LpdtConfig, LpdtModel, RegMode};
use crate::transformer::TransformerWeights;

/// Initialization of the transformer body.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Random,
    /// Body file written by `pretrain-lm`.
    LmPretrained(PathBuf),
}

impl Init {
    pub fn label(&self) -> &'static str {
        match self {
            Init::Random => "random",
            Init::LmPretrained(_) => "lm_pretrained",
        }
    }
}

/// Conditioning return used at rollout time, in raw (unscaled) units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetReturn {
    /// Largest episode return in the family's training data.
    #[default]
    MaxTrain,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: LpdtConfig,
    pub init: Init,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub train_steps: usize,
    pub per_task_batch: usize,
    /// Evaluate every `eval_every` steps as well as at the end (0 = end only).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub target_return: TargetReturn,
    pub seeds: Vec<u64>,
    pub ratio: f64,
    /// Tasks to train on; empty means the family's training split.
    pub train_tasks: Vec<usize>,
    /// Tasks to evaluate; empty means the family's test split.
    pub eval_tasks: Vec<usize>,
    pub out: PathBuf,
    /// Settings for `pretrain-lm`.
    pub lm: LmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: LpdtConfig::default(),
            init: Init::Random,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            grad_clip: 0.25,
            train_steps: 10_000,
            per_task_batch: 16,
            eval_every: 0,
            eval_episodes: 20,
            target_return: TargetReturn::MaxTrain,
            seeds: vec![0, 1, 2],
            ratio: 1.0,
            train_tasks: Vec::new(),
            eval_tasks: Vec::new(),
            out: PathBuf::from("runs"),
            lm: LmConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::model::read_json(path)
    }

    /// Launch-time checks that do not need the dataset contents.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.join("meta.json").is_file() {
            return Err(Error::Config(format!("dataset not found: {} (no meta.json)", self.dataset.display())));
        }
        if let Init::LmPretrained(p) = &self.init {
            if !p.is_file() {
                return Err(Error::Config(format!("pretrained body not found: {}", p.display())));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if self.per_task_batch == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("per_task_batch and eval_episodes must be positive".into()));
        }
        self.model.validate()
    }

    /// Sets observation/action sizes and the class count from the dataset.
    pub fn fit_to_dataset(&mut self, dataset: &Dataset) {
        self.model.ds = dataset.meta.ds;
        self.model.da = dataset.meta.da;
        self.model.n_train_tasks = self.resolved_train_tasks(dataset).len();
    }

    pub fn resolved_train_tasks(&self, dataset: &Dataset) -> Vec<usize> {
        if self.train_tasks.is_empty() {
            task_split(dataset.meta.family).0
        } else {
            self.train_tasks.clone()
        }
    }

    pub fn resolved_eval_tasks(&self, dataset: &Dataset) -> Vec<usize> {
        if self.eval_tasks.is_empty() {
            task_split(dataset.meta.family).1
        } else {
            self.eval_tasks.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the config, output dir excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Per-task outcome of a set of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReturn {
    pub task: usize,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_task: Vec<TaskReturn>,
}

impl EvalResult {
    /// Mean over tasks of the per-task mean return.
    pub fn mean_return(&self) -> f64 {
        mean(&self.per_task.iter().map(|t| t.mean).collect::<Vec<_>>())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub task: String,
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub l_pdt: f64,
    pub l_phi: f64,
    pub l_total: f64,
    pub cls_acc: Option<f64>,
    pub config_hash: String,
}

/// Diagnostics of the prompt encoder on training-task prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptProbe {
    pub cls_acc: Option<f64>,
    pub within_task_cos: f64,
    pub between_task_cos: f64,
}

pub struct TrainOutcome {
    pub model: LpdtModel<f32>,
    pub norm: NormStats,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalResult,
    pub probe: PromptProbe,
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Loads, subsamples and normalizes the training data for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, raw: &Dataset, seed: u64) -> Result<(Dataset, NormStats)> {
    let mut rng = StdRng::seed_from_u64(episode_seed(seed, &[0x5355_4253]));
    let kept = if cfg.ratio < 1.0 { subsample(raw, cfg.ratio, &mut rng)? } else { raw.clone() };
    let norm = raw.meta.norm.clone();
    Ok((kept.normalized(&norm), norm))
}

pub fn initial_body(cfg: &ExperimentConfig, seed: u64) -> Result<TransformerWeights<f32>> {
    match &cfg.init {
        Init::Random => TransformerWeights::init_random(&cfg.model.transformer, seed),
        Init::LmPretrained(path) => TransformerWeights::load(path, &cfg.model.transformer),
    }
}

fn check_schema(cfg: &ExperimentConfig, ds: &Dataset, train_tasks: &[usize]) -> Result<()> {
    if cfg.model.ds != ds.meta.ds || cfg.model.da != ds.meta.da {
        return Err(Error::Config(format!(
            "model expects ds={} da={} but dataset has ds={} da={}",
            cfg.model.ds, cfg.model.da, ds.meta.ds, ds.meta.da
        )));
    }
    if cfg.model.reg_mode == RegMode::Classifier && cfg.model.n_train_tasks != train_tasks.len() {
        return Err(Error::Config(format!(
            "classifier has {} classes but {} training tasks are configured",
            cfg.model.n_train_tasks,
            train_tasks.len()
        )));
    }
    for t in train_tasks {
        ds.task(*t)?;
    }
    Ok(())
}

/// Loss values of one step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_pdt: f64,
    pub l_phi: f64,
    pub l_total: f64,
}

/// One optimizer step on a fresh batch. Leaves the model untouched when the
/// loss is not finite.
pub fn train_step(
    model: &mut LpdtModel<f32>,
    opt: &mut AdamW<f32>,
    data: &Dataset,
    train_tasks: &[usize],
    per_task: usize,
    grad_clip: f64,
    step_index: usize,
    rng: &mut StdRng,
) -> Result<StepLosses> {
    let cfg = model.config.clone();
    let batch = sample_batch(data, train_tasks, per_task, cfg.context, cfg.k_star, rng)?;
    let class_of: HashMap<usize, usize> = train_tasks.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let labels: Vec<usize> = batch.iter().map(|s| class_of[&s.task_id]).collect();

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let out = model.forward(&mut g, &bound, &batch, Some(rng))?;
    let losses = model.losses(&mut g, &batch, &out, &labels)?;
    let value = |v| g.value(v).item() as f64;
    let step = StepLosses {
        l_pdt: value(losses.l_pdt),
        l_phi: losses.l_phi.map_or(0.0, value),
        l_total: value(losses.l_total),
    };
    if !(step.l_total.is_finite() && step.l_pdt.is_finite() && step.l_phi.is_finite()) {
        return Err(Error::Divergence {
            step: step_index,
            what: format!("non-finite loss (l_pdt={}, l_phi={}, l_total={})", step.l_pdt, step.l_phi, step.l_total),
        });
    }
    g.backward(losses.l_total)?;
    let names = bound.trainable().to_vec();
    let mut grads: Vec<Tensor<f32>> = names.iter().map(|n| g.grad(bound.get(n).expect("bound")).expect("grad")).collect();
    clip_grad_norm(&mut grads, grad_clip);
    let mut by_name: HashMap<String, &mut Tensor<f32>> = model.trainable_mut().into_iter().collect();
    let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(names.len());
    for n in &names {
        params.push(by_name.remove(n).ok_or_else(|| Error::Contract(format!("trainable '{n}' not owned by the model")))?);
    }
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    opt.step(&mut params, &grad_refs)?;
    Ok(step)
}

/// Trains one seed. Metrics rows are returned, not written.
pub fn train_seed(cfg: &ExperimentConfig, raw: &Dataset, seed: u64, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let train_tasks = cfg.resolved_train_tasks(raw);
    let eval_tasks = cfg.resolved_eval_tasks(raw);
    check_schema(cfg, raw, &train_tasks)?;
    let (data, norm) = prepare_data(cfg, raw, seed)?;
    let body = initial_body(cfg, seed)?;
    let mut model = LpdtModel::new(cfg.model.clone(), body, seed)?;
    let mut opt = AdamW::with_lr(cfg.lr, cfg.weight_decay)?;
    let mut rng = StdRng::seed_from_u64(episode_seed(seed, &[0x5452_4e]));
    let hash = cfg.hash();
    let target = match cfg.target_return {
        TargetReturn::MaxTrain => raw.meta.max_train_return,
        TargetReturn::Fixed(v) => v,
    };

    let mut records = Vec::new();
    let mut acc = (StepLosses::default(), 0usize);
    let mut push_eval = |model: &LpdtModel<f32>, step: usize, acc: &mut (StepLosses, usize)| -> Result<(EvalResult, PromptProbe)> {
        let eval = evaluate(model, &norm, &data, &eval_tasks, cfg.eval_episodes, target, episode_seed(seed, &[0x4556, step as u64]))?;
        let probe = probe_prompts(model, &data, &train_tasks, cfg.per_task_batch, episode_seed(seed, &[0x5052]))?;
        let n = acc.1.max(1) as f64;
        let l = StepLosses { l_pdt: acc.0.l_pdt / n, l_phi: acc.0.l_phi / n, l_total: acc.0.l_total / n };
        let row = |task: String, m: f64, s: f64| MetricsRecord {
            step,
            task,
            seed,
            return_mean: m,
            return_std: s,
            l_pdt: l.l_pdt,
            l_phi: l.l_phi,
            l_total: l.l_total,
            cls_acc: probe.cls_acc,
            config_hash: hash.clone(),
        };
        for t in &eval.per_task {
            records.push(row(t.task.to_string(), t.mean, t.std));
        }
        let means: Vec<f64> = eval.per_task.iter().map(|t| t.mean).collect();
        records.push(row("mean".into(), mean(&means), std_dev(&means)));
        *acc = (StepLosses::default(), 0);
        Ok((eval, probe))
    };

    for step in 0..cfg.train_steps {
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        opt.set_lr(lr)?;
        let l = match train_step(&mut model, &mut opt, &data, &train_tasks, cfg.per_task_batch, cfg.grad_clip, step, &mut rng) {
            Ok(l) => l,
            Err(e @ Error::Divergence { .. }) => {
                if let Some(dir) = checkpoint_dir {
                    let last_good = dir.join("last_good");
                    model.save(&last_good, &norm)?;
                    warn!("saved last good checkpoint to {}", last_good.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        acc.0.l_pdt += l.l_pdt;
        acc.0.l_phi += l.l_phi;
        acc.0.l_total += l.l_total;
        acc.1 += 1;
        if (step + 1) % 500 == 0 {
            info!("seed {seed} step {}: l_pdt {:.5} l_phi {:.5} l_total {:.5}", step + 1, l.l_pdt, l.l_phi, l.l_total);
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.train_steps {
            let (eval, _) = push_eval(&model, step + 1, &mut acc)?;
            info!("seed {seed} step {}: held-out mean return {:.3}", step + 1, eval.mean_return());
        }
    }
    let (final_eval, probe) = push_eval(&model, cfg.train_steps, &mut acc)?;
    info!("seed {seed} final: held-out mean return {:.3}", final_eval.mean_return());
    if let Some(dir) = checkpoint_dir {
        model.save(dir, &norm)?;
    }
    Ok(TrainOutcome { model, norm, records, final_eval, probe })
}

/// Classifier accuracy and cosine-similarity structure of `z` on a fresh
/// batch of training-task prompts.
pub fn probe_prompts(model: &LpdtModel<f32>, data: &Dataset, train_tasks: &[usize], per_task: usize, seed: u64) -> Result<PromptProbe> {
    let cfg = &model.config;
    let mut rng = StdRng::seed_from_u64(seed);
    let batch = sample_batch(data, train_tasks, per_task.max(2), cfg.context, cfg.k_star, &mut rng)?;
    let class_of: HashMap<usize, usize> = train_tasks.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let labels: Vec<usize> = batch.iter().map(|s| class_of[&s.task_id]).collect();
    let (z, logits) = model.encode_prompts(&batch)?;
    let (within, between) = cosine_structure(&z.cast::<f64>(), &labels);
    Ok(PromptProbe {
        cls_acc: logits.map(|l| classifier_accuracy(&l, &labels)),
        within_task_cos: within,
        between_task_cos: between,
    })
}

/// Mean pairwise cosine similarity of rows with equal and with different labels.
pub fn cosine_structure(z: &Tensor<f64>, labels: &[usize]) -> (f64, f64) {
    let n = z.dim(0);
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = z.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
            if labels[i] == labels[j] {
                w += c;
                nw += 1;
            } else {
                b += c;
                nb += 1;
            }
        }
    }
    (w / nw.max(1) as f64, b / nb.max(1) as f64)
}

/// What a rollout policy sees for one running episode.
pub struct EpisodeView<'a> {
    pub task: &'a TaskSpec,
    pub prompt: &'a Prompt,
    /// Normalized history so far; the last step's action is a zero placeholder.
    pub history: &'a Trajectory,
    /// Normalized conditioning return per history step.
    pub rtg: &'a [f64],
    pub state: &'a EnvState,
}

/// Chooses actions for a batch of episodes advancing in lockstep.
pub trait RolloutPolicy {
    fn act(&mut self, episodes: &[EpisodeView]) -> Result<Vec<Vec<f64>>>;
}

/// Acts with a trained model from the last `K` history steps.
pub struct ModelPolicy<'a> {
    pub model: &'a LpdtModel<f32>,
}

impl RolloutPolicy for ModelPolicy<'_> {
    fn act(&mut self, episodes: &[EpisodeView]) -> Result<Vec<Vec<f64>>> {
        let k = self.model.config.context;
        let seqs = episodes
            .iter()
            .map(|e| {
                let start = e.history.len().saturating_sub(k);
                build_input_with_rtg(e.prompt, e.history, e.rtg, start, k)
            })
            .collect::<Result<Vec<_>>>()?;
        self.model.predict_last(&seqs)
    }
}

/// The σ=0 scripted controller, ignoring prompt and history.
pub struct ExpertPolicy;

impl RolloutPolicy for ExpertPolicy {
    fn act(&mut self, episodes: &[EpisodeView]) -> Result<Vec<Vec<f64>>> {
        let mut unused = StdRng::seed_from_u64(0);
        Ok(episodes.iter().map(|e| scripted_policy(e.task, 0.0, e.state, &mut unused)).collect())
    }
}

struct Running {
    task: TaskSpec,
    prompt: Prompt,
    state: EnvState,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    rtg: Vec<f64>,
    target_left: f64,
    total: f64,
}

/// Runs `episodes` episodes per task, all in lockstep, and reports per-task
/// returns. Each episode draws its own prompt from the task's offline data;
/// the conditioning return starts at `target` and is decremented by received
/// rewards, clamped at zero from the side of the target's sign.
pub fn rollout_episodes(
    policy: &mut dyn RolloutPolicy,
    norm: &NormStats,
    data: &Dataset,
    tasks: &[usize],
    episodes: usize,
    k_star: usize,
    target: f64,
    seed: u64,
) -> Result<EvalResult> {
    let family = data.meta.family;
    let mut running = Vec::with_capacity(tasks.len() * episodes);
    for &t in tasks {
        let task = family.task(t)?;
        for ep in 0..episodes {
            let s = episode_seed(seed, &[t as u64, ep as u64]);
            let mut rng = StdRng::seed_from_u64(s ^ 0x50);
            let prompt = sample_prompt(data, t, k_star, &mut rng)?;
            running.push(Running {
                task,
                prompt,
                state: reset(&task, s),
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                rtg: Vec::new(),
                target_left: target,
                total: 0.0,
            });
        }
    }
    let (ds, da) = (family.ds(), family.da());
    for _ in 0..HORIZON {
        let histories: Vec<Trajectory> = running
            .iter_mut()
            .map(|r| {
                r.states.extend(norm.normalize_state(&r.state.observation()));
                r.actions.extend(std::iter::repeat_n(0.0, da));
                r.rewards.push(0.0);
                r.rtg.push(norm.normalize_return(r.target_left));
                let t = r.rewards.len();
                Trajectory::new(
                    Tensor::new(vec![t, ds], r.states.clone()).expect("shape"),
                    Tensor::new(vec![t, da], r.actions.clone()).expect("shape"),
                    Tensor::from_vec(r.rewards.clone()),
                    r.task.task_index,
                )
            })
            .collect::<Result<_>>()?;
        let views: Vec<EpisodeView> = running
            .iter()
            .zip(&histories)
            .map(|(r, h)| EpisodeView { task: &r.task, prompt: &r.prompt, history: h, rtg: &r.rtg, state: &r.state })
            .collect();
        let actions = policy.act(&views)?;
        drop(views);
        for (r, a) in running.iter_mut().zip(actions) {
            let a = norm.denormalize_action(&a);
            let (next, reward, _) = step(&r.state, &a, &r.task)?;
            let n = r.actions.len();
            for (slot, v) in r.actions[n - da..].iter_mut().zip(&a) {
                *slot = v.clamp(-1.0, 1.0);
            }
            *r.rewards.last_mut().expect("pushed") = norm.normalize_return(reward);
            r.total += reward;
            r.target_left -= reward;
            r.target_left = if target >= 0.0 { r.target_left.max(0.0) } else { r.target_left.min(0.0) };
            r.state = next;
        }
    }
    let per_task = tasks
        .iter()
        .map(|&t| {
            let returns: Vec<f64> = running.iter().filter(|r| r.task.task_index == t).map(|r| r.total).collect();
            TaskReturn { task: t, mean: mean(&returns), std: std_dev(&returns), returns }
        })
        .collect();
    Ok(EvalResult { per_task })
}

/// Few-shot evaluation of a model on `tasks` with prompts from `data`.
pub fn evaluate(
    model: &LpdtModel<f32>,
    norm: &NormStats,
    data: &Dataset,
    tasks: &[usize],
    episodes: usize,
    target: f64,
    seed: u64,
) -> Result<EvalResult> {
    let mut policy = ModelPolicy { model };
    rollout_episodes(&mut policy, norm, data, tasks, episodes, model.config.k_star, target, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_return: f64,
    pub per_task: Vec<TaskReturn>,
    pub probe: PromptProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seeds: Vec<SeedSummary>,
    pub mean_return: f64,
    pub std_return: f64,
    pub expert_reference: Vec<(usize, f64)>,
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_owned(), source: std::io::Error::other(e.to_string()) }
}

/// Trains and evaluates every seed, writing `metrics.csv`, `summary.json` and
/// one checkpoint per seed under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let raw = Dataset::load(&cfg.dataset)?;
    fs::create_dir_all(&cfg.out).map_err(Error::io(&cfg.out))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let mut records = Vec::new();
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = cfg.out.join(format!("seed_{seed}"));
        let outcome = train_seed(cfg, &raw, seed, Some(&ckpt))?;
        records.extend(outcome.records);
        seeds.push(SeedSummary {
            seed,
            mean_return: outcome.final_eval.mean_return(),
            per_task: outcome.final_eval.per_task,
            probe: outcome.probe,
        });
    }
    write_metrics_csv(&cfg.out.join("metrics.csv"), &records)?;
    let eval_tasks = cfg.resolved_eval_tasks(&raw);
    let expert_reference = eval_tasks
        .iter()
        .map(|&t| Ok((t, crate::envs::expert_reference_return(&raw.meta.family.task(t)?, 100, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = seeds.iter().map(|s| s.mean_return).collect();
    let summary = RunSummary { config_hash: cfg.hash(), mean_return: mean(&means), std_return: std_dev(&means), seeds, expert_reference };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One cell of the ablation grid for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub reg: String,
    pub init: String,
    pub ratio: f64,
    pub seed: u64,
    pub return_mean: Option<f64>,
    pub cls_acc: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub reg: String,
    pub init: String,
    pub ratio: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub n_ok: usize,
}

pub struct AblationGrid {
    pub regs: Vec<RegMode>,
    pub inits: Vec<Init>,
    pub ratios: Vec<f64>,
}

impl AblationGrid {
    /// `{none, classifier, infonce} × {random, lm_pretrained(body)} × {1.0, 0.1}`.
    pub fn full(body: PathBuf) -> Self {
        Self {
            regs: vec![RegMode::None, RegMode::Classifier, RegMode::Infonce],
            inits: vec![Init::Random, Init::LmPretrained(body)],
            ratios: vec![1.0, 0.1],
        }
    }
}

/// Runs every grid cell for every seed of `base`. Failed cells are recorded
/// with their error and the run continues.
pub fn ablate(base: &ExperimentConfig, grid: &AblationGrid) -> Result<(Vec<AblationRow>, Vec<AblationSummaryRow>)> {
    let raw = Dataset::load(&base.dataset)?;
    fs::create_dir_all(&base.out).map_err(Error::io(&base.out))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &reg in &grid.regs {
        for init in &grid.inits {
            for &ratio in &grid.ratios {
                let mut cfg = base.clone();
                cfg.model.reg_mode = reg;
                cfg.init = init.clone();
                cfg.ratio = ratio;
                cfg.fit_to_dataset(&raw);
                let mut ok = Vec::new();
                for &seed in &base.seeds {
                    let result = cfg.validate().and_then(|_| train_seed(&cfg, &raw, seed, None));
                    let row = match result {
                        Ok(o) => {
                            ok.push(o.final_eval.mean_return());
                            AblationRow {
                                reg: reg.to_string(),
                                init: init.label().into(),
                                ratio,
                                seed,
                                return_mean: Some(o.final_eval.mean_return()),
                                cls_acc: o.probe.cls_acc,
                                status: "ok".into(),
                            }
                        }
                        Err(e) => {
                            warn!("ablation cell {reg}/{}/{ratio} seed {seed} failed: {e}", init.label());
                            AblationRow {
                                reg: reg.to_string(),
                                init: init.label().into(),
                                ratio,
                                seed,
                                return_mean: None,
                                cls_acc: None,
                                status: format!("error: {e}"),
                            }
                        }
                    };
                    info!("ablation {}/{}/{} seed {}: {:?}", row.reg, row.init, row.ratio, row.seed, row.return_mean);
                    rows.push(row);
                }
                summary.push(AblationSummaryRow {
                    reg: reg.to_string(),
                    init: init.label().into(),
                    ratio,
                    return_mean: mean(&ok),
                    return_std: std_dev(&ok),
                    n_ok: ok.len(),
                });
            }
        }
    }
    let path = base.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(Error::io(&path))?;
    let path = base.out.join("ablation_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &summary {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(Error::io(&path))?;
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { lr: 2e-4, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn init_serializes_with_path() {
        let json = serde_json::to_string(&Init::LmPretrained("b.nt".into())).unwrap();
        assert_eq!(json, r#"{"lm_pretrained":"b.nt"}"#);
        assert_eq!(serde_json::from_str::<Init>(r#""random""#).unwrap(), Init::Random);
    }

    #[test]
    fn missing_dataset_names_path() {
        let cfg = ExperimentConfig { dataset: "/nonexistent/ds".into(), ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/ds"), "{err}");
    }

    #[test]
    fn cosine_structure_separates_groups() {
        let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]).unwrap();
        let (w, b) = cosine_structure(&z, &[0, 0, 1, 1]);
        assert!((w - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(std_dev(&[5.0]), 0.0);
    }
}
