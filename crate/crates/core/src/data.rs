//! Offline trajectory storage, return-to-go, prompts, context windows and batches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lpdt_tensor::{AnyTensor, NamedTensors, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Family, TaskSpec};
use crate::error::{Error, Result};

pub const DEFAULT_K_STAR: usize = 5;
pub const DEFAULT_CONTEXT: usize = 20;
pub const DEFAULT_PER_TASK_BATCH: usize = 16;
const STD_FLOOR: f64 = 1e-6;

/// One episode. `states` is `[T×ds]`, `actions` `[T×da]`, `rewards` `[T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub rewards: Tensor<f64>,
    pub task_id: usize,
}

impl Trajectory {
    pub fn new(states: Tensor<f64>, actions: Tensor<f64>, rewards: Tensor<f64>, task_id: usize) -> Result<Self> {
        let t = rewards.numel();
        if t == 0 || rewards.rank() != 1 || states.rank() != 2 || actions.rank() != 2 || states.dim(0) != t || actions.dim(0) != t {
            return Err(Error::Data(format!(
                "trajectory shapes disagree: states {:?}, actions {:?}, rewards {:?}",
                states.shape(),
                actions.shape(),
                rewards.shape()
            )));
        }
        Ok(Self { states, actions, rewards, task_id })
    }

    pub fn len(&self) -> usize {
        self.rewards.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ds(&self) -> usize {
        self.states.dim(1)
    }

    pub fn da(&self) -> usize {
        self.actions.dim(1)
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.sum()
    }

    pub fn returns_to_go(&self) -> Tensor<f64> {
        compute_returns_to_go(self.rewards.data()).expect("trajectories are never empty")
    }
}

/// `out[i] = Σ_{t ≥ i} rewards[t]`, undiscounted.
pub fn compute_returns_to_go(rewards: &[f64]) -> Result<Tensor<f64>> {
    if rewards.is_empty() {
        return Err(Error::Contract("return-to-go of an empty reward sequence".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i];
        out[i] = acc;
    }
    Ok(Tensor::from_vec(out))
}

/// A `K*`-step window of one task's data, placed before the context.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub rtg: Tensor<f64>,
    pub states: Tensor<f64>,
    pub actions: Tensor<f64>,
    /// Episode timesteps of the window in its source trajectory.
    pub timesteps: Vec<usize>,
    pub task_id: usize,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.rtg.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prompt plus a left-padded `K`-step context window.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub prompt: Prompt,
    pub rtg: Tensor<f64>,
    pub states: Tensor<f64>,
    pub actions: Tensor<f64>,
    /// Absolute episode timestep of each context step (0 on padding).
    pub timesteps: Vec<usize>,
    /// One entry per step, prompt first; `true` marks real data.
    pub pad_mask: Vec<bool>,
    pub task_id: usize,
}

impl InputSequence {
    pub fn k_star(&self) -> usize {
        self.prompt.len()
    }

    pub fn context_len(&self) -> usize {
        self.rtg.numel()
    }

    pub fn n_tokens(&self) -> usize {
        3 * (self.k_star() + self.context_len())
    }

    /// Real-data flags for the context steps only.
    pub fn context_mask(&self) -> &[bool] {
        &self.pad_mask[self.k_star()..]
    }
}

/// Per-dimension state z-scoring plus a scalar return scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub return_scale: f64,
}

impl NormStats {
    /// Statistics over every state of `trajs`; the return scale is the largest
    /// absolute episode return.
    pub fn compute<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Result<Self> {
        let trajs: Vec<&Trajectory> = trajs.into_iter().collect();
        let Some(first) = trajs.first() else {
            return Err(Error::Data("cannot compute normalization statistics of no trajectories".into()));
        };
        let ds = first.ds();
        let mut n = 0usize;
        let mut sum = vec![0.0; ds];
        for tr in &trajs {
            for row in tr.states.data().chunks_exact(ds) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; ds];
        for tr in &trajs {
            for row in tr.states.data().chunks_exact(ds) {
                for j in 0..ds {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        let scale = trajs.iter().map(|t| t.total_return().abs()).fold(0.0, f64::max).max(STD_FLOOR);
        Ok(Self { state_mean: mean, state_std: std, return_scale: scale })
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((v, m), sd)| (v - m) / sd).collect()
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((v, m), sd)| v * sd + m).collect()
    }

    pub fn normalize_return(&self, r: f64) -> f64 {
        r / self.return_scale
    }

    pub fn denormalize_return(&self, r: f64) -> f64 {
        r * self.return_scale
    }

    /// Actions are already bounded and pass through unchanged.
    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.to_vec()
    }

    pub fn normalize_trajectory(&self, tr: &Trajectory) -> Trajectory {
        let ds = tr.ds();
        let states: Vec<f64> = tr.states.data().chunks_exact(ds).flat_map(|row| self.normalize_state(row)).collect();
        Trajectory {
            states: Tensor::new(tr.states.shape().to_vec(), states).expect("same shape"),
            actions: tr.actions.clone(),
            rewards: tr.rewards.scale(1.0 / self.return_scale),
            task_id: tr.task_id,
        }
    }
}

/// All trajectories of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub family: Family,
    pub ds: usize,
    pub da: usize,
    pub horizon: usize,
    pub tasks: Vec<TaskSpec>,
    /// Statistics over the family's training tasks.
    pub norm: NormStats,
    pub seed: u64,
    pub dt: f64,
    pub v_max: f64,
    pub sigmas: Vec<f64>,
    pub n_traj_per_noise: usize,
    /// Largest episode return over the training tasks.
    pub max_train_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub tasks: BTreeMap<usize, TaskDataset>,
}

impl Dataset {
    pub fn task(&self, task_id: usize) -> Result<&TaskDataset> {
        self.tasks.get(&task_id).ok_or_else(|| Error::Data(format!("dataset has no task {task_id}")))
    }

    pub fn n_trajectories(&self) -> usize {
        self.tasks.values().map(|t| t.trajectories.len()).sum()
    }

    /// A copy with normalized states and rewards divided by the return scale.
    pub fn normalized(&self, stats: &NormStats) -> Dataset {
        let tasks = self
            .tasks
            .iter()
            .map(|(&id, td)| {
                let trajectories = td.trajectories.iter().map(|t| stats.normalize_trajectory(t)).collect();
                (id, TaskDataset { task_id: id, trajectories })
            })
            .collect();
        Dataset { meta: self.meta.clone(), tasks }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&self.meta).map_err(Error::json(&meta_path))?;
        fs::write(&meta_path, json).map_err(Error::io(&meta_path))?;
        for (id, td) in &self.tasks {
            let path = dir.join(format!("task_{id}.nt"));
            lpdt_tensor::io::save(&path, &stack_task(td, &self.meta)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(Error::json(&meta_path))?;
        let mut tasks = BTreeMap::new();
        for spec in &meta.tasks {
            let path = dir.join(format!("task_{}.nt", spec.task_index));
            let named = lpdt_tensor::io::load(&path)?;
            tasks.insert(spec.task_index, unstack_task(named, spec.task_index, &meta)?);
        }
        Ok(Self { meta, tasks })
    }
}

fn stack_task(td: &TaskDataset, meta: &DatasetMeta) -> Result<NamedTensors> {
    let n = td.trajectories.len();
    let t = meta.horizon;
    let (mut s, mut a, mut r) = (Vec::new(), Vec::new(), Vec::new());
    for tr in &td.trajectories {
        if tr.len() != t || tr.ds() != meta.ds || tr.da() != meta.da {
            return Err(Error::Data(format!("task {} holds a trajectory that does not match the dataset shape", td.task_id)));
        }
        s.extend_from_slice(tr.states.data());
        a.extend_from_slice(tr.actions.data());
        r.extend_from_slice(tr.rewards.data());
    }
    let mut named = NamedTensors::new();
    named.insert("states".into(), AnyTensor::F64(Tensor::new(vec![n, t, meta.ds], s)?));
    named.insert("actions".into(), AnyTensor::F64(Tensor::new(vec![n, t, meta.da], a)?));
    named.insert("rewards".into(), AnyTensor::F64(Tensor::new(vec![n, t], r)?));
    Ok(named)
}

fn unstack_task(mut named: NamedTensors, task_id: usize, meta: &DatasetMeta) -> Result<TaskDataset> {
    let n = match named.get("rewards") {
        Some(r) if r.shape().len() == 2 => r.shape()[0],
        _ => return Err(Error::Data(format!("task {task_id}: missing or malformed 'rewards'"))),
    };
    let t = meta.horizon;
    let s: Tensor<f64> = lpdt_tensor::io::take_tensor(&mut named, "states", &[n, t, meta.ds])?;
    let a: Tensor<f64> = lpdt_tensor::io::take_tensor(&mut named, "actions", &[n, t, meta.da])?;
    let r: Tensor<f64> = lpdt_tensor::io::take_tensor(&mut named, "rewards", &[n, t])?;
    let trajectories = (0..n)
        .map(|i| {
            let slice = |x: &Tensor<f64>, w: usize| x.data()[i * t * w..(i + 1) * t * w].to_vec();
            Trajectory::new(
                Tensor::new(vec![t, meta.ds], slice(&s, meta.ds))?,
                Tensor::new(vec![t, meta.da], slice(&a, meta.da))?,
                Tensor::from_vec(slice(&r, 1)),
                task_id,
            )
        })
        .collect::<Result<_>>()?;
    Ok(TaskDataset { task_id, trajectories })
}

fn rows(t: &Tensor<f64>, start: usize, end: usize) -> Vec<f64> {
    let w = t.numel() / t.dim(0).max(1);
    t.data()[start * w..end * w].to_vec()
}

/// Contiguous `k_star` window of a uniformly chosen eligible trajectory, with
/// the return-to-go of the full trajectory sliced to the window.
pub fn sample_prompt<R: Rng + ?Sized>(dataset: &Dataset, task_id: usize, k_star: usize, rng: &mut R) -> Result<Prompt> {
    if k_star == 0 {
        return Err(Error::Config("prompt length must be at least 1".into()));
    }
    let td = dataset.task(task_id)?;
    let eligible: Vec<&Trajectory> = td.trajectories.iter().filter(|t| t.len() >= k_star).collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!("task {task_id} has no trajectory of length >= {k_star}")));
    }
    let tr = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(0..=tr.len() - k_star);
    Ok(prompt_from(tr, start, k_star))
}

pub fn prompt_from(tr: &Trajectory, start: usize, k_star: usize) -> Prompt {
    let rtg = tr.returns_to_go();
    let end = start + k_star;
    Prompt {
        rtg: Tensor::from_vec(rtg.data()[start..end].to_vec()),
        states: Tensor::new(vec![k_star, tr.ds()], rows(&tr.states, start, end)).expect("window"),
        actions: Tensor::new(vec![k_star, tr.da()], rows(&tr.actions, start, end)).expect("window"),
        timesteps: (start..end).collect(),
        task_id: tr.task_id,
    }
}

/// Steps `start..min(start + k, T)` of `traj`, left-padded with zeros to `k`.
pub fn build_input(prompt: &Prompt, traj: &Trajectory, start: usize, k: usize) -> Result<InputSequence> {
    let rtg = traj.returns_to_go();
    build_input_with_rtg(prompt, traj, rtg.data(), start, k)
}

/// As [`build_input`] with an explicit return-to-go column, used at rollout
/// time where the conditioning return is a target rather than a suffix sum.
pub fn build_input_with_rtg(prompt: &Prompt, traj: &Trajectory, rtg: &[f64], start: usize, k: usize) -> Result<InputSequence> {
    if k == 0 {
        return Err(Error::Config("context length K must be at least 1".into()));
    }
    if prompt.task_id != traj.task_id {
        return Err(Error::Contract(format!("prompt of task {} paired with trajectory of task {}", prompt.task_id, traj.task_id)));
    }
    if start >= traj.len() || rtg.len() != traj.len() {
        return Err(Error::Contract(format!("window start {start} outside trajectory of length {}", traj.len())));
    }
    let end = (start + k).min(traj.len());
    let n = end - start;
    let pad = k - n;
    let (ds, da) = (traj.ds(), traj.da());
    let mut r = vec![0.0; pad];
    r.extend_from_slice(&rtg[start..end]);
    let mut s = vec![0.0; pad * ds];
    s.extend(rows(&traj.states, start, end));
    let mut a = vec![0.0; pad * da];
    a.extend(rows(&traj.actions, start, end));
    let mut timesteps = vec![0; pad];
    timesteps.extend(start..end);
    let mut pad_mask = vec![true; prompt.len()];
    pad_mask.extend((0..k).map(|i| i >= pad));
    Ok(InputSequence {
        prompt: prompt.clone(),
        rtg: Tensor::from_vec(r),
        states: Tensor::new(vec![k, ds], s)?,
        actions: Tensor::new(vec![k, da], a)?,
        timesteps,
        pad_mask,
        task_id: traj.task_id,
    })
}

/// `per_task` sequences for each task in `tasks`, grouped by task in order.
/// Prompts are resampled for every sequence.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    tasks: &[usize],
    per_task: usize,
    k: usize,
    k_star: usize,
    rng: &mut R,
) -> Result<Vec<InputSequence>> {
    if tasks.is_empty() || per_task == 0 {
        return Err(Error::Data("batch needs at least one task and one sequence per task".into()));
    }
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for &task in tasks {
        let td = dataset.task(task)?;
        if td.trajectories.is_empty() {
            return Err(Error::Data(format!("task {task} has no trajectories")));
        }
        for _ in 0..per_task {
            let prompt = sample_prompt(dataset, task, k_star, rng)?;
            let tr = &td.trajectories[rng.random_range(0..td.trajectories.len())];
            let start = rng.random_range(0..tr.len());
            out.push(build_input(&prompt, tr, start, k)?);
        }
    }
    Ok(out)
}

/// Keeps `⌈ratio·n⌉` uniformly chosen trajectories per task, in stored order.
pub fn subsample<R: Rng + ?Sized>(dataset: &Dataset, ratio: f64, rng: &mut R) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("subsample ratio {ratio} outside (0, 1]")));
    }
    let mut tasks = BTreeMap::new();
    for (&id, td) in &dataset.tasks {
        let n = td.trajectories.len();
        let keep = ((ratio * n as f64).ceil() as usize).min(n);
        let mut idx = sample(rng, n, keep).into_vec();
        idx.sort_unstable();
        let trajectories = idx.into_iter().map(|i| td.trajectories[i].clone()).collect();
        tasks.insert(id, TaskDataset { task_id: id, trajectories });
    }
    Ok(Dataset { meta: dataset.meta.clone(), tasks })
}
