//! Two families of point-mass control tasks, scripted behavior policies and
//! offline dataset generation.
//!
//! `point_dir` rewards velocity along a goal direction θ; `point_vel` penalizes
//! squared deviation from a goal speed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use lpdt_tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, NormStats, TaskDataset, Trajectory};
use crate::error::{Error, Result};

pub const DT: f64 = 0.1;
pub const HORIZON: usize = 64;
pub const V_MAX: f64 = 2.0;
pub const SIGMAS: [f64; 3] = [0.1, 0.3, 0.5];
pub const VEL_GAIN: f64 = 5.0;
const RESET_SPEED: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PointDir,
    PointVel,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::PointDir => "point_dir",
            Family::PointVel => "point_vel",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_dir" => Ok(Family::PointDir),
            "point_vel" => Ok(Family::PointVel),
            _ => Err(Error::Config(format!("unknown task family '{s}' (expected point_dir or point_vel)"))),
        }
    }
}

impl Family {
    pub fn ds(self) -> usize {
        match self {
            Family::PointDir => 4,
            Family::PointVel => 2,
        }
    }

    pub fn da(self) -> usize {
        match self {
            Family::PointDir => 2,
            Family::PointVel => 1,
        }
    }

    pub fn n_tasks(self) -> usize {
        match self {
            Family::PointDir => 8,
            Family::PointVel => 10,
        }
    }

    pub fn task(self, index: usize) -> Result<TaskSpec> {
        let n = self.n_tasks();
        if index >= n {
            return Err(Error::Config(format!("{self} has {n} tasks, index {index} is out of range")));
        }
        let param = match self {
            Family::PointDir => 2.0 * PI * index as f64 / n as f64,
            Family::PointVel => 0.5 + 1.5 * index as f64 / (n - 1) as f64,
        };
        Ok(TaskSpec { family: self, param, task_index: index })
    }

    pub fn tasks(self) -> Vec<TaskSpec> {
        (0..self.n_tasks()).map(|i| self.task(i).expect("in range")).collect()
    }
}

/// `(train, test)` task indexes.
pub fn task_split(family: Family) -> (Vec<usize>, Vec<usize>) {
    match family {
        Family::PointDir => ((0..6).collect(), vec![6, 7]),
        Family::PointVel => (vec![0, 1, 3, 4, 5, 6, 8, 9], vec![2, 7]),
    }
}

/// `param` is the goal angle for `point_dir` and the goal speed for `point_vel`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub param: f64,
    pub task_index: usize,
}

impl TaskSpec {
    fn direction(&self) -> [f64; 2] {
        [self.param.cos(), self.param.sin()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub step_count: usize,
}

impl EnvState {
    /// `(x, y, vx, vy)` or `(x, v)`.
    pub fn observation(&self) -> Vec<f64> {
        let mut o = self.pos.clone();
        o.extend_from_slice(&self.vel);
        o
    }

    pub fn done(&self) -> bool {
        self.step_count >= HORIZON
    }
}

/// Position zero, velocity uniform in `(-0.1, 0.1)` per dimension.
pub fn reset(task: &TaskSpec, seed: u64) -> EnvState {
    let mut rng = StdRng::seed_from_u64(seed);
    let dims = task.family.da();
    EnvState {
        pos: vec![0.0; dims],
        vel: (0..dims).map(|_| rng.random_range(-RESET_SPEED..RESET_SPEED)).collect(),
        step_count: 0,
    }
}

/// Advances one `dt`; returns `(state', reward, done)`.
pub fn step(state: &EnvState, action: &[f64], task: &TaskSpec) -> Result<(EnvState, f64, bool)> {
    if state.done() {
        return Err(Error::Contract(format!("step called on a finished episode ({} steps)", state.step_count)));
    }
    let dims = task.family.da();
    if action.len() != dims {
        return Err(Error::Contract(format!("{} expects {dims} action dims, got {}", task.family, action.len())));
    }
    let mut vel: Vec<f64> = state.vel.iter().zip(action).map(|(v, a)| v + a.clamp(-1.0, 1.0) * DT).collect();
    let speed = vel.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed > V_MAX {
        vel.iter_mut().for_each(|v| *v *= V_MAX / speed);
    }
    let pos = state.pos.iter().zip(&vel).map(|(x, v)| x + v * DT).collect();
    let reward = match task.family {
        Family::PointDir => {
            let u = task.direction();
            vel[0] * u[0] + vel[1] * u[1]
        }
        Family::PointVel => -(vel[0] - task.param).powi(2),
    };
    let next = EnvState { pos, vel, step_count: state.step_count + 1 };
    let done = next.done();
    Ok((next, reward, done))
}

/// Noisy scripted controller; actions are clipped to the unit ball. With
/// `sigma = 0` it draws nothing from `rng`.
pub fn scripted_policy<R: Rng + ?Sized>(task: &TaskSpec, sigma: f64, state: &EnvState, rng: &mut R) -> Vec<f64> {
    let mean = match task.family {
        Family::PointDir => task.direction().to_vec(),
        Family::PointVel => vec![(VEL_GAIN * (task.param - state.vel[0])).clamp(-1.0, 1.0)],
    };
    if sigma <= 0.0 {
        return mean;
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut a: Vec<f64> = mean.into_iter().map(|m| m + noise.sample(rng)).collect();
    // thrust is limited to unit norm, which also keeps every component in [-1, 1]
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1.0 {
        a.iter_mut().for_each(|v| *v /= norm);
    }
    a
}

/// Runs one full episode, recording `(s_t, a_t, r_t)` where `s_t` precedes `a_t`.
pub fn rollout(task: &TaskSpec, seed: u64, mut policy: impl FnMut(&EnvState) -> Vec<f64>) -> Result<Trajectory> {
    let (ds, da) = (task.family.ds(), task.family.da());
    let mut state = reset(task, seed);
    let (mut s, mut a, mut r) = (Vec::new(), Vec::new(), Vec::new());
    while !state.done() {
        let action: Vec<f64> = policy(&state).into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let (next, reward, _) = step(&state, &action, task)?;
        s.extend(state.observation());
        a.extend_from_slice(&action);
        r.push(reward);
        state = next;
    }
    Trajectory::new(Tensor::new(vec![HORIZON, ds], s)?, Tensor::new(vec![HORIZON, da], a)?, Tensor::from_vec(r), task.task_index)
}

/// Deterministic per-episode seed from the generator seed and episode coordinates.
pub fn episode_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Mean σ=0 return of `task` over `episodes` seeded resets.
pub fn expert_reference_return(task: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
    mean_policy_return(task, 0.0, episodes, seed)
}

pub fn mean_policy_return(task: &TaskSpec, sigma: f64, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let mut total = 0.0;
    for ep in 0..episodes {
        let s = episode_seed(seed, &[task.task_index as u64, ep as u64]);
        let mut rng = StdRng::seed_from_u64(s ^ 1);
        let tr = rollout(task, s, |st| scripted_policy(task, sigma, st, &mut rng))?;
        total += tr.total_return();
    }
    Ok(total / episodes as f64)
}

/// `n_traj_per_noise` episodes per task and noise level.
pub fn generate_dataset(family: Family, tasks: &[usize], n_traj_per_noise: usize, seed: u64) -> Result<Dataset> {
    if tasks.is_empty() {
        return Err(Error::Config("dataset needs at least one task".into()));
    }
    let mut specs = Vec::new();
    let mut out = BTreeMap::new();
    for &ti in tasks {
        let spec = family.task(ti)?;
        let mut trajectories = Vec::with_capacity(SIGMAS.len() * n_traj_per_noise);
        for (si, &sigma) in SIGMAS.iter().enumerate() {
            for ep in 0..n_traj_per_noise {
                let s = episode_seed(seed, &[ti as u64, si as u64, ep as u64]);
                let mut rng = StdRng::seed_from_u64(s ^ 1);
                trajectories.push(rollout(&spec, s, |st| scripted_policy(&spec, sigma, st, &mut rng))?);
            }
        }
        specs.push(spec);
        out.insert(ti, TaskDataset { task_id: ti, trajectories });
    }
    let (train, _) = task_split(family);
    let mut stat_src: Vec<&Trajectory> =
        out.iter().filter(|(id, _)| train.contains(id)).flat_map(|(_, td)| &td.trajectories).collect();
    if stat_src.is_empty() {
        stat_src = out.values().flat_map(|td| &td.trajectories).collect();
    }
    let norm = NormStats::compute(stat_src.iter().copied())?;
    let max_train_return = stat_src.iter().map(|t| t.total_return()).fold(f64::NEG_INFINITY, f64::max);
    let meta = DatasetMeta {
        family,
        ds: family.ds(),
        da: family.da(),
        horizon: HORIZON,
        tasks: specs,
        norm,
        seed,
        dt: DT,
        v_max: V_MAX,
        sigmas: SIGMAS.to_vec(),
        n_traj_per_noise,
        max_train_return,
    };
    Ok(Dataset { meta, tasks: out })
}

#[cfg(test)]
pub(crate) fn test_meta() -> DatasetMeta {
    DatasetMeta {
        family: Family::PointVel,
        ds: 2,
        da: 1,
        horizon: 4,
        tasks: vec![],
        norm: NormStats { state_mean: vec![0.0; 2], state_std: vec![1.0; 2], return_scale: 1.0 },
        seed: 0,
        dt: DT,
        v_max: V_MAX,
        sigmas: SIGMAS.to_vec(),
        n_traj_per_noise: 1,
        max_train_return: 0.0,
    }
}
