//! Low-rank residual adapters over frozen projection matrices.
//!
//! An adapter replaces `x·W0` with `x·W0 + (alpha/r)·(x·A)·B`, where
//! `A` is `d×r` and `B` is `r×k`. `B` starts at zero, so a fresh adapter
//! leaves every output unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lpdt_tensor::{AnyTensor, Float, Graph, NamedTensors, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Bound;
use crate::transformer::TransformerConfig;

pub const ATTENTION_PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Frozen matrices to adapt; empty means every attention projection.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 8.0, targets: Vec::new() }
    }
}

/// Names of every attention projection in an `n_layers` stack.
pub fn attention_targets(n_layers: usize) -> Vec<String> {
    (0..n_layers)
        .flat_map(|i| ATTENTION_PROJECTIONS.iter().map(move |p| format!("layer.{i}.attn.{p}")))
        .collect()
}

impl LoraConfig {
    pub fn resolved_targets(&self, tcfg: &TransformerConfig) -> Result<Vec<String>> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        let known = attention_targets(tcfg.n_layers);
        let targets = if self.targets.is_empty() { known.clone() } else { self.targets.clone() };
        for t in &targets {
            if !known.contains(t) {
                return Err(Error::Config(format!("unknown LoRA target '{t}'")));
            }
        }
        let (d, k) = target_shape(tcfg);
        if self.rank > d.min(k) {
            return Err(Error::Config(format!("LoRA rank {} exceeds min({d}, {k})", self.rank)));
        }
        Ok(targets)
    }
}

fn target_shape(tcfg: &TransformerConfig) -> (usize, usize) {
    (tcfg.d_model, tcfg.d_model)
}

/// Number of adapter parameters: `Σ r·(d + k)` over the targets.
pub fn trainable_param_count(tcfg: &TransformerConfig, cfg: &LoraConfig) -> Result<usize> {
    let targets = cfg.resolved_targets(tcfg)?;
    let (d, k) = target_shape(tcfg);
    Ok(targets.len() * cfg.rank * (d + k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: String,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Float> LoraAdapter<T> {
    pub fn new<R: Rng + ?Sized>(target: &str, d: usize, k: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!("LoRA rank {rank} must lie in [1, min({d}, {k})]")));
        }
        Ok(Self {
            target: target.to_owned(),
            a: Tensor::randn(&[d, rank], A_INIT_STD, rng),
            b: Tensor::zeros(&[rank, k]),
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, w0: &Tensor<T>) -> Result<()> {
        let (d, k) = (self.a.dim(0), self.b.dim(1));
        if w0.shape() != [d, k] {
            return Err(Error::Adapter(format!(
                "adapter for '{}' is {d}x{k} but the frozen weight is {:?}",
                self.target,
                w0.shape()
            )));
        }
        Ok(())
    }

    /// `W0 + (alpha/r)·A·B`.
    pub fn merge(&self, w0: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(w0)?;
        let delta = self.a.matmul(&self.b)?.scale(T::from_f64_lossy(self.scale()));
        Ok(w0.add(&delta)?)
    }

    /// `x·W0 + (alpha/r)·(x·A)·B` without forming the merged weight.
    pub fn forward(&self, x: &Tensor<T>, w0: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (xv, wv, av, bv) = (g.constant(x.clone()), g.constant(w0.clone()), g.constant(self.a.clone()), g.constant(self.b.clone()));
        self.check(w0)?;
        let y = lora_forward(&mut g, xv, wv, Some((av, bv, self.scale())))?;
        Ok(g.value(y).clone())
    }
}

/// Graph form of the adapted projection. With `adapter = None` this is `x·W0`.
pub fn lora_forward<T: Float>(g: &mut Graph<T>, x: Var, w0: Var, adapter: Option<(Var, Var, f64)>) -> Result<Var> {
    let base = g.matmul(x, w0)?;
    let Some((a, b, scale)) = adapter else { return Ok(base) };
    let (d, k) = (g.shape(w0)[0], g.shape(w0)[1]);
    if g.shape(a)[0] != d || g.shape(b)[1] != k || g.shape(a)[1] != g.shape(b)[0] {
        return Err(Error::Adapter(format!(
            "A {:?} / B {:?} do not fit frozen weight {:?}",
            g.shape(a),
            g.shape(b),
            g.shape(w0)
        )));
    }
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    let delta = g.scale(xab, T::from_f64_lossy(scale));
    Ok(g.add(base, delta)?)
}

/// Sidecar written next to the adapter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSidecar {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

/// All adapters of one model, keyed by target name.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T> {
    pub rank: usize,
    pub alpha: f64,
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Float> LoraSet<T> {
    pub fn new(cfg: &LoraConfig, tcfg: &TransformerConfig, seed: u64) -> Result<Self> {
        let targets = cfg.resolved_targets(tcfg)?;
        let (d, k) = target_shape(tcfg);
        let mut rng = StdRng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for t in targets {
            let adapter = LoraAdapter::new(&t, d, k, cfg.rank, cfg.alpha, &mut rng)?;
            adapters.insert(t, adapter);
        }
        Ok(Self { rank: cfg.rank, alpha: cfg.alpha, adapters })
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.get(target)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn targets(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn numel(&self) -> usize {
        self.adapters.values().map(|a| a.a.numel() + a.b.numel()).sum()
    }

    pub fn sidecar(&self) -> LoraSidecar {
        LoraSidecar { rank: self.rank, alpha: self.alpha, targets: self.targets() }
    }

    /// Every adapter tensor as `(name, tensor)`, with names `lora.{target}.{A|B}`.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.adapters
            .iter()
            .flat_map(|(t, a)| [(format!("lora.{t}.A"), &a.a), (format!("lora.{t}.B"), &a.b)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.adapters
            .iter_mut()
            .flat_map(|(t, a)| [(format!("lora.{t}.A"), &mut a.a), (format!("lora.{t}.B"), &mut a.b)])
            .collect()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let rest = name.strip_prefix("lora.")?;
        let (target, which) = rest.rsplit_once('.')?;
        let adapter = self.adapters.get_mut(target)?;
        match which {
            "A" => Some(&mut adapter.a),
            "B" => Some(&mut adapter.b),
            _ => None,
        }
    }

    /// Binds every adapter matrix as a leaf.
    pub fn bind_into(&self, g: &mut Graph<T>, bound: &mut Bound, trainable: bool) {
        let mut store = crate::params::ParamStore::new();
        for (name, t) in self.tensors() {
            store.insert(name, t.clone());
        }
        store.bind_into(g, bound, |_| trainable);
    }

    pub fn to_named(&self) -> NamedTensors {
        self.tensors().into_iter().map(|(n, t)| (n, AnyTensor::from(t.clone()))).collect()
    }

    pub fn from_named(named: &mut NamedTensors, sidecar: &LoraSidecar, tcfg: &TransformerConfig) -> Result<Self> {
        let cfg = LoraConfig { rank: sidecar.rank, alpha: sidecar.alpha, targets: sidecar.targets.clone() };
        let targets = cfg.resolved_targets(tcfg)?;
        let (d, k) = target_shape(tcfg);
        let mut adapters = BTreeMap::new();
        for t in targets {
            let a = lpdt_tensor::io::take_tensor(named, &format!("lora.{t}.A"), &[d, cfg.rank])?;
            let b = lpdt_tensor::io::take_tensor(named, &format!("lora.{t}.B"), &[cfg.rank, k])?;
            adapters.insert(t.clone(), LoraAdapter { target: t, a, b, rank: cfg.rank, alpha: cfg.alpha });
        }
        Ok(Self { rank: cfg.rank, alpha: cfg.alpha, adapters })
    }

    /// Writes `{path}` (tensors) and `{path}.json` (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        lpdt_tensor::io::save(path, &self.to_named())?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar()).map_err(Error::json(&side))?;
        fs::write(&side, json).map_err(Error::io(&side))
    }

    pub fn load(path: &Path, tcfg: &TransformerConfig) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(Error::io(&side))?;
        let sidecar: LoraSidecar = serde_json::from_str(&text).map_err(Error::json(&side))?;
        let mut named = lpdt_tensor::io::load(path)?;
        Self::from_named(&mut named, &sidecar, tcfg)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
