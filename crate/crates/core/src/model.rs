//! The prompt-conditioned decision transformer: modality embedders, frozen
//! body with adapters, action head, prompt encoder and training losses.

use std::fs;
use std::path::Path;

use lpdt_tensor::{Float, Graph, NamedTensors, Tensor, Var};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{InputSequence, NormStats, DEFAULT_CONTEXT, DEFAULT_K_STAR};
use crate::envs::episode_seed;
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraSet, LoraSidecar};
use crate::params::{fan_in_init, linear, Bound, ParamStore};
use crate::transformer::{self, Layout, TransformerConfig, TransformerWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    None,
    #[default]
    Classifier,
    Infonce,
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegMode::None),
            "classifier" => Ok(RegMode::Classifier),
            "infonce" => Ok(RegMode::Infonce),
            _ => Err(Error::Config(format!("unknown reg_mode '{s}' (expected none, classifier or infonce)"))),
        }
    }
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegMode::None => "none",
            RegMode::Classifier => "classifier",
            RegMode::Infonce => "infonce",
        })
    }
}

/// How trajectory tokens are indexed into the positional table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Prompt and context each use their own episode timesteps.
    #[default]
    Restart,
    /// Prompt steps take `0..K*`; context steps continue at `K* + t`.
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpdtConfig {
    pub transformer: TransformerConfig,
    pub lora: LoraConfig,
    pub ds: usize,
    pub da: usize,
    pub k_star: usize,
    pub context: usize,
    pub lambda: f64,
    pub reg_mode: RegMode,
    pub temperature: f64,
    pub n_train_tasks: usize,
    pub mlp_dim: usize,
    pub classifier_layers: usize,
    pub position_mode: PositionMode,
    pub train_positions: bool,
}

impl Default for LpdtConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            lora: LoraConfig::default(),
            ds: 4,
            da: 2,
            k_star: DEFAULT_K_STAR,
            context: DEFAULT_CONTEXT,
            lambda: 0.1,
            reg_mode: RegMode::Classifier,
            temperature: 1.0,
            n_train_tasks: 6,
            mlp_dim: 128,
            classifier_layers: 2,
            position_mode: PositionMode::Restart,
            train_positions: true,
        }
    }
}

impl LpdtConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.lora.resolved_targets(&self.transformer)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.k_star == 0 || self.context == 0 || self.ds == 0 || self.da == 0 {
            return Err(Error::Config("k_star, context, ds and da must be positive".into()));
        }
        if self.classifier_layers == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("prompt encoder needs at least one layer of positive width".into()));
        }
        if self.reg_mode == RegMode::Classifier && self.n_train_tasks < 2 {
            return Err(Error::Config("classifier regularization needs at least two training tasks".into()));
        }
        let tokens = self.n_tokens();
        if tokens > self.transformer.max_seq_len {
            return Err(Error::Config(format!(
                "3·(K* + K) = {tokens} tokens exceed max_seq_len {}",
                self.transformer.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        3 * (self.k_star + self.context)
    }

    /// Shapes of everything outside the body and adapters.
    pub fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.transformer.d_model;
        let mut out = Vec::new();
        for part in ["prompt", "traj"] {
            for (m, w) in [("rtg", 1), ("state", self.ds), ("action", self.da)] {
                out.push((format!("embed.{part}.{m}.w"), vec![w, d]));
                out.push((format!("embed.{part}.{m}.b"), vec![d]));
            }
        }
        out.push(("head.action.w".into(), vec![d, self.da]));
        out.push(("head.action.b".into(), vec![self.da]));
        let mut width = d;
        for l in 1..=self.classifier_layers {
            out.push((format!("phi.l{l}.w"), vec![width, self.mlp_dim]));
            out.push((format!("phi.l{l}.b"), vec![self.mlp_dim]));
            width = self.mlp_dim;
        }
        if self.reg_mode == RegMode::Classifier {
            out.push(("reg.cls.w".into(), vec![self.mlp_dim, self.n_train_tasks]));
            out.push(("reg.cls.b".into(), vec![self.n_train_tasks]));
        }
        out
    }

    /// Whether the named tensor is updated during fine-tuning.
    pub fn is_trainable(&self, name: &str) -> bool {
        ["embed.", "head.", "phi.", "reg.", "lora."].iter().any(|p| name.starts_with(p))
            || (name == "pos_emb" && self.train_positions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpdtModel<T> {
    pub config: LpdtConfig,
    pub body: TransformerWeights<T>,
    pub lora: LoraSet<T>,
    pub heads: ParamStore<T>,
}

/// Graph handles produced by one forward pass over a batch of `B` sequences.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B·K × da]`, one prediction per context step.
    pub actions: Var,
    /// `[B × mlp_dim]` prompt encodings.
    pub z: Var,
    /// `[B × n_train_tasks]`, present in classifier mode.
    pub logits: Option<Var>,
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub l_pdt: Var,
    pub l_phi: Option<Var>,
    pub l_total: Var,
    /// Anchors without an in-batch positive (InfoNCE only).
    pub skipped_anchors: usize,
}

impl<T: Float> LpdtModel<T> {
    /// Wraps `body` (random or language-pretrained) with fresh heads and zero-effect adapters.
    pub fn new(config: LpdtConfig, body: TransformerWeights<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if body.config != config.transformer {
            return Err(Error::Config("body weights were built for a different transformer config".into()));
        }
        let mut rng = StdRng::seed_from_u64(episode_seed(seed, &[1]));
        let mut heads = ParamStore::new();
        for (name, shape) in config.head_shapes() {
            let t = if shape.len() == 1 { Tensor::zeros(&shape) } else { fan_in_init(shape[0], shape[1], &mut rng) };
            heads.insert(name, t);
        }
        let lora = LoraSet::new(&config.lora, &config.transformer, episode_seed(seed, &[2]))?;
        Ok(Self { config, body, lora, heads })
    }

    /// Pushes every parameter onto `g`. With `train = false` nothing requires a gradient.
    pub fn bind(&self, g: &mut Graph<T>, train: bool) -> Bound {
        let mut bound = Bound::new();
        let cfg = &self.config;
        self.body.bind_into(g, &mut bound, |n| train && cfg.is_trainable(n));
        self.heads.bind_into(g, &mut bound, |n| train && cfg.is_trainable(n));
        self.lora.bind_into(g, &mut bound, train);
        bound
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        if name.starts_with("lora.") {
            return self.lora.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t);
        }
        self.heads.get(name).or_else(|| self.body.params.get(name))
    }

    /// Every tensor the optimizer may touch, keyed by name, in a stable order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let cfg = &self.config;
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (n, t) in self.body.params.iter_mut() {
            if cfg.is_trainable(n) {
                out.push((n.to_owned(), t));
            }
        }
        for (n, t) in self.heads.iter_mut() {
            out.push((n.to_owned(), t));
        }
        out.extend(self.lora.tensors_mut());
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        let body: usize = self.body.params.iter().filter(|(n, _)| self.config.is_trainable(n)).map(|(_, t)| t.numel()).sum();
        body + self.heads.numel() + self.lora.numel()
    }

    fn check_batch(&self, seqs: &[InputSequence]) -> Result<()> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for s in seqs {
            if s.k_star() != cfg.k_star || s.context_len() != cfg.context {
                return Err(Error::Contract(format!(
                    "sequence has K*={} K={}, model expects K*={} K={}",
                    s.k_star(),
                    s.context_len(),
                    cfg.k_star,
                    cfg.context
                )));
            }
            if s.states.dim(1) != cfg.ds || s.actions.dim(1) != cfg.da || s.prompt.states.dim(1) != cfg.ds {
                return Err(Error::Contract(format!(
                    "sequence has ds={} da={}, model expects ds={} da={}",
                    s.states.dim(1),
                    s.actions.dim(1),
                    cfg.ds,
                    cfg.da
                )));
            }
        }
        let n = cfg.n_tokens();
        if n > cfg.transformer.max_seq_len {
            return Err(Error::SequenceLength { len: n, max: cfg.transformer.max_seq_len });
        }
        Ok(())
    }

    /// `[B·3(K*+K) × d_model]` token embeddings in `(R, s, a)` order per step,
    /// prompt steps first. Positions are added by the transformer.
    pub fn embed_tokens(&self, g: &mut Graph<T>, bound: &Bound, seqs: &[InputSequence]) -> Result<Var> {
        self.check_batch(seqs)?;
        let cfg = &self.config;
        let (b, ks, k) = (seqs.len(), cfg.k_star, cfg.context);
        let cast = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64_lossy(x)).collect() };
        let gather = |f: &dyn Fn(&InputSequence) -> &[f64]| -> Vec<T> { seqs.iter().flat_map(|s| cast(f(s))).collect() };
        let blocks: [(&str, &str, Vec<T>, usize, usize); 6] = [
            ("prompt", "rtg", gather(&|s| s.prompt.rtg.data()), b * ks, 1),
            ("prompt", "state", gather(&|s| s.prompt.states.data()), b * ks, cfg.ds),
            ("prompt", "action", gather(&|s| s.prompt.actions.data()), b * ks, cfg.da),
            ("traj", "rtg", gather(&|s| s.rtg.data()), b * k, 1),
            ("traj", "state", gather(&|s| s.states.data()), b * k, cfg.ds),
            ("traj", "action", gather(&|s| s.actions.data()), b * k, cfg.da),
        ];
        let mut parts = Vec::with_capacity(6);
        for (part, m, data, rows, width) in blocks {
            let x = g.constant(Tensor::new(vec![rows, width], data)?);
            let w = bound.get(&format!("embed.{part}.{m}.w"))?;
            let bias = bound.get(&format!("embed.{part}.{m}.b"))?;
            parts.push(linear(g, x, w, Some(bias))?);
        }
        let stacked = g.concat_rows(&parts)?;
        let p_block = b * ks;
        let t_base = 3 * p_block;
        let t_block = b * k;
        let mut idx = Vec::with_capacity(b * cfg.n_tokens());
        for s in 0..b {
            for i in 0..ks {
                for m in 0..3 {
                    idx.push(m * p_block + s * ks + i);
                }
            }
            for j in 0..k {
                for m in 0..3 {
                    idx.push(t_base + m * t_block + s * k + j);
                }
            }
        }
        Ok(g.gather_rows(stacked, &idx)?)
    }

    fn positions(&self, seqs: &[InputSequence]) -> Vec<usize> {
        let ks = self.config.k_star;
        let mut out = Vec::with_capacity(seqs.len() * self.config.n_tokens());
        for s in seqs {
            let prompt_pos: Vec<usize> = match self.config.position_mode {
                PositionMode::Restart => s.prompt.timesteps.clone(),
                PositionMode::Continue => (0..ks).collect(),
            };
            let ctx_pos = s.timesteps.iter().zip(s.context_mask()).map(|(&t, &real)| match (self.config.position_mode, real) {
                (_, false) => 0,
                (PositionMode::Restart, true) => t,
                (PositionMode::Continue, true) => ks + t,
            });
            for p in prompt_pos.into_iter().chain(ctx_pos) {
                out.extend([p; 3]);
            }
        }
        out
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, seqs: &[InputSequence], rng: Option<&mut StdRng>) -> Result<ModelOutput> {
        let cfg = &self.config;
        let x = self.embed_tokens(g, bound, seqs)?;
        let (b, ks, k, l) = (seqs.len(), cfg.k_star, cfg.context, cfg.n_tokens());
        let positions = self.positions(seqs);
        let key_valid: Vec<bool> = seqs.iter().flat_map(|s| s.pad_mask.iter().flat_map(|&m| [m; 3])).collect();
        let layout = Layout {
            batch: b,
            seq: l,
            positions: Some(&positions),
            key_valid: Some(&key_valid),
            lora_scale: self.lora.scale(),
        };
        let hidden = transformer::forward(g, bound, &cfg.transformer, x, &layout, rng)?;

        let state_rows: Vec<usize> = (0..b).flat_map(|s| (0..k).map(move |j| s * l + 3 * (ks + j) + 1)).collect();
        let hs = g.gather_rows(hidden, &state_rows)?;
        let a = linear(g, hs, bound.get("head.action.w")?, Some(bound.get("head.action.b")?))?;
        let actions = g.tanh(a);

        let prompt_rows: Vec<usize> = (0..b).flat_map(|s| (0..3 * ks).map(move |j| s * l + j)).collect();
        let hp = g.gather_rows(hidden, &prompt_rows)?;
        let hp = g.reshape(hp, &[b, 3 * ks, cfg.transformer.d_model])?;
        let pooled = g.mean_axis(hp, 1)?;
        let mut z = pooled;
        for layer in 1..=cfg.classifier_layers {
            z = linear(g, z, bound.get(&format!("phi.l{layer}.w"))?, Some(bound.get(&format!("phi.l{layer}.b"))?))?;
            if layer < cfg.classifier_layers {
                z = g.relu(z);
            }
        }
        let logits = match cfg.reg_mode {
            RegMode::Classifier => Some(linear(g, z, bound.get("reg.cls.w")?, Some(bound.get("reg.cls.b")?))?),
            _ => None,
        };
        Ok(ModelOutput { actions, z, logits, hidden })
    }

    /// `L_PDT + λ·L_φ` for a forward pass. `labels` are class indexes of each
    /// sequence's task, used by the classifier and as InfoNCE pairing keys.
    pub fn losses(&self, g: &mut Graph<T>, seqs: &[InputSequence], out: &ModelOutput, labels: &[usize]) -> Result<Losses> {
        let cfg = &self.config;
        if labels.len() != seqs.len() {
            return Err(Error::Contract(format!("{} labels for {} sequences", labels.len(), seqs.len())));
        }
        let target: Vec<T> = seqs.iter().flat_map(|s| s.actions.data().iter().map(|&v| T::from_f64_lossy(v))).collect();
        let target = Tensor::new(vec![seqs.len() * cfg.context, cfg.da], target)?;
        let mask: Vec<bool> = seqs.iter().flat_map(|s| s.context_mask().iter().copied()).collect();
        let l_pdt = loss_pdt(g, out.actions, &target, &mask)?;
        let (l_phi, skipped) = match (cfg.reg_mode, out.logits) {
            (RegMode::None, _) => (None, 0),
            (RegMode::Classifier, Some(logits)) => (Some(loss_classifier(g, logits, labels)?), 0),
            (RegMode::Classifier, None) => return Err(Error::Contract("classifier mode without logits".into())),
            (RegMode::Infonce, _) => {
                let (l, skipped) = loss_infonce(g, out.z, labels, cfg.temperature)?;
                (Some(l), skipped)
            }
        };
        let l_total = loss_total(g, l_pdt, l_phi, cfg.lambda)?;
        Ok(Losses { l_pdt, l_phi, l_total, skipped_anchors: skipped })
    }

    /// Action for the last real context step of each sequence, without dropout.
    pub fn predict_last(&self, seqs: &[InputSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, seqs, None)?;
        let (k, da) = (self.config.context, self.config.da);
        let a = g.value(out.actions);
        Ok((0..seqs.len())
            .map(|s| {
                let row = s * k + k - 1;
                a.data()[row * da..(row + 1) * da].iter().map(|v| v.to_f64().unwrap()).collect()
            })
            .collect())
    }

    /// Prompt encodings and (in classifier mode) logits, without dropout.
    pub fn encode_prompts(&self, seqs: &[InputSequence]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, seqs, None)?;
        Ok((g.value(out.z).clone(), out.logits.map(|l| g.value(l).clone())))
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut named = self.body.params.to_named();
        named.extend(self.heads.to_named());
        named.extend(self.lora.to_named());
        named
    }

    /// Writes `model.nt`, `config.json`, `lora.json` and `norm.json` into `dir`.
    pub fn save(&self, dir: &Path, norm: &NormStats) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        lpdt_tensor::io::save(dir.join("model.nt"), &self.to_named())?;
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("lora.json"), &self.lora.sidecar())?;
        write_json(&dir.join("norm.json"), norm)
    }

    pub fn load(dir: &Path) -> Result<(Self, NormStats)> {
        let config: LpdtConfig = read_json(&dir.join("config.json"))?;
        let sidecar: LoraSidecar = read_json(&dir.join("lora.json"))?;
        let norm: NormStats = read_json(&dir.join("norm.json"))?;
        config.validate()?;
        let mut named = lpdt_tensor::io::load(dir.join("model.nt"))?;
        let body = TransformerWeights::from_named(&mut named, &config.transformer)?;
        let heads = ParamStore::from_named(&mut named, &config.head_shapes())?;
        let lora = LoraSet::from_named(&mut named, &sidecar, &config.transformer)?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Data(format!("unexpected tensor '{extra}' in checkpoint")));
        }
        Ok((Self { config, body, lora, heads }, norm))
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Mean of `(a - â)²` over real rows and all action dimensions.
pub fn loss_pdt<T: Float>(g: &mut Graph<T>, predicted: Var, target: &Tensor<T>, row_mask: &[bool]) -> Result<Var> {
    let shape = g.shape(predicted).to_vec();
    if shape != target.shape() || shape.len() != 2 || row_mask.len() != shape[0] {
        return Err(Error::Contract(format!(
            "prediction {shape:?}, target {:?} and {} mask rows disagree",
            target.shape(),
            row_mask.len()
        )));
    }
    let real = row_mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::Contract("every step in the batch is padding".into()));
    }
    let inv = T::from_f64_lossy(1.0 / (real * shape[1]) as f64);
    let weights: Vec<T> = row_mask.iter().flat_map(|&m| std::iter::repeat_n(if m { inv } else { T::zero() }, shape[1])).collect();
    let t = g.constant(target.clone());
    let diff = g.sub(predicted, t)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(Tensor::new(shape, weights)?);
    let weighted = g.mul(sq, w)?;
    Ok(g.sum_all(weighted))
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn loss_classifier<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::Contract(format!("logits must be 2-D, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let lp = g.log_softmax(logits, None)?;
    let picked = g.pick_per_row(lp, labels)?;
    let mean = g.mean_all(picked)?;
    Ok(g.scale(mean, -T::one()))
}

/// Contrastive loss on cosine similarities. For anchor `i` with positive `j`
/// (same key, `j ≠ i`) the term is `-log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`;
/// terms are averaged over each anchor's positives, then over anchors.
///
/// Returns the loss and the number of anchors skipped for lack of a positive.
pub fn loss_infonce<T: Float>(g: &mut Graph<T>, z: Var, keys: &[usize], temperature: f64) -> Result<(Var, usize)> {
    let shape = g.shape(z).to_vec();
    let [n, m] = shape[..] else {
        return Err(Error::Contract(format!("embeddings must be 2-D, got {shape:?}")));
    };
    if n < 2 || keys.len() != n {
        return Err(Error::Contract(format!("InfoNCE needs N >= 2 embeddings with one key each (N={n}, keys={})", keys.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let positives: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| j != i && keys[j] == keys[i]).count()).collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Err(Error::Contract("no anchor in the batch has a positive".into()));
    }
    let unit = g.l2_normalize(z)?;
    let u3 = g.reshape(unit, &[1, n, m])?;
    let sim = g.batch_matmul(u3, u3, true)?;
    let sim = g.reshape(sim, &[n, n])?;
    let logits = g.scale(sim, T::from_f64_lossy(1.0 / temperature));
    let off_diag: Vec<bool> = (0..n * n).map(|e| e / n != e % n).collect();
    let lp = g.log_softmax(logits, Some(off_diag))?;
    let mut w = vec![T::zero(); n * n];
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let wi = T::from_f64_lossy(-1.0 / (positives[i] * anchors) as f64);
        for j in 0..n {
            if j != i && keys[j] == keys[i] {
                w[i * n + j] = wi;
            }
        }
    }
    let w = g.constant(Tensor::new(vec![n, n], w)?);
    let weighted = g.mul(lp, w)?;
    Ok((g.sum_all(weighted), n - anchors))
}

/// `l_pdt + λ·l_phi`; returns `l_pdt` itself when there is no regularizer or `λ = 0`.
pub fn loss_total<T: Float>(g: &mut Graph<T>, l_pdt: Var, l_phi: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    match l_phi {
        Some(phi) if lambda > 0.0 => {
            let reg = g.scale(phi, T::from_f64_lossy(lambda));
            Ok(g.add(l_pdt, reg)?)
        }
        _ => Ok(l_pdt),
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn classifier_accuracy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.dim(1);
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn pdt_zero_and_unit_offset() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let p = g.constant(t.clone());
        let l = loss_pdt(&mut g, p, &t, &[true, false, true]).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let shifted = g.constant(Tensor::new(vec![3, 2], t.data().iter().map(|v| v + 1.0).collect()).unwrap());
        let l = loss_pdt(&mut g, shifted, &t, &[true, true, false]).unwrap();
        assert!((scalar(&g, l) - 1.0).abs() < 1e-12);
        assert!(matches!(loss_pdt(&mut g, p, &t, &[false; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn classifier_closed_forms() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[1, 4]));
        let l = loss_classifier(&mut g, uniform, &[2]).unwrap();
        assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-9);
        let sharp = g.constant(Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap());
        let l = loss_classifier(&mut g, sharp, &[0]).unwrap();
        assert!(scalar(&g, l) < 1e-8);
        assert!(loss_classifier(&mut g, sharp, &[3]).is_err());
    }

    #[test]
    fn infonce_identical_embeddings() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::ones(&[4, 5]));
        let (l, skipped) = loss_infonce(&mut g, z, &[0, 0, 0, 0], 1.0).unwrap();
        assert!((scalar(&g, l) - 3f64.ln()).abs() < 1e-9);
        assert_eq!(skipped, 0);
        assert!(matches!(loss_infonce(&mut g, z, &[0, 1, 2, 3], 1.0), Err(Error::Contract(_))));
        let (_, skipped) = loss_infonce(&mut g, z, &[0, 0, 1, 2], 1.0).unwrap();
        assert_eq!(skipped, 2);
    }

    #[test]
    fn total_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        assert_eq!(loss_total(&mut g, a, Some(b), 0.0).unwrap(), a);
        assert_eq!(loss_total(&mut g, a, None, 0.1).unwrap(), a);
        let t = loss_total(&mut g, a, Some(b), 0.1).unwrap();
        assert!((scalar(&g, t) - 1.2).abs() < 1e-15);
        assert!(loss_total(&mut g, a, Some(b), -1.0).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(LpdtConfig::default().validate().is_ok());
        assert!(LpdtConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(LpdtConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(LpdtConfig { context: 21, ..Default::default() }.validate().is_err());
        assert_eq!(LpdtConfig::default().n_tokens(), 75);
        assert_eq!("infonce".parse::<RegMode>().unwrap(), RegMode::Infonce);
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap();
        assert!((classifier_accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
