//! GPT-style causal transformer over already-embedded token sequences.
//!
//! Blocks are pre-norm: `h += attn(ln1(h)); h += ffn(ln2(h))`, followed by a
//! final layer norm. Projections carry no bias. Sequences are processed as a
//! batch of `B` rows of length `T`, flattened to `[B·T × d_model]`.

use std::path::Path;

use lpdt_tensor::{Float, Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::lora_forward;
use crate::params::{normal_init, Bound, ParamStore};

const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Longest sequence accepted, and the number of rows in `pos_emb`.
    pub max_seq_len: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 1, d_model: 128, d_ff: 512, max_seq_len: 75, dropout: 0.1, activation: Activation::Relu }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_model, n_heads, d_ff and max_seq_len must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Every body tensor name with its shape.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![("pos_emb".to_owned(), vec![self.max_seq_len, d])];
        for i in 0..self.n_layers {
            for p in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layer.{i}.attn.{p}"), vec![d, d]));
            }
            out.push((format!("layer.{i}.ffn.w1"), vec![d, f]));
            out.push((format!("layer.{i}.ffn.w2"), vec![f, d]));
            for ln in ["ln1", "ln2"] {
                out.push((format!("layer.{i}.{ln}.g"), vec![d]));
                out.push((format!("layer.{i}.{ln}.b"), vec![d]));
            }
        }
        if self.n_layers > 0 {
            out.push(("final_ln.g".to_owned(), vec![d]));
            out.push(("final_ln.b".to_owned(), vec![d]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights<T> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> TransformerWeights<T> {
    /// Projections and positional table `N(0, 0.02²)`, LN gains 1, biases 0.
    pub fn init_random(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.expected_shapes() {
            let t = if name.ends_with(".g") {
                Tensor::ones(&shape)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                normal_init(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config: config.clone(), params })
    }

    pub fn from_named(named: &mut lpdt_tensor::NamedTensors, config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_named(named, &config.expected_shapes())?;
        Ok(Self { config: config.clone(), params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(lpdt_tensor::io::save(path, &self.params.to_named())?)
    }

    /// Loads a body file and checks every tensor against `config`.
    pub fn load(path: &Path, config: &TransformerConfig) -> Result<Self> {
        let mut named = lpdt_tensor::io::load(path)?;
        Self::from_named(&mut named, config)
    }

    pub fn bind_into(&self, g: &mut Graph<T>, bound: &mut Bound, trainable: impl Fn(&str) -> bool) {
        self.params.bind_into(g, bound, trainable);
    }
}

/// Per-call layout of the flattened input.
#[derive(Clone, Copy, Debug)]
pub struct Layout<'a> {
    pub batch: usize,
    pub seq: usize,
    /// Rows of `pos_emb` to add, one per token; `None` if the caller already
    /// added positions.
    pub positions: Option<&'a [usize]>,
    /// `false` marks padding tokens, which no query may attend to.
    pub key_valid: Option<&'a [bool]>,
    /// `alpha/r` for adapters found in the bound set under `lora.{target}.{A|B}`.
    pub lora_scale: f64,
}

impl<'a> Layout<'a> {
    pub fn new(batch: usize, seq: usize) -> Self {
        Self { batch, seq, positions: None, key_valid: None, lora_scale: 1.0 }
    }
}

fn project<T: Float>(g: &mut Graph<T>, bound: &Bound, x: Var, name: &str, lora_scale: f64) -> Result<Var> {
    let w = bound.get(name)?;
    let adapter = match (bound.try_get(&format!("lora.{name}.A")), bound.try_get(&format!("lora.{name}.B"))) {
        (Some(a), Some(b)) => Some((a, b, lora_scale)),
        (None, None) => None,
        _ => return Err(Error::Adapter(format!("adapter for '{name}' is missing one of A/B"))),
    };
    lora_forward(g, x, w, adapter)
}

/// Multi-head causal self-attention for layer `layer` on `x: [B·T × d]`.
pub fn causal_attention<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &TransformerConfig,
    layer: usize,
    x: Var,
    layout: &Layout,
) -> Result<Var> {
    let (b, t, h) = (layout.batch, layout.seq, config.n_heads);
    let d = config.d_model;
    let dh = d / h;
    if t > config.max_seq_len {
        return Err(Error::SequenceLength { len: t, max: config.max_seq_len });
    }
    let p = |w: &str| format!("layer.{layer}.attn.{w}");
    let q = project(g, bound, x, &p("wq"), layout.lora_scale)?;
    let k = project(g, bound, x, &p("wk"), layout.lora_scale)?;
    let v = project(g, bound, x, &p("wv"), layout.lora_scale)?;

    let split = |g: &mut Graph<T>, m: Var| -> Result<Var> {
        if h == 1 {
            return Ok(g.reshape(m, &[b, t, d])?);
        }
        let m = g.reshape(m, &[b, t, h, dh])?;
        let m = g.permute(m, &[0, 2, 1, 3])?;
        Ok(g.reshape(m, &[b * h, t, dh])?)
    };
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
    let expanded: Option<Vec<bool>> = layout.key_valid.map(|kv| {
        (0..b * h).flat_map(|gi| kv[(gi / h) * t..(gi / h + 1) * t].iter().copied()).collect()
    });
    let probs = g.causal_softmax(scores, expanded.as_deref())?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = if h == 1 {
        g.reshape(ctx, &[b * t, d])?
    } else {
        let c = g.reshape(ctx, &[b, h, t, dh])?;
        let c = g.permute(c, &[0, 2, 1, 3])?;
        g.reshape(c, &[b * t, d])?
    };
    project(g, bound, ctx, &p("wo"), layout.lora_scale)
}

/// Runs the block stack on `x: [B·T × d]` and returns the final hidden states.
///
/// Dropout is active only when `rng` is given.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &TransformerConfig,
    x: Var,
    layout: &Layout,
    mut rng: Option<&mut StdRng>,
) -> Result<Var> {
    let (b, t, d) = (layout.batch, layout.seq, config.d_model);
    if t > config.max_seq_len {
        return Err(Error::SequenceLength { len: t, max: config.max_seq_len });
    }
    if g.shape(x) != [b * t, d] {
        return Err(Error::Contract(format!("transformer input {:?} is not [{}x{d}]", g.shape(x), b * t)));
    }
    if let Some(kv) = layout.key_valid {
        if kv.len() != b * t {
            return Err(Error::Contract(format!("key mask has {} entries for {} tokens", kv.len(), b * t)));
        }
    }
    let mut h = x;
    if let Some(pos) = layout.positions {
        if pos.len() != b * t {
            return Err(Error::Contract(format!("{} positions for {} tokens", pos.len(), b * t)));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= config.max_seq_len) {
            return Err(Error::SequenceLength { len: bad + 1, max: config.max_seq_len });
        }
        let table = bound.get("pos_emb")?;
        let pe = g.gather_rows(table, pos)?;
        h = g.add(h, pe)?;
    }
    let p_drop = config.dropout;
    let drop = |g: &mut Graph<T>, v: Var, rng: &mut Option<&mut StdRng>| -> Result<Var> {
        match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Ok(g.dropout(v, p_drop, r)?),
            _ => Ok(v),
        }
    };
    for i in 0..config.n_layers {
        let ln = |g: &mut Graph<T>, v: Var, n: &str| -> Result<Var> {
            let gain = bound.get(&format!("layer.{i}.{n}.g"))?;
            let bias = bound.get(&format!("layer.{i}.{n}.b"))?;
            Ok(g.layer_norm(v, gain, bias, LN_EPS)?)
        };
        let a = ln(g, h, "ln1")?;
        let a = causal_attention(g, bound, config, i, a, layout)?;
        let a = drop(g, a, &mut rng)?;
        h = g.add(h, a)?;

        let f = ln(g, h, "ln2")?;
        let f = g.matmul(f, bound.get(&format!("layer.{i}.ffn.w1"))?)?;
        let f = match config.activation {
            Activation::Relu => g.relu(f),
            Activation::Gelu => g.gelu(f),
        };
        let f = g.matmul(f, bound.get(&format!("layer.{i}.ffn.w2"))?)?;
        let f = drop(g, f, &mut rng)?;
        h = g.add(h, f)?;
    }
    if config.n_layers > 0 {
        h = g.layer_norm(h, bound.get("final_ln.g")?, bound.get("final_ln.b")?, LN_EPS)?;
    }
    Ok(h)
}
