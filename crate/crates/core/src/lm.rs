//! Character-level causal language-model pre-training of the transformer body.
//!
//! The character embedding table and output projection exist only here; the
//! exported file holds the body alone.

use std::path::Path;

use lpdt_tensor::{clip_grad_norm, AdamW, Float, Graph, Tensor};
use log::info;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::envs::episode_seed;
use crate::error::{Error, Result};
use crate::params::{normal_init, Bound, ParamStore};
use crate::transformer::{self, Layout, TransformerConfig, TransformerWeights};

pub const MAX_VOCAB: usize = 256;
const TRAIN_FRACTION: f64 = 0.9;
const VALID_WINDOWS: usize = 32;

/// Path of the corpus shipped with the crate.
pub fn bundled_corpus_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("corpus.txt")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    pub vocab: Vec<char>,
    pub ids: Vec<usize>,
    /// Index of the first validation token.
    pub split: usize,
}

impl CharCorpus {
    /// Sorted unique characters as vocabulary; the first 90% of the text trains.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab: Vec<char> = text.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.len() > MAX_VOCAB {
            return Err(Error::Data(format!("corpus has {} distinct characters, limit is {MAX_VOCAB}", vocab.len())));
        }
        if vocab.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let ids: Vec<usize> = text.chars().map(|c| vocab.binary_search(&c).expect("in vocab")).collect();
        let split = ((ids.len() as f64) * TRAIN_FRACTION) as usize;
        Ok(Self { vocab, ids, split })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_text(&text)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn valid(&self) -> &[usize] {
        &self.ids[self.split..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Validation loss is logged every `eval_every` steps (0 disables).
    pub eval_every: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, lr: 1e-3, weight_decay: 1e-4, warmup_steps: 100, grad_clip: 1.0, eval_every: 500 }
    }
}

/// Body plus the character-specific input and output layers.
#[derive(Clone, Debug, PartialEq)]
pub struct CharLm<T> {
    pub body: TransformerWeights<T>,
    pub io: ParamStore<T>,
}

impl<T: Float> CharLm<T> {
    pub fn init(config: &TransformerConfig, vocab: usize, seed: u64) -> Result<Self> {
        let body = TransformerWeights::init_random(config, seed)?;
        let mut rng = StdRng::seed_from_u64(episode_seed(seed, &[0x4c4d]));
        let mut io = ParamStore::new();
        io.insert("lm.tok_emb", normal_init(&[vocab, config.d_model], 0.02, &mut rng));
        io.insert("lm.out", normal_init(&[config.d_model, vocab], 0.02, &mut rng));
        Ok(Self { body, io })
    }

    pub fn vocab_size(&self) -> usize {
        self.io.get("lm.out").expect("present").dim(1)
    }

    fn bind(&self, g: &mut Graph<T>, train: bool) -> Bound {
        let mut bound = Bound::new();
        self.body.bind_into(g, &mut bound, |_| train);
        self.io.bind_into(g, &mut bound, |_| train);
        bound
    }

    /// Mean next-token NLL over `windows`, each `len + 1` ids long.
    fn nll(&self, g: &mut Graph<T>, bound: &Bound, windows: &[&[usize]], rng: Option<&mut StdRng>) -> Result<lpdt_tensor::Var> {
        let b = windows.len();
        let t = windows[0].len() - 1;
        let inputs: Vec<usize> = windows.iter().flat_map(|w| w[..t].iter().copied()).collect();
        let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let x = g.gather_rows(bound.get("lm.tok_emb")?, &inputs)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let layout = Layout { batch: b, seq: t, positions: Some(&positions), key_valid: None, lora_scale: 1.0 };
        let h = transformer::forward(g, bound, &self.body.config, x, &layout, rng)?;
        let logits = g.matmul(h, bound.get("lm.out")?)?;
        let lp = g.log_softmax(logits, None)?;
        let picked = g.pick_per_row(lp, &targets)?;
        let mean = g.mean_all(picked)?;
        Ok(g.scale(mean, -T::one()))
    }

    /// Mean next-token NLL over consecutive windows covering `slice`.
    pub fn mean_nll(&self, slice: &[usize]) -> Result<f64> {
        if slice.len() < 2 {
            return Err(Error::Data("need at least two tokens to score".into()));
        }
        let len = self.body.config.max_seq_len.min(slice.len() - 1);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut start = 0;
        while start + len < slice.len() {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let l = self.nll(&mut g, &bound, &[&slice[start..start + len + 1]], None)?;
            total += g.value(l).item().to_f64().unwrap() * len as f64;
            count += len;
            start += len;
        }
        Ok(total / count as f64)
    }

    /// Mean NLL on evenly spaced validation windows, cheap enough to log often.
    pub fn validation_loss(&self, corpus: &CharCorpus) -> Result<f64> {
        let valid = corpus.valid();
        let len = self.body.config.max_seq_len;
        if valid.len() < len + 1 {
            return self.mean_nll(valid);
        }
        let span = valid.len() - len - 1;
        let n = VALID_WINDOWS.min(span + 1);
        let windows: Vec<&[usize]> = (0..n).map(|i| {
            let s = if n == 1 { 0 } else { i * span / (n - 1) };
            &valid[s..s + len + 1]
        }).collect();
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let l = self.nll(&mut g, &bound, &windows, None)?;
        Ok(g.value(l).item().to_f64().unwrap())
    }
}

/// `exp` of the mean next-token NLL over `slice`.
pub fn perplexity<T: Float>(lm: &CharLm<T>, slice: &[usize]) -> Result<f64> {
    Ok(lm.mean_nll(slice)?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub vocab_size: usize,
    pub steps: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub uniform_loss: f64,
}

/// Trains body and character layers with next-token cross-entropy.
pub fn lm_pretrain<T: Float>(
    config: &TransformerConfig,
    corpus: &CharCorpus,
    lm_cfg: &LmConfig,
    seed: u64,
) -> Result<(CharLm<T>, LmReport)> {
    let t = config.max_seq_len;
    let train = corpus.train();
    if train.len() < t + 1 {
        return Err(Error::Data(format!("training split of {} tokens is shorter than max_seq_len + 1 = {}", train.len(), t + 1)));
    }
    let mut lm = CharLm::<T>::init(config, corpus.vocab_size(), seed)?;
    let initial = lm.validation_loss(corpus)?;
    info!("lm step 0: val loss {initial:.4} (uniform {:.4})", (corpus.vocab_size() as f64).ln());
    let mut opt = AdamW::with_lr(lm_cfg.lr, lm_cfg.weight_decay)?;
    let mut rng = StdRng::seed_from_u64(episode_seed(seed, &[0x5452]));
    for step in 0..lm_cfg.steps {
        let lr = lm_cfg.lr * ((step + 1) as f64 / lm_cfg.warmup_steps.max(1) as f64).min(1.0);
        opt.set_lr(lr)?;
        let windows: Vec<&[usize]> = (0..lm_cfg.batch_size)
            .map(|_| {
                let s = rng.random_range(0..train.len() - t);
                &train[s..s + t + 1]
            })
            .collect();
        let mut g = Graph::new();
        let bound = lm.bind(&mut g, true);
        let loss = lm.nll(&mut g, &bound, &windows, Some(&mut rng))?;
        let value = g.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::Divergence { step, what: format!("language-model loss is {value}") });
        }
        g.backward(loss)?;
        let names: Vec<String> = bound.trainable().to_vec();
        let mut grads: Vec<Tensor<T>> = names.iter().map(|n| g.grad(bound.get(n).expect("bound")).expect("grad")).collect();
        clip_grad_norm(&mut grads, lm_cfg.grad_clip);
        let mut params: Vec<&mut Tensor<T>> = Vec::with_capacity(names.len());
        {
            let CharLm { body, io } = &mut lm;
            let mut by_name: std::collections::HashMap<&str, &mut Tensor<T>> =
                body.params.iter_mut().chain(io.iter_mut()).collect();
            for n in &names {
                params.push(by_name.remove(n.as_str()).expect("every bound tensor is owned by the model"));
            }
            let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
            opt.step(&mut params, &grad_refs)?;
        }
        if lm_cfg.eval_every > 0 && (step + 1) % lm_cfg.eval_every == 0 {
            info!("lm step {}: train loss {value:.4}, val loss {:.4}", step + 1, lm.validation_loss(corpus)?);
        }
    }
    let final_val = lm.validation_loss(corpus)?;
    let report = LmReport {
        vocab_size: corpus.vocab_size(),
        steps: lm_cfg.steps,
        initial_val_loss: initial,
        final_val_loss: final_val,
        uniform_loss: (corpus.vocab_size() as f64).ln(),
    };
    Ok((lm, report))
}
