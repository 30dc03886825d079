//! Run configuration and its text form.
//!
//! A config file is a list of `key = value` lines. Blank lines and anything
//! after `#` are ignored, keys may appear at most once, and unknown keys are
//! rejected with their line number. Omitted keys take the defaults below.
//! Model keys are bare (`d_model = 64`); training keys start with `train.`
//! and task keys with `task.`.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `arch` | `dint` | `vanilla`, `diff` or `dint` |
//! | `layers` | 2 | decoder layers |
//! | `d_model` | 64 | residual width |
//! | `d` | 16 | half head width |
//! | `heads` | 2 | must equal `d_model / 2d` |
//! | `vocab_size` | 128 | byte-level vocabulary |
//! | `max_seq_len` | 256 | longest accepted input |
//! | `lambda_init` | `schedule` | `schedule` or a constant in (0, 1) |
//! | `tie_gamma` | true | use `γ = λ` |
//! | `headwise_norm` | true | per-head RMS normalisation (DIFF/DINT only) |
//! | `g_mode` | `causal_prefix` | or `paper_literal` |
//! | `tie_embeddings` | true | share embedding and output matrices |
//! | `rope` | true | rotary position encoding |
//! | `seed` | 0 | parameter initialisation seed |
//! | `train.batch` | 16 | sequences per optimizer step |
//! | `train.lr` | 1e-3 | peak learning rate |
//! | `train.beta1`, `train.beta2` | 0.9, 0.95 | Adam moments |
//! | `train.weight_decay` | 0.1 | decoupled, matrices only |
//! | `train.warmup` | 100 | linear warmup steps |
//! | `train.min_lr_ratio` | 0.1 | final LR as a fraction of peak |
//! | `train.clip` | 1.0 | global gradient-norm clip (0 disables) |
//! | `train.steps` | 1000 | default step count |
//! | `train.eval_every` | 100 | validation interval |
//! | `train.eval_size` | 32 | validation sequences |
//! | `task` | `needle` | `needle` or `corpus` |
//! | `task.seq_len` | 256 | tokens per sequence; validation always uses this |
//! | `task.start_len` | 0 | first training length of a curriculum (0 = none) |
//! | `task.ramp` | 0 | fraction of the steps over which training length grows linearly to `task.seq_len` |
//! | `task.needles` | 4 | needles per context |
//! | `task.queries` | 2 | queried cities |
//! | `task.loss` | `answer` | `answer` (digits after queries) or `all` tokens |
//! | `task.repeat` | 0.3 | corpus copy-run start probability |
//! | `task.ngram` | 2 | n for AR-Hit labelling |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionKind, GMode, LambdaInit};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: AttentionKind,
    pub layers: usize,
    pub d_model: usize,
    pub d: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lambda_init: LambdaInit,
    pub tie_gamma: bool,
    pub headwise_norm: bool,
    pub g_mode: GMode,
    pub tie_embeddings: bool,
    pub rope: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: AttentionKind::Dint,
            layers: 2,
            d_model: 64,
            d: 16,
            heads: 2,
            vocab_size: 128,
            max_seq_len: 256,
            lambda_init: LambdaInit::Schedule,
            tie_gamma: true,
            headwise_norm: true,
            g_mode: GMode::CausalPrefix,
            tie_embeddings: true,
            rope: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 3B-scale reference configuration (28 layers, width 3072, 12
    /// heads, 100288-token vocabulary). Twelve heads at width 3072 imply
    /// `d = 128`. Used for shape arithmetic only.
    pub fn reference_3b() -> Self {
        ModelConfig {
            layers: 28,
            d_model: 3072,
            d: 128,
            heads: 12,
            vocab_size: 100_288,
            max_seq_len: 4096,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_model, vocab_size and max_seq_len must be positive".into()));
        }
        if self.layers > 0 {
            self.attention(1)?;
        }
        Ok(())
    }

    /// Attention settings for 1-based layer `layer`.
    pub fn attention(&self, layer: usize) -> Result<AttentionConfig> {
        let cfg = AttentionConfig {
            kind: self.arch,
            d_model: self.d_model,
            d: self.d,
            h: self.heads,
            causal: true,
            lambda_init: self.lambda_init,
            tie_gamma: self.tie_gamma,
            headwise_norm: self.headwise_norm,
            g_mode: self.g_mode,
            rope: self.rope,
        };
        cfg.validate()?;
        if layer < 1 || layer > self.layers {
            return Err(Error::Contract(format!("layer {layer} outside 1..={}", self.layers)));
        }
        Ok(cfg)
    }

    /// `λ_init` of every layer, first layer first.
    pub fn layer_lambda_inits(&self) -> Result<Vec<f64>> {
        (1..=self.layers).map(|l| self.lambda_init.for_layer(l)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    fn write_text(&self, s: &mut String) {
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(s, "lambda_init = {}", self.lambda_init);
        let _ = writeln!(s, "tie_gamma = {}", self.tie_gamma);
        let _ = writeln!(s, "headwise_norm = {}", self.headwise_norm);
        let _ = writeln!(s, "g_mode = {}", self.g_mode);
        let _ = writeln!(s, "tie_embeddings = {}", self.tie_embeddings);
        let _ = writeln!(s, "rope = {}", self.rope);
        let _ = writeln!(s, "seed = {}", self.seed);
    }

    /// Parses model keys only; any other key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = ModelConfig::take(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    fn take(kv: &mut KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            arch: kv.get("arch", d.arch)?,
            layers: kv.get("layers", d.layers)?,
            d_model: kv.get("d_model", d.d_model)?,
            d: kv.get("d", d.d)?,
            heads: kv.get("heads", d.heads)?,
            vocab_size: kv.get("vocab_size", d.vocab_size)?,
            max_seq_len: kv.get("max_seq_len", d.max_seq_len)?,
            lambda_init: kv.get("lambda_init", d.lambda_init)?,
            tie_gamma: kv.get("tie_gamma", d.tie_gamma)?,
            headwise_norm: kv.get("headwise_norm", d.headwise_norm)?,
            g_mode: kv.get("g_mode", d.g_mode)?,
            tie_embeddings: kv.get("tie_embeddings", d.tie_embeddings)?,
            rope: kv.get("rope", d.rope)?,
            seed: kv.get("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub clip: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            warmup: 100,
            min_lr_ratio: 0.1,
            clip: 1.0,
            steps: 1000,
            eval_every: 100,
            eval_size: 32,
        }
    }
}

impl TrainConfig {
    fn take(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let t = TrainConfig {
            batch: kv.get("train.batch", d.batch)?,
            lr: kv.get("train.lr", d.lr)?,
            beta1: kv.get("train.beta1", d.beta1)?,
            beta2: kv.get("train.beta2", d.beta2)?,
            weight_decay: kv.get("train.weight_decay", d.weight_decay)?,
            warmup: kv.get("train.warmup", d.warmup)?,
            min_lr_ratio: kv.get("train.min_lr_ratio", d.min_lr_ratio)?,
            clip: kv.get("train.clip", d.clip)?,
            steps: kv.get("train.steps", d.steps)?,
            eval_every: kv.get("train.eval_every", d.eval_every)?,
            eval_size: kv.get("train.eval_size", d.eval_size)?,
        };
        if t.batch == 0 || t.eval_every == 0 || t.eval_size == 0 {
            return Err(Error::Config("train.batch, train.eval_every and train.eval_size must be positive".into()));
        }
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("learning rate must be ≥ 0 and betas in [0, 1)".into()));
        }
        if !(t.weight_decay >= 0.0) || !(t.clip >= 0.0) || !(0.0..=1.0).contains(&t.min_lr_ratio) {
            return Err(Error::Config("weight decay, clip and min_lr_ratio out of range".into()));
        }
        Ok(t)
    }

    fn write_text(&self, s: &mut String) {
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.beta1 = {}", self.beta1);
        let _ = writeln!(s, "train.beta2 = {}", self.beta2);
        let _ = writeln!(s, "train.weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "train.warmup = {}", self.warmup);
        let _ = writeln!(s, "train.min_lr_ratio = {}", self.min_lr_ratio);
        let _ = writeln!(s, "train.clip = {}", self.clip);
        let _ = writeln!(s, "train.steps = {}", self.steps);
        let _ = writeln!(s, "train.eval_every = {}", self.eval_every);
        let _ = writeln!(s, "train.eval_size = {}", self.eval_size);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Needle,
    Corpus,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Needle => "needle",
            TaskKind::Corpus => "corpus",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(TaskKind::Needle),
            "corpus" => Ok(TaskKind::Corpus),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Which target tokens of a needle sequence contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTargets {
    /// Only the answer digits that follow each query.
    Answer,
    All,
}

impl fmt::Display for LossTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTargets::Answer => "answer",
            LossTargets::All => "all",
        })
    }
}

impl FromStr for LossTargets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "answer" => Ok(LossTargets::Answer),
            "all" => Ok(LossTargets::All),
            other => Err(Error::Config(format!("unknown task.loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub start_len: usize,
    pub ramp: f64,
    pub needles: usize,
    pub queries: usize,
    pub loss: LossTargets,
    pub repeat: f64,
    pub ngram: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Needle,
            seq_len: 256,
            start_len: 0,
            ramp: 0.0,
            needles: 4,
            queries: 2,
            loss: LossTargets::Answer,
            repeat: 0.3,
            ngram: 2,
        }
    }
}

impl TaskConfig {
    fn take(kv: &mut KeyValues) -> Result<Self> {
        let d = TaskConfig::default();
        let t = TaskConfig {
            kind: kv.get("task", d.kind)?,
            seq_len: kv.get("task.seq_len", d.seq_len)?,
            start_len: kv.get("task.start_len", d.start_len)?,
            ramp: kv.get("task.ramp", d.ramp)?,
            needles: kv.get("task.needles", d.needles)?,
            queries: kv.get("task.queries", d.queries)?,
            loss: kv.get("task.loss", d.loss)?,
            repeat: kv.get("task.repeat", d.repeat)?,
            ngram: kv.get("task.ngram", d.ngram)?,
        };
        if t.needles == 0 || t.queries == 0 || t.queries > t.needles {
            return Err(Error::Config(format!(
                "need 1 ≤ task.queries ≤ task.needles, got {} and {}",
                t.queries, t.needles
            )));
        }
        if !(0.0..1.0).contains(&t.repeat) || t.ngram == 0 || t.seq_len < 2 {
            return Err(Error::Config("task.repeat must be in [0, 1), task.ngram ≥ 1, task.seq_len ≥ 2".into()));
        }
        if t.start_len > t.seq_len || (t.start_len > 0 && t.start_len < 2) || !(0.0..=1.0).contains(&t.ramp) {
            return Err(Error::Config("need 2 ≤ task.start_len ≤ task.seq_len (or 0) and task.ramp in [0, 1]".into()));
        }
        Ok(t)
    }

    /// Training sequence length at 1-based `step` of `steps`.
    pub fn train_len(&self, step: usize, steps: usize) -> usize {
        if self.start_len == 0 || self.ramp <= 0.0 {
            return self.seq_len;
        }
        let span = self.ramp * steps as f64;
        let t = ((step.saturating_sub(1)) as f64 / span).min(1.0);
        self.start_len + ((self.seq_len - self.start_len) as f64 * t).round() as usize
    }

    fn write_text(&self, s: &mut String) {
        let _ = writeln!(s, "task = {}", self.kind);
        let _ = writeln!(s, "task.seq_len = {}", self.seq_len);
        let _ = writeln!(s, "task.start_len = {}", self.start_len);
        let _ = writeln!(s, "task.ramp = {}", self.ramp);
        let _ = writeln!(s, "task.needles = {}", self.needles);
        let _ = writeln!(s, "task.queries = {}", self.queries);
        let _ = writeln!(s, "task.loss = {}", self.loss);
        let _ = writeln!(s, "task.repeat = {}", self.repeat);
        let _ = writeln!(s, "task.ngram = {}", self.ngram);
    }
}

/// Everything a training run needs besides the seed and output location.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = RunConfig {
            model: ModelConfig::take(&mut kv)?,
            train: TrainConfig::take(&mut kv)?,
            task: TaskConfig::take(&mut kv)?,
        };
        kv.finish()?;
        if cfg.task.seq_len > cfg.model.max_seq_len {
            return Err(Error::Config(format!(
                "task.seq_len {} exceeds max_seq_len {}",
                cfg.task.seq_len, cfg.model.max_seq_len
            )));
        }
        Ok(cfg)
    }

    /// Re-checks every field, e.g. after programmatic overrides.
    pub fn validate(&self) -> Result<()> {
        Self::parse(&self.to_text()).map(|_| ())
    }

    /// Fixed-order text with every key spelled out; parsing it gives back
    /// the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.model.write_text(&mut s);
        self.train.write_text(&mut s);
        self.task.write_text(&mut s);
        s
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

struct Entry {
    line: usize,
    value: String,
}

struct KeyValues {
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ConfigParse { line, msg: format!("expected `key = value`, got `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::ConfigParse { line, msg: "empty key or value".into() });
            }
            if let Some(prev) = entries.insert(key.to_string(), Entry { line, value: value.to_string() }) {
                return Err(Error::ConfigParse { line, msg: format!("`{key}` already set on line {}", prev.line) });
            }
        }
        Ok(KeyValues { entries })
    }

    fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|err: V::Err| Error::ConfigParse {
                line: e.line,
                msg: format!("bad value `{}` for `{key}`: {err}", e.value),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, e)| e.line) {
            Some((key, e)) => Err(Error::ConfigParse { line: e.line, msg: format!("unknown key `{key}`") }),
            None => Ok(()),
        }
    }
}
