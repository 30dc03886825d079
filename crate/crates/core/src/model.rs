//! Decoder-only language model: token embedding, `L` pre-norm layers
//!
//! ```text
//! Y  = MultiHead(RMSNorm(X)) + X
//! X' = SwiGLU(RMSNorm(Y)) + Y
//! ```
//!
//! then a final RMSNorm and a vocabulary projection. The same code builds
//! vanilla, DIFF and DINT variants from one [`ModelConfig`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, AttentionKind, LambdaParams, LayerAttention, LayerTrace};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, SwiGlu};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation used for the mirrored `λ` vectors.
const LAMBDA_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    /// Dense projection; the only role that receives weight decay.
    Matrix,
    NormGain,
    Lambda,
    Gamma,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], role: ParamRole) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), role }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every learnable tensor of a configuration, in registry order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    use ParamRole::*;
    cfg.validate()?;
    let (dm, v) = (cfg.d_model, cfg.vocab_size);
    let inner = cfg.heads * 2 * cfg.d;
    let f = nn::ffn_dim(dm);
    let mut out = vec![ParamSpec::new("tok_emb", &[v, dm], Embedding)];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(ParamSpec::new(p("attn_norm.gain"), &[dm], NormGain));
        for w in ["w_q", "w_k", "w_v"] {
            out.push(ParamSpec::new(p(&format!("attn.{w}")), &[dm, inner], Matrix));
        }
        out.push(ParamSpec::new(p("attn.w_o"), &[dm, dm], Matrix));
        if cfg.arch != AttentionKind::Vanilla {
            for n in ["lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"] {
                out.push(ParamSpec::new(p(&format!("attn.{n}")), &[cfg.d], Lambda));
            }
            if cfg.arch == AttentionKind::Dint && !cfg.tie_gamma {
                out.push(ParamSpec::new(p("attn.gamma"), &[1], Gamma));
            }
            if cfg.headwise_norm {
                out.push(ParamSpec::new(p("attn.head_norm.gain"), &[cfg.heads, 2 * cfg.d], NormGain));
            }
        }
        out.push(ParamSpec::new(p("ffn_norm.gain"), &[dm], NormGain));
        out.push(ParamSpec::new(p("ffn.w_g"), &[dm, f], Matrix));
        out.push(ParamSpec::new(p("ffn.w_1"), &[dm, f], Matrix));
        out.push(ParamSpec::new(p("ffn.w_2"), &[f, dm], Matrix));
    }
    out.push(ParamSpec::new("final_norm.gain", &[dm], NormGain));
    if !cfg.tie_embeddings {
        out.push(ParamSpec::new("lm_head", &[v, dm], Embedding));
    }
    Ok(out)
}

/// Learnable scalar count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// Learnable scalar count split into dense matrices/embeddings and the
/// small per-layer vectors (norm gains, `λ` vectors, `γ`).
pub fn param_breakdown(cfg: &ModelConfig) -> Result<(usize, usize)> {
    let specs = param_specs(cfg)?;
    let dense = specs
        .iter()
        .filter(|s| matches!(s.role, ParamRole::Matrix | ParamRole::Embedding))
        .map(ParamSpec::numel)
        .sum();
    let total: usize = specs.iter().map(ParamSpec::numel).sum();
    Ok((dense, total - dense))
}

/// A model with its parameters stored in registry order.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

/// Output of one forward pass recorded on a graph.
#[derive(Debug)]
pub struct Forward<T: Scalar> {
    pub logits: Var,
    /// Tape handle of every parameter, in registry order.
    pub params: Vec<Var>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model, deterministic in `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let specs = param_specs(&cfg)?;
        let inits = cfg.layer_lambda_inits()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n = spec.numel();
            let data: Vec<f64> = match spec.role {
                ParamRole::Embedding => trunc_normal(&mut rng, n, 1.0 / (cfg.d_model as f64).sqrt()),
                ParamRole::Matrix => trunc_normal(&mut rng, n, 1.0 / (spec.shape[0] as f64).sqrt()),
                ParamRole::NormGain => vec![1.0; n],
                ParamRole::Gamma => vec![inits[layer_of(&spec.name)]; n],
                // Filled in from the `1` vectors below.
                ParamRole::Lambda if spec.name.ends_with('2') => vec![0.0; n],
                ParamRole::Lambda => (0..n).map(|_| LAMBDA_STD * rng.sample::<f64, _>(StandardNormal)).collect(),
            };
            params.push(Tensor::from_f64(spec.shape.clone(), &data)?);
        }
        // λq2 = λq1 and λk2 = λk1 make λ start exactly at λ_init while every
        // λ vector still receives gradient (all-zero vectors would not).
        fix_mirrors(&specs, &mut params);
        Ok(Model { cfg, specs, params })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let specs = param_specs(&cfg)?;
        if tensors.len() != specs.len() {
            return Err(Error::Contract(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(tensors) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Contract(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(t);
        }
        Ok(Model { cfg, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg, specs: self.specs.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Records the forward pass on `g`. Parameters enter the tape as
    /// trainable leaves when `trainable`, otherwise as constants.
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[usize], trainable: bool, capture: bool) -> Result<Forward<T>> {
        let cfg = &self.cfg;
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Contract(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p) } else { g.constant(p.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("registry walk out of sync");

        let positions: Vec<usize> = (0..tokens.len()).collect();
        let emb = take();
        let mut x = nn::embed(g, tokens, emb)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let acfg = cfg.attention(l)?;
            let attn_gain = take();
            let (w_q, w_k, w_v, w_o) = (take(), take(), take(), take());
            let mut p = LayerAttention { w_q, w_k, w_v, w_o, lambda: None, gamma: None, head_gain: None };
            if cfg.arch != AttentionKind::Vanilla {
                let init = cfg.lambda_init.for_layer(l)?;
                p.lambda = Some(LambdaParams { q1: take(), k1: take(), q2: take(), k2: take(), init });
                if cfg.arch == AttentionKind::Dint && !cfg.tie_gamma {
                    p.gamma = Some(take());
                }
                if cfg.headwise_norm {
                    p.head_gain = Some(take());
                }
            }
            let h = nn::rmsnorm(g, x, attn_gain, nn::RMS_EPS)?;
            let (a, trace) = attention::multi_head_attention(g, h, &p, &acfg, &positions, capture)?;
            let y = g.add(a, x)?;
            let ffn_gain = take();
            let ffn = SwiGlu { w_g: take(), w_1: take(), w_2: take() };
            let h = nn::rmsnorm(g, y, ffn_gain, nn::RMS_EPS)?;
            let f = nn::swiglu(g, h, &ffn)?;
            x = g.add(f, y)?;
            layers.push(trace);
        }
        let final_gain = take();
        let x = nn::rmsnorm(g, x, final_gain, nn::RMS_EPS)?;
        let head = if cfg.tie_embeddings { emb } else { take() };
        let logits = g.matmul_nt(x, head)?;
        Ok(Forward { logits, params: vars, layers })
    }

    /// Logits and layer traces without gradient bookkeeping.
    pub fn logits(&self, tokens: &[usize], capture: bool) -> Result<(Tensor<T>, Vec<LayerTrace<T>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, false, capture)?;
        Ok((g.value(out.logits).clone(), out.layers))
    }
}

fn layer_of(name: &str) -> usize {
    name.split('.').nth(1).and_then(|s| s.parse().ok()).expect("layer-scoped parameter name")
}

/// Copies `lambda_q1` into `lambda_q2` and `lambda_k1` into `lambda_k2`.
fn fix_mirrors<T: Scalar>(specs: &[ParamSpec], params: &mut [Tensor<T>]) {
    for i in 0..specs.len() {
        let name = &specs[i].name;
        for (src, dst) in [("lambda_q1", "lambda_q2"), ("lambda_k1", "lambda_k2")] {
            if let Some(prefix) = name.strip_suffix(src) {
                let target = format!("{prefix}{dst}");
                let j = specs.iter().position(|s| s.name == target).expect("paired λ vector");
                params[j] = params[i].clone();
            }
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LambdaInit;

    fn toy(arch: AttentionKind) -> ModelConfig {
        ModelConfig { arch, layers: 2, d_model: 16, d: 4, heads: 2, vocab_size: 32, max_seq_len: 16, ..ModelConfig::default() }
    }

    #[test]
    fn lambda_starts_at_init() {
        let m = Model::<f64>::new(toy(AttentionKind::Dint)).unwrap();
        for l in 0..2 {
            let get = |s: &str| m.param(&format!("layers.{l}.attn.{s}")).unwrap().data().to_vec();
            assert_eq!(get("lambda_q1"), get("lambda_q2"));
            assert_eq!(get("lambda_k1"), get("lambda_k2"));
            assert!(get("lambda_q1").iter().any(|&v| v != 0.0));
        }
        let (_, traces) = m.logits(&[1, 2, 3], false).unwrap();
        assert_eq!(traces[0].lambda, Some(lambda_init(1)));
        assert!((traces[1].lambda.unwrap() - lambda_init(2)).abs() < 1e-15);
    }

    fn lambda_init(l: usize) -> f64 {
        attention::lambda_init_for_layer(l).unwrap()
    }

    #[test]
    fn counts_match_registry_walk() {
        for arch in AttentionKind::ALL {
            let cfg = toy(arch);
            let m = Model::<f32>::new(cfg).unwrap();
            let walked: usize = m.params().iter().map(Tensor::numel).sum();
            assert_eq!(param_count(&cfg).unwrap(), walked);
        }
    }

    #[test]
    fn aligned_counts() {
        let diff = param_count(&toy(AttentionKind::Diff)).unwrap();
        let dint = param_count(&toy(AttentionKind::Dint)).unwrap();
        assert_eq!(diff, dint);
        let untied = ModelConfig { tie_gamma: false, ..toy(AttentionKind::Dint) };
        assert_eq!(param_count(&untied).unwrap(), dint + 2);
        let dense = |a| param_breakdown(&toy(a)).unwrap().0;
        assert_eq!(dense(AttentionKind::Vanilla), dense(AttentionKind::Dint));
    }

    #[test]
    fn embedding_only_count() {
        let cfg = ModelConfig { layers: 0, ..toy(AttentionKind::Dint) };
        assert_eq!(param_count(&cfg).unwrap(), 32 * 16 + 16);
        let untied = ModelConfig { tie_embeddings: false, ..cfg };
        assert_eq!(param_count(&untied).unwrap(), 2 * 32 * 16 + 16);
    }

    #[test]
    fn zero_layers_is_head_of_normed_embedding() {
        let cfg = ModelConfig { layers: 0, ..toy(AttentionKind::Dint) };
        let m = Model::<f64>::new(cfg).unwrap();
        let tokens = [3usize, 7, 7];
        let (logits, _) = m.logits(&tokens, false).unwrap();
        let emb = m.param("tok_emb").unwrap();
        for (r, &t) in tokens.iter().enumerate() {
            let e = emb.row(t);
            let rms = (e.iter().map(|v| v * v).sum::<f64>() / 16.0 + nn::RMS_EPS).sqrt();
            for c in 0..32 {
                let want: f64 = e.iter().zip(emb.row(c)).map(|(a, b)| a / rms * b).sum();
                assert!((logits.get2(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::new(toy(AttentionKind::Dint)).unwrap();
        assert!(matches!(m.logits(&[40], false), Err(Error::Contract(_))));
        assert!(matches!(m.logits(&[1; 17], false), Err(Error::Contract(_))));
        assert!(matches!(m.logits(&[], false), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_prefix_never_reads_ahead() {
        let m = Model::<f32>::new(toy(AttentionKind::Dint)).unwrap();
        let a: Vec<usize> = (0..12).map(|i| (i * 5) % 32).collect();
        let mut b = a.clone();
        b[8] = (b[8] + 1) % 32;
        let (la, _) = m.logits(&a, false).unwrap();
        let (lb, _) = m.logits(&b, false).unwrap();
        assert_eq!(la.data()[..8 * 32], lb.data()[..8 * 32]);
        assert_ne!(la.data()[8 * 32..], lb.data()[8 * 32..]);
    }

    #[test]
    fn paper_literal_mode_leaks_future_columns() {
        let cfg = ModelConfig { g_mode: attention::GMode::PaperLiteral, ..toy(AttentionKind::Dint) };
        let m = Model::<f64>::new(cfg).unwrap();
        let a: Vec<usize> = (0..12).map(|i| (i * 5) % 32).collect();
        let mut b = a.clone();
        b[8] = (b[8] + 1) % 32;
        let (la, _) = m.logits(&a, false).unwrap();
        let (lb, _) = m.logits(&b, false).unwrap();
        assert_ne!(la.data()[..8 * 32], lb.data()[..8 * 32]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(toy(AttentionKind::Dint)).unwrap();
        let b = Model::<f32>::new(toy(AttentionKind::Dint)).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.data() == y.data()));
        let c = Model::<f32>::new(ModelConfig { seed: 1, ..toy(AttentionKind::Dint) }).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn constant_lambda_init_used() {
        let cfg = ModelConfig { lambda_init: LambdaInit::Constant(0.5), ..toy(AttentionKind::Diff) };
        let m = Model::<f64>::new(cfg).unwrap();
        let (_, traces) = m.logits(&[1, 2], false).unwrap();
        assert!(traces.iter().all(|t| t.lambda == Some(0.5)));
        assert!(traces.iter().all(|t| t.row_sums.max_dev < 1e-12 && (t.expected_row_sum - 0.5).abs() < 1e-15));
    }

    #[test]
    fn reference_shapes() {
        let specs = param_specs(&ModelConfig::reference_3b()).unwrap();
        let find = |n: &str| specs.iter().find(|s| s.name == n).unwrap().shape.clone();
        assert_eq!(find("tok_emb"), vec![100_288, 3072]);
        assert_eq!(find("layers.27.attn.w_q"), vec![3072, 3072]);
        assert_eq!(find("layers.0.ffn.w_g"), vec![3072, 8192]);
        assert_eq!(find("layers.0.attn.lambda_q1"), vec![128]);
        assert_eq!(find("layers.0.attn.head_norm.gain"), vec![12, 256]);
    }
}
