//! Vanilla, differential (DIFF) and differential-integral (DINT) attention.
//!
//! For one head with projections `Q₁, Q₂, K₁, K₂ ∈ R^{N×d}` and
//! `V ∈ R^{N×2d}`:
//!
//! ```text
//! A₁      = softmax(Q₁K₁ᵀ/√d)          A₂ = softmax(Q₂K₂ᵀ/√d)
//! λ       = exp(λq1·λk1) − exp(λq2·λk2) + λ_init
//! A_diff  = A₁ − λ·A₂
//! G       = column means of A₁, one row per query
//! A_final = A_diff + γ·G                 (DINT; γ = λ when tied)
//! out     = A_final·V
//! ```
//!
//! Each row of `A₁` and of `G` sums to one, so with `γ = λ` every row of
//! `A_final` sums to exactly `1 − λ + λ = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Vanilla,
    Diff,
    Dint,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Vanilla, AttentionKind::Diff, AttentionKind::Dint];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Vanilla => "vanilla",
            AttentionKind::Diff => "diff",
            AttentionKind::Dint => "dint",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(AttentionKind::Vanilla),
            "diff" => Ok(AttentionKind::Diff),
            "dint" => Ok(AttentionKind::Dint),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// How `λ_init` is chosen for each layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaInit {
    /// `0.8 − 0.6·exp(−0.3·(l − 1))` for 1-based layer `l`.
    Schedule,
    Constant(f64),
}

impl LambdaInit {
    pub fn for_layer(self, layer: usize) -> Result<f64> {
        match self {
            LambdaInit::Schedule => lambda_init_for_layer(layer),
            LambdaInit::Constant(c) => Ok(c),
        }
    }
}

impl fmt::Display for LambdaInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaInit::Schedule => f.write_str("schedule"),
            LambdaInit::Constant(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for LambdaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "schedule" {
            return Ok(LambdaInit::Schedule);
        }
        match s.parse::<f64>() {
            Ok(c) if c > 0.0 && c < 1.0 => Ok(LambdaInit::Constant(c)),
            _ => Err(Error::Config(format!(
                "lambda_init must be `schedule` or a number in (0, 1), got `{s}`"
            ))),
        }
    }
}

/// How the global-importance rows are formed from `A₁`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GMode {
    /// One row of column means over all `N` query rows, repeated `N` times.
    /// Under a causal mask this lets query `i` see columns `n > i`.
    PaperLiteral,
    /// Row `i` holds column means over query rows `0..=i` only, so it is
    /// zero beyond column `i` and still sums to one.
    CausalPrefix,
}

impl fmt::Display for GMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GMode::PaperLiteral => "paper_literal",
            GMode::CausalPrefix => "causal_prefix",
        })
    }
}

impl FromStr for GMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(GMode::PaperLiteral),
            "causal_prefix" => Ok(GMode::CausalPrefix),
            other => Err(Error::Config(format!("unknown g_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub d_model: usize,
    /// Half of the per-head width; `Q₁`, `K₁` (and `Q₂`, `K₂`) have `d` columns.
    pub d: usize,
    pub h: usize,
    pub causal: bool,
    pub lambda_init: LambdaInit,
    pub tie_gamma: bool,
    pub headwise_norm: bool,
    pub g_mode: GMode,
    pub rope: bool,
}

impl AttentionConfig {
    /// Causal DINT-style defaults; rejects `h ≠ d_model / 2d`.
    pub fn new(kind: AttentionKind, d_model: usize, d: usize, h: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            kind,
            d_model,
            d,
            h,
            causal: true,
            lambda_init: LambdaInit::Schedule,
            tie_gamma: true,
            headwise_norm: true,
            g_mode: GMode::CausalPrefix,
            rope: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 {
            return Err(Error::Config(format!("d = {} and h = {} must be positive", self.d, self.h)));
        }
        if self.h * 2 * self.d != self.d_model {
            return Err(Error::Config(format!(
                "head count must equal d_model / 2d: h = {}, d_model = {}, d = {}",
                self.h, self.d_model, self.d
            )));
        }
        if self.rope && self.kind != AttentionKind::Vanilla && self.d % 2 != 0 {
            return Err(Error::Config(format!("rotary encoding needs even d, got {}", self.d)));
        }
        if let LambdaInit::Constant(c) = self.lambda_init {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::Config(format!("lambda_init {c} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Width of one head's value / output block.
    pub fn head_width(&self) -> usize {
        2 * self.d
    }

    /// Row sum every `A_final` row must have for the given mixing scalars.
    pub fn expected_row_sum(&self, lambda: f64, gamma: f64) -> f64 {
        match self.kind {
            AttentionKind::Vanilla => 1.0,
            AttentionKind::Diff => 1.0 - lambda,
            AttentionKind::Dint => 1.0 - lambda + gamma,
        }
    }
}

/// `0.8 − 0.6·exp(−0.3·(l − 1))` for 1-based layer index `l`.
pub fn lambda_init_for_layer(layer: usize) -> Result<f64> {
    if layer < 1 {
        return Err(Error::Contract("layer index is 1-based".into()));
    }
    Ok(0.8 - 0.6 * (-0.3 * (layer as f64 - 1.0)).exp())
}

/// The four reparameterisation vectors of one layer's `λ`.
#[derive(Clone, Copy, Debug)]
pub struct LambdaParams {
    pub q1: Var,
    pub k1: Var,
    pub q2: Var,
    pub k2: Var,
    pub init: f64,
}

/// `λ = exp(λq1·λk1) − exp(λq2·λk2) + λ_init`, as a one-element tensor.
pub fn compute_lambda<T: Scalar>(g: &mut Graph<T>, p: &LambdaParams) -> Result<Var> {
    let a = g.dot(p.q1, p.k1)?;
    let a = g.exp(a)?;
    let b = g.dot(p.q2, p.k2)?;
    let b = g.exp(b)?;
    let diff = g.sub(a, b)?;
    g.add_const(diff, T::of(p.init))
}

/// One head's projection matrices, each `[d_model, 2d]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Projected inputs of one head. Vanilla heads leave `q2`/`k2` empty and
/// use the full `2d` width in `q1`/`k1`.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub q1: Var,
    pub k1: Var,
    pub q2: Option<Var>,
    pub k2: Option<Var>,
    pub v: Var,
}

/// Attention maps of one head, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub out: Var,
    pub a1: Var,
    pub a2: Option<Var>,
    pub a_diff: Option<Var>,
    pub g_expanded: Option<Var>,
    pub a_final: Var,
}

/// Splits `q, k, v` (each `[N, 2d]`) of one head and applies rotary
/// encoding to the query/key halves.
pub fn split_head<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    positions: &[usize],
) -> Result<HeadProjections> {
    let d = cfg.d;
    let pe = |g: &mut Graph<T>, x: Var| if cfg.rope { nn::rope(g, x, positions) } else { Ok(x) };
    if cfg.kind == AttentionKind::Vanilla {
        let q1 = pe(g, q)?;
        let k1 = pe(g, k)?;
        return Ok(HeadProjections { q1, k1, q2: None, k2: None, v });
    }
    let q1 = g.slice_cols(q, 0, d)?;
    let q2 = g.slice_cols(q, d, d)?;
    let k1 = g.slice_cols(k, 0, d)?;
    let k2 = g.slice_cols(k, d, d)?;
    Ok(HeadProjections {
        q1: pe(g, q1)?,
        k1: pe(g, k1)?,
        q2: Some(pe(g, q2)?),
        k2: Some(pe(g, k2)?),
        v,
    })
}

/// `X·W_Q`, `X·W_K`, `X·W_V` for one head, split per [`split_head`].
pub fn project_head<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &HeadParams,
    cfg: &AttentionConfig,
    positions: &[usize],
) -> Result<HeadProjections> {
    let w = cfg.head_width();
    for (name, m) in [("W_Q", p.w_q), ("W_K", p.w_k), ("W_V", p.w_v)] {
        if g.shape(m) != [cfg.d_model, w] {
            return Err(Error::dim(
                "attention",
                format!("{name} is {:?}, expected [{}, {w}]", g.shape(m), cfg.d_model),
            ));
        }
    }
    if g.shape(x).len() != 2 || g.shape(x)[1] != cfg.d_model {
        return Err(Error::dim(
            "attention",
            format!("input {:?} does not have {} columns", g.shape(x), cfg.d_model),
        ));
    }
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    split_head(g, q, k, v, cfg, positions)
}

fn attention_map<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, causal: bool) -> Result<Var> {
    let width = g.shape(q)[1];
    let logits = g.matmul_nt_scaled(q, k, T::of(1.0 / (width as f64).sqrt()))?;
    g.softmax(logits, causal.then_some(&Mask::Causal))
}

/// Global-importance matrix `G_expanded` (`[N, N]`) from the signal map `A₁`.
pub fn global_importance<T: Scalar>(g: &mut Graph<T>, a1: Var, mode: GMode) -> Result<Var> {
    match mode {
        GMode::PaperLiteral => {
            let n = g.shape(a1)[0];
            let cols = g.mean_axis(a1, 0)?;
            let base = g.constant(Tensor::zeros([n, n]))?;
            g.add(base, cols)
        }
        GMode::CausalPrefix => g.prefix_mean(a1),
    }
}

/// Mixes already-projected inputs into one head's output. `lambda` is
/// required for DIFF/DINT and `gamma` for DINT.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    p: &HeadProjections,
    lambda: Option<Var>,
    gamma: Option<Var>,
    cfg: &AttentionConfig,
) -> Result<HeadOutput> {
    let a1 = attention_map(g, p.q1, p.k1, cfg.causal)?;
    if cfg.kind == AttentionKind::Vanilla {
        let out = g.matmul(a1, p.v)?;
        return Ok(HeadOutput { out, a1, a2: None, a_diff: None, g_expanded: None, a_final: a1 });
    }
    let (Some(q2), Some(k2)) = (p.q2, p.k2) else {
        return Err(Error::Contract("differential attention needs Q₂ and K₂".into()));
    };
    let lambda = lambda.ok_or_else(|| Error::Contract("differential attention needs λ".into()))?;
    let a2 = attention_map(g, q2, k2, cfg.causal)?;
    let scaled = g.scale_by(a2, lambda)?;
    let a_diff = g.sub(a1, scaled)?;
    let (g_expanded, a_final) = if cfg.kind == AttentionKind::Dint {
        let gamma = gamma.ok_or_else(|| Error::Contract("DINT attention needs γ".into()))?;
        let ge = global_importance(g, a1, cfg.g_mode)?;
        let weighted = g.scale_by(ge, gamma)?;
        (Some(ge), g.add(a_diff, weighted)?)
    } else {
        (None, a_diff)
    };
    let out = g.matmul(a_final, p.v)?;
    Ok(HeadOutput { out, a1, a2: Some(a2), a_diff: Some(a_diff), g_expanded, a_final })
}

/// Single-head softmax attention over `(Q, K, V)` of width `2d`.
pub fn vanilla_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    head: &HeadParams,
    cfg: &AttentionConfig,
    positions: &[usize],
) -> Result<HeadOutput> {
    let cfg = AttentionConfig { kind: AttentionKind::Vanilla, ..*cfg };
    let p = project_head(g, x, head, &cfg, positions)?;
    attend(g, &p, None, None, &cfg)
}

/// Single-head `(A₁ − λA₂)V`.
pub fn diff_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    head: &HeadParams,
    lambda: Var,
    cfg: &AttentionConfig,
    positions: &[usize],
) -> Result<HeadOutput> {
    let cfg = AttentionConfig { kind: AttentionKind::Diff, ..*cfg };
    let p = project_head(g, x, head, &cfg, positions)?;
    attend(g, &p, Some(lambda), None, &cfg)
}

/// Single-head `(A₁ − λA₂ + γ·G_expanded)V`.
pub fn dint_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    head: &HeadParams,
    lambda: Var,
    gamma: Var,
    cfg: &AttentionConfig,
    positions: &[usize],
) -> Result<HeadOutput> {
    let cfg = AttentionConfig { kind: AttentionKind::Dint, ..*cfg };
    let p = project_head(g, x, head, &cfg, positions)?;
    attend(g, &p, Some(lambda), Some(gamma), &cfg)
}

/// All attention parameters of one layer. Head `i` owns columns
/// `i·2d .. (i+1)·2d` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub lambda: Option<LambdaParams>,
    /// Independent γ, used only when `tie_gamma` is off.
    pub gamma: Option<Var>,
    /// `[h, 2d]` headwise-norm gains.
    pub head_gain: Option<Var>,
}

/// Row-sum statistics of `A_final` over every head and query row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSumStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `max |row_sum − expected|`.
    pub max_dev: f64,
    pub rows: usize,
}

impl RowSumStats {
    pub fn empty() -> Self {
        RowSumStats { min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0, max_dev: 0.0, rows: 0 }
    }

    pub fn of_matrix<T: Scalar>(m: &Tensor<T>, expected: f64) -> Self {
        let mut s = RowSumStats::empty();
        let cols = *m.shape().last().unwrap();
        for r in 0..m.numel() / cols {
            let sum: f64 = m.row(r).iter().map(|v| v.as_f64()).sum();
            s.push(sum, expected);
        }
        s
    }

    fn push(&mut self, sum: f64, expected: f64) {
        self.min = self.min.min(sum);
        self.max = self.max.max(sum);
        self.mean += (sum - self.mean) / (self.rows + 1) as f64;
        self.max_dev = self.max_dev.max((sum - expected).abs());
        self.rows += 1;
    }

    pub fn merge(&mut self, o: &RowSumStats) {
        if o.rows == 0 {
            return;
        }
        let total = self.rows + o.rows;
        self.mean = (self.mean * self.rows as f64 + o.mean * o.rows as f64) / total as f64;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
        self.max_dev = self.max_dev.max(o.max_dev);
        self.rows = total;
    }
}

/// Captured attention maps of one layer, each stacked as `[h, N, N]`.
#[derive(Clone, Debug)]
pub struct AttentionDiagnostics<T: Scalar> {
    pub a1: Tensor<T>,
    pub a2: Option<Tensor<T>>,
    pub a_diff: Option<Tensor<T>>,
    pub g_expanded: Option<Tensor<T>>,
    pub a_final: Tensor<T>,
    pub row_sum_min: f64,
    pub row_sum_max: f64,
    pub row_sum_mean: f64,
    pub lambda_value: Option<f64>,
    pub gamma_value: Option<f64>,
}

impl<T: Scalar> AttentionDiagnostics<T> {
    /// `(name, stacked maps)` for every captured map, in a fixed order.
    pub fn matrices(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("a1", &self.a1)];
        if let Some(t) = &self.a2 {
            out.push(("a2", t));
        }
        if let Some(t) = &self.a_diff {
            out.push(("a_diff", t));
        }
        if let Some(t) = &self.g_expanded {
            out.push(("g_expanded", t));
        }
        out.push(("a_final", &self.a_final));
        out
    }
}

/// Per-layer summary returned by every forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T: Scalar> {
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub expected_row_sum: f64,
    pub row_sums: RowSumStats,
    pub diagnostics: Option<AttentionDiagnostics<T>>,
}

fn stack<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> Tensor<T> {
    let mut shape = vec![vars.len()];
    shape.extend_from_slice(g.shape(vars[0]));
    let data = vars.iter().flat_map(|&v| g.value(v).data().iter().copied()).collect();
    Tensor::from_parts(shape, data)
}

/// Multi-head attention for one layer: shared `λ` (and `γ`), per-head maps,
/// optional headwise normalisation, concatenation and `W_O`. No extra
/// per-head output multiplier is applied.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &LayerAttention,
    cfg: &AttentionConfig,
    positions: &[usize],
    capture: bool,
) -> Result<(Var, LayerTrace<T>)> {
    cfg.validate()?;
    let (d_model, w, h) = (cfg.d_model, cfg.head_width(), cfg.h);
    for (name, m, shape) in [
        ("W_Q", p.w_q, [d_model, h * w]),
        ("W_K", p.w_k, [d_model, h * w]),
        ("W_V", p.w_v, [d_model, h * w]),
        ("W_O", p.w_o, [d_model, d_model]),
    ] {
        if g.shape(m) != shape {
            return Err(Error::dim("multi_head_attention", format!("{name} is {:?}, expected {shape:?}", g.shape(m))));
        }
    }
    let (lambda, gamma) = match cfg.kind {
        AttentionKind::Vanilla => (None, None),
        kind => {
            let lp = p.lambda.as_ref().ok_or_else(|| Error::Contract("missing λ parameters".into()))?;
            let lambda = compute_lambda(g, lp)?;
            let gamma = match (kind, cfg.tie_gamma) {
                (AttentionKind::Dint, true) => Some(lambda),
                (AttentionKind::Dint, false) => {
                    Some(p.gamma.ok_or_else(|| Error::Contract("untied γ parameter missing".into()))?)
                }
                _ => None,
            };
            (Some(lambda), gamma)
        }
    };
    let lambda_value = lambda.map(|v| g.value(v).item().as_f64());
    let gamma_value = gamma.map(|v| g.value(v).item().as_f64());
    let expected = cfg.expected_row_sum(lambda_value.unwrap_or(0.0), gamma_value.unwrap_or(0.0));

    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let mut heads = Vec::with_capacity(h);
    let mut row_sums = RowSumStats::empty();
    for i in 0..h {
        let (qi, ki, vi) = if h == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, i * w, w)?, g.slice_cols(k, i * w, w)?, g.slice_cols(v, i * w, w)?)
        };
        let proj = split_head(g, qi, ki, vi, cfg, positions)?;
        let out = attend(g, &proj, lambda, gamma, cfg)?;
        row_sums.merge(&RowSumStats::of_matrix(g.value(out.a_final), expected));
        heads.push(out);
    }

    let diagnostics = capture.then(|| {
        let pick = |f: fn(&HeadOutput) -> Option<Var>| -> Option<Tensor<T>> {
            let vars: Option<Vec<Var>> = heads.iter().map(f).collect();
            vars.map(|v| stack(g, &v))
        };
        AttentionDiagnostics {
            a1: pick(|o| Some(o.a1)).unwrap(),
            a2: pick(|o| o.a2),
            a_diff: pick(|o| o.a_diff),
            g_expanded: pick(|o| o.g_expanded),
            a_final: pick(|o| Some(o.a_final)).unwrap(),
            row_sum_min: row_sums.min,
            row_sum_max: row_sums.max,
            row_sum_mean: row_sums.mean,
            lambda_value,
            gamma_value,
        }
    });

    let outs: Vec<Var> = heads.iter().map(|o| o.out).collect();
    let mut cat = if h == 1 { outs[0] } else { g.concat_cols(&outs)? };
    if cfg.headwise_norm && cfg.kind != AttentionKind::Vanilla {
        let gain = p.head_gain.ok_or_else(|| Error::Contract("headwise norm gains missing".into()))?;
        cat = nn::headwise_norm(g, cat, gain, h, nn::RMS_EPS)?;
    }
    let y = g.matmul(cat, p.w_o)?;
    Ok((
        y,
        LayerTrace { lambda: lambda_value, gamma: gamma_value, expected_row_sum: expected, row_sums, diagnostics },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_enforces_head_rule() {
        assert!(AttentionConfig::new(AttentionKind::Dint, 64, 16, 2).is_ok());
        assert!(AttentionConfig::new(AttentionKind::Dint, 64, 16, 3).is_err());
        assert!(AttentionConfig::new(AttentionKind::Dint, 64, 0, 2).is_err());
        assert!(AttentionConfig::new(AttentionKind::Diff, 12, 3, 2).is_err(), "odd d with rope");
    }

    #[test]
    fn lambda_schedule_values() {
        assert!((lambda_init_for_layer(1).unwrap() - 0.2).abs() < 1e-15);
        assert!((lambda_init_for_layer(2).unwrap() - (0.8 - 0.6 * (-0.3f64).exp())).abs() < 1e-15);
        assert!((lambda_init_for_layer(2).unwrap() - 0.35552).abs() < 1e-4);
        assert!(lambda_init_for_layer(0).is_err());
        let far = lambda_init_for_layer(200).unwrap();
        assert!(far <= 0.8 && 0.8 - far < 1e-12);
    }

    #[test]
    fn lambda_closed_forms() {
        let mut g = Graph::<f64>::new();
        let z = || Tensor::<f64>::zeros([3]).with_grad();
        let p = LambdaParams {
            q1: g.leaf(z()).unwrap(),
            k1: g.leaf(z()).unwrap(),
            q2: g.leaf(z()).unwrap(),
            k2: g.leaf(z()).unwrap(),
            init: 0.37,
        };
        let l = compute_lambda(&mut g, &p).unwrap();
        assert_eq!(g.value(l).item(), 0.37);

        let ln2 = 2f64.ln();
        let p = LambdaParams {
            q1: g.leaf(Tensor::from_f64([2], &[ln2, 0.0]).unwrap()).unwrap(),
            k1: g.leaf(Tensor::from_f64([2], &[1.0, 5.0]).unwrap()).unwrap(),
            q2: g.leaf(Tensor::from_f64([2], &[0.0, 0.0]).unwrap()).unwrap(),
            k2: g.leaf(Tensor::from_f64([2], &[3.0, 1.0]).unwrap()).unwrap(),
            init: 0.5,
        };
        let l = compute_lambda(&mut g, &p).unwrap();
        assert!((g.value(l).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn global_importance_hand_computed() {
        let mut g = Graph::<f64>::new();
        let a1 = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.5, 0.5]).unwrap()).unwrap();
        let lit = global_importance(&mut g, a1, GMode::PaperLiteral).unwrap();
        assert_eq!(g.value(lit).data(), &[0.75, 0.25, 0.75, 0.25]);
        let pre = global_importance(&mut g, a1, GMode::CausalPrefix).unwrap();
        assert_eq!(g.value(pre).data(), &[1.0, 0.0, 0.75, 0.25]);

        let u = g.constant(Tensor::full([4, 4], 0.25)).unwrap();
        for mode in [GMode::PaperLiteral, GMode::CausalPrefix] {
            let ge = global_importance(&mut g, u, mode).unwrap();
            assert!(g.value(ge).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn single_token_dint_is_value_row() {
        let cfg = AttentionConfig { rope: false, ..AttentionConfig::new(AttentionKind::Dint, 8, 2, 2).unwrap() };
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 8], &[0.3, -1.0, 2.0, 0.5, 0.1, 0.2, -0.7, 1.1]).unwrap()).unwrap();
        let w = |g: &mut Graph<f64>, s: f64| {
            let v: Vec<f64> = (0..32).map(|i| s * ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
            g.constant(Tensor::from_f64([8, 4], &v).unwrap()).unwrap()
        };
        let head = HeadParams { w_q: w(&mut g, 1.0), w_k: w(&mut g, 2.0), w_v: w(&mut g, 3.0) };
        let lam = g.constant(Tensor::scalar(0.6)).unwrap();
        let out = dint_attention(&mut g, x, &head, lam, lam, &cfg, &[0]).unwrap();
        assert_eq!(g.value(out.a_final).data(), &[1.0]);
        let v = g.matmul(x, head.w_v).unwrap();
        let (o, vv) = (g.value(out.out).data(), g.value(v).data());
        assert!(o.iter().zip(vv).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
