//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each case builds a small graph from random leaves and reduces its output
//! to a scalar with a random projection. A point is one leaf coordinate:
//! the analytic gradient is compared against `(f(x+ε) − f(x−ε)) / 2ε` with
//! `rel = |a − n| / max(|a|, |n|, REL_FLOOR)`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    self, AttentionConfig, AttentionKind, GMode, HeadParams, LambdaInit, LambdaParams, LayerAttention,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, OpKind, Var};
use crate::model::Model;
use crate::nn::{self, SwiGlu};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;
/// Points drawn from each random instance before a fresh one is drawn.
const POINTS_PER_INSTANCE: usize = 10;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Model used for the whole-model case.
    pub model: ModelConfig,
    /// Corrupts the backward pass of this op in every analytic graph.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: 50,
            eps: EPS,
            tolerance: TOLERANCE,
            seed: 0,
            model: toy_model(),
            fault: None,
        }
    }
}

/// Two-layer DINT model small enough for a coordinate sweep.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        arch: AttentionKind::Dint,
        layers: 2,
        d_model: 16,
        d: 4,
        heads: 2,
        vocab_size: 24,
        max_seq_len: 8,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    /// `(leaf, coordinate, analytic, numeric)` at the worst point.
    pub worst: (usize, usize, f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,points,max_rel_err,passed\n");
        for c in &self.cases {
            s.push_str(&format!("{},{},{:.3e},{}\n", c.name, c.points, c.max_rel_err, c.passed));
        }
        s
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// A graph builder over leaves of fixed shapes.
pub struct Case {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    build: Box<Build>,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        shapes: Vec<Vec<usize>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case { name: name.into(), shapes, build: Box::new(build) }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn projected(g: &mut Graph<f64>, case: &Case, leaves: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)> {
    let vars = leaves.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
    let out = (case.build)(g, &vars)?;
    let r = proj.get_or_insert_with(|| randn(rng, g.shape(out))).clone();
    let r = g.constant(r)?;
    Ok((g.dot(out, r)?, vars))
}

pub fn check_case(case: &Case, cfg: &GradcheckConfig, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = CaseResult { name: case.name.clone(), points: 0, max_rel_err: 0.0, worst: (0, 0, 0.0, 0.0), passed: true };
    while res.points < cfg.points {
        let leaves: Vec<Tensor<f64>> = case.shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let mut proj = None;
        let mut g = Graph::new();
        g.inject_fault(cfg.fault);
        let (loss, vars) = projected(&mut g, case, &leaves, &mut proj, &mut rng)?;
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> =
            vars.iter().zip(&leaves).map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect();
        let coords: Vec<(usize, usize)> =
            leaves.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
        for _ in 0..POINTS_PER_INSTANCE.min(cfg.points - res.points) {
            let &(i, j) = coords.choose(&mut rng).expect("cases have at least one leaf");
            let mut eval = |delta: f64| -> Result<f64> {
                let mut moved = leaves.clone();
                moved[i].data_mut()[j] += delta;
                let mut g = Graph::new();
                let (loss, _) = projected(&mut g, case, &moved, &mut proj, &mut rng)?;
                Ok(g.value(loss).item())
            };
            let numeric = (eval(cfg.eps)? - eval(-cfg.eps)?) / (2.0 * cfg.eps);
            let analytic = grads[i][j];
            let e = rel_err(analytic, numeric);
            if e > res.max_rel_err || res.points == 0 {
                res.max_rel_err = res.max_rel_err.max(e);
                res.worst = (i, j, analytic, numeric);
            }
            res.points += 1;
        }
    }
    res.passed = res.max_rel_err < cfg.tolerance;
    Ok(res)
}

fn head_cfg(kind: AttentionKind, g_mode: GMode) -> AttentionConfig {
    AttentionConfig {
        kind,
        d_model: 8,
        d: 2,
        h: 2,
        causal: true,
        lambda_init: LambdaInit::Schedule,
        tie_gamma: true,
        headwise_norm: true,
        g_mode,
        rope: true,
    }
}

const POS: [usize; 5] = [0, 1, 2, 3, 4];

/// Every primitive and every composite block of the model.
pub fn op_cases() -> Vec<Case> {
    let mut v = vec![
        Case::new("matmul", vec![vec![3, 4], vec![4, 5]], |g, x| g.matmul(x[0], x[1])),
        Case::new("matmul_nt_scaled", vec![vec![3, 4], vec![5, 4]], |g, x| g.matmul_nt_scaled(x[0], x[1], 0.7)),
        Case::new("add_broadcast", vec![vec![3, 4], vec![4]], |g, x| g.add(x[0], x[1])),
        Case::new("sub", vec![vec![3, 4], vec![3, 4]], |g, x| g.sub(x[0], x[1])),
        Case::new("mul", vec![vec![3, 4], vec![3, 4]], |g, x| g.mul(x[0], x[1])),
        Case::new("scale", vec![vec![3, 4]], |g, x| g.scale(x[0], 1.3)),
        Case::new("scale_by", vec![vec![3, 4], vec![1]], |g, x| g.scale_by(x[0], x[1])),
        Case::new("add_const", vec![vec![3, 4]], |g, x| g.add_const(x[0], 0.4)),
        Case::new("exp", vec![vec![3, 4]], |g, x| g.exp(x[0])),
        Case::new("silu", vec![vec![3, 4]], |g, x| g.silu(x[0])),
        Case::new("sum", vec![vec![3, 4]], |g, x| g.sum(x[0])),
        Case::new("mean_axis", vec![vec![3, 4]], |g, x| g.mean_axis(x[0], 0)),
        Case::new("prefix_mean", vec![vec![4, 4]], |g, x| g.prefix_mean(x[0])),
        Case::new("softmax_causal", vec![vec![2, 4, 4]], |g, x| g.softmax(x[0], Some(&Mask::Causal))),
        Case::new("rmsnorm", vec![vec![3, 8], vec![8]], |g, x| nn::rmsnorm(g, x[0], x[1], nn::RMS_EPS)),
        Case::new("headwise_norm", vec![vec![3, 8], vec![2, 4]], |g, x| nn::headwise_norm(g, x[0], x[1], 2, nn::RMS_EPS)),
        Case::new("embed", vec![vec![6, 4]], |g, x| g.embed(x[0], &[1, 5, 1, 0])),
        Case::new("cross_entropy", vec![vec![3, 5]], |g, x| g.cross_entropy(x[0], &[Some(1), None, Some(4)])),
        Case::new("dot", vec![vec![5], vec![5]], |g, x| g.dot(x[0], x[1])),
        Case::new("slice_cols", vec![vec![3, 6]], |g, x| g.slice_cols(x[0], 2, 3)),
        Case::new("concat_cols", vec![vec![3, 2], vec![3, 3]], |g, x| g.concat_cols(&[x[0], x[1]])),
        Case::new("rope", vec![vec![4, 6]], |g, x| nn::rope(g, x[0], &[0, 1, 5, 9])),
        Case::new("swiglu", vec![vec![3, 8], vec![8, 24], vec![8, 24], vec![24, 8]], |g, x| {
            nn::swiglu(g, x[0], &SwiGlu { w_g: x[1], w_1: x[2], w_2: x[3] })
        }),
        Case::new("lambda", vec![vec![4]; 4], |g, x| {
            attention::compute_lambda(g, &LambdaParams { q1: x[0], k1: x[1], q2: x[2], k2: x[3], init: 0.2 })
        }),
    ];
    let head_shapes = vec![vec![5, 8], vec![8, 4], vec![8, 4], vec![8, 4]];
    v.push(Case::new("vanilla_attention", head_shapes.clone(), |g, x| {
        let cfg = head_cfg(AttentionKind::Vanilla, GMode::CausalPrefix);
        Ok(attention::vanilla_attention(g, x[0], &HeadParams { w_q: x[1], w_k: x[2], w_v: x[3] }, &cfg, &POS)?.out)
    }));
    let mut diff_shapes = head_shapes.clone();
    diff_shapes.push(vec![1]);
    v.push(Case::new("diff_attention", diff_shapes, |g, x| {
        let cfg = head_cfg(AttentionKind::Diff, GMode::CausalPrefix);
        Ok(attention::diff_attention(g, x[0], &HeadParams { w_q: x[1], w_k: x[2], w_v: x[3] }, x[4], &cfg, &POS)?.out)
    }));
    for mode in [GMode::CausalPrefix, GMode::PaperLiteral] {
        let mut shapes = head_shapes.clone();
        shapes.extend([vec![1], vec![1]]);
        v.push(Case::new(format!("dint_attention_{mode}"), shapes, move |g, x| {
            let cfg = head_cfg(AttentionKind::Dint, mode);
            let head = HeadParams { w_q: x[1], w_k: x[2], w_v: x[3] };
            Ok(attention::dint_attention(g, x[0], &head, x[4], x[5], &cfg, &POS)?.out)
        }));
    }
    for tie in [true, false] {
        // x, W_Q, W_K, W_V, W_O, four λ vectors, head gains, γ
        let mut shapes = vec![vec![5, 8], vec![8, 8], vec![8, 8], vec![8, 8], vec![8, 8]];
        shapes.extend(vec![vec![2]; 4]);
        shapes.push(vec![2, 4]);
        if !tie {
            shapes.push(vec![1]);
        }
        let name = if tie { "multi_head_dint" } else { "multi_head_dint_untied" };
        v.push(Case::new(name, shapes, move |g, x| {
            let cfg = AttentionConfig { tie_gamma: tie, ..head_cfg(AttentionKind::Dint, GMode::CausalPrefix) };
            let p = LayerAttention {
                w_q: x[1],
                w_k: x[2],
                w_v: x[3],
                w_o: x[4],
                lambda: Some(LambdaParams { q1: x[5], k1: x[6], q2: x[7], k2: x[8], init: 0.2 }),
                gamma: x.get(10).copied(),
                head_gain: Some(x[9]),
            };
            Ok(attention::multi_head_attention(g, x[0], &p, &cfg, &POS, false)?.0)
        }));
    }
    v
}

/// Whole-model case: next-token loss of `cfg` with respect to every parameter.
pub fn check_model(cfg: &GradcheckConfig) -> Result<CaseResult> {
    let mc = ModelConfig { seed: cfg.seed, ..cfg.model };
    let mut model: Model<f64> = Model::new(mc)?;
    // move λ off its mirrored start so every λ vector gets a gradient
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for t in model.params_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let n = mc.max_seq_len.min(8);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..mc.vocab_size)).collect();
    let targets: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..mc.vocab_size))).collect();
    let loss_of = |m: &Model<f64>, fault: Option<OpKind>| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        g.inject_fault(fault);
        let f = m.forward(&mut g, &tokens, true, false)?;
        let loss = g.cross_entropy(f.logits, &targets)?;
        Ok((g, loss, f.params))
    };
    let (mut g, loss, vars) = loss_of(&model, cfg.fault)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let coords: Vec<(usize, usize)> =
        model.params().iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    let mut res = CaseResult { name: "model".into(), points: 0, max_rel_err: 0.0, worst: (0, 0, 0.0, 0.0), passed: true };
    for _ in 0..cfg.points {
        let &(i, j) = coords.choose(&mut rng).ok_or_else(|| Error::Contract("model has no parameters".into()))?;
        let orig = model.params()[i].data()[j];
        let mut eval = |x: f64| -> Result<f64> {
            model.params_mut()[i].data_mut()[j] = x;
            let (g, loss, _) = loss_of(&model, None)?;
            Ok(g.value(loss).item())
        };
        let numeric = (eval(orig + cfg.eps)? - eval(orig - cfg.eps)?) / (2.0 * cfg.eps);
        model.params_mut()[i].data_mut()[j] = orig;
        let e = rel_err(grads[i][j], numeric);
        if e > res.max_rel_err || res.points == 0 {
            res.max_rel_err = res.max_rel_err.max(e);
            res.worst = (i, j, grads[i][j], numeric);
        }
        res.points += 1;
    }
    res.passed = res.max_rel_err < cfg.tolerance;
    Ok(res)
}

/// Runs every op case and the whole-model case.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut cases = Vec::new();
    for (k, case) in op_cases().iter().enumerate() {
        cases.push(check_case(case, cfg, cfg.seed.wrapping_add(k as u64))?);
    }
    cases.push(check_model(cfg)?);
    Ok(GradcheckReport { tolerance: cfg.tolerance, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn every_case_passes() {
        let cfg = GradcheckConfig { points: 20, ..GradcheckConfig::default() };
        let r = run(&cfg).unwrap();
        assert!(r.passed(), "{}", r.to_csv());
    }

    #[test]
    fn injected_fault_is_caught_and_localized() {
        let cfg = GradcheckConfig { points: 10, fault: Some(OpKind::Softmax), ..GradcheckConfig::default() };
        let r = run(&cfg).unwrap();
        let failed: Vec<&str> = r.failures().iter().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"softmax_causal"));
        assert!(failed.contains(&"model"));
        assert!(!failed.contains(&"matmul"));
    }
}
