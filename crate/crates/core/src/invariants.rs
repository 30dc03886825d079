//! Randomised sweeps over the structural properties of the attention
//! variants: row normalisation, the DINT → DIFF → vanilla reduction chain,
//! causality of the full model and the `λ_init` schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    attend, lambda_init_for_layer, AttentionConfig, AttentionKind, GMode, HeadProjections, LambdaInit,
};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One random single-head instance: projected inputs and the mixing scalars.
#[derive(Clone, Debug)]
pub struct Draw {
    pub n: usize,
    pub d: usize,
    q: [Vec<f64>; 2],
    k: [Vec<f64>; 2],
    v: Vec<f64>,
    pub lambda: f64,
}

impl Draw {
    /// `n ∈ 1..=24`, `d ∈ 1..=8`, logits of order one and `λ = exp(a) − exp(b) + λ_init`
    /// with `a, b ~ N(0, 0.5²)` and `λ_init` from a random layer.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=24);
        let d = rng.random_range(1..=8);
        let scale = rng.random_range(0.1..3.0);
        let mut m = || normal(rng, n * d, scale);
        let (q, k) = ([m(), m()], [m(), m()]);
        let v = normal(rng, n * 2 * d, 1.0);
        let (a, b): (f64, f64) = (rng.sample::<f64, _>(StandardNormal) * 0.5, rng.sample::<f64, _>(StandardNormal) * 0.5);
        let layer = rng.random_range(1..=28);
        let lambda = a.exp() - b.exp() + lambda_init_for_layer(layer).expect("layer ≥ 1");
        Draw { n, d, q, k, v, lambda }
    }

    fn projections<T: Scalar>(&self, g: &mut Graph<T>) -> Result<HeadProjections> {
        let (n, d) = (self.n, self.d);
        let mut c = |data: &[f64], cols: usize| g.constant(Tensor::from_f64([n, cols], data)?);
        Ok(HeadProjections {
            q1: c(&self.q[0], d)?,
            k1: c(&self.k[0], d)?,
            q2: Some(c(&self.q[1], d)?),
            k2: Some(c(&self.k[1], d)?),
            v: c(&self.v, 2 * d)?,
        })
    }

    fn config(&self, kind: AttentionKind, g_mode: GMode, tie_gamma: bool) -> AttentionConfig {
        AttentionConfig {
            kind,
            d_model: 2 * self.d,
            d: self.d,
            h: 1,
            causal: true,
            lambda_init: LambdaInit::Schedule,
            tie_gamma,
            headwise_norm: false,
            g_mode,
            rope: false,
        }
    }

    /// `A_final` of tied-γ DINT attention on this draw.
    pub fn dint_map<T: Scalar>(&self, g_mode: GMode) -> Result<Tensor<T>> {
        let mut g = Graph::<T>::new();
        let p = self.projections(&mut g)?;
        let lam = g.constant(Tensor::scalar(T::of(self.lambda)))?;
        let out = attend(&mut g, &p, Some(lam), Some(lam), &self.config(AttentionKind::Dint, g_mode, true))?;
        Ok(g.value(out.a_final).clone())
    }
}

/// Largest `|row sum − 1|` of a square map.
pub fn max_row_dev<T: Scalar>(m: &Tensor<T>) -> f64 {
    let n = m.shape()[1];
    m.data().chunks(n).map(|r| (r.iter().map(|x| x.as_f64()).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RowNormReport {
    pub draws: usize,
    pub rows: usize,
    pub max_dev_f32: f64,
    pub max_dev_f64: f64,
}

/// Evaluates `draws` random tied-γ DINT instances in both precisions and
/// both `G` modes.
pub fn row_norm_sweep(draws: usize, seed: u64) -> Result<RowNormReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = RowNormReport { draws, ..Default::default() };
    for _ in 0..draws {
        let draw = Draw::random(&mut rng);
        for mode in [GMode::CausalPrefix, GMode::PaperLiteral] {
            r.max_dev_f32 = r.max_dev_f32.max(max_row_dev(&draw.dint_map::<f32>(mode)?));
            r.max_dev_f64 = r.max_dev_f64.max(max_row_dev(&draw.dint_map::<f64>(mode)?));
            r.rows += 2 * draw.n;
        }
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ReductionReport {
    pub instances: usize,
    /// Max abs difference of outputs and maps, DINT with `γ = 0` vs DIFF.
    pub dint_vs_diff: f64,
    /// Max abs difference, DIFF with `λ = 0` vs vanilla over `(Q₁, K₁, V)`.
    pub diff_vs_vanilla: f64,
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks the reduction chain on `instances` random draws, in f64.
pub fn reduction_chain(instances: usize, seed: u64) -> Result<ReductionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = ReductionReport { instances, ..Default::default() };
    for i in 0..instances {
        let draw = Draw::random(&mut rng);
        let mode = if i % 2 == 0 { GMode::CausalPrefix } else { GMode::PaperLiteral };
        let mut g = Graph::<f64>::new();
        let p = draw.projections(&mut g)?;
        let lam = g.constant(Tensor::scalar(draw.lambda))?;
        let zero = g.constant(Tensor::scalar(0.0))?;

        let dint = attend(&mut g, &p, Some(lam), Some(zero), &draw.config(AttentionKind::Dint, mode, false))?;
        let diff = attend(&mut g, &p, Some(lam), None, &draw.config(AttentionKind::Diff, mode, false))?;
        let pair = |g: &Graph<f64>, a: Var, b: Var| max_abs_diff(g.value(a), g.value(b));
        r.dint_vs_diff = r.dint_vs_diff.max(pair(&g, dint.out, diff.out)).max(pair(&g, dint.a_final, diff.a_final));

        let diff0 = attend(&mut g, &p, Some(zero), None, &draw.config(AttentionKind::Diff, mode, false))?;
        let vp = HeadProjections { q2: None, k2: None, ..p };
        let van = attend(&mut g, &vp, None, None, &draw.config(AttentionKind::Vanilla, mode, false))?;
        r.diff_vs_vanilla = r.diff_vs_vanilla.max(pair(&g, diff0.out, van.out)).max(pair(&g, diff0.a_final, van.a_final));
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CausalityReport {
    pub trials: usize,
    /// Trials in which some logit before the perturbed position changed.
    pub violations: usize,
    /// Trials in which some logit at or after it changed (sanity check that
    /// the perturbation reaches the model).
    pub effective: usize,
}

/// Perturbs one token of a random sequence and compares the f32 logits of
/// every earlier position bit for bit. Models are freshly initialised with
/// Gaussian noise added to every parameter so `λ` moves off its start value.
pub fn causality_trials(base: &ModelConfig, trials: usize, seed: u64) -> Result<CausalityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = CausalityReport { trials, ..Default::default() };
    let mut model: Option<Model<f32>> = None;
    for t in 0..trials {
        if t % 10 == 0 {
            let mut m = Model::<f32>::new(ModelConfig { seed: rng.random(), ..*base })?;
            for p in m.params_mut() {
                for x in p.data_mut() {
                    *x += 0.05 * rng.sample::<f32, _>(StandardNormal);
                }
            }
            model = Some(m);
        }
        let m = model.as_ref().expect("model drawn on the first trial");
        let n = rng.random_range(2..=base.max_seq_len);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..base.vocab_size)).collect();
        let j = rng.random_range(1..n);
        let mut other = tokens.clone();
        other[j] = (tokens[j] + rng.random_range(1..base.vocab_size)) % base.vocab_size;
        let (a, _) = m.logits(&tokens, false)?;
        let (b, _) = m.logits(&other, false)?;
        let v = base.vocab_size;
        let same = |lo: usize, hi: usize| {
            a.data()[lo * v..hi * v].iter().zip(&b.data()[lo * v..hi * v]).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if !same(0, j) {
            r.violations += 1;
        }
        if !same(j, n) {
            r.effective += 1;
        }
    }
    Ok(r)
}

/// Largest gap between the per-layer `λ_init` a `layers`-deep model is
/// built with and a direct evaluation of `0.8 − 0.6·exp(−0.3·(l − 1))`.
pub fn lambda_schedule_max_err(layers: usize) -> Result<f64> {
    let cfg = ModelConfig { layers, lambda_init: LambdaInit::Schedule, ..ModelConfig::default() };
    let inits = cfg.layer_lambda_inits()?;
    let mut worst = 0.0f64;
    for (i, v) in inits.iter().enumerate() {
        let l = (i + 1) as f64;
        worst = worst.max((v - (0.8 - 0.6 * (-0.3 * (l - 1.0)).exp())).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_hold() {
        let r = row_norm_sweep(20, 1).unwrap();
        assert!(r.max_dev_f32 < 1e-5 && r.max_dev_f64 < 1e-12, "{r:?}");
        let c = reduction_chain(10, 2).unwrap();
        assert!(c.dint_vs_diff < 1e-12 && c.diff_vs_vanilla < 1e-12, "{c:?}");
        assert_eq!(lambda_schedule_max_err(40).unwrap(), 0.0);
    }

    #[test]
    fn untied_gamma_breaks_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = Draw { lambda: 0.5, ..Draw::random(&mut rng) };
        let mut g = Graph::<f64>::new();
        let p = draw.projections(&mut g).unwrap();
        let lam = g.constant(Tensor::scalar(0.5)).unwrap();
        let gam = g.constant(Tensor::scalar(0.2)).unwrap();
        let cfg = draw.config(AttentionKind::Dint, GMode::CausalPrefix, false);
        let out = attend(&mut g, &p, Some(lam), Some(gam), &cfg).unwrap();
        assert!((max_row_dev(g.value(out.a_final)) - 0.3).abs() < 1e-12);
    }
}
