//! Parametric building blocks: RMSNorm, headwise RMSNorm, SwiGLU, rotary
//! position encoding, projections, embeddings and cross-entropy.

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Hidden width of the SwiGLU block: `⌈8·d_model/3⌉` rounded up to a
/// multiple of 8.
pub fn ffn_dim(d_model: usize) -> usize {
    let raw = (8 * d_model).div_ceil(3);
    raw.div_ceil(8) * 8
}

#[derive(Clone, Copy, Debug)]
pub struct RmsNorm {
    pub gain: Var,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(gain: Var) -> Self {
        RmsNorm { gain, eps: RMS_EPS }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        rmsnorm(g, x, self.gain, self.eps)
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last dimension.
pub fn rmsnorm<T: Scalar>(g: &mut Graph<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let d = *g.shape(x).last().unwrap();
    if g.shape(gain) != [d] {
        return Err(Error::dim(
            "rmsnorm",
            format!("gain {:?} does not match feature width {d}", g.shape(gain)),
        ));
    }
    g.rmsnorm(x, gain, 1, eps)
}

/// Headwise normalisation. `heads` is the channel-concatenation of `h`
/// head outputs, `[N, h·w]`; each `w`-wide block is RMS-normalised on its
/// own, with gains `gain[h, w]`. This is group normalisation with one group
/// per head and no mean subtraction.
pub fn headwise_norm<T: Scalar>(g: &mut Graph<T>, heads: Var, gain: Var, h: usize, eps: f64) -> Result<Var> {
    let c = *g.shape(heads).last().unwrap();
    if h == 0 || c % h != 0 || g.shape(gain) != [h, c / h] {
        return Err(Error::dim(
            "headwise_norm",
            format!("{h} heads, input width {c}, gain {:?}", g.shape(gain)),
        ));
    }
    g.rmsnorm(heads, gain, h, eps)
}

/// `(swish(x·W_G) ⊙ x·W_1)·W_2`.
#[derive(Clone, Copy, Debug)]
pub struct SwiGlu {
    pub w_g: Var,
    pub w_1: Var,
    pub w_2: Var,
}

impl SwiGlu {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        swiglu(g, x, self)
    }
}

pub fn swiglu<T: Scalar>(g: &mut Graph<T>, x: Var, p: &SwiGlu) -> Result<Var> {
    let (wg, w1, w2) = (g.shape(p.w_g).to_vec(), g.shape(p.w_1).to_vec(), g.shape(p.w_2).to_vec());
    if wg != w1 || wg.len() != 2 || w2 != [wg[1], wg[0]] {
        return Err(Error::dim("swiglu", format!("W_G {wg:?}, W_1 {w1:?}, W_2 {w2:?}")));
    }
    let gate = g.matmul(x, p.w_g)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(x, p.w_1)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, p.w_2)
}

/// Rotary encoding with base 10000 at the given absolute positions.
pub fn rope<T: Scalar>(g: &mut Graph<T>, x: Var, positions: &[usize]) -> Result<Var> {
    g.rope(x, positions, ROPE_BASE)
}

/// `x·W` with `W[in×out]`; no bias.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    g.matmul(x, w)
}

pub fn embed<T: Scalar>(g: &mut Graph<T>, tokens: &[usize], table: Var) -> Result<Var> {
    g.embed(table, tokens)
}

/// Mean token cross-entropy over every row.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
    g.cross_entropy(logits, &t)
}

/// Per-row negative log-likelihood computed from logit values, in f64.
/// Rows with no target yield `None`.
pub fn token_nll<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
    let &[n, v] = logits.shape() else {
        return Err(Error::dim("token_nll", format!("expected matrix, got {:?}", logits.shape())));
    };
    if targets.len() != n {
        return Err(Error::dim("token_nll", format!("{n} rows but {} targets", targets.len())));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| match *t {
            None => Ok(None),
            Some(t) if t >= v => Err(Error::Index { op: "token_nll", index: t, extent: v }),
            Some(t) => {
                let row = logits.row(i);
                Ok(Some(log_sum_exp(row) - row[t].as_f64()))
            }
        })
        .collect()
}

/// Index of the largest logit in each row (first one on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let v = *logits.shape().last().unwrap();
    (0..logits.numel() / v)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(Tensor::from_f64(shape.to_vec(), data).unwrap().with_grad()).unwrap()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn ffn_width_rounds_up_to_eight() {
        assert_eq!(ffn_dim(3072), 8192);
        assert_eq!(ffn_dim(64), 176);
        assert_eq!(ffn_dim(8), 24);
        assert!((1..300).all(|d| ffn_dim(d) % 8 == 0 && 3 * ffn_dim(d) >= 8 * d));
    }

    #[test]
    fn rmsnorm_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 4], &[1.0; 4]);
        let gain = leaf(&mut g, &[4], &[1.0; 4]);
        let y = rmsnorm(&mut g, x, gain, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);

        let x = leaf(&mut g, &[1, 2], &[3.0, -3.0]);
        let gain = leaf(&mut g, &[2], &[1.0; 2]);
        let y = rmsnorm(&mut g, x, gain, RMS_EPS).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_unit_rms_and_width_check() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[5, 8], &lcg(1, 40));
        let gain = leaf(&mut g, &[8], &[1.0; 8]);
        let y = rmsnorm(&mut g, x, gain, RMS_EPS).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
        }
        let bad = leaf(&mut g, &[7], &[1.0; 7]);
        assert!(matches!(rmsnorm(&mut g, x, bad, RMS_EPS), Err(Error::Dimension { .. })));
    }

    #[test]
    fn headwise_single_head_is_rmsnorm() {
        let mut g = Graph::<f64>::new();
        let data = lcg(2, 12);
        let x = leaf(&mut g, &[3, 4], &data);
        let gain_h = leaf(&mut g, &[1, 4], &[0.5, 1.0, 1.5, 2.0]);
        let gain = leaf(&mut g, &[4], &[0.5, 1.0, 1.5, 2.0]);
        let a = headwise_norm(&mut g, x, gain_h, 1, RMS_EPS).unwrap();
        let b = rmsnorm(&mut g, x, gain, RMS_EPS).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn headwise_is_head_permutation_equivariant() {
        let (n, h, w) = (4, 3, 2);
        let data = lcg(3, n * h * w);
        let gains = lcg(4, h * w);
        let perm = [2usize, 0, 1];
        let permute = |v: &[f64], rows: usize| -> Vec<f64> {
            let mut out = Vec::new();
            for r in 0..rows {
                for &p in &perm {
                    out.extend_from_slice(&v[r * h * w + p * w..r * h * w + (p + 1) * w]);
                }
            }
            out
        };
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[n, h * w], &data);
        let gx = leaf(&mut g, &[h, w], &gains);
        let xp = leaf(&mut g, &[n, h * w], &permute(&data, n));
        let gp = leaf(&mut g, &[h, w], &permute(&gains, 1));
        let y = headwise_norm(&mut g, x, gx, h, RMS_EPS).unwrap();
        let yp = headwise_norm(&mut g, xp, gp, h, RMS_EPS).unwrap();
        assert_eq!(permute(g.value(y).data(), n), g.value(yp).data());
        // each head block has unit RMS (up to eps) when gains are one
        let ones = leaf(&mut g, &[h, w], &vec![1.0; h * w]);
        let z = headwise_norm(&mut g, x, ones, h, RMS_EPS).unwrap();
        for r in 0..n {
            for k in 0..h {
                let blk = &g.value(z).row(r)[k * w..(k + 1) * w];
                let xb = &data[r * h * w + k * w..r * h * w + (k + 1) * w];
                let ms = xb.iter().map(|v| v * v).sum::<f64>() / w as f64;
                let rms = (blk.iter().map(|v| v * v).sum::<f64>() / w as f64).sqrt();
                assert!((rms - (ms / (ms + RMS_EPS)).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swiglu_zeros() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let w = lcg(5, 3 * 8);
        let p = SwiGlu {
            w_g: leaf(&mut g, &[3, 8], &w),
            w_1: leaf(&mut g, &[3, 8], &w),
            w_2: leaf(&mut g, &[8, 3], &w),
        };
        let y = swiglu(&mut g, x, &p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = leaf(&mut g, &[2, 3], &lcg(6, 6));
        let z = SwiGlu {
            w_g: leaf(&mut g, &[3, 8], &[0.0; 24]),
            w_1: leaf(&mut g, &[3, 8], &[0.0; 24]),
            w_2: leaf(&mut g, &[8, 3], &[0.0; 24]),
        };
        let y = swiglu(&mut g, x, &z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = SwiGlu { w_2: p.w_g, ..p };
        assert!(swiglu(&mut g, x, &bad).is_err());
    }

    #[test]
    fn rope_identity_and_norms() {
        let mut g = Graph::<f64>::new();
        let data = lcg(7, 3 * 6);
        let x = leaf(&mut g, &[3, 6], &data);
        let y = rope(&mut g, x, &[0, 0, 0]).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let y = rope(&mut g, x, &[5, 17, 123]).unwrap();
        for (a, b) in data.chunks(2).zip(g.value(y).data().chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            assert!((na - nb).abs() < 1e-6);
        }
        let odd = leaf(&mut g, &[2, 3], &[0.0; 6]);
        assert!(matches!(rope(&mut g, odd, &[0, 1]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rope_dot_depends_on_offset_only() {
        let mut g = Graph::<f64>::new();
        let (q, k) = (lcg(8, 8), lcg(9, 8));
        let dot_at = |g: &mut Graph<f64>, i: usize, j: usize| {
            let qv = leaf(g, &[1, 8], &q);
            let kv = leaf(g, &[1, 8], &k);
            let qr = rope(g, qv, &[i]).unwrap();
            let kr = rope(g, kv, &[j]).unwrap();
            g.value(qr).data().iter().zip(g.value(kr).data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for delta in [0usize, 1, 3, 10] {
            let base = dot_at(&mut g, delta, 0);
            for shift in [1usize, 7, 40, 200] {
                let shifted = dot_at(&mut g, delta + shift, shift);
                assert!((base - shifted).abs() < 1e-6, "delta {delta} shift {shift}");
            }
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let logits = leaf(&mut g, &[2, 4], &[0.0; 8]);
        let l = cross_entropy(&mut g, logits, &[1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let logits = leaf(&mut g, &[1, 3], &[0.0, 500.0, 0.0]);
        let l = cross_entropy(&mut g, logits, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-100);
        assert!(matches!(
            cross_entropy(&mut g, logits, &[3]),
            Err(Error::Index { index: 3, extent: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_reference() {
        let data = lcg(10, 5 * 7);
        let targets = [0usize, 6, 3, 3, 1];
        let mut g = Graph::<f64>::new();
        let logits = leaf(&mut g, &[5, 7], &data);
        let l = cross_entropy(&mut g, logits, &targets).unwrap();
        let mut reference = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * 7..(i + 1) * 7];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            reference += lse - row[t];
        }
        reference /= 5.0;
        assert!((g.value(l).item() - reference).abs() < 1e-10);
    }

    #[test]
    fn linear_and_embed_identities() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], &lcg(11, 6));
        let eye = g.constant(Tensor::eye(3)).unwrap();
        let y = linear(&mut g, x, eye).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let e = embed(&mut g, &[0], eye).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn token_nll_matches_graph_loss() {
        let data = lcg(12, 3 * 5);
        let t = Tensor::<f64>::from_f64([3, 5], &data).unwrap();
        let nll = token_nll(&t, &[Some(1), None, Some(4)]).unwrap();
        assert!(nll[1].is_none());
        let mut g = Graph::<f64>::new();
        let l = g.constant(t).unwrap();
        let ce = g.cross_entropy(l, &[Some(1), None, Some(4)]).unwrap();
        let mean = (nll[0].unwrap() + nll[2].unwrap()) / 2.0;
        assert!((g.value(ce).item() - mean).abs() < 1e-14);
    }
}
