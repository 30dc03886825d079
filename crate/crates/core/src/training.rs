//! AdamW, the learning-rate schedule and a deterministic training loop.
//!
//! A step draws `batch` sequences, builds one graph per sequence, and sums
//! their gradients weighted by scored-token counts, so the step loss is the
//! mean over every scored token of the batch. Per-token losses are also
//! split into AR-Hit tokens (recallable from an earlier n-gram) and the
//! rest.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossTargets, RunConfig, TaskConfig, TaskKind, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ParamRole};
use crate::nn;
use crate::tasks::{self, CorpusSpec};
use crate::tensor::{first_non_finite, Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers and hyperparameters of AdamW.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &[Tensor<T>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        OptimState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1,
            beta2,
            weight_decay,
        }
    }
}

/// One AdamW update with bias-corrected moments. Weight decay is decoupled
/// (`p ← p − lr·wd·p`) and applied only where `decay[i]` is set.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    decay: &[bool],
    lr: f64,
    state: &mut OptimState,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("optimizer buffers do not match the parameter list".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].numel() {
            return Err(Error::dim("adamw", format!("gradient {i} has {} entries for {:?}", g.len(), params[i].shape())));
        }
        if let Some(index) = first_non_finite(g) {
            return Err(Error::NonFinite {
                stage: "optimizer",
                op: "adamw",
                node: i,
                shape: params[i].shape().to_vec(),
                index,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] { 1.0 - lr * state.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j].as_f64();
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            *x = T::of(x.as_f64() * shrink - lr * update);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `min_ratio · peak` at step `total`, constant afterwards.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let floor = min_ratio * peak;
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(index)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
        }
    }
}

/// One training sequence. `targets[i]` is the token that position `i`
/// must predict, or `None` when position `i` is not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    /// AR-Hit label of each position's target.
    pub ar_hit: Vec<bool>,
}

impl Sample {
    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Sample `index` of `split` for a task. Needle samples draw the answer
/// depth uniformly from `[0, 1]`.
pub fn make_sample(task: &TaskConfig, seed: u64, split: Split, index: u64) -> Result<Sample> {
    let s = derive_seed(seed, split.stream(), index);
    let n = task.seq_len;
    let (tokens, answer) = match task.kind {
        TaskKind::Corpus => {
            let spec = CorpusSpec { seed: derive_seed(seed, split.stream(), u64::MAX), seq_len: n, repeat: task.repeat, ngram: task.ngram };
            (spec.sequence(index), None)
        }
        TaskKind::Needle => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let depth: f64 = rng.random();
            let t = tasks::generate_needle_sample(task.needles, task.queries, n, depth, rng.random())?;
            let answer = t.answer_targets();
            (t.context, Some(answer))
        }
    };
    let labels = tasks::ar_hit_labels(&tokens, task.ngram);
    let mut targets = vec![None; n];
    let mut ar_hit = vec![false; n];
    match (task.loss, answer, task.kind) {
        (LossTargets::Answer, Some(answer), TaskKind::Needle) => {
            for (p, t) in answer {
                targets[p] = Some(t);
                ar_hit[p] = labels[p + 1];
            }
        }
        _ => {
            for p in 0..n - 1 {
                targets[p] = Some(tokens[p + 1]);
                ar_hit[p] = labels[p + 1];
            }
        }
    }
    Ok(Sample { tokens, targets, ar_hit })
}

/// Token-weighted losses over a set of scored targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceLoss {
    pub total_sum: f64,
    pub hit_sum: f64,
    pub other_sum: f64,
    pub hit_count: usize,
    pub other_count: usize,
}

impl SliceLoss {
    pub fn add(&mut self, nll: f64, hit: bool) {
        self.total_sum += nll;
        if hit {
            self.hit_sum += nll;
            self.hit_count += 1;
        } else {
            self.other_sum += nll;
            self.other_count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.hit_count + self.other_count
    }

    pub fn loss(&self) -> f64 {
        self.total_sum / self.count() as f64
    }

    pub fn ar_hit(&self) -> Option<f64> {
        (self.hit_count > 0).then(|| self.hit_sum / self.hit_count as f64)
    }

    pub fn others(&self) -> Option<f64> {
        (self.other_count > 0).then(|| self.other_sum / self.other_count as f64)
    }

    /// `(hits·ar_hit + others·others) / count`, which must equal [`loss`](Self::loss).
    pub fn recombined(&self) -> f64 {
        let h = self.ar_hit().unwrap_or(0.0) * self.hit_count as f64;
        let o = self.others().unwrap_or(0.0) * self.other_count as f64;
        (h + o) / self.count() as f64
    }
}

fn slice_losses<T: Scalar>(logits: &Tensor<T>, sample: &Sample, acc: &mut SliceLoss) -> Result<()> {
    let nll = nn::token_nll(logits, &sample.targets)?;
    for (p, l) in nll.iter().enumerate() {
        if let Some(l) = l {
            acc.add(*l, sample.ar_hit[p]);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub loss: f64,
    pub ar_hit_loss: Option<f64>,
    pub others_loss: Option<f64>,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest `|row sum − expected|` over every attention row of the step.
    pub row_sum_max_dev: f64,
    pub slices: SliceLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub valid: f64,
    pub ar_hit: Option<f64>,
    pub others: Option<f64>,
    pub slices: SliceLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub tokens_per_step: usize,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step of the kept checkpoint (0 = initialisation).
    pub best_step: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "step,loss,ar_hit_loss,others_loss,lr,grad_norm,row_sum_max_dev";
    pub const EVAL_CSV_HEADER: &'static str = "step,valid,ar_hit,others";

    /// Per-step CSV. `manifest` is recorded in a leading comment line.
    pub fn to_csv(&self, manifest: &str) -> String {
        let mut s = format!("# manifest={manifest}\n{}\n", Self::CSV_HEADER);
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                r.loss,
                opt(r.ar_hit_loss),
                opt(r.others_loss),
                r.lr,
                r.grad_norm,
                r.row_sum_max_dev
            ));
        }
        s
    }

    pub fn eval_csv(&self, manifest: &str) -> String {
        let mut s = format!("# manifest={manifest}\n{}\n", Self::EVAL_CSV_HEADER);
        for e in &self.evals {
            s.push_str(&format!("{},{},{},{}\n", e.step, e.valid, opt(e.ar_hit), opt(e.others)));
        }
        s
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Validation loss of `model` on the first `count` validation samples.
pub fn evaluate(model: &Model<f32>, task: &TaskConfig, seed: u64, count: usize, step: usize) -> Result<EvalRecord> {
    let mut acc = SliceLoss::default();
    for i in 0..count as u64 {
        let sample = make_sample(task, seed, Split::Valid, i)?;
        let (logits, _) = model.logits(&sample.tokens, false)?;
        slice_losses(&logits, &sample, &mut acc)?;
    }
    Ok(EvalRecord { step, valid: acc.loss(), ar_hit: acc.ar_hit(), others: acc.others(), slices: acc })
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters at the step with the lowest validation loss.
    pub best: Model<f32>,
    pub last: Model<f32>,
}

/// Trains a fresh model for `steps` optimizer steps. The model is
/// initialised from `seed` and all data is derived from it, so equal
/// arguments give bit-identical results. `progress` is called after every
/// step and evaluation.
pub fn train(
    cfg: &RunConfig,
    seed: u64,
    steps: usize,
    mut progress: impl FnMut(&StepRecord, Option<&EvalRecord>),
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut cfg = *cfg;
    cfg.model.seed = seed;
    let tc: TrainConfig = cfg.train;
    let mut model = Model::<f32>::new(cfg.model)?;
    let decay: Vec<bool> = model.specs().iter().map(|s| s.role == ParamRole::Matrix).collect();
    let mut opt = OptimState::new(model.params(), tc.beta1, tc.beta2, tc.weight_decay);
    let mut best = model.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_step = 0;
    let mut records = Vec::with_capacity(steps);
    let mut evals = Vec::new();

    for step in 1..=steps {
        let task = TaskConfig { seq_len: cfg.task.train_len(step, steps), ..cfg.task };
        let samples = (0..tc.batch)
            .map(|b| make_sample(&task, seed, Split::Train, ((step - 1) * tc.batch + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = samples.iter().map(Sample::scored).sum();
        let mut grads: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut slices = SliceLoss::default();
        let mut row_dev = 0.0f64;
        for sample in &samples {
            if sample.scored() == 0 {
                continue;
            }
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &sample.tokens, true, false)?;
            let loss = g.cross_entropy(fwd.logits, &sample.targets)?;
            let weighted = g.scale(loss, sample.scored() as f32 / total as f32)?;
            g.backward(weighted)?;
            for (acc, &v) in grads.iter_mut().zip(&fwd.params) {
                if let Some(gv) = g.grad(v) {
                    for (a, &x) in acc.iter_mut().zip(gv) {
                        *a += x;
                    }
                }
            }
            slice_losses(g.value(fwd.logits), sample, &mut slices)?;
            for t in &fwd.layers {
                row_dev = row_dev.max(t.row_sums.max_dev);
            }
        }
        let loss = slices.loss();
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "training", op: "loss", node: step, shape: vec![1], index: 0 });
        }
        let norm = grads.iter().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if tc.clip > 0.0 && norm > tc.clip {
            let k = (tc.clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|x| *x *= k);
        }
        let lr = lr_at(step, tc.lr, tc.warmup, steps, tc.min_lr_ratio);
        adamw_step(model.params_mut(), &grads, &decay, lr, &mut opt)?;
        let rec = StepRecord {
            step,
            loss,
            ar_hit_loss: slices.ar_hit(),
            others_loss: slices.others(),
            lr,
            grad_norm: norm,
            row_sum_max_dev: row_dev,
            slices,
        };
        records.push(rec);
        let eval = if step % tc.eval_every == 0 || step == steps {
            let e = evaluate(&model, &cfg.task, seed, tc.eval_size, step)?;
            if e.valid < best_valid {
                best_valid = e.valid;
                best_step = step;
                best = model.clone();
            }
            evals.push(e);
            Some(e)
        } else {
            None
        };
        progress(&rec, eval.as_ref());
    }

    let report = TrainReport {
        seed,
        config_hash: cfg.hash(),
        tokens_per_step: tc.batch * cfg.task.seq_len,
        steps: records,
        evals,
        best_step,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, best, last: model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_at(0, 1e-3, 100, 1000, 0.1), 0.0);
        assert_eq!(lr_at(50, 1e-3, 100, 1000, 0.1), 5e-4);
        assert_eq!(lr_at(100, 1e-3, 100, 1000, 0.1), 1e-3);
        let mid = lr_at(550, 1e-3, 100, 1000, 0.1);
        let want = 1e-4 + 0.9e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 0.5).cos());
        assert!((mid - want).abs() < 1e-12);
        assert!((lr_at(1000, 1e-3, 100, 1000, 0.1) - 1e-4).abs() < 1e-15);
        assert!((lr_at(5000, 1e-3, 100, 1000, 0.1) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_scalar_step() {
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let mut st = OptimState::new(&p, 0.9, 0.95, 0.1);
        adamw_step(&mut p, &[vec![0.2]], &[true], 0.01, &mut st).unwrap();
        // m̂ = g and v̂ = g² after one step
        let want = 0.5 * (1.0 - 0.01 * 0.1) - 0.01 * 0.2 / (0.2 + ADAM_EPS);
        assert!((p[0].item() - want).abs() < 1e-12);

        adamw_step(&mut p, &[vec![-0.1]], &[true], 0.01, &mut st).unwrap();
        let (m, v): (f64, f64) = (0.9 * 0.1 * 0.2 + 0.1 * -0.1, 0.95 * 0.05 * 0.04 + 0.05 * 0.01);
        let upd = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.9025)).sqrt() + ADAM_EPS);
        let want2 = want * (1.0 - 0.001) - 0.01 * upd;
        assert!((p[0].item() - want2).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_cases() {
        let mut p = vec![Tensor::<f64>::from_f64([3], &[1.0, -2.0, 3.0]).unwrap()];
        let mut st = OptimState::new(&p, 0.9, 0.95, 0.0);
        adamw_step(&mut p, &[vec![0.0; 3]], &[true], 0.1, &mut st).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);

        let mut st = OptimState::new(&p, 0.9, 0.95, 0.5);
        adamw_step(&mut p, &[vec![0.0; 3]], &[true], 0.1, &mut st).unwrap();
        let k = 1.0 - 0.1 * 0.5;
        assert_eq!(p[0].data(), &[k, -2.0 * k, 3.0 * k]);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let mut st = OptimState::new(&p, 0.9, 0.95, 0.0);
        let err = adamw_step(&mut p, &[vec![f32::NAN]], &[false], 0.1, &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite { stage: "optimizer", .. }));
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn slice_partition_identity() {
        let mut s = SliceLoss::default();
        for (i, l) in [0.3, 1.7, 2.2, 0.01, 4.0].iter().enumerate() {
            s.add(*l, i % 2 == 0);
        }
        assert_eq!(s.count(), 5);
        assert!((s.recombined() - s.loss()).abs() < 1e-12);
    }

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig { d_model: 16, d: 4, heads: 2, max_seq_len: 48, ..ModelConfig::default() };
        cfg.task.seq_len = 48;
        cfg.task.kind = TaskKind::Corpus;
        cfg.train.batch = 2;
        cfg.train.eval_every = 2;
        cfg.train.eval_size = 2;
        cfg.train.warmup = 1;
        cfg
    }

    #[test]
    fn zero_steps_keeps_init() {
        let out = train(&tiny(), 3, 0, |_, _| {}).unwrap();
        assert!(out.report.steps.is_empty());
        let init = Model::<f32>::new(ModelConfig { seed: 3, ..tiny().model }).unwrap();
        assert!(out.best.params().iter().zip(init.params()).all(|(a, b)| a.data() == b.data()));
    }

    #[test]
    fn deterministic_and_partitioned() {
        let a = train(&tiny(), 5, 4, |_, _| {}).unwrap();
        let b = train(&tiny(), 5, 4, |_, _| {}).unwrap();
        assert_eq!(a.report.to_csv("x"), b.report.to_csv("x"));
        assert_eq!(a.report.evals, b.report.evals);
        for r in &a.report.steps {
            assert!(r.loss.is_finite());
            assert!((r.slices.recombined() - r.loss).abs() < 1e-9);
            assert!(r.row_sum_max_dev < 1e-4);
        }
        assert_eq!(a.report.evals.len(), 2);
    }

    #[test]
    fn answer_targets_are_digits() {
        let task = TaskConfig { seq_len: 64, ..TaskConfig::default() };
        let s = make_sample(&task, 1, Split::Train, 0).unwrap();
        assert_eq!(s.scored(), 4);
        for (p, t) in s.targets.iter().enumerate() {
            if let Some(t) = t {
                assert_eq!(*t, s.tokens[p + 1]);
                assert!((*t as u8).is_ascii_digit());
            }
        }
        assert_ne!(s, make_sample(&task, 1, Split::Valid, 0).unwrap());
    }
}
