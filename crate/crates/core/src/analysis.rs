//! Attention-allocation scores, row-sum audits, retrieval accuracy grids and
//! raw attention-map dumps.
//!
//! Attention scores come in two flavours because DIFF and DINT maps carry
//! negative entries:
//!
//! * absolute mass: `Σ_{j∈S} |a_ij| / Σ_j |a_ij|`, always in `[0, 1]`; used for
//!   cross-architecture comparison.
//! * signed mass: `Σ_{j∈S} a_ij`, unnormalized.
//!
//! Both are averaged over the query rows and then over heads.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{LayerTrace, RowSumStats};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::argmax_rows;
use crate::tasks::{self, NeedleTask, Span};
use crate::tensor::{Scalar, Tensor};
use crate::training::derive_seed;

pub const SCORE_NORMALIZATION: &str =
    "absolute = sum |a| over span / sum |a| over row; signed = raw sum over span; mean over query rows then heads";

/// Table 5 reference points `(depth, answer, noise)` for the baseline and for DINT.
pub const PAPER_TRANSFORMER_SCORES: [(f64, f64, f64); 1] = [(0.0, 0.03, 0.51)];
pub const PAPER_DINT_SCORES: [(f64, f64, f64); 1] = [(0.0, 0.35, 0.01)];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanMass {
    pub answer_abs: f64,
    pub noise_abs: f64,
    pub answer_signed: f64,
    pub noise_signed: f64,
}

impl SpanMass {
    fn scale(mut self, k: f64) -> Self {
        self.answer_abs *= k;
        self.noise_abs *= k;
        self.answer_signed *= k;
        self.noise_signed *= k;
        self
    }

    fn add(&mut self, o: &SpanMass) {
        self.answer_abs += o.answer_abs;
        self.noise_abs += o.noise_abs;
        self.answer_signed += o.answer_signed;
        self.noise_signed += o.noise_signed;
    }
}

/// Mass of one `[N, N]` map from `rows` onto the answer and noise spans.
pub fn span_mass<T: Scalar>(map: &[T], n: usize, rows: &[usize], answer: &[Span], noise: &[Span]) -> Result<SpanMass> {
    if map.len() != n * n {
        return Err(Error::dim("span_mass", format!("map of {} values is not {n}x{n}", map.len())));
    }
    if rows.is_empty() {
        return Err(Error::Contract("span_mass needs at least one query row".into()));
    }
    let in_spans = |spans: &[Span], j: usize| spans.iter().any(|s| s.contains(j));
    let mut total = SpanMass::default();
    for &i in rows {
        if i >= n {
            return Err(Error::Index { op: "span_mass", index: i, extent: n });
        }
        let row = &map[i * n..(i + 1) * n];
        let abs_sum: f64 = row.iter().map(|v| v.as_f64().abs()).sum();
        let mut m = SpanMass::default();
        for (j, v) in row.iter().enumerate() {
            let v = v.as_f64();
            if in_spans(answer, j) {
                m.answer_signed += v;
                m.answer_abs += v.abs();
            } else if in_spans(noise, j) {
                m.noise_signed += v;
                m.noise_abs += v.abs();
            }
        }
        if abs_sum > 0.0 {
            m.answer_abs /= abs_sum;
            m.noise_abs /= abs_sum;
        }
        total.add(&m);
    }
    Ok(total.scale(1.0 / rows.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub mass: SpanMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionScoreReport {
    pub depth: f64,
    /// Layer whose head mean is reported in `mass`.
    pub layer: usize,
    pub mass: SpanMass,
    /// Every layer and head.
    pub heads: Vec<HeadScore>,
    pub normalization: String,
}

impl AttentionScoreReport {
    pub fn attention_to_answer(&self) -> f64 {
        self.mass.answer_abs
    }

    pub fn attention_noise(&self) -> f64 {
        self.mass.noise_abs
    }

    pub fn layer_mean(&self, layer: usize) -> SpanMass {
        let hs: Vec<_> = self.heads.iter().filter(|h| h.layer == layer).collect();
        let mut m = SpanMass::default();
        for h in &hs {
            m.add(&h.mass);
        }
        m.scale(1.0 / hs.len().max(1) as f64)
    }
}

/// Scores from captured `A_final` maps. `layer` defaults to the last one.
pub fn scores_from_traces<T: Scalar>(
    traces: &[LayerTrace<T>],
    task: &NeedleTask,
    layer: Option<usize>,
) -> Result<AttentionScoreReport> {
    if traces.is_empty() {
        return Err(Error::Contract("attention scores need at least one layer".into()));
    }
    let layer = layer.unwrap_or(traces.len() - 1);
    if layer >= traces.len() {
        return Err(Error::Index { op: "attention_scores", index: layer, extent: traces.len() });
    }
    let rows = task.first_query_positions();
    let answer = [task.answer_span];
    let mut heads = Vec::new();
    for (l, tr) in traces.iter().enumerate() {
        let diag = tr
            .diagnostics
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("layer {l} has no captured diagnostics")))?;
        let a = &diag.a_final;
        let (h, n) = (a.shape()[0], a.shape()[1]);
        for head in 0..h {
            let map = &a.data()[head * n * n..(head + 1) * n * n];
            heads.push(HeadScore { layer: l, head, mass: span_mass(map, n, &rows, &answer, &task.noise_spans)? });
        }
    }
    let mut report = AttentionScoreReport {
        depth: task.depth,
        layer,
        mass: SpanMass::default(),
        heads,
        normalization: SCORE_NORMALIZATION.to_string(),
    };
    report.mass = report.layer_mean(layer);
    Ok(report)
}

pub fn attention_scores<T: Scalar>(model: &Model<T>, task: &NeedleTask, layer: Option<usize>) -> Result<AttentionScoreReport> {
    let (_, traces) = model.logits(&task.context, true)?;
    scores_from_traces(&traces, task, layer)
}

/// Mean scores per depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScore {
    pub depth: f64,
    pub samples: usize,
    pub mass: SpanMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub needles: usize,
    pub queries: usize,
    pub ctx_len: usize,
    pub depths: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub layer: Option<usize>,
}

pub fn score_table<T: Scalar>(model: &Model<T>, spec: &ScoreSpec) -> Result<Vec<DepthScore>> {
    let mut out = Vec::new();
    for (di, &depth) in spec.depths.iter().enumerate() {
        let mut m = SpanMass::default();
        for s in 0..spec.samples {
            let task = tasks::generate_needle_sample(
                spec.needles,
                spec.queries,
                spec.ctx_len,
                depth,
                derive_seed(spec.seed, 100 + di as u64, s as u64),
            )?;
            m.add(&attention_scores(model, &task, spec.layer)?.mass);
        }
        out.push(DepthScore { depth, samples: spec.samples, mass: m.scale(1.0 / spec.samples.max(1) as f64) });
    }
    Ok(out)
}

pub fn score_csv(rows: &[(String, Vec<DepthScore>)]) -> String {
    let mut s = String::from("model,depth,samples,attention_to_answer,attention_noise,answer_signed,noise_signed\n");
    for (name, scores) in rows {
        for d in scores {
            let m = d.mass;
            let _ = writeln!(
                s,
                "{name},{},{},{:.6},{:.6},{:.6},{:.6}",
                d.depth, d.samples, m.answer_abs, m.noise_abs, m.answer_signed, m.noise_signed
            );
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub expected_row_sum: f64,
    pub stats: RowSumStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSumAudit {
    pub layers: Vec<LayerAudit>,
    /// Largest `|row_sum − expected|` over every layer, head and row.
    pub max_dev: f64,
    pub rows: usize,
}

pub fn row_sum_audit<T: Scalar>(model: &Model<T>, inputs: &[Vec<usize>]) -> Result<RowSumAudit> {
    let mut layers: Vec<LayerAudit> = Vec::new();
    for tokens in inputs {
        let (_, traces) = model.logits(tokens, false)?;
        for (l, tr) in traces.iter().enumerate() {
            if layers.len() <= l {
                layers.push(LayerAudit {
                    layer: l,
                    lambda: tr.lambda,
                    gamma: tr.gamma,
                    expected_row_sum: tr.expected_row_sum,
                    stats: RowSumStats::empty(),
                });
            }
            layers[l].stats.merge(&tr.row_sums);
        }
    }
    let max_dev = layers.iter().map(|a| a.stats.max_dev).fold(0.0, f64::max);
    let rows = layers.iter().map(|a| a.stats.rows).sum();
    Ok(RowSumAudit { layers, max_dev, rows })
}

/// Greedy retrieval score of one task.
pub fn retrieve<T: Scalar>(model: &Model<T>, task: &NeedleTask) -> Result<u8> {
    let (logits, _) = model.logits(&task.context, false)?;
    let pred = argmax_rows(&logits);
    Ok(tasks::score_retrieval(&tasks::predicted_answer(&pred, task), task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub needles: Vec<usize>,
    pub queries: Vec<usize>,
    pub ctx_lens: Vec<usize>,
    pub depths: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: String,
    pub needles: usize,
    pub queries: usize,
    pub ctx_len: usize,
    pub depth: f64,
    pub samples: usize,
    pub correct: usize,
}

impl GridCell {
    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.correct as f64 / self.samples as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub cells: Vec<GridCell>,
    /// `(needles, queries, ctx_len)` combinations that cannot be generated.
    pub skipped: Vec<(usize, usize, usize)>,
}

/// Scores every model on the same tasks. Combinations with more queries than
/// needles, or that do not fit the context, are listed in `skipped`.
pub fn accuracy_grid<T: Scalar>(models: &[(String, &Model<T>)], spec: &GridSpec) -> Result<AccuracyGrid> {
    let mut grid = AccuracyGrid::default();
    for &n in &spec.needles {
        for &r in &spec.queries {
            for &ctx in &spec.ctx_lens {
                if r > n || tasks::filler_len(n, r, ctx).is_err() {
                    grid.skipped.push((n, r, ctx));
                    continue;
                }
                for (di, &depth) in spec.depths.iter().enumerate() {
                    let stream = ((n as u64) << 48) ^ ((r as u64) << 40) ^ ((ctx as u64) << 8) ^ di as u64;
                    let tasks: Vec<NeedleTask> = (0..spec.samples)
                        .map(|s| tasks::generate_needle_sample(n, r, ctx, depth, derive_seed(spec.seed, stream, s as u64)))
                        .collect::<Result<_>>()?;
                    for (name, model) in models {
                        let mut correct = 0;
                        for t in &tasks {
                            correct += retrieve(*model, t)? as usize;
                        }
                        grid.cells.push(GridCell {
                            model: name.clone(),
                            needles: n,
                            queries: r,
                            ctx_len: ctx,
                            depth,
                            samples: spec.samples,
                            correct,
                        });
                    }
                }
            }
        }
    }
    Ok(grid)
}

impl AccuracyGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,needles,queries,ctx_len,depth,samples,correct,accuracy\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4}",
                c.model,
                c.needles,
                c.queries,
                c.ctx_len,
                c.depth,
                c.samples,
                c.correct,
                c.accuracy()
            );
        }
        s
    }

    fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.model) {
                out.push(c.model.clone());
            }
        }
        out
    }

    /// Accuracy of `model` averaged over the depths of `(n, r)`, pooled over context lengths.
    pub fn mean_accuracy(&self, model: &str, needles: usize, queries: usize) -> Option<f64> {
        let cells: Vec<_> = self
            .cells
            .iter()
            .filter(|c| c.model == model && c.needles == needles && c.queries == queries)
            .collect();
        if cells.is_empty() {
            return None;
        }
        Some(cells.iter().map(|c| c.accuracy()).sum::<f64>() / cells.len() as f64)
    }

    /// One row per model, one column per `(N, R)`, each averaged over depth.
    pub fn table_csv(&self) -> String {
        let mut combos: Vec<(usize, usize)> = Vec::new();
        for c in &self.cells {
            if !combos.contains(&(c.needles, c.queries)) {
                combos.push((c.needles, c.queries));
            }
        }
        let mut s = String::from("model");
        for (n, r) in &combos {
            let _ = write!(s, ",N={n} R={r}");
        }
        s.push('\n');
        for m in self.models() {
            s.push_str(&m);
            for &(n, r) in &combos {
                let _ = write!(s, ",{:.4}", self.mean_accuracy(&m, n, r).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    /// Depth rows by context-length columns for one model and `(N, R)`.
    pub fn depth_matrix_csv(&self, model: &str, needles: usize, queries: usize) -> String {
        let cells: Vec<_> = self
            .cells
            .iter()
            .filter(|c| c.model == model && c.needles == needles && c.queries == queries)
            .collect();
        let mut lens: Vec<usize> = cells.iter().map(|c| c.ctx_len).collect();
        lens.dedup();
        lens.sort_unstable();
        lens.dedup();
        let mut depths: Vec<f64> = Vec::new();
        for c in &cells {
            if !depths.contains(&c.depth) {
                depths.push(c.depth);
            }
        }
        let mut s = String::from("depth");
        for l in &lens {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for d in depths {
            let _ = write!(s, "{d}");
            for &l in &lens {
                match cells.iter().find(|c| c.depth == d && c.ctx_len == l) {
                    Some(c) => {
                        let _ = write!(s, ",{:.4}", c.accuracy());
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub const BLOCK_MAGIC: &[u8; 4] = b"MBLK";

/// Location of one dumped `[N, N]` map inside the block file.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpEntry {
    pub layer: usize,
    pub head: usize,
    pub name: &'static str,
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// Writes every captured per-head map as `MBLK, u32 rank, rank × u32
/// extents, f32 LE values` and returns the index.
pub fn dump_matrices<T: Scalar>(traces: &[LayerTrace<T>], w: &mut impl Write) -> Result<Vec<DumpEntry>> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let io = |e| Error::Record(format!("matrix dump: {e}"));
    for (l, tr) in traces.iter().enumerate() {
        let diag = tr
            .diagnostics
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("layer {l} has no captured diagnostics")))?;
        let mats = diag.matrices();
        let (h, n) = (diag.a_final.shape()[0], diag.a_final.shape()[1]);
        for head in 0..h {
            for (name, t) in &mats {
                let mut buf = Vec::with_capacity(16 + 4 * n * n);
                buf.extend_from_slice(BLOCK_MAGIC);
                buf.extend_from_slice(&2u32.to_le_bytes());
                buf.extend_from_slice(&(n as u32).to_le_bytes());
                buf.extend_from_slice(&(n as u32).to_le_bytes());
                for v in &t.data()[head * n * n..(head + 1) * n * n] {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
                entries.push(DumpEntry { layer: l, head, name, offset, shape: vec![n, n] });
                offset += buf.len() as u64;
            }
        }
    }
    Ok(entries)
}

pub fn dump_index_csv(entries: &[DumpEntry]) -> String {
    let mut s = String::from("layer,head,name,offset,rows,cols\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{},{}", e.layer, e.head, e.name, e.offset, e.shape[0], e.shape[1]);
    }
    s
}

/// Reads the block starting at `offset`.
pub fn read_block(bytes: &[u8], offset: usize) -> Result<Tensor<f32>> {
    let fail = |at: usize, msg: &str| Error::Format { offset: at, msg: msg.to_string() };
    let u32_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| fail(at, "truncated block header"))
    };
    if bytes.get(offset..offset + 4) != Some(BLOCK_MAGIC.as_slice()) {
        return Err(fail(offset, "missing MBLK magic"));
    }
    let rank = u32_at(offset + 4)?;
    let shape = (0..rank).map(|i| u32_at(offset + 8 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = offset + 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let raw = bytes.get(start..start + 4 * numel).ok_or_else(|| fail(start, "truncated block data"))?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}
