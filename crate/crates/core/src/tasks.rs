//! Synthetic data: multi-needle retrieval contexts and a byte-level corpus
//! with controllable n-gram recurrence.
//!
//! Tokens are ASCII byte values, so the vocabulary has [`VOCAB`] entries.
//! A needle renders as `C=dd.` (an uppercase city letter and a two-digit
//! number) and is buried in filler made of lowercase words and spaces. The
//! context ends with one `?C=dd.` block per query; the digits in those
//! blocks are the answer the model has to produce.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB: usize = 128;
/// Answer-needle depths used by the evaluation grid.
pub const DEPTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const NEEDLE_LEN: usize = 5;
pub const QUERY_LEN: usize = 6;

/// Half-open token interval `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub city: Span,
    pub number: Span,
    /// Offset of the needle within the filler, as a fraction of its length.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub city: Span,
    /// Positions of the expected digits inside the query block.
    pub answer: Span,
    /// Index into [`NeedleTask::needles`] of the needle being asked about.
    pub needle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleTask {
    pub n_needles: usize,
    pub n_queries: usize,
    pub ctx_len: usize,
    pub depth: f64,
    pub seed: u64,
    pub context: Vec<usize>,
    /// `needles[0]` is the answer needle, placed at `depth`.
    pub needles: Vec<Needle>,
    /// `queries[0]` asks for the answer needle.
    pub queries: Vec<Query>,
    /// Digits of every query, in query order.
    pub gold_answer: Vec<usize>,
    /// Number span of the answer needle.
    pub answer_span: Span,
    /// Filler intervals, i.e. everything that is neither a needle nor a query.
    pub noise_spans: Vec<Span>,
}

fn tok(c: u8) -> usize {
    c as usize
}

impl NeedleTask {
    /// `(position, target)` pairs for every answer digit: the logits at
    /// `position` must predict `target`.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        self.queries
            .iter()
            .flat_map(|q| (q.answer.start..q.answer.end).map(|p| (p - 1, self.context[p])))
            .collect()
    }

    /// Positions whose logits predict the digits of the first query.
    pub fn first_query_positions(&self) -> Vec<usize> {
        let a = self.queries[0].answer;
        (a.start - 1..a.end - 1).collect()
    }

    /// Renders the context as text.
    pub fn text(&self) -> String {
        self.context.iter().map(|&t| t as u8 as char).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("task serialises")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let t: NeedleTask = serde_json::from_str(line).map_err(|e| Error::Record(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    /// Structural consistency of a (possibly deserialised) task.
    pub fn check(&self) -> Result<()> {
        let n = self.context.len();
        let bad = |m: &str| Err(Error::Record(m.to_string()));
        if n != self.ctx_len || self.needles.len() != self.n_needles || self.queries.len() != self.n_queries {
            return bad("counts do not match the recorded parameters");
        }
        if self.context.iter().any(|&t| t >= VOCAB) {
            return bad("token outside vocabulary");
        }
        let mut spans: Vec<Span> = self.noise_spans.clone();
        for nd in &self.needles {
            spans.push(Span::new(nd.city.start, nd.number.end + 1));
        }
        for q in &self.queries {
            spans.push(Span::new(q.city.start - 1, q.answer.end + 1));
            if q.needle >= self.needles.len() {
                return bad("query refers to a missing needle");
            }
            let want = &self.context[self.needles[q.needle].number.start..self.needles[q.needle].number.end];
            if want != &self.context[q.answer.start..q.answer.end] {
                return bad("query answer differs from its needle's number");
            }
        }
        spans.sort_by_key(|s| s.start);
        let mut at = 0;
        for s in &spans {
            if s.start != at || s.end > n {
                return bad("spans do not tile the context");
            }
            at = s.end;
        }
        if at != n {
            return bad("spans do not cover the context");
        }
        if self.answer_span != self.needles[0].number || self.queries[0].needle != 0 {
            return bad("answer span is not the first needle's number");
        }
        Ok(())
    }
}

/// Lowercase words separated by single spaces, exactly `len` tokens.
fn filler(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        let w = rng.random_range(2..=6);
        for _ in 0..w {
            out.push(tok(b'a') + rng.random_range(0..26));
        }
        out.push(tok(b' '));
    }
    out.truncate(len);
    out
}

/// Filler tokens left once `n_needles` needles and `n_queries` queries fit.
pub fn filler_len(n_needles: usize, n_queries: usize, ctx_len: usize) -> Result<usize> {
    let fixed = n_needles * NEEDLE_LEN + n_queries * QUERY_LEN;
    ctx_len.checked_sub(fixed).ok_or_else(|| {
        Error::Capacity(format!(
            "{n_needles} needles and {n_queries} queries need {fixed} tokens, context holds {ctx_len}"
        ))
    })
}

/// Generates one retrieval context. The answer needle starts `round(depth·F)`
/// tokens into the `F` filler tokens; the other needles are placed at
/// uniformly random filler offsets. At a shared offset the answer needle goes
/// first when `depth < 0.5` and last otherwise, so depth 0 and depth 1 put it
/// at the very start and very end of the haystack.
pub fn generate_needle_sample(
    n_needles: usize,
    n_queries: usize,
    ctx_len: usize,
    depth: f64,
    seed: u64,
) -> Result<NeedleTask> {
    if n_needles == 0 || n_queries == 0 || n_queries > n_needles || n_needles > 26 {
        return Err(Error::Contract(format!(
            "need 1 ≤ queries ≤ needles ≤ 26, got {n_queries} queries and {n_needles} needles"
        )));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Contract(format!("depth {depth} outside [0, 1]")));
    }
    let f = filler_len(n_needles, n_queries, ctx_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut letters: Vec<u8> = (b'A'..=b'Z').collect();
    letters.shuffle(&mut rng);
    let mut numbers: Vec<u8> = (0..100).collect();
    numbers.shuffle(&mut rng);

    // (offset, order key, needle index)
    let answer_off = (depth * f as f64).round() as usize;
    let answer_key = if depth < 0.5 { 0 } else { 2 };
    let mut slots = vec![(answer_off, answer_key, 0usize)];
    for j in 1..n_needles {
        slots.push((rng.random_range(0..=f), 1, j));
    }
    slots.sort();
    let mut queried: Vec<usize> = (1..n_needles).collect();
    queried.shuffle(&mut rng);
    queried.truncate(n_queries - 1);
    queried.insert(0, 0);
    let fill = filler(&mut rng, f);

    let mut context = Vec::with_capacity(ctx_len);
    let mut needles = vec![None; n_needles];
    let mut noise_spans = Vec::new();
    let mut consumed = 0;
    for &(off, _, j) in &slots {
        if off > consumed {
            noise_spans.push(Span::new(context.len(), context.len() + off - consumed));
            context.extend_from_slice(&fill[consumed..off]);
            consumed = off;
        }
        let s = context.len();
        let n = numbers[j];
        context.extend([tok(letters[j]), tok(b'='), tok(b'0' + n / 10), tok(b'0' + n % 10), tok(b'.')]);
        let depth = if f == 0 { 0.0 } else { off as f64 / f as f64 };
        needles[j] = Some(Needle { city: Span::new(s, s + 1), number: Span::new(s + 2, s + 4), depth });
    }
    if f > consumed {
        noise_spans.push(Span::new(context.len(), context.len() + f - consumed));
        context.extend_from_slice(&fill[consumed..]);
    }
    let needles: Vec<Needle> = needles.into_iter().map(|n| n.expect("every needle placed")).collect();

    let mut queries = Vec::with_capacity(n_queries);
    let mut gold_answer = Vec::with_capacity(2 * n_queries);
    for &j in &queried {
        let s = context.len();
        let digits = &context[needles[j].number.start..needles[j].number.end];
        let digits = [digits[0], digits[1]];
        context.extend([tok(b'?'), tok(letters[j]), tok(b'=')]);
        context.extend(digits);
        context.push(tok(b'.'));
        gold_answer.extend(digits);
        queries.push(Query { city: Span::new(s + 1, s + 2), answer: Span::new(s + 3, s + 5), needle: j });
    }
    debug_assert_eq!(context.len(), ctx_len);
    let answer_span = needles[0].number;
    Ok(NeedleTask {
        n_needles,
        n_queries,
        ctx_len,
        depth,
        seed,
        context,
        needles,
        queries,
        gold_answer,
        answer_span,
        noise_spans,
    })
}

/// Predicted answer digits read off per-position argmax tokens (`predicted[i]`
/// is the model's choice for position `i + 1`). With the query prompts given,
/// this equals greedy decoding of the answer region.
pub fn predicted_answer(predicted: &[usize], task: &NeedleTask) -> Vec<usize> {
    task.answer_targets().iter().map(|&(p, _)| predicted[p]).collect()
}

/// 1 iff the decoded answer equals the gold answer exactly.
pub fn score_retrieval(output: &[usize], task: &NeedleTask) -> u8 {
    u8::from(output == task.gold_answer.as_slice())
}

pub fn write_tasks_jsonl(w: &mut impl Write, tasks: &[NeedleTask]) -> std::io::Result<()> {
    for t in tasks {
        writeln!(w, "{}", t.to_json())?;
    }
    Ok(())
}

/// Reads one task per line; blank lines and `#` comment lines are skipped.
pub fn read_tasks_jsonl(r: impl BufRead) -> Result<Vec<NeedleTask>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Record(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(NeedleTask::from_json(&line).map_err(|e| Error::Record(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Byte-level corpus with copy runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub seq_len: usize,
    /// Probability that a copy run starts at any position.
    pub repeat: f64,
    /// n of the n-grams used for AR-Hit labels.
    pub ngram: usize,
}

/// First and last token of the corpus alphabet (printable ASCII).
const CORPUS_LO: usize = 33;
const CORPUS_HI: usize = 126;

impl CorpusSpec {
    /// Sequence `index` of the stream. Fresh tokens never repeat a bigram
    /// already present; copy runs replay 4–12 earlier tokens verbatim. With
    /// `repeat = 0` no bigram (hence no n-gram for n ≥ 2) ever recurs.
    pub fn sequence(&self, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let n = self.seq_len;
        let mut out: Vec<usize> = Vec::with_capacity(n);
        let mut seen = vec![false; VOCAB * VOCAB];
        while out.len() < n {
            if out.len() >= 8 && rng.random::<f64>() < self.repeat {
                let len = rng.random_range(4..=12).min(n - out.len());
                let src = rng.random_range(0..out.len() - 4);
                for k in 0..len {
                    let t = out[src + k];
                    push_token(&mut out, &mut seen, t);
                }
                continue;
            }
            let t = match out.last() {
                None => rng.random_range(CORPUS_LO..=CORPUS_HI),
                Some(&prev) => {
                    let fresh = |t: usize| !seen[prev * VOCAB + t];
                    let pick = rng.random_range(CORPUS_LO..=CORPUS_HI);
                    if fresh(pick) {
                        pick
                    } else {
                        // next unused successor, cycling through the alphabet
                        let span = CORPUS_HI - CORPUS_LO + 1;
                        (1..span)
                            .map(|k| CORPUS_LO + (pick - CORPUS_LO + k) % span)
                            .find(|&t| fresh(t))
                            .unwrap_or(pick)
                    }
                }
            };
            push_token(&mut out, &mut seen, t);
        }
        out
    }

    /// `count` consecutive sequences starting at `first`.
    pub fn batch(&self, first: u64, count: usize) -> Vec<Vec<usize>> {
        (0..count as u64).map(|i| self.sequence(first + i)).collect()
    }
}

fn push_token(out: &mut Vec<usize>, seen: &mut [bool], t: usize) {
    if let Some(&prev) = out.last() {
        seen[prev * VOCAB + t] = true;
    }
    out.push(t);
}

/// `labels[i]` is true iff the n-gram ending at `i` already ended at some
/// earlier position, i.e. token `i` is recallable from context.
pub fn ar_hit_labels(tokens: &[usize], n: usize) -> Vec<bool> {
    let mut seen: HashSet<&[usize]> = HashSet::new();
    let mut out = vec![false; tokens.len()];
    for i in 0..tokens.len() {
        if i + 1 >= n {
            let gram = &tokens[i + 1 - n..=i];
            out[i] = !seen.insert(gram);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_needle_layout() {
        let t = generate_needle_sample(1, 1, 64, 0.5, 7).unwrap();
        t.check().unwrap();
        assert_eq!(t.answer_span, t.needles[0].number);
        assert_eq!(t.gold_answer, t.context[t.answer_span.start..t.answer_span.end].to_vec());
        assert_eq!(t.context.len(), 64);
        assert!(t.text().ends_with('.'));
    }

    #[test]
    fn depth_extremes() {
        for seed in 0..20 {
            let t = generate_needle_sample(4, 2, 128, 0.0, seed).unwrap();
            assert_eq!(t.needles[0].city.start, 0, "answer needle first");
            let t = generate_needle_sample(4, 2, 128, 1.0, seed).unwrap();
            let last = t.needles.iter().map(|n| n.city.start).max().unwrap();
            assert_eq!(t.needles[0].city.start, last, "answer needle last");
            assert_eq!(t.needles[0].number.end + 1, t.queries[0].city.start - 1);
        }
    }

    #[test]
    fn capacity_error() {
        assert!(matches!(generate_needle_sample(4, 2, 20, 0.0, 0), Err(Error::Capacity(_))));
        assert!(generate_needle_sample(4, 2, 32, 0.0, 0).is_ok());
        assert!(generate_needle_sample(2, 3, 256, 0.0, 0).is_err());
    }

    #[test]
    fn filler_never_uses_needle_symbols() {
        let t = generate_needle_sample(4, 2, 256, 0.25, 3).unwrap();
        for s in &t.noise_spans {
            for &c in &t.context[s.start..s.end] {
                let c = c as u8;
                assert!(c == b' ' || c.is_ascii_lowercase(), "{c}");
            }
        }
    }

    #[test]
    fn score_exact_match() {
        let t = generate_needle_sample(4, 2, 128, 0.75, 11).unwrap();
        assert_eq!(score_retrieval(&t.gold_answer, &t), 1);
        let mut wrong = t.gold_answer.clone();
        wrong[3] = if wrong[3] == tok(b'0') { tok(b'1') } else { tok(b'0') };
        assert_eq!(score_retrieval(&wrong, &t), 0);
        // a perfect next-token predictor decodes the gold answer
        let shifted: Vec<usize> = t.context[1..].to_vec();
        assert_eq!(predicted_answer(&shifted, &t), t.gold_answer);
    }

    #[test]
    fn json_round_trip() {
        let t = generate_needle_sample(3, 2, 96, 0.25, 5).unwrap();
        let mut buf = Vec::new();
        write_tasks_jsonl(&mut buf, &[t.clone(), t.clone()]).unwrap();
        let back = read_tasks_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
        assert!(read_tasks_jsonl(&b"{\"nope\":1}\n"[..]).is_err());
    }

    #[test]
    fn abab_second_b_is_hit() {
        let toks: Vec<usize> = "abab".bytes().map(usize::from).collect();
        assert_eq!(ar_hit_labels(&toks, 2), vec![false, false, false, true]);
    }

    #[test]
    fn zero_repetition_has_no_hits() {
        let spec = CorpusSpec { seed: 4, seq_len: 256, repeat: 0.0, ngram: 2 };
        for i in 0..20 {
            let s = spec.sequence(i);
            assert_eq!(s.len(), 256);
            assert!(!ar_hit_labels(&s, 2).iter().any(|&h| h));
            assert!(!ar_hit_labels(&s, 3).iter().any(|&h| h));
        }
    }

    #[test]
    fn repetition_produces_hits_and_is_deterministic() {
        let spec = CorpusSpec { seed: 4, seq_len: 256, repeat: 0.2, ngram: 2 };
        let a = spec.batch(10, 3);
        assert_eq!(a, spec.batch(10, 3));
        assert_ne!(a[0], a[1]);
        let frac = ar_hit_labels(&a[0], 2).iter().filter(|&&h| h).count() as f64 / 256.0;
        assert!(frac > 0.2, "{frac}");
        assert!(a[0].iter().all(|&t| (CORPUS_LO..=CORPUS_HI).contains(&t)));
    }
}
