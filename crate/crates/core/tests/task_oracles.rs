use std::io::Cursor;

use dint_core::tasks::{
    ar_hit_labels, filler_len, generate_needle_sample, read_tasks_jsonl, score_retrieval, write_tasks_jsonl,
    CorpusSpec, NEEDLE_LEN, QUERY_LEN, VOCAB,
};
use proptest::prelude::*;

fn ar_hit_brute(tokens: &[usize], n: usize) -> Vec<bool> {
    (0..tokens.len())
        .map(|i| i + 1 >= n && (n - 1..i).any(|j| tokens[j + 1 - n..=j] == tokens[i + 1 - n..=i]))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ar_hit_matches_brute_force(tokens in prop::collection::vec(0usize..4, 0..60), n in 1usize..4) {
        prop_assert_eq!(ar_hit_labels(&tokens, n), ar_hit_brute(&tokens, n));
    }

    #[test]
    fn needle_tasks_are_well_formed(n in 1usize..8, r in 1usize..8, extra in 0usize..80, depth in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assume!(r <= n);
        let ctx = n * NEEDLE_LEN + r * QUERY_LEN + extra;
        let t = generate_needle_sample(n, r, ctx, depth, seed).unwrap();
        t.check().unwrap();
        prop_assert_eq!(t.context.len(), ctx);
        let f = filler_len(n, r, ctx).unwrap();
        let before: usize = t.noise_spans.iter().filter(|s| s.end <= t.needles[0].city.start).map(|s| s.len()).sum();
        prop_assert_eq!(before, (depth * f as f64).round() as usize);
        prop_assert_eq!(score_retrieval(&t.gold_answer, &t), 1);
        let mut wrong = t.gold_answer.clone();
        wrong[0] = if wrong[0] == '0' as usize { '1' as usize } else { '0' as usize };
        prop_assert_eq!(score_retrieval(&wrong, &t), 0);
        let cities: std::collections::HashSet<usize> = t.needles.iter().map(|nd| t.context[nd.city.start]).collect();
        prop_assert_eq!(cities.len(), n);
    }

    #[test]
    fn tasks_survive_jsonl(seed in any::<u64>(), depth in 0.0f64..=1.0) {
        let tasks = vec![generate_needle_sample(4, 2, 96, depth, seed).unwrap(), generate_needle_sample(2, 1, 40, 1.0 - depth, seed ^ 1).unwrap()];
        let mut buf = b"# header\n".to_vec();
        write_tasks_jsonl(&mut buf, &tasks).unwrap();
        prop_assert_eq!(read_tasks_jsonl(Cursor::new(buf)).unwrap(), tasks);
    }

    #[test]
    fn corpus_without_repeats_has_no_hits(seed in any::<u64>(), index in 0u64..1000) {
        let spec = CorpusSpec { seed, seq_len: 200, repeat: 0.0, ngram: 2 };
        let s = spec.sequence(index);
        prop_assert_eq!(s.len(), 200);
        prop_assert!(s.iter().all(|&t| t < VOCAB));
        prop_assert!(ar_hit_labels(&s, 2).iter().all(|&h| !h));
    }
}

#[test]
fn distractor_depths_are_uniform() {
    const BINS: usize = 10;
    let mut counts = [0usize; BINS];
    let mut total = 0;
    for s in 0..1000u64 {
        let t = generate_needle_sample(4, 2, 256, 0.5, s).unwrap();
        for nd in &t.needles[1..] {
            counts[((nd.depth * BINS as f64) as usize).min(BINS - 1)] += 1;
            total += 1;
        }
    }
    let expect = total as f64 / BINS as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 99.9th percentile of χ² with 9 degrees of freedom
    assert!(chi2 < 27.88, "χ² = {chi2}, counts {counts:?}");
}

#[test]
fn corpus_repeats_raise_hit_rate() {
    let rate = |repeat: f64| {
        let spec = CorpusSpec { seed: 4, seq_len: 256, repeat, ngram: 2 };
        let hits: usize = (0..20).map(|i| ar_hit_labels(&spec.sequence(i), 2).iter().filter(|&&h| h).count()).sum();
        hits as f64 / (20.0 * 256.0)
    };
    assert_eq!(rate(0.0), 0.0);
    assert!(rate(0.3) > 0.3);
}

#[test]
fn generation_is_deterministic() {
    let a = generate_needle_sample(4, 2, 256, 0.25, 99).unwrap();
    let b = generate_needle_sample(4, 2, 256, 0.25, 99).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.context, generate_needle_sample(4, 2, 256, 0.25, 100).unwrap().context);
}
