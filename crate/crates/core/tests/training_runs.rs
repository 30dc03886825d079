use dint_core::analysis::{attention_scores, row_sum_audit};
use dint_core::attention::AttentionKind;
use dint_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dint_core::config::{LossTargets, ModelConfig, RunConfig, TaskConfig, TaskKind, TrainConfig};
use dint_core::model::Model;
use dint_core::tasks::generate_needle_sample;
use dint_core::training::train;
use tempfile::TempDir;

fn tiny(arch: AttentionKind, kind: TaskKind) -> RunConfig {
    RunConfig {
        model: ModelConfig { arch, d_model: 16, d: 4, heads: 2, max_seq_len: 64, ..ModelConfig::default() },
        train: TrainConfig { batch: 2, warmup: 2, eval_every: 3, eval_size: 2, ..TrainConfig::default() },
        task: TaskConfig { kind, seq_len: 48, loss: LossTargets::All, ..TaskConfig::default() },
    }
}

#[test]
fn same_seed_same_bytes() {
    for arch in [AttentionKind::Vanilla, AttentionKind::Diff, AttentionKind::Dint] {
        let cfg = tiny(arch, TaskKind::Needle);
        let a = train(&cfg, 7, 6, |_, _| {}).unwrap();
        let b = train(&cfg, 7, 6, |_, _| {}).unwrap();
        assert_eq!(a.report.to_csv("x"), b.report.to_csv("x"));
        assert_eq!(a.report.eval_csv("x"), b.report.eval_csv("x"));
        let bytes = |m: &Model<f32>| Checkpoint::from_model(m, vec![]).to_bytes();
        assert_eq!(bytes(&a.last), bytes(&b.last));
        assert_eq!(bytes(&a.best), bytes(&b.best));
        let c = train(&cfg, 8, 6, |_, _| {}).unwrap();
        assert_ne!(bytes(&a.last), bytes(&c.last));
    }
}

#[test]
fn slice_partition_recombines() {
    let cfg = tiny(AttentionKind::Dint, TaskKind::Corpus);
    let out = train(&cfg, 1, 4, |_, _| {}).unwrap();
    for r in &out.report.steps {
        assert!((r.slices.recombined() - r.loss).abs() < 1e-9);
        assert!(r.row_sum_max_dev < 1e-5);
        assert!(r.ar_hit_loss.is_some() && r.others_loss.is_some());
    }
    for e in &out.report.evals {
        assert!((e.slices.recombined() - e.valid).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_restores_identical_logits() {
    let cfg = tiny(AttentionKind::Dint, TaskKind::Needle);
    let out = train(&cfg, 3, 3, |_, _| {}).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&out.last, vec![("note".into(), "x".into())], &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    let tokens: Vec<usize> = (0..40).map(|i| 32 + i % 90).collect();
    let (a, _) = out.last.logits(&tokens, false).unwrap();
    let (b, _) = back.logits(&tokens, false).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn analysis_on_trained_models_is_consistent() {
    let task = generate_needle_sample(4, 2, 64, 0.5, 5).unwrap();
    for arch in [AttentionKind::Vanilla, AttentionKind::Diff, AttentionKind::Dint] {
        let out = train(&tiny(arch, TaskKind::Needle), 2, 3, |_, _| {}).unwrap();
        let rep = attention_scores(&out.last, &task, None).unwrap();
        let (ans, noise) = (rep.attention_to_answer(), rep.attention_noise());
        assert!((0.0..=1.0).contains(&ans) && (0.0..=1.0).contains(&noise) && ans + noise <= 1.0 + 1e-9);
        let audit = row_sum_audit(&out.last, &[task.context.clone()]).unwrap();
        assert!(audit.max_dev < 1e-5, "{arch:?}: {}", audit.max_dev);
    }
}
