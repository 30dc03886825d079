use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dint_core::analysis::{self, AccuracyGrid, GridSpec, SpanMass};
use dint_core::attention::{AttentionKind, LambdaInit};
use dint_core::checkpoint::Checkpoint;
use dint_core::config::{LossTargets, RunConfig, TaskKind};
use dint_core::gradcheck::{self, GradcheckConfig};
use dint_core::model::Model;
use dint_core::tasks::{self, NeedleTask};
use dint_core::training::{self, TrainOutcome};
use dint_core::OpKind;
use serde_json::json;

use crate::manifest::{write_file, Manifest};
use crate::{
    AblateArgs, AnalyzeArgs, Failure, GradcheckArgs, NeedleArgs, TasksArgs, TrainArgs, EXIT_CONFIG, EXIT_GRADCHECK,
    OUT_DIR_ENV,
};

fn out_dir(arg: Option<PathBuf>) -> Result<PathBuf, Failure> {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => arg.ok_or_else(|| Failure::new(EXIT_CONFIG, format!("--out is required unless {OUT_DIR_ENV} is set"))),
    }
}

fn load_config(path: Option<&Path>, base: RunConfig) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| {
        let f = Failure::from(e);
        Failure::new(f.code, format!("{}: {}", path.display(), f.msg))
    })
}

fn save_model(model: &Model<f32>, path: &Path, manifest: &Manifest, extra: &[(&str, String)]) -> Result<(), Failure> {
    let mut meta = vec![("manifest".to_string(), manifest.hash().to_string())];
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Checkpoint::from_model(model, meta).save(path)?;
    Ok(())
}

fn run_training(cfg: &RunConfig, seed: u64, steps: usize, label: &str) -> Result<TrainOutcome, Failure> {
    Ok(training::train(cfg, seed, steps, |_, eval| {
        if let Some(e) = eval {
            eprintln!("{label} step {:>6}  valid {:.4}", e.step, e.valid);
        }
    })?)
}

/// Report, eval CSV, best and last checkpoints and a JSON summary.
fn write_run(dir: &Path, out: &TrainOutcome, manifest: &Manifest) -> Result<(), Failure> {
    let r = &out.report;
    let tag = manifest.hash();
    write_file(&dir.join("report.csv"), r.to_csv(tag))?;
    write_file(&dir.join("eval.csv"), r.eval_csv(tag))?;
    save_model(&out.best, &dir.join("checkpoint.bin"), manifest, &[("best_step", r.best_step.to_string())])?;
    save_model(&out.last, &dir.join("last.bin"), manifest, &[("step", r.steps.len().to_string())])?;
    let summary = json!({
        "manifest": tag,
        "seed": r.seed,
        "config_hash": r.config_hash,
        "tokens_per_step": r.tokens_per_step,
        "steps": r.steps.len(),
        "best_step": r.best_step,
        "final_loss": r.steps.last().map(|s| s.loss),
        "best_valid": r.evals.iter().map(|e| e.valid).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v)))),
        "wall_clock_secs": r.wall_clock_secs,
    });
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref(), RunConfig::default())?;
    if let Some(arch) = a.arch {
        cfg.model.arch = arch;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.model.seed = a.seed;
    cfg.validate().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let dir = out_dir(a.out)?;
    let args = json!({ "arch": cfg.model.arch.name(), "steps": cfg.train.steps });
    let manifest = Manifest::new("train", Some(&cfg), a.seed, args, &dir);
    manifest.write()?;

    let steps = cfg.train.steps;
    let out = run_training(&cfg, a.seed, steps, cfg.model.arch.name())?;
    if steps == 0 {
        return save_model(&out.best, &dir.join("checkpoint.bin"), &manifest, &[("best_step", "0".into())]);
    }
    write_run(&dir, &out, &manifest)?;
    let best = out.report.evals.iter().map(|e| e.valid).fold(f64::INFINITY, f64::min);
    println!("trained {} for {steps} steps; best valid {best:.4} at step {}", cfg.model.arch, out.report.best_step);
    Ok(())
}

fn model_labels(cks: &[Checkpoint]) -> Vec<String> {
    let names: Vec<&str> = cks.iter().map(|c| c.config.arch.name()).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if names.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}#{i}")
            } else {
                n.to_string()
            }
        })
        .collect()
}

pub fn needle(a: NeedleArgs) -> Result<(), Failure> {
    let dir = out_dir(a.out)?;
    if a.samples == 0 || a.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Failure::new(EXIT_CONFIG, "--samples must be positive and depths within [0, 1]"));
    }
    let args = json!({
        "checkpoints": a.checkpoints,
        "needles": a.needles,
        "queries": a.queries,
        "ctx_len": a.ctx_len,
        "depths": a.depths,
        "samples": a.samples,
    });
    let manifest = Manifest::new("needle", None, a.seed, args, &dir);
    manifest.write()?;

    let cks = a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    let longest = a.ctx_len.iter().copied().max().unwrap_or(0);
    for (p, c) in a.checkpoints.iter().zip(&cks) {
        if c.config.max_seq_len < longest {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("{} accepts at most {} tokens, grid asks for {longest}", p.display(), c.config.max_seq_len),
            ));
        }
    }
    let labels = model_labels(&cks);
    let models = cks.into_iter().map(|c| c.into_model::<f32>()).collect::<Result<Vec<_>, _>>()?;
    let named: Vec<(String, &Model<f32>)> = labels.iter().cloned().zip(models.iter()).collect();
    let spec = GridSpec {
        needles: a.needles.clone(),
        queries: a.queries.clone(),
        ctx_lens: a.ctx_len.clone(),
        depths: a.depths.clone(),
        samples: a.samples,
        seed: a.seed,
    };
    let grid = analysis::accuracy_grid(&named, &spec)?;
    write_grid(&dir, &grid, &labels, &manifest)?;
    for (n, r, ctx) in &grid.skipped {
        eprintln!("skipped N={n} R={r} ctx={ctx}: not generable");
    }
    print!("{}", grid.table_csv());
    Ok(())
}

fn write_grid(dir: &Path, grid: &AccuracyGrid, labels: &[String], manifest: &Manifest) -> Result<(), Failure> {
    let tag = manifest.csv_tag();
    write_file(&dir.join("grid.csv"), tag.clone() + &grid.to_csv())?;
    write_file(&dir.join("table.csv"), tag.clone() + &grid.table_csv())?;
    let mut combos: Vec<(usize, usize)> = grid.cells.iter().map(|c| (c.needles, c.queries)).collect();
    combos.dedup();
    for label in labels {
        for &(n, r) in &combos {
            let name = format!("depth_{}_n{n}_r{r}.csv", label.replace('#', "_"));
            write_file(&dir.join(name), tag.clone() + &grid.depth_matrix_csv(label, n, r))?;
        }
    }
    Ok(())
}

fn mass_cols(m: &SpanMass) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", m.answer_abs, m.noise_abs, m.answer_signed, m.noise_signed)
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let dir = out_dir(a.out)?;
    let args = json!({
        "checkpoint": a.checkpoint,
        "task": a.task,
        "capture": a.capture,
        "layer": a.layer,
    });
    let manifest = Manifest::new("analyze", None, 0, args, &dir);
    manifest.write()?;

    let ck = load_checkpoint(&a.checkpoint)?;
    let file = File::open(&a.task).map_err(|e| Failure::io(&a.task, e))?;
    let tasks: Vec<NeedleTask> = tasks::read_tasks_jsonl(BufReader::new(file))?;
    if tasks.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, format!("{} holds no tasks", a.task.display())));
    }
    let model: Model<f32> = ck.into_model()?;

    let tag = manifest.csv_tag();
    let cols = "answer_abs,noise_abs,answer_signed,noise_signed";
    let mut scores = format!("{tag}task,depth,layer,{cols}\n");
    let mut heads = format!("{tag}task,layer,head,{cols}\n");
    let mut by_depth: BTreeMap<String, (f64, SpanMass, usize)> = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut index = format!("{tag}task,layer,head,name,offset,rows,cols\n");
    for (i, task) in tasks.iter().enumerate() {
        task.check()?;
        let (_, traces) = model.logits(&task.context, true)?;
        let report = analysis::scores_from_traces(&traces, task, a.layer)?;
        let _ = writeln!(scores, "{i},{},{},{}", task.depth, report.layer, mass_cols(&report.mass));
        for h in &report.heads {
            let _ = writeln!(heads, "{i},{},{},{}", h.layer, h.head, mass_cols(&h.mass));
        }
        let e = by_depth.entry(format!("{}", task.depth)).or_insert((task.depth, SpanMass::default(), 0));
        e.1.answer_abs += report.mass.answer_abs;
        e.1.noise_abs += report.mass.noise_abs;
        e.1.answer_signed += report.mass.answer_signed;
        e.1.noise_signed += report.mass.noise_signed;
        e.2 += 1;
        if a.capture {
            let base = blocks.len() as u64;
            for entry in analysis::dump_matrices(&traces, &mut blocks)? {
                let _ = writeln!(
                    index,
                    "{i},{},{},{},{},{},{}",
                    entry.layer,
                    entry.head,
                    entry.name,
                    base + entry.offset,
                    entry.shape[0],
                    entry.shape[1]
                );
            }
        }
    }
    let mut depth_csv = format!("{tag}depth,samples,{cols}\n");
    let mut depths: Vec<_> = by_depth.into_values().collect();
    depths.sort_by(|x, y| x.0.total_cmp(&y.0));
    for (d, m, n) in &depths {
        let k = 1.0 / *n as f64;
        let mean = SpanMass {
            answer_abs: m.answer_abs * k,
            noise_abs: m.noise_abs * k,
            answer_signed: m.answer_signed * k,
            noise_signed: m.noise_signed * k,
        };
        let _ = writeln!(depth_csv, "{d},{n},{}", mass_cols(&mean));
    }

    let contexts: Vec<Vec<usize>> = tasks.iter().map(|t| t.context.clone()).collect();
    let audit = analysis::row_sum_audit(&model, &contexts)?;
    let mut audit_csv = format!("{tag}layer,lambda,gamma,expected_row_sum,min,max,mean,max_dev,rows\n");
    for l in &audit.layers {
        let _ = writeln!(
            audit_csv,
            "{},{},{},{},{},{},{},{:e},{}",
            l.layer,
            opt(l.lambda),
            opt(l.gamma),
            l.expected_row_sum,
            l.stats.min,
            l.stats.max,
            l.stats.mean,
            l.stats.max_dev,
            l.stats.rows
        );
    }

    write_file(&dir.join("scores.csv"), scores)?;
    write_file(&dir.join("scores_by_depth.csv"), depth_csv)?;
    write_file(&dir.join("heads.csv"), heads)?;
    write_file(&dir.join("audit.csv"), audit_csv)?;
    write_file(&dir.join("normalization.txt"), format!("{tag}{}\n", analysis::SCORE_NORMALIZATION))?;
    if a.capture {
        write_file(&dir.join("matrices.bin"), &blocks)?;
        write_file(&dir.join("matrices.csv"), index)?;
    }
    println!("{} tasks; row-sum audit max deviation {:e} over {} rows", tasks.len(), audit.max_dev, audit.rows);
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown op `{name}`")))?,
        ),
    };
    let base = RunConfig { model: gradcheck::toy_model(), ..RunConfig::default() };
    let cfg = load_config(a.config.as_deref(), base)?;
    let gc = GradcheckConfig {
        points: a.points,
        tolerance: a.tolerance,
        seed: a.seed,
        model: cfg.model,
        fault,
        ..GradcheckConfig::default()
    };
    let manifest = match out_dir(a.out) {
        Ok(dir) => {
            let args = json!({ "tolerance": a.tolerance, "points": a.points, "inject_fault": a.inject_fault });
            let m = Manifest::new("gradcheck", Some(&cfg), a.seed, args, &dir);
            m.write()?;
            Some(m)
        }
        Err(_) => None,
    };
    let report = gradcheck::run(&gc)?;
    print!("{}", report.to_csv());
    if let Some(m) = &manifest {
        write_file(&m.out_dir.join("gradcheck.csv"), m.csv_tag() + &report.to_csv())?;
    }
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> =
        report.failures().iter().map(|c| format!("{} (max rel-err {:.3e})", c.name, c.max_rel_err)).collect();
    let mut msg = format!("gradient check failed for {}", failed.join(", "));
    if let Some(op) = fault {
        let _ = write!(msg, "; backward of op `{op}` was corrupted");
    }
    Err(Failure::new(EXIT_GRADCHECK, msg))
}

/// Applies an ablation variant to `base`.
pub fn variant_config(name: &str, base: &RunConfig) -> Result<RunConfig, Failure> {
    let norm = name.trim().replace('−', "-").replace('λ', "lambda").to_lowercase();
    let mut cfg = *base;
    cfg.model.arch = AttentionKind::Dint;
    match norm.as_str() {
        "dint" => {}
        "dint-groupnorm" => cfg.model.headwise_norm = false,
        _ => {
            let value = norm
                .strip_prefix("dint-lambda")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| *v > 0.0 && *v < 1.0)
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown ablation variant `{name}`")))?;
            cfg.model.lambda_init = LambdaInit::Constant(value);
        }
    }
    Ok(cfg)
}

/// Default ablation data: the byte corpus scored on every token.
pub fn ablation_base() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.kind = TaskKind::Corpus;
    cfg.task.loss = LossTargets::All;
    cfg
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let mut base = load_config(a.config.as_deref(), ablation_base())?;
    if let Some(steps) = a.steps {
        base.train.steps = steps;
    }
    base.model.seed = a.seed;
    let variants = a.variants.iter().map(|v| Ok((v.clone(), variant_config(v, &base)?))).collect::<Result<Vec<_>, Failure>>()?;
    for (_, cfg) in &variants {
        cfg.validate().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    }
    let dir = out_dir(a.out)?;
    let args = json!({ "variants": a.variants, "steps": base.train.steps, "shared_seed": a.seed });
    let manifest = Manifest::new("ablate", Some(&base), a.seed, args, &dir);
    manifest.write()?;

    let tag = manifest.csv_tag();
    let mut table = format!("{tag}variant,valid,ar_hit,others\n");
    let mut slices = format!("{tag}variant,step,valid,ar_hit,others,ar_hit_tokens,others_tokens,recombined\n");
    for (name, cfg) in &variants {
        let out = run_training(cfg, a.seed, cfg.train.steps, name)?;
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Failure::io(&sub, e))?;
        write_run(&sub, &out, &manifest)?;
        let best = out
            .report
            .evals
            .iter()
            .find(|e| e.step == out.report.best_step)
            .copied()
            .map(Ok)
            .unwrap_or_else(|| training::evaluate(&out.best, &cfg.task, a.seed, cfg.train.eval_size, 0))?;
        let s = best.slices;
        let _ = writeln!(table, "{name},{},{},{}", best.valid, opt(best.ar_hit), opt(best.others));
        let _ = writeln!(
            slices,
            "{name},{},{},{},{},{},{},{}",
            best.step,
            best.valid,
            opt(best.ar_hit),
            opt(best.others),
            s.hit_count,
            s.other_count,
            s.recombined()
        );
    }
    write_file(&dir.join("ablation.csv"), &table)?;
    write_file(&dir.join("ablation_slices.csv"), slices)?;
    print!("{}", table.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n");
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn tasks(a: TasksArgs) -> Result<(), Failure> {
    let dir = out_dir(a.out)?;
    let args = json!({
        "needles": a.needles,
        "queries": a.queries,
        "ctx_len": a.ctx_len,
        "depths": a.depths,
        "samples": a.samples,
    });
    let manifest = Manifest::new("tasks", None, a.seed, args, &dir);
    manifest.write()?;
    let mut all = Vec::new();
    for (di, &depth) in a.depths.iter().enumerate() {
        for s in 0..a.samples {
            let seed = training::derive_seed(a.seed, 200 + di as u64, s as u64);
            let t = tasks::generate_needle_sample(a.needles, a.queries, a.ctx_len, depth, seed)
                .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
            all.push(t);
        }
    }
    let mut buf = manifest.csv_tag().into_bytes();
    tasks::write_tasks_jsonl(&mut buf, &all).map_err(|e| Failure::io(&dir, e))?;
    write_file(&dir.join("tasks.jsonl"), buf)?;
    println!("wrote {} tasks", all.len());
    Ok(())
}
