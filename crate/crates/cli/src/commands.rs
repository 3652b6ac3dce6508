use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use t3time::checkpoint::Checkpoint;
use t3time::config::{Ablation, ModelConfig};
use t3time::data::{few_shot_subset, split, synthetic_sinusoids, Normalization, SeriesTable, Windows};
use t3time::model::T3Time;
use t3time::optim::AdamWConfig;
use t3time::report::{horizon_table, mean_metrics, render_table, KvReport, MetricRow};
use t3time::store::{checksum_bytes, PromptEmbeddingStore};
use t3time::train::{evaluate, forecasts, train, EmbeddingSource, EvalMetrics, Segment, TrainConfig, TrainOutcome};
use t3time::{Error, Result};

use crate::args::{parse_split, split_to_string, EmbSpec, EvalArgs, NormKind, RunArgs, RunConfig, SynthArgs};

/// Width of stub embeddings, matching the language-model hidden size.
const STUB_DIM: usize = 768;
const EVAL_BATCH: usize = 256;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::InsufficientData(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Format { .. } => 5,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn load_table(path: &Path) -> Result<SeriesTable> {
    if !path.is_file() {
        return Err(Error::Config(format!("data file {} not found", path.display())));
    }
    SeriesTable::load_csv(path)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Embedding sources for the three splits.
struct Sources {
    train: EmbeddingSource,
    val: EmbeddingSource,
    test: EmbeddingSource,
}

impl Sources {
    fn load(spec: &EmbSpec) -> Result<Self> {
        match spec {
            EmbSpec::Stub => {
                let s = EmbeddingSource::stub(STUB_DIM)?;
                Ok(Self {
                    train: s.clone(),
                    val: s.clone(),
                    test: s,
                })
            }
            EmbSpec::Store(dir) => {
                let read = |name: &str| -> Result<EmbeddingSource> {
                    let path = dir.join(format!("{name}.t3emb"));
                    let bytes = fs::read(&path)
                        .map_err(|e| Error::Config(format!("embedding store {}: {e}", path.display())))?;
                    Ok(EmbeddingSource::Store(PromptEmbeddingStore::from_bytes(&bytes)?))
                };
                let s = Self {
                    train: read("train")?,
                    val: read("val")?,
                    test: read("test")?,
                };
                if s.val.dim() != s.train.dim() || s.test.dim() != s.train.dim() {
                    return Err(Error::Data("embedding stores disagree on d_LLM".into()));
                }
                Ok(s)
            }
        }
    }

    fn for_split(&self, name: &str) -> Result<&EmbeddingSource> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected val or test)"))),
        }
    }
}

struct Run {
    model: T3Time<f32>,
    norm: Normalization,
    outcome: TrainOutcome,
    test: EvalMetrics,
    train_windows: usize,
    val_windows: usize,
}

fn run_one(cfg: &RunConfig, table: &SeriesTable, sources: &Sources, mcfg: &ModelConfig) -> Result<Run> {
    let (l, h) = (mcfg.seq_len, mcfg.pred_len);
    let splits = split(table, cfg.split, l)?;
    let train_table = match cfg.few_shot {
        Some(f) => few_shot_subset(&splits.train, f, l, h)?,
        None => splits.train.clone(),
    };
    let norm = match cfg.norm {
        NormKind::Instance => Normalization::Instance,
        NormKind::Global => Normalization::fit_global(&train_table)?,
    };
    let tw = Windows::new(&train_table, l, h);
    let vw = Windows::new(&splits.val, l, h);
    let sw = Windows::new(&splits.test, l, h);
    for w in [&tw, &sw] {
        if let Some(msg) = w.warning() {
            return Err(Error::InsufficientData(msg));
        }
    }
    let train_seg = Segment::new(tw, &sources.train)?;
    let val_seg = if vw.is_empty() {
        None
    } else {
        Some(Segment::new(vw, &sources.val)?)
    };
    let test_seg = Segment::new(sw, &sources.test)?;
    let mut model = T3Time::<f32>::new(mcfg)?;
    let tc = TrainConfig {
        optimizer: AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        batch_size: cfg.batch,
        max_epochs: cfg.epochs,
        max_steps: cfg.max_steps,
        patience: cfg.patience,
        seed: mcfg.seed,
        eval_batch: EVAL_BATCH,
    };
    let outcome = train(&mut model, &train_seg, val_seg.as_ref(), &norm, &tc)?;
    let test = evaluate(&model, &test_seg, &norm, EVAL_BATCH)?;
    Ok(Run {
        model,
        norm,
        outcome,
        test,
        train_windows: tw.len(),
        val_windows: vw.len(),
    })
}

fn record_run(report: &mut KvReport, key: &str, run: &Run) {
    let o = &run.outcome;
    report.push(format!("{key}.params"), run.model.parameter_count());
    report.push(format!("{key}.train_windows"), run.train_windows);
    report.push(format!("{key}.val_windows"), run.val_windows);
    report.push(format!("{key}.test_windows"), run.test.windows);
    report.push(format!("{key}.steps"), o.steps);
    report.push(format!("{key}.epochs"), o.epochs.len());
    if let Some(e) = o.best_epoch {
        report.push(format!("{key}.best_epoch"), e);
    }
    if let Some(v) = o.best_val_mse {
        report.push(format!("{key}.best_val_mse"), v);
    }
    report.push(format!("{key}.stopped_early"), o.stopped_early);
    if let Some(l) = o.losses.last() {
        report.push(format!("{key}.final_train_loss"), l);
    }
    push_metrics(report, key, &run.test);
}

fn push_metrics(report: &mut KvReport, key: &str, m: &EvalMetrics) {
    report.push(format!("{key}.mse"), m.mse);
    report.push(format!("{key}.mae"), m.mae);
    report.push(format!("{key}.mse_raw"), m.mse_raw);
    report.push(format!("{key}.mae_raw"), m.mae_raw);
}

fn report_header(cfg: &RunConfig, table: &SeriesTable, command: &str) -> KvReport {
    let mut r = KvReport::new();
    r.push("command", command);
    r.push("dataset", &cfg.dataset);
    r.push("steps_in_file", table.len());
    r.push("num_vars", table.num_vars());
    r.push("seq_len", cfg.seq_len);
    r.push("split", split_to_string(&cfg.split));
    r.push("normalization", if cfg.norm == NormKind::Global { "global" } else { "instance" });
    r.push("embeddings", &cfg.emb);
    r.push("early_stopping", cfg.patience.is_some());
    r.push("patience", cfg.patience.unwrap_or(0));
    r.push("seeds", cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    r.push("metric_scale", "normalized");
    r
}

fn finish_report(out: &Path, name: &str, report: &KvReport) -> Result<()> {
    write(&out.join(format!("{name}.txt")), report.render())?;
    write(&out.join(format!("{name}.json")), format!("{:#}\n", report.to_json()))
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

/// Resolves config, echoes it, then loads data and embeddings.
fn prepare(args: &RunArgs) -> Result<(RunConfig, SeriesTable, Sources)> {
    let cfg = RunConfig::resolve(args)?;
    write(&cfg.out.join("config.txt"), cfg.to_kv())?;
    let table = load_table(&cfg.data)?;
    let sources = Sources::load(&cfg.emb)?;
    Ok((cfg, table, sources))
}

pub fn train_cmd(args: &RunArgs) -> Result<String> {
    let (cfg, table, sources) = prepare(args)?;
    let mut report = report_header(&cfg, &table, "train");
    let mut rows = Vec::new();
    for &h in &cfg.horizons {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let mcfg = cfg.model_config(h, table.num_vars(), sources.train.dim(), seed)?;
            let run = run_one(&cfg, &table, &sources, &mcfg)?;
            progress(&format!(
                "horizon {h} seed {seed}: {} steps in {:.1}s, test mse {:.6} mae {:.6}",
                run.outcome.steps, run.outcome.seconds, run.test.mse, run.test.mae
            ));
            let mut ck = Checkpoint::new(run.model.clone());
            ck.set_normalization(&run.norm);
            ck.meta.insert("dataset".into(), cfg.dataset.clone());
            ck.meta.insert("emb".into(), cfg.emb.to_string());
            ck.meta.insert("split".into(), split_to_string(&cfg.split));
            let path = cfg.out.join(format!("h{h}")).join(format!("seed{seed}.t3ckpt"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            ck.save(&path)?;
            record_run(&mut report, &format!("run.h{h}.seed{seed}"), &run);
            runs.push(run.test);
        }
        let m = mean_metrics(&runs)?;
        push_metrics(&mut report, &format!("h{h}"), &m);
        rows.push((h, m));
    }
    let table_rows = horizon_table(&rows)?;
    let avg = table_rows.last().expect("average row");
    report.push("avg.mse", avg.mse);
    report.push("avg.mae", avg.mae);
    finish_report(&cfg.out, "report", &report)?;
    Ok(render_table("horizon", &table_rows, None))
}

pub fn ablate_cmd(args: &RunArgs) -> Result<String> {
    if args.ablate.is_some() {
        return Err(Error::Config("--ablate cannot be combined with the ablate command".into()));
    }
    let (cfg, table, sources) = prepare(args)?;
    let &[h] = cfg.horizons.as_slice() else {
        return Err(Error::Config(format!(
            "ablate runs a single horizon, got {:?}",
            cfg.horizons
        )));
    };
    let mut report = report_header(&cfg, &table, "ablate");
    report.push("pred_len", h);
    let mut rows = Vec::new();
    let mut params = Vec::new();
    for (i, (label, ablation)) in Ablation::variants().into_iter().enumerate() {
        let mut runs = Vec::new();
        let mut count = 0;
        for &seed in &cfg.seeds {
            let mut mcfg = cfg.model_config(h, table.num_vars(), sources.train.dim(), seed)?;
            mcfg.ablation = ablation;
            let run = run_one(&cfg, &table, &sources, &mcfg)?;
            progress(&format!("{label} seed {seed}: test mse {:.6}", run.test.mse));
            count = run.model.parameter_count();
            record_run(&mut report, &format!("variant{i}.seed{seed}"), &run);
            runs.push(run.test);
        }
        let m = mean_metrics(&runs)?;
        report.push(format!("variant{i}.label"), label);
        push_metrics(&mut report, &format!("variant{i}"), &m);
        rows.push(MetricRow::new(label, &m));
        params.push(count.to_string());
    }
    finish_report(&cfg.out, "ablation", &report)?;
    Ok(render_table("variant", &rows, Some(("params", &params))))
}

fn collect_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.extension().is_some_and(|e| e == "t3ckpt") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Checkpoint(format!("{} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::Checkpoint("no .t3ckpt files found".into()));
    }
    Ok(out)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<String> {
    let files = collect_checkpoints(&a.ckpts)?;
    let table = load_table(&a.data)?;
    let mut sources: BTreeMap<String, Sources> = BTreeMap::new();
    let mut by_horizon: BTreeMap<usize, Vec<EvalMetrics>> = BTreeMap::new();
    let mut report = KvReport::new();
    report.push("command", "eval");
    report.push("split", &a.split);
    report.push("metric_scale", "normalized");
    let mut csv = String::from("checkpoint,window,step,variable,forecast,target\n");
    for (i, path) in files.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let mc = ck.model.config();
        if let Some(h) = a.pred_len {
            if h != mc.pred_len {
                return Err(Error::Checkpoint(format!(
                    "{} forecasts {} steps, --pred-len asks for {h}",
                    path.display(),
                    mc.pred_len
                )));
            }
        }
        if table.num_vars() != mc.num_vars {
            return Err(Error::Checkpoint(format!(
                "{} was trained on {} variables, data has {}",
                path.display(),
                mc.num_vars,
                table.num_vars()
            )));
        }
        let split_spec = ck
            .meta
            .get("split")
            .ok_or_else(|| Error::Checkpoint(format!("{} does not record its split", path.display())))?;
        let split_spec = parse_split(split_spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let emb = match &a.emb {
            Some(e) => e.clone(),
            None => ck.meta.get("emb").cloned().unwrap_or_else(|| "stub".into()),
        };
        if !sources.contains_key(&emb) {
            sources.insert(emb.clone(), Sources::load(&EmbSpec::parse(&emb)?)?);
        }
        let source = sources[&emb].for_split(&a.split)?;
        if source.dim() != mc.llm_dim {
            return Err(Error::Checkpoint(format!(
                "{} expects {}-wide embeddings, source has {}",
                path.display(),
                mc.llm_dim,
                source.dim()
            )));
        }
        let splits = split(&table, split_spec, mc.seq_len)?;
        let seg_table = if a.split == "val" { &splits.val } else { &splits.test };
        let windows = Windows::new(seg_table, mc.seq_len, mc.pred_len);
        let seg = Segment::new(windows, source)?;
        let norm = ck.normalization()?;
        let m = evaluate(&ck.model, &seg, &norm, EVAL_BATCH)?;
        let key = format!("ckpt{i}");
        report.push(format!("{key}.path"), path.display());
        report.push(format!("{key}.pred_len"), mc.pred_len);
        report.push(format!("{key}.seed"), mc.seed);
        report.push(format!("{key}.windows"), m.windows);
        push_metrics(&mut report, &key, &m);
        by_horizon.entry(mc.pred_len).or_default().push(m);
        if a.forecasts.is_some() {
            let (pred, target) = forecasts(&ck.model, &seg, &norm, EVAL_BATCH)?;
            let (lp, n) = (mc.pred_len, mc.num_vars);
            for (k, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
                let (w, step, var) = (k / (lp * n), (k / n) % lp, k % n);
                let _ = writeln!(csv, "{i},{w},{step},{var},{p},{t}");
            }
        }
    }
    let mut rows = Vec::new();
    for (h, runs) in &by_horizon {
        let m = mean_metrics(runs)?;
        push_metrics(&mut report, &format!("h{h}"), &m);
        rows.push((*h, m));
    }
    let table_rows = horizon_table(&rows)?;
    let avg = table_rows.last().expect("average row");
    report.push("avg.mse", avg.mse);
    report.push("avg.mae", avg.mae);
    if let Some(out) = &a.out {
        finish_report(out, "eval", &report)?;
    }
    if let Some(path) = &a.forecasts {
        write(path, csv)?;
    }
    Ok(render_table("horizon", &table_rows, None))
}

fn norm2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn emb_info_cmd(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let store = PromptEmbeddingStore::from_bytes(&bytes)?;
    let mut r = KvReport::new();
    r.push("path", path.display());
    r.push("magic", "T3EMB");
    r.push("version", t3time::store::VERSION);
    r.push("windows", store.num_windows());
    r.push("vars", store.num_vars());
    r.push("dim", store.dim());
    r.push("bytes", bytes.len());
    r.push("sha256", checksum_bytes(&bytes));
    if store.num_windows() > 0 && store.num_vars() > 0 {
        let last = (store.num_windows() - 1, store.num_vars() - 1);
        r.push("first_norm", norm2(store.lookup(0, 0)?));
        r.push("last_norm", norm2(store.lookup(last.0, last.1)?));
    }
    Ok(r.render())
}

pub fn synth_cmd(a: &SynthArgs) -> Result<String> {
    if a.vars == 0 || a.len == 0 {
        return Err(Error::Config("--vars and --len must be positive".into()));
    }
    let table = synthetic_sinusoids(a.vars, a.len, a.seed);
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    table.write_csv(&a.out)?;
    Ok(format!("wrote {} steps x {} variables to {}\n", a.len, a.vars, a.out.display()))
}
