use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime};
use ctxrec::checkpoint;
use ctxrec::cotstore::CoTStore;
use ctxrec::dataio::{self, Dataset, TimeRange};
use ctxrec::error::{Error, Result};
use ctxrec::metrics::MetricsReport;
use ctxrec::pipeline::{self, StoreConfig, StoreSummary};
use ctxrec::synth::{self, WorldConfig};
use ctxrec::textenc::TextEncoder;
use ctxrec::training::{EpochRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{AblateArgs, Cli, Command, EvaluateArgs, ModelArgs, PrepareArgs, StoreArgs, SynthArgs, TrainArgs};

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    let out = cli.output.as_path();
    match cli.command {
        Command::Synth(a) => synth_log(a, seed, out),
        Command::PrepareData(a) => prepare_data(a, seed, out),
        Command::BuildCotStore(a) => build_cot_store(a, cfg, seed, out),
        Command::Train(a) => train(a, cfg, out),
        Command::Evaluate(a) => evaluate(a, seed, out),
        Command::Ablate(a) => ablate(a, cfg, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn synth_log(a: SynthArgs, seed: u64, out: &Path) -> Result<()> {
    let mut world = WorldConfig::default();
    if let Some(u) = a.users {
        world.users = u;
    }
    if let Some(i) = a.items {
        world.items = i;
    }
    create_dir(out)?;
    let w = synth::generate(&world, seed)?;
    let path = out.join("interactions.jsonl");
    synth::write_log(&path, &w.interactions)?;
    println!("wrote {} interactions to {}", w.interactions.len(), path.display());
    Ok(())
}

fn parse_day(s: &str, time: NaiveTime) -> Result<i64> {
    let day = NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::Config(format!("bad date {s:?} (want YYYY-MM-DD): {e}")))?;
    Ok(day.and_time(time).and_utc().timestamp())
}

#[derive(Serialize)]
struct PrepareStats {
    #[serde(flatten)]
    stats: dataio::DatasetStats,
    malformed_lines: usize,
    filtered_by_time: usize,
    train_examples: usize,
    valid_examples: usize,
    test_examples: usize,
    seed: u64,
}

fn prepare_data(a: PrepareArgs, seed: u64, out: &Path) -> Result<()> {
    require(&a.input, "input log")?;
    let filter = match (&a.since, &a.until) {
        (None, None) => None,
        (since, until) => Some(TimeRange {
            start: since.as_deref().map_or(Ok(i64::MIN), |s| parse_day(s, NaiveTime::MIN))?,
            end: until.as_deref().map_or(Ok(i64::MAX), |s| {
                parse_day(s, NaiveTime::from_hms_opt(23, 59, 59).expect("valid time"))
            })?,
        }),
    };
    let loaded = dataio::load_interactions(&a.input, filter)?;
    let dataset = dataio::build_splits(&loaded.interactions)?.sample_negatives(seed)?;
    dataset.write_splits(out)?;
    let stats = PrepareStats {
        stats: dataset.stats(),
        malformed_lines: loaded.malformed,
        filtered_by_time: loaded.filtered,
        train_examples: dataset.split.train.len(),
        valid_examples: dataset.split.valid.len(),
        test_examples: dataset.split.test.len(),
        seed,
    };
    write_json(&out.join("stats.json"), &stats)?;
    let s = &stats.stats;
    println!(
        "users {} items {} reviews {} sparsity {:.4}% (dropped {} users, {} malformed lines)",
        s.users, s.items, s.reviews, s.sparsity_pct, s.dropped_users, loaded.malformed
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    config: StoreConfig,
    summary: StoreSummary,
}

fn build_cot_store(a: StoreArgs, mut cfg: RunConfig, seed: u64, out: &Path) -> Result<()> {
    require(&a.data, "data directory")?;
    let o = &mut cfg.store;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field.clone() { o.$field = v; })* };
    }
    set!(ratio, provider, lambda, noise, encoder, d_text);
    if a.cot_pack.is_some() {
        o.cot_pack = a.cot_pack.clone();
    }
    if a.cot_texts.is_some() {
        o.cot_texts = a.cot_texts.clone();
    }
    if a.encoder_pack.is_some() {
        o.encoder_pack = a.encoder_pack.clone();
    }
    if a.lists.is_some() {
        o.lists = a.lists;
    }
    let store_cfg = cfg.store.to_store_config(seed)?;
    let dataset = Dataset::read_splits(&a.data)?;
    let (store, summary) = pipeline::build_store(&dataset.split.train, &store_cfg)?;
    store.write(out)?;
    write_json(
        &out.join("meta.json"),
        &StoreMeta {
            config: store_cfg,
            summary: summary.clone(),
        },
    )?;
    println!("{}", summary.line());
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    store: CoTStore,
    encoder: Box<dyn TextEncoder>,
    meta: StoreMeta,
}

fn load_inputs(data: &Path, store_dir: &Path) -> Result<Loaded> {
    require(data, "data directory")?;
    require(store_dir, "store directory")?;
    let dataset = Dataset::read_splits(data)?;
    let meta: StoreMeta = read_json(&store_dir.join("meta.json"))?;
    let records = CoTStore::read(store_dir, &dataset.split.train)?;
    let store = CoTStore::build(records)?.with_inverted_lists(meta.config.lists, meta.config.seed);
    let encoder = meta.config.encoder.build()?;
    Ok(Loaded {
        dataset,
        store,
        encoder,
        meta,
    })
}

fn apply_overrides(cfg: &mut TrainConfig, m: &ModelArgs) {
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = m.$field.clone() { cfg.$field = v; })* };
    }
    set!(task, variant, backbone, alpha, lr, batch_size, max_epochs, patience);
    if m.probes.is_some() {
        cfg.probes = m.probes;
    }
    if m.clip_norm.is_some() {
        cfg.clip_norm = m.clip_norm;
    }
}

#[derive(Serialize, Deserialize)]
struct RunReport {
    report: MetricsReport,
    best_epoch: usize,
    checkpoint_sha256: String,
    leakage_violations: usize,
    store: StoreSummary,
}

/// Trains one configuration into `dir`: config snapshot first, then the
/// per-epoch log, the best checkpoint and the final report.
fn train_into(dir: &Path, cfg: &TrainConfig, inputs: &Loaded) -> Result<RunReport> {
    create_dir(dir)?;
    let snapshot = serde_json::to_value(cfg).map_err(|e| Error::Data(e.to_string()))?;
    write_json(&dir.join("config.json"), &snapshot)?;
    cfg.validate()?;

    let log_path = dir.join("metrics.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let result = pipeline::run(&inputs.dataset, &inputs.store, inputs.encoder.as_ref(), cfg, |r: &EpochRecord| {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid {:.4}{}",
            r.epoch,
            r.train.total,
            r.valid_metric,
            if r.improved { "  *" } else { "" }
        );
        Ok(())
    })?;
    drop(log);

    let model = &result.outcome.model;
    checkpoint::save(&dir.join("checkpoint.bin"), model)?;
    let report = pipeline::report(
        &result.test,
        cfg.task,
        &cfg.variant.to_string(),
        "test",
        cfg.seed,
        None,
        snapshot,
    )?;
    let run = RunReport {
        report,
        best_epoch: result.outcome.best_epoch,
        checkpoint_sha256: checkpoint::hash(model)?,
        leakage_violations: result.outcome.leakage_violations + result.test_leakage_violations,
        store: inputs.meta.summary.clone(),
    };
    write_json(&dir.join("report.json"), &run)?;
    Ok(run)
}

fn train(a: TrainArgs, mut cfg: RunConfig, out: &Path) -> Result<()> {
    apply_overrides(&mut cfg.train, &a.model);
    if let Some(k) = a.k {
        cfg.train.k = k;
    }
    let inputs = load_inputs(&a.model.data, &a.model.store)?;
    cfg.train.model.d_text = inputs.store.dim();
    let run = train_into(out, &cfg.train, &inputs)?;
    print_report(&run.report);
    Ok(())
}

fn print_report(r: &MetricsReport) {
    let mut parts = vec![format!("{} {} {}", r.variant, r.task, r.split)];
    if let Some(auc) = r.auc {
        parts.push(format!("auc {auc:.4}"));
    }
    if let Some(ll) = r.logloss {
        parts.push(format!("logloss {ll:.4}"));
    }
    if let Some(ri) = r.relaimpr_pct {
        parts.push(format!("relaimpr {ri:.3}%"));
    }
    for (k, v) in &r.hit {
        parts.push(format!("hit@{k} {v:.4}"));
    }
    for (k, v) in &r.ndcg {
        parts.push(format!("ndcg@{k} {v:.4}"));
    }
    println!("{}", parts.join("  "));
}

fn evaluate(a: EvaluateArgs, seed: u64, out: &Path) -> Result<()> {
    require(&a.checkpoint, "checkpoint")?;
    let model = checkpoint::load(&a.checkpoint)?;
    let inputs = load_inputs(&a.data, &a.store)?;
    let examples = match a.split.as_str() {
        "train" => &inputs.dataset.split.train,
        "valid" => &inputs.dataset.split.valid,
        _ => &inputs.dataset.split.test,
    };
    let eval = pipeline::evaluate_model(&inputs.dataset, examples, &inputs.store, inputs.encoder.as_ref(), &model)?;
    let config = serde_json::to_value(&model.config).map_err(|e| Error::Data(e.to_string()))?;
    let report = pipeline::report(
        &eval,
        model.config.task,
        &model.config.variant.to_string(),
        &a.split,
        seed,
        a.base_auc,
        config,
    )?;
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    cell: String,
    k: usize,
    variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    best: bool,
}

fn ablate(a: AblateArgs, mut cfg: RunConfig, out: &Path) -> Result<()> {
    apply_overrides(&mut cfg.train, &a.model);
    if let Some(ks) = a.ks {
        cfg.ablate.ks = ks;
    }
    if a.no_unbalanced_cell {
        cfg.ablate.unbalanced_cell = false;
    }
    let inputs = load_inputs(&a.model.data, &a.model.store)?;
    cfg.train.model.d_text = inputs.store.dim();
    create_dir(out)?;
    let mut rows = Vec::new();
    for cell in pipeline::ablation_grid(&cfg.ablate.ks, cfg.ablate.unbalanced_cell) {
        let mut c = cfg.train.clone();
        c.k = cell.k;
        c.variant = cell.variant;
        let dir: PathBuf = out.join(&cell.name);
        eprintln!("cell {}", cell.name);
        let (metric, error) = match train_into(&dir, &c, &inputs) {
            Ok(run) => (Some(headline(&run.report)), None),
            Err(e) => {
                eprintln!("cell {} failed: {e}", cell.name);
                (None, Some(e.to_string()))
            }
        };
        rows.push(AblationRow {
            cell: cell.name,
            k: cell.k,
            variant: cell.variant.to_string(),
            metric,
            error,
            best: false,
        });
    }
    // first maximum wins
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.metric.map(|m| (i, m)))
        .fold(None::<(usize, f64)>, |acc, (i, m)| match acc {
            Some((_, b)) if b >= m => acc,
            _ => Some((i, m)),
        });
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    let metric_name = if cfg.train.task == ctxrec::training::Task::Retrieval { "ndcg@10" } else { "auc" };
    println!("{:<8} {:>3} {:<12} {:>10}", "cell", "k", "variant", metric_name);
    for r in &rows {
        let value = r.metric.map_or_else(|| "failed".to_string(), |m| format!("{m:.4}"));
        println!(
            "{:<8} {:>3} {:<12} {:>10}{}",
            r.cell,
            r.k,
            r.variant,
            value,
            if r.best { "  *" } else { "" }
        );
    }
    write_json(&out.join("ablation.json"), &serde_json::json!({ "metric": metric_name, "rows": rows }))
}

/// AUC for ranking, NDCG@10 for retrieval.
fn headline(r: &MetricsReport) -> f64 {
    r.auc.or_else(|| r.ndcg.get(&10).copied()).unwrap_or(f64::NAN)
}
