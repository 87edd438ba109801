//! End-to-end steps shared by the command-line tool and the tests:
//! store construction, query encoding, training and evaluation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbones::FieldSchema;
use crate::cotstore::{self, CoTStore, CotProvider, FileCot, RetrievalConfig, SyntheticCot};
use crate::dataio::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, REPORT_SCHEMA};
use crate::textenc::{EncoderSpec, HashingEncoder, TextEmbedding, TextEncoder};
use crate::training::{self, Evaluation, Model, Prepared, Task, TrainConfig, TrainOutcome, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Synthetic {
        seed: u64,
        signal: f64,
        noise: f64,
    },
    File {
        pack: PathBuf,
        texts: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    pub ratio: f64,
    pub seed: u64,
    pub provider: ProviderSpec,
    pub encoder: EncoderSpec,
    /// Inverted-list count for approximate search; `None` picks `sqrt(M)`.
    pub lists: Option<usize>,
}

impl StoreConfig {
    pub fn synthetic(seed: u64, signal: f64) -> Self {
        Self {
            ratio: 0.1,
            seed,
            provider: ProviderSpec::Synthetic {
                seed,
                signal,
                noise: 0.1,
            },
            encoder: EncoderSpec::default(),
            lists: None,
        }
    }

    pub fn build_provider(&self) -> Result<Box<dyn CotProvider>> {
        Ok(match &self.provider {
            ProviderSpec::Synthetic { seed, signal, noise } => {
                // the feature hash shares the key encoder's seed and width
                let (hash_seed, dim) = match &self.encoder {
                    EncoderSpec::Synthetic { seed, dim } => (*seed, *dim),
                    EncoderSpec::File { .. } => (*seed, self.encoder.build()?.dim()),
                };
                Box::new(SyntheticCot::new(*seed, *signal, *noise, HashingEncoder::new(hash_seed, dim)?)?)
            }
            ProviderSpec::File { pack, texts } => Box::new(FileCot::load(pack, texts.as_deref())?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub train_examples: usize,
    pub records: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl StoreSummary {
    pub fn line(&self) -> String {
        format!(
            "store: M = {} of N = {} training examples ({} positive, {} negative, imbalance {:+})",
            self.records,
            self.train_examples,
            self.positives,
            self.negatives,
            self.positives as i64 - self.negatives as i64
        )
    }
}

/// Samples the in-context pool from the training split and builds the index.
pub fn build_store(train: &[Example], cfg: &StoreConfig) -> Result<(CoTStore, StoreSummary)> {
    let subset = cotstore::sample_subset(train, cfg.ratio, cfg.seed)?;
    let provider = cfg.build_provider()?;
    let encoder = cfg.encoder.build()?;
    let records = cotstore::build_records(&subset, provider.as_ref(), encoder.as_ref())?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    let summary = StoreSummary {
        train_examples: train.len(),
        records: records.len(),
        positives,
        negatives: records.len() - positives,
    };
    let store = CoTStore::build(records)?.with_inverted_lists(cfg.lists, cfg.seed);
    Ok((store, summary))
}

/// Examples used by a task: all labelled examples for ranking, positives
/// only for retrieval.
pub fn task_examples(examples: &[Example], task: Task) -> Vec<Example> {
    match task {
        Task::Ranking => examples.to_vec(),
        Task::Retrieval => examples.iter().filter(|e| e.label == 1).cloned().collect(),
    }
}

/// Query text embeddings; the retrieval task hides the target item.
pub fn encode_queries(
    dataset: &Dataset,
    examples: &[Example],
    encoder: &dyn TextEncoder,
    task: Task,
) -> Result<Vec<TextEmbedding>> {
    examples
        .iter()
        .map(|ex| match task {
            Task::Ranking => encoder.encode(&ex.text),
            Task::Retrieval => encoder.encode(&dataset.render_masked(ex)),
        })
        .collect()
}

pub struct SplitData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl SplitData {
    pub fn new(dataset: &Dataset, task: Task) -> Self {
        Self {
            train: task_examples(&dataset.split.train, task),
            valid: task_examples(&dataset.split.valid, task),
            test: task_examples(&dataset.split.test, task),
        }
    }
}

/// Result of one training run plus its test evaluation.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: Evaluation,
    pub test_leakage_violations: usize,
}

pub fn prepare<'a>(
    dataset: &Dataset,
    examples: &'a [Example],
    store: &CoTStore,
    encoder: &dyn TextEncoder,
    task: Task,
    retrieval: &RetrievalConfig,
) -> Result<Prepared<'a>> {
    let texts = encode_queries(dataset, examples, encoder, task)?;
    Prepared::new(examples, texts, store, retrieval)
}

/// Evaluates a trained model on `examples` with the retrieval settings it
/// was trained with.
pub fn evaluate_model(
    dataset: &Dataset,
    examples: &[Example],
    store: &CoTStore,
    encoder: &dyn TextEncoder,
    model: &Model,
) -> Result<Evaluation> {
    let task = model.config.task;
    let examples = task_examples(examples, task);
    let data = prepare(dataset, &examples, store, encoder, task, &model.config.retrieval)?;
    training::evaluate(model, &data, store)
}

/// Trains on the train split, early-stops on valid, evaluates on test.
pub fn run(
    dataset: &Dataset,
    store: &CoTStore,
    encoder: &dyn TextEncoder,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&training::EpochRecord) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let split = SplitData::new(dataset, cfg.task);
    let retrieval = cfg.retrieval();
    let train = prepare(dataset, &split.train, store, encoder, cfg.task, &retrieval)?;
    let valid = prepare(dataset, &split.valid, store, encoder, cfg.task, &retrieval)?;
    let test = prepare(dataset, &split.test, store, encoder, cfg.task, &retrieval)?;
    let schema = FieldSchema::from_vocab(&dataset.vocab);
    let outcome = training::train(cfg, schema, &train, &valid, store, on_epoch)?;
    let eval = training::evaluate(&outcome.model, &test, store)?;
    Ok(RunResult {
        outcome,
        test: eval,
        test_leakage_violations: test.leakage_violations,
    })
}

/// Serializable report for one evaluation.
pub fn report(
    eval: &Evaluation,
    task: Task,
    variant: &str,
    split: &str,
    seed: u64,
    base_auc: Option<f64>,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let relaimpr_pct = match (eval.auc, base_auc) {
        (Some(a), Some(b)) => Some(metrics::relaimpr(a, b)?),
        (None, Some(_)) => return Err(Error::Metric("RelaImpr needs an AUC".into())),
        _ => None,
    };
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        task: task.to_string(),
        variant: variant.to_string(),
        split: split.to_string(),
        auc: eval.auc,
        logloss: eval.logloss,
        relaimpr_pct,
        hit: eval.topk.hit.clone(),
        ndcg: eval.topk.ndcg.clone(),
        examples: eval.examples,
        positives: eval.positives,
        seed,
        config,
    })
}

/// One cell of the context-length sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub k: usize,
    pub variant: Variant,
}

/// `n{K}` cells for each requested K, plus `n4_noc` (K = 4 without label
/// balancing) when asked for.
pub fn ablation_grid(ks: &[usize], unbalanced_cell: bool) -> Vec<AblationCell> {
    let mut cells: Vec<AblationCell> = ks
        .iter()
        .map(|&k| AblationCell {
            name: format!("n{k}"),
            k,
            variant: Variant::Full,
        })
        .collect();
    if unbalanced_cell {
        cells.push(AblationCell {
            name: "n4_noc".into(),
            k: 4,
            variant: Variant::NoBalance,
        });
    }
    cells
}
