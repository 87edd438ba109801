//! Losses, optimizer, model assembly and the training loop.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::backbones::{Backbone, BackboneKind, FieldEmbeddings, FieldSchema};
use crate::cotstore::{CoTRecord, CoTStore, RetrievalConfig, SearchMode};
use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::ict::{self, DecoderParams, IctConfig};
use crate::metrics::{self, TopK};
use crate::params::{Gradients, ParamStore};
use crate::seed;
use crate::textenc::TextEmbedding;

/// Examples per gradient chunk. Chunks are reduced in order, so results do
/// not depend on the number of worker threads.
const CHUNK: usize = 16;
pub const RANKING_KS: [usize; 2] = [5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ranking,
    Retrieval,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" => Ok(Task::Ranking),
            "retrieval" => Ok(Task::Retrieval),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Ranking => "ranking",
            Task::Retrieval => "retrieval",
        })
    }
}

/// Model variants. `Plain` is the backbone without any context feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCot,
    MeanPool,
    NoBalance,
    Plain,
}

impl Variant {
    pub fn uses_context(self) -> bool {
        self != Variant::Plain
    }

    pub fn with_cot(self) -> bool {
        !matches!(self, Variant::NoCot | Variant::Plain)
    }

    pub fn balanced(self) -> bool {
        self != Variant::NoBalance
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_cot" => Ok(Variant::NoCot),
            "mean_pool" => Ok(Variant::MeanPool),
            "no_balance" => Ok(Variant::NoBalance),
            "plain" => Ok(Variant::Plain),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCot => "no_cot",
            Variant::MeanPool => "mean_pool",
            Variant::NoBalance => "no_balance",
            Variant::Plain => "plain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub task: Task,
    pub k: usize,
    pub variant: Variant,
    pub backbone: BackboneKind,
    pub negatives: usize,
    pub clip_norm: Option<f64>,
    /// Probe count for approximate search; exact search when absent.
    pub probes: Option<usize>,
    pub model: IctConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            alpha: 0.5,
            seed: 0,
            max_epochs: 20,
            patience: 3,
            task: Task::Ranking,
            k: 4,
            variant: Variant::Full,
            backbone: BackboneKind::FmDeep,
            negatives: 128,
            clip_norm: None,
            probes: None,
            model: IctConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max epochs must be at least 1"));
        }
        if self.k > self.model.k_max {
            return Err(Error::config(format!("K = {} exceeds K_max = {}", self.k, self.model.k_max)));
        }
        if self.task == Task::Retrieval && self.backbone != BackboneKind::TwoTower {
            return Err(Error::config("the retrieval task needs the two-tower backbone"));
        }
        if self.task == Task::Ranking && self.backbone == BackboneKind::TwoTower {
            return Err(Error::config("the ranking task needs a ranking backbone"));
        }
        if self.task == Task::Retrieval && self.negatives == 0 {
            return Err(Error::config("sampled softmax needs at least one negative"));
        }
        self.retrieval().validate()?;
        self.model.validate()
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: if self.variant.uses_context() { self.k } else { 0 },
            balance: self.variant.balanced(),
            anti_leakage: true,
            mode: match self.probes {
                Some(probes) => SearchMode::Approximate { probes },
                None => SearchMode::Exact,
            },
        }
    }

    pub fn model_config(&self, schema: FieldSchema) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            variant: self.variant,
            task: self.task,
            ict: self.model.clone(),
            retrieval: self.retrieval(),
            schema,
        }
    }
}

/// Clamped binary cross-entropy of a logit, as a plain number.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    crate::autograd::bce_value(logit, label as f64)
}

/// Cross-entropy of the first entry against a softmax over all scores.
pub fn sampled_softmax_loss(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[0]
}

pub fn total_loss(recon: f64, objective: f64, alpha: f64) -> f64 {
    alpha * recon + objective
}

/// Up to `count` distinct items from `1..=n_items`, never `positive`.
pub fn sample_softmax_negatives<R: Rng>(rng: &mut R, n_items: usize, positive: usize, count: usize) -> Vec<usize> {
    let pool = n_items.saturating_sub(1);
    let m = count.min(pool);
    index::sample(rng, pool, m)
        .into_iter()
        .map(|j| if j + 1 < positive { j + 1 } else { j + 2 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, _, p)| Array2::zeros(p.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for id in params.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if metric <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub task: Task,
    pub ict: IctConfig,
    pub retrieval: RetrievalConfig,
    pub schema: FieldSchema,
}

/// All trainable parameters and the layout that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub fields: FieldEmbeddings,
    pub decoder: Option<DecoderParams>,
    pub backbone: Backbone,
}

/// Per-example loss parts, kept as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub objective: Var,
    pub recon: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.ict.validate()?;
        let mut rng = seed::rng(seed, "init");
        let mut params = ParamStore::new();
        let d = config.ict.d;
        let fields = FieldEmbeddings::new(&mut params, "emb", &config.schema, d, &mut rng)?;
        let decoder = if config.variant.uses_context() {
            Some(DecoderParams::new(&mut params, &config.ict, &mut rng)?)
        } else {
            None
        };
        let w_dim = if decoder.is_some() { d } else { 0 };
        let backbone = Backbone::new(config.backbone, &mut params, &fields, w_dim, &mut rng)?;
        Ok(Self {
            config,
            params,
            fields,
            decoder,
            backbone,
        })
    }

    /// Context feature `w` and, when the variant trains it, the
    /// reconstruction loss.
    pub fn context_feature(
        &self,
        g: &mut Graph,
        ex: &Example,
        text: &TextEmbedding,
        context: &[&CoTRecord],
    ) -> Result<Option<(Var, Option<Var>)>> {
        self.context_feature_with(g, ex, text, context, None)
    }

    /// The detached reconstruction targets of an example under the current
    /// parameters, or `None` when the variant has none.
    pub fn recon_targets(&self, ex: &Example, text: &TextEmbedding, context: &[&CoTRecord]) -> Result<Option<Array2<f64>>> {
        let Some(dec) = &self.decoder else {
            return Ok(None);
        };
        let variant = self.config.variant;
        let mask = self.config.task == Task::Retrieval;
        let seq = ict::assemble(ex, text, context, mask, variant.with_cot());
        let mut g = Graph::new(&self.params);
        let e = ict::embed_tokens(&mut g, &seq, dec, &self.fields)?;
        Ok(e.cot_rows.map(|c| g.value(c).to_owned()))
    }

    fn context_feature_with(
        &self,
        g: &mut Graph,
        ex: &Example,
        text: &TextEmbedding,
        context: &[&CoTRecord],
        frozen: Option<&Array2<f64>>,
    ) -> Result<Option<(Var, Option<Var>)>> {
        let Some(dec) = &self.decoder else {
            return Ok(None);
        };
        let variant = self.config.variant;
        let mask = self.config.task == Task::Retrieval;
        let seq = ict::assemble(ex, text, context, mask, variant.with_cot());
        let e = ict::embed_tokens(g, &seq, dec, &self.fields)?;
        if variant == Variant::MeanPool {
            return Ok(Some((ict::mean_pool_feature(g, e.tokens), None)));
        }
        let h = ict::decoder_forward::<ChaCha8Rng>(g, e.tokens, dec, None)?;
        let w = ict::cf_feature(g, h);
        let recon = match (e.cot_rows, frozen) {
            (Some(_), Some(t)) => {
                let t = g.constant(t.clone());
                Some(ict::recon_loss(g, h, &seq, Some(t))?)
            }
            (Some(c), None) => Some(ict::recon_loss(g, h, &seq, Some(c))?),
            (None, _) => None,
        };
        Ok(Some((w, recon)))
    }

    /// Ranking logit.
    pub fn logit(&self, g: &mut Graph, ex: &Example, text: &TextEmbedding, context: &[&CoTRecord]) -> Result<Var> {
        let w = self.context_feature(g, ex, text, context)?.map(|(w, _)| w);
        self.backbone.logit(g, &self.fields, ex, w)
    }

    /// Fused user vector of the retrieval backbone.
    pub fn user_vector(&self, g: &mut Graph, ex: &Example, text: &TextEmbedding, context: &[&CoTRecord]) -> Result<Var> {
        let Backbone::TwoTower(tt) = &self.backbone else {
            return Err(Error::config("user vectors need the two-tower backbone"));
        };
        let w = self.context_feature(g, ex, text, context)?.map(|(w, _)| w);
        tt.user_vector(g, &self.fields, ex, w)
    }

    /// Builds `alpha * L_r + L_o` for one example. `negatives` is used by the
    /// retrieval task only.
    pub fn loss(
        &self,
        g: &mut Graph,
        ex: &Example,
        text: &TextEmbedding,
        context: &[&CoTRecord],
        negatives: &[usize],
        alpha: f64,
    ) -> Result<LossParts> {
        self.loss_with_targets(g, ex, text, context, negatives, alpha, None)
    }

    /// [`Model::loss`] with the reconstruction targets pinned to `frozen`
    /// instead of recomputed from the current parameters. Since the targets
    /// are detached, both build the same gradient; pinning them makes the
    /// loss value itself match what that gradient differentiates.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_targets(
        &self,
        g: &mut Graph,
        ex: &Example,
        text: &TextEmbedding,
        context: &[&CoTRecord],
        negatives: &[usize],
        alpha: f64,
        frozen: Option<&Array2<f64>>,
    ) -> Result<LossParts> {
        let feature = self.context_feature_with(g, ex, text, context, frozen)?;
        let (w, recon) = match feature {
            Some((w, r)) => (Some(w), r),
            None => (None, None),
        };
        let objective = match &self.backbone {
            Backbone::TwoTower(tt) => {
                let u = tt.user_vector(g, &self.fields, ex, w)?;
                let mut items = Vec::with_capacity(negatives.len() + 1);
                items.push(ex.target);
                items.extend_from_slice(negatives);
                let s = tt.scores(g, u, &items)?;
                g.softmax_xent(s, 0)
            }
            _ => {
                let logit = self.backbone.logit(g, &self.fields, ex, w)?;
                g.bce_with_logit(logit, ex.label as f64)
            }
        };
        let total = match recon {
            Some(r) => {
                let r2 = g.scale(r, alpha);
                g.add(r2, objective)
            }
            None => objective,
        };
        Ok(LossParts {
            total,
            objective,
            recon,
        })
    }
}

/// A split with its query text embeddings and retrieved contexts.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub examples: &'a [Example],
    pub texts: Vec<TextEmbedding>,
    pub contexts: Vec<Vec<usize>>,
    /// Retrieved records that do not strictly predate their query.
    pub leakage_violations: usize,
    pub shortfalls: usize,
}

impl<'a> Prepared<'a> {
    /// Retrieves each example's context once; the store is immutable so the
    /// result can be reused every epoch.
    pub fn new(
        examples: &'a [Example],
        texts: Vec<TextEmbedding>,
        store: &CoTStore,
        retrieval: &RetrievalConfig,
    ) -> Result<Self> {
        if texts.len() != examples.len() {
            return Err(Error::data(format!("{} texts for {} examples", texts.len(), examples.len())));
        }
        let results: Vec<Result<_>> = examples
            .par_iter()
            .zip(&texts)
            .map(|(ex, t)| store.retrieve(t, ex.timestamp, Some(ex.id), retrieval))
            .collect();
        let mut contexts = Vec::with_capacity(examples.len());
        let mut leakage_violations = 0;
        let mut shortfalls = 0;
        for (ex, r) in examples.iter().zip(results) {
            let r = r?;
            shortfalls += r.shortfall as usize;
            let ctx: Vec<usize> = r.hits.iter().map(|h| h.index).collect();
            leakage_violations += ctx
                .iter()
                .filter(|&&i| store.records()[i].timestamp >= ex.timestamp)
                .count();
            contexts.push(ctx);
        }
        Ok(Self {
            examples,
            texts,
            contexts,
            leakage_violations,
            shortfalls,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn context<'s>(&self, store: &'s CoTStore, i: usize) -> Vec<&'s CoTRecord> {
        self.contexts[i].iter().map(|&j| &store.records()[j]).collect()
    }
}

/// Mean losses over a batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub objective: f64,
    pub recon: f64,
}

fn negatives_for(cfg: &TrainConfig, n_items: usize, epoch: usize, ex: &Example) -> Vec<usize> {
    if cfg.task != Task::Retrieval {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
        seed::derive(cfg.seed, "softmax-negatives"),
        &format!("{epoch}/{}", ex.id),
    ));
    sample_softmax_negatives(&mut rng, n_items, ex.target, cfg.negatives)
}

/// Mean gradient and losses of `batch` (indices into `data`).
pub fn batch_gradients(
    model: &Model,
    data: &Prepared,
    store: &CoTStore,
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Gradients, LossSummary)> {
    let n_items = model.config.schema.items - 1;
    let parts: Vec<Result<(Gradients, LossSummary)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.params.zero_grads();
            let mut sum = LossSummary::default();
            for &i in chunk {
                let ex = &data.examples[i];
                let ctx = data.context(store, i);
                let negs = negatives_for(cfg, n_items, epoch, ex);
                let mut g = Graph::new(&model.params);
                let l = model.loss(&mut g, ex, &data.texts[i], &ctx, &negs, cfg.alpha)?;
                sum.total += g.scalar(l.total);
                sum.objective += g.scalar(l.objective);
                sum.recon += l.recon.map_or(0.0, |r| g.scalar(r));
                g.backward(l.total, &mut grads);
            }
            Ok((grads, sum))
        })
        .collect();
    let mut grads = model.params.zero_grads();
    let mut sum = LossSummary::default();
    for p in parts {
        let (g, s) = p?;
        grads.add_assign(&g);
        sum.total += s.total;
        sum.objective += s.objective;
        sum.recon += s.recon;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((
        grads,
        LossSummary {
            total: sum.total / n,
            objective: sum.objective / n,
            recon: sum.recon / n,
        },
    ))
}

/// Metric values on one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub topk: TopK,
    pub examples: usize,
    pub positives: usize,
}

impl Evaluation {
    /// Quantity monitored for early stopping.
    pub fn monitored(&self) -> f64 {
        match self.auc {
            Some(a) => a,
            None => self.topk.ndcg.get(&10).copied().unwrap_or(0.0),
        }
    }
}

/// Scores every example. Ranking: click probabilities. Retrieval: the
/// 1-based rank of the target among all catalog items (ties broken by
/// item index).
pub fn predict(model: &Model, data: &Prepared, store: &CoTStore) -> Result<Vec<f64>> {
    let out: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ex = &data.examples[i];
            let ctx = data.context(store, i);
            let mut g = Graph::new(&model.params);
            match &model.backbone {
                Backbone::TwoTower(tt) => {
                    let u = model.user_vector(&mut g, ex, &data.texts[i], &ctx)?;
                    let u = g.value(u).row(0).to_vec();
                    let scores = tt.score_all(&model.params, &u);
                    let t = scores[ex.target];
                    let ahead = scores
                        .iter()
                        .enumerate()
                        .skip(1)
                        .filter(|&(j, &s)| s > t || (s == t && j < ex.target))
                        .count();
                    Ok((ahead + 1) as f64)
                }
                _ => {
                    let l = model.logit(&mut g, ex, &data.texts[i], &ctx)?;
                    Ok(sigmoid(g.scalar(l)))
                }
            }
        })
        .collect();
    out.into_iter().collect()
}

pub fn evaluate(model: &Model, data: &Prepared, store: &CoTStore) -> Result<Evaluation> {
    let preds = predict(model, data, store)?;
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(Error::numerical("non-finite prediction during evaluation"));
    }
    let labels: Vec<u8> = data.examples.iter().map(|e| e.label).collect();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    match model.config.task {
        Task::Ranking => Ok(Evaluation {
            auc: Some(metrics::auc(&preds, &labels)?),
            logloss: Some(metrics::logloss(&preds, &labels)?),
            topk: TopK::default(),
            examples: preds.len(),
            positives,
        }),
        Task::Retrieval => {
            let per: Vec<TopK> = preds
                .iter()
                .map(|&r| metrics::topk_from_rank(r as usize, &RANKING_KS))
                .collect();
            Ok(Evaluation {
                auc: None,
                logloss: None,
                topk: metrics::mean_topk(&per),
                examples: preds.len(),
                positives,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossSummary,
    pub valid_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub leakage_violations: usize,
}

/// Epoch-specific permutation of `0..n`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed::derive(seed, "shuffle"), &epoch.to_string()));
    order.shuffle(&mut rng);
    order
}

/// Trains with early stopping on the validation split and returns the best
/// epoch's parameters. `on_epoch` sees each record as soon as it exists.
pub fn train(
    cfg: &TrainConfig,
    schema: FieldSchema,
    train_data: &Prepared,
    valid_data: &Prepared,
    store: &CoTStore,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::data("empty training split"));
    }
    let mut model = Model::new(cfg.model_config(schema), cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, train_data.len());
        let mut sum = LossSummary::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mut grads, loss) = batch_gradients(&model, train_data, store, batch, cfg, epoch)?;
            if !loss.total.is_finite() {
                return Err(Error::numerical(format!("non-finite loss at epoch {epoch}, batch {}", b + 1)));
            }
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            adam.step(&mut model.params, &grads)
                .map_err(|e| Error::numerical(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
            let w = batch.len() as f64;
            sum.total += loss.total * w;
            sum.objective += loss.objective * w;
            sum.recon += loss.recon * w;
        }
        let n = train_data.len() as f64;
        let valid = evaluate(&model, valid_data, store)?;
        let decision = stopper.update(epoch, valid.monitored());
        if decision == StopDecision::Improved {
            best = model.params.clone();
        }
        let record = EpochRecord {
            epoch,
            train: LossSummary {
                total: sum.total / n,
                objective: sum.objective / n,
                recon: sum.recon / n,
            },
            valid_metric: valid.monitored(),
            improved: decision == StopDecision::Improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} valid {:.5}",
            record.train.total,
            record.valid_metric
        );
        on_epoch(&record)?;
        history.push(record);
        if decision == StopDecision::Stop {
            break;
        }
    }
    model.params = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        leakage_violations: train_data.leakage_violations + valid_data.leakage_violations,
    })
}
