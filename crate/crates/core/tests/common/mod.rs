//! Instance generators and independent oracles shared by the integration
//! tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ctxrec::autograd::Graph;
use ctxrec::backbones::{BackboneKind, FieldSchema};
use ctxrec::cotstore::{CoTRecord, CoTStore, RetrievalConfig, SearchMode};
use ctxrec::dataio::Example;
use ctxrec::ict::IctConfig;
use ctxrec::textenc::TextEmbedding;
use ctxrec::training::{Model, ModelConfig, Task, Variant};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(rng: &mut impl Rng, dim: usize) -> TextEmbedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    TextEmbedding::normalized(v).unwrap()
}

pub fn schema() -> FieldSchema {
    FieldSchema {
        users: 5,
        items: 7,
        user_attrs: vec![3],
        item_attrs: vec![4, 3],
    }
}

pub fn example(rng: &mut impl Rng, s: &FieldSchema, id: u64, timestamp: i64) -> Example {
    let hist_len = rng.gen_range(0..=3);
    Example {
        id,
        user: rng.gen_range(1..s.users),
        user_attrs: s.user_attrs.iter().map(|&n| rng.gen_range(0..n)).collect(),
        history: (0..hist_len).map(|_| rng.gen_range(1..s.items)).collect(),
        target: rng.gen_range(1..s.items),
        target_attrs: s.item_attrs.iter().map(|&n| rng.gen_range(0..n)).collect(),
        timestamp,
        label: rng.gen_range(0..2),
        text: String::new(),
    }
}

pub fn record(rng: &mut impl Rng, s: &FieldSchema, id: u64, d_text: usize) -> CoTRecord {
    let ts = rng.gen_range(0..100);
    let ex = example(rng, s, 1000 + id, ts);
    CoTRecord {
        id,
        label: ex.label,
        timestamp: ex.timestamp,
        example: ex,
        cot_text: None,
        cot_embedding: unit(rng, d_text),
        key_embedding: unit(rng, d_text),
    }
}

/// A small model with one query, its context and softmax negatives.
pub struct Instance {
    pub model: Model,
    pub query: Example,
    pub text: TextEmbedding,
    pub context: Vec<CoTRecord>,
    pub negatives: Vec<usize>,
}

pub fn instance(seed: u64, backbone: BackboneKind, variant: Variant, k: usize) -> Instance {
    let mut r = rng(seed);
    let s = schema();
    let d = if seed % 2 == 0 { 4 } else { 8 };
    let d_text = 5;
    let task = if backbone.is_retrieval() { Task::Retrieval } else { Task::Ranking };
    let config = ModelConfig {
        backbone,
        variant,
        task,
        ict: IctConfig {
            d,
            layers: 2,
            heads: 2,
            k_max: 2,
            d_text,
            dropout: 0.0,
        },
        retrieval: RetrievalConfig {
            k,
            ..RetrievalConfig::default()
        },
        schema: s.clone(),
    };
    let model = Model::new(config, seed).unwrap();
    let query = example(&mut r, &s, 1, 500);
    let text = unit(&mut r, d_text);
    let context = (0..k as u64).map(|i| record(&mut r, &s, i, d_text)).collect();
    let negatives = if task == Task::Retrieval {
        (1..s.items).filter(|&i| i != query.target).take(3).collect()
    } else {
        Vec::new()
    };
    Instance {
        model,
        query,
        text,
        context,
        negatives,
    }
}

fn loss_value(inst: &Instance, params: &ctxrec::params::ParamStore, alpha: f64, frozen: Option<&Array2<f64>>) -> f64 {
    let ctx: Vec<&CoTRecord> = inst.context.iter().collect();
    let mut g = Graph::new(params);
    let parts = inst
        .model
        .loss_with_targets(&mut g, &inst.query, &inst.text, &ctx, &inst.negatives, alpha, frozen)
        .unwrap();
    g.scalar(parts.total)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries: usize,
    /// Tensors whose analytic gradient was non-zero somewhere.
    pub active: BTreeSet<String>,
    pub all: BTreeSet<String>,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is (near) zero from dividing rounding noise by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks every entry of every parameter tensor of the instance's total
/// loss against central differences with step `h`. The reconstruction
/// targets are detached, so the differences hold them at their
/// unperturbed values.
pub fn fd_check(inst: &Instance, alpha: f64, h: f64) -> FdReport {
    let ctx: Vec<&CoTRecord> = inst.context.iter().collect();
    let mut g = Graph::new(&inst.model.params);
    let parts = inst
        .model
        .loss(&mut g, &inst.query, &inst.text, &ctx, &inst.negatives, alpha)
        .unwrap();
    let mut grads = inst.model.params.zero_grads();
    g.backward(parts.total, &mut grads);
    drop(g);

    let frozen = inst.model.recon_targets(&inst.query, &inst.text, &ctx).unwrap();
    let frozen = frozen.as_ref();
    let mut report = FdReport::default();
    let mut params = inst.model.params.clone();
    for id in inst.model.params.ids() {
        let name = inst.model.params.name(id).to_string();
        report.all.insert(name.clone());
        let (rows, cols) = params.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params.get(id)[[r, c]];
                params.get_mut(id)[[r, c]] = orig + h;
                let up = loss_value(inst, &params, alpha, frozen);
                params.get_mut(id)[[r, c]] = orig - h;
                let down = loss_value(inst, &params, alpha, frozen);
                params.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id)[[r, c]];
                if analytic != 0.0 {
                    report.active.insert(name.clone());
                }
                let e = rel_err(analytic, numeric);
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = format!("{name}[{r},{c}] analytic {analytic:e} numeric {numeric:e}");
                }
                report.entries += 1;
            }
        }
    }
    report
}

/// Brute-force retrieval oracle: filter, sort by (cosine desc, id asc),
/// take per class, then order ascending by similarity.
pub fn brute_force_retrieve(
    records: &[CoTRecord],
    query: &TextEmbedding,
    timestamp: i64,
    exclude: Option<u64>,
    cfg: &RetrievalConfig,
) -> (Vec<u64>, bool) {
    let mut eligible: Vec<(f64, u64, u8)> = records
        .iter()
        .filter(|r| !cfg.anti_leakage || r.timestamp < timestamp)
        .filter(|r| Some(r.example.id) != exclude)
        .map(|r| {
            let sim: f64 = r
                .key_embedding
                .as_slice()
                .iter()
                .zip(query.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            (sim, r.id, r.label)
        })
        .collect();
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = cfg.k;
    let mut shortfall = false;
    let mut chosen: Vec<(f64, u64, u8)> = if cfg.balance {
        // K/2 per class; a scarce class hands its unused slots to the other
        let pos: Vec<_> = eligible.iter().copied().filter(|e| e.2 == 1).collect();
        let neg: Vec<_> = eligible.iter().copied().filter(|e| e.2 == 0).collect();
        let half = k / 2;
        let mut take_pos = half.min(pos.len());
        let mut take_neg = half.min(neg.len());
        if take_pos < half || take_neg < half {
            shortfall = true;
            if take_pos < half {
                take_neg = (k - take_pos).min(neg.len());
            } else {
                take_pos = (k - take_neg).min(pos.len());
            }
        }
        pos[..take_pos].iter().chain(&neg[..take_neg]).copied().collect()
    } else {
        eligible.iter().take(k).copied().collect()
    };
    chosen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (chosen.iter().map(|c| c.1).collect(), shortfall)
}

pub fn random_store(rng: &mut impl Rng, n: usize, dim: usize, discrete: bool) -> Vec<CoTRecord> {
    let s = schema();
    (0..n as u64)
        .map(|i| {
            let mut rec = record(rng, &s, i, dim);
            rec.timestamp = rng.gen_range(0..50);
            rec.example.timestamp = rec.timestamp;
            if discrete {
                // coarse vectors so exact similarity ties occur
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1..=1) as f64).collect();
                let v = if v.iter().all(|&x| x == 0.0) { vec![1.0; dim] } else { v };
                rec.key_embedding = TextEmbedding::normalized(v).unwrap();
            }
            rec
        })
        .collect()
}

pub fn exact(k: usize, balance: bool) -> RetrievalConfig {
    RetrievalConfig {
        k,
        balance,
        anti_leakage: true,
        mode: SearchMode::Exact,
    }
}

pub fn build_store(records: Vec<CoTRecord>) -> CoTStore {
    CoTStore::build(records).unwrap()
}

/// AUC by counting ordered (positive, negative) pairs; ties count half.
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Violations found over `cases` random stores and queries, compared
/// against [`brute_force_retrieve`] and the retrieval invariants.
#[derive(Debug, Default)]
pub struct RetrievalAudit {
    pub cases: usize,
    pub leakage: usize,
    pub balance: usize,
    pub oracle_mismatch: usize,
    pub nondeterministic: usize,
}

impl RetrievalAudit {
    pub fn violations(&self) -> usize {
        self.leakage + self.balance + self.oracle_mismatch + self.nondeterministic
    }
}

pub fn retrieval_audit(cases: usize, seed: u64) -> RetrievalAudit {
    let mut r = rng(seed);
    let mut audit = RetrievalAudit::default();
    for case in 0..cases {
        let n = r.gen_range(1..40);
        let dim = r.gen_range(2..6);
        let records = random_store(&mut r, n, dim, case % 2 == 0);
        let store = build_store(records.clone());
        let q = unit(&mut r, dim);
        let ts = r.gen_range(0..60);
        let exclude = if r.gen_bool(0.3) {
            Some(records[r.gen_range(0..n)].example.id)
        } else {
            None
        };
        let balance = r.gen_bool(0.7);
        let k = if balance { 2 * r.gen_range(0..4) } else { r.gen_range(0..7) };
        let cfg = exact(k, balance);
        let got = store.retrieve(&q, ts, exclude, &cfg).unwrap();
        let again = store.retrieve(&q, ts, exclude, &cfg).unwrap();
        let ids: Vec<u64> = got.hits.iter().map(|h| records[h.index].id).collect();
        let ids_again: Vec<u64> = again.hits.iter().map(|h| records[h.index].id).collect();
        audit.cases += 1;
        if ids != ids_again {
            audit.nondeterministic += 1;
        }
        if got.hits.iter().any(|h| records[h.index].timestamp >= ts) {
            audit.leakage += 1;
        }
        let eligible: Vec<&CoTRecord> = records
            .iter()
            .filter(|x| x.timestamp < ts && Some(x.example.id) != exclude)
            .collect();
        let pos = eligible.iter().filter(|x| x.label == 1).count();
        let neg = eligible.len() - pos;
        if balance && pos >= k / 2 && neg >= k / 2 {
            let got_pos = got.hits.iter().filter(|h| records[h.index].label == 1).count();
            if got_pos != k / 2 || got.hits.len() != k {
                audit.balance += 1;
            }
        }
        let (oracle, shortfall) = brute_force_retrieve(&records, &q, ts, exclude, &cfg);
        if oracle != ids || (k > 0 && shortfall != got.shortfall) {
            audit.oracle_mismatch += 1;
        }
    }
    audit
}

/// Instances where the rank-based AUC differs from pair counting.
pub fn auc_mismatches(instances: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let n = r.gen_range(2..=200);
        let levels = r.gen_range(1..20);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // few distinct levels, so ties are common
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / 7.0).collect();
        let got = ctxrec::metrics::auc(&scores, &labels).unwrap();
        if got != pair_count_auc(&scores, &labels) {
            bad += 1;
        }
    }
    bad
}

/// Random decoders and inputs where perturbing a row after `t` changed an
/// output row at or before `t`.
pub fn causality_violations(cases: usize, seed: u64) -> usize {
    use ctxrec::ict::{self, DecoderParams};
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let cfg = IctConfig {
            d: 4 * r.gen_range(1..4),
            layers: r.gen_range(1..3),
            heads: 2,
            k_max: 4,
            d_text: 3,
            dropout: 0.0,
        };
        let mut store = ctxrec::params::ParamStore::new();
        let params = DecoderParams::new(&mut store, &cfg, &mut r).unwrap();
        let len = r.gen_range(2..=cfg.max_len());
        let e = Array2::from_shape_fn((len, cfg.d), |_| r.gen_range(-1.0..1.0));
        let t = r.gen_range(0..len - 1);
        let mut e2 = e.clone();
        for row in t + 1..len {
            for c in 0..cfg.d {
                if r.gen_bool(0.5) {
                    e2[[row, c]] += r.gen_range(-2.0..2.0);
                }
            }
        }
        let run = |x: Array2<f64>| {
            let mut g = Graph::new(&store);
            let x = g.constant(x);
            let h = ict::decoder_forward::<ChaCha8Rng>(&mut g, x, &params, None).unwrap();
            g.value(h).to_owned()
        };
        let (a, b) = (run(e), run(e2));
        if a.rows().into_iter().take(t + 1).zip(b.rows()).any(|(x, y)| x != y) {
            bad += 1;
        }
    }
    bad
}

/// Hidden-state shape and reconstruction loss of a default-sized full model
/// (d = 32, K_max = 8) on `k` random context examples.
pub fn decoder_run(seed: u64, k: usize) -> ((usize, usize), f64) {
    use ctxrec::ict;
    let mut r = rng(seed);
    let s = schema();
    let d_text = 6;
    let config = ModelConfig {
        backbone: BackboneKind::FmDeep,
        variant: Variant::Full,
        task: Task::Ranking,
        ict: IctConfig {
            d_text,
            ..IctConfig::default()
        },
        retrieval: RetrievalConfig {
            k,
            ..RetrievalConfig::default()
        },
        schema: s.clone(),
    };
    let model = Model::new(config, seed).unwrap();
    let query = example(&mut r, &s, 1, 500);
    let text = unit(&mut r, d_text);
    let context: Vec<CoTRecord> = (0..k as u64).map(|i| record(&mut r, &s, 10 + i, d_text)).collect();
    let ctx: Vec<&CoTRecord> = context.iter().collect();
    let dec = model.decoder.as_ref().unwrap();
    let seq = ict::assemble(&query, &text, &ctx, false, true);
    let mut g = Graph::new(&model.params);
    let e = ict::embed_tokens(&mut g, &seq, dec, &model.fields).unwrap();
    let h = ict::decoder_forward::<ChaCha8Rng>(&mut g, e.tokens, dec, None).unwrap();
    let recon = ict::recon_loss(&mut g, h, &seq, e.cot_rows).unwrap();
    (g.shape(h), g.scalar(recon))
}
