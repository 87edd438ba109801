//! Ranking and CTR evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_EPS;
use crate::error::{Error, Result};

/// Version tag written into every serialized [`MetricsReport`].
pub const REPORT_SCHEMA: &str = "ctxrec.report/1";

/// Area under the ROC curve via the Mann-Whitney statistic, with average
/// ranks assigned to tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block [i, j] shares their mean
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Relative AUC improvement over a baseline, in percent, measured against
/// the 0.5 random-guess floor.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if auc_base == 0.5 {
        return Err(Error::Metric("RelaImpr undefined for a baseline AUC of 0.5".into()));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Mean binary cross-entropy with probabilities clamped like the training loss.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Metric("logloss needs equal, non-empty inputs".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

/// HIT@K and NDCG@K for a single ranked candidate list.
pub fn topk_metrics<T: PartialEq>(ranked: &[T], target: &T, ks: &[usize]) -> Result<TopK> {
    let rank = ranked
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| Error::Metric("target absent from the candidate list".into()))?
        + 1;
    Ok(topk_from_rank(rank, ks))
}

/// Same as [`topk_metrics`] given the target's 1-based rank.
pub fn topk_from_rank(rank: usize, ks: &[usize]) -> TopK {
    let mut out = TopK::default();
    for &k in ks {
        let inside = rank <= k;
        out.hit.insert(k, if inside { 1.0 } else { 0.0 });
        let gain = if inside {
            1.0 / ((rank + 1) as f64).log2()
        } else {
            0.0
        };
        out.ndcg.insert(k, gain);
    }
    out
}

/// Averages per-user [`TopK`] values.
pub fn mean_topk(per_user: &[TopK]) -> TopK {
    let mut out = TopK::default();
    if per_user.is_empty() {
        return out;
    }
    let n = per_user.len() as f64;
    for t in per_user {
        for (&k, &v) in &t.hit {
            *out.hit.entry(k).or_default() += v / n;
        }
        for (&k, &v) in &t.ndcg {
            *out.ndcg.entry(k).or_default() += v / n;
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub task: String,
    pub variant: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logloss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaimpr_pct: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub hit: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub ndcg: BTreeMap<usize, f64>,
    pub examples: usize,
    pub positives: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}
