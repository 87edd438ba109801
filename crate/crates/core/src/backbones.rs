//! Recommendation backbones and the fusion of the context feature `w`.
//!
//! Ranking models take `w` by concatenation into their deep tower; the
//! two-tower retrieval model adds it to the user vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataio::{Example, Vocab};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const TOWER_HIDDEN: usize = 64;
const ATTENTION_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    FmDeep,
    TargetAttention,
    TwoTower,
}

impl BackboneKind {
    pub fn is_retrieval(self) -> bool {
        self == BackboneKind::TwoTower
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm-deep" => Ok(Self::FmDeep),
            "target-attention" => Ok(Self::TargetAttention),
            "two-tower" => Ok(Self::TwoTower),
            other => Err(Error::config(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Vocabulary sizes (each including the OOV row).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub users: usize,
    pub items: usize,
    pub user_attrs: Vec<usize>,
    pub item_attrs: Vec<usize>,
}

impl FieldSchema {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        Self {
            users: vocab.users.len(),
            items: vocab.items.len(),
            user_attrs: vocab.user_attrs.iter().map(|v| v.len()).collect(),
            item_attrs: vocab.item_attrs.iter().map(|v| v.len()).collect(),
        }
    }

    /// Fields of an example: user, user attrs, target, target attrs, history.
    pub fn field_count(&self, mask_target: bool) -> usize {
        let target = if mask_target { 0 } else { 1 + self.item_attrs.len() };
        1 + self.user_attrs.len() + target + 1
    }
}

pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Dense layer parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), fan_in, fan_out, init_bound(fan_in), rng)?,
            bias: store.zeros(format!("{name}.bias"), 1, fan_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        x
    }
}

/// ID embedding tables shared by the backbone and the context encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEmbeddings {
    pub dim: usize,
    pub schema: FieldSchema,
    pub user: ParamId,
    pub item: ParamId,
    pub user_attrs: Vec<ParamId>,
    pub item_attrs: Vec<ParamId>,
}

/// Per-table weighted bags, one output row per requested row.
struct BagPlan {
    user: Vec<Vec<(usize, f64)>>,
    item: Vec<Vec<(usize, f64)>>,
    user_attrs: Vec<Vec<Vec<(usize, f64)>>>,
    item_attrs: Vec<Vec<Vec<(usize, f64)>>>,
}

impl BagPlan {
    fn new(schema: &FieldSchema, rows: usize) -> Self {
        Self {
            user: vec![Vec::new(); rows],
            item: vec![Vec::new(); rows],
            user_attrs: vec![vec![Vec::new(); rows]; schema.user_attrs.len()],
            item_attrs: vec![vec![Vec::new(); rows]; schema.item_attrs.len()],
        }
    }
}

impl FieldEmbeddings {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, schema: &FieldSchema, dim: usize, rng: &mut R) -> Result<Self> {
        let b = init_bound(dim);
        Ok(Self {
            dim,
            schema: schema.clone(),
            user: store.uniform(format!("{name}.user"), schema.users, dim, b, rng)?,
            item: store.uniform(format!("{name}.item"), schema.items, dim, b, rng)?,
            user_attrs: schema
                .user_attrs
                .iter()
                .enumerate()
                .map(|(i, &n)| store.uniform(format!("{name}.user_attr{i}"), n, dim, b, rng))
                .collect::<Result<_>>()?,
            item_attrs: schema
                .item_attrs
                .iter()
                .enumerate()
                .map(|(i, &n)| store.uniform(format!("{name}.item_attr{i}"), n, dim, b, rng))
                .collect::<Result<_>>()?,
        })
    }

    fn emit(&self, g: &mut Graph, plan: BagPlan) -> Result<Var> {
        let mut acc = g.embedding_bag(self.user, plan.user)?;
        let item = g.embedding_bag(self.item, plan.item)?;
        acc = g.add(acc, item);
        for (table, bags) in self.user_attrs.iter().zip(plan.user_attrs) {
            let v = g.embedding_bag(*table, bags)?;
            acc = g.add(acc, v);
        }
        for (table, bags) in self.item_attrs.iter().zip(plan.item_attrs) {
            let v = g.embedding_bag(*table, bags)?;
            acc = g.add(acc, v);
        }
        Ok(acc)
    }

    fn check(&self, ex: &Example) -> Result<()> {
        if ex.user_attrs.len() != self.schema.user_attrs.len() || ex.target_attrs.len() != self.schema.item_attrs.len() {
            return Err(Error::data(format!("example {} does not match the field schema", ex.id)));
        }
        Ok(())
    }

    /// `F x d` matrix of field embeddings for one example, in the order
    /// user, user attrs, target, target attrs, mean of history (zero row
    /// when the history is empty). Masking drops the target fields.
    pub fn field_rows(&self, g: &mut Graph, ex: &Example, mask_target: bool) -> Result<Var> {
        self.check(ex)?;
        let f = self.schema.field_count(mask_target);
        let mut plan = BagPlan::new(&self.schema, f);
        let mut row = 0;
        plan.user[row].push((ex.user, 1.0));
        row += 1;
        for (i, &a) in ex.user_attrs.iter().enumerate() {
            plan.user_attrs[i][row].push((a, 1.0));
            row += 1;
        }
        if !mask_target {
            plan.item[row].push((ex.target, 1.0));
            row += 1;
            for (i, &a) in ex.target_attrs.iter().enumerate() {
                plan.item_attrs[i][row].push((a, 1.0));
                row += 1;
            }
        }
        let n = ex.history.len() as f64;
        plan.item[row].extend(ex.history.iter().map(|&h| (h, 1.0 / n)));
        self.emit(g, plan)
    }

    /// One row per example: the mean of that example's field rows.
    pub fn field_means(&self, g: &mut Graph, examples: &[(&Example, bool)]) -> Result<Var> {
        let mut plan = BagPlan::new(&self.schema, examples.len());
        for (row, &(ex, mask)) in examples.iter().enumerate() {
            self.check(ex)?;
            let w = 1.0 / self.schema.field_count(mask) as f64;
            plan.user[row].push((ex.user, w));
            for (i, &a) in ex.user_attrs.iter().enumerate() {
                plan.user_attrs[i][row].push((a, w));
            }
            if !mask {
                plan.item[row].push((ex.target, w));
                for (i, &a) in ex.target_attrs.iter().enumerate() {
                    plan.item_attrs[i][row].push((a, w));
                }
            }
            let n = ex.history.len() as f64;
            plan.item[row].extend(ex.history.iter().map(|&h| (h, w / n)));
        }
        self.emit(g, plan)
    }
}

fn zero_row(g: &mut Graph, dim: usize) -> Var {
    g.row_constant(&vec![0.0; dim])
}

/// First-order + factorization-machine + deep tower.
#[derive(Clone, Debug, PartialEq)]
pub struct FmDeep {
    pub first_user: ParamId,
    pub first_item: ParamId,
    pub first_user_attrs: Vec<ParamId>,
    pub first_item_attrs: Vec<ParamId>,
    pub bias: ParamId,
    pub tower: Mlp,
    pub w_dim: usize,
}

impl FmDeep {
    pub fn new<R: Rng>(store: &mut ParamStore, fields: &FieldEmbeddings, w_dim: usize, rng: &mut R) -> Result<Self> {
        let s = &fields.schema;
        let b = init_bound(fields.dim);
        let input = s.field_count(false) * fields.dim + w_dim;
        Ok(Self {
            first_user: store.uniform("fm.first.user", s.users, 1, b, rng)?,
            first_item: store.uniform("fm.first.item", s.items, 1, b, rng)?,
            first_user_attrs: s
                .user_attrs
                .iter()
                .enumerate()
                .map(|(i, &n)| store.uniform(format!("fm.first.user_attr{i}"), n, 1, b, rng))
                .collect::<Result<_>>()?,
            first_item_attrs: s
                .item_attrs
                .iter()
                .enumerate()
                .map(|(i, &n)| store.uniform(format!("fm.first.item_attr{i}"), n, 1, b, rng))
                .collect::<Result<_>>()?,
            bias: store.zeros("fm.bias", 1, 1)?,
            tower: Mlp::new(store, "fm.tower", &[input, TOWER_HIDDEN, TOWER_HIDDEN, 1], rng)?,
            w_dim,
        })
    }

    pub fn logit(&self, g: &mut Graph, fields: &FieldEmbeddings, ex: &Example, w: Option<Var>) -> Result<Var> {
        let v = fields.field_rows(g, ex, false)?;
        let (f, d) = g.shape(v);

        // first order
        let mut first = g.param(self.bias);
        let mut add_first = |g: &mut Graph, table: ParamId, bag: Vec<(usize, f64)>| -> Result<()> {
            let t = g.embedding_bag(table, vec![bag])?;
            first = g.add(first, t);
            Ok(())
        };
        add_first(g, self.first_user, vec![(ex.user, 1.0)])?;
        for (t, &a) in self.first_user_attrs.iter().zip(&ex.user_attrs) {
            add_first(g, *t, vec![(a, 1.0)])?;
        }
        add_first(g, self.first_item, vec![(ex.target, 1.0)])?;
        for (t, &a) in self.first_item_attrs.iter().zip(&ex.target_attrs) {
            add_first(g, *t, vec![(a, 1.0)])?;
        }
        let n = ex.history.len() as f64;
        add_first(g, self.first_item, ex.history.iter().map(|&h| (h, 1.0 / n)).collect())?;

        let fm = fm_pairwise(g, v);

        let flat = g.reshape(v, 1, f * d);
        let input = if self.w_dim > 0 {
            let w = w.unwrap_or_else(|| zero_row(g, self.w_dim));
            g.concat_cols(&[flat, w])
        } else {
            flat
        };
        let deep = self.tower.forward(g, input);
        let logit = g.add(first, fm);
        Ok(g.add(logit, deep))
    }
}

/// `sum_{i<j} <v_i, v_j>` over the rows of `v`, as
/// `0.5 * (|sum v|^2 - sum |v|^2)`.
pub fn fm_pairwise(g: &mut Graph, v: Var) -> Var {
    let s = g.sum_rows(v);
    let s2 = g.mul(s, s);
    let s2 = g.sum_all(s2);
    let sq = g.mul(v, v);
    let sq = g.sum_all(sq);
    let diff = g.sub(s2, sq);
    g.scale(diff, 0.5)
}

/// Target attention over the behaviour history followed by a deep tower.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAttention {
    pub scorer: Mlp,
    pub tower: Mlp,
    pub w_dim: usize,
}

impl TargetAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, fields: &FieldEmbeddings, w_dim: usize, rng: &mut R) -> Result<Self> {
        let d = fields.dim;
        Ok(Self {
            scorer: Mlp::new(store, "din.scorer", &[4 * d, ATTENTION_HIDDEN, 1], rng)?,
            tower: Mlp::new(store, "din.tower", &[4 * d + w_dim, TOWER_HIDDEN, TOWER_HIDDEN, 1], rng)?,
            w_dim,
        })
    }

    /// Softmax weights over the history and the pooled vector.
    pub fn attend(&self, g: &mut Graph, fields: &FieldEmbeddings, ex: &Example) -> Result<(Option<Var>, Var)> {
        let d = fields.dim;
        if ex.history.is_empty() {
            return Ok((None, zero_row(g, d)));
        }
        let hist = g.lookup(fields.item, &ex.history)?;
        let target = g.lookup(fields.item, &[ex.target])?;
        let t = g.repeat_rows(target, ex.history.len());
        let diff = g.sub(hist, t);
        let prod = g.mul(hist, t);
        let feats = g.concat_cols(&[hist, t, diff, prod]);
        let scores = self.scorer.forward(g, feats);
        let scores = g.transpose(scores);
        let weights = g.softmax_rows(scores);
        let pooled = g.matmul(weights, hist);
        Ok((Some(weights), pooled))
    }

    pub fn logit(&self, g: &mut Graph, fields: &FieldEmbeddings, ex: &Example, w: Option<Var>) -> Result<Var> {
        let (_, pooled) = self.attend(g, fields, ex)?;
        let target = g.lookup(fields.item, &[ex.target])?;
        let user = g.lookup(fields.user, &[ex.user])?;
        // remaining attribute fields, averaged into one slot
        let attrs = {
            let total = ex.user_attrs.len() + ex.target_attrs.len();
            if total == 0 {
                zero_row(g, fields.dim)
            } else {
                let mut acc: Option<Var> = None;
                let pairs = fields
                    .user_attrs
                    .iter()
                    .zip(&ex.user_attrs)
                    .chain(fields.item_attrs.iter().zip(&ex.target_attrs));
                for (table, &a) in pairs {
                    let v = g.embedding_bag(*table, vec![vec![(a, 1.0 / total as f64)]])?;
                    acc = Some(match acc {
                        Some(prev) => g.add(prev, v),
                        None => v,
                    });
                }
                acc.expect("non-empty")
            }
        };
        let mut parts = vec![pooled, target, user, attrs];
        if self.w_dim > 0 {
            parts.push(w.unwrap_or_else(|| zero_row(g, self.w_dim)));
        }
        let input = g.concat_cols(&parts);
        Ok(self.tower.forward(g, input))
    }
}

/// Inner-product retrieval model.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoTower {
    pub tower: Mlp,
    pub item_out: ParamId,
}

impl TwoTower {
    pub fn new<R: Rng>(store: &mut ParamStore, fields: &FieldEmbeddings, rng: &mut R) -> Result<Self> {
        let d = fields.dim;
        Ok(Self {
            tower: Mlp::new(store, "two_tower.user", &[d, d, d], rng)?,
            item_out: store.uniform("two_tower.item_out", fields.schema.items, d, init_bound(d), rng)?,
        })
    }

    /// User vector from the mean history embedding, plus `w` when given.
    pub fn user_vector(&self, g: &mut Graph, fields: &FieldEmbeddings, ex: &Example, w: Option<Var>) -> Result<Var> {
        let n = ex.history.len() as f64;
        let hist = g.embedding_bag(fields.item, vec![ex.history.iter().map(|&h| (h, 1.0 / n)).collect()])?;
        let u = self.tower.forward(g, hist);
        Ok(match w {
            Some(w) => g.add(u, w),
            None => u,
        })
    }

    /// `1 x n` scores of `user` against the given items.
    pub fn scores(&self, g: &mut Graph, user: Var, items: &[usize]) -> Result<Var> {
        let e = g.lookup(self.item_out, items)?;
        Ok(g.matmul_t(user, e))
    }

    /// Scores for every item index (including the OOV row at 0) without
    /// building a graph.
    pub fn score_all(&self, params: &ParamStore, user: &[f64]) -> Vec<f64> {
        params
            .get(self.item_out)
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(user).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    FmDeep(FmDeep),
    TargetAttention(TargetAttention),
    TwoTower(TwoTower),
}

impl Backbone {
    pub fn new<R: Rng>(
        kind: BackboneKind,
        store: &mut ParamStore,
        fields: &FieldEmbeddings,
        w_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            BackboneKind::FmDeep => Backbone::FmDeep(FmDeep::new(store, fields, w_dim, rng)?),
            BackboneKind::TargetAttention => Backbone::TargetAttention(TargetAttention::new(store, fields, w_dim, rng)?),
            BackboneKind::TwoTower => Backbone::TwoTower(TwoTower::new(store, fields, rng)?),
        })
    }

    /// CTR logit for ranking backbones.
    pub fn logit(&self, g: &mut Graph, fields: &FieldEmbeddings, ex: &Example, w: Option<Var>) -> Result<Var> {
        match self {
            Backbone::FmDeep(m) => m.logit(g, fields, ex, w),
            Backbone::TargetAttention(m) => m.logit(g, fields, ex, w),
            Backbone::TwoTower(_) => Err(Error::config("the two-tower backbone has no CTR logit")),
        }
    }
}
