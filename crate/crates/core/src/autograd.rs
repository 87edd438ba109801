//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] is built once per example: every operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape in
//! reverse, accumulating parameter gradients into a [`Gradients`] buffer.
//! Everything is `f64`; the models here are small enough that the extra
//! precision is free and it keeps finite-difference checks meaningful.
//!
//! Parameters enter the tape either whole ([`Graph::param`]) or through
//! [`Graph::embedding_bag`], which reads weighted sums of table rows and
//! scatters gradients back into only the touched rows.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

/// Lower clamp applied to sigmoid probabilities in the log-loss.
pub const PROB_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    EmbeddingBag {
        table: ParamId,
        bags: Vec<Vec<(usize, f64)>>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var, Array2<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    AssembleRows(Vec<(Var, usize)>),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    RepeatRows(Var),
    Reshape(Var),
    Bce {
        logit: Var,
        label: f64,
    },
    SoftmaxXent {
        logits: Var,
        target: usize,
    },
    CosineDistance {
        h: Var,
        targets: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

/// Tape of operations over one parameter set.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Tanh-approximated GELU and its derivative.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn standard(view: ArrayView2<'_, f64>) -> Array2<f64> {
    view.as_standard_layout().into_owned()
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn row_constant(&mut self, row: &[f64]) -> Var {
        let value = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Row `r` of the output is `sum(w * table[i])` over the pairs of bag `r`;
    /// an empty bag yields a zero row.
    pub fn embedding_bag(&mut self, table: ParamId, bags: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let t = self.params.get(table);
        let (rows, cols) = t.dim();
        let mut out = Array2::zeros((bags.len(), cols));
        for (r, bag) in bags.iter().enumerate() {
            for &(idx, w) in bag {
                if idx >= rows {
                    return Err(Error::data(format!(
                        "index {idx} out of range for table {:?} with {rows} rows",
                        self.params.name(table)
                    )));
                }
                out.row_mut(r).scaled_add(w, &t.row(idx));
            }
        }
        Ok(self.push(out, Op::EmbeddingBag { table, bags }))
    }

    /// Plain row lookup: output row `r` is `table[indices[r]]`.
    pub fn lookup(&mut self, table: ParamId, indices: &[usize]) -> Result<Var> {
        let bags = indices.iter().map(|&i| vec![(i, 1.0)]).collect();
        self.embedding_bag(table, bags)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.raw_dim());
        let mut dv = Array2::zeros(x.raw_dim());
        ndarray::Zip::from(&mut v).and(&mut dv).and(&x).for_each(|y, dy, &x| {
            (*y, *dy) = gelu_with_grad(x);
        });
        self.push(v, Op::Gelu(a, dv))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId, eps: f64) -> Var {
        let gain_v = self.param(gain);
        let bias_v = self.param(bias);
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (c, x) in row.iter().enumerate() {
                xhat[[r, c]] = (x - mean) * rs;
            }
        }
        let out = &(&xhat * &self.value(gain_v)) + &self.value(bias_v);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain: gain_v,
                bias: bias_v,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values (all `n x d`). With `causal`, position `t`
    /// only attends to positions `<= t`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (n, d) = self.shape(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let row = row.as_slice_mut().expect("contiguous");
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            *x * scale
                        };
                    }
                    softmax_row(row);
                }
                out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = standard(self.value(a));
        for mut row in v.rows_mut() {
            softmax_row(row.as_slice_mut().expect("contiguous"));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = standard(self.value(a).t());
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Builds a matrix whose row `r` is row `sources[r].1` of `sources[r].0`.
    pub fn assemble_rows(&mut self, sources: Vec<(Var, usize)>) -> Var {
        let cols = sources.first().map(|&(v, _)| self.shape(v).1).unwrap_or(0);
        let mut out = Array2::zeros((sources.len(), cols));
        for (r, &(v, row)) in sources.iter().enumerate() {
            out.row_mut(r).assign(&self.value(v).row(row));
        }
        self.push(out, Op::AssembleRows(sources))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let sources = parts
            .iter()
            .flat_map(|&p| (0..self.shape(p).0).map(move |r| (p, r)))
            .collect();
        self.assemble_rows(sources)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.assemble_rows(vec![(a, r)])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Stacks a `1 x n` row `count` times.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Var {
        let row = self.value(a).row(0).to_owned();
        let v = Array2::from_shape_fn((count, row.len()), |(_, c)| row[c]);
        self.push(v, Op::RepeatRows(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Binary cross-entropy on a `1 x 1` logit with probabilities clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Var {
        let loss = bce_value(self.scalar(logit), label);
        self.push(Array2::from_elem((1, 1), loss), Op::Bce { logit, label })
    }

    /// Cross-entropy of class `target` under a softmax over the `1 x n` logits.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Var {
        let row = self.value(logits).row(0).to_owned();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        self.push(Array2::from_elem((1, 1), loss), Op::SoftmaxXent { logits, target })
    }

    /// Mean over rows of `1 - cos(h_k, t_k)`. Targets are constants.
    pub fn cosine_distance(&mut self, h: Var, targets: Array2<f64>) -> Result<Var> {
        let hv = self.value(h);
        if hv.dim() != targets.dim() {
            return Err(Error::numerical(format!(
                "cosine distance shape mismatch {:?} vs {:?}",
                hv.dim(),
                targets.dim()
            )));
        }
        let n = hv.nrows();
        let mut total = 0.0;
        for (hr, tr) in hv.rows().into_iter().zip(targets.rows()) {
            let hn = hr.dot(&hr).sqrt();
            let tn = tr.dot(&tr).sqrt();
            if hn == 0.0 || tn == 0.0 {
                return Err(Error::numerical("zero-norm vector in cosine distance"));
            }
            total += 1.0 - hr.dot(&tr) / (hn * tn);
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::CosineDistance { h, targets }))
    }

    /// Accumulates `d root / d param` into `grads`. `root` must be `1 x 1`.
    pub fn backward(&self, root: Var, grads: &mut Gradients) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut adj: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => *grads.get_mut(*id) += &g,
                Op::EmbeddingBag { table, bags } => {
                    let tg = grads.get_mut(*table);
                    for (r, bag) in bags.iter().enumerate() {
                        for &(idx, w) in bag {
                            tg.row_mut(idx).scaled_add(w, &g.row(r));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(&self.value(*b));
                    let gb = g.t().dot(&self.value(*a));
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj[a.0], g);
                    accumulate(&mut adj[row.0], gr);
                }
                Op::Scale(a, f) => accumulate(&mut adj[a.0], g.mapv(|x| x * f)),
                Op::Gelu(a, dv) => {
                    let ga = &g * dv;
                    accumulate(&mut adj[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dhx = dh.dot(&xh);
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] =
                                rstd[r] / d * (d * dh[c] - sum_dh - xh[c] * sum_dhx);
                        }
                    }
                    accumulate(&mut adj[x.0], gx);
                    accumulate(&mut adj[gain.0], gg);
                    accumulate(&mut adj[bias.0], gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros((n, d));
                    let mut gk = Array2::zeros((n, d));
                    let mut gv = Array2::zeros((n, d));
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        let dp = go.dot(&vv.slice(cols).t());
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = &dp * p;
                        for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                            let dot = row.sum();
                            for (c, x) in row.iter_mut().enumerate() {
                                *x -= p[[r, c]] * dot;
                            }
                        }
                        ds.mapv_inplace(|x| x * scale);
                        gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut adj[q.0], gq);
                    accumulate(&mut adj[k.0], gk);
                    accumulate(&mut adj[v.0], gv);
                }
                Op::SoftmaxRows(a) => {
                    let p = self.nodes[i].value.as_ref().expect("value");
                    let mut ga = &g * p;
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let dot = row.sum();
                        for (c, x) in row.iter_mut().enumerate() {
                            *x -= p[[r, c]] * dot;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut adj[a.0], standard(g.t())),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut adj[p.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::AssembleRows(sources) => {
                    for (r, &(v, row)) in sources.iter().enumerate() {
                        let slot = &mut adj[v.0];
                        if slot.is_none() {
                            *slot = Some(Array2::zeros(self.value(v).raw_dim()));
                        }
                        slot.as_mut()
                            .expect("initialized")
                            .row_mut(row)
                            .scaled_add(1.0, &g.row(r));
                    }
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.shape(*a);
                    let row = g.row(0).mapv(|x| x / n as f64);
                    let ga = Array2::from_shape_fn((n, d), |(_, c)| row[c]);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SumRows(a) => {
                    let (n, d) = self.shape(*a);
                    let ga = Array2::from_shape_fn((n, d), |(_, c)| g[[0, c]]);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::RepeatRows(a) => {
                    accumulate(&mut adj[a.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut adj[a.0], Array2::from_shape_vec(dim, flat).expect("shape"));
                }
                Op::Bce { logit, label } => {
                    let p = sigmoid(self.scalar(*logit));
                    let local = if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        p - label
                    } else {
                        0.0
                    };
                    accumulate(&mut adj[logit.0], Array2::from_elem((1, 1), local * g[[0, 0]]));
                }
                Op::SoftmaxXent { logits, target } => {
                    let mut p = standard(self.value(*logits));
                    softmax_row(p.as_slice_mut().expect("contiguous"));
                    p[[0, *target]] -= 1.0;
                    accumulate(&mut adj[logits.0], p.mapv(|x| x * g[[0, 0]]));
                }
                Op::CosineDistance { h, targets } => {
                    let hv = self.value(*h);
                    let n = hv.nrows() as f64;
                    let mut gh = Array2::zeros(hv.raw_dim());
                    for (r, (hr, tr)) in hv.rows().into_iter().zip(targets.rows()).enumerate() {
                        let hn = hr.dot(&hr).sqrt();
                        let tn = tr.dot(&tr).sqrt();
                        let cos = hr.dot(&tr) / (hn * tn);
                        for c in 0..hr.len() {
                            let dcos = tr[c] / (hn * tn) - cos * hr[c] / (hn * hn);
                            gh[[r, c]] = -dcos / n * g[[0, 0]];
                        }
                    }
                    accumulate(&mut adj[h.0], gh);
                }
            }
        }
    }
}

/// Clamped binary cross-entropy of a logit.
pub fn bce_value(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences against the tape for every entry of every param.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut grads = store.zero_grads();
        {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root, &mut grads);
        }
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let r = f(&mut g);
            g.scalar(r)
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let dim = store.get(id).raw_dim();
            let mut numeric = Array2::zeros(dim);
            for idx in ndarray::indices(store.get(id).raw_dim()) {
                let orig = store.get(id)[idx];
                store.get_mut(id)[idx] = orig + h;
                let up = eval(store);
                store.get_mut(id)[idx] = orig - h;
                let down = eval(store);
                store.get_mut(id)[idx] = orig;
                numeric[idx] = (up - down) / (2.0 * h);
            }
            let analytic = grads.get(id);
            let diff = (analytic - &numeric).mapv(|x| x * x).sum().sqrt();
            let scale = analytic.mapv(|x| x * x).sum().sqrt() + numeric.mapv(|x| x * x).sum().sqrt();
            assert!(
                diff <= 1e-6 || diff / scale <= 1e-5,
                "{}: diff {diff} scale {scale}",
                store.name(id)
            );
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.uniform(n, r, c, 1.0, &mut rng).unwrap();
        }
        s
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut s = store_with(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5), ("w", 5, 1)], 1);
        check(&mut s, |g| {
            let ids: Vec<_> = g.params().ids().collect();
            let x = g.param(ids[0]);
            let y = g.layer_norm(x, ids[1], ids[2], 1e-5);
            let y = g.gelu(y);
            let w = g.param(ids[3]);
            let z = g.matmul(y, w);
            let z = g.mul(z, z);
            g.sum_all(z)
        });
    }

    #[test]
    fn attention_gradients_causal_and_full() {
        for causal in [true, false] {
            let mut s = store_with(&[("q", 4, 6), ("k", 4, 6), ("v", 4, 6), ("w", 6, 1)], 2);
            check(&mut s, |g| {
                let ids: Vec<_> = g.params().ids().collect();
                let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let a = g.attention(q, k, v, 2, causal);
                let w = g.param(ids[3]);
                let z = g.matmul(a, w);
                let z = g.gelu(z);
                g.sum_all(z)
            });
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let mut s = store_with(&[("t", 5, 3), ("a", 2, 3), ("r", 1, 3)], 3);
        check(&mut s, |g| {
            let ids: Vec<_> = g.params().ids().collect();
            let bag = g
                .embedding_bag(ids[0], vec![vec![(1, 0.5), (3, 0.5)], vec![], vec![(1, 2.0)]])
                .unwrap();
            let a = g.param(ids[1]);
            let r = g.param(ids[2]);
            let rows = g.concat_rows(&[bag, a]);
            let rows = g.add_row(rows, r);
            let rep = g.repeat_rows(r, 5);
            let prod = g.mul(rows, rep);
            let t = g.transpose(prod);
            let sm = g.softmax_rows(t);
            let flat = g.reshape(sm, 1, 15);
            let both = g.concat_cols(&[flat, flat]);
            let m = g.mean_rows(rows);
            let sr = g.sum_rows(rows);
            let d = g.sub(m, sr);
            let dt = g.matmul_t(d, rows);
            let xent = g.softmax_xent(dt, 2);
            let q = g.scale(both, 0.3);
            let q = g.sum_all(q);
            let sel = g.row(rows, 4);
            let cos = g
                .cosine_distance(sel, Array2::from_shape_vec((1, 3), vec![0.3, -1.0, 0.2]).unwrap())
                .unwrap();
            let lg = g.bce_with_logit(q, 1.0);
            let tot = g.add(xent, cos);
            g.add(tot, lg)
        });
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_value(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(50.0, 1.0) < 1e-6);
    }

    #[test]
    fn embedding_bag_rejects_out_of_range() {
        let s = store_with(&[("t", 2, 2)], 0);
        let mut g = Graph::new(&s);
        let id = s.id("t").unwrap();
        assert!(g.lookup(id, &[2]).is_err());
    }
}
