//! In-context token sequences and the small causal decoder that turns them
//! into the collaborative feature `w`.
//!
//! A sequence interleaves, for each retrieved example, a features token (R),
//! a reasoning token (C) and a label token (L), and ends with the query's
//! features token:
//!
//! ```text
//! R1 C1 L1  R2 C2 L2  ...  RK CK LK  Rq
//! ```

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::{init_bound, FieldEmbeddings, Linear};
use crate::cotstore::CoTRecord;
use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::textenc::TextEmbedding;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IctConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub k_max: usize,
    pub d_text: usize,
    pub dropout: f64,
}

impl Default for IctConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 2,
            k_max: 8,
            d_text: crate::textenc::DEFAULT_TEXT_DIM,
            dropout: 0.0,
        }
    }
}

impl IctConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.d_text == 0 {
            return Err(Error::config("text embedding dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        3 * self.k_max + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Features,
    Cot,
    Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Context(usize),
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub source: TokenSource,
}

/// An assembled sequence. Borrowed payloads are resolved at embedding time.
#[derive(Clone, Debug)]
pub struct IctSequence<'a> {
    pub tokens: Vec<Token>,
    pub context: Vec<&'a CoTRecord>,
    pub query: &'a Example,
    pub query_text: &'a TextEmbedding,
    /// Query R token omits target-item fields (retrieval task).
    pub mask_target: bool,
    /// Positions of every R token, query last.
    pub features_positions: Vec<usize>,
}

impl<'a> IctSequence<'a> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    pub fn query_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn has_cot(&self) -> bool {
        self.tokens.iter().any(|t| t.kind == TokenKind::Cot)
    }
}

/// Builds `(R, C, L) x K` followed by the query's R token. Without reasoning
/// tokens the pattern becomes `(R, L) x K` then R.
pub fn assemble<'a>(
    query: &'a Example,
    query_text: &'a TextEmbedding,
    retrieved: &[&'a CoTRecord],
    mask_target: bool,
    with_cot: bool,
) -> IctSequence<'a> {
    let mut tokens = Vec::with_capacity(3 * retrieved.len() + 1);
    let mut features_positions = Vec::with_capacity(retrieved.len() + 1);
    for k in 0..retrieved.len() {
        let source = TokenSource::Context(k);
        features_positions.push(tokens.len());
        tokens.push(Token {
            kind: TokenKind::Features,
            source,
        });
        if with_cot {
            tokens.push(Token {
                kind: TokenKind::Cot,
                source,
            });
        }
        tokens.push(Token {
            kind: TokenKind::Label,
            source,
        });
    }
    features_positions.push(tokens.len());
    tokens.push(Token {
        kind: TokenKind::Features,
        source: TokenSource::Query,
    });
    IctSequence {
        tokens,
        context: retrieved.to_vec(),
        query,
        query_text,
        mask_target,
        features_positions,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: IctConfig,
    pub text_proj: Linear,
    pub features_proj: Linear,
    pub cot1: Linear,
    pub cot2: Linear,
    pub label: ParamId,
    pub position: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &IctConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let table = init_bound(d);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("ict.block{l}");
                Ok(BlockParams {
                    ln1_gain: store.ones(format!("{p}.ln1.gain"), 1, d)?,
                    ln1_bias: store.zeros(format!("{p}.ln1.bias"), 1, d)?,
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng)?,
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng)?,
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng)?,
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng)?,
                    ln2_gain: store.ones(format!("{p}.ln2.gain"), 1, d)?,
                    ln2_bias: store.zeros(format!("{p}.ln2.bias"), 1, d)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, 4 * d, rng)?,
                    ff2: Linear::new(store, &format!("{p}.ff2"), 4 * d, d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            text_proj: Linear::new(store, "ict.text_proj", config.d_text, d, rng)?,
            features_proj: Linear::new(store, "ict.features_proj", 2 * d, d, rng)?,
            cot1: Linear::new(store, "ict.cot1", config.d_text, d, rng)?,
            cot2: Linear::new(store, "ict.cot2", d, d, rng)?,
            label: store.uniform("ict.label", 2, d, table, rng)?,
            position: store.uniform("ict.position", config.max_len(), d, table, rng)?,
            blocks,
        })
    }
}

/// Token embeddings plus the reasoning-token rows before positions were
/// added (the reconstruction targets).
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub tokens: Var,
    pub cot_rows: Option<Var>,
}

fn stack(rows: &[&[f64]], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::data(format!("embedding of dim {} where {dim} was expected", row.len())));
        }
        out.row_mut(r).assign(&ndarray::ArrayView1::from(*row));
    }
    Ok(out)
}

/// Embeds every token and adds the positional rows.
pub fn embed_tokens(
    g: &mut Graph,
    seq: &IctSequence,
    params: &DecoderParams,
    fields: &FieldEmbeddings,
) -> Result<Embedded> {
    let cfg = &params.config;
    let n = seq.len();
    if n > cfg.max_len() {
        return Err(Error::config(format!(
            "sequence of {n} tokens exceeds the positional table ({})",
            cfg.max_len()
        )));
    }
    let k = seq.context_len();

    // features tokens: context examples in order, then the query
    let mut payloads: Vec<(&Example, bool)> = seq.context.iter().map(|r| (&r.example, false)).collect();
    payloads.push((seq.query, seq.mask_target));
    let ids = fields.field_means(g, &payloads)?;
    let mut texts: Vec<&[f64]> = seq.context.iter().map(|r| r.key_embedding.as_slice()).collect();
    texts.push(seq.query_text.as_slice());
    let texts = g.constant(stack(&texts, cfg.d_text)?);
    let texts = params.text_proj.forward(g, texts);
    let features = g.concat_cols(&[ids, texts]);
    let features = params.features_proj.forward(g, features);

    let cot_rows = if seq.has_cot() && k > 0 {
        let cots: Vec<&[f64]> = seq.context.iter().map(|r| r.cot_embedding.as_slice()).collect();
        let c = g.constant(stack(&cots, cfg.d_text)?);
        let c = params.cot1.forward(g, c);
        let c = g.gelu(c);
        Some(params.cot2.forward(g, c))
    } else {
        None
    };

    let labels = if k > 0 {
        let idx: Vec<usize> = seq.context.iter().map(|r| r.label as usize).collect();
        Some(g.lookup(params.label, &idx)?)
    } else {
        None
    };

    let rows = seq
        .tokens
        .iter()
        .map(|t| {
            let r = match t.source {
                TokenSource::Context(i) => i,
                TokenSource::Query => k,
            };
            match t.kind {
                TokenKind::Features => (features, r),
                TokenKind::Cot => (cot_rows.expect("cot rows"), r),
                TokenKind::Label => (labels.expect("label rows"), r),
            }
        })
        .collect();
    let e = g.assemble_rows(rows);
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.lookup(params.position, &positions)?;
    Ok(Embedded {
        tokens: g.add(e, pos),
        cot_rows,
    })
}

fn check_finite(g: &Graph, v: Var, layer: usize) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite activation in decoder layer {layer}")))
    }
}

fn dropout<R: Rng>(g: &mut Graph, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = g.shape(x);
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn((r, c), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
            let mask = g.constant(mask);
            g.mul(x, mask)
        }
        _ => x,
    }
}

/// Pre-norm causal transformer blocks. Dropout applies only when an RNG is
/// supplied (training).
pub fn decoder_forward<R: Rng>(g: &mut Graph, e: Var, params: &DecoderParams, mut rng: Option<&mut R>) -> Result<Var> {
    let p = params.config.dropout;
    let mut x = e;
    check_finite(g, x, 0)?;
    for (l, b) in params.blocks.iter().enumerate() {
        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS);
        let q = b.q.forward(g, h);
        let k = b.k.forward(g, h);
        let v = b.v.forward(g, h);
        let a = g.attention(q, k, v, params.config.heads, true);
        let a = b.o.forward(g, a);
        let a = dropout(g, a, p, rng.as_deref_mut());
        x = g.add(x, a);

        let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS);
        let f = b.ff1.forward(g, h);
        let f = g.gelu(f);
        let f = b.ff2.forward(g, f);
        let f = dropout(g, f, p, rng.as_deref_mut());
        x = g.add(x, f);
        check_finite(g, x, l + 1)?;
    }
    Ok(x)
}

/// Last hidden row: the representation at the query's features token.
pub fn cf_feature(g: &mut Graph, h: Var) -> Var {
    let (n, _) = g.shape(h);
    g.row(h, n - 1)
}

pub fn mean_pool_feature(g: &mut Graph, e: Var) -> Var {
    g.mean_rows(e)
}

/// Mean of `1 - cos(c_k, h(r_k))` over the context examples, with the
/// targets detached. Zero for an empty context.
pub fn recon_loss(g: &mut Graph, h: Var, seq: &IctSequence, targets: Option<Var>) -> Result<Var> {
    let k = seq.context_len();
    let Some(targets) = targets.filter(|_| k > 0) else {
        return Ok(g.constant(Array2::zeros((1, 1))));
    };
    let t = g.value(targets).to_owned();
    let picks = seq.features_positions[..k].iter().map(|&p| (h, p)).collect();
    let hr = g.assemble_rows(picks);
    g.cosine_distance(hr, t)
}
