//! The in-context example store: sampling, CoT generation behind a
//! provider boundary, and label-balanced, leakage-free nearest-neighbour
//! retrieval over key embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::seed;
use crate::textenc::{self, EmbeddingPack, HashingEncoder, TextEmbedding, TextEncoder};

/// Prompt template handed to a CoT generator; `{features}` and `{outcome}`
/// are substituted per example.
pub const COT_PROMPT: &str = include_str!("../assets/cot_prompt_v1.txt");

pub fn render_prompt(features: &str, label: u8) -> String {
    let outcome = if label == 1 { "interacted" } else { "did not interact" };
    COT_PROMPT
        .replace("{features}", features)
        .replace("{outcome}", outcome)
}

/// One stored in-context example.
#[derive(Clone, Debug, PartialEq)]
pub struct CoTRecord {
    pub id: u64,
    pub example: Example,
    pub label: u8,
    pub cot_text: Option<String>,
    pub cot_embedding: TextEmbedding,
    pub key_embedding: TextEmbedding,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchMode {
    Exact,
    /// Inverted-file search over spherical k-means cells.
    Approximate { probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub balance: bool,
    pub anti_leakage: bool,
    pub mode: SearchMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 4,
            balance: true,
            anti_leakage: true,
            mode: SearchMode::Exact,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.balance && self.k % 2 == 1 {
            return Err(Error::config(format!("K = {} must be even when balancing labels", self.k)));
        }
        if let SearchMode::Approximate { probes: 0 } = self.mode {
            return Err(Error::config("approximate search needs at least one probe"));
        }
        Ok(())
    }
}

/// Uniform sample without replacement of `round(ratio * N)` examples,
/// returned in their original order.
pub fn sample_subset(train: &[Example], ratio: f64, seed: u64) -> Result<Vec<Example>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("sampling ratio {ratio} outside (0, 1]")));
    }
    let m = (ratio * train.len() as f64).round() as usize;
    if m == 0 {
        return Err(Error::data(format!(
            "ratio {ratio} of {} examples selects nothing",
            train.len()
        )));
    }
    let mut rng = seed::rng(seed, "cot-sample");
    let mut picked = sample(&mut rng, train.len(), m).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| train[i].clone()).collect())
}

/// Source of chain-of-thought text and embeddings for an example.
pub trait CotProvider: Send + Sync {
    fn generate(&self, example: &Example, label: u8) -> Result<(Option<String>, TextEmbedding)>;
}

/// Deterministic stand-in for a generator: the embedding mixes a hash of
/// the example's features with a label direction,
/// `normalize((1 - signal) * features + signal * label_dir + noise * z)`,
/// where the two label directions are antipodal and `z` is seeded by the
/// example id.
#[derive(Clone, Debug)]
pub struct SyntheticCot {
    seed: u64,
    signal: f64,
    noise: f64,
    features: HashingEncoder,
    label_dir: Vec<f64>,
}

impl SyntheticCot {
    pub fn new(seed: u64, signal: f64, noise: f64, features: HashingEncoder) -> Result<Self> {
        if !(0.0..=1.0).contains(&signal) {
            return Err(Error::config(format!("signal strength {signal} outside [0, 1]")));
        }
        if noise < 0.0 {
            return Err(Error::config("noise must be non-negative"));
        }
        let dim = features.dim();
        let mut rng = seed::rng(seed, "cot-label-direction");
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let label_dir = TextEmbedding::normalized(raw)?.as_slice().to_vec();
        Ok(Self {
            seed,
            signal,
            noise,
            features,
            label_dir,
        })
    }
}

impl CotProvider for SyntheticCot {
    fn generate(&self, example: &Example, label: u8) -> Result<(Option<String>, TextEmbedding)> {
        let dim = self.features.dim();
        let feat = self.features.encode(&example.text)?;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let mut rng = seed::rng(self.seed ^ example.id.wrapping_mul(0x2545_f491_4f6c_dd1d), "cot-noise");
        let scale = self.noise / (dim as f64).sqrt();
        let v: Vec<f64> = (0..dim)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                (1.0 - self.signal) * feat.as_slice()[i] + self.signal * sign * self.label_dir[i] + scale * z
            })
            .collect();
        let verdict = if label == 1 { "fits" } else { "does not fit" };
        let text = format!(
            "The history outlines the user's interests; the target item {verdict} that profile."
        );
        Ok((Some(text), TextEmbedding::normalized(v)?))
    }
}

/// Precomputed CoT outputs keyed by example id.
#[derive(Clone, Debug, Default)]
pub struct FileCot {
    entries: HashMap<u64, (Option<String>, TextEmbedding)>,
}

impl FileCot {
    /// `pack` holds one embedding per example id (decimal key); `texts`
    /// optionally maps the same ids to CoT strings.
    pub fn new(pack: EmbeddingPack, mut texts: HashMap<u64, String>) -> Result<Self> {
        let mut entries = HashMap::with_capacity(pack.rows.len());
        for (key, v) in pack.rows {
            let id: u64 = key
                .parse()
                .map_err(|_| Error::data(format!("CoT pack key {key:?} is not an example id")))?;
            let emb = TextEmbedding::normalized(v.into_iter().map(f64::from).collect())?;
            entries.insert(id, (texts.remove(&id), emb));
        }
        Ok(Self { entries })
    }

    pub fn load(pack: &Path, texts: Option<&Path>) -> Result<Self> {
        let pack = textenc::read_pack(pack)?;
        let mut map = HashMap::new();
        if let Some(path) = texts {
            #[derive(Deserialize)]
            struct Row {
                id: u64,
                cot_text: String,
            }
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: Row = serde_json::from_str(&line)
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
                map.insert(row.id, row.cot_text);
            }
        }
        Self::new(pack, map)
    }
}

impl CotProvider for FileCot {
    fn generate(&self, example: &Example, _label: u8) -> Result<(Option<String>, TextEmbedding)> {
        self.entries
            .get(&example.id)
            .cloned()
            .ok_or_else(|| Error::data(format!("no CoT embedding for key {:?}", example.id.to_string())))
    }
}

/// Snaps an embedding onto the `f32` grid used on disk, so an in-memory
/// store and one read back from files are identical.
fn f32_exact(e: TextEmbedding) -> Result<TextEmbedding> {
    TextEmbedding::normalized(e.to_f32().into_iter().map(f64::from).collect())
}

/// Generates CoT outputs and key embeddings for the sampled examples.
/// Record ids follow the input order.
pub fn build_records(
    examples: &[Example],
    provider: &dyn CotProvider,
    encoder: &dyn TextEncoder,
) -> Result<Vec<CoTRecord>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (cot_text, cot) = provider.generate(ex, ex.label)?;
            let key = encoder.encode(&ex.text)?;
            Ok(CoTRecord {
                id: i as u64,
                example: ex.clone(),
                label: ex.label,
                cot_text,
                cot_embedding: f32_exact(cot)?,
                key_embedding: f32_exact(key)?,
                timestamp: ex.timestamp,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Position of the record in [`CoTStore::records`].
    pub index: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Retrieved {
    /// Ascending similarity; the most similar example comes last.
    pub hits: Vec<Hit>,
    /// One label class had fewer than `K / 2` eligible records.
    pub shortfall: bool,
}

#[derive(Debug, Clone)]
struct InvertedLists {
    centroids: Vec<Vec<f64>>,
    lists: Vec<Vec<usize>>,
}

/// Immutable index over key embeddings.
#[derive(Debug)]
pub struct CoTStore {
    records: Vec<CoTRecord>,
    dim: usize,
    keys: Vec<f64>,
    ivf: Option<InvertedLists>,
    imbalance: AtomicU64,
}

impl CoTStore {
    /// Builds an exact index; see [`CoTStore::with_inverted_lists`] for the
    /// approximate one.
    pub fn build(records: Vec<CoTRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.key_embedding.dim());
        let mut keys = Vec::with_capacity(records.len() * dim);
        let mut ids = std::collections::HashSet::new();
        for r in &records {
            if r.key_embedding.dim() != dim {
                return Err(Error::data(format!(
                    "record {} has key dimension {}, expected {dim}",
                    r.id,
                    r.key_embedding.dim()
                )));
            }
            if r.cot_embedding.dim() != records[0].cot_embedding.dim() {
                return Err(Error::data(format!("record {} has a mismatched CoT dimension", r.id)));
            }
            if !ids.insert(r.id) {
                return Err(Error::data(format!("duplicate record id {}", r.id)));
            }
            keys.extend_from_slice(r.key_embedding.as_slice());
        }
        Ok(Self {
            records,
            dim,
            keys,
            ivf: None,
            imbalance: AtomicU64::new(0),
        })
    }

    /// Adds an inverted-file index with `lists` spherical k-means cells
    /// (default `sqrt(M)`), enabling [`SearchMode::Approximate`].
    pub fn with_inverted_lists(mut self, lists: Option<usize>, seed: u64) -> Self {
        let m = self.records.len();
        if m == 0 {
            return self;
        }
        let nlist = lists.unwrap_or_else(|| (m as f64).sqrt().ceil() as usize).clamp(1, m);
        let mut rng = seed::rng(seed, "ivf");
        let mut centroids: Vec<Vec<f64>> = sample(&mut rng, m, nlist)
            .into_iter()
            .map(|i| self.key(i).to_vec())
            .collect();
        let mut assign = vec![0usize; m];
        for _ in 0..12 {
            for (i, a) in assign.iter_mut().enumerate() {
                *a = nearest_centroid(&centroids, self.key(i));
            }
            let mut sums = vec![vec![0.0; self.dim]; nlist];
            for (i, &a) in assign.iter().enumerate() {
                sums[a].iter_mut().zip(self.key(i)).for_each(|(s, k)| *s += k);
            }
            for (c, s) in centroids.iter_mut().zip(sums) {
                let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    *c = s.into_iter().map(|x| x / norm).collect();
                }
            }
        }
        let mut lists_out = vec![Vec::new(); nlist];
        for (i, &a) in assign.iter().enumerate() {
            lists_out[a].push(i);
        }
        self.ivf = Some(InvertedLists {
            centroids,
            lists: lists_out,
        });
        self
    }

    pub fn records(&self) -> &[CoTRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of retrievals so far that had to fill one class from the other.
    pub fn imbalance_count(&self) -> u64 {
        self.imbalance.load(Ordering::Relaxed)
    }

    fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    fn eligible(&self, i: usize, ts: i64, exclude: Option<u64>, cfg: &RetrievalConfig) -> bool {
        let r = &self.records[i];
        (!cfg.anti_leakage || r.timestamp < ts) && exclude != Some(r.example.id)
    }

    /// The `K` in-context examples for a query: strictly earlier records
    /// only (with anti-leakage on), never the query's own example, `K / 2`
    /// per label when balancing (filling from the other class on a
    /// shortfall), ordered by ascending similarity with ties on record id.
    pub fn retrieve(
        &self,
        query: &TextEmbedding,
        query_ts: i64,
        exclude_example: Option<u64>,
        cfg: &RetrievalConfig,
    ) -> Result<Retrieved> {
        cfg.validate()?;
        if cfg.k == 0 || self.records.is_empty() {
            return Ok(Retrieved::default());
        }
        if query.dim() != self.dim {
            return Err(Error::data(format!(
                "query dimension {} does not match store dimension {}",
                query.dim(),
                self.dim
            )));
        }
        let q = query.as_slice();
        let score = |i: usize| -> f64 { self.key(i).iter().zip(q).map(|(a, b)| a * b).sum() };

        let candidates: Vec<usize> = match (cfg.mode, &self.ivf) {
            (SearchMode::Approximate { probes }, Some(ivf)) => {
                let mut cells: Vec<(f64, usize)> = ivf
                    .centroids
                    .iter()
                    .enumerate()
                    .map(|(c, cent)| (cent.iter().zip(q).map(|(a, b)| a * b).sum(), c))
                    .collect();
                cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let need = if cfg.balance { cfg.k / 2 } else { cfg.k };
                let mut out = Vec::new();
                let (mut pos, mut neg) = (0, 0);
                for (probed, &(_, c)) in cells.iter().enumerate() {
                    for &i in &ivf.lists[c] {
                        if self.eligible(i, query_ts, exclude_example, cfg) {
                            out.push(i);
                            if self.records[i].label == 1 {
                                pos += 1;
                            } else {
                                neg += 1;
                            }
                        }
                    }
                    let enough = if cfg.balance {
                        pos >= need && neg >= need
                    } else {
                        pos + neg >= need
                    };
                    if probed + 1 >= probes && enough {
                        break;
                    }
                }
                out
            }
            _ => (0..self.records.len())
                .filter(|&i| self.eligible(i, query_ts, exclude_example, cfg))
                .collect(),
        };

        let ranked = |mut pool: Vec<Hit>, take: usize| -> Vec<Hit> {
            let order = |a: &Hit, b: &Hit| {
                b.similarity
                    .total_cmp(&a.similarity)
                    .then(self.records[a.index].id.cmp(&self.records[b.index].id))
            };
            if pool.len() > take && take > 0 {
                pool.select_nth_unstable_by(take - 1, order);
                pool.truncate(take);
            }
            pool.sort_by(order);
            pool.truncate(take);
            pool
        };
        let hits = |label: Option<u8>| -> Vec<Hit> {
            candidates
                .iter()
                .filter(|&&i| label.is_none_or(|l| self.records[i].label == l))
                .map(|&i| Hit {
                    index: i,
                    similarity: score(i),
                })
                .collect()
        };

        let mut shortfall = false;
        let mut chosen = if cfg.balance {
            let half = cfg.k / 2;
            let pos = ranked(hits(Some(1)), cfg.k);
            let neg = ranked(hits(Some(0)), cfg.k);
            shortfall = pos.len() < half || neg.len() < half;
            let take_pos = half.max(cfg.k.saturating_sub(neg.len())).min(pos.len());
            let take_neg = (cfg.k - take_pos).min(neg.len());
            let mut chosen = pos[..take_pos].to_vec();
            chosen.extend_from_slice(&neg[..take_neg]);
            chosen
        } else {
            ranked(hits(None), cfg.k)
        };
        if shortfall {
            self.imbalance.fetch_add(1, Ordering::Relaxed);
        }
        chosen.sort_by(|a, b| {
            a.similarity
                .total_cmp(&b.similarity)
                .then(self.records[a.index].id.cmp(&self.records[b.index].id))
        });
        Ok(Retrieved {
            hits: chosen,
            shortfall,
        })
    }

    /// Writes `store.jsonl` and `embeddings.lcfe` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("store.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let dim = self.dim;
        let cot_dim = self.records.first().map_or(0, |r| r.cot_embedding.dim());
        let mut keys = EmbeddingPack::new(dim);
        let mut cots = EmbeddingPack::new(cot_dim);
        for r in &self.records {
            let row = StoreRow {
                id: r.id,
                example_id: r.example.id,
                timestamp: r.timestamp,
                label: r.label,
                cot_text: r.cot_text.clone(),
                key_embedding_ref: format!("key/{}", r.id),
                cot_embedding_ref: format!("cot/{}", r.id),
            };
            keys.push(row.key_embedding_ref.clone(), r.key_embedding.to_f32())?;
            cots.push(row.cot_embedding_ref.clone(), r.cot_embedding.to_f32())?;
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        textenc::write_pack(&dir.join("keys.lcfe"), &keys)?;
        textenc::write_pack(&dir.join("cots.lcfe"), &cots)
    }

    /// Reads a store written by [`CoTStore::write`], resolving example ids
    /// against `examples`.
    pub fn read(dir: &Path, examples: &[Example]) -> Result<Vec<CoTRecord>> {
        let by_id: HashMap<u64, &Example> = examples.iter().map(|e| (e.id, e)).collect();
        let load = |name: &str| -> Result<HashMap<String, Vec<f32>>> {
            Ok(textenc::read_pack(&dir.join(name))?.rows.into_iter().collect())
        };
        let keys = load("keys.lcfe")?;
        let cots = load("cots.lcfe")?;
        let path = dir.join("store.jsonl");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: StoreRow = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let example = by_id
                .get(&row.example_id)
                .ok_or_else(|| Error::data(format!("store references unknown example {}", row.example_id)))?;
            let emb = |pack: &HashMap<String, Vec<f32>>, key: &str| -> Result<TextEmbedding> {
                let v = pack
                    .get(key)
                    .ok_or_else(|| Error::data(format!("no embedding for key {key:?}")))?;
                TextEmbedding::normalized(v.iter().map(|&x| f64::from(x)).collect())
            };
            records.push(CoTRecord {
                id: row.id,
                example: (*example).clone(),
                label: row.label,
                cot_text: row.cot_text,
                cot_embedding: emb(&cots, &row.cot_embedding_ref)?,
                key_embedding: emb(&keys, &row.key_embedding_ref)?,
                timestamp: row.timestamp,
            });
        }
        Ok(records)
    }
}

fn nearest_centroid(centroids: &[Vec<f64>], key: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, cent) in centroids.iter().enumerate() {
        let s: f64 = cent.iter().zip(key).map(|(a, b)| a * b).sum();
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreRow {
    id: u64,
    example_id: u64,
    timestamp: i64,
    label: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cot_text: Option<String>,
    key_embedding_ref: String,
    cot_embedding_ref: String,
}
