//! Text encoders producing unit-norm embeddings, plus the embedding-pack
//! file format used to hand precomputed vectors to the pipeline.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const PACK_MAGIC: &str = "LCFE1";

/// A finite, L2-normalized embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    /// Normalizes `raw`; fails on a zero or non-finite vector.
    pub fn normalized(mut raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("non-finite embedding entry"));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numerical("cannot normalize a zero vector"));
        }
        raw.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(raw))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }

    pub fn dot(&self, other: &TextEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Cosine similarity of two raw vectors.
pub fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &TextEmbedding, b: &TextEmbedding) -> Result<f64> {
    cosine_raw(&a.0, &b.0)
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<TextEmbedding>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// FNV-1a followed by a splitmix64 finalizer. Stable across platforms and
/// toolchains, unlike `std`'s hasher.
pub(crate) fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing of word tokens into `dim` buckets.
///
/// Texts sharing words share buckets, so overlapping renderings land close
/// together under cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct HashingEncoder {
    seed: u64,
    dim: usize,
}

impl HashingEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("text dimension must be positive"));
        }
        Ok(Self { seed, dim })
    }

    /// Unnormalized bucket counts.
    pub fn raw(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in tokenize(text) {
            self.add_token(&mut v, &token);
            any = true;
        }
        if !any {
            self.add_token(&mut v, "\u{0}empty");
        }
        v
    }

    fn add_token(&self, v: &mut [f64], token: &str) {
        let h = stable_hash(self.seed, token.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        let raw = self.raw(text);
        // opposite-signed tokens can cancel exactly
        if raw.iter().all(|&x| x == 0.0) {
            let mut fallback = vec![0.0; self.dim];
            self.add_token(&mut fallback, "\u{0}empty");
            return TextEmbedding::normalized(fallback);
        }
        TextEmbedding::normalized(raw)
    }
}

/// Looks embeddings up by exact text key in a preloaded pack.
#[derive(Clone, Debug)]
pub struct FileEncoder {
    dim: usize,
    vectors: HashMap<String, TextEmbedding>,
}

impl FileEncoder {
    pub fn from_pack(pack: EmbeddingPack) -> Result<Self> {
        let dim = pack.dim;
        let mut vectors = HashMap::with_capacity(pack.rows.len());
        for (key, v) in pack.rows {
            let emb = TextEmbedding::normalized(v.into_iter().map(f64::from).collect())
                .map_err(|e| Error::data(format!("embedding for key {key:?}: {e}")))?;
            vectors.insert(key, emb);
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pack(read_pack(path)?)
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::data(format!("no embedding for key {text:?}")))
    }
}

/// Serializable description of which encoder to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    Synthetic { seed: u64, dim: usize },
    File { path: PathBuf },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Synthetic {
            seed: 0,
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            EncoderSpec::Synthetic { seed, dim } => Box::new(HashingEncoder::new(*seed, *dim)?),
            EncoderSpec::File { path } => Box::new(FileEncoder::load(path)?),
        })
    }
}

/// Contents of an embedding-pack file.
///
/// Layout: one JSON header line
/// `{"magic":"LCFE1","dim":D,"count":N,"encoding":"binary"|"text"}`, then
/// `N` rows. Binary rows are a little-endian `u32` key length, the UTF-8
/// key, then `D` little-endian `f32`s. Text rows are `key<TAB>v1 v2 ... vD`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingPack {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct PackHeader {
    magic: String,
    dim: usize,
    count: usize,
    #[serde(default = "binary_encoding")]
    encoding: String,
}

fn binary_encoding() -> String {
    "binary".into()
}

impl EmbeddingPack {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new() }
    }

    pub fn push(&mut self, key: impl Into<String>, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::data(format!(
                "pack row has dimension {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.rows.push((key.into(), v));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PackHeader {
            magic: PACK_MAGIC.into(),
            dim: self.dim,
            count: self.rows.len(),
            encoding: binary_encoding(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (key, v) in &self.rows {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = PackHeader {
            magic: PACK_MAGIC.into(),
            dim: self.dim,
            count: self.rows.len(),
            encoding: "text".into(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (key, v) in &self.rows {
            out.push_str(key);
            out.push('\t');
            let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&nums.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::data(format!("reading pack header: {e}")))?;
        let header: PackHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::data(format!("bad pack header: {e}")))?;
        if header.magic != PACK_MAGIC {
            return Err(Error::data(format!("bad pack magic {:?}", header.magic)));
        }
        let mut pack = EmbeddingPack::new(header.dim);
        match header.encoding.as_str() {
            "binary" => {
                for i in 0..header.count {
                    let truncated = |_| Error::data(format!("pack truncated at row {i}"));
                    let mut len = [0u8; 4];
                    reader.read_exact(&mut len).map_err(truncated)?;
                    let mut key = vec![0u8; u32::from_le_bytes(len) as usize];
                    reader.read_exact(&mut key).map_err(truncated)?;
                    let key = String::from_utf8(key)
                        .map_err(|_| Error::data(format!("pack row {i}: key is not UTF-8")))?;
                    let mut buf = vec![0u8; 4 * header.dim];
                    reader.read_exact(&mut buf).map_err(truncated)?;
                    let v = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    pack.rows.push((key, v));
                }
            }
            "text" => {
                for (i, line) in reader.lines().enumerate() {
                    let line = line.map_err(|e| Error::data(format!("pack row {i}: {e}")))?;
                    if line.is_empty() {
                        continue;
                    }
                    let (key, nums) = line
                        .rsplit_once('\t')
                        .ok_or_else(|| Error::data(format!("pack row {i}: missing tab")))?;
                    let v = nums
                        .split_whitespace()
                        .map(|t| t.parse::<f32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::data(format!("pack row {i}: {e}")))?;
                    pack.push(key, v)?;
                }
                if pack.rows.len() != header.count {
                    return Err(Error::data(format!(
                        "pack header promises {} rows, found {}",
                        header.count,
                        pack.rows.len()
                    )));
                }
            }
            other => return Err(Error::data(format!("unknown pack encoding {other:?}"))),
        }
        Ok(pack)
    }
}

pub fn write_pack(path: &Path, pack: &EmbeddingPack) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&pack.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_pack(path: &Path) -> Result<EmbeddingPack> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingPack::from_reader(file)
}
