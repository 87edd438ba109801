//! Interaction logs, vocabularies, leave-one-out splits, negative sampling
//! and the textual rendering of each example.
//!
//! The raw log is newline-delimited JSON, one positive interaction per
//! line:
//!
//! ```text
//! {"user_id":"u1","item_id":"i9","timestamp":1546300800,
//!  "user_attrs":{"segment":"a"},"item_attrs":{"title":"Trail Tent","brand":"acme"}}
//! ```
//!
//! Split files use the same shape plus `id`, `label` and `history` (item ids,
//! oldest first).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Maximum number of history items kept per example.
pub const MAX_HISTORY: usize = 10;
/// Users with fewer positives are dropped before splitting.
pub const MIN_POSITIVES: usize = 3;
pub const OOV: usize = 0;

fn default_label() -> u8 {
    1
}

/// One logged event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    #[serde(default = "default_label")]
    pub label: u8,
    #[serde(default)]
    pub user_attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub item_attrs: BTreeMap<String, String>,
}

impl Interaction {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.is_empty() || self.item_id.is_empty() {
            return Err("empty user_id or item_id".into());
        }
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        if self.label > 1 {
            return Err(format!("label {} is not binary", self.label));
        }
        Ok(())
    }
}

/// Inclusive range of unix seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeRange {
    pub start: i64,
    pub end: i64,
}

impl TimeRange {
    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts <= self.end
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    pub filtered: usize,
}

/// Reads a log, skipping (and counting) malformed lines. The result is
/// sorted by `(user_id, timestamp)`, keeping file order among ties.
pub fn load_interactions(path: &Path, filter: Option<TimeRange>) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Interaction>(&line)
            .map_err(|e| e.to_string())
            .and_then(|i| i.validate().map(|_| i));
        match parsed {
            Ok(i) if filter.is_some_and(|f| !f.contains(i.timestamp)) => report.filtered += 1,
            Ok(i) => report.interactions.push(i),
            Err(msg) => {
                log::warn!("{}:{}: skipping malformed record: {msg}", path.display(), lineno + 1);
                report.malformed += 1;
            }
        }
    }
    if report.interactions.is_empty() {
        return Err(Error::data(format!("{}: no usable interactions", path.display())));
    }
    report
        .interactions
        .sort_by(|a, b| (&a.user_id, a.timestamp).cmp(&(&b.user_id, b.timestamp)));
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl FieldVocab {
    fn from_tokens(tokens: BTreeSet<&str>) -> Self {
        let mut all = vec!["<oov>".to_string()];
        all.extend(tokens.into_iter().map(str::to_string));
        let index = all
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens: all, index }
    }

    /// Index of `token`, or [`OOV`] when unseen.
    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Size including the OOV slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }
}

/// Token-to-index maps per feature field. Index 0 of every field is OOV;
/// real tokens are numbered in sorted order, so the vocab depends only on
/// the set of tokens seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    pub users: FieldVocab,
    pub items: FieldVocab,
    pub user_fields: Vec<String>,
    pub item_fields: Vec<String>,
    pub user_attrs: Vec<FieldVocab>,
    pub item_attrs: Vec<FieldVocab>,
}

impl Vocab {
    pub fn build<'a>(records: impl IntoIterator<Item = &'a Interaction> + Clone) -> Self {
        let mut user_fields = BTreeSet::new();
        let mut item_fields = BTreeSet::new();
        for r in records.clone() {
            user_fields.extend(r.user_attrs.keys().map(String::as_str));
            item_fields.extend(r.item_attrs.keys().map(String::as_str));
        }
        let field_vocab = |field: &str, user: bool| {
            let tokens = records
                .clone()
                .into_iter()
                .filter_map(|r| {
                    let attrs = if user { &r.user_attrs } else { &r.item_attrs };
                    attrs.get(field).map(String::as_str)
                })
                .collect();
            FieldVocab::from_tokens(tokens)
        };
        Vocab {
            users: FieldVocab::from_tokens(records.clone().into_iter().map(|r| r.user_id.as_str()).collect()),
            items: FieldVocab::from_tokens(records.clone().into_iter().map(|r| r.item_id.as_str()).collect()),
            user_attrs: user_fields.iter().map(|f| field_vocab(f, true)).collect(),
            item_attrs: item_fields.iter().map(|f| field_vocab(f, false)).collect(),
            user_fields: user_fields.into_iter().map(str::to_string).collect(),
            item_fields: item_fields.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn encode_user_attrs(&self, attrs: &BTreeMap<String, String>) -> Vec<usize> {
        self.user_fields
            .iter()
            .zip(&self.user_attrs)
            .map(|(f, v)| attrs.get(f).map_or(OOV, |t| v.get(t)))
            .collect()
    }

    pub fn encode_item_attrs(&self, attrs: &BTreeMap<String, String>) -> Vec<usize> {
        self.item_fields
            .iter()
            .zip(&self.item_attrs)
            .map(|(f, v)| attrs.get(f).map_or(OOV, |t| v.get(t)))
            .collect()
    }
}

/// Attribute indices per item index (row 0 is the OOV item).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemCatalog {
    pub attrs: Vec<Vec<usize>>,
}

impl ItemCatalog {
    fn build<'a>(vocab: &Vocab, records: impl IntoIterator<Item = &'a Interaction>) -> Self {
        let mut attrs = vec![vec![OOV; vocab.item_fields.len()]; vocab.items.len()];
        let mut seen = vec![false; vocab.items.len()];
        for r in records {
            let idx = vocab.items.get(&r.item_id);
            if !seen[idx] {
                seen[idx] = true;
                attrs[idx] = vocab.encode_item_attrs(&r.item_attrs);
            }
        }
        Self { attrs }
    }

    /// Number of real items (excluding OOV).
    pub fn item_count(&self) -> usize {
        self.attrs.len().saturating_sub(1)
    }
}

/// A model-ready example: indexed features plus the rendered text.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub user: usize,
    pub user_attrs: Vec<usize>,
    /// Item indices, oldest first, all strictly earlier than `timestamp`.
    pub history: Vec<usize>,
    pub target: usize,
    pub target_attrs: Vec<usize>,
    pub timestamp: i64,
    pub label: u8,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[Example]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub reviews: usize,
    pub sparsity_pct: f64,
    pub dropped_users: usize,
}

/// Vocabulary, catalog and splits together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub catalog: ItemCatalog,
    pub split: DatasetSplit,
    pub dropped_users: usize,
}

fn render_item(vocab: &Vocab, catalog: &ItemCatalog, item: usize) -> String {
    let attrs = catalog.attrs.get(item);
    let attr = |name: &str| -> Option<&str> {
        let pos = vocab.item_fields.iter().position(|f| f == name)?;
        let idx = *attrs?.get(pos)?;
        (idx != OOV).then(|| vocab.item_attrs[pos].token(idx)).flatten()
    };
    let name = attr("title")
        .or_else(|| (item != OOV).then(|| vocab.items.token(item)).flatten())
        .unwrap_or("unknown");
    let details: Vec<String> = vocab
        .item_fields
        .iter()
        .filter(|f| f.as_str() != "title")
        .map(|f| format!("{f}: {}", attr(f).unwrap_or("unknown")))
        .collect();
    if details.is_empty() {
        name.to_string()
    } else {
        format!("{name} ({})", details.join(", "))
    }
}

fn render(vocab: &Vocab, catalog: &ItemCatalog, ex: &Example, with_target: bool) -> String {
    let mut out = String::new();
    if with_target {
        out.push_str(
            "Decide whether the user is likely to be interested in the target item, \
             given their past interactions.",
        );
    } else {
        out.push_str("Describe what the user is likely to interact with next, given their past interactions.");
    }
    if !vocab.user_fields.is_empty() {
        let profile: Vec<String> = vocab
            .user_fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let idx = ex.user_attrs.get(i).copied().unwrap_or(OOV);
                let tok = (idx != OOV)
                    .then(|| vocab.user_attrs[i].token(idx))
                    .flatten()
                    .unwrap_or("unknown");
                format!("{f}: {tok}")
            })
            .collect();
        out.push_str(&format!(" User profile: {}.", profile.join(", ")));
    }
    if ex.history.is_empty() {
        out.push_str(" The user has no prior interactions.");
    } else {
        out.push_str(" History, oldest first:");
        for (n, &item) in ex.history.iter().enumerate() {
            out.push_str(&format!(" {}. {};", n + 1, render_item(vocab, catalog, item)));
        }
    }
    if with_target {
        out.push_str(&format!(" Target item: {}.", render_item(vocab, catalog, ex.target)));
    }
    out
}

/// Instruction-style rendering of an example's features. Never mentions
/// the label.
pub fn render_text(vocab: &Vocab, catalog: &ItemCatalog, ex: &Example) -> String {
    render(vocab, catalog, ex, true)
}

/// Rendering with every target-item detail withheld, for the retrieval task.
pub fn render_text_masked(vocab: &Vocab, catalog: &ItemCatalog, ex: &Example) -> String {
    render(vocab, catalog, ex, false)
}

/// Leave-one-out split over positives: per user the last interaction is
/// test, the second-to-last valid, the rest train. Users with fewer than
/// [`MIN_POSITIVES`] interactions are dropped and counted.
pub fn build_splits(interactions: &[Interaction]) -> Result<Dataset> {
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for i in interactions {
        by_user.entry(&i.user_id).or_default().push(i);
    }
    let mut dropped = 0;
    let mut kept: Vec<Vec<&Interaction>> = Vec::new();
    for (_, mut events) in by_user {
        if events.len() < MIN_POSITIVES {
            dropped += 1;
            continue;
        }
        // stable: ties keep input order
        events.sort_by_key(|e| e.timestamp);
        kept.push(events);
    }
    let retained: Vec<&Interaction> = kept.iter().flatten().copied().collect();
    let vocab = Vocab::build(retained.iter().copied());
    let catalog = ItemCatalog::build(&vocab, retained.iter().copied());

    let mut split = DatasetSplit::default();
    for events in &kept {
        let n = events.len();
        for (pos, e) in events.iter().enumerate() {
            let history: Vec<usize> = events[..pos]
                .iter()
                .filter(|h| h.timestamp < e.timestamp)
                .map(|h| vocab.items.get(&h.item_id))
                .collect();
            let history = history[history.len().saturating_sub(MAX_HISTORY)..].to_vec();
            let target = vocab.items.get(&e.item_id);
            let mut ex = Example {
                id: 0,
                user: vocab.users.get(&e.user_id),
                user_attrs: vocab.encode_user_attrs(&e.user_attrs),
                history,
                target,
                target_attrs: catalog.attrs[target].clone(),
                timestamp: e.timestamp,
                label: 1,
                text: String::new(),
            };
            ex.text = render_text(&vocab, &catalog, &ex);
            let bucket = if pos + 1 == n {
                &mut split.test
            } else if pos + 2 == n {
                &mut split.valid
            } else {
                &mut split.train
            };
            bucket.push(ex);
        }
    }
    if split.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let mut ds = Dataset {
        vocab,
        catalog,
        split,
        dropped_users: dropped,
    };
    ds.renumber();
    Ok(ds)
}

impl Dataset {
    /// Assigns ids in canonical order: train, valid, test; within each split
    /// by user then timestamp, positives before their negatives.
    fn renumber(&mut self) {
        let mut next = 0u64;
        for part in [&mut self.split.train, &mut self.split.valid, &mut self.split.test] {
            part.sort_by_key(|e| (e.user, e.timestamp, std::cmp::Reverse(e.label)));
            for e in part.iter_mut() {
                e.id = next;
                next += 1;
            }
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let positives: Vec<&Example> = self.split.all().filter(|e| e.label == 1).collect();
        let users: HashSet<usize> = positives.iter().map(|e| e.user).collect();
        let items: HashSet<usize> = positives.iter().map(|e| e.target).collect();
        let reviews = positives.len();
        let sparsity_pct = if users.is_empty() || items.is_empty() {
            0.0
        } else {
            100.0 * reviews as f64 / (users.len() as f64 * items.len() as f64)
        };
        DatasetStats {
            users: users.len(),
            items: items.len(),
            reviews,
            sparsity_pct,
            dropped_users: self.dropped_users,
        }
    }

    /// Adds exactly one label-0 example per positive: same user, timestamp
    /// and history, with an item drawn uniformly from those the user never
    /// interacted with.
    pub fn sample_negatives(&self, seed: u64) -> Result<Dataset> {
        let n_items = self.catalog.item_count();
        let mut seen: HashMap<usize, HashSet<usize>> = HashMap::new();
        for e in self.split.all().filter(|e| e.label == 1) {
            seen.entry(e.user).or_default().insert(e.target);
        }
        let mut rng = seed::rng(seed, "negatives");
        let mut out = self.clone();
        for part in [&mut out.split.train, &mut out.split.valid, &mut out.split.test] {
            let mut augmented = Vec::with_capacity(part.len() * 2);
            for pos in part.iter().filter(|e| e.label == 1) {
                let used = &seen[&pos.user];
                if used.len() >= n_items {
                    return Err(Error::data(format!(
                        "user {:?} interacted with all {n_items} items; no negative available",
                        self.vocab.users.token(pos.user).unwrap_or("?")
                    )));
                }
                let item = loop {
                    let candidate = rng.gen_range(1..=n_items);
                    if !used.contains(&candidate) {
                        break candidate;
                    }
                };
                let mut neg = pos.clone();
                neg.label = 0;
                neg.target = item;
                neg.target_attrs = self.catalog.attrs[item].clone();
                neg.text = render_text(&self.vocab, &self.catalog, &neg);
                augmented.push(pos.clone());
                augmented.push(neg);
            }
            *part = augmented;
        }
        out.renumber();
        Ok(out)
    }

    pub fn render_masked(&self, ex: &Example) -> String {
        render_text_masked(&self.vocab, &self.catalog, ex)
    }

    fn to_record(&self, ex: &Example) -> SplitRecord {
        let v = &self.vocab;
        let attrs = |fields: &[String], vocabs: &[FieldVocab], idx: &[usize]| {
            fields
                .iter()
                .zip(vocabs)
                .zip(idx)
                .filter(|(_, &i)| i != OOV)
                .map(|((f, fv), &i)| (f.clone(), fv.token(i).unwrap_or_default().to_string()))
                .collect()
        };
        SplitRecord {
            id: ex.id,
            user_id: v.users.token(ex.user).unwrap_or_default().to_string(),
            item_id: v.items.token(ex.target).unwrap_or_default().to_string(),
            timestamp: ex.timestamp,
            label: ex.label,
            user_attrs: attrs(&v.user_fields, &v.user_attrs, &ex.user_attrs),
            item_attrs: attrs(&v.item_fields, &v.item_attrs, &ex.target_attrs),
            history: ex
                .history
                .iter()
                .map(|&i| v.items.token(i).unwrap_or_default().to_string())
                .collect(),
        }
    }

    /// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` into `dir`.
    pub fn write_splits(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, part) in self.split.parts() {
            let path = dir.join(format!("{name}.jsonl"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for ex in part {
                let line = serde_json::to_string(&self.to_record(ex)).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Inverse of [`Dataset::write_splits`].
    pub fn read_splits(dir: &Path) -> Result<Dataset> {
        let mut parts: Vec<Vec<SplitRecord>> = Vec::new();
        for name in ["train", "valid", "test"] {
            let path = dir.join(format!("{name}.jsonl"));
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut records = Vec::new();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SplitRecord = serde_json::from_str(&line).map_err(|e| {
                    Error::data(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                records.push(rec);
            }
            parts.push(records);
        }
        let interactions: Vec<Interaction> = parts
            .iter()
            .flatten()
            .map(|r| Interaction {
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                timestamp: r.timestamp,
                label: r.label,
                user_attrs: r.user_attrs.clone(),
                item_attrs: r.item_attrs.clone(),
            })
            .collect();
        let vocab = Vocab::build(interactions.iter());
        let catalog = ItemCatalog::build(&vocab, interactions.iter());
        let to_example = |r: &SplitRecord| -> Result<Example> {
            let target = vocab.items.get(&r.item_id);
            let history = r.history.iter().map(|h| vocab.items.get(h)).collect::<Vec<_>>();
            if history.len() > MAX_HISTORY {
                return Err(Error::data(format!("record {} has {} history items", r.id, history.len())));
            }
            let mut ex = Example {
                id: r.id,
                user: vocab.users.get(&r.user_id),
                user_attrs: vocab.encode_user_attrs(&r.user_attrs),
                history,
                target,
                target_attrs: catalog.attrs[target].clone(),
                timestamp: r.timestamp,
                label: r.label,
                text: String::new(),
            };
            ex.text = render_text(&vocab, &catalog, &ex);
            Ok(ex)
        };
        let mut split = DatasetSplit::default();
        for (records, out) in parts
            .iter()
            .zip([&mut split.train, &mut split.valid, &mut split.test])
        {
            *out = records.iter().map(to_example).collect::<Result<_>>()?;
        }
        if split.train.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        Ok(Dataset {
            vocab,
            catalog,
            split,
            dropped_users: 0,
        })
    }
}

/// Serialized form of an [`Example`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub id: u64,
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub label: u8,
    #[serde(default)]
    pub user_attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub item_attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub history: Vec<String>,
}
