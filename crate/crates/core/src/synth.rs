//! Synthetic interaction logs with latent genre structure.
//!
//! Every item belongs to one hidden genre. The genre never appears as an
//! attribute; it only shows through the words of the item title, so a model
//! has to pick it up from text or from co-occurrence. Users prefer one or
//! two genres and mostly interact inside them.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Interaction;
use crate::error::{Error, Result};
use crate::seed;

/// 2019-01-01T00:00:00Z.
const START_2019: i64 = 1_546_300_800;
const YEAR: i64 = 365 * 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    pub words_per_genre: usize,
    pub brands: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction stays inside the user's genres.
    pub affinity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            genres: 10,
            words_per_genre: 6,
            brands: 25,
            min_interactions: 5,
            max_interactions: 8,
            affinity: 0.85,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub interactions: Vec<Interaction>,
    /// Hidden genre of each item, by item id.
    pub item_genre: BTreeMap<String, usize>,
    /// Preferred genres of each user, by user id.
    pub user_genres: BTreeMap<String, Vec<usize>>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "su", "te", "vo", "ne", "pa", "di", "gu", "ze", "fo", "ri", "ba", "to",
];

fn word(rng: &mut impl Rng) -> String {
    (0..3).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<World> {
    if cfg.users == 0 || cfg.items < 2 || cfg.genres == 0 || cfg.words_per_genre == 0 {
        return Err(Error::config("synthetic world needs users, at least two items and genres"));
    }
    if cfg.min_interactions == 0 || cfg.min_interactions > cfg.max_interactions {
        return Err(Error::config("invalid interaction count range"));
    }
    let mut rng = seed::rng(seed, "world");

    let mut vocab = std::collections::BTreeSet::new();
    let mut genre_words: Vec<Vec<String>> = Vec::with_capacity(cfg.genres);
    for _ in 0..cfg.genres {
        let mut words = Vec::new();
        while words.len() < cfg.words_per_genre {
            let w = word(&mut rng);
            if vocab.insert(w.clone()) {
                words.push(w);
            }
        }
        genre_words.push(words);
    }
    let categories = ["home", "outdoor", "personal"];

    struct Item {
        id: String,
        genre: usize,
        attrs: BTreeMap<String, String>,
    }
    let items: Vec<Item> = (0..cfg.items)
        .map(|i| {
            let genre = rng.gen_range(0..cfg.genres);
            let words = &genre_words[genre];
            let a = rng.gen_range(0..words.len());
            let mut b = rng.gen_range(0..words.len());
            if words.len() > 1 {
                while b == a {
                    b = rng.gen_range(0..words.len());
                }
            }
            let title = if a == b {
                words[a].clone()
            } else {
                format!("{} {}", words[a], words[b])
            };
            let mut attrs = BTreeMap::new();
            attrs.insert("title".to_string(), title);
            attrs.insert("brand".to_string(), format!("brand{:02}", rng.gen_range(0..cfg.brands.max(1))));
            attrs.insert(
                "category".to_string(),
                categories[rng.gen_range(0..categories.len())].to_string(),
            );
            Item {
                id: format!("i{i:04}"),
                genre,
                attrs,
            }
        })
        .collect();

    // mild popularity skew
    let popularity: Vec<f64> = (0..cfg.items).map(|_| 1.0 + 3.0 * rng.gen::<f64>().powi(3)).collect();
    let mut by_genre: Vec<Vec<usize>> = vec![Vec::new(); cfg.genres];
    for (i, it) in items.iter().enumerate() {
        by_genre[it.genre].push(i);
    }
    let everything = WeightedIndex::new(&popularity).map_err(|e| Error::config(e.to_string()))?;
    let genre_pickers: Vec<Option<WeightedIndex<f64>>> = by_genre
        .iter()
        .map(|ids| WeightedIndex::new(ids.iter().map(|&i| popularity[i])).ok())
        .collect();

    let segments = ["a", "b", "c", "d"];
    let mut interactions = Vec::new();
    let mut user_genres = BTreeMap::new();
    for u in 0..cfg.users {
        let user_id = format!("u{u:05}");
        let n_pref = if cfg.genres > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
        let prefs: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.genres, n_pref).into_vec();
        let mut user_attrs = BTreeMap::new();
        user_attrs.insert("segment".to_string(), segments[rng.gen_range(0..segments.len())].to_string());

        let n = rng.gen_range(cfg.min_interactions..=cfg.max_interactions);
        let mut ts = START_2019 + rng.gen_range(0..YEAR / 2);
        let mut seen = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while seen.len() < n && attempts < 50 * n {
            attempts += 1;
            let item = if rng.gen_bool(cfg.affinity) {
                let g = prefs[rng.gen_range(0..prefs.len())];
                match &genre_pickers[g] {
                    Some(p) => by_genre[g][p.sample(&mut rng)],
                    None => everything.sample(&mut rng),
                }
            } else {
                everything.sample(&mut rng)
            };
            if !seen.insert(item) {
                continue;
            }
            ts += rng.gen_range(3_600..(YEAR / 2) / n as i64);
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: items[item].id.clone(),
                timestamp: ts.min(START_2019 + YEAR - 1),
                label: 1,
                user_attrs: user_attrs.clone(),
                item_attrs: items[item].attrs.clone(),
            });
        }
        user_genres.insert(user_id, prefs);
    }
    Ok(World {
        interactions,
        item_genre: items.iter().map(|it| (it.id.clone(), it.genre)).collect(),
        user_genres,
    })
}

/// Writes the log as newline-delimited JSON.
pub fn write_log(path: &std::path::Path, interactions: &[Interaction]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for i in interactions {
        let line = serde_json::to_string(i).map_err(|e| Error::data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            users: 50,
            items: 60,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small(), 3).unwrap();
        let c = generate(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.interactions, c.interactions);
    }

    #[test]
    fn users_mostly_stay_in_their_genres() {
        let w = generate(&small(), 1).unwrap();
        let inside = w
            .interactions
            .iter()
            .filter(|i| w.user_genres[&i.user_id].contains(&w.item_genre[&i.item_id]))
            .count();
        assert!(inside as f64 / w.interactions.len() as f64 > 0.7);
    }

    #[test]
    fn timestamps_increase_per_user_and_stay_in_2019() {
        let w = generate(&small(), 2).unwrap();
        let mut last: BTreeMap<&str, i64> = BTreeMap::new();
        for i in &w.interactions {
            assert!((START_2019..START_2019 + YEAR).contains(&i.timestamp));
            if let Some(&prev) = last.get(i.user_id.as_str()) {
                assert!(i.timestamp >= prev);
            }
            last.insert(&i.user_id, i.timestamp);
        }
    }
}
