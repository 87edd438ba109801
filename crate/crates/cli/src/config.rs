//! Run configuration file (TOML). Every section and key is optional;
//! unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [train]
//! alpha = 0.3
//! max_epochs = 10
//! variant = "no_cot"
//!
//! [train.model]
//! d = 32
//! layers = 2
//!
//! [store]
//! ratio = 0.1
//! lambda = 0.7
//!
//! [ablate]
//! ks = [0, 2, 4]
//! unbalanced_cell = true
//! ```

use std::path::{Path, PathBuf};

use ctxrec::error::Error;
use ctxrec::pipeline::{ProviderSpec, StoreConfig};
use ctxrec::textenc::{EncoderSpec, DEFAULT_TEXT_DIM};
use ctxrec::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub store: StoreOptions,
    pub ablate: AblateOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreOptions {
    pub ratio: f64,
    pub provider: ProviderKind,
    pub lambda: f64,
    pub noise: f64,
    pub cot_pack: Option<PathBuf>,
    pub cot_texts: Option<PathBuf>,
    pub encoder: ProviderKind,
    pub encoder_pack: Option<PathBuf>,
    pub d_text: usize,
    pub lists: Option<usize>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            ratio: 0.1,
            provider: ProviderKind::Synthetic,
            lambda: 0.7,
            noise: 0.1,
            cot_pack: None,
            cot_texts: None,
            encoder: ProviderKind::Synthetic,
            encoder_pack: None,
            d_text: DEFAULT_TEXT_DIM,
            lists: None,
        }
    }
}

impl StoreOptions {
    pub fn to_store_config(&self, seed: u64) -> Result<StoreConfig, Error> {
        let provider = match self.provider {
            ProviderKind::Synthetic => ProviderSpec::Synthetic {
                seed,
                signal: self.lambda,
                noise: self.noise,
            },
            ProviderKind::File => ProviderSpec::File {
                pack: self
                    .cot_pack
                    .clone()
                    .ok_or_else(|| Error::Config("the file provider needs --cot-pack".into()))?,
                texts: self.cot_texts.clone(),
            },
        };
        let encoder = match self.encoder {
            ProviderKind::Synthetic => EncoderSpec::Synthetic {
                seed,
                dim: self.d_text,
            },
            ProviderKind::File => EncoderSpec::File {
                path: self
                    .encoder_pack
                    .clone()
                    .ok_or_else(|| Error::Config("the file encoder needs --encoder-pack".into()))?,
            },
        };
        Ok(StoreConfig {
            ratio: self.ratio,
            seed,
            provider,
            encoder,
            lists: self.lists,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateOptions {
    pub ks: Vec<usize>,
    pub unbalanced_cell: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            ks: vec![0, 2, 4, 6, 8],
            unbalanced_cell: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nalpah = 0.3\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nalpha = 0.3\n[train.model]\nd = 16\n").unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.train.alpha, 0.3);
        assert_eq!(c.train.model.d, 16);
        assert_eq!(c.train.model.layers, 2);
        assert_eq!(c.store.ratio, 0.1);
    }
}
