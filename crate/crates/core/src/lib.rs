pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod cotstore;
pub mod dataio;
pub mod error;
pub mod ict;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod textenc;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/store.md")]
    mod store {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
