//! Shared fixtures for the benchmarks.

use maps_core::corpus::{generate_synthetic, SynthConfig, SyntheticData};
use maps_core::{MapsModel, ModelConfig};

/// Default-sized synthetic corpus and an untrained model over it.
pub fn synthetic_fixture(seed: u64) -> (SyntheticData, MapsModel) {
    let data = generate_synthetic(&SynthConfig::default(), seed).expect("default synthetic config is feasible");
    let model = MapsModel::for_corpus(ModelConfig::default(), &data.corpus, data.store.dim(), seed)
        .expect("default model config is valid");
    (data, model)
}
