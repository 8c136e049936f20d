//! Shared fixtures for the criterion benchmarks.

use cogen_core::gen_decoder::{Connector, DecoderCfg, DecoderModel};
use cogen_core::policy_lm::{LmConfig, PolicyModel, Vocab};
use cogen_core::rgpo::Models;

/// A freshly initialized full stack at production widths.
pub fn stack(seed: u64) -> Models<f32> {
    Models {
        policy: PolicyModel::init(LmConfig::default(), seed),
        connector: Connector::init(64, 4, 256, seed.wrapping_add(1)),
        decoder: DecoderModel::init(DecoderCfg::default(), seed.wrapping_add(2)),
    }
}

/// A mid-length token sequence through the real vocabulary.
pub fn sample_ids(len: usize) -> Vec<u32> {
    let vocab = Vocab::new();
    let text = "<bos>draw a red pentagon; a pentagon has 5 sides<img>";
    let mut ids = vocab.tokenize(text).expect("fixture tokenizes");
    while ids.len() < len {
        let extra = ids.clone();
        ids.extend_from_slice(&extra);
    }
    ids.truncate(len);
    ids
}
