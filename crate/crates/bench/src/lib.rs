//! Fixtures shared by the benchmarks: synthetic models at desk scale.

use moe_lens_core::synth::synth_scratch;
use moe_lens_core::{Checkpoint, Expert, ModelConfig, MoeModel, SynthMode, SynthSpec};

pub fn scratch_checkpoint(layers: usize, experts: usize, d_hid: usize, d_mid: usize) -> Checkpoint {
    let cfg = ModelConfig::uniform(layers, experts, 0, 2, d_hid, d_mid, 256);
    synth_scratch(&SynthSpec::new(cfg, SynthMode::Scratch, 0)).expect("valid bench config")
}

pub fn scratch_model(layers: usize, experts: usize, d_hid: usize, d_mid: usize) -> MoeModel {
    MoeModel::from_checkpoint(&scratch_checkpoint(layers, experts, d_hid, d_mid))
        .expect("consistent checkpoint")
}

/// Two unrelated experts of the same shape.
pub fn expert_pair(d_hid: usize, d_mid: usize) -> (Expert, Expert) {
    let m = scratch_model(1, 2, d_hid, d_mid);
    let experts = m.layers[0].routed();
    (experts[0].clone(), experts[1].clone())
}

/// Deterministic token ids spread over the vocabulary.
pub fn corpus(len: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 37 + 11) % 256).collect()
}
