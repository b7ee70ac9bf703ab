//! The frozen desk-scale benchmark: 200 training clips and 20 test clips of
//! one second at 4 kHz, mixed at 0, 5, 10 and 15 dB, plus the toy training
//! regime used to score the variants on it.

use super::{EnhanceOptions, TrainConfig, VariantMode};
use crate::data::DatasetSpec;
use crate::nets::NetConfig;

pub const TRAIN_SEED: u64 = 1001;
pub const TEST_SEED: u64 = 2002;

/// Minimum mean SI-SNR improvement (dB) on the test clips.
pub const SI_SNRI_GATE_DB: f64 = 3.0;

pub fn train_spec() -> DatasetSpec {
    DatasetSpec {
        n_clips: 200,
        seed: TRAIN_SEED,
        ..DatasetSpec::default()
    }
}

pub fn test_spec() -> DatasetSpec {
    DatasetSpec {
        n_clips: 20,
        seed: TEST_SEED,
        ..DatasetSpec::default()
    }
}

/// Six blocks with dilations up to 32 give `D` a receptive field of 127 samples.
pub fn det_net() -> NetConfig {
    NetConfig {
        n_blocks: 6,
        channels: 16,
        dilation_cycle: vec![1, 2, 4, 8, 16, 32],
        kernel_size: 3,
    }
}

pub fn sto_net() -> NetConfig {
    NetConfig {
        n_blocks: 4,
        channels: 16,
        dilation_cycle: vec![1, 2, 4, 8],
        kernel_size: 3,
    }
}

/// Toy training regime for `mode` at `seed`.
pub fn train_config(mode: VariantMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps: 1500,
        batch_size: 8,
        lr: 3e-3,
        seed,
        checkpoint_every: 500,
        segment_len: 256,
        det_net: det_net(),
        sto_net: sto_net(),
        ..TrainConfig::default()
    }
}

pub fn enhance_options(seed: u64) -> EnhanceOptions {
    EnhanceOptions {
        n_runs: 2,
        ratio: 0.2,
        seed,
        average_waveforms: false,
    }
}
