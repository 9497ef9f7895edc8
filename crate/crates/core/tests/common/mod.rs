//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::Path;

use semicontrast::config::{parse_config_str, ExperimentConfig};

/// A corpus and network small enough for a stage to train in well under a
/// second: 10 volumes of 4 slices at 16x16 with 2 foreground classes.
pub const TINY_TOML: &str = r#"
seed = 7

[dataset]
resolution = 16

[dataset.synthetic]
num_volumes = 10
slices_per_volume = 4
resolution = 16
num_foreground_classes = 2
noise = 0.3
block_size = 8

[model]
encoder_blocks = 2
decoder_blocks = 2
base_channels = 4
num_classes = 3
projection_dim = 8
local_head_channels = 4

[losses]
block_size = 8

[stages.global]
learning_rate = 1e-3
epochs = 4
batch_pairs = 3
slices_per_epoch = 0

[stages.local]
learning_rate = 1e-3
epochs = 4
batch_pairs = 2
slices_per_epoch = 0

[stages.finetune]
learning_rate = 1e-2
epochs = 4
batch_size = 4
slices_per_epoch = 0

[experiment]
label_fractions = [0.5]
variants = ["random", "global+local(block)"]
folds = 2
embedding_cap = 20
"#;

pub fn tiny_config(out: &Path, overrides: &[&str]) -> ExperimentConfig {
    let mut all = vec![format!("output_dir={:?}", out.display().to_string())];
    all.extend(overrides.iter().map(|s| s.to_string()));
    parse_config_str(TINY_TOML, &all).expect("tiny config parses")
}
