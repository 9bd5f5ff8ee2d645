//! Fixtures shared by the command-line tests.

use std::path::Path;
use std::process::{Command, Output};

/// Micro model on 16 px scenes; every subcommand finishes in well under a second.
pub const TINY_CONFIG: &str = r#"version = 1
[model]
d_model = 8
n_heads = 2
n_encoder_layers = 1
n_decoder_layers = 1
ffn_mult = 2
n_bins = 16
max_chars = 4
max_instances = 4
charset = "abcdef"
image_side = 16
stem_channels = [2, 2, 2, 4]
[train]
epochs = 2
batch_size = 2
eval_every = 1
checkpoint_every = 1
[decode]
max_instances = 4
max_chars = 4
[synth]
side = 16
instances = [0, 2]
scale = [1.0, 1.0]
rotation = 0.0
curvature = [0.0, 0.0]
min_separation = 3.0
word_len = [1, 2]
charset = "abcdef"
n_bins = 16
"#;

#[allow(dead_code)]
pub fn pointspot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointspot")).args(args).env_remove("POINTSPOT_SEED").output().unwrap()
}

#[allow(dead_code)]
pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}
