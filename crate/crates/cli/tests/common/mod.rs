#![allow(dead_code)]

use std::path::{Path, PathBuf};

use factrace_cli::RunConfig;

/// A run small enough to train in a few seconds.
pub const TINY: &str = r#"
seed = 11

[generation]
n_entities = 24
n_facts = 40
pairings_per_fact = 2
maskings_per_sentence = 2
n_query_facts = 6
query_variants = 2
novel_entities = 4

[model]
d_model = 16
n_heads = 2
d_ff = 32
n_enc_layers = 1
n_dec_layers = 1
max_seq_len = 32

[train]
pretrain_epochs = 1
finetune_epochs = 2
batch_size = 8
checkpoint_every = 4

[attribution]
checkpoints = 3
layers = ["G.0"]
embed_layers = ["A.E.0"]

[eval]
slice = "all"
subsamples = 2
subsample_size = 5
bm25_top_k = 10
same_target = 5
random = 5
seeds = [0, 1]
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn tiny(dir: &Path) -> RunConfig {
    RunConfig::load(&write_config(dir, TINY)).unwrap()
}
