#![allow(dead_code)]

use std::path::Path;

use mfds::config::RunConfig;
use mfds::dataset::write_synthetic;

/// Writes `n` synthetic images under `dir` and returns a small, fast config for them.
pub fn tiny_run(dir: &Path, n: usize, seed: u64) -> RunConfig {
    write_synthetic(dir, seed, n, 3).unwrap();
    let mut c = RunConfig::synthetic(dir);
    c.model.d_model = 16;
    c.model.d_ffn = 32;
    c.model.num_queries = 8;
    c.model.attn.heads = 2;
    c.model.enc.layers = 1;
    c.model.dec.layers = 2;
    c.train.batch_size = 2;
    c.train.epochs = 3;
    c.train.max_iterations = 0;
    c.train.seed = seed;
    c.train.log_every = 0;
    c.data.hflip = true;
    c
}
