//! Tiny experiment fixture shared by the harness integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use djscc_harness::dataset::generate_dataset;

/// Small models and two-iteration stages so a full pipeline runs in seconds.
pub const TINY: &str = r#"
[data]
train = "data/train"
test = "data/test"

[jscc]
base_width = 8

[latent]
base_width = 8

[denoiser]
widths = [8, 16]
temb_dim = 16
groups = 4
text_dim = 8

[sampler]
steps = 5

[train.jscc]
iters = 2
batch_size = 4
lr = 1e-3

[train.latent]
iters = 2
batch_size = 4
lr = 1e-3

[train.base]
iters = 2
batch_size = 4
lr = 1e-3

[train.control]
iters = 2
batch_size = 4
lr = 1e-3

[run]
out_dir = "run"
test_images = 3
snr_db = [0.0, 5.0, 10.0]
write_images = false
"#;

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    /// Writes a 12/4 image dataset and the tiny config, with `extra` appended.
    pub fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&dir.path().join("data"), 12, 4, 32, 3).unwrap();
        std::fs::write(dir.path().join("tiny.toml"), format!("{TINY}{extra}")).unwrap();
        Self { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> PathBuf {
        self.root().join("tiny.toml")
    }

    pub fn out(&self) -> PathBuf {
        self.root().join("run")
    }

    /// Runs the CLI with `--config` pointing at the fixture.
    pub fn run(&self, args: &[&str]) -> i32 {
        let config = self.config();
        let mut argv = vec!["djscc"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--config", config.to_str().unwrap()]);
        djscc_harness::cli::run(argv)
    }

    pub fn train_all(&self) {
        for stage in ["train-jscc", "train-vae", "pretrain-diffusion", "train-control"] {
            assert_eq!(self.run(&[stage]), 0, "{stage}");
        }
    }
}
