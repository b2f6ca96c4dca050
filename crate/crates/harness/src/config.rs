//! TOML experiment configuration.
//!
//! Relative paths are resolved against the directory of the config file.
//! The code rate is always derived from `(c_out, downsampling)` and never
//! stored.

use std::path::{Path, PathBuf};

use djscc_core::channel::ChannelKind;
use djscc_core::conditioning::ConditionOptions;
use djscc_core::diffusion::{make_schedule, DenoiserConfig, NoiseSchedule};
use djscc_core::jscc::{rate_for_config, JsccConfig};
use djscc_core::latent::LatentConfig;
use djscc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::CropMode;
use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelName {
    Awgn,
    Rayleigh,
}

impl From<ChannelName> for ChannelKind {
    fn from(c: ChannelName) -> Self {
        match c {
            ChannelName::Awgn => ChannelKind::Awgn,
            ChannelName::Rayleigh => ChannelKind::Rayleigh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: PathBuf,
    pub test: PathBuf,
    pub size: usize,
    pub crop: CropMode,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train"),
            test: PathBuf::from("data/test"),
            size: 32,
            crop: CropMode::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JsccSection {
    pub c_out: usize,
    pub downsampling: usize,
    pub base_width: usize,
    pub snr_range_db: [f64; 2],
    pub channel: ChannelName,
    pub gain_variance: f64,
    pub power: f64,
}

impl Default for JsccSection {
    fn default() -> Self {
        let c = JsccConfig::default();
        Self {
            c_out: c.c_out,
            downsampling: c.downsampling,
            base_width: c.base_width,
            snr_range_db: [c.snr_range_db.0, c.snr_range_db.1],
            channel: ChannelName::Awgn,
            gain_variance: c.gain_variance,
            power: c.power,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub channels: usize,
    pub base_width: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        let c = LatentConfig::default();
        Self {
            channels: c.channels,
            base_width: c.base_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub widths: [usize; 2],
    pub temb_dim: usize,
    pub groups: usize,
    pub text_dim: usize,
    pub classes: usize,
    pub use_text: bool,
    pub use_csi: bool,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let c = DenoiserConfig::default();
        Self {
            widths: c.widths,
            temb_dim: c.temb_dim,
            groups: c.groups,
            text_dim: c.text_dim,
            classes: c.classes,
            use_text: c.options.use_text,
            use_csi: c.options.use_csi,
        }
    }
}

/// Linear beta schedule; the default is the 1000-step reference ladder
/// rescaled to 200 steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub lambda: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 50, lambda: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_floor")]
    pub lr_floor: f64,
}

fn default_floor() -> f64 {
    0.1
}

impl StageSection {
    fn new(iters: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            iters,
            batch_size,
            lr,
            lr_floor: default_floor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub jscc: StageSection,
    pub latent: StageSection,
    pub base: StageSection,
    pub control: StageSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            jscc: StageSection::new(1500, 32, 1e-3),
            latent: StageSection::new(1500, 32, 1e-3),
            base: StageSection::new(3000, 64, 1e-3),
            control: StageSection::new(1500, 32, 2e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Channel seeds evaluated per image.
    pub channel_seeds: Vec<u64>,
    /// SNR grid used by `evaluate` and `sweep`.
    pub snr_db: Vec<f64>,
    /// Test images used per evaluation (0 = all).
    pub test_images: usize,
    /// Images per forward batch during evaluation.
    pub chunk: usize,
    /// Write reconstructions as PNG files.
    pub write_images: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            channel_seeds: vec![0],
            snr_db: vec![0.0, 5.0, 10.0],
            test_images: 0,
            chunk: 50,
            write_images: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub jscc: JsccSection,
    pub latent: LatentSection,
    pub denoiser: DenoiserSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses TOML, resolves relative paths against `base_dir` and validates.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn resolve(&mut self, base_dir: &Path) {
        for p in [&mut self.data.train, &mut self.data.test, &mut self.run.out_dir] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
    }

    /// Value checks plus existence of the dataset directories.
    pub fn validate(&self) -> Result<()> {
        self.jscc_config().validate()?;
        self.schedule()?;
        if self.data.size == 0 {
            return Err(HarnessError::Config("data.size must be positive".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return Err(HarnessError::Config(format!(
                "sampler.steps {} must lie in 1..={}",
                self.sampler.steps, self.schedule.steps
            )));
        }
        if !(self.sampler.lambda >= 0.0) {
            return Err(HarnessError::Config("sampler.lambda must be >= 0".into()));
        }
        if self.run.channel_seeds.is_empty() || self.run.chunk == 0 {
            return Err(HarnessError::Config("run needs channel seeds and a positive chunk".into()));
        }
        for (name, s) in [
            ("jscc", &self.train.jscc),
            ("latent", &self.train.latent),
            ("base", &self.train.base),
            ("control", &self.train.control),
        ] {
            if s.batch_size == 0 || !(s.lr >= 0.0) {
                return Err(HarnessError::Config(format!("train.{name}: bad batch size or lr")));
            }
        }
        for p in [&self.data.train, &self.data.test] {
            if !p.is_dir() {
                return Err(HarnessError::Config(format!("dataset directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        rate_for_config(self.jscc.c_out, self.jscc.downsampling).unwrap_or(f64::NAN)
    }

    pub fn jscc_config(&self) -> JsccConfig {
        let j = &self.jscc;
        JsccConfig {
            c_out: j.c_out,
            downsampling: j.downsampling,
            base_width: j.base_width,
            snr_range_db: (j.snr_range_db[0], j.snr_range_db[1]),
            channel_kind: j.channel.into(),
            gain_variance: j.gain_variance,
            power: j.power,
        }
    }

    pub fn latent_config(&self) -> LatentConfig {
        LatentConfig {
            channels: self.latent.channels,
            base_width: self.latent.base_width,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let d = &self.denoiser;
        DenoiserConfig {
            latent_channels: self.latent.channels,
            widths: d.widths,
            temb_dim: d.temb_dim,
            groups: d.groups,
            text_dim: d.text_dim,
            classes: d.classes,
            snr_range_db: (self.jscc.snr_range_db[0], self.jscc.snr_range_db[1]),
            options: ConditionOptions {
                use_text: d.use_text,
                use_csi: d.use_csi,
            },
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(make_schedule(s.steps, s.beta_start, s.beta_end)?)
    }

    pub fn stage(&self, stage: &StageSection) -> TrainConfig {
        let mut t = TrainConfig::new(stage.iters, stage.batch_size, stage.lr, self.run.seed);
        t.lr_floor = stage.lr_floor;
        t.log_every = (stage.iters / 10).max(1);
        t
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run.out_dir.join("checkpoints")
    }

    /// `C_l * H_l * W_l` of the diffusion latent, the upper end of the
    /// guidance strength.
    pub fn latent_elements(&self) -> usize {
        let side = self.data.size / djscc_core::latent::FACTOR;
        self.latent.channels * side * side
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("data/train")).unwrap();
        std::fs::create_dir_all(dir.path().join("data/test")).unwrap();
        let text = ExperimentConfig::default().to_toml().unwrap();
        let cfg = ExperimentConfig::parse(&text, dir.path()).unwrap();
        assert_eq!(cfg.data.train, dir.path().join("data/train"));
        assert_eq!(cfg.rho(), 1.0 / 6.0);
        assert_eq!(cfg.latent_elements(), 64);
    }

    #[test]
    fn missing_paths_and_unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ExperimentConfig::parse("", dir.path()),
            Err(HarnessError::Config(_))
        ));
        std::fs::create_dir_all(dir.path().join("data/train")).unwrap();
        std::fs::create_dir_all(dir.path().join("data/test")).unwrap();
        assert!(ExperimentConfig::parse("", dir.path()).is_ok());
        assert!(ExperimentConfig::parse("[jscc]\nrho = 0.5\n", dir.path()).is_err());
        assert!(ExperimentConfig::parse("[jscc]\nc_out = 3\n", dir.path()).is_err());
        assert!(ExperimentConfig::parse("[sampler]\nsteps = 500\n", dir.path()).is_err());
    }
}
