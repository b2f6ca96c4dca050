//! Stage training, checkpoint wiring and the transmission runner:
//! image -> JSCC link -> x_hat, then conditions -> guided sampler -> x_diff.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use djscc_autodiff::Tensor;
use djscc_core::channel::ChannelState;
use djscc_core::conditioning::{assemble_conditions, extract_spatial_condition, ConditionSet};
use djscc_core::diffusion::{
    guided_sample_latent, pretrain_base, train_control, ConditionSource, DenoiserModel, SamplingPlan,
};
use djscc_core::diffusion::unet::is_base;
use djscc_core::jscc::{train_jscc, JsccModel};
use djscc_core::latent::{train_latent_codec, LatentCodec};
use djscc_core::metrics::{ImageMetrics, ImageRecord, MetricReport};
use djscc_core::rng::{self, Rng};
use djscc_core::train::TrainReport;
use djscc_core::{CoreError, ImageSet};

use crate::checkpoint::{self, ModelKind};
use crate::config::ExperimentConfig;
use crate::dataset::{self, load_dataset, Dataset};
use crate::error::{io_err, HarnessError, Result};

/// First line of every metrics file; bump when columns change.
pub const CSV_VERSION_LINE: &str = "# djscc-metrics v1";
pub const CSV_HEADER: &str = "image_id,seed,gamma_db,rho,lambda,stage,psnr_db,ssim,ms_ssim,mse,lpips,fid,miou";

/// All trained stages of one experiment.
#[derive(Clone, Debug)]
pub struct Models {
    pub jscc: JsccModel,
    pub codec: LatentCodec,
    pub denoiser: DenoiserModel,
}

impl Models {
    /// Untrained models initialized from the run seed.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.run.seed;
        Ok(Self {
            jscc: JsccModel::new(cfg.jscc_config(), seed)?,
            codec: LatentCodec::new(cfg.latent_config(), seed)?,
            denoiser: DenoiserModel::new(cfg.denoiser_config(), seed)?,
        })
    }

    /// Loads every stage from the checkpoint directory.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let mut m = Self::init(cfg)?;
        m.load_stage(cfg, ModelKind::Jscc)?;
        m.load_stage(cfg, ModelKind::Latent)?;
        m.load_stage(cfg, ModelKind::Denoiser)?;
        Ok(m)
    }

    pub fn load_stage(&mut self, cfg: &ExperimentConfig, kind: ModelKind) -> Result<()> {
        let path = checkpoint_path(cfg, kind);
        if !path.exists() {
            return Err(HarnessError::Config(format!(
                "missing checkpoint {}; run the training stage first",
                path.display()
            )));
        }
        checkpoint::load(&path, kind, self.store_mut(kind))
    }

    pub fn save_stage(&self, cfg: &ExperimentConfig, kind: ModelKind) -> Result<()> {
        let store = match kind {
            ModelKind::Jscc => &self.jscc.params,
            ModelKind::Latent => &self.codec.params,
            ModelKind::Denoiser => &self.denoiser.params,
        };
        checkpoint::save(&checkpoint_path(cfg, kind), kind, store)
    }

    fn store_mut(&mut self, kind: ModelKind) -> &mut djscc_autodiff::ParamStore<f32> {
        match kind {
            ModelKind::Jscc => &mut self.jscc.params,
            ModelKind::Latent => &mut self.codec.params,
            ModelKind::Denoiser => &mut self.denoiser.params,
        }
    }

    /// Checksums of the stages a control run must leave untouched.
    pub fn frozen_checksums(&self) -> [u64; 3] {
        [
            self.jscc.params.checksum(|_| true),
            self.codec.params.checksum(|_| true),
            self.denoiser.params.checksum(is_base),
        ]
    }
}

pub fn checkpoint_path(cfg: &ExperimentConfig, kind: ModelKind) -> PathBuf {
    cfg.checkpoint_dir().join(kind.file_name())
}

pub fn load_train(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(&cfg.data.train, cfg.data.size, cfg.data.crop, cfg.run.seed)
}

pub fn load_test(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(&cfg.data.test, cfg.data.size, cfg.data.crop, cfg.run.seed)
}

/// Labels fed to the semantic condition: the file's ids, or the null label
/// everywhere for unlabeled sets.
pub fn condition_labels(data: &Dataset, models: &Models) -> Result<Vec<usize>> {
    let null = models.denoiser.net.text.null_label();
    if !data.labeled {
        return Ok(vec![null; data.set.len()]);
    }
    if let Some(&bad) = data.set.labels.iter().find(|&&l| l >= null) {
        return Err(HarnessError::Dataset(format!(
            "label {bad} outside the {null} configured classes"
        )));
    }
    Ok(data.set.labels.clone())
}

pub fn train_jscc_stage(cfg: &ExperimentConfig, models: &mut Models, data: &Dataset) -> Result<TrainReport> {
    Ok(train_jscc(&mut models.jscc, &data.set, &cfg.stage(&cfg.train.jscc))?)
}

pub fn train_latent_stage(cfg: &ExperimentConfig, models: &mut Models, data: &Dataset) -> Result<TrainReport> {
    Ok(train_latent_codec(&mut models.codec, &data.set, &cfg.stage(&cfg.train.latent))?)
}

/// Clean training latents `E(x) * scale`.
pub fn encode_latents(cfg: &ExperimentConfig, models: &Models, data: &Dataset) -> Result<Tensor<f32>> {
    Ok(models.codec.encode_set(&data.set.images, cfg.run.chunk)?)
}

pub fn pretrain_stage(cfg: &ExperimentConfig, models: &mut Models, data: &Dataset) -> Result<TrainReport> {
    let latents = encode_latents(cfg, models, data)?;
    let sched = cfg.schedule()?;
    Ok(pretrain_base(&mut models.denoiser, &latents, &sched, &cfg.stage(&cfg.train.base))?)
}

/// Control-branch training. Fails if any frozen stage changed.
pub fn control_stage(cfg: &ExperimentConfig, models: &mut Models, data: &Dataset) -> Result<TrainReport> {
    let latents = encode_latents(cfg, models, data)?;
    let sched = cfg.schedule()?;
    let set = ImageSet::new(data.set.images.clone(), condition_labels(data, models)?, data.set.ids.clone())?;
    let before = models.frozen_checksums();
    let source = ConditionSource {
        jscc: &models.jscc,
        codec: &models.codec,
    };
    let report = train_control(
        &mut models.denoiser,
        &set,
        &latents,
        source,
        &sched,
        &cfg.stage(&cfg.train.control),
        false,
    )?;
    if before != models.frozen_checksums() {
        return Err(HarnessError::Config("control training modified a frozen stage".into()));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Jscc,
    Diffusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Jscc => "jscc",
            Self::Diffusion => "diffusion",
        }
    }
}

/// What a transmission run computes and where it writes images.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmitOptions {
    pub gamma_db: f64,
    pub lambda: f64,
    pub sampler_steps: usize,
    /// Skip the diffusion stage (JSCC rows only).
    pub jscc_only: bool,
    pub image_dir: Option<PathBuf>,
}

impl TransmitOptions {
    pub fn from_config(cfg: &ExperimentConfig, gamma_db: f64) -> Self {
        Self {
            gamma_db,
            lambda: cfg.sampler.lambda,
            sampler_steps: cfg.sampler.steps,
            jscc_only: false,
            image_dir: cfg.run.write_images.then(|| cfg.run.out_dir.join("images")),
        }
    }
}

/// Per-stage metrics of one (gamma, lambda, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub jscc: MetricReport,
    pub diffusion: Option<MetricReport>,
}

/// Channel states for dataset items `indices`, one stream per item.
pub fn channel_states(cfg: &ExperimentConfig, indices: &[usize], gamma_db: f64, seed: u64) -> Result<Vec<ChannelState>> {
    let j = cfg.jscc_config();
    indices
        .iter()
        .map(|&i| {
            let mut r = rng::stream(seed, i as u64, "transmit/gain");
            Ok(ChannelState::draw(j.channel_kind, gamma_db, j.gain_variance, j.power, &mut r).map_err(CoreError::from)?)
        })
        .collect()
}

fn item_streams(seed: u64, indices: &[usize], tag: &str) -> Vec<Rng> {
    indices.iter().map(|&i| rng::stream(seed, i as u64, tag)).collect()
}

/// JSCC reconstruction and its condition set for one chunk.
pub fn receive(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    indices: &[usize],
    gamma_db: f64,
    seed: u64,
) -> Result<(Tensor<f32>, ConditionSet)> {
    let x = data.set.images.select_outer(indices).map_err(CoreError::from)?;
    let states = channel_states(cfg, indices, gamma_db, seed)?;
    let mut noise = item_streams(seed, indices, "transmit/noise");
    let x_hat = models.jscc.transmit(&x, &states, &mut noise)?;
    let f_v = extract_spatial_condition(&x_hat, &models.codec)?;
    let all = condition_labels(data, models)?;
    let labels: Vec<usize> = indices.iter().map(|&i| all[i]).collect();
    let s = f_v.shape().to_vec();
    let cond = assemble_conditions(
        f_v,
        Some(&labels),
        models.denoiser.net.text.null_label(),
        states,
        [s[1], s[2], s[3]],
    )?;
    Ok((x_hat, cond))
}

/// Final latents of the guided sampler for a condition set.
pub fn sample_latents(
    cfg: &ExperimentConfig,
    models: &Models,
    cond: &ConditionSet,
    indices: &[usize],
    lambda: f64,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let plan = SamplingPlan::spaced(&cfg.schedule()?, steps)?;
    let mut rngs = item_streams(seed, indices, "transmit/sampler");
    Ok(guided_sample_latent(&models.denoiser, cond, lambda, &plan, &mut rngs)?)
}

/// Runs the full pipeline on dataset items `indices` with channel seed `seed`.
pub fn run_transmission(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
    opts: &TransmitOptions,
) -> Result<Transmission> {
    let rho = cfg.rho();
    let mut jscc = MetricReport::new(opts.gamma_db, rho, opts.lambda, seed);
    let mut diffusion = (!opts.jscc_only).then(|| MetricReport::new(opts.gamma_db, rho, opts.lambda, seed));
    for chunk in indices.chunks(cfg.run.chunk) {
        let (x_hat, cond) = receive(cfg, models, data, chunk, opts.gamma_db, seed)?;
        let x_diff = match diffusion {
            Some(_) => {
                let z0 = sample_latents(cfg, models, &cond, chunk, opts.lambda, opts.sampler_steps, seed)?;
                Some(models.codec.decode_latent(&z0)?)
            }
            None => None,
        };
        for (k, &i) in chunk.iter().enumerate() {
            let id = &data.set.ids[i];
            let x = data.set.images.slice_outer(i, i + 1).map_err(CoreError::from)?;
            let xh = x_hat.slice_outer(k, k + 1).map_err(CoreError::from)?;
            jscc.push(id.clone(), ImageMetrics::measure(&x, &xh).map_err(CoreError::from)?);
            if let Some(dir) = &opts.image_dir {
                dataset::write_png(&dir.join(image_name(id, opts, seed, Stage::Jscc)), &xh)?;
            }
            if let (Some(report), Some(xd)) = (diffusion.as_mut(), x_diff.as_ref()) {
                let xd = xd.slice_outer(k, k + 1).map_err(CoreError::from)?;
                report.push(id.clone(), ImageMetrics::measure(&x, &xd).map_err(CoreError::from)?);
                if let Some(dir) = &opts.image_dir {
                    dataset::write_png(&dir.join(image_name(id, opts, seed, Stage::Diffusion)), &xd)?;
                }
            }
        }
    }
    Ok(Transmission { jscc, diffusion })
}

fn image_name(id: &str, opts: &TransmitOptions, seed: u64, stage: Stage) -> String {
    match stage {
        Stage::Jscc => format!("{id}_g{}_s{seed}_jscc.png", opts.gamma_db),
        Stage::Diffusion => format!("{id}_g{}_s{seed}_l{}_diffusion.png", opts.gamma_db, opts.lambda),
    }
}

/// Image indices used for evaluation (`test_images = 0` means all).
pub fn eval_indices(cfg: &ExperimentConfig, data: &Dataset) -> Vec<usize> {
    let n = match cfg.run.test_images {
        0 => data.set.len(),
        k => k.min(data.set.len()),
    };
    (0..n).collect()
}

/// Appends CSV rows for one run. JSCC rows leave `lambda` empty because
/// guidance does not touch them.
pub fn csv_rows(t: &Transmission, out: &mut String) {
    for (i, rec) in t.jscc.images.iter().enumerate() {
        csv_row(out, &t.jscc, rec, Stage::Jscc);
        if let Some(d) = &t.diffusion {
            csv_row(out, d, &d.images[i], Stage::Diffusion);
        }
    }
}

fn csv_row(out: &mut String, r: &MetricReport, rec: &ImageRecord, stage: Stage) {
    let m = &rec.metrics;
    let lambda = match stage {
        Stage::Jscc => String::new(),
        Stage::Diffusion => r.lambda.to_string(),
    };
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},,,",
        rec.image_id,
        r.seed,
        r.gamma_db,
        r.rho,
        lambda,
        stage.name(),
        m.psnr_db,
        m.ssim,
        m.ms_ssim,
        m.mse
    );
}

/// Metrics file with one section per SNR.
pub fn render_csv(sections: &[(f64, Vec<Transmission>)]) -> String {
    let mut out = String::new();
    out.push_str(CSV_VERSION_LINE);
    out.push('\n');
    for (gamma, runs) in sections {
        let _ = writeln!(out, "# section gamma_db={gamma}");
        out.push_str(CSV_HEADER);
        out.push('\n');
        for t in runs {
            csv_rows(t, &mut out);
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Runs every (gamma, channel seed) cell over the evaluation images.
pub fn sweep(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    gammas: &[f64],
    base: &TransmitOptions,
) -> Result<Vec<(f64, Vec<Transmission>)>> {
    let idx = eval_indices(cfg, data);
    gammas
        .iter()
        .map(|&gamma| {
            let opts = TransmitOptions { gamma_db: gamma, ..base.clone() };
            let runs = cfg
                .run
                .channel_seeds
                .iter()
                .map(|&s| run_transmission(cfg, models, data, &idx, s, &opts))
                .collect::<Result<Vec<_>>>()?;
            Ok((gamma, runs))
        })
        .collect()
}

/// Mean metrics per (gamma, stage) over channel seeds, as a text table.
pub fn summary(sections: &[(f64, Vec<Transmission>)]) -> String {
    let mut out = String::from("gamma_db  stage      psnr_db   ssim     ms_ssim\n");
    for (gamma, runs) in sections {
        let stages: [(Stage, Vec<&MetricReport>); 2] = [
            (Stage::Jscc, runs.iter().map(|t| &t.jscc).collect()),
            (Stage::Diffusion, runs.iter().filter_map(|t| t.diffusion.as_ref()).collect()),
        ];
        for (stage, reports) in stages {
            let aggs: Vec<ImageMetrics> = reports.iter().filter_map(|r| r.aggregate()).collect();
            if aggs.is_empty() {
                continue;
            }
            let n = aggs.len() as f64;
            let mean = |f: fn(&ImageMetrics) -> f64| aggs.iter().map(f).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "{gamma:<9} {:<10} {:<9.3} {:<8.4} {:.4}",
                stage.name(),
                mean(|m| m.psnr_db),
                mean(|m| m.ssim),
                mean(|m| m.ms_ssim)
            );
        }
    }
    out
}

/// Mean PSNR of the JSCC reconstructions at `gamma_db`, averaged over seeds.
pub fn jscc_psnr(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    gamma_db: f64,
    seeds: &[u64],
) -> Result<f64> {
    let idx = eval_indices(cfg, data);
    let opts = TransmitOptions {
        jscc_only: true,
        image_dir: None,
        ..TransmitOptions::from_config(cfg, gamma_db)
    };
    let mut total = 0.0;
    for &s in seeds {
        let t = run_transmission(cfg, models, data, &idx, s, &opts)?;
        total += t.jscc.aggregate().map_or(f64::NAN, |m| m.psnr_db);
    }
    Ok(total / seeds.len() as f64)
}

/// `||z_0 - f_v||` (mean over items) of the sampler's final latent for each
/// guidance strength, with shared random streams.
pub fn lambda_distances(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    indices: &[usize],
    gamma_db: f64,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let (_, cond) = receive(cfg, models, data, indices, gamma_db, seed)?;
    lambdas
        .iter()
        .map(|&l| {
            let z0 = sample_latents(cfg, models, &cond, indices, l, cfg.sampler.steps, seed)?;
            Ok(mean_item_distance(&z0, cond.f_v()))
        })
        .collect()
}

pub fn mean_item_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.shape()[0].max(1);
    let per = a.numel() / n;
    a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}
