//! Objective metrics, inference-schedule grid search, the schedule
//! sensitivity sweep and report files.

use std::cmp::Ordering;
use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_data::{log_mel, FeatureConfig, Segment};
use crate::diffusion::{generate, SamplerOptions};
use crate::error::{Error, Result};
use crate::losses::{stft, MultiResConfig};
use crate::noise_model::NoisePredictor;
use crate::schedules::{validate_inference_schedule, InferenceSchedule, NoiseSchedule, ValidationPolicy};

/// Power floor inside the log-magnitude term of [`mrstft_metric`].
pub const MRSTFT_POWER_FLOOR: f64 = 1e-7;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("signal lengths differ: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

fn log_mel_pair(x: &[f64], x_hat: &[f64], cfg: &FeatureConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len(x, x_hat)?;
    Ok((log_mel(x, cfg)?.frames, log_mel(x_hat, cfg)?.frames))
}

/// Mean squared difference of conditioner log-mel spectrograms.
pub fn ls_mse(x: &[f64], x_hat: &[f64], cfg: &FeatureConfig) -> Result<f64> {
    let (a, b) = log_mel_pair(x, x_hat, cfg)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Mean absolute difference of conditioner log-mel spectrograms.
pub fn l1_mel(x: &[f64], x_hat: &[f64], cfg: &FeatureConfig) -> Result<f64> {
    let (a, b) = log_mel_pair(x, x_hat, cfg)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Multi-resolution STFT distance: per resolution, spectral convergence
/// `||X| - |X^|| / ||X||` (Frobenius) plus the mean absolute difference of
/// log magnitudes (power floored at [`MRSTFT_POWER_FLOOR`]), averaged over
/// resolutions. Only the resolution list of `cfg` is used.
pub fn mrstft_metric(x: &[f64], x_hat: &[f64], cfg: &MultiResConfig) -> Result<f64> {
    same_len(x, x_hat)?;
    cfg.check()?;
    let mut total = 0.0;
    for r in &cfg.resolutions {
        let (a, b) = (stft(x, r)?, stft(x_hat, r)?);
        let (mut num, mut den, mut log_l1) = (0.0, 0.0, 0.0);
        for i in 0..a.re.len() {
            let pa = a.re[i] * a.re[i] + a.im[i] * a.im[i];
            let pb = b.re[i] * b.re[i] + b.im[i] * b.im[i];
            num += (pa.sqrt() - pb.sqrt()).powi(2);
            den += pa;
            log_l1 += (pa.max(MRSTFT_POWER_FLOOR).sqrt().ln() - pb.max(MRSTFT_POWER_FLOOR).sqrt().ln()).abs();
        }
        if den == 0.0 {
            return Err(Error::Contract("reference signal has zero spectral energy".into()));
        }
        total += num.sqrt() / den.sqrt() + log_l1 / a.re.len() as f64;
    }
    Ok(total / cfg.resolutions.len() as f64)
}

/// Per-(schedule, clip) generation seed: SHA-256 over the schedule's bit
/// patterns and the clip id, first 8 bytes little-endian.
pub fn generation_seed(schedule: &InferenceSchedule, clip_id: &str) -> u64 {
    let mut h = Sha256::new();
    for b in schedule.betas() {
        h.update(b.to_bits().to_le_bytes());
    }
    h.update(clip_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Shared evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub features: FeatureConfig,
    pub mrstft: MultiResConfig,
    pub sampler: SamplerOptions,
    /// Training schedule whose final level bounds the validator.
    pub train_schedule: NoiseSchedule,
}

impl EvalSettings {
    pub fn new(features: FeatureConfig, mrstft: MultiResConfig) -> Self {
        Self {
            features,
            mrstft,
            sampler: SamplerOptions::default(),
            train_schedule: NoiseSchedule::standard(),
        }
    }
}

/// Generates `clip` with the per-(schedule, clip) seed used by every report.
pub fn generate_for_clip(predictor: &NoisePredictor, clip: &Segment, schedule: &InferenceSchedule, sampler: SamplerOptions) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(generation_seed(schedule, &clip.clip_id));
    generate(predictor, &clip.mel, schedule, &mut rng, sampler)
}

/// Metrics of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub ls_mse: f64,
    pub mrstft: f64,
    pub l1_mel: f64,
}

/// Aggregate objective metrics of one model under one schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub schedule: Vec<f64>,
    pub n: usize,
    pub clip_count: usize,
    pub ls_mse: f64,
    pub mrstft: f64,
    pub l1_mel: f64,
    /// Reserved for externally computed perceptual scores.
    #[serde(default)]
    pub pesq: Option<f64>,
    #[serde(default)]
    pub stoi: Option<f64>,
    pub clips: Vec<ClipMetrics>,
}

/// Generates every clip with `schedule` and scores it against ground truth.
pub fn evaluate_metrics(predictor: &NoisePredictor, clips: &[Segment], schedule: &InferenceSchedule, settings: &EvalSettings) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::Config("no clips to evaluate".into()));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    for c in clips {
        let x_hat = generate_for_clip(predictor, c, schedule, settings.sampler)?;
        per_clip.push(ClipMetrics {
            clip_id: c.clip_id.clone(),
            ls_mse: ls_mse(&c.audio, &x_hat, &settings.features)?,
            mrstft: mrstft_metric(&c.audio, &x_hat, &settings.mrstft)?,
            l1_mel: l1_mel(&c.audio, &x_hat, &settings.features)?,
        });
    }
    let mean = |f: fn(&ClipMetrics) -> f64| per_clip.iter().map(f).sum::<f64>() / per_clip.len() as f64;
    Ok(MetricsReport {
        model_id: predictor.digest(),
        schedule: schedule.betas().to_vec(),
        n: schedule.steps(),
        clip_count: per_clip.len(),
        ls_mse: mean(|c| c.ls_mse),
        mrstft: mean(|c| c.mrstft),
        l1_mel: mean(|c| c.l1_mel),
        pesq: None,
        stoi: None,
        clips: per_clip,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub schedule: Vec<f64>,
    /// Mean L1 mel distance over the clips; absent when generation failed.
    pub l1_mel: Option<f64>,
    pub per_clip: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Ids of the validity rules the schedule breaks.
    pub violations: Vec<String>,
}

/// Result of a grid search or sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model_id: String,
    pub grid: String,
    pub clip_ids: Vec<String>,
    pub results: Vec<ScheduleResult>,
    /// Mean of `l1_mel` over successful grid points.
    pub mean: f64,
    /// Population standard deviation (divide by the count) over the same points.
    pub std: f64,
    pub std_definition: String,
    /// Index into `results` of the lowest `l1_mel`; ties go to the
    /// lexicographically smallest schedule.
    pub best: Option<usize>,
}

impl SweepReport {
    pub fn best_schedule(&self) -> Option<&[f64]> {
        self.best.map(|i| self.results[i].schedule.as_slice())
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores every schedule of `grid` on every clip (mean L1 mel distance),
/// with per-(schedule, clip) seeds. Failed generations are kept in the
/// report but excluded from the statistics and from `best`.
pub fn sensitivity_sweep(
    predictor: &NoisePredictor,
    clips: &[Segment],
    grid: &[InferenceSchedule],
    description: &str,
    settings: &EvalSettings,
) -> Result<SweepReport> {
    if grid.is_empty() || clips.is_empty() {
        return Err(Error::Config("sweep needs a nonempty grid and clip set".into()));
    }
    let policy = ValidationPolicy::for_training(&settings.train_schedule);
    let mut results = Vec::with_capacity(grid.len());
    for schedule in grid {
        let mut violations: Vec<String> = validate_inference_schedule(schedule, &settings.train_schedule, &policy)
            .violations
            .iter()
            .map(|v| v.rule.id().to_string())
            .collect();
        violations.dedup();
        let scored: Result<Vec<f64>> = clips
            .iter()
            .map(|c| {
                let x_hat = generate_for_clip(predictor, c, schedule, settings.sampler)?;
                l1_mel(&c.audio, &x_hat, &settings.features)
            })
            .collect();
        let (l1, per_clip, error) = match scored {
            Ok(v) => (Some(v.iter().sum::<f64>() / v.len() as f64), v, None),
            Err(e @ Error::Numerical { .. }) => (None, vec![], Some(e.to_string())),
            Err(e) => return Err(e),
        };
        results.push(ScheduleResult {
            schedule: schedule.betas().to_vec(),
            l1_mel: l1,
            per_clip,
            error,
            violations,
        });
    }
    let ok: Vec<f64> = results.iter().filter_map(|r| r.l1_mel).collect();
    let (mean, std) = mean_std(&ok);
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.l1_mel.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lexicographic(&results[a.0].schedule, &results[b.0].schedule)))
        .map(|(i, _)| i);
    Ok(SweepReport {
        model_id: predictor.digest(),
        grid: description.to_string(),
        clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
        results,
        mean,
        std,
        std_definition: "population".into(),
        best,
    })
}

/// Grid search for the best inference schedule; the same computation as
/// [`sensitivity_sweep`], read for its `best` entry.
pub fn grid_search(
    predictor: &NoisePredictor,
    clips: &[Segment],
    grid: &[InferenceSchedule],
    description: &str,
    settings: &EvalSettings,
) -> Result<SweepReport> {
    sensitivity_sweep(predictor, clips, grid, description, settings)
}

/// Report file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Columns of the sweep table, in order.
pub const SWEEP_COLUMNS: [&str; 5] = ["index", "schedule", "l1_mel", "violations", "error"];
/// Columns of the metrics table, in order.
pub const METRICS_COLUMNS: [&str; 6] = ["clip_id", "ls_mse", "mrstft", "l1_mel", "pesq", "stoi"];

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

/// Writes a sweep report. The table has one row per grid point (schedule
/// values space-separated) plus trailing `mean` and `std` rows.
pub fn emit_sweep(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(report, path),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(SWEEP_COLUMNS)?;
            for (i, r) in report.results.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    join(&r.schedule),
                    r.l1_mel.map(|v| format!("{v:e}")).unwrap_or_default(),
                    r.violations.join(" "),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
            w.write_record(["mean", "", &format!("{:e}", report.mean), "", ""])?;
            w.write_record(["std", "", &format!("{:e}", report.std), "", ""])?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Writes a metrics report; the table ends with a `mean` row.
pub fn emit_metrics(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(report, path),
        ReportFormat::Csv => {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(METRICS_COLUMNS)?;
            for c in &report.clips {
                w.write_record([
                    c.clip_id.clone(),
                    format!("{:e}", c.ls_mse),
                    format!("{:e}", c.mrstft),
                    format!("{:e}", c.l1_mel),
                    String::new(),
                    String::new(),
                ])?;
            }
            w.write_record([
                "mean".to_string(),
                format!("{:e}", report.ls_mse),
                format!("{:e}", report.mrstft),
                format!("{:e}", report.l1_mel),
                opt(report.pesq),
                opt(report.stoi),
            ])?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Scatter of per-schedule L1 (y) against grid index (x), white on black.
pub fn plot_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    let (w, h, margin) = (480u32, 320u32, 10u32);
    let mut img = RgbImage::new(w, h);
    let vals: Vec<(usize, f64)> = report.results.iter().enumerate().filter_map(|(i, r)| r.l1_mel.map(|v| (i, v))).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, (_, v)| (a.0.min(*v), a.1.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = report.results.len().max(2) - 1;
    for (i, v) in vals {
        let x = margin + ((w - 2 * margin) as f64 * i as f64 / n as f64) as u32;
        let y = h - margin - ((h - 2 * margin) as f64 * (v - lo) / span) as u32;
        let colour = if Some(i) == report.best { [255, 80, 80] } else { [255, 255, 255] };
        for dx in 0..3 {
            for dy in 0..3 {
                let (px, py) = ((x + dx).saturating_sub(1), (y + dy).saturating_sub(1));
                if px < w && py < h {
                    img.put_pixel(px, py, image::Rgb(colour));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Greyscale log-mel image: one column per frame, one row per band, low
/// frequencies at the bottom.
pub fn spectrogram_image(frames: &[f64], n_frames: usize, n_mels: usize) -> GrayImage {
    let (lo, hi) = frames.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(*v), a.1.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::from_fn(n_frames as u32, n_mels as u32, |x, y| {
        let band = n_mels - 1 - y as usize;
        let v = frames[x as usize * n_mels + band];
        Luma([((v - lo) / span * 255.0).round() as u8])
    })
}

/// Saves the conditioner log-mel of a waveform as a PNG.
pub fn plot_spectrogram(signal: &[f64], cfg: &FeatureConfig, path: &Path) -> Result<()> {
    let m = log_mel(signal, cfg)?;
    spectrogram_image(&m.frames, m.n_frames, m.n_mels).save(path)?;
    Ok(())
}
