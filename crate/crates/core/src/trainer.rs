//! Two-phase optimisation: epsilon-loss pretraining, then fine-tuning on
//! `L_D + lambda * L_I` where `L_I` compares ground truth against a sample
//! generated through a few-step reverse chain with a randomly drawn
//! inference schedule.
//!
//! Every step derives its random streams from `(seed, phase, step)`, so a
//! run resumed from a checkpoint continues bit-exactly. The `L_D` draws and
//! the schedule/chain draws use separate streams; with `lambda = 0` a
//! fine-tune step therefore computes exactly the pretraining gradient.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_data::{Dataset, MelConditioner, Segment};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{self, generate_on_tape, sample_continuous_level, ChainNoise, NoiseLevel, SamplerOptions};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, MultiResLoss};
use crate::noise_model::{save_checkpoint, Checkpoint, NoisePredictor, OptimizerState, ParamVars};
use crate::schedules::{AlphaBarCurve, InferenceSchedule, ScheduleRange};

pub const PRETRAIN_LEARNING_RATE: f64 = 2e-4;
pub const FINETUNE_LEARNING_RATE: f64 = 5.8e-5;
pub const FINETUNE_GRAD_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn stream_base(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1 << 40,
        }
    }
}

/// Maps keyed by step count `N`; written with string keys so they survive
/// TOML and JSON alike.
mod by_n {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(map: &BTreeMap<usize, T>, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<String, &T> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, T>, D::Error> {
        BTreeMap::<String, T>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|n| (n, v))
                    .map_err(|_| D::Error::custom(format!("step-count key {k:?} is not an integer")))
            })
            .collect()
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_lambdas() -> BTreeMap<usize, f64> {
    BTreeMap::from([(2, 5e-4), (3, 5e-4), (6, 1e-3)])
}

fn default_ranges() -> BTreeMap<usize, ScheduleRange> {
    [2, 3, 6]
        .into_iter()
        .map(|n| (n, ScheduleRange::standard(n).expect("standard range")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub phase: Phase,
    pub seed: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    /// Defaults to 2e-4 when pretraining and 5.8e-5 when fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Global gradient-norm clip; defaults to 1.0 when fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Step counts fine-tuned for; one is drawn uniformly per step.
    #[serde(default)]
    pub n_modes: Vec<usize>,
    #[serde(default = "default_lambdas", with = "by_n")]
    pub lambda_by_n: BTreeMap<usize, f64>,
    #[serde(default = "default_ranges", with = "by_n")]
    pub ranges_by_n: BTreeMap<usize, ScheduleRange>,
    #[serde(default)]
    pub sampler: SamplerOptions,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainingConfig {
    pub fn pretrain(seed: u64, max_steps: u64, batch_size: usize) -> Self {
        Self {
            phase: Phase::Pretrain,
            seed,
            max_steps,
            batch_size,
            learning_rate: None,
            grad_clip: None,
            checkpoint_every: 0,
            n_modes: vec![],
            lambda_by_n: default_lambdas(),
            ranges_by_n: default_ranges(),
            sampler: SamplerOptions::default(),
            adam: AdamConfig::default(),
        }
    }

    pub fn finetune(seed: u64, max_steps: u64, batch_size: usize, n_modes: Vec<usize>) -> Self {
        Self {
            phase: Phase::Finetune,
            n_modes,
            ..Self::pretrain(seed, max_steps, batch_size)
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.phase {
            Phase::Pretrain => PRETRAIN_LEARNING_RATE,
            Phase::Finetune => FINETUNE_LEARNING_RATE,
        })
    }

    pub fn grad_clip(&self) -> Option<f64> {
        match self.phase {
            Phase::Pretrain => self.grad_clip,
            Phase::Finetune => Some(self.grad_clip.unwrap_or(FINETUNE_GRAD_CLIP)),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate() > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(c) = self.grad_clip() {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.phase == Phase::Finetune {
            if self.n_modes.is_empty() {
                return Err(Error::Config("fine-tuning needs at least one step count in n_modes".into()));
            }
            for n in &self.n_modes {
                let range = self
                    .ranges_by_n
                    .get(n)
                    .ok_or_else(|| Error::Config(format!("no schedule range for N={n}")))?;
                if range.steps() != *n {
                    return Err(Error::Config(format!("range for N={n} has {} steps", range.steps())));
                }
                match self.lambda_by_n.get(n) {
                    Some(l) if *l >= 0.0 => {}
                    _ => return Err(Error::Config(format!("no nonnegative lambda for N={n}"))),
                }
            }
        }
        Ok(())
    }

    /// Digest of the fields that shape the trajectory (not its length or
    /// checkpoint cadence), used to validate resumption.
    pub fn trajectory_digest(&self) -> String {
        let mut c = self.clone();
        c.max_steps = 0;
        c.checkpoint_every = 0;
        crate::audio_data::digest_json(&c)
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub losses: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Independent random stream for `(seed, phase, step, purpose)`.
pub fn step_rng(seed: u64, phase: Phase, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase.stream_base() + step * 4 + purpose);
    rng
}

const STREAM_DATA: u64 = 0;
const STREAM_UNROLL: u64 = 1;

/// The sampled inputs of the infer-loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollDraw {
    pub n: usize,
    pub schedule: InferenceSchedule,
    pub lambda: f64,
    /// One chain per batch item.
    pub noise: Vec<ChainNoise>,
}

/// Everything random about one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub levels: Vec<NoiseLevel>,
    pub eps: Vec<Vec<f64>>,
    pub unroll: Option<UnrollDraw>,
}

/// Draws levels and noise for `L_D`.
pub fn draw_diffusion<R: Rng + ?Sized>(batch: &[Segment], curve: &AlphaBarCurve, rng: &mut R) -> (Vec<NoiseLevel>, Vec<Vec<f64>>) {
    batch
        .iter()
        .map(|s| {
            let level = sample_continuous_level(curve, rng);
            (level, diffusion::standard_normal(s.audio.len(), rng))
        })
        .unzip()
}

/// Draws `N` uniformly from `n_modes`, one schedule from its range and the
/// chain noise of every batch item.
pub fn draw_unroll<R: Rng + ?Sized>(batch: &[Segment], cfg: &TrainingConfig, rng: &mut R) -> Result<UnrollDraw> {
    let n = cfg.n_modes[rng.random_range(0..cfg.n_modes.len())];
    let schedule = cfg.ranges_by_n[&n].sample(rng)?;
    let noise = batch
        .iter()
        .map(|s| ChainNoise::draw(s.audio.len(), n, rng))
        .collect();
    Ok(UnrollDraw {
        n,
        lambda: cfg.lambda_by_n[&n],
        schedule,
        noise,
    })
}

/// A model that can stand in for the noise predictor in the `L_D` term.
pub trait EpsilonModel {
    fn register(&self, tape: &mut Tape) -> ParamVars;
    fn record_eps(&self, tape: &mut Tape, vars: &ParamVars, x_t: Var, mel: &MelConditioner, sqrt_alpha_bar: f64) -> Result<Var>;
    fn tensors(&self) -> &[Vec<f64>];
    fn tensors_mut(&mut self) -> &mut [Vec<f64>];
}

impl EpsilonModel for NoisePredictor {
    fn register(&self, tape: &mut Tape) -> ParamVars {
        NoisePredictor::register(self, tape)
    }

    fn record_eps(&self, tape: &mut Tape, vars: &ParamVars, x_t: Var, mel: &MelConditioner, sqrt_alpha_bar: f64) -> Result<Var> {
        self.record(tape, vars, x_t, mel, sqrt_alpha_bar)
    }

    fn tensors(&self) -> &[Vec<f64>] {
        NoisePredictor::tensors(self)
    }

    fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        NoisePredictor::tensors_mut(self)
    }
}

fn accumulate(total: &mut [Vec<f64>], tape_grads: &crate::autodiff::Grads, vars: &ParamVars, scale: f64) {
    for (acc, v) in total.iter_mut().zip(&vars.0) {
        if let Some(g) = tape_grads.get(*v) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += scale * x;
            }
        }
    }
}

fn zeros_like(t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    t.iter().map(|p| vec![0.0; p.len()]).collect()
}

/// Records `L_D` of one item.
fn record_diffusion<M: EpsilonModel>(tape: &mut Tape, vars: &ParamVars, model: &M, seg: &Segment, level: &NoiseLevel, eps: &[f64]) -> Result<Var> {
    let noisy = diffusion::forward_sample(&seg.audio, level.alpha_bar(), eps)?;
    let x = tape.leaf(noisy, 1, seg.audio.len());
    let eps_hat = model.record_eps(tape, vars, x, &seg.mel, level.sqrt_alpha_bar)?;
    let neg: Vec<f64> = eps.iter().map(|v| -v).collect();
    let diff = tape.add_const(eps_hat, &neg);
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// `L_D` averaged over the batch and its parameter gradient.
pub fn diffusion_objective<M: EpsilonModel>(
    model: &M,
    batch: &[Segment],
    levels: &[NoiseLevel],
    eps: &[Vec<f64>],
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut grads = want_grad.then(|| zeros_like(model.tensors()));
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ((seg, level), e) in batch.iter().zip(levels).zip(eps) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let l = record_diffusion(&mut tape, &vars, model, seg, level, e)?;
        total += tape.scalar(l) * inv;
        if let Some(g) = grads.as_mut() {
            accumulate(g, &tape.backward(l), &vars, inv);
        }
    }
    Ok((total, grads))
}

/// Full step objective `L_D + lambda * L_I` (batch means), its breakdown
/// and optionally its parameter gradient.
pub fn step_objective(
    predictor: &NoisePredictor,
    batch: &[Segment],
    draws: &StepDraws,
    loss: &MultiResLoss,
    sampler: SamplerOptions,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>)> {
    let (l_d, mut grads) = diffusion_objective(predictor, batch, &draws.levels, &draws.eps, want_grad)?;
    let mut out = LossBreakdown {
        l_d,
        total: l_d,
        ..Default::default()
    };
    let Some(unroll) = draws.unroll.as_ref().filter(|u| u.lambda > 0.0) else {
        if let Some(u) = &draws.unroll {
            out.lambda = u.lambda;
        }
        return Ok((out, grads));
    };
    let m = loss.config().resolutions.len();
    let inv = 1.0 / batch.len() as f64;
    let (mut l_i, mut l_mag, mut l_pha) = (0.0, vec![0.0; m], vec![0.0; m]);
    for (seg, noise) in batch.iter().zip(&unroll.noise) {
        let reference = loss.reference(&seg.audio)?;
        let mut tape = Tape::new();
        let vars = predictor.register(&mut tape);
        let x_hat = generate_on_tape(&mut tape, &vars, predictor, &seg.mel, &unroll.schedule, noise, sampler)?;
        let nodes = loss.record(&mut tape, x_hat, &reference)?;
        let li = tape.scalar(nodes.total);
        if !li.is_finite() {
            return Err(Error::numerical(None, format!("non-finite infer loss under schedule {}", unroll.schedule)));
        }
        l_i += li * inv;
        for r in 0..m {
            l_mag[r] += nodes.mag[r].map(|v| tape.scalar(v)).unwrap_or(0.0) * inv;
            l_pha[r] += nodes.pha[r].map(|v| tape.scalar(v)).unwrap_or(0.0) * inv;
        }
        if let Some(g) = grads.as_mut() {
            accumulate(g, &tape.backward(nodes.total), &vars, unroll.lambda * inv);
        }
    }
    out.l_i = Some(l_i);
    out.l_mag = l_mag;
    out.l_pha = l_pha;
    out.lambda = unroll.lambda;
    out.total = crate::losses::total_loss(l_d, l_i, unroll.lambda);
    Ok((out, grads))
}

/// Global L2 norm of a gradient.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One Adam update (with optional global-norm clipping). Returns the
/// pre-clip gradient norm.
pub fn adam_update(params: &mut [Vec<f64>], grads: &mut [Vec<f64>], state: &mut OptimizerState, lr: f64, adam: AdamConfig, clip: Option<f64>) -> f64 {
    let norm = grad_norm(grads);
    if let Some(c) = clip {
        if norm > c {
            let k = c / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for i in 0..p.len() {
            m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
            v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + adam.eps);
        }
    }
    norm
}

fn check_finite_params(params: &[Vec<f64>], step: u64) -> Result<()> {
    if params.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numerical(Some(step as usize), "optimizer produced a non-finite parameter"));
    }
    Ok(())
}

/// One pretraining step on an explicit batch.
pub fn pretrain_step<M: EpsilonModel, R: Rng + ?Sized>(
    model: &mut M,
    batch: &[Segment],
    curve: &AlphaBarCurve,
    rng: &mut R,
    state: &mut OptimizerState,
    cfg: &TrainingConfig,
) -> Result<StepRecord> {
    let start = Instant::now();
    let step = state.t;
    let (levels, eps) = draw_diffusion(batch, curve, rng);
    let (l_d, grads) = diffusion_objective(&*model, batch, &levels, &eps, true)?;
    if !l_d.is_finite() {
        let worst = levels.iter().map(|l| l.sqrt_alpha_bar).fold(f64::NAN, f64::min);
        return Err(Error::numerical(
            Some(step as usize),
            format!("non-finite diffusion loss (seed {}, lowest level {worst})", cfg.seed),
        ));
    }
    let mut grads = grads.expect("requested");
    let norm = adam_update(model.tensors_mut(), &mut grads, state, cfg.learning_rate(), cfg.adam, cfg.grad_clip());
    check_finite_params(model.tensors(), step)?;
    Ok(StepRecord {
        step: state.t,
        phase: Phase::Pretrain,
        losses: LossBreakdown {
            l_d,
            total: l_d,
            ..Default::default()
        },
        n: None,
        schedule: None,
        grad_norm: norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One fine-tuning step. `data_rng` drives the `L_D` draws and
/// `unroll_rng` the step count, schedule and chain noise.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    predictor: &mut NoisePredictor,
    batch: &[Segment],
    curve: &AlphaBarCurve,
    loss: &MultiResLoss,
    cfg: &TrainingConfig,
    data_rng: &mut R1,
    unroll_rng: &mut R2,
    state: &mut OptimizerState,
) -> Result<StepRecord> {
    let start = Instant::now();
    let step = state.t;
    let (levels, eps) = draw_diffusion(batch, curve, data_rng);
    let unroll = draw_unroll(batch, cfg, unroll_rng)?;
    let (n, schedule) = (unroll.n, unroll.schedule.betas().to_vec());
    let draws = StepDraws {
        levels,
        eps,
        unroll: Some(unroll),
    };
    let (losses, grads) = step_objective(predictor, batch, &draws, loss, cfg.sampler, true).map_err(|e| match e {
        Error::Numerical { step: s, message } => Error::numerical(s.or(Some(step as usize)), format!("{message} (schedule {schedule:?})")),
        other => other,
    })?;
    if !losses.total.is_finite() {
        return Err(Error::numerical(Some(step as usize), format!("non-finite loss under schedule {schedule:?}")));
    }
    let mut grads = grads.expect("requested");
    let norm = adam_update(predictor.tensors_mut(), &mut grads, state, cfg.learning_rate(), cfg.adam, cfg.grad_clip());
    check_finite_params(predictor.tensors(), step)?;
    Ok(StepRecord {
        step: state.t,
        phase: Phase::Finetune,
        losses,
        n: Some(n),
        schedule: Some(schedule),
        grad_norm: norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// An objective for [`gradcheck`]: value plus optional analytic gradient.
pub trait Objective {
    fn evaluate(&self, predictor: &NoisePredictor, want_grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>;
}

impl<F> Objective for F
where
    F: Fn(&NoisePredictor, bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
{
    fn evaluate(&self, predictor: &NoisePredictor, want_grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        self(predictor, want_grad)
    }
}

/// Result of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(flat index, analytic, finite difference)` per sampled parameter.
    pub samples: Vec<(usize, f64, f64)>,
}

/// Compares analytic gradients against central differences with step
/// `epsilon` on `sample_count` parameters chosen by `seed`. Relative error
/// is `|a - f| / max(|a|, |f|, 1e-10)`.
pub fn gradcheck(objective: &dyn Objective, predictor: &NoisePredictor, epsilon: f64, sample_count: usize, seed: u64) -> Result<GradcheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("gradcheck epsilon must be positive, got {epsilon}")));
    }
    let (_, grads) = objective.evaluate(predictor, true)?;
    let flat: Vec<f64> = grads.expect("requested").into_iter().flatten().collect();
    let total = predictor.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, sample_count.min(total)).into_vec();
    let mut samples = Vec::with_capacity(picks.len());
    let mut worst: f64 = 0.0;
    for i in picks {
        let mut p = predictor.clone();
        p.set(i, predictor.get(i) + epsilon);
        let (up, _) = objective.evaluate(&p, false)?;
        p.set(i, predictor.get(i) - epsilon);
        let (down, _) = objective.evaluate(&p, false)?;
        let fd = (up - down) / (2.0 * epsilon);
        let err = (flat[i] - fd).abs() / flat[i].abs().max(fd.abs()).max(1e-10);
        worst = worst.max(err);
        samples.push((i, flat[i], fd));
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        samples,
    })
}

/// Where run artefacts go.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:07}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("steps.ndjson")
    }
}

/// Inputs of [`run_training`] that fully determine its trajectory.
#[derive(Debug, Clone)]
pub struct TrainingJob<'a> {
    pub training: &'a TrainingConfig,
    pub curve: &'a AlphaBarCurve,
    pub loss: &'a MultiResLoss,
    pub dataset: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

/// Trains from `start` (a fresh or pretrained predictor, whose optimizer
/// state is reset) or continues `resume` (a checkpoint written by an
/// earlier run of the same job).
pub fn run_training(job: &TrainingJob, start: Option<NoisePredictor>, resume: Option<Checkpoint>, output: Option<&RunOutput>) -> Result<TrainingOutcome> {
    let cfg = job.training;
    cfg.check()?;
    let run_digest = cfg.trajectory_digest();
    let (mut predictor, mut state) = match (start, resume) {
        (_, Some(ckpt)) => {
            if ckpt.run_digest.as_deref() != Some(run_digest.as_str()) {
                return Err(Error::ConfigMismatch {
                    expected: run_digest,
                    found: ckpt.run_digest.unwrap_or_default(),
                });
            }
            if ckpt.dataset_digest.as_deref() != Some(job.dataset.digest()) {
                return Err(Error::DatasetMismatch {
                    expected: job.dataset.digest().to_string(),
                    found: ckpt.dataset_digest.unwrap_or_default(),
                });
            }
            let state = ckpt
                .optimizer
                .ok_or_else(|| Error::Config("resume checkpoint carries no optimizer state".into()))?;
            (ckpt.predictor, state)
        }
        (Some(p), None) => {
            let s = OptimizerState::zeros(&p);
            (p, s)
        }
        (None, None) => return Err(Error::Config("training needs an initial predictor or a checkpoint".into())),
    };
    let train_ids = &job.dataset.split().train_ids;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir)?;
        truncate_log(&out.log_path(), state.t)?;
    }
    let mut records = Vec::new();
    let snapshot = |predictor: &NoisePredictor, state: &OptimizerState| Checkpoint {
        predictor: predictor.clone(),
        optimizer: Some(state.clone()),
        dataset_digest: Some(job.dataset.digest().to_string()),
        run_digest: Some(run_digest.clone()),
    };
    while state.t < cfg.max_steps {
        let step = state.t;
        let mut data_rng = step_rng(cfg.seed, cfg.phase, step, STREAM_DATA);
        let batch = job.dataset.sample_batch(train_ids, cfg.batch_size, &mut data_rng)?;
        let record = match cfg.phase {
            Phase::Pretrain => pretrain_step(&mut predictor, &batch, job.curve, &mut data_rng, &mut state, cfg)?,
            Phase::Finetune => {
                let mut unroll_rng = step_rng(cfg.seed, cfg.phase, step, STREAM_UNROLL);
                finetune_step(&mut predictor, &batch, job.curve, job.loss, cfg, &mut data_rng, &mut unroll_rng, &mut state)?
            }
        };
        predictor.step_count += 1;
        log::debug!("step {} total {:.6}", record.step, record.losses.total);
        if let Some(out) = output {
            append_record(&out.log_path(), &record)?;
            if cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0 {
                save_checkpoint(&snapshot(&predictor, &state), out.checkpoint_path(state.t))?;
            }
        }
        records.push(record);
    }
    let checkpoint = snapshot(&predictor, &state);
    if let Some(out) = output {
        save_checkpoint(&checkpoint, out.final_path())?;
    }
    Ok(TrainingOutcome { checkpoint, records })
}

fn append_record(path: &Path, record: &StepRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Drops log lines past `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .map(|l| l.map_err(Error::from))
        .filter_map(|l| match l {
            Ok(line) => match serde_json::from_str::<StepRecord>(&line) {
                Ok(r) if r.step <= step => Some(Ok(line)),
                Ok(_) => None,
                Err(e) => Some(Err(e.into())),
            },
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a step log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_data::{synth_corpus, DatasetSplit, FeatureConfig, SynthSpec};
    use crate::losses::MultiResConfig;
    use crate::noise_model::NetworkConfig;
    use crate::schedules::NoiseSchedule;

    fn dataset(n: usize) -> Dataset {
        let clips: Vec<_> = synth_corpus(&SynthSpec::desk(n, 1)).unwrap().into_iter().map(|c| c.clip).collect();
        let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
        Dataset::new(clips, DatasetSplit::from_counts(&ids, 1, 1).unwrap(), FeatureConfig::desk()).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![vec![1.0, -2.0]];
        let mut g = vec![vec![0.5, -3.0]];
        let mut s = OptimizerState {
            t: 0,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        adam_update(&mut p, &mut g, &mut s, 0.1, AdamConfig::default(), None);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0][0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[0][1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![vec![3.0, 4.0]];
        let mut p = vec![vec![0.0, 0.0]];
        let mut s = OptimizerState {
            t: 0,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        let n = adam_update(&mut p, &mut g, &mut s, 0.0, AdamConfig::default(), Some(1.0));
        assert_eq!(n, 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    }

    struct Oracle {
        x0: Vec<f64>,
        dummy: Vec<Vec<f64>>,
    }

    impl EpsilonModel for Oracle {
        fn register(&self, tape: &mut Tape) -> ParamVars {
            ParamVars(vec![tape.leaf(self.dummy[0].clone(), 1, 2)])
        }
        fn record_eps(&self, tape: &mut Tape, _: &ParamVars, x_t: Var, _: &MelConditioner, s: f64) -> Result<Var> {
            let c = (1.0 - s * s).sqrt();
            let eps = tape.value(x_t).iter().zip(&self.x0).map(|(x, x0)| (x - s * x0) / c).collect();
            Ok(tape.leaf(eps, 1, self.x0.len()))
        }
        fn tensors(&self) -> &[Vec<f64>] {
            &self.dummy
        }
        fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
            &mut self.dummy
        }
    }

    #[test]
    fn oracle_model_has_zero_loss_and_stays_put() {
        let ds = dataset(4);
        let seg = ds.segment_at(&ds.split().train_ids[0], 3).unwrap();
        let mut model = Oracle {
            x0: seg.audio.clone(),
            dummy: vec![vec![0.3, -0.7]],
        };
        let mut state = OptimizerState {
            t: 0,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        let curve = NoiseSchedule::standard().alpha_bar();
        let cfg = TrainingConfig::pretrain(0, 1, 1);
        let r = pretrain_step(&mut model, &[seg], &curve, &mut ChaCha8Rng::seed_from_u64(0), &mut state, &cfg).unwrap();
        assert!(r.losses.l_d < 1e-20);
        assert_eq!(model.dummy, vec![vec![0.3, -0.7]]);
    }

    #[test]
    fn seeded_steps_repeat() {
        let ds = dataset(4);
        let curve = NoiseSchedule::standard().alpha_bar();
        let cfg = TrainingConfig::pretrain(3, 1, 2);
        let run = || {
            let mut p = NoisePredictor::init(NetworkConfig::desk(), 1).unwrap();
            let mut s = OptimizerState::zeros(&p);
            let mut rng = step_rng(3, Phase::Pretrain, 0, 0);
            let batch = ds.sample_batch(&ds.split().train_ids, 2, &mut rng).unwrap();
            let mut r = pretrain_step(&mut p, &batch, &curve, &mut rng, &mut s, &cfg).unwrap();
            r.wall_ms = 0.0;
            (p, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lambda_finetune_matches_pretrain_gradient() {
        let ds = dataset(4);
        let curve = NoiseSchedule::standard().alpha_bar();
        let loss = MultiResLoss::new(MultiResConfig::desk(), ds.config()).unwrap();
        let p = NoisePredictor::init(NetworkConfig::desk(), 2).unwrap();
        let mut cfg = TrainingConfig::finetune(5, 1, 2, vec![2]);
        cfg.lambda_by_n.insert(2, 0.0);
        let mut rng = step_rng(5, Phase::Finetune, 0, STREAM_DATA);
        let batch = ds.sample_batch(&ds.split().train_ids, 2, &mut rng).unwrap();
        let (levels, eps) = draw_diffusion(&batch, &curve, &mut rng);
        let unroll = draw_unroll(&batch, &cfg, &mut step_rng(5, Phase::Finetune, 0, STREAM_UNROLL)).unwrap();
        let draws = StepDraws {
            levels: levels.clone(),
            eps: eps.clone(),
            unroll: Some(unroll),
        };
        let (_, g_ft) = step_objective(&p, &batch, &draws, &loss, SamplerOptions::default(), true).unwrap();
        let (_, g_pt) = diffusion_objective(&p, &batch, &levels, &eps, true).unwrap();
        assert_eq!(g_ft, g_pt);
    }

    #[test]
    fn general_mode_draws_are_uniform_and_in_range() {
        let cfg = TrainingConfig::finetune(0, 1, 1, vec![2, 3, 6]);
        let seg = Segment {
            clip_id: "x".into(),
            start: 0,
            audio: vec![0.0; 8],
            mel: MelConditioner {
                frames: vec![],
                n_frames: 0,
                n_mels: 0,
                config_digest: String::new(),
            },
        };
        let mut counts = BTreeMap::new();
        let steps = 10_000;
        for s in 0..steps {
            let d = draw_unroll(std::slice::from_ref(&seg), &cfg, &mut step_rng(0, Phase::Finetune, s, STREAM_UNROLL)).unwrap();
            *counts.entry(d.n).or_insert(0usize) += 1;
            let b = d.schedule.betas();
            assert!(b.windows(2).all(|w| w[0] < w[1]));
            if d.n == 3 {
                assert!((0.1..1.0).contains(&b[2]));
            }
        }
        for n in [2, 3, 6] {
            let f = counts[&n] as f64 / steps as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "N={n}: {f}");
        }
    }

    #[test]
    fn gradcheck_on_a_quadratic() {
        let p = NoisePredictor::init(NetworkConfig::desk(), 0).unwrap();
        let quad = |q: &NoisePredictor, want: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
            let v = q.tensors().iter().flatten().map(|x| 1.5 * x * x + 0.25 * x).sum();
            let g = want.then(|| q.tensors().iter().map(|t| t.iter().map(|x| 3.0 * x + 0.25).collect()).collect());
            Ok((v, g))
        };
        let r = gradcheck(&quad, &p, 1e-3, 40, 1).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(gradcheck(&quad, &p, 0.0, 4, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainingConfig::finetune(0, 1, 1, vec![4]);
        assert!(cfg.check().is_err());
        cfg.n_modes = vec![3];
        cfg.check().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.check().is_err());
        let text = toml::to_string(&TrainingConfig::finetune(0, 1, 1, vec![3])).unwrap();
        let back: TrainingConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, TrainingConfig::finetune(0, 1, 1, vec![3]));
    }
}
