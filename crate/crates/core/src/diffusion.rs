//! Forward corruption, continuous noise-level sampling and the ancestral
//! reverse sampler.
//!
//! The forward marginal is `q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)`;
//! the variance is an identity scaled by `1 - abar_t`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_data::MelConditioner;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::noise_model::{NoisePredictor, ParamVars};
use crate::schedules::{AlphaBarCurve, InferenceSchedule};

/// Variance of the noise injected by a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `sigma^2 = (1 - abar_prev) / (1 - abar_n) * beta_n`
    #[default]
    Posterior,
    /// `sigma^2 = beta_n`
    Beta,
}

impl SigmaMode {
    pub fn sigma(self, beta: f64, abar_n: f64, abar_prev: f64) -> f64 {
        match self {
            SigmaMode::Posterior => ((1.0 - abar_prev) / (1.0 - abar_n) * beta).sqrt(),
            SigmaMode::Beta => beta.sqrt(),
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn forward_sample(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Contract(format!("x0 has {} samples, eps {}", x0.len(), eps.len())));
    }
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::Contract(format!("alpha_bar {alpha_bar} outside (0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// A continuous training noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    /// Discrete segment `s` in `1..=T` the level was drawn from.
    pub segment: usize,
    pub sqrt_alpha_bar: f64,
}

impl NoiseLevel {
    pub fn alpha_bar(&self) -> f64 {
        self.sqrt_alpha_bar * self.sqrt_alpha_bar
    }

    /// `(sqrt(abar), sqrt(1 - abar))`.
    pub fn coefficients(&self) -> (f64, f64) {
        (self.sqrt_alpha_bar, (1.0 - self.alpha_bar()).max(0.0).sqrt())
    }
}

/// Picks a segment `s` uniformly from `1..=T`, then `sqrt(abar)` uniformly
/// between `sqrt(abar_s)` and `sqrt(abar_{s-1})`.
pub fn sample_continuous_level<R: Rng + ?Sized>(curve: &AlphaBarCurve, rng: &mut R) -> NoiseLevel {
    let v = curve.values();
    let s = rng.random_range(1..=curve.steps());
    let (lo, hi) = (v[s].sqrt(), v[s - 1].sqrt());
    let u: f64 = rng.random();
    NoiseLevel {
        segment: s,
        sqrt_alpha_bar: lo + (hi - lo) * u,
    }
}

/// Coefficients of one reverse step: `x' = a x - c eps_hat (+ sigma z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub c: f64,
    pub sigma: f64,
}

impl StepCoefficients {
    pub fn new(beta: f64, abar_n: f64, abar_prev: f64, mode: SigmaMode) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) || !(abar_n > 0.0 && abar_n < abar_prev && abar_prev <= 1.0) {
            return Err(Error::Contract(format!(
                "reverse step needs 0 < beta < 1 and 0 < abar_n < abar_prev <= 1, got beta {beta}, abar_n {abar_n}, abar_prev {abar_prev}"
            )));
        }
        let expected = abar_prev * (1.0 - beta);
        if (abar_n - expected).abs() > 1e-12 * expected {
            return Err(Error::Contract(format!(
                "abar_n {abar_n} != abar_prev * (1 - beta) = {expected}"
            )));
        }
        let sqrt_alpha = (1.0 - beta).sqrt();
        Ok(Self {
            a: 1.0 / sqrt_alpha,
            c: beta / (1.0 - abar_n).sqrt() / sqrt_alpha,
            sigma: mode.sigma(beta, abar_n, abar_prev),
        })
    }
}

/// `mu = (x_n - beta / sqrt(1 - abar_n) * eps_hat) / sqrt(1 - beta)`,
/// plus `sigma z` when `add_noise`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    x_n: &[f64],
    eps_hat: &[f64],
    beta: f64,
    abar_n: f64,
    abar_prev: f64,
    z: &[f64],
    mode: SigmaMode,
    add_noise: bool,
) -> Result<Vec<f64>> {
    if x_n.len() != eps_hat.len() || (add_noise && z.len() != x_n.len()) {
        return Err(Error::Contract("reverse step inputs differ in length".into()));
    }
    let k = StepCoefficients::new(beta, abar_n, abar_prev, mode)?;
    let out: Vec<f64> = if add_noise {
        x_n.iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((x, e), z)| k.a * x - k.c * e + k.sigma * z)
            .collect()
    } else {
        x_n.iter().zip(eps_hat).map(|(x, e)| k.a * x - k.c * e).collect()
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(None, "reverse step produced a non-finite value"));
    }
    Ok(out)
}

/// The Gaussian draws of one generation: the starting point and the noise
/// injected after steps `N..2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub x_start: Vec<f64>,
    /// `injections[k]` follows step `N - k`.
    pub injections: Vec<Vec<f64>>,
}

impl ChainNoise {
    pub fn draw<R: Rng + ?Sized>(len: usize, steps: usize, rng: &mut R) -> Self {
        let x_start = standard_normal(len, rng);
        let injections = (1..steps).map(|_| standard_normal(len, rng)).collect();
        Self { x_start, injections }
    }
}

/// Reverse-chain options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub sigma_mode: SigmaMode,
    /// Add `sigma z` after every step but the last.
    pub inject_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            sigma_mode: SigmaMode::Posterior,
            inject_noise: true,
        }
    }
}

fn check_chain(mel: &MelConditioner, predictor: &NoisePredictor, infer: &InferenceSchedule, noise: &ChainNoise) -> Result<usize> {
    let len = mel.n_frames * predictor.config().hop_length();
    if noise.x_start.len() != len || noise.injections.len() + 1 != infer.steps() {
        return Err(Error::Contract(format!(
            "chain noise does not fit {} steps over {len} samples",
            infer.steps()
        )));
    }
    if noise.injections.iter().any(|z| z.len() != len) {
        return Err(Error::Contract("injection noise has the wrong length".into()));
    }
    Ok(len)
}

/// Records the whole reverse chain on `tape`, so gradients flow into the
/// predictor parameters in `vars`. Injected noise is constant.
pub fn generate_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    predictor: &NoisePredictor,
    mel: &MelConditioner,
    infer: &InferenceSchedule,
    noise: &ChainNoise,
    opts: SamplerOptions,
) -> Result<Var> {
    let len = check_chain(mel, predictor, infer, noise)?;
    let abar = infer.alpha_bar();
    let betas = infer.betas();
    let n_steps = infer.steps();
    let mut x = tape.leaf(noise.x_start.clone(), 1, len);
    for n in (1..=n_steps).rev() {
        let k = StepCoefficients::new(betas[n - 1], abar[n], abar[n - 1], opts.sigma_mode)?;
        let eps = predictor.record(tape, vars, x, mel, abar[n].sqrt())?;
        let ax = tape.scale(x, k.a);
        let ce = tape.scale(eps, k.c);
        x = tape.sub(ax, ce);
        if n > 1 && opts.inject_noise {
            let z: Vec<f64> = noise.injections[n_steps - n].iter().map(|v| k.sigma * v).collect();
            x = tape.add_const(x, &z);
        }
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(Some(n), format!("non-finite sample at reverse step {n} of {infer}")));
        }
    }
    Ok(x)
}

/// Runs the reverse chain one step per scratch tape, without keeping
/// gradient history. Produces the same values as [`generate_on_tape`].
pub fn generate_with_noise(
    predictor: &NoisePredictor,
    mel: &MelConditioner,
    infer: &InferenceSchedule,
    noise: &ChainNoise,
    opts: SamplerOptions,
) -> Result<Vec<f64>> {
    check_chain(mel, predictor, infer, noise)?;
    let abar = infer.alpha_bar();
    let betas = infer.betas();
    let n_steps = infer.steps();
    let mut x = noise.x_start.clone();
    for n in (1..=n_steps).rev() {
        let eps = predictor.predict_noise(&x, mel, abar[n].sqrt())?;
        let add = n > 1 && opts.inject_noise;
        let z: &[f64] = if add { &noise.injections[n_steps - n] } else { &[] };
        x = reverse_step(&x, &eps, betas[n - 1], abar[n], abar[n - 1], z, opts.sigma_mode, add).map_err(|e| match e {
            Error::Numerical { message, .. } => {
                Error::numerical(Some(n), format!("{message} at reverse step {n} of {infer}"))
            }
            other => other,
        })?;
    }
    Ok(x)
}

/// Generates a waveform of `hop * frames` samples from standard-normal noise.
pub fn generate<R: Rng + ?Sized>(
    predictor: &NoisePredictor,
    mel: &MelConditioner,
    infer: &InferenceSchedule,
    rng: &mut R,
    opts: SamplerOptions,
) -> Result<Vec<f64>> {
    let len = mel.n_frames * predictor.config().hop_length();
    let noise = ChainNoise::draw(len, infer.steps(), rng);
    generate_with_noise(predictor, mel, infer, &noise, opts)
}
