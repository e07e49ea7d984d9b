//! Training losses: the epsilon-prediction loss, the multi-resolution STFT
//! magnitude + phase infer loss, and their weighted combination.
//!
//! The infer loss is evaluated on an autodiff [`Tape`] so that it can be
//! backpropagated into a generated waveform. Reference-side spectra are
//! computed through the same code on a scratch tape, which keeps
//! `loss(x, x) == 0` exact.

pub mod mel;
pub mod stft;

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio_data::FeatureConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
pub use mel::MelFilterbank;
pub use stft::{stft, DftPlan, Spectrogram, StftConfig};

/// Additive floor inside the log of mel magnitudes.
pub const LOG_FLOOR: f64 = 1e-5;
/// Bins where both magnitudes fall below this are excluded from the phase loss.
pub const PHASE_MASK_THRESHOLD: f64 = 1e-4;
/// Keeps the magnitude gradient finite at exactly-zero bins.
const MAG_DELTA: f64 = 1e-18;

/// Resolutions and term toggles of the infer loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiResConfig {
    pub resolutions: Vec<StftConfig>,
    #[serde(default = "yes")]
    pub include_mag: bool,
    #[serde(default = "yes")]
    pub include_pha: bool,
    /// Drop near-silent bins from the phase term.
    #[serde(default = "yes")]
    pub mask_phase: bool,
}

fn yes() -> bool {
    true
}

impl MultiResConfig {
    /// FFT sizes 512/1024/2048 with Hann windows of 240/600/1200 samples.
    pub fn standard() -> Self {
        Self::from_pairs(&[(512, 240), (1024, 600), (2048, 1200)])
    }

    /// Scaled-down resolutions for 8 kHz desk experiments.
    pub fn desk() -> Self {
        Self::from_pairs(&[(32, 16), (64, 32), (128, 64)])
    }

    fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            resolutions: pairs.iter().map(|&(n, w)| StftConfig::new(n, w)).collect(),
            include_mag: true,
            include_pha: true,
            mask_phase: true,
        }
    }

    /// Magnitude-only variant (phase term removed).
    pub fn without_phase(mut self) -> Self {
        self.include_pha = false;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("at least one STFT resolution is required".into()));
        }
        if !self.include_mag && !self.include_pha {
            return Err(Error::Config("infer loss needs the magnitude or the phase term".into()));
        }
        self.resolutions.iter().try_for_each(StftConfig::check)
    }

    pub fn max_window(&self) -> usize {
        self.resolutions.iter().map(|r| r.window_length).max().unwrap_or(0)
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_i: Option<f64>,
    pub l_mag: Vec<f64>,
    pub l_pha: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::Contract(format!(
            "diffusion loss shapes differ: {} vs {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    Ok(eps.iter().zip(eps_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64)
}

/// `l_d + lambda * l_i`.
pub fn total_loss(l_d: f64, l_i: f64, lambda: f64) -> f64 {
    l_d + lambda * l_i
}

/// Constant reference-side spectra at one resolution.
#[derive(Debug, Clone)]
struct ReferenceSpectra {
    log_mel: Vec<f64>,
    phase: Vec<f64>,
    magnitude: Vec<f64>,
}

/// Precomputed reference spectra of a ground-truth waveform.
#[derive(Debug, Clone)]
pub struct Reference {
    len: usize,
    per_resolution: Vec<ReferenceSpectra>,
}

#[derive(Debug, Clone)]
struct Resolution {
    plan: DftPlan,
    fb: MelFilterbank,
    fb_t: Arc<Vec<f64>>,
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone)]
pub struct InferLossNodes {
    pub total: Var,
    pub mag: Vec<Option<Var>>,
    pub pha: Vec<Option<Var>>,
}

/// Values of one infer-loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferLossValue {
    pub total: f64,
    pub mag: Vec<f64>,
    pub pha: Vec<f64>,
}

/// Multi-resolution STFT magnitude + phase loss with per-resolution mel
/// filterbanks sharing the conditioner's band count and frequency range.
#[derive(Debug, Clone)]
pub struct MultiResLoss {
    cfg: MultiResConfig,
    resolutions: Vec<Resolution>,
}

struct Features {
    log_mel: Var,
    phase: Option<Var>,
    magnitude: Var,
}

impl Resolution {
    fn features(&self, tape: &mut Tape, signal: Var, with_phase: bool) -> Result<Features> {
        let (re, im) = self.plan.analyze(tape, signal)?;
        let magnitude = tape.hypot(re, im, MAG_DELTA);
        let mel = tape.matmul_const(magnitude, self.fb_t.clone(), self.fb.n_mels);
        let log_mel = tape.ln_offset(mel, LOG_FLOOR);
        let phase = with_phase.then(|| tape.atan2(im, re));
        Ok(Features {
            log_mel,
            phase,
            magnitude,
        })
    }

    fn mag_loss(&self, tape: &mut Tape, hat: &Features, reference: &ReferenceSpectra) -> Var {
        let neg: Vec<f64> = reference.log_mel.iter().map(|v| -v).collect();
        let diff = tape.add_const(hat.log_mel, &neg);
        let abs = tape.abs(diff);
        tape.mean(abs)
    }

    fn pha_loss(&self, tape: &mut Tape, hat: &Features, reference: &ReferenceSpectra, mask_phase: bool) -> Var {
        let phase = hat.phase.expect("phase requested");
        let mask: Vec<f64> = if mask_phase {
            tape.value(hat.magnitude)
                .iter()
                .zip(&reference.magnitude)
                .map(|(a, b)| if *a < PHASE_MASK_THRESHOLD && *b < PHASE_MASK_THRESHOLD { 0.0 } else { 1.0 })
                .collect()
        } else {
            vec![1.0; reference.phase.len()]
        };
        let count = mask.iter().sum::<f64>();
        if count == 0.0 {
            return tape.leaf(vec![0.0], 1, 1);
        }
        let neg: Vec<f64> = reference.phase.iter().map(|v| -v).collect();
        let raw = tape.add_const(phase, &neg);
        let wrapped = tape.wrap_pi(raw);
        let sq = tape.square(wrapped);
        let masked = tape.mul_const(sq, Arc::new(mask));
        let s = tape.sum(masked);
        tape.scale(s, 1.0 / count)
    }
}

impl MultiResLoss {
    pub fn new(cfg: MultiResConfig, features: &FeatureConfig) -> Result<Self> {
        cfg.check()?;
        let resolutions = cfg
            .resolutions
            .iter()
            .map(|r| {
                let fb = MelFilterbank::new(features.sample_rate, r.fft_size, features.n_mels, features.f_min, features.f_max)?;
                Ok(Resolution {
                    plan: DftPlan::new(*r)?,
                    fb_t: fb.transposed(),
                    fb,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, resolutions })
    }

    pub fn config(&self) -> &MultiResConfig {
        &self.cfg
    }

    pub fn filterbank(&self, resolution: usize) -> &MelFilterbank {
        &self.resolutions[resolution].fb
    }

    /// Spectra of the ground-truth side, treated as constants.
    pub fn reference(&self, x: &[f64]) -> Result<Reference> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.to_vec(), 1, x.len());
        let per_resolution = self
            .resolutions
            .iter()
            .map(|r| {
                let f = r.features(&mut tape, v, self.cfg.include_pha)?;
                Ok(ReferenceSpectra {
                    log_mel: tape.value(f.log_mel).to_vec(),
                    phase: f.phase.map(|p| tape.value(p).to_vec()).unwrap_or_default(),
                    magnitude: tape.value(f.magnitude).to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Reference {
            len: x.len(),
            per_resolution,
        })
    }

    /// Records the loss between a `[1, len]` node and a reference.
    pub fn record(&self, tape: &mut Tape, x_hat: Var, reference: &Reference) -> Result<InferLossNodes> {
        let (rows, len) = tape.shape(x_hat);
        if rows != 1 || len != reference.len {
            return Err(Error::Contract(format!(
                "generated waveform is {rows}x{len}, reference has {} samples",
                reference.len
            )));
        }
        if len < self.cfg.max_window() {
            return Err(Error::Contract(format!(
                "signal of {len} samples is shorter than the largest window {}",
                self.cfg.max_window()
            )));
        }
        let mut terms: Vec<Var> = Vec::new();
        let mut mag = Vec::new();
        let mut pha = Vec::new();
        for (r, refs) in self.resolutions.iter().zip(&reference.per_resolution) {
            let hat = r.features(tape, x_hat, self.cfg.include_pha)?;
            let m = self.cfg.include_mag.then(|| r.mag_loss(tape, &hat, refs));
            let p = self.cfg.include_pha.then(|| r.pha_loss(tape, &hat, refs, self.cfg.mask_phase));
            let term = match (m, p) {
                (Some(a), Some(b)) => tape.add(a, b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("config check guarantees a term"),
            };
            terms.push(term);
            mag.push(m);
            pha.push(p);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        let total = tape.scale(total, 1.0 / terms.len() as f64);
        Ok(InferLossNodes { total, mag, pha })
    }

    pub fn evaluate(&self, x: &[f64], x_hat: &[f64]) -> Result<InferLossValue> {
        if x.len() != x_hat.len() {
            return Err(Error::Contract(format!("signal lengths differ: {} vs {}", x.len(), x_hat.len())));
        }
        let reference = self.reference(x)?;
        let mut tape = Tape::new();
        let v = tape.leaf(x_hat.to_vec(), 1, x_hat.len());
        let nodes = self.record(&mut tape, v, &reference)?;
        let read = |n: &Option<Var>| n.map(|v| tape.scalar(v)).unwrap_or(0.0);
        Ok(InferLossValue {
            total: tape.scalar(nodes.total),
            mag: nodes.mag.iter().map(read).collect(),
            pha: nodes.pha.iter().map(read).collect(),
        })
    }
}

fn single(cfg: &StftConfig, fb: Option<&MelFilterbank>) -> Result<Resolution> {
    let plan = DftPlan::new(*cfg)?;
    let fb = match fb {
        Some(f) => {
            if f.bins() != cfg.bins() {
                return Err(Error::Contract(format!(
                    "filterbank has {} bins, stft produces {}",
                    f.bins(),
                    cfg.bins()
                )));
            }
            f.clone()
        }
        // phase-only use: a placeholder single band
        None => MelFilterbank::new(2, cfg.fft_size, 1, 0.0, 1.0)?,
    };
    Ok(Resolution {
        plan,
        fb_t: fb.transposed(),
        fb,
    })
}

fn single_resolution_value(
    x: &[f64],
    x_hat: &[f64],
    res: &Resolution,
    want_mag: bool,
    mask_phase: bool,
) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Contract(format!("signal lengths differ: {} vs {}", x.len(), x_hat.len())));
    }
    let mut scratch = Tape::new();
    let xv = scratch.leaf(x.to_vec(), 1, x.len());
    let f = res.features(&mut scratch, xv, !want_mag)?;
    let reference = ReferenceSpectra {
        log_mel: scratch.value(f.log_mel).to_vec(),
        phase: f.phase.map(|p| scratch.value(p).to_vec()).unwrap_or_default(),
        magnitude: scratch.value(f.magnitude).to_vec(),
    };
    let mut tape = Tape::new();
    let hv = tape.leaf(x_hat.to_vec(), 1, x_hat.len());
    let hat = res.features(&mut tape, hv, !want_mag)?;
    let out = if want_mag {
        res.mag_loss(&mut tape, &hat, &reference)
    } else {
        res.pha_loss(&mut tape, &hat, &reference, mask_phase)
    };
    Ok(tape.scalar(out))
}

/// L1 distance between `log(mel(|X|) + floor)` spectra, averaged over
/// frames and bands.
pub fn loss_mag(x: &[f64], x_hat: &[f64], cfg: &StftConfig, fb: &MelFilterbank) -> Result<f64> {
    let res = single(cfg, Some(fb))?;
    single_resolution_value(x, x_hat, &res, true, false)
}

/// Mean squared wrapped phase difference over bins that carry energy in at
/// least one of the signals (all bins when `mask_phase` is false).
pub fn loss_pha(x: &[f64], x_hat: &[f64], cfg: &StftConfig, mask_phase: bool) -> Result<f64> {
    let res = single(cfg, None)?;
    single_resolution_value(x, x_hat, &res, false, mask_phase)
}

/// Mean over resolutions of the enabled magnitude and phase terms.
pub fn infer_loss(x: &[f64], x_hat: &[f64], loss: &MultiResLoss) -> Result<InferLossValue> {
    loss.evaluate(x, x_hat)
}

/// Upper bound of the phase term.
pub const PHASE_LOSS_BOUND: f64 = PI * PI;
