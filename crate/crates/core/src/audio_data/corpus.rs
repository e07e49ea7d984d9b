use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio_data::AudioClip;
use crate::error::{Error, Result};

/// Peak absolute amplitude of every synthetic clip.
pub const SYNTH_PEAK: f64 = 0.95;

/// Parameters of the synthetic harmonic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub sample_rate: u32,
    pub samples_per_clip: usize,
    pub seed: u64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Additive noise level relative to the harmonic part, in dB.
    pub noise_db: f64,
}

impl SynthSpec {
    pub fn desk(n_clips: usize, seed: u64) -> Self {
        Self {
            n_clips,
            sample_rate: 8000,
            samples_per_clip: 4000,
            seed,
            f0_min: 80.0,
            f0_max: 400.0,
            noise_db: -30.0,
        }
    }
}

/// A synthetic clip plus the fundamental it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub fundamental_hz: f64,
    pub harmonics: usize,
}

/// Deterministic corpus of harmonic tones: 2 to 5 harmonics above a
/// dominant fundamental, a smooth attack/decay envelope and a little noise,
/// normalised to a peak of exactly [`SYNTH_PEAK`]. Ids are `SYN-00000`,
/// `SYN-00001`, ...
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    let nyquist = spec.sample_rate as f64 / 2.0;
    if spec.samples_per_clip < 2 || !(0.0 < spec.f0_min && spec.f0_min <= spec.f0_max) {
        return Err(Error::Config("synthetic corpus needs >= 2 samples and 0 < f0_min <= f0_max".into()));
    }
    if 5.0 * spec.f0_max >= nyquist {
        return Err(Error::Config(format!(
            "fifth harmonic of {} Hz exceeds Nyquist {nyquist}",
            spec.f0_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sr = spec.sample_rate as f64;
    let len = spec.samples_per_clip;
    let mut out = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let f0 = rng.random_range(spec.f0_min..=spec.f0_max);
        let harmonics = rng.random_range(2..=5usize);
        // harmonic k has amplitude r_k / k with r_k in [0.3, 0.9], so the
        // fundamental always dominates
        let amps: Vec<f64> = (1..=harmonics)
            .map(|k| if k == 1 { 1.0 } else { rng.random_range(0.3..0.9) / k as f64 })
            .collect();
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let attack = rng.random_range(0.02..0.1) * len as f64;
        let decay = rng.random_range(0.5..3.0) / len as f64;
        let mut x: Vec<f64> = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let env = (n as f64 / attack).min(1.0) * (-decay * n as f64).exp();
                env * amps
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(k, (a, p))| a * (2.0 * PI * f0 * (k + 1) as f64 * t + p).sin())
                    .sum::<f64>()
            })
            .collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let noise_std = rms * 10f64.powf(spec.noise_db / 20.0);
        for v in &mut x {
            *v += noise_std * normal.sample(&mut rng);
        }
        let (argmax, peak) = x
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |a, (j, v)| if v.abs() > a.1 { (j, v.abs()) } else { a });
        let gain = SYNTH_PEAK / peak;
        for v in &mut x {
            *v *= gain;
        }
        // scaling can land one ulp away; pin the peak
        x[argmax] = SYNTH_PEAK.copysign(x[argmax]);
        out.push(SynthClip {
            clip: AudioClip {
                id: format!("SYN-{i:05}"),
                sample_rate: spec.sample_rate,
                samples: x,
            },
            fundamental_hz: f0,
            harmonics,
        });
    }
    Ok(out)
}
