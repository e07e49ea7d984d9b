use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One STFT resolution.
///
/// Frames are `window_length` samples long, centred on multiples of `hop`
/// (reflection padding of `window_length / 2` on both ends), Hann-weighted
/// and zero-padded to `fft_size` before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop: usize,
}

impl StftConfig {
    /// Hop defaults to a quarter of the window.
    pub fn new(fft_size: usize, window_length: usize) -> Self {
        Self {
            fft_size,
            window_length,
            hop: (window_length / 4).max(1),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.window_length == 0 || self.window_length > self.fft_size {
            return Err(Error::Config(format!(
                "window length {} must be in 1..={}",
                self.window_length, self.fft_size
            )));
        }
        if self.hop == 0 {
            return Err(Error::Config("stft hop must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let pad = self.window_length / 2;
        (len + 2 * pad - self.window_length) / self.hop + 1
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / len as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    // a single reflection suffices while pad < len
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Source index for every (frame, tap) pair, row-major `frames x window`.
pub fn frame_indices(len: usize, cfg: &StftConfig) -> Result<Vec<usize>> {
    if len < cfg.window_length {
        return Err(Error::Contract(format!(
            "signal of {len} samples is shorter than the {}-sample window",
            cfg.window_length
        )));
    }
    let pad = (cfg.window_length / 2) as isize;
    let frames = cfg.frames(len);
    let mut idx = Vec::with_capacity(frames * cfg.window_length);
    for f in 0..frames {
        let start = (f * cfg.hop) as isize - pad;
        for k in 0..cfg.window_length as isize {
            idx.push(reflect(start + k, len));
        }
    }
    Ok(idx)
}

/// Complex spectrogram, `frames x bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrogram {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Angle in (-pi, pi].
    pub fn phase(&self) -> Vec<f64> {
        self.im.iter().zip(&self.re).map(|(i, r)| i.atan2(*r)).collect()
    }
}

/// FFT-based short-time Fourier transform.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.check()?;
    let idx = frame_indices(signal.len(), cfg)?;
    let window = hann(cfg.window_length);
    let frames = cfg.frames(signal.len());
    let bins = cfg.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut re = Vec::with_capacity(frames * bins);
    let mut im = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for k in 0..cfg.window_length {
            buf[k] = Complex::new(signal[idx[f * cfg.window_length + k]] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            re.push(c.re);
            im.push(c.im);
        }
    }
    Ok(Spectrogram { frames, bins, re, im })
}

/// Window-folded real DFT matrices for the differentiable path.
#[derive(Debug, Clone)]
pub struct DftPlan {
    pub cfg: StftConfig,
    /// `[window, bins]`: `w[k] cos(2 pi k b / n)`
    cos: Arc<Vec<f64>>,
    /// `[window, bins]`: `-w[k] sin(2 pi k b / n)`
    neg_sin: Arc<Vec<f64>>,
}

impl DftPlan {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.check()?;
        let window = hann(cfg.window_length);
        let bins = cfg.bins();
        let n = cfg.fft_size;
        let mut cos = Vec::with_capacity(cfg.window_length * bins);
        let mut neg_sin = Vec::with_capacity(cfg.window_length * bins);
        for (k, w) in window.iter().enumerate() {
            for b in 0..bins {
                // reduce k*b mod n first so large products keep full precision
                let angle = 2.0 * PI * ((k * b) % n) as f64 / n as f64;
                cos.push(w * angle.cos());
                neg_sin.push(-w * angle.sin());
            }
        }
        Ok(Self {
            cfg,
            cos: Arc::new(cos),
            neg_sin: Arc::new(neg_sin),
        })
    }

    /// Records framing and the DFT of `signal` (a `[1, len]` node), returning
    /// `(re, im)` nodes of shape `frames x bins`.
    pub fn analyze(&self, tape: &mut Tape, signal: Var) -> Result<(Var, Var)> {
        let (_, len) = tape.shape(signal);
        let idx = frame_indices(len, &self.cfg)?;
        let frames = self.cfg.frames(len);
        let framed = tape.gather(signal, Arc::new(idx), frames, self.cfg.window_length);
        let re = tape.matmul_const(framed, self.cos.clone(), self.cfg.bins());
        let im = tape.matmul_const(framed, self.neg_sin.clone(), self.cfg.bins());
        Ok((re, im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn dc_energy_sits_in_bin_zero() {
        let cfg = StftConfig::new(64, 32);
        let s = stft(&vec![1.0; 200], &cfg).unwrap();
        let mag = s.magnitude();
        for f in 0..s.frames {
            let row = &mag[f * s.bins..(f + 1) * s.bins];
            let (argmax, _) = row.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            assert_eq!(argmax, 0);
            // periodic Hann sums to N/2
            assert!((row[0] - 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let s = stft(&[0.0; 128], &StftConfig::new(64, 32)).unwrap();
        assert!(s.magnitude().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::new(64, 40);
        let x = noise(300, 1);
        let s = stft(&x, &cfg).unwrap();
        let idx = frame_indices(x.len(), &cfg).unwrap();
        let w = hann(cfg.window_length);
        for f in 0..s.frames {
            let energy: f64 = (0..cfg.window_length)
                .map(|k| (x[idx[f * cfg.window_length + k]] * w[k]).powi(2))
                .sum();
            let mag = &s.magnitude()[f * s.bins..(f + 1) * s.bins];
            let n = cfg.fft_size;
            let spec: f64 = mag
                .iter()
                .enumerate()
                .map(|(b, m)| if b == 0 || b == n / 2 { m * m } else { 2.0 * m * m })
                .sum::<f64>()
                / n as f64;
            assert!((spec - energy).abs() / energy < 1e-6, "frame {f}");
        }
    }

    #[test]
    fn dft_path_matches_fft_path() {
        let cfg = StftConfig::new(128, 64);
        let x = noise(256, 2);
        let s = stft(&x, &cfg).unwrap();
        let plan = DftPlan::new(cfg).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x, 1, 256);
        let (re, im) = plan.analyze(&mut t, v).unwrap();
        for (a, b) in t.value(re).iter().zip(&s.re) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in t.value(im).iter().zip(&s.im) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn framing_arithmetic() {
        let cfg = StftConfig {
            fft_size: 1024,
            window_length: 1024,
            hop: 256,
        };
        assert_eq!(cfg.frames(7168), 29);
        assert!(frame_indices(100, &cfg).is_err());
        let idx = frame_indices(8, &StftConfig { fft_size: 4, window_length: 4, hop: 2 }).unwrap();
        // reflect: [2 1 | 0 1 2 ...]
        assert_eq!(&idx[..4], &[2, 1, 0, 1]);
        assert_eq!(&idx[idx.len() - 4..], &[6, 7, 6, 5]);
    }
}
