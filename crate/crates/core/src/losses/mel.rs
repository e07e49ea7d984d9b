use std::sync::Arc;

use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `n_mels x (fft_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    matrix: Vec<f64>,
    bins: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub n_mels: usize,
}

impl MelFilterbank {
    /// Bands are spaced uniformly on the mel scale between `f_min` and
    /// `f_max`. A band narrower than the bin spacing would select no bin at
    /// all; it then takes unit weight on the bin nearest its centre.
    pub fn new(sample_rate: u32, fft_size: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || fft_size < 2 {
            return Err(Error::Config("filterbank needs n_mels > 0 and fft_size >= 2".into()));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "filterbank range [{f_min}, {f_max}] must lie within [0, {nyquist}]"
            )));
        }
        let bins = fft_size / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut matrix = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut matrix[m * bins..(m + 1) * bins];
            for (b, w) in row.iter_mut().enumerate() {
                let f = b as f64 * bin_hz;
                let up = (f - lo) / (center - lo);
                let down = (hi - f) / (hi - center);
                *w = up.min(down).max(0.0);
            }
            if row.iter().all(|&w| w == 0.0) {
                let nearest = ((center / bin_hz).round() as usize).min(bins - 1);
                row[nearest] = 1.0;
            }
        }
        Ok(Self {
            matrix,
            bins,
            sample_rate,
            f_min,
            f_max,
            n_mels,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Row-major `n_mels x bins`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.matrix[m * self.bins..(m + 1) * self.bins]
    }

    /// `bins x n_mels`, for right-multiplying a `frames x bins` magnitude.
    pub fn transposed(&self) -> Arc<Vec<f64>> {
        let mut t = vec![0.0; self.matrix.len()];
        for m in 0..self.n_mels {
            for b in 0..self.bins {
                t[b * self.n_mels + m] = self.matrix[m * self.bins + b];
            }
        }
        Arc::new(t)
    }

    /// Centre frequency of band `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        let (m_lo, m_hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        mel_to_hz(m_lo + (m_hi - m_lo) * (m + 1) as f64 / (self.n_mels + 1) as f64)
    }

    /// Projects a `frames x bins` magnitude into `frames x n_mels`.
    pub fn project(&self, magnitude: &[f64], frames: usize) -> Vec<f64> {
        assert_eq!(magnitude.len(), frames * self.bins, "magnitude shape mismatch");
        let mut out = vec![0.0; frames * self.n_mels];
        for f in 0..frames {
            let mag = &magnitude[f * self.bins..(f + 1) * self.bins];
            for m in 0..self.n_mels {
                out[f * self.n_mels + m] = self.row(m).iter().zip(mag).map(|(w, x)| w * x).sum();
            }
        }
        out
    }
}
