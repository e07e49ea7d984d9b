//! The noise-prediction network: a mel-upsampling decoder modulated by a
//! downsampling encoder of the noisy waveform, conditioned on the
//! continuous noise level `sqrt(alpha_bar)`.
//!
//! Layout for upsample factors `f_0..f_{S-1}` and widths `w_0..w_{S-1}`:
//!
//! ```text
//! mel [n_mels, F] --conv1--> [w_0, F] + affine(embed(level))
//!   stage i: upsample(f_i) -> conv3 -> FiLM(encoder_i) -> SiLU
//!   out: conv3 -> [1, F * prod(f)]
//! noisy [1, L] --conv3--> enc_{S-1} [w_{S-1}, L]
//!   enc_i = SiLU(conv1(avg_pool(enc_{i+1}, f_{i+1})))
//! ```
//!
//! FiLM applies `h * (1 + scale) + shift` with `(scale, shift)` from a 1x1
//! convolution of the encoder feature at the same rate.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio_data::MelConditioner;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_VERSION};

const KERNEL: usize = 3;
/// Scale applied to positions before the sinusoidal level embedding.
pub const LEVEL_SCALE: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub n_mels: usize,
    pub upsample_factors: Vec<usize>,
    pub channel_widths: Vec<usize>,
    pub level_embedding_dim: usize,
}

impl NetworkConfig {
    /// Two stages (x4, x2) of width 8 for hop-8 features with 16 bands.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            n_mels: 16,
            upsample_factors: vec![4, 2],
            channel_widths: vec![8, 8],
            level_embedding_dim: 32,
        }
    }

    /// Five stages matching hop 256 and 80 mel bands.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            n_mels: 80,
            upsample_factors: vec![4, 4, 4, 2, 2],
            channel_widths: vec![512, 512, 256, 128, 128],
            level_embedding_dim: 128,
        }
    }

    pub fn hop_length(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn check(&self) -> Result<()> {
        if self.upsample_factors.is_empty() || self.upsample_factors.len() != self.channel_widths.len() {
            return Err(Error::Config(
                "upsample_factors and channel_widths must be nonempty and of equal length".into(),
            ));
        }
        if self.upsample_factors.contains(&0) || self.channel_widths.contains(&0) {
            return Err(Error::Config("factors and widths must be positive".into()));
        }
        if self.n_mels == 0 || self.level_embedding_dim == 0 || !self.level_embedding_dim.is_multiple_of(2) {
            return Err(Error::Config("n_mels must be positive and level_embedding_dim positive and even".into()));
        }
        if self.preset == Preset::Full
            && (self.upsample_factors != [4, 4, 4, 2, 2] || self.channel_widths != [512, 512, 256, 128, 128])
        {
            return Err(Error::Config(
                "full preset requires factors [4,4,4,2,2] and widths [512,512,256,128,128]".into(),
            ));
        }
        Ok(())
    }

    /// Checks the pairing with a feature configuration.
    pub fn check_features(&self, features: &crate::audio_data::FeatureConfig) -> Result<()> {
        if self.hop_length() != features.hop_length || self.n_mels != features.n_mels {
            return Err(Error::Config(format!(
                "network expects hop {} and {} mel bands, features have hop {} and {} bands",
                self.hop_length(),
                self.n_mels,
                features.hop_length,
                features.n_mels
            )));
        }
        Ok(())
    }

    /// Named parameter tensors in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let w = &self.channel_widths;
        let s = w.len();
        let mut specs = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, fan_in: usize, gain: f64| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                rows,
                cols,
                init_std: gain / (fan_in as f64).sqrt(),
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                rows,
                cols: 1,
                init_std: 0.0,
            });
        };
        push("mel_in".into(), w[0], self.n_mels, self.n_mels, 1.0);
        push("level".into(), w[0], self.level_embedding_dim, self.level_embedding_dim, 1.0);
        for i in 0..s {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            push(format!("up{i}"), w[i], cin * KERNEL, cin * KERNEL, 1.0);
            push(format!("film{i}"), 2 * w[i], w[i], w[i], 0.5);
        }
        push("out".into(), 1, w[s - 1] * KERNEL, w[s - 1] * KERNEL, 0.1);
        push("enc_in".into(), w[s - 1], KERNEL, KERNEL, 1.0);
        for i in (0..s - 1).rev() {
            push(format!("enc{i}"), w[i], w[i + 1], w[i + 1], 1.0);
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.rows * p.cols).sum()
    }

    pub fn digest(&self) -> String {
        crate::audio_data::digest_json(self)
    }
}

/// Shape and initial scale of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init_std: f64,
}

/// Sinusoidal embedding of `LEVEL_SCALE * sqrt_alpha_bar`: the first half
/// holds sines, the second cosines, at frequencies `1e-4^(k / half)`.
pub fn embed_level(sqrt_alpha_bar: f64, dim: usize) -> Result<Vec<f64>> {
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
        return Err(Error::Contract(format!("noise level {sqrt_alpha_bar} outside (0, 1]")));
    }
    let half = dim / 2;
    let pos = LEVEL_SCALE * sqrt_alpha_bar;
    let freqs = (0..half).map(|k| 1e-4f64.powf(k as f64 / half as f64));
    let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((pos * f).sin(), (pos * f).cos())).unzip();
    Ok(sin.into_iter().chain(cos).collect())
}

/// Parameter vars registered on a tape, in [`NetworkConfig::param_specs`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// The noise-prediction network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    config: NetworkConfig,
    params: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl NoisePredictor {
    /// Variance-scaled normal initialisation, deterministic in `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .iter()
            .map(|p| {
                if p.init_std == 0.0 {
                    vec![0.0; p.rows * p.cols]
                } else {
                    let n = Normal::new(0.0, p.init_std).expect("positive std");
                    (0..p.rows * p.cols).map(|_| n.sample(&mut rng)).collect()
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            step_count: 0,
        })
    }

    /// Builds a predictor from explicit tensors (checked against the config).
    pub fn from_params(config: NetworkConfig, params: Vec<Vec<f64>>, step_count: u64) -> Result<Self> {
        config.check()?;
        let specs = config.param_specs();
        if specs.len() != params.len() || specs.iter().zip(&params).any(|(s, p)| s.rows * s.cols != p.len()) {
            return Err(Error::Contract("parameter tensors do not match the network config".into()));
        }
        if params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical(None, "non-finite parameter"));
        }
        Ok(Self {
            config,
            params,
            step_count,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Flat parameter `i` across all tensors in storage order.
    pub fn get(&self, i: usize) -> f64 {
        let (t, k) = self.locate(i);
        self.params[t][k]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let (t, k) = self.locate(i);
        self.params[t][k] = value;
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (t, p) in self.params.iter().enumerate() {
            if i < p.len() {
                return (t, i);
            }
            i -= p.len();
        }
        panic!("parameter index out of range");
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let specs = self.config.param_specs();
        ParamVars(
            specs
                .iter()
                .zip(&self.params)
                .map(|(s, p)| tape.leaf(p.clone(), s.rows, s.cols))
                .collect(),
        )
    }

    /// Records `eps_hat` for a `[1, L]` noisy waveform node.
    pub fn record(&self, tape: &mut Tape, vars: &ParamVars, x_t: Var, mel: &MelConditioner, sqrt_alpha_bar: f64) -> Result<Var> {
        let cfg = &self.config;
        let (rows, len) = tape.shape(x_t);
        if rows != 1 || mel.n_mels != cfg.n_mels || len != mel.n_frames * cfg.hop_length() {
            return Err(Error::Contract(format!(
                "waveform of {rows}x{len} does not match {} frames of {} bands at hop {}",
                mel.n_frames,
                mel.n_mels,
                cfg.hop_length()
            )));
        }
        let emb = embed_level(sqrt_alpha_bar, cfg.level_embedding_dim)?;
        let mut p = vars.0.iter().copied();
        let mut layer = || (p.next().expect("weight"), p.next().expect("bias"));
        let s = cfg.channel_widths.len();

        let (mw, mb) = layer();
        let (lw, lb) = layer();
        let mut stages = Vec::with_capacity(s);
        for _ in 0..s {
            stages.push((layer(), layer()));
        }
        let (ow, ob) = layer();
        let (ew, eb) = layer();
        let enc_layers: Vec<(Var, Var)> = (0..s - 1).map(|_| layer()).collect();

        // encoder, from full rate down to frame rate
        let mut enc = vec![None; s];
        let e = tape.conv1d(x_t, ew, eb, KERNEL);
        enc[s - 1] = Some(tape.silu(e));
        for (j, i) in (0..s - 1).rev().enumerate() {
            let (w, b) = enc_layers[j];
            let pooled = tape.avg_pool(enc[i + 1].expect("computed"), cfg.upsample_factors[i + 1]);
            let c = tape.conv1d(pooled, w, b, 1);
            enc[i] = Some(tape.silu(c));
        }

        let m = tape.leaf(mel.channels_first(), mel.n_mels, mel.n_frames);
        let mut h = tape.conv1d(m, mw, mb, 1);
        let e = tape.leaf(emb, cfg.level_embedding_dim, 1);
        let level = tape.conv1d(e, lw, lb, 1);
        let level = tape.broadcast_cols(level, mel.n_frames);
        h = tape.add(h, level);

        for (i, ((uw, ub), (fw, fb))) in stages.into_iter().enumerate() {
            let width = cfg.channel_widths[i];
            let up = tape.upsample(h, cfg.upsample_factors[i]);
            let c = tape.conv1d(up, uw, ub, KERNEL);
            let film = tape.conv1d(enc[i].expect("computed"), fw, fb, 1);
            let scale = tape.rows(film, 0, width);
            let shift = tape.rows(film, width, width);
            let modulated = tape.mul(c, scale);
            let h1 = tape.add(c, modulated);
            let h2 = tape.add(h1, shift);
            h = tape.silu(h2);
        }
        Ok(tape.conv1d(h, ow, ob, KERNEL))
    }

    /// Predicts the noise in `x_t` (no gradient bookkeeping retained).
    pub fn predict_noise(&self, x_t: &[f64], mel: &MelConditioner, sqrt_alpha_bar: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.leaf(x_t.to_vec(), 1, x_t.len());
        let out = self.record(&mut tape, &vars, x, mel, sqrt_alpha_bar)?;
        Ok(tape.value(out).to_vec())
    }

    /// SHA-256 over config digest, step count and parameter bits.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.config.digest().as_bytes());
        h.update(self.step_count.to_le_bytes());
        for v in self.params.iter().flatten() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(frames: usize, n_mels: usize, seed: u64) -> MelConditioner {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(-3.0, 1.0).unwrap();
        MelConditioner {
            frames: (0..frames * n_mels).map(|_| n.sample(&mut r)).collect(),
            n_frames: frames,
            n_mels,
            config_digest: String::new(),
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut r)).collect()
    }

    #[test]
    fn desk_parameter_count_matches_closed_form() {
        // per 1-D conv: cout * cin * k + cout
        let (m, e, w) = (16usize, 32usize, 8usize);
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k + cout;
        let expected = conv(w, m, 1)
            + conv(w, e, 1)
            + 2 * conv(w, w, 3)
            + 2 * conv(2 * w, w, 1)
            + conv(1, w, 3)
            + conv(w, 1, 3)
            + conv(w, w, 1);
        assert_eq!(expected, 1217);
        assert_eq!(NetworkConfig::desk().param_count(), expected);
        let p = NoisePredictor::init(NetworkConfig::desk(), 0).unwrap();
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = NoisePredictor::init(NetworkConfig::desk(), 7).unwrap();
        let b = NoisePredictor::init(NetworkConfig::desk(), 7).unwrap();
        let c = NoisePredictor::init(NetworkConfig::desk(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensors().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn full_preset_is_pinned() {
        let p = NetworkConfig::full();
        p.check().unwrap();
        assert_eq!(p.hop_length(), 256);
        let mut bad = p.clone();
        bad.channel_widths[0] = 256;
        assert!(bad.check().is_err());
    }

    #[test]
    fn embedding_is_deterministic_injective_and_smooth() {
        let a = embed_level(0.3, 32).unwrap();
        assert_eq!(a, embed_level(0.3, 32).unwrap());
        assert_ne!(a, embed_level(0.7, 32).unwrap());
        assert!(embed_level(0.0, 32).is_err());
        assert!(embed_level(1.2, 32).is_err());
        // neighbours 1e-4 apart stay distinct
        for i in 0..100 {
            let x = 0.01 + i as f64 * 0.0099;
            let d: f64 = embed_level(x, 32)
                .unwrap()
                .iter()
                .zip(embed_level(x + 1e-4, 32).unwrap())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(d > 1e-3);
        }
        // each coordinate has derivative bounded by LEVEL_SCALE
        let h = 1e-7;
        for i in 0..200 {
            let x = 0.01 + i as f64 * 0.99 / 200.0;
            let (p, m) = (embed_level(x + h, 32).unwrap(), embed_level(x - h, 32).unwrap());
            for (a, b) in p.iter().zip(&m) {
                let d = (a - b) / (2.0 * h);
                assert!(d.is_finite() && d.abs() <= LEVEL_SCALE * 1.0001);
            }
        }
    }

    #[test]
    fn output_has_input_shape_and_is_pure() {
        let p = NoisePredictor::init(NetworkConfig::desk(), 1).unwrap();
        let m = mel(32, 16, 2);
        let x = noise(256, 3);
        let a = p.predict_noise(&x, &m, 0.5).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, p.predict_noise(&x, &m, 0.5).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(p.predict_noise(&x[..200], &m, 0.5).is_err());
    }

    #[test]
    fn full_scale_shapes() {
        // only shape checks at this size; 28 frames at hop 256
        let cfg = NetworkConfig {
            channel_widths: vec![4, 4, 4, 4, 4],
            preset: Preset::Custom,
            ..NetworkConfig::full()
        };
        let p = NoisePredictor::init(cfg, 0).unwrap();
        let out = p.predict_noise(&noise(7168, 1), &mel(28, 80, 1), 0.3).unwrap();
        assert_eq!(out.len(), 7168);
    }

    #[test]
    fn shifting_by_one_hop_shifts_the_output() {
        let p = NoisePredictor::init(NetworkConfig::desk(), 4).unwrap();
        let big = mel(33, 16, 5);
        let x = noise(33 * 8, 6);
        let m0 = big.slice(0, 32).unwrap();
        let m1 = big.slice(1, 32).unwrap();
        let a = p.predict_noise(&x[..256], &m0, 0.4).unwrap();
        let b = p.predict_noise(&x[8..264], &m1, 0.4).unwrap();
        // receptive field stays within a few frames of each sample
        for t in 40..216 {
            assert!((a[t + 8] - b[t]).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn gradient_of_mean_square_matches_finite_differences() {
        let p = NoisePredictor::init(NetworkConfig::desk(), 9).unwrap();
        let m = mel(32, 16, 10);
        let x = noise(256, 11);
        let objective = |q: &NoisePredictor| {
            let out = q.predict_noise(&x, &m, 0.6).unwrap();
            out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64
        };
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.leaf(x.clone(), 1, 256);
        let out = p.record(&mut tape, &vars, xv, &m, 0.6).unwrap();
        let sq = tape.square(out);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        let flat: Vec<f64> = vars.0.iter().flat_map(|v| grads.get(*v).unwrap().to_vec()).collect();
        let n = p.param_count();
        for k in 0..10 {
            let i = (k * 7919 + 13) % n;
            let h = 1e-5;
            let mut plus = p.clone();
            plus.set(i, p.get(i) + h);
            let mut minus = p.clone();
            minus.set(i, p.get(i) - h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - flat[i]).abs() / fd.abs().max(flat[i].abs()).max(1e-8);
            assert!(err < 1e-4, "param {i}: fd {fd} ad {}", flat[i]);
        }
    }
}
