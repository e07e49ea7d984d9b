//! Audio ingestion, mel conditioning features, segment sampling, dataset
//! splits and the synthetic harmonic corpus used for desk experiments.

mod corpus;
mod wav;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{stft, MelFilterbank, StftConfig, LOG_FLOOR};

pub use corpus::{synth_corpus, SynthClip, SynthSpec};
pub use wav::{load_wav, write_wav};

/// Feature extraction and segmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub segment_length: usize,
}

impl FeatureConfig {
    /// 22.05 kHz, 80 bands from 80 Hz to 8 kHz, 1024-point FFT, hop 256,
    /// 7168-sample segments.
    pub fn standard() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            hop_length: 256,
            n_mels: 80,
            f_min: 80.0,
            f_max: 8000.0,
            segment_length: 7168,
        }
    }

    /// 8 kHz, 16 bands, 128-point FFT, hop 8, 256-sample segments.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            n_fft: 128,
            hop_length: 8,
            n_mels: 16,
            f_min: 80.0,
            f_max: 4000.0,
            segment_length: 256,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.hop_length == 0 || self.segment_length == 0 || !self.segment_length.is_multiple_of(self.hop_length) {
            return Err(Error::Config(format!(
                "segment length {} must be a positive multiple of hop {}",
                self.segment_length, self.hop_length
            )));
        }
        StftConfig {
            fft_size: self.n_fft,
            window_length: self.n_fft,
            hop: self.hop_length,
        }
        .check()?;
        MelFilterbank::new(self.sample_rate, self.n_fft, self.n_mels, self.f_min, self.f_max).map(|_| ())
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            fft_size: self.n_fft,
            window_length: self.n_fft,
            hop: self.hop_length,
        }
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.sample_rate, self.n_fft, self.n_mels, self.f_min, self.f_max)
    }

    /// Mel frames conditioning one segment.
    pub fn segment_frames(&self) -> usize {
        self.segment_length / self.hop_length
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// A mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel conditioning frames, `n_frames x n_mels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConditioner {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    /// Digest of the [`FeatureConfig`] that produced the frames.
    pub config_digest: String,
}

impl MelConditioner {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.n_mels..(i + 1) * self.n_mels]
    }

    /// Frames `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> Result<MelConditioner> {
        if start + count > self.n_frames {
            return Err(Error::Contract(format!(
                "frames {start}..{} out of range for {} frames",
                start + count,
                self.n_frames
            )));
        }
        Ok(MelConditioner {
            frames: self.frames[start * self.n_mels..(start + count) * self.n_mels].to_vec(),
            n_frames: count,
            n_mels: self.n_mels,
            config_digest: self.config_digest.clone(),
        })
    }

    /// `n_mels x n_frames` layout used as network input.
    pub fn channels_first(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.frames.len()];
        for f in 0..self.n_frames {
            for m in 0..self.n_mels {
                out[m * self.n_frames + f] = self.frames[f * self.n_mels + m];
            }
        }
        out
    }
}

/// `log(mel(|STFT|) + 1e-5)` of a raw signal with centred framing.
pub fn log_mel(signal: &[f64], cfg: &FeatureConfig) -> Result<MelConditioner> {
    let fb = cfg.filterbank()?;
    let spec = stft(signal, &cfg.stft_config())?;
    let mel = fb.project(&spec.magnitude(), spec.frames);
    Ok(MelConditioner {
        frames: mel.into_iter().map(|m| (m + LOG_FLOOR).ln()).collect(),
        n_frames: spec.frames,
        n_mels: cfg.n_mels,
        config_digest: cfg.digest(),
    })
}

/// Conditioning features of a whole clip (`len / hop + 1` frames).
pub fn mel_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelConditioner> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Contract(format!(
            "clip {} is {} Hz, features expect {} Hz",
            clip.id, clip.sample_rate, cfg.sample_rate
        )));
    }
    log_mel(&clip.samples, cfg)
}

/// A training example: waveform segment plus its aligned conditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub clip_id: String,
    /// Sample offset into the (zero-padded) clip; a multiple of the hop.
    pub start: usize,
    pub audio: Vec<f64>,
    pub mel: MelConditioner,
}

fn padded(samples: &[f64], min_len: usize) -> Vec<f64> {
    let mut v = samples.to_vec();
    if v.len() < min_len {
        v.resize(min_len, 0.0);
    }
    v
}

/// Cuts the segment starting at frame `frame` from a clip and its features.
fn cut(clip_id: &str, samples: &[f64], mel: &MelConditioner, frame: usize, cfg: &FeatureConfig) -> Result<Segment> {
    let start = frame * cfg.hop_length;
    Ok(Segment {
        clip_id: clip_id.to_string(),
        start,
        audio: samples[start..start + cfg.segment_length].to_vec(),
        mel: mel.slice(frame, cfg.segment_frames())?,
    })
}

/// Draws a hop-aligned segment; clips shorter than a segment are
/// zero-padded on the right.
pub fn sample_segment<R: Rng + ?Sized>(clip: &AudioClip, cfg: &FeatureConfig, rng: &mut R) -> Result<Segment> {
    let samples = padded(&clip.samples, cfg.segment_length);
    let mel = mel_features(
        &AudioClip {
            id: clip.id.clone(),
            sample_rate: clip.sample_rate,
            samples: samples.clone(),
        },
        cfg,
    )?;
    let max_frame = (samples.len() - cfg.segment_length) / cfg.hop_length;
    let frame = rng.random_range(0..=max_frame);
    cut(&clip.id, &samples, &mel, frame, cfg)
}

/// Disjoint train / schedule-search / test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub search_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Search,
    Test,
}

impl DatasetSplit {
    /// Assigns ids by prefix; everything else is training data.
    pub fn by_prefix<S: AsRef<str>>(ids: &[S], test_prefix: &str, search_prefix: &str) -> Result<Self> {
        let mut split = DatasetSplit {
            train_ids: vec![],
            search_ids: vec![],
            test_ids: vec![],
        };
        for id in ids {
            let id = id.as_ref().to_string();
            if id.starts_with(test_prefix) {
                split.test_ids.push(id);
            } else if id.starts_with(search_prefix) {
                split.search_ids.push(id);
            } else {
                split.train_ids.push(id);
            }
        }
        split.check()?;
        Ok(split)
    }

    /// Sorted ids: the first `test` go to test, the next `search` to
    /// schedule search, the rest to training.
    pub fn from_counts<S: AsRef<str>>(ids: &[S], search: usize, test: usize) -> Result<Self> {
        let mut sorted: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
        sorted.sort();
        if search + test > sorted.len() {
            return Err(Error::Config(format!(
                "cannot hold out {} clips from a corpus of {}",
                search + test,
                sorted.len()
            )));
        }
        let train_ids = sorted.split_off(search + test);
        let search_ids = sorted.split_off(test);
        let split = DatasetSplit {
            train_ids,
            search_ids,
            test_ids: sorted,
        };
        split.check()?;
        Ok(split)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train_ids.iter().chain(&self.search_ids).chain(&self.test_ids) {
            if !seen.insert(id) {
                return Err(Error::Config(format!("id {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn membership(&self, id: &str) -> Option<SplitName> {
        let has = |v: &Vec<String>| v.iter().any(|x| x == id);
        if has(&self.train_ids) {
            Some(SplitName::Train)
        } else if has(&self.search_ids) {
            Some(SplitName::Search)
        } else if has(&self.test_ids) {
            Some(SplitName::Test)
        } else {
            None
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub duration_seconds: f64,
    pub split: SplitName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fundamental_hz: Option<f64>,
}

/// Corpus manifest: ids, paths (relative to the manifest), durations and
/// split membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub clips: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn split(&self) -> DatasetSplit {
        let pick = |s: SplitName| {
            self.clips
                .iter()
                .filter(|c| c.split == s)
                .map(|c| c.id.clone())
                .collect()
        };
        DatasetSplit {
            train_ids: pick(SplitName::Train),
            search_ids: pick(SplitName::Search),
            test_ids: pick(SplitName::Test),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    clip: AudioClip,
    mel: MelConditioner,
}

/// Clips with cached features and a split; immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    cfg: FeatureConfig,
    entries: Vec<Entry>,
    split: DatasetSplit,
    digest: String,
}

impl Dataset {
    pub fn new(clips: Vec<AudioClip>, split: DatasetSplit, cfg: FeatureConfig) -> Result<Self> {
        cfg.check()?;
        split.check()?;
        let mut hasher = Sha256::new();
        hasher.update(cfg.digest().as_bytes());
        let mut entries = Vec::with_capacity(clips.len());
        for mut clip in clips {
            if split.membership(&clip.id).is_none() {
                return Err(Error::Config(format!("clip {} is not assigned to a split", clip.id)));
            }
            clip.samples = padded(&clip.samples, cfg.segment_length.max(cfg.n_fft));
            hasher.update((clip.id.len() as u64).to_le_bytes());
            hasher.update(clip.id.as_bytes());
            for s in &clip.samples {
                hasher.update(s.to_le_bytes());
            }
            let mel = mel_features(&clip, &cfg)?;
            entries.push(Entry { clip, mel });
        }
        Ok(Self {
            cfg,
            entries,
            split,
            digest: hex::encode(hasher.finalize()),
        })
    }

    /// Loads every clip listed in a manifest (paths relative to it).
    pub fn from_manifest(path: impl AsRef<Path>, cfg: FeatureConfig) -> Result<Self> {
        let path = path.as_ref();
        let manifest = CorpusManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let clips = manifest
            .clips
            .iter()
            .map(|e| {
                let mut c = load_wav(root.join(&e.path))?;
                c.id = e.id.clone();
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, manifest.split(), cfg)
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    /// Content digest over the feature config, ids and samples.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn clip(&self, id: &str) -> Option<&AudioClip> {
        self.entries.iter().find(|e| e.clip.id == id).map(|e| &e.clip)
    }

    pub fn features(&self, id: &str) -> Option<&MelConditioner> {
        self.entries.iter().find(|e| e.clip.id == id).map(|e| &e.mel)
    }

    fn entry(&self, id: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.clip.id == id)
            .ok_or_else(|| Error::Config(format!("unknown clip id {id}")))
    }

    /// Random hop-aligned segment of the given clip.
    pub fn sample_segment<R: Rng + ?Sized>(&self, id: &str, rng: &mut R) -> Result<Segment> {
        let e = self.entry(id)?;
        let max_frame = (e.clip.samples.len() - self.cfg.segment_length) / self.cfg.hop_length;
        let frame = rng.random_range(0..=max_frame);
        cut(id, &e.clip.samples, &e.mel, frame, &self.cfg)
    }

    /// Deterministic segment at frame offset `frame`.
    pub fn segment_at(&self, id: &str, frame: usize) -> Result<Segment> {
        let e = self.entry(id)?;
        cut(id, &e.clip.samples, &e.mel, frame, &self.cfg)
    }

    /// The segment in the middle of a clip; the fixed evaluation excerpt.
    pub fn centre_segment(&self, id: &str) -> Result<Segment> {
        let e = self.entry(id)?;
        let max_frame = (e.clip.samples.len() - self.cfg.segment_length) / self.cfg.hop_length;
        cut(id, &e.clip.samples, &e.mel, max_frame / 2, &self.cfg)
    }

    /// `batch_size` segments from clips drawn uniformly from `ids`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, ids: &[String], batch_size: usize, rng: &mut R) -> Result<Vec<Segment>> {
        if ids.is_empty() {
            return Err(Error::Config("cannot sample a batch from an empty split".into()));
        }
        (0..batch_size)
            .map(|_| {
                let id = &ids[rng.random_range(0..ids.len())];
                self.sample_segment(id, rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn clip(samples: Vec<f64>, sr: u32) -> AudioClip {
        AudioClip {
            id: "c".into(),
            sample_rate: sr,
            samples,
        }
    }

    #[test]
    fn silence_sits_at_the_log_floor() {
        let cfg = FeatureConfig::desk();
        let m = mel_features(&clip(vec![0.0; 512], 8000), &cfg).unwrap();
        assert!(m.frames.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_count_for_a_standard_segment() {
        let cfg = FeatureConfig::standard();
        let m = mel_features(&clip(vec![0.0; 7168], 22050), &cfg).unwrap();
        // centred framing adds one frame beyond len / hop
        assert_eq!(m.n_frames, 29);
        assert_eq!(cfg.segment_frames(), 28);
    }

    #[test]
    fn sine_peaks_in_the_band_containing_its_frequency() {
        let cfg = FeatureConfig::standard();
        let s: Vec<f64> = (0..8192).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / 22050.0).sin()).collect();
        let m = mel_features(&clip(s, 22050), &cfg).unwrap();
        let fb = cfg.filterbank().unwrap();
        // oracle: band whose triangle has the largest weight at 440 Hz
        let bin_hz = 22050.0 / 1024.0;
        let expected = (0..cfg.n_mels)
            .map(|b| {
                let c = fb.center_hz(b);
                (b, (c - 440.0).abs())
            })
            .fold((0, f64::INFINITY), |a, x| if x.1 < a.1 { x } else { a })
            .0;
        let f = m.n_frames / 2;
        let row = m.frame(f);
        let argmax = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
        assert!((argmax as i64 - expected as i64).abs() <= 1, "argmax {argmax}, expected {expected}");
        assert!((fb.center_hz(argmax) - 440.0).abs() < 2.0 * bin_hz + 30.0);
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        assert!(mel_features(&clip(vec![0.0; 512], 16000), &FeatureConfig::desk()).is_err());
    }

    #[test]
    fn filterbank_projection_reproduces_features() {
        let cfg = FeatureConfig::desk();
        let s: Vec<f64> = (0..600).map(|i| ((i as f64) * 0.37).sin() * 0.4).collect();
        let m = mel_features(&clip(s.clone(), 8000), &cfg).unwrap();
        let spec = stft(&s, &cfg.stft_config()).unwrap();
        let mel = cfg.filterbank().unwrap().project(&spec.magnitude(), spec.frames);
        for (a, b) in mel.iter().zip(&m.frames) {
            let want = (a + LOG_FLOOR).ln();
            assert!((want - b).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn segments_are_hop_aligned_and_match_regenerated_features() {
        let cfg = FeatureConfig::desk();
        let s: Vec<f64> = (0..2000).map(|i| ((i as f64) * 0.11).sin() * 0.5 + ((i * i) as f64 * 1e-4).cos() * 0.1).collect();
        let c = clip(s, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let seg = sample_segment(&c, &cfg, &mut rng).unwrap();
            assert_eq!(seg.start % cfg.hop_length, 0);
            assert_eq!(seg.audio.len(), cfg.segment_length);
            assert_eq!(seg.mel.n_frames, cfg.segment_frames());
            let regen = log_mel(&seg.audio, &cfg).unwrap();
            // frames whose window lies inside the segment
            let margin = cfg.n_fft / 2 / cfg.hop_length;
            for f in margin..cfg.segment_frames() - margin {
                assert_eq!(regen.frame(f), seg.mel.frame(f), "frame {f}");
            }
        }
    }

    #[test]
    fn short_clip_is_zero_padded_and_seeded_draws_repeat() {
        let cfg = FeatureConfig::desk();
        let c = clip(vec![0.3; 100], 8000);
        let seg = sample_segment(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(seg.start, 0);
        assert!(seg.audio[100..].iter().all(|&v| v == 0.0));
        let long = clip((0..3000).map(|i| (i as f64).sin()).collect(), 8000);
        let a = sample_segment(&long, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_segment(&long, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint() {
        let ids: Vec<String> = (0..10).map(|i| format!("SYN-{i:05}")).collect();
        let s = DatasetSplit::from_counts(&ids, 2, 3).unwrap();
        assert_eq!(s.test_ids, vec!["SYN-00000", "SYN-00001", "SYN-00002"]);
        assert_eq!(s.search_ids, vec!["SYN-00003", "SYN-00004"]);
        assert_eq!(s.train_ids.len(), 5);
        assert!(DatasetSplit::from_counts(&ids, 8, 3).is_err());
        let p = DatasetSplit::by_prefix(&["LJ001-1", "LJ002-1", "LJ003-1"], "LJ001", "LJ002").unwrap();
        assert_eq!(p.test_ids, vec!["LJ001-1"]);
        assert_eq!(p.search_ids, vec!["LJ002-1"]);
        let bad = DatasetSplit {
            train_ids: vec!["a".into()],
            search_ids: vec!["a".into()],
            test_ids: vec![],
        };
        assert!(bad.check().is_err());
    }
}
