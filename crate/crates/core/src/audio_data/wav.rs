use std::path::Path;

use crate::audio_data::AudioClip;
use crate::error::{Error, Result};

const SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono WAV file; samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let malformed = |e: hound::Error| match e {
        // hound reports short reads as plain io errors
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        other => Error::MalformedAudio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let reader = hound::WavReader::open(path).map_err(malformed)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {:?} {}-bit samples, only 16-bit PCM is supported",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(malformed)?;
    if samples.len() != declared {
        return Err(Error::MalformedAudio {
            path: path.to_path_buf(),
            message: format!("expected {declared} samples, read {}", samples.len()),
        });
    }
    if samples.is_empty() {
        return Err(Error::MalformedAudio {
            path: path.to_path_buf(),
            message: "no samples".into(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        id,
        sample_rate: spec.sample_rate,
        samples,
    })
}

/// Writes 16-bit PCM mono; values outside [-1, 1) saturate.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(to_io)?;
    for &s in samples {
        let v = (s * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}
