//! Mono RIFF/WAVE reading and writing (PCM 16/24-bit and IEEE float32).

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const MIN_RATE: u32 = 8_000;
pub const MAX_RATE: u32 = 192_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a mono WAV file. Multi-channel files are rejected.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if !(MIN_RATE..=MAX_RATE).contains(&spec.sample_rate) {
        return Err(Error::InvalidSampleRate(spec.sample_rate));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let full_scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. Integer formats clip to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Pcm24 => (24, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    match format {
        WavFormat::Float32 => {
            for &s in wav.samples() {
                writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
            }
        }
        WavFormat::Pcm16 | WavFormat::Pcm24 => {
            let full_scale = (1i64 << (bits - 1)) as f64;
            let (lo, hi) = (-full_scale, full_scale - 1.0);
            for &s in wav.samples() {
                let v = (s * full_scale).round().clamp(lo, hi) as i32;
                writer.write_sample(v).map_err(|e| wav_err(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_wav_atomic(path: impl AsRef<Path>, wav: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    write_wav(&tmp, wav, format)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
