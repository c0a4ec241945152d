use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Reads 16-bit PCM mono at `expected_rate`; anything else is a format error
/// naming the offending header field.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| hound_error(path, e))?;
    let spec = reader.spec();
    let field_err = |field, message: String| Error::Format {
        field,
        message: format!("{}: {message}", path.display()),
    };
    if spec.channels != 1 {
        return Err(field_err("channels", format!("expected mono, got {}", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int {
        return Err(field_err("sample_format", "expected integer PCM, got float".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(field_err(
            "bits_per_sample",
            format!("expected 16, got {}", spec.bits_per_sample),
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(field_err(
            "sample_rate",
            format!("expected {expected_rate}, got {}", spec.sample_rate),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_error(path, e))?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| hound_error(path, e))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| hound_error(path, e))?;
    }
    writer.finalize().map_err(|e| hound_error(path, e))
}

fn hound_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path.to_path_buf(), io),
        hound::Error::Unsupported => Error::Format {
            field: "format",
            message: format!("{}: unsupported encoding", path.display()),
        },
        other => Error::Format {
            field: "header",
            message: format!("{}: {other}", path.display()),
        },
    }
}
