//! WAV I/O restricted to PCM16 mono 16 kHz; anything else is rejected with
//! a descriptive error.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const REQUIRED_SAMPLE_RATE: u32 = 16_000;

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono audio, file has {} channels", spec.channels),
        ));
    }
    if spec.sample_rate != REQUIRED_SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!(
                "expected {} Hz, file has {} Hz (resampling unsupported)",
                REQUIRED_SAMPLE_RATE, spec.sample_rate
            ),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!(
                "expected 16-bit integer PCM, file has {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.map_err(|e| wav_err(path, e.to_string()))?;
    let data = samples.iter().map(|&s| s as f64 / 32768.0).collect();
    Waveform::new(data, REQUIRED_SAMPLE_RATE)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if w.sample_rate != REQUIRED_SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!("can only write {} Hz audio", REQUIRED_SAMPLE_RATE),
        ));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: REQUIRED_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in &w.samples {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::sine(440.0, 0.05, 0.5, REQUIRED_SAMPLE_RATE);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), w.samples.len());
        let max_err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1.0 / 32768.0, "max quantization error {}", max_err);
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sr.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("44100"));
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }
}
