//! Audio feature frontend: magnitude STFT, log-mel, LFR stacking, WAV I/O.
//!
//! All operations are pure and deterministic; length laws are exact:
//! STFT produces ceil(n/hop) frames, LFR produces ceil(T/F) rows.

pub mod wav;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_WIN: usize = 512;
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_MEL_BINS: usize = 40;
pub const DEFAULT_LFR: usize = 6;
/// Floor added before the log so silence maps to ln(1e-10).
pub const LOG_FLOOR: f64 = 1e-10;
/// Mel filters span 0–8000 Hz (Nyquist at 16 kHz).
pub const MEL_FMAX: f64 = 8000.0;

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArg("sample rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "waveform samples".into(),
            });
        }
        if samples.iter().any(|s| s.abs() > 1.0 + 1e-12) {
            return Err(Error::InvalidArg(
                "waveform samples must lie in [-1, 1]".into(),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sinusoid test helper: amplitude·sin(2πft), phase 0 at t=0.
    pub fn sine(freq_hz: f64, dur_secs: f64, amplitude: f64, sample_rate: u32) -> Waveform {
        let n = (dur_secs * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64
                    / sample_rate as f64)
                    .sin()
            })
            .collect();
        Waveform {
            samples,
            sample_rate,
        }
    }
}

/// T×B matrix of log-mel energies.
#[derive(Debug, Clone)]
pub struct MelFeatures {
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub mel_bins: usize,
}

impl MelFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// T'×(B·F) matrix of stacked mel rows.
#[derive(Debug, Clone)]
pub struct LfrFeatures {
    pub frames: Tensor,
    pub lfr_factor: usize,
}

impl LfrFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Rectangular,
}

pub fn window_values(kind: WindowKind, win: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; win],
        WindowKind::Hann => (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect(),
    }
}

/// Magnitude STFT with a Hann window; frames cover [t·hop, t·hop+win) with
/// zero padding past the end, giving exactly ceil(n/hop) frames.
pub fn stft_magnitude(w: &Waveform, win: usize, hop: usize) -> Result<Tensor> {
    stft_magnitude_windowed(w, win, hop, WindowKind::Hann)
}

pub fn stft_magnitude_windowed(
    w: &Waveform,
    win: usize,
    hop: usize,
    kind: WindowKind,
) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::InvalidArg("empty waveform".into()));
    }
    if !win.is_power_of_two() {
        return Err(Error::InvalidArg(format!(
            "window {} must be a power of two",
            win
        )));
    }
    if hop == 0 || hop > win {
        return Err(Error::InvalidArg(format!(
            "hop {} must satisfy 0 < hop <= win {}",
            hop, win
        )));
    }
    let n = w.len();
    let t_frames = n.div_ceil(hop);
    let bins = win / 2 + 1;
    let window = window_values(kind, win);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut out = vec![0.0; t_frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..t_frames {
        for (j, slot) in buf.iter_mut().enumerate() {
            let u = t * hop + j;
            let s = if u < n { w.samples[u] } else { 0.0 };
            *slot = Complex::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[t * bins + k] = buf[k].norm();
        }
    }
    Tensor::new(vec![t_frames, bins], out)
}

/// Triangular mel filterbank over 0–MEL_FMAX, rows summing to positive values.
pub fn mel_filterbank(mel_bins: usize, win: usize, sample_rate: u32) -> Result<Tensor> {
    if mel_bins < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 mel bins, got {}",
            mel_bins
        )));
    }
    let bins = win / 2 + 1;
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10.0_f64.powf(m / 2595.0) - 1.0);
    let mel_max = to_mel(MEL_FMAX);
    let points: Vec<f64> = (0..mel_bins + 2)
        .map(|i| to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = vec![0.0; mel_bins * bins];
    for b in 0..mel_bins {
        let (lo, mid, hi) = (points[b], points[b + 1], points[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / win as f64;
            let weight = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[b * bins + k] = weight;
        }
    }
    Tensor::new(vec![mel_bins, bins], fb)
}

/// Log-compressed mel spectrogram: ln(filterbank · magnitudes + 1e-10).
pub fn log_mel(mags: &Tensor, mel_bins: usize, sample_rate: u32) -> Result<MelFeatures> {
    let (t_frames, bins) = mags.dims2()?;
    let win = (bins - 1) * 2;
    let fb = mel_filterbank(mel_bins, win, sample_rate)?;
    let mut out = vec![0.0; t_frames * mel_bins];
    for t in 0..t_frames {
        let mrow = mags.row(t);
        for b in 0..mel_bins {
            let frow = fb.row(b);
            let mut acc = 0.0;
            for k in 0..bins {
                acc += frow[k] * mrow[k];
            }
            out[t * mel_bins + b] = (acc + LOG_FLOOR).ln();
        }
    }
    Ok(MelFeatures {
        frames: Tensor::new(vec![t_frames, mel_bins], out)?,
        frame_shift_ms: 1000.0 * DEFAULT_HOP as f64 / sample_rate as f64,
        mel_bins,
    })
}

/// Full frontend: waveform → magnitude STFT → log-mel.
pub fn mel_features(w: &Waveform) -> Result<MelFeatures> {
    let mags = stft_magnitude(w, DEFAULT_WIN, DEFAULT_HOP)?;
    log_mel(&mags, DEFAULT_MEL_BINS, w.sample_rate)
}

/// Stack F consecutive mel rows into one wide row; trailing frames are
/// padded by repeating the last row. Row t' concatenates source rows
/// t'·F … t'·F+F−1, so T' = ceil(T/F).
pub fn lfr_stack(m: &MelFeatures, factor: usize) -> Result<LfrFeatures> {
    if factor == 0 {
        return Err(Error::InvalidArg("LFR factor must be >= 1".into()));
    }
    let (t_frames, b) = m.frames.dims2()?;
    if t_frames == 0 {
        return Err(Error::InvalidArg("cannot LFR-stack zero frames".into()));
    }
    let t_out = t_frames.div_ceil(factor);
    let mut out = vec![0.0; t_out * factor * b];
    for t in 0..t_out {
        for f in 0..factor {
            let src = (t * factor + f).min(t_frames - 1);
            out[(t * factor + f) * b..(t * factor + f + 1) * b]
                .copy_from_slice(m.frames.row(src));
        }
    }
    Ok(LfrFeatures {
        frames: Tensor::new(vec![t_out, factor * b], out)?,
        lfr_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(n²) DFT magnitude, the independent oracle for the FFT path.
    fn naive_dft_magnitudes(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let bins = n / 2 + 1;
        let mut out = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &x) in frame.iter().enumerate() {
                let phi = -2.0 * std::f64::consts::PI * k as f64 * j as f64 / n as f64;
                re += x * phi.cos();
                im += x * phi.sin();
            }
            out.push((re * re + im * im).sqrt());
        }
        out
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let w = Waveform::new(vec![0.0; 1600], 16_000).unwrap();
        let m = stft_magnitude(&w, 512, 160).unwrap();
        assert_eq!(m.shape(), &[10, 257]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_is_ceil_law() {
        for n in [1usize, 159, 160, 161, 512, 1600, 16_001] {
            let w = Waveform::new(vec![0.1; n], 16_000).unwrap();
            let m = stft_magnitude(&w, 512, 160).unwrap();
            assert_eq!(m.shape()[0], n.div_ceil(160), "n={}", n);
        }
    }

    #[test]
    fn sine_at_bin_center_peaks_at_that_bin() {
        // bin k center = k·16000/512; k=16 → 500 Hz exactly.
        let k = 16usize;
        let freq = k as f64 * 16_000.0 / 512.0;
        let w = Waveform::sine(freq, 1.0, 0.5, 16_000);
        let m = stft_magnitude_windowed(&w, 512, 160, WindowKind::Rectangular).unwrap();
        let t_frames = m.shape()[0];
        // interior frames only: the last frames are zero-padded
        for t in 0..t_frames - 4 {
            let row = m.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "frame {}", t);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let frame: Vec<f64> = (0..512).map(|_| next()).collect();
        let w = Waveform::new(frame.clone(), 16_000).unwrap();
        let m = stft_magnitude_windowed(&w, 512, 512, WindowKind::Rectangular).unwrap();
        let oracle = naive_dft_magnitudes(&frame);
        for (a, b) in m.row(0).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
    }

    #[test]
    fn parseval_energy_identity() {
        // Two-sided spectral energy (interior bins doubled) equals
        // win · window-weighted signal energy, checked at 1e-6 relative.
        let mut state = 0xdeadbeefu64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let win = 512usize;
        let frame: Vec<f64> = (0..win).map(|_| next()).collect();
        let w = Waveform::new(frame.clone(), 16_000).unwrap();
        let m = stft_magnitude(&w, win, win).unwrap();
        let row = m.row(0);
        let mut spectral = row[0] * row[0] + row[win / 2] * row[win / 2];
        for k in 1..win / 2 {
            spectral += 2.0 * row[k] * row[k];
        }
        let window = window_values(WindowKind::Hann, win);
        let energy: f64 = frame
            .iter()
            .zip(&window)
            .map(|(x, h)| (x * h) * (x * h))
            .sum();
        let direct = win as f64 * energy;
        assert!(
            (spectral - direct).abs() / direct.abs() < 1e-6,
            "{} vs {}",
            spectral,
            direct
        );
    }

    #[test]
    fn log_mel_of_silence_is_log_floor() {
        let mags = Tensor::zeros(&[5, 257]);
        let mel = log_mel(&mags, 40, 16_000).unwrap();
        assert_eq!(mel.frames.shape(), &[5, 40]);
        for &v in mel.frames.data() {
            assert!((v - LOG_FLOOR.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn filterbank_rows_all_positive_and_doubling_bounded() {
        let fb = mel_filterbank(40, 512, 16_000).unwrap();
        for b in 0..40 {
            let s: f64 = fb.row(b).iter().sum();
            assert!(s > 0.0, "filter {} sums to {}", b, s);
        }
        // doubling magnitudes raises each log-mel output by [0, ln2]
        let mut state = 0x777u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mags = Tensor::new(vec![3, 257], (0..3 * 257).map(|_| next()).collect()).unwrap();
        let doubled = mags.map(|v| 2.0 * v);
        let a = log_mel(&mags, 40, 16_000).unwrap();
        let b = log_mel(&doubled, 40, 16_000).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            let delta = y - x;
            assert!(delta >= 0.0, "log-mel decreased");
            assert!(delta <= std::f64::consts::LN_2 + 1e-9, "delta {}", delta);
        }
    }

    #[test]
    fn white_noise_mel_energies_positive() {
        let mut state = 0x31415926u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let w = Waveform::new((0..1600).map(|_| next()).collect(), 16_000).unwrap();
        let mags = stft_magnitude(&w, 512, 160).unwrap();
        let mel = log_mel(&mags, 40, 16_000).unwrap();
        // positive mel energy means the log sits well above the silence floor
        for &v in mel.frames.data() {
            assert!(v > LOG_FLOOR.ln());
        }
    }

    fn mel_of(rows: &[Vec<f64>]) -> MelFeatures {
        MelFeatures {
            frames: Tensor::from_rows(rows),
            frame_shift_ms: 10.0,
            mel_bins: rows[0].len(),
        }
    }

    #[test]
    fn lfr_pads_by_repeating_last_frame() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let lfr = lfr_stack(&mel_of(&rows), 6).unwrap();
        assert_eq!(lfr.frames.shape(), &[17, 6]);
        assert_eq!(lfr.frames.row(16), &[96.0, 97.0, 98.0, 99.0, 99.0, 99.0]);
    }

    #[test]
    fn lfr_factor_one_is_identity() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, -(i as f64)]).collect();
        let m = mel_of(&rows);
        let lfr = lfr_stack(&m, 1).unwrap();
        assert_eq!(lfr.frames.data(), m.frames.data());
    }

    #[test]
    fn lfr_whole_utterance_single_row() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let lfr = lfr_stack(&mel_of(&rows), 6).unwrap();
        assert_eq!(lfr.frames.shape(), &[1, 6]);
        assert_eq!(lfr.frames.row(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
