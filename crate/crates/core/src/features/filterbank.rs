use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{spectral_subtraction, FeatureMatrix};
use crate::error::{Error, Result};

/// Additive floor inside the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub spectral_subtraction: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            f_min: 125.0,
            f_max: 7_500.0,
            spectral_subtraction: true,
        }
    }
}

impl FeatureConfig {
    /// Full pipeline from PCM samples to a log-filterbank matrix.
    pub fn extract(&self, pcm: &[f64]) -> Result<FeatureMatrix> {
        let frames = frame_signal(pcm, self.sample_rate, self.frame_len_ms, self.hop_ms)?;
        let bank = MelFilterbank::new(self.n_mels, frames[0].len(), self.sample_rate, self.f_min, self.f_max)?;
        let fbank = bank.apply(&frames)?;
        Ok(if self.spectral_subtraction { spectral_subtraction(&fbank) } else { fbank })
    }
}

fn samples_for_ms(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

/// Splits `pcm` into Hann-windowed frames. Frame count is
/// `floor((len - frame) / hop) + 1`.
pub fn frame_signal(pcm: &[f64], sample_rate: u32, frame_len_ms: f64, hop_ms: f64) -> Result<Vec<Vec<f64>>> {
    if sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let frame_len = samples_for_ms(frame_len_ms, sample_rate);
    let hop = samples_for_ms(hop_ms, sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(Error::Config(format!("frame length {frame_len_ms} ms / hop {hop_ms} ms round to zero samples")));
    }
    if pcm.len() < frame_len {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one {frame_len}-sample frame",
            pcm.len()
        )));
    }
    let window: Vec<f64> = if frame_len == 1 {
        vec![1.0]
    } else {
        (0..frame_len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos()).collect()
    };
    let count = (pcm.len() - frame_len) / hop + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * hop;
            pcm[start..start + frame_len].iter().zip(&window).map(|(s, w)| s * w).collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular unit-peak filters with centers equally spaced on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_fft: usize,
    sample_rate: u32,
    /// `n_mels` rows of `n_fft / 2 + 1` bin weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// `frame_len` is the frame size in samples; the DFT size is the next
    /// power of two.
    pub fn new(n_mels: usize, frame_len: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!("invalid mel range {f_min}..{f_max} Hz at {sample_rate} Hz")));
        }
        let n_fft = frame_len.max(1).next_power_of_two();
        let n_bins = n_fft / 2 + 1;
        let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > lo && f < center {
                            (f - lo) / (center - lo)
                        } else if f >= center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(MelFilterbank { n_fft, sample_rate, weights, centers_hz: edges[1..=n_mels].to_vec() })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Per frame: power spectrum, mel filtering, `ln(x + LOG_FLOOR)`.
    pub fn apply(&self, frames: &[Vec<f64>]) -> Result<FeatureMatrix> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("no frames".into()));
        }
        let fft = FftPlanner::<f64>::new().plan_fft_forward(self.n_fft);
        let n_bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut values = Vec::with_capacity(frames.len() * self.weights.len());
        for frame in frames {
            if frame.len() > self.n_fft {
                return Err(Error::dim("MelFilterbank::apply", format!("frame of {} exceeds DFT size {}", frame.len(), self.n_fft)));
            }
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &s) in buf.iter_mut().zip(frame) {
                c.re = s;
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
            for filt in &self.weights {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push((e + LOG_FLOOR).ln());
            }
        }
        FeatureMatrix::new(frames.len(), self.weights.len(), values)
    }
}

/// Log-mel features with the default mel range for `sample_rate`.
pub fn log_mel_filterbank(frames: &[Vec<f64>], n_mels: usize, sample_rate: u32) -> Result<FeatureMatrix> {
    let first = frames.first().ok_or_else(|| Error::EmptyInput("no frames".into()))?;
    let defaults = FeatureConfig::default();
    let f_max = defaults.f_max.min(f64::from(sample_rate) / 2.0);
    MelFilterbank::new(n_mels, first.len(), sample_rate, defaults.f_min, f_max)?.apply(frames)
}

/// Reads a 16-bit signed mono WAV into samples scaled to [-1, 1).
pub fn read_wav_mono16(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "expected 16-bit integer mono, got {} channel(s) {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_at_16k_gives_98_frames() {
        let pcm = vec![0.1; 16_000];
        let frames = frame_signal(&pcm, 16_000, 25.0, 10.0).unwrap();
        assert_eq!(frames.len(), 98);
        assert_eq!(frames[0].len(), 400);
    }

    #[test]
    fn exactly_one_frame_and_too_short() {
        assert_eq!(frame_signal(&vec![1.0; 400], 16_000, 25.0, 10.0).unwrap().len(), 1);
        assert!(matches!(frame_signal(&vec![1.0; 399], 16_000, 25.0, 10.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_signal_gives_zero_frames_and_log_floor() {
        let frames = frame_signal(&vec![0.0; 1600], 16_000, 25.0, 10.0).unwrap();
        assert!(frames.iter().flatten().all(|&v| v == 0.0));
        let fb = log_mel_filterbank(&frames, 40, 16_000).unwrap();
        assert_eq!(fb.dims(), 40);
        assert!(fb.values().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn filter_responses_sum_to_at_most_one() {
        let bank = MelFilterbank::new(40, 400, 16_000, 125.0, 7_500.0).unwrap();
        assert_eq!(bank.n_fft(), 512);
        let n_bins = bank.weights()[0].len();
        let bin_hz = 16_000.0 / 512.0;
        let c = bank.centers_hz();
        for k in 0..n_bins {
            let total: f64 = bank.weights().iter().map(|w| w[k]).sum();
            assert!(total <= 1.0 + 1e-12, "bin {k}: {total}");
            // between the first and last centers the overlapping triangles tile exactly
            let f = k as f64 * bin_hz;
            if f >= c[0] && f <= c[39] {
                assert!((total - 1.0).abs() < 1e-9, "bin {k}: {total}");
            }
        }
    }

    #[test]
    fn sine_at_band_center_dominates_neighbors() {
        let bank = MelFilterbank::new(40, 400, 16_000, 125.0, 7_500.0).unwrap();
        let band = 20;
        // snap to the nearest DFT bin so leakage is symmetric
        let bin_hz = 16_000.0 / 512.0;
        let f = (bank.centers_hz()[band] / bin_hz).round() * bin_hz;
        let pcm: Vec<f64> = (0..4000).map(|n| (2.0 * PI * f * n as f64 / 16_000.0).sin()).collect();
        let frames = frame_signal(&pcm, 16_000, 25.0, 10.0).unwrap();
        let fb = bank.apply(&frames).unwrap();
        for t in 0..fb.frames() {
            assert!(fb.get(t, band) > fb.get(t, band - 1));
            assert!(fb.get(t, band) > fb.get(t, band + 1));
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let pcm: Vec<f64> = (0..8000).map(|n| ((n * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let cfg = FeatureConfig::default();
        let a = cfg.extract(&pcm).unwrap();
        let b = cfg.extract(&pcm).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
