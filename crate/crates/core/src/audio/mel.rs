//! STFT-based log-MEL analysis and the affine rescaling the diffusion model
//! trains on. With the default hop of 256 each spectrogram frame summarizes
//! 256 waveform samples.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    /// Power floor applied before the log.
    pub log_floor: f64,
    /// Corpus-level log-value bounds for the [-1, 1] rescale.
    pub log_min: f64,
    pub log_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        let log_floor = 1e-5;
        MelConfig {
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 11_025.0,
            sample_rate: 22_050,
            log_floor,
            log_min: log_floor.ln(),
            log_max: -log_floor.ln(),
        }
    }
}

impl MelConfig {
    pub fn frames_for(&self, n_samples: usize) -> Option<usize> {
        if n_samples < self.n_fft {
            None
        } else {
            Some(1 + (n_samples - self.n_fft) / self.hop)
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Codes per second implied by the hop and a 4x temporal reduction.
    pub fn code_frame_rate(&self) -> f64 {
        self.sample_rate as f64 / (self.hop as f64 * 4.0)
    }

    /// Triangular filterbank on the HTK mel scale, [n_mels x n_bins].
    pub fn filterbank(&self) -> Vec<f64> {
        let n_bins = self.n_bins();
        let mel_lo = hz_to_mel(self.fmin);
        let mel_hi = hz_to_mel(self.fmax);
        let points: Vec<f64> = (0..self.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect();
        let mut fb = vec![0.0; self.n_mels * n_bins];
        for m in 0..self.n_mels {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            for b in 0..n_bins {
                let f = b as f64 * self.sample_rate as f64 / self.n_fft as f64;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                fb[m * n_bins + b] = w;
            }
        }
        fb
    }

    /// Center frequency of band `m` (peak of its triangle).
    pub fn band_center_hz(&self, m: usize) -> f64 {
        let mel_lo = hz_to_mel(self.fmin);
        let mel_hi = hz_to_mel(self.fmax);
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (self.n_mels + 1) as f64)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-amplitude MEL spectrogram, band-major: value(band, frame).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub frames: usize,
    /// row-major [n_mels x frames]
    pub data: Vec<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn value(&self, band: usize, frame: usize) -> f64 {
        self.data[band * self.frames + frame]
    }

    /// Band with the most energy summed over frames.
    pub fn argmax_band(&self) -> usize {
        (0..self.n_mels)
            .max_by(|&a, &b| {
                let ea: f64 = self.data[a * self.frames..(a + 1) * self.frames].iter().sum();
                let eb: f64 = self.data[b * self.frames..(b + 1) * self.frames].iter().sum();
                ea.partial_cmp(&eb).unwrap()
            })
            .unwrap()
    }
}

/// MEL values affinely mapped onto [-1, 1] using corpus-level bounds held in
/// the config; out-of-range inputs clip and are counted.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMel {
    pub n_mels: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub config: MelConfig,
    pub clipped: usize,
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude-preserving forward STFT without centering:
/// frames = 1 + (len - n_fft) / hop. Returns frame-major complex spectra.
pub fn stft(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let window = hann_window(n_fft);
    let n_frames = 1 + (samples.len() - n_fft) / hop;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for fi in 0..n_frames {
        let start = fi * hop;
        for i in 0..n_fft {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    out
}

/// Inverse STFT by windowed overlap-add with squared-window normalization.
pub fn istft(spectra: &[Vec<Complex<f64>>], n_fft: usize, hop: usize, out_len: usize) -> Vec<f64> {
    let window = hann_window(n_fft);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (fi, frame) in spectra.iter().enumerate() {
        let n_bins = n_fft / 2 + 1;
        for b in 0..n_bins {
            buf[b] = frame[b];
        }
        for b in n_bins..n_fft {
            buf[b] = frame[n_fft - b].conj();
        }
        ifft.process(&mut buf);
        let start = fi * hop;
        for i in 0..n_fft {
            if start + i < out_len {
                let v = buf[i].re / n_fft as f64;
                acc[start + i] += v * window[i];
                norm[start + i] += window[i] * window[i];
            }
        }
    }
    for (a, n) in acc.iter_mut().zip(&norm) {
        if *n > 1e-10 {
            *a /= n;
        } else {
            *a = 0.0;
        }
    }
    acc
}

pub fn mel_spectrogram(w: &Waveform, config: &MelConfig) -> Result<MelSpectrogram> {
    let frames = config.frames_for(w.samples.len()).ok_or(Error::AudioTooShort {
        got: w.samples.len(),
        need: config.n_fft,
    })?;
    let spectra = stft(&w.samples, config.n_fft, config.hop);
    let fb = config.filterbank();
    let n_bins = config.n_bins();
    let mut data = vec![0.0; config.n_mels * frames];
    for (fi, frame) in spectra.iter().enumerate() {
        for m in 0..config.n_mels {
            let mut e = 0.0;
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            for (b, c) in frame.iter().enumerate() {
                e += row[b] * c.norm_sqr();
            }
            data[m * frames + fi] = e.max(config.log_floor).ln();
        }
    }
    Ok(MelSpectrogram {
        n_mels: config.n_mels,
        frames,
        data,
        config: *config,
    })
}

/// Affine map of log-MEL values onto [-1, 1] with clipping at the stored
/// corpus bounds.
pub fn rescale_mel(m: &MelSpectrogram) -> NormalizedMel {
    let (lo, hi) = (m.config.log_min, m.config.log_max);
    let mut clipped = 0usize;
    let data = m
        .data
        .iter()
        .map(|&v| {
            let y = 2.0 * (v - lo) / (hi - lo) - 1.0;
            if !(-1.0..=1.0).contains(&y) {
                clipped += 1;
            }
            y.clamp(-1.0, 1.0)
        })
        .collect();
    NormalizedMel {
        n_mels: m.n_mels,
        frames: m.frames,
        data,
        config: m.config,
        clipped,
    }
}

/// Inverse of [`rescale_mel`]; exact for in-range values.
pub fn unrescale_mel(n: &NormalizedMel) -> MelSpectrogram {
    let (lo, hi) = (n.config.log_min, n.config.log_max);
    let data = n
        .data
        .iter()
        .map(|&y| (y + 1.0) / 2.0 * (hi - lo) + lo)
        .collect();
    MelSpectrogram {
        n_mels: n.n_mels,
        frames: n.frames,
        data,
        config: n.config,
    }
}

/// Build a NormalizedMel directly from raw values already in [-1, 1].
pub fn normalized_from_values(n_mels: usize, frames: usize, data: Vec<f64>, config: MelConfig) -> NormalizedMel {
    assert_eq!(data.len(), n_mels * frames);
    NormalizedMel {
        n_mels,
        frames,
        data,
        config,
        clipped: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::DEFAULT_SAMPLE_RATE;

    fn sine(freq: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn zero_signal_sits_at_log_floor() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 4096], DEFAULT_SAMPLE_RATE);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(m.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 22_050], DEFAULT_SAMPLE_RATE);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m.frames, 83);
        assert!(mel_spectrogram(&Waveform::new(vec![0.0; 512], DEFAULT_SAMPLE_RATE), &cfg).is_err());
    }

    #[test]
    fn sine_energy_concentrates_in_its_band() {
        let cfg = MelConfig::default();
        // mid-scale bands; low bands are too narrow relative to FFT bins
        for band in [30usize, 45, 60] {
            let f = cfg.band_center_hz(band);
            let w = sine(f, 0.6, DEFAULT_SAMPLE_RATE);
            let m = mel_spectrogram(&w, &cfg).unwrap();
            let got = m.argmax_band();
            assert!(
                got == band || got + 1 == band || got == band + 1,
                "band {band} (center {f:.1} Hz) -> argmax {got}"
            );
        }
    }

    #[test]
    fn rescale_bounds_and_round_trip() {
        let cfg = MelConfig::default();
        let mid = (cfg.log_min + cfg.log_max) / 2.0;
        let m = MelSpectrogram {
            n_mels: 1,
            frames: 3,
            data: vec![cfg.log_min, mid, cfg.log_max],
            config: cfg,
        };
        let n = rescale_mel(&m);
        assert_eq!(n.data, vec![-1.0, 0.0, 1.0]);
        assert_eq!(n.clipped, 0);

        let back = unrescale_mel(&n);
        for (a, b) in m.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_round_trip_on_random_in_range_values() {
        use rand::{Rng, SeedableRng};
        let cfg = MelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..400)
            .map(|_| rng.gen_range(cfg.log_min..cfg.log_max))
            .collect();
        let m = MelSpectrogram {
            n_mels: 8,
            frames: 50,
            data: data.clone(),
            config: cfg,
        };
        let n = rescale_mel(&m);
        assert!(n.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = unrescale_mel(&n);
        let max_err = data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn mel_is_deterministic() {
        let cfg = MelConfig::default();
        let w = sine(440.0, 0.3, DEFAULT_SAMPLE_RATE);
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(a.data, b.data);
    }
}
