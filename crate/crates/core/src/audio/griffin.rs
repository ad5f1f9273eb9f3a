//! Iterative phase reconstruction from a MEL spectrogram: pseudo-inverse of
//! the filterbank back to a linear magnitude spectrogram, then alternating
//! STFT projections. A quality stand-in for a neural MEL inverter.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;

use crate::audio::mel::{istft, stft, MelSpectrogram};
use crate::audio::Waveform;

/// Least-squares pseudo-inverse of the mel filterbank, [n_bins x n_mels].
fn filterbank_pinv(fb: &[f64], n_mels: usize, n_bins: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n_mels, n_bins, fb);
    let pinv = m
        .svd(true, true)
        .pseudo_inverse(1e-10)
        .expect("filterbank pinv");
    // pinv is [n_bins x n_mels]
    let mut out = vec![0.0; n_bins * n_mels];
    for i in 0..n_bins {
        for j in 0..n_mels {
            out[i * n_mels + j] = pinv[(i, j)];
        }
    }
    out
}

/// Linear power spectrogram estimate per frame, clamped to be nonnegative.
fn mel_to_linear_power(m: &MelSpectrogram) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let n_bins = cfg.n_bins();
    let fb = cfg.filterbank();
    let pinv = filterbank_pinv(&fb, cfg.n_mels, n_bins);
    let mut frames = Vec::with_capacity(m.frames);
    for t in 0..m.frames {
        let mut frame = vec![0.0; n_bins];
        for (b, fv) in frame.iter_mut().enumerate() {
            let mut s = 0.0;
            for band in 0..cfg.n_mels {
                // the log floor is an analysis artifact, not signal
                let p = (m.value(band, t).exp() - cfg.log_floor).max(0.0);
                s += pinv[b * cfg.n_mels + band] * p;
            }
            *fv = s.max(0.0);
        }
        frames.push(frame);
    }
    frames
}

/// Griffin-Lim phase recovery. Returns the waveform and the spectral
/// convergence error after initialization and after each iteration.
pub fn griffin_lim_with_trace(m: &MelSpectrogram, iters: usize) -> (Waveform, Vec<f64>) {
    assert!(iters >= 1, "griffin_lim needs at least one iteration");
    let cfg = &m.config;
    let target_mag: Vec<Vec<f64>> = mel_to_linear_power(m)
        .into_iter()
        .map(|f| f.into_iter().map(f64::sqrt).collect())
        .collect();
    let target_norm: f64 = target_mag
        .iter()
        .flat_map(|f| f.iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let out_len = (m.frames - 1) * cfg.hop + cfg.n_fft;

    // zero-phase init keeps the whole procedure deterministic
    let mut spectra: Vec<Vec<Complex<f64>>> = target_mag
        .iter()
        .map(|f| f.iter().map(|&v| Complex::new(v, 0.0)).collect())
        .collect();

    let sc_err = |sp: &[Vec<Complex<f64>>]| -> f64 {
        let mut acc = 0.0;
        for (frame, tframe) in sp.iter().zip(&target_mag) {
            for (c, t) in frame.iter().zip(tframe) {
                let d = c.norm() - t;
                acc += d * d;
            }
        }
        acc.sqrt() / target_norm
    };

    let mut wave = istft(&spectra, cfg.n_fft, cfg.hop, out_len);
    let mut errs = Vec::with_capacity(iters + 1);
    {
        let re = stft(&wave, cfg.n_fft, cfg.hop);
        errs.push(sc_err(&re));
    }
    for _ in 0..iters {
        let re = stft(&wave, cfg.n_fft, cfg.hop);
        // keep the recovered phase, force the target magnitude
        for (frame, (rframe, tframe)) in spectra.iter_mut().zip(re.iter().zip(&target_mag)) {
            for (b, c) in frame.iter_mut().enumerate() {
                let ph = if rframe[b].norm() > 1e-12 {
                    rframe[b] / rframe[b].norm()
                } else {
                    Complex::new(1.0, 0.0)
                };
                *c = ph * tframe[b];
            }
        }
        wave = istft(&spectra, cfg.n_fft, cfg.hop, out_len);
        let re2 = stft(&wave, cfg.n_fft, cfg.hop);
        errs.push(sc_err(&re2));
    }
    let w = Waveform::new(wave, cfg.sample_rate).normalized();
    (w, errs)
}

pub fn griffin_lim(m: &MelSpectrogram, iters: usize) -> Waveform {
    griffin_lim_with_trace(m, iters).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::{mel_spectrogram, MelConfig};
    use crate::audio::DEFAULT_SAMPLE_RATE;

    #[test]
    fn all_floor_spectrogram_is_near_silent() {
        let cfg = MelConfig::default();
        let m = MelSpectrogram {
            n_mels: cfg.n_mels,
            frames: 20,
            data: vec![cfg.log_floor.ln(); cfg.n_mels * 20],
            config: cfg,
        };
        let w = griffin_lim(&m, 4);
        assert!(w.rms() < 1e-3, "rms {}", w.rms());
    }

    #[test]
    fn convergence_error_is_nonincreasing() {
        use rand::{Rng, SeedableRng};
        let cfg = MelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 8192;
        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let m = mel_spectrogram(&Waveform::new(samples, DEFAULT_SAMPLE_RATE), &cfg).unwrap();
        let (_, errs) = griffin_lim_with_trace(&m, 8);
        for pair in errs.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-9),
                "errors increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn sine_round_trip_preserves_band_argmax() {
        let cfg = MelConfig::default();
        let f = cfg.band_center_hz(40);
        let n = 8192;
        let samples: Vec<f64> = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / DEFAULT_SAMPLE_RATE as f64).sin())
            .collect();
        let m = mel_spectrogram(&Waveform::new(samples, DEFAULT_SAMPLE_RATE), &cfg).unwrap();
        let band = m.argmax_band();
        let w = griffin_lim(&m, 16);
        let m2 = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m2.argmax_band(), band);
    }
}
