//! Waveform I/O, MEL analysis and inversion, and clip segmentation.

pub mod griffin;
pub mod mel;
pub mod segment;
pub mod wav;

pub use griffin::{griffin_lim, griffin_lim_with_trace};
pub use mel::{mel_spectrogram, MelConfig, MelSpectrogram, NormalizedMel};
pub use segment::{split_on_silence, Segment, SilenceConfig};
pub use wav::{load_wav, save_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Scale down so the peak is at most 1; silent and in-range input is
    /// returned unchanged.
    pub fn normalized(mut self) -> Self {
        let peak = self
            .samples
            .iter()
            .fold(0.0f64, |acc, s| acc.max(s.abs()));
        if peak > 1.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
        self
    }
}
