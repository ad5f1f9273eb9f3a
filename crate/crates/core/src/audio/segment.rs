//! Clip segmentation: split where the RMS stays under a threshold for long
//! enough, then keep only segments inside the configured duration bounds.

use crate::audio::Waveform;

#[derive(Debug, Clone, Copy)]
pub struct SilenceConfig {
    /// RMS window, seconds.
    pub window_secs: f64,
    /// RMS below this counts as silence.
    pub threshold: f64,
    /// Minimum silent run that splits, seconds.
    pub min_silence_secs: f64,
    /// Retained segment duration bounds, seconds.
    pub min_clip_secs: f64,
    pub max_clip_secs: f64,
}

impl Default for SilenceConfig {
    fn default() -> Self {
        SilenceConfig {
            window_secs: 0.05,
            threshold: 0.01,
            min_silence_secs: 0.5,
            min_clip_secs: 5.0,
            max_clip_secs: 20.0,
        }
    }
}

/// A kept segment with its sample offset in the source waveform.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    pub wave: Waveform,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.wave.samples.len()
    }
}

pub fn split_on_silence(w: &Waveform, cfg: &SilenceConfig) -> Vec<Segment> {
    let rate = w.sample_rate as f64;
    let win = ((cfg.window_secs * rate) as usize).max(1);
    let n = w.samples.len();
    if n == 0 {
        return Vec::new();
    }
    let n_windows = n.div_ceil(win);
    let silent: Vec<bool> = (0..n_windows)
        .map(|i| {
            let lo = i * win;
            let hi = ((i + 1) * win).min(n);
            let len = hi - lo;
            let ms = w.samples[lo..hi].iter().map(|s| s * s).sum::<f64>() / len as f64;
            ms.sqrt() < cfg.threshold
        })
        .collect();

    let min_silence_windows = ((cfg.min_silence_secs / cfg.window_secs).round() as usize).max(1);
    // classify windows into gap (long silent run) or speech
    let mut is_gap = vec![false; n_windows];
    let mut i = 0;
    while i < n_windows {
        if silent[i] {
            let mut j = i;
            while j < n_windows && silent[j] {
                j += 1;
            }
            if j - i >= min_silence_windows {
                for v in is_gap.iter_mut().take(j).skip(i) {
                    *v = true;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }

    let min_len = (cfg.min_clip_secs * rate) as usize;
    let max_len = (cfg.max_clip_secs * rate) as usize;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n_windows {
        if is_gap[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n_windows && !is_gap[j] {
            j += 1;
        }
        let lo = i * win;
        let hi = (j * win).min(n);
        let len = hi - lo;
        if len >= min_len && len <= max_len {
            out.push(Segment {
                start: lo,
                wave: Waveform::new(w.samples[lo..hi].to_vec(), w.sample_rate),
            });
        }
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::DEFAULT_SAMPLE_RATE;

    fn tone(secs: f64) -> Vec<f64> {
        let n = (secs * DEFAULT_SAMPLE_RATE as f64) as usize;
        (0..n)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / DEFAULT_SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn long_tone_is_one_segment() {
        let w = Waveform::new(tone(12.0), DEFAULT_SAMPLE_RATE);
        let segs = split_on_silence(&w, &SilenceConfig::default());
        assert_eq!(segs.len(), 1);
        assert!((segs[0].wave.duration_secs() - 12.0).abs() < 0.1);
    }

    #[test]
    fn short_tone_is_dropped() {
        let w = Waveform::new(tone(3.0), DEFAULT_SAMPLE_RATE);
        let segs = split_on_silence(&w, &SilenceConfig::default());
        assert!(segs.is_empty());
    }

    #[test]
    fn two_tones_with_silence_make_two_segments() {
        let mut samples = tone(6.0);
        samples.extend(vec![0.0; DEFAULT_SAMPLE_RATE as usize]); // 1 s gap
        samples.extend(tone(6.0));
        let w = Waveform::new(samples, DEFAULT_SAMPLE_RATE);
        let segs = split_on_silence(&w, &SilenceConfig::default());
        assert_eq!(segs.len(), 2);
        // disjoint and ordered
        assert!(segs[0].end() <= segs[1].start);
    }

    #[test]
    fn segments_cover_source_with_gaps() {
        let mut samples = tone(7.0);
        samples.extend(vec![0.0; (1.5 * DEFAULT_SAMPLE_RATE as f64) as usize]);
        samples.extend(tone(9.0));
        let total = samples.len();
        let w = Waveform::new(samples, DEFAULT_SAMPLE_RATE);
        let segs = split_on_silence(&w, &SilenceConfig::default());
        assert_eq!(segs.len(), 2);
        let covered: usize = segs.iter().map(|s| s.wave.samples.len()).sum();
        let gaps = segs[1].start - segs[0].end() + segs[0].start + (total - segs[1].end());
        assert_eq!(covered + gaps, total);
    }
}
