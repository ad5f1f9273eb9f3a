//! Deterministic synthetic text/audio corpus. Each character renders as a
//! fixed-duration tone whose pitch is a function of (character, speaker), so
//! the text-to-audio correspondence is learnable at desk scale.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{save_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CorpusConfig {
    pub n_items: usize,
    pub n_speakers: usize,
    pub seed: u64,
    /// Clip duration bounds, seconds.
    pub min_secs: f64,
    pub max_secs: f64,
    pub sample_rate: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_items: 8,
            n_speakers: 2,
            seed: 7,
            min_secs: 0.6,
            max_secs: 2.5,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub text: String,
    pub wave: Waveform,
    pub speaker_id: usize,
}

const CHAR_TONE_SECS: f64 = 0.07;
const CHAR_GAP_SECS: f64 = 0.01;
const SPACE_SECS: f64 = 0.06;

fn speaker_base_hz(speaker: usize) -> f64 {
    160.0 * 1.22f64.powi(speaker as i32)
}

fn char_freq(c: u8, base: f64) -> f64 {
    let rank = (c - b'a') as f64;
    base * 2f64.powf(rank / 12.0)
}

/// Render text as a tone sequence for one speaker.
pub fn render_text(text: &str, speaker: usize, sample_rate: u32) -> Waveform {
    let rate = sample_rate as f64;
    let tone_n = (CHAR_TONE_SECS * rate) as usize;
    let gap_n = (CHAR_GAP_SECS * rate) as usize;
    let space_n = (SPACE_SECS * rate) as usize;
    let base = speaker_base_hz(speaker);
    let mut samples = Vec::new();
    for ch in text.bytes() {
        if ch == b' ' {
            samples.extend(std::iter::repeat(0.0).take(space_n));
            continue;
        }
        let f = char_freq(ch, base);
        for i in 0..tone_n {
            // short raised-cosine ramps avoid clicks at tone boundaries
            let env_in = (i as f64 / (0.1 * tone_n as f64)).min(1.0);
            let env_out = ((tone_n - i) as f64 / (0.1 * tone_n as f64)).min(1.0);
            let v = 0.4
                * env_in
                * env_out
                * (2.0 * std::f64::consts::PI * f * i as f64 / rate).sin();
            samples.push(v);
        }
        samples.extend(std::iter::repeat(0.0).take(gap_n));
    }
    Waveform::new(samples, sample_rate)
}

const SYLLABLES: [&str; 12] = [
    "ba", "ke", "di", "mo", "lu", "sa", "te", "ni", "go", "ra", "we", "fu",
];

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

/// Deterministic corpus generation: a pure function of the config.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusItem>> {
    if cfg.n_speakers < 2 {
        return Err(Error::contract("synth_corpus requires at least 2 speakers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let speaker = i % cfg.n_speakers;
        let mut text = random_word(&mut rng);
        loop {
            let dur = render_text(&text, speaker, cfg.sample_rate).duration_secs();
            if dur >= cfg.min_secs {
                break;
            }
            let next = format!("{} {}", text, random_word(&mut rng));
            let next_dur = render_text(&next, speaker, cfg.sample_rate).duration_secs();
            if next_dur > cfg.max_secs {
                break;
            }
            text = next;
        }
        let wave = render_text(&text, speaker, cfg.sample_rate);
        items.push(CorpusItem {
            text,
            wave,
            speaker_id: speaker,
        });
    }
    Ok(items)
}

/// One manifest record: wav path, transcript, speaker id.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub wav_path: PathBuf,
    pub text: String,
    pub speaker_id: usize,
}

/// Write corpus wavs plus a tab-separated manifest into `dir`.
pub fn write_corpus(items: &[CorpusItem], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut lines = String::new();
    for (i, item) in items.iter().enumerate() {
        let wav_path = dir.join(format!("clip_{i:04}.wav"));
        save_wav(&item.wave, &wav_path)?;
        lines.push_str(&format!(
            "{}\t{}\t{}\n",
            wav_path.display(),
            item.text,
            item.speaker_id
        ));
    }
    std::fs::write(&manifest_path, lines).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (wav, text, spk) = (parts.next(), parts.next(), parts.next());
        match (wav, text, spk) {
            (Some(w), Some(t), Some(s)) => out.push(ManifestEntry {
                wav_path: PathBuf::from(w),
                text: t.to_string(),
                speaker_id: s.parse().map_err(|_| {
                    Error::Config(format!("manifest line {}: bad speaker id {s}", ln + 1))
                })?,
            }),
            _ => {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    ln + 1
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_corpora() {
        let cfg = CorpusConfig::default();
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.wave.samples, y.wave.samples);
            assert_eq!(x.speaker_id, y.speaker_id);
        }
    }

    #[test]
    fn speakers_differ_on_same_text() {
        let a = render_text("bake", 0, DEFAULT_SAMPLE_RATE);
        let b = render_text("bake", 1, DEFAULT_SAMPLE_RATE);
        assert_eq!(a.samples.len(), b.samples.len());
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn durations_within_bounds() {
        let cfg = CorpusConfig {
            n_items: 12,
            ..Default::default()
        };
        let items = synth_corpus(&cfg).unwrap();
        for item in items {
            let d = item.wave.duration_secs();
            assert!(d <= cfg.max_secs, "duration {d}");
            assert!(!item.text.is_empty());
        }
    }

    #[test]
    fn fewer_than_two_speakers_is_an_error() {
        let cfg = CorpusConfig {
            n_speakers: 1,
            ..Default::default()
        };
        assert!(synth_corpus(&cfg).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join("sotto-corpus-tests");
        let cfg = CorpusConfig {
            n_items: 3,
            min_secs: 0.3,
            ..Default::default()
        };
        let items = synth_corpus(&cfg).unwrap();
        let manifest = write_corpus(&items, &dir).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].text, items[0].text);
        assert!(entries[0].wav_path.exists());
    }
}
