//! Dataset assembly: manifest -> per-stage training examples. Wavs are
//! analyzed once into normalized mels; speech codes come from a trained
//! tokenizer checkpoint (EMA weights, matching what inference uses).

use std::path::Path;

use crate::ar::ArExample;
use crate::audio::mel::{mel_spectrogram, rescale_mel, NormalizedMel};
use crate::audio::{load_wav, Waveform};
use crate::clvp::ClvpExample;
use crate::diffusion::DiffusionExample;
use crate::error::{Error, Result};
use crate::numerics::Params;
use crate::pipeline::config::PipelineConfig;
use crate::textdata::{read_manifest, BpeVocab};
use crate::vqvae;

/// One fully analyzed corpus item.
pub struct LoadedItem {
    pub text: String,
    pub text_ids: Vec<u16>,
    pub speaker_id: usize,
    pub wave: Waveform,
    pub mel: NormalizedMel,
}

pub struct Dataset {
    pub items: Vec<LoadedItem>,
}

impl Dataset {
    pub fn load(manifest: impl AsRef<Path>, vocab: &BpeVocab, cfg: &PipelineConfig) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::Config("manifest has no entries".into()));
        }
        let mut items = Vec::with_capacity(entries.len());
        for e in entries {
            let wave = load_wav(&e.wav_path)?;
            let mel = rescale_mel(&mel_spectrogram(&wave, &cfg.mel)?);
            items.push(LoadedItem {
                text_ids: vocab.encode(&e.text),
                text: e.text,
                speaker_id: e.speaker_id,
                wave,
                mel,
            });
        }
        Ok(Dataset { items })
    }

    /// Conditioning clips for item `i`: other clips from the same speaker,
    /// falling back to the item itself. Deterministic in the item order.
    pub fn cond_clips(&self, i: usize, n: usize, crop_frames: usize) -> Vec<NormalizedMel> {
        let speaker = self.items[i].speaker_id;
        let mut out = Vec::with_capacity(n);
        let mut j = (i + 1) % self.items.len();
        while out.len() < n {
            if self.items[j].speaker_id == speaker && j != i {
                out.push(crop_mel(&self.items[j].mel, crop_frames));
            }
            if j == i {
                break;
            }
            j = (j + 1) % self.items.len();
            if j == (i + 1) % self.items.len() {
                break;
            }
        }
        while out.len() < n {
            out.push(crop_mel(&self.items[i].mel, crop_frames));
        }
        out
    }
}

/// Deterministic leading crop, padded with -1 (the normalized silence
/// level) when the source is shorter than the window.
pub fn crop_mel(m: &NormalizedMel, frames: usize) -> NormalizedMel {
    let mut data = vec![-1.0; m.n_mels * frames];
    let take = m.frames.min(frames);
    for band in 0..m.n_mels {
        for t in 0..take {
            data[band * frames + t] = m.data[band * m.frames + t];
        }
    }
    NormalizedMel {
        n_mels: m.n_mels,
        frames,
        data,
        config: m.config,
        clipped: 0,
    }
}

/// Code sequence for a (possibly cropped) mel under the tokenizer weights.
pub fn encode_item(vq_params: &Params, cfg: &PipelineConfig, mel: &NormalizedMel) -> Result<Vec<u16>> {
    vqvae::encode_codes(vq_params, &cfg.vqvae, mel)
}

pub fn vqvae_examples(ds: &Dataset, cfg: &PipelineConfig) -> Vec<NormalizedMel> {
    ds.items
        .iter()
        .map(|it| crop_mel(&it.mel, cfg.training.crop_frames))
        .collect()
}

pub fn ar_examples(ds: &Dataset, vq_params: &Params, cfg: &PipelineConfig) -> Result<Vec<ArExample>> {
    let mut out = Vec::with_capacity(ds.items.len());
    for (i, it) in ds.items.iter().enumerate() {
        let codes = encode_item(vq_params, cfg, &it.mel)?;
        let codes = truncate_codes(codes, cfg.ar.max_mel);
        out.push(ArExample {
            text_ids: it.text_ids.clone(),
            codes,
            cond_clips: ds.cond_clips(i, cfg.ar.cond_clips_per_sample, cfg.training.crop_frames),
        });
    }
    Ok(out)
}

pub fn clvp_examples(ds: &Dataset, vq_params: &Params, cfg: &PipelineConfig) -> Result<Vec<ClvpExample>> {
    let mut out = Vec::with_capacity(ds.items.len());
    for it in &ds.items {
        let codes = encode_item(vq_params, cfg, &it.mel)?;
        let codes = truncate_codes(codes, cfg.clvp.max_codes);
        out.push(ClvpExample {
            text_ids: it.text_ids.clone(),
            codes,
        });
    }
    Ok(out)
}

pub fn diffusion_examples(ds: &Dataset, vq_params: &Params, cfg: &PipelineConfig) -> Result<Vec<DiffusionExample>> {
    let mut out = Vec::with_capacity(ds.items.len());
    for (i, it) in ds.items.iter().enumerate() {
        let x0 = crop_mel(&it.mel, cfg.training.crop_frames);
        // codes from the same window keep the 4x alignment
        let codes = encode_item(vq_params, cfg, &x0)?;
        out.push(DiffusionExample {
            x0,
            codes,
            cond_clips: ds.cond_clips(i, cfg.ar.cond_clips_per_sample, cfg.training.crop_frames),
            text_ids: it.text_ids.clone(),
        });
    }
    Ok(out)
}

fn truncate_codes(mut codes: Vec<u16>, max: usize) -> Vec<u16> {
    codes.truncate(max);
    codes
}
