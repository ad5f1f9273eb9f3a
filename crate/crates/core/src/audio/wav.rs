//! RIFF/WAVE PCM 16-bit mono reader and writer. Anything else (other
//! encodings, channel counts, bit depths) is rejected with a typed error.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::MalformedWav {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_end = off + 8 + size;
        if body_end > bytes.len() {
            return Err(malformed("chunk extends past end of file"));
        }
        let body = &bytes[off + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        off = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    let unsupported = |reason: String| Error::UnsupportedWav {
        path: path.to_path_buf(),
        reason,
    };
    if format != 1 {
        return Err(unsupported(format!("format tag {format}, want PCM (1)")));
    }
    if bits != 16 {
        return Err(unsupported(format!("{bits}-bit samples, want 16")));
    }
    if channels != 1 {
        return Err(unsupported(format!("{channels} channels, want mono")));
    }
    if data.len() % 2 != 0 {
        return Err(malformed("odd data chunk length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM_SCALE)
        .collect();
    Ok(Waveform::new(samples, rate))
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * PCM_SCALE).round().clamp(-32767.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sotto-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn silence_round_trips_to_zeros() {
        let p = tmp("silence.wav");
        let w = Waveform::new(vec![0.0; 100], 22_050);
        save_wav(&w, &p).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 22_050);
        assert!(back.samples.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_hits_quantization_bound() {
        let p = tmp("square.wav");
        let samples: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        save_wav(&Waveform::new(samples, 22_050), &p).unwrap();
        let back = load_wav(&p).unwrap();
        let bound = 32767.0 / 32768.0;
        for (i, s) in back.samples.iter().enumerate() {
            let want = if i % 2 == 0 { bound } else { -bound };
            assert_eq!(*s, want);
        }
    }

    #[test]
    fn random_round_trip_error_within_quantization() {
        let p = tmp("random.wav");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<f64> = (0..5000).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w = Waveform::new(samples.clone(), 22_050);
        save_wav(&w, &p).unwrap();
        let back = load_wav(&p).unwrap();
        let max_err = samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max err {max_err}");
    }

    #[test]
    fn malformed_and_unsupported_files_are_typed_errors() {
        let p = tmp("bad.wav");
        std::fs::write(&p, b"not a wav at all").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::MalformedWav { .. })));

        // stereo file
        let p2 = tmp("stereo.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // 2 channels
        bytes.extend_from_slice(&22050u32.to_le_bytes());
        bytes.extend_from_slice(&88200u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&p2, bytes).unwrap();
        assert!(matches!(load_wav(&p2), Err(Error::UnsupportedWav { .. })));
    }
}
