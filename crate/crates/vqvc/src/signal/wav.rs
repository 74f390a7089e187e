//! RIFF/WAVE reader and writer. Only mono 16-bit PCM is accepted; anything
//! else is rejected with a message naming the offending chunk.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

use super::Waveform;

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::Wav(format!("{}: missing RIFF header", path.display())));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav(format!("{}: RIFF form type is not WAVE", path.display())));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_le(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::Wav(format!(
                "{}: chunk '{}' overruns the file",
                path.display(),
                String::from_utf8_lossy(id)
            ))
        })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Wav(format!("{}: fmt chunk truncated", path.display())));
                }
                fmt = Some((u16_le(&body[0..2]), u16_le(&body[2..4]), u32_le(&body[4..8]), u16_le(&body[14..16])));
            }
            b"data" => data = Some(body),
            _ => {} // ancillary chunks (LIST, fact, ...) are skipped
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::Wav(format!("{}: no fmt chunk", path.display())))?;
    if format != 1 {
        return Err(Error::Wav(format!(
            "{}: fmt chunk: audio format {format} unsupported (only PCM)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(Error::Wav(format!(
            "{}: fmt chunk: {channels} channels unsupported (only mono)",
            path.display()
        )));
    }
    if bits != 16 {
        return Err(Error::Wav(format!(
            "{}: fmt chunk: {bits} bits per sample unsupported (only 16)",
            path.display()
        )));
    }
    let data = data.ok_or_else(|| Error::Wav(format!("{}: no data chunk", path.display())))?;

    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(rate, samples)
}

pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let n = wav.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fsutil::atomic_write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vqvc-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_preserves_samples() {
        let samples: Vec<f32> = (0..200).map(|i| ((i as f32) * 0.05).sin() * 0.8).collect();
        let wav = Waveform::new(22050, samples.clone()).unwrap();
        let p = tmp("roundtrip.wav");
        write_wav(&p, &wav).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate_hz, 22050);
        assert_eq!(back.len(), wav.len());
        // one quantization step plus the 32767/32768 scale mismatch
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn rejects_stereo_naming_fmt_chunk() {
        let mut wav = Vec::new();
        wav.extend_from_slice(b"RIFF");
        wav.extend_from_slice(&36u32.to_le_bytes());
        wav.extend_from_slice(b"WAVE");
        wav.extend_from_slice(b"fmt ");
        wav.extend_from_slice(&16u32.to_le_bytes());
        wav.extend_from_slice(&1u16.to_le_bytes());
        wav.extend_from_slice(&2u16.to_le_bytes()); // stereo
        wav.extend_from_slice(&22050u32.to_le_bytes());
        wav.extend_from_slice(&88200u32.to_le_bytes());
        wav.extend_from_slice(&4u16.to_le_bytes());
        wav.extend_from_slice(&16u16.to_le_bytes());
        wav.extend_from_slice(b"data");
        wav.extend_from_slice(&0u32.to_le_bytes());
        let p = tmp("stereo.wav");
        std::fs::write(&p, &wav).unwrap();
        let err = read_wav(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fmt chunk"), "message should name the chunk: {msg}");
        assert!(msg.contains("2 channels"), "message should name the problem: {msg}");
    }

    #[test]
    fn rejects_float_format() {
        let mut wav = Vec::new();
        wav.extend_from_slice(b"RIFF");
        wav.extend_from_slice(&36u32.to_le_bytes());
        wav.extend_from_slice(b"WAVE");
        wav.extend_from_slice(b"fmt ");
        wav.extend_from_slice(&16u32.to_le_bytes());
        wav.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        wav.extend_from_slice(&1u16.to_le_bytes());
        wav.extend_from_slice(&22050u32.to_le_bytes());
        wav.extend_from_slice(&88200u32.to_le_bytes());
        wav.extend_from_slice(&4u16.to_le_bytes());
        wav.extend_from_slice(&32u16.to_le_bytes());
        wav.extend_from_slice(b"data");
        wav.extend_from_slice(&0u32.to_le_bytes());
        let p = tmp("float.wav");
        std::fs::write(&p, &wav).unwrap();
        let msg = read_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("audio format 3"), "{msg}");
    }

    #[test]
    fn rejects_missing_data_chunk() {
        let mut wav = Vec::new();
        wav.extend_from_slice(b"RIFF");
        wav.extend_from_slice(&28u32.to_le_bytes());
        wav.extend_from_slice(b"WAVE");
        wav.extend_from_slice(b"fmt ");
        wav.extend_from_slice(&16u32.to_le_bytes());
        wav.extend_from_slice(&1u16.to_le_bytes());
        wav.extend_from_slice(&1u16.to_le_bytes());
        wav.extend_from_slice(&22050u32.to_le_bytes());
        wav.extend_from_slice(&44100u32.to_le_bytes());
        wav.extend_from_slice(&2u16.to_le_bytes());
        wav.extend_from_slice(&16u16.to_le_bytes());
        let p = tmp("nodata.wav");
        std::fs::write(&p, &wav).unwrap();
        let msg = read_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("data chunk"), "{msg}");
    }
}
