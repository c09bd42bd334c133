use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_wav_bytes(&bytes).map_err(|e| match e {
        Error::Parse { context, message } => {
            Error::parse(format!("{} ({})", context, path.display()), message)
        }
        other => other,
    })
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode a RIFF/WAVE byte buffer. Stereo is averaged down to mono.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::parse("RIFF chunk", "missing RIFF header"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::parse("RIFF chunk", "form type is not WAVE"));
    }

    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(size);
        let name = String::from_utf8_lossy(id).into_owned();
        match id {
            b"fmt " => {
                if size < 16 || body_end > bytes.len() {
                    return Err(Error::parse("fmt chunk", format!("truncated ({size} bytes)")));
                }
                let b = &bytes[body_start..body_end];
                let mut format = u16_at(b, 0);
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::parse("fmt chunk", "truncated extensible header"));
                    }
                    format = u16_at(b, 24);
                }
                fmt = Some(Fmt {
                    format,
                    channels: u16_at(b, 2),
                    sample_rate: u32_at(b, 4),
                    bits: u16_at(b, 14),
                });
            }
            b"data" => {
                // Some writers leave the size field unset; take what is there.
                let end = body_end.min(bytes.len());
                data = Some(&bytes[body_start..end]);
            }
            _ => {
                if body_end > bytes.len() {
                    return Err(Error::parse(
                        format!("{} chunk", name.trim()),
                        "chunk extends past end of file",
                    ));
                }
            }
        }
        // chunks are word aligned
        pos = body_end.saturating_add(size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::parse("fmt chunk", "missing"))?;
    let data = data.ok_or_else(|| Error::parse("data chunk", "missing"))?;
    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels (mono or stereo only)",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::parse("fmt chunk", "sample rate is zero"));
    }
    let channels = fmt.channels as usize;
    let frames: Vec<f64> = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => {
            let per_frame = 2 * channels;
            data.chunks_exact(per_frame)
                .map(|f| {
                    let sum: f64 = f
                        .chunks_exact(2)
                        .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                        .sum();
                    sum / channels as f64
                })
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            let per_frame = 4 * channels;
            data.chunks_exact(per_frame)
                .map(|f| {
                    let sum: f64 = f
                        .chunks_exact(4)
                        .map(|s| f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64)
                        .sum();
                    (sum / channels as f64).clamp(-1.0, 1.0)
                })
                .collect()
        }
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "format code {format} with {bits} bits per sample"
            )))
        }
    };
    if frames.is_empty() {
        return Err(Error::parse("data chunk", "no complete sample frames"));
    }
    AudioClip::new(frames, fmt.sample_rate)
}

pub fn write_wav_bytes_pcm16(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_wav_bytes_pcm16(clip)).map_err(|e| Error::io(path, e))
}
