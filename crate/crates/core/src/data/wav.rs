//! RIFF/WAVE PCM16 mono reading and writing.

use std::fs;
use std::path::Path;

use super::{DataError, Waveform};

const PCM_FORMAT: u16 = 1;

/// Encodes `w` as a canonical 44-byte-header PCM16 mono file. Samples
/// outside `[-1, 1]` are clipped; the returned count says how many.
pub fn encode_wav(w: &Waveform) -> (Vec<u8>, usize) {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());

    let mut clipped = 0;
    for &s in &w.samples {
        let (q, c) = quantize(s);
        clipped += c as usize;
        out.extend_from_slice(&q.to_le_bytes());
    }
    (out, clipped)
}

/// `round(s * 32768)` with halves away from zero, saturated to `i16`.
fn quantize(s: f32) -> (i16, bool) {
    let clipped = !(-1.0..=1.0).contains(&s);
    let v = (f64::from(s.clamp(-1.0, 1.0)) * 32768.0).round();
    (v.clamp(-32768.0, 32767.0) as i16, clipped)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, DataError> {
    let malformed = |m: &str| DataError::MalformedWav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| malformed("chunk runs past end of file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too short"));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if tag != PCM_FORMAT || bits != 16 {
                    return Err(DataError::NotPcm16 { format: tag, bits });
                }
                if channels != 1 {
                    return Err(DataError::NotMono(channels));
                }
                if rate == 0 {
                    return Err(malformed("zero sample rate"));
                }
                if !size.is_multiple_of(2) {
                    return Err(malformed("odd data length"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return Ok(Waveform {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(malformed("no data chunk"))
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform, DataError> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
    decode_wav(&bytes)
}

pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<(), DataError> {
    let path = path.as_ref();
    let (bytes, clipped) = encode_wav(w);
    if clipped > 0 {
        eprintln!(
            "warning: {clipped} samples outside [-1, 1] clipped while writing {}",
            path.display()
        );
    }
    fs::write(path, bytes).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Waveform {
        let n = 4000;
        Waveform {
            samples: (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect(),
            sample_rate: 4000,
        }
    }

    #[test]
    fn ramp_round_trip_within_one_step() {
        let w = ramp();
        let back = decode_wav(&encode_wav(&w).0).unwrap();
        assert_eq!(back.sample_rate, 4000);
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn header_fields() {
        let (b, _) = encode_wav(&ramp());
        assert_eq!(b.len(), 44 + 8000);
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(u32_at(&b, 4), 36 + 8000);
        assert_eq!(&b[8..16], b"WAVEfmt ");
        assert_eq!(u32_at(&b, 16), 16);
        assert_eq!(u16_at(&b, 20), 1);
        assert_eq!(u16_at(&b, 22), 1);
        assert_eq!(u32_at(&b, 24), 4000);
        assert_eq!(u32_at(&b, 28), 8000);
        assert_eq!(u16_at(&b, 32), 2);
        assert_eq!(u16_at(&b, 34), 16);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(u32_at(&b, 40), 8000);
    }

    #[test]
    fn rounding_and_clipping() {
        assert_eq!(quantize(0.5 / 32768.0), (1, false));
        assert_eq!(quantize(-0.5 / 32768.0), (-1, false));
        assert_eq!(quantize(1.0), (32767, false));
        assert_eq!(quantize(-1.0), (-32768, false));
        assert_eq!(quantize(1.5), (32767, true));
    }

    #[test]
    fn rejects_stereo_and_float() {
        let (mut b, _) = encode_wav(&ramp());
        b[22] = 2;
        assert!(matches!(decode_wav(&b), Err(DataError::NotMono(2))));
        let (mut b, _) = encode_wav(&ramp());
        b[20] = 3;
        b[34] = 32;
        assert!(matches!(
            decode_wav(&b),
            Err(DataError::NotPcm16 {
                format: 3,
                bits: 32
            })
        ));
        assert!(matches!(
            decode_wav(b"RIFX"),
            Err(DataError::MalformedWav(_))
        ));
        let (b, _) = encode_wav(&ramp());
        assert!(matches!(
            decode_wav(&b[..100]),
            Err(DataError::MalformedWav(_))
        ));
    }

    #[test]
    fn skips_unknown_chunks() {
        let (b, _) = encode_wav(&ramp());
        let mut with_list = b[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&b[36..]);
        assert_eq!(decode_wav(&with_list).unwrap(), decode_wav(&b).unwrap());
    }
}
