use std::path::Path;

use crate::error::{Error, Result};
use crate::sigproc::Waveform;

/// Reads a mono RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float
/// samples. PCM is normalized by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([
            bytes[pos + 4],
            bytes[pos + 5],
            bytes[pos + 6],
            bytes[pos + 7],
        ]) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    if channels != 1 {
        return Err(fail(&format!("unsupported channels: {channels}, need mono")));
    }
    let samples: Vec<f32> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => {
            return Err(fail(&format!(
                "unsupported encoding: format {format}, {bits} bits (need PCM16 or float32)"
            )))
        }
    };
    Waveform::new(samples, rate)
}

/// Writes mono 16-bit PCM; samples are clamped to [-1, 1].
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm16(path: &Path, rate: u32, channels: u16, samples: &[i16]) {
        let data_len = samples.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for &s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        std::fs::write(path, out).unwrap();
    }

    #[test]
    fn pcm16_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm16(&p, 24000, 1, &[32767, -32768, 0]);
        let w = load_wav(&p).unwrap();
        assert!((w.samples[0] - 32767.0 / 32768.0).abs() < 1e-7);
        assert_eq!(w.samples[1], -1.0);
        assert_eq!(w.samples[2], 0.0);
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_pcm16(&p, 24000, 2, &[0, 0, 0, 0]);
        let err = load_wav(&p).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn one_second_has_rate_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.wav");
        write_pcm16(&p, 24000, 1, &vec![100; 24000]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 24000);
        assert_eq!(w.sample_rate, 24000);
    }

    #[test]
    fn unsupported_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_pcm16(&p, 8000, 1, &[0; 100]);
        assert!(load_wav(&p).is_err());
    }

    #[test]
    fn roundtrip_through_save() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25], 16000).unwrap();
        save_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn float32_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let samples = [0.25f32, -0.75];
        let data_len = samples.len() * 4;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&22050u32.to_le_bytes());
        out.extend_from_slice(&(22050u32 * 4).to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&32u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        std::fs::write(&p, out).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.75]);
    }
}
