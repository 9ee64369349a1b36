//! Mono PCM ingestion, frame extraction and volume normalization.

use std::path::Path;

use crate::{Error, Result, SAMPLE_RATE};

/// An immutable mono recording at 44.1 kHz with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Recording {
    pub fn new(id: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::Recording(format!(
                "{id}: sample {i} = {v} outside [-1, 1]"
            )));
        }
        Ok(Recording {
            id,
            sample_rate: SAMPLE_RATE,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample at a signed position; zero outside the recording.
    #[inline]
    pub fn at(&self, pos: i64) -> f64 {
        if pos < 0 {
            0.0
        } else {
            self.samples.get(pos as usize).copied().unwrap_or(0.0)
        }
    }
}

/// Frame layout: a `frame_len` window analysed by `regions` overlapping
/// receptive fields spaced `stride` apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub frame_len: usize,
    pub receptive_field: usize,
    pub stride: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        FrameGeometry {
            frame_len: 16_384,
            receptive_field: 4_096,
            stride: 512,
        }
    }
}

impl FrameGeometry {
    pub fn new(frame_len: usize, receptive_field: usize, stride: usize) -> Result<Self> {
        let geom = FrameGeometry {
            frame_len,
            receptive_field,
            stride,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.receptive_field == 0 || self.stride == 0 {
            return Err(Error::Geometry(
                "receptive field and stride must be positive".into(),
            ));
        }
        if self.frame_len < self.receptive_field {
            return Err(Error::Geometry(format!(
                "frame_len {} shorter than receptive field {}",
                self.frame_len, self.receptive_field
            )));
        }
        if (self.frame_len - self.receptive_field) % self.stride != 0 {
            return Err(Error::Geometry(format!(
                "stride {} does not divide frame_len - receptive_field = {}",
                self.stride,
                self.frame_len - self.receptive_field
            )));
        }
        Ok(())
    }

    /// Number of receptive-field regions per frame.
    ///
    /// The quotient `(16384 - 4096) / 512` is 24; counting both endpoints
    /// gives the 25 regions the frame actually holds (offsets 0..=12288).
    pub fn regions(&self) -> usize {
        (self.frame_len - self.receptive_field) / self.stride + 1
    }
}

/// Sample offsets (within a frame) of every region's first sample.
pub fn region_offsets(geom: &FrameGeometry) -> Vec<usize> {
    (0..geom.regions()).map(|r| r * geom.stride).collect()
}

/// A `frame_len` window of audio, divided by its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub samples: Vec<f64>,
    pub source_id: String,
    pub center_sample: usize,
    /// The norm that was divided out; zero for an all-zero raw frame.
    pub norm_applied: f64,
    /// Set when the raw frame was all zero and left unnormalized.
    pub silent: bool,
}

impl AudioFrame {
    /// Normalize raw samples to unit norm, flagging all-zero input.
    pub fn normalize(mut samples: Vec<f64>, source_id: impl Into<String>, center: usize) -> Self {
        let norm = samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        let silent = norm == 0.0;
        if !silent {
            samples.iter_mut().for_each(|v| *v /= norm);
        }
        AudioFrame {
            samples,
            source_id: source_id.into(),
            center_sample: center,
            norm_applied: norm,
            silent,
        }
    }
}

/// Cut the frame `[center - frame_len/2, center + frame_len/2)` out of
/// `rec`, zero-padding beyond either end, and normalize it.
///
/// `center` may equal `rec.len()` so that evaluation grids ending exactly on
/// the last sample stay in range.
pub fn extract_frame(rec: &Recording, center: usize, geom: &FrameGeometry) -> Result<AudioFrame> {
    if center > rec.len() {
        return Err(Error::InvalidArgument(format!(
            "frame center {center} beyond recording {} of length {}",
            rec.id,
            rec.len()
        )));
    }
    let start = center as i64 - (geom.frame_len / 2) as i64;
    let raw: Vec<f64> = (0..geom.frame_len as i64).map(|n| rec.at(start + n)).collect();
    Ok(AudioFrame::normalize(raw, rec.id.clone(), center))
}

/// Read a 16-bit PCM mono 44.1 kHz RIFF/WAVE file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_wav(&bytes, id)
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| truncated(at, "u16 field"))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(at, "u32 field"))
}

fn truncated(offset: usize, what: &str) -> Error {
    Error::WavParse {
        offset: offset as u64,
        message: format!("file truncated while reading {what}"),
    }
}

/// Parse WAV bytes. Unknown chunks are skipped.
pub fn parse_wav(bytes: &[u8], id: impl Into<String>) -> Result<Recording> {
    if bytes.len() < 12 {
        return Err(truncated(bytes.len(), "RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::WavParse {
            offset: 0,
            message: "missing RIFF tag".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::WavParse {
            offset: 8,
            message: "missing WAVE tag".into(),
        });
    }

    let mut pos = 12usize;
    let mut format_seen = false;
    let mut data: Option<&[u8]> = None;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(truncated(pos, "chunk header"));
        }
        let tag = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::WavParse {
                offset: body as u64,
                message: format!(
                    "chunk {:?} declares {size} bytes but only {} remain",
                    String::from_utf8_lossy(tag),
                    bytes.len() - body
                ),
            });
        }
        match tag {
            b"fmt " => {
                if size < 16 {
                    return Err(truncated(body + size, "fmt chunk"));
                }
                let format = read_u16(bytes, body)?;
                let channels = read_u16(bytes, body + 2)?;
                let rate = read_u32(bytes, body + 4)?;
                let bits = read_u16(bytes, body + 14)?;
                if format != 1 {
                    return Err(Error::UnsupportedWav {
                        field: "encoding",
                        value: format!("format tag {format} (only PCM = 1)"),
                    });
                }
                if channels != 1 {
                    return Err(Error::UnsupportedWav {
                        field: "channels",
                        value: channels.to_string(),
                    });
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::UnsupportedWav {
                        field: "sample_rate",
                        value: rate.to_string(),
                    });
                }
                if bits != 16 {
                    return Err(Error::UnsupportedWav {
                        field: "bits_per_sample",
                        value: bits.to_string(),
                    });
                }
                format_seen = true;
            }
            b"data" => {
                if size % 2 != 0 {
                    return Err(Error::WavParse {
                        offset: (body + size) as u64,
                        message: "data chunk holds a partial 16-bit sample".into(),
                    });
                }
                data = Some(&bytes[body..body + size]);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body + size + (size & 1);
    }

    if !format_seen {
        return Err(Error::WavParse {
            offset: bytes.len() as u64,
            message: "no fmt chunk".into(),
        });
    }
    let data = data.ok_or_else(|| Error::WavParse {
        offset: bytes.len() as u64,
        message: "no data chunk".into(),
    })?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Recording::new(id, samples)
}

/// Quantize to 16-bit PCM and encode as a canonical 44-byte-header WAV.
pub fn encode_wav(rec: &Recording) -> Vec<u8> {
    let data_len = rec.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rec.sample_rate.to_le_bytes());
    out.extend_from_slice(&(rec.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &rec.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

/// Map an amplitude to the nearest 16-bit code (inverse of `/ 32768`).
pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(rec)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_with(format: u16, channels: u16, rate: u32, bits: u16, data: &[i16]) -> Vec<u8> {
        let rec = Recording::new("x", vec![0.0; data.len()]).unwrap();
        let mut bytes = encode_wav(&rec);
        bytes[20..22].copy_from_slice(&format.to_le_bytes());
        bytes[22..24].copy_from_slice(&channels.to_le_bytes());
        bytes[24..28].copy_from_slice(&rate.to_le_bytes());
        bytes[34..36].copy_from_slice(&bits.to_le_bytes());
        for (i, v) in data.iter().enumerate() {
            bytes[44 + 2 * i..46 + 2 * i].copy_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn pcm_scaling() {
        let rec = parse_wav(&wav_with(1, 1, 44_100, 16, &[16_384, -32_768, 0]), "t").unwrap();
        assert_eq!(rec.samples, vec![0.5, -1.0, 0.0]);
        assert_eq!(rec.sample_rate, 44_100);
        assert_eq!(rec.len(), 3);
    }

    #[test]
    fn rejects_wrong_field() {
        let cases = [
            (wav_with(3, 1, 44_100, 16, &[0]), "encoding"),
            (wav_with(1, 2, 44_100, 16, &[0]), "channels"),
            (wav_with(1, 1, 48_000, 16, &[0]), "sample_rate"),
            (wav_with(1, 1, 44_100, 24, &[0]), "bits_per_sample"),
        ];
        for (bytes, field) in cases {
            match parse_wav(&bytes, "t") {
                Err(Error::UnsupportedWav { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected rejection of {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = wav_with(1, 1, 44_100, 16, &[1, 2, 3, 4]);
        let cut = &bytes[..bytes.len() - 3];
        match parse_wav(cut, "t") {
            Err(Error::WavParse { offset, .. }) => assert_eq!(offset, 44),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_wav(&bytes[..30], "t") {
            Err(Error::WavParse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = wav_with(1, 1, 44_100, 16, &[100, -100]);
        let mut list = b"LIST".to_vec();
        list.extend_from_slice(&3u32.to_le_bytes());
        list.extend_from_slice(b"abc\0");
        bytes.splice(36..36, list);
        let rec = parse_wav(&bytes, "t").unwrap();
        assert_eq!(rec.len(), 2);
    }

    #[test]
    fn constant_recording_frame_is_uniform() {
        let geom = FrameGeometry::default();
        let rec = Recording::new("c", vec![1.0; 40_000]).unwrap();
        let frame = extract_frame(&rec, 20_000, &geom).unwrap();
        let expect = 1.0 / (16_384f64).sqrt();
        assert!(frame.samples.iter().all(|v| (v - expect).abs() < 1e-15));
        assert_eq!(frame.center_sample, 20_000);
        assert!(!frame.silent);
    }

    #[test]
    fn center_zero_pads_left_half() {
        let geom = FrameGeometry::default();
        let rec = Recording::new("c", vec![0.25; 20_000]).unwrap();
        let frame = extract_frame(&rec, 0, &geom).unwrap();
        assert!(frame.samples[..8192].iter().all(|&v| v == 0.0));
        assert!(frame.samples[8192..].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn three_four_normalizes_to_point_six_point_eight() {
        let mut raw = vec![0.0; 16_384];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let frame = AudioFrame::normalize(raw, "x", 8192);
        assert!((frame.samples[0] - 0.6).abs() < 1e-15);
        assert!((frame.samples[1] - 0.8).abs() < 1e-15);
        assert_eq!(frame.norm_applied, 5.0);
    }

    #[test]
    fn all_zero_frame_flagged() {
        let geom = FrameGeometry::default();
        let rec = Recording::new("z", vec![0.0; 30_000]).unwrap();
        let frame = extract_frame(&rec, 15_000, &geom).unwrap();
        assert!(frame.silent);
        assert_eq!(frame.norm_applied, 0.0);
    }

    #[test]
    fn region_offsets_examples() {
        let offs = region_offsets(&FrameGeometry::default());
        assert_eq!(offs.len(), 25);
        assert_eq!(*offs.last().unwrap(), 12_288);
        assert_eq!(region_offsets(&FrameGeometry::new(4096, 4096, 512).unwrap()), vec![0]);
        assert_eq!(
            region_offsets(&FrameGeometry::new(8192, 4096, 2048).unwrap()),
            vec![0, 2048, 4096]
        );
    }

    #[test]
    fn stride_must_divide() {
        assert!(FrameGeometry::new(8192, 4096, 1000).is_err());
        assert!(FrameGeometry::new(2048, 4096, 512).is_err());
    }

    #[test]
    fn out_of_range_amplitudes_rejected() {
        assert!(Recording::new("bad", vec![0.0, 1.5]).is_err());
        assert!(Recording::new("bad", vec![f64::NAN]).is_err());
    }
}
