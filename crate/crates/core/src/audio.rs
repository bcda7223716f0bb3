//! Decoded PCM audio and the 16-bit WAV wire/file format.

use std::io::Cursor;
use std::path::Path;

/// Sample rate of mock synthesis and the default mix rate.
pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;
/// Largest magnitude a decoded sample may have before limiting.
pub const MAX_ABS_SAMPLE: f32 = 4.0;

const I16_SCALE: f32 = 32767.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AudioError {
    #[error("unsupported channel count {0} (expected 1 or 2)")]
    Channels(u16),
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("{samples} samples do not divide into {channels}-channel frames")]
    RaggedFrames { samples: usize, channels: u16 },
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("sample {index} has magnitude {value} above {MAX_ABS_SAMPLE}")]
    OutOfRange { index: usize, value: f32 },
    #[error("wav: {0}")]
    Wav(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<hound::Error> for AudioError {
    fn from(e: hound::Error) -> Self {
        AudioError::Wav(e.to_string())
    }
}

/// Interleaved floating-point PCM with its format.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioArtifact {
    samples: Vec<f32>,
    sample_rate: u32,
    channels: u16,
}

impl AudioArtifact {
    pub fn new(samples: Vec<f32>, sample_rate: u32, channels: u16) -> Result<Self, AudioError> {
        if channels != 1 && channels != 2 {
            return Err(AudioError::Channels(channels));
        }
        if sample_rate == 0 {
            return Err(AudioError::SampleRate);
        }
        if !samples.len().is_multiple_of(channels as usize) {
            return Err(AudioError::RaggedFrames {
                samples: samples.len(),
                channels,
            });
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() {
                return Err(AudioError::NonFinite(index));
            }
            if value.abs() > MAX_ABS_SAMPLE {
                return Err(AudioError::OutOfRange { index, value });
            }
        }
        Ok(AudioArtifact {
            samples,
            sample_rate,
            channels,
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(samples, sample_rate, 1)
    }

    pub fn silence(frames: usize, sample_rate: u32) -> Self {
        AudioArtifact {
            samples: vec![0.0; frames],
            sample_rate,
            channels: 1,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    /// Channel average; mono input is returned unchanged.
    pub fn to_mono(&self) -> AudioArtifact {
        if self.channels == 1 {
            return self.clone();
        }
        let samples = self
            .samples
            .chunks_exact(self.channels as usize)
            .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
            .collect();
        AudioArtifact {
            samples,
            sample_rate: self.sample_rate,
            channels: 1,
        }
    }

    /// Keeps frames `[start, end)`, clamped to the artifact.
    pub fn slice_frames(&self, start: usize, end: usize) -> AudioArtifact {
        let ch = self.channels as usize;
        let end = end.min(self.frames());
        let start = start.min(end);
        AudioArtifact {
            samples: self.samples[start * ch..end * ch].to_vec(),
            sample_rate: self.sample_rate,
            channels: self.channels,
        }
    }

    /// Applies `f(frame_index, sample)` to every sample.
    pub(crate) fn map_frames(&self, mut f: impl FnMut(usize, f32) -> f32) -> AudioArtifact {
        let ch = self.channels as usize;
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, &x)| f(i / ch, x))
            .collect();
        AudioArtifact {
            samples,
            sample_rate: self.sample_rate,
            channels: self.channels,
        }
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<f32>, sample_rate: u32, channels: u16) -> Self {
        AudioArtifact {
            samples,
            sample_rate,
            channels,
        }
    }
}

fn to_i16(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * I16_SCALE).round() as i16
}

/// Encodes as RIFF/WAVE, PCM 16-bit little-endian. Samples are clipped to [-1, 1].
pub fn encode_wav(artifact: &AudioArtifact) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: artifact.channels,
        sample_rate: artifact.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + artifact.samples.len() * 2));
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory wav writer");
        let mut samples = writer.get_i16_writer(artifact.samples.len() as u32);
        for &x in &artifact.samples {
            samples.write_sample(to_i16(x));
        }
        samples.flush().expect("in-memory wav write");
        writer.finalize().expect("in-memory wav finalize");
    }
    cursor.into_inner()
}

/// Decodes 8/16/24/32-bit integer or 32-bit float WAV data.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioArtifact, AudioError> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = reader.spec();
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / I16_SCALE))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ (8 | 24 | 32)) => {
            let scale = ((1i64 << (bits - 1)) - 1) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()?
        }
        (format, bits) => {
            return Err(AudioError::Wav(format!("unsupported sample format {format:?}/{bits}")))
        }
    };
    AudioArtifact::new(samples, spec.sample_rate, spec.channels)
}

pub fn write_wav(path: &Path, artifact: &AudioArtifact) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav(artifact)).map_err(|e| AudioError::Io(e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<AudioArtifact, AudioError> {
    let bytes = std::fs::read(path).map_err(|e| AudioError::Io(e.to_string()))?;
    decode_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_are_checked() {
        assert_eq!(AudioArtifact::new(vec![0.0; 4], 48_000, 3), Err(AudioError::Channels(3)));
        assert!(matches!(AudioArtifact::new(vec![0.0; 3], 48_000, 2), Err(AudioError::RaggedFrames { .. })));
        assert_eq!(AudioArtifact::mono(vec![0.0, f32::NAN], 48_000), Err(AudioError::NonFinite(1)));
        assert!(matches!(AudioArtifact::mono(vec![4.5], 48_000), Err(AudioError::OutOfRange { index: 0, .. })));
        assert_eq!(AudioArtifact::mono(vec![0.0], 0), Err(AudioError::SampleRate));
    }

    #[test]
    fn duration_is_frames_over_rate() {
        let a = AudioArtifact::new(vec![0.0; 96_000], 48_000, 2).unwrap();
        assert_eq!(a.frames(), 48_000);
        assert_eq!(a.duration_s(), 1.0);
    }

    #[test]
    fn wav_header_is_plain_pcm16() {
        let a = AudioArtifact::mono(vec![0.0, 0.5, -0.5], 48_000).unwrap();
        let bytes = encode_wav(&a);
        assert_eq!(bytes.len(), 44 + 6);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(&bytes[8..16], b"WAVEfmt ");
        // fmt chunk size 16, format tag 1 (PCM), 1 channel, 48 kHz, 16 bits.
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 16);
        assert_eq!(u16::from_le_bytes(bytes[20..22].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[22..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 48_000);
        assert_eq!(u16::from_le_bytes(bytes[34..36].try_into().unwrap()), 16);
        assert_eq!(&bytes[36..40], b"data");
        assert_eq!(i16::from_le_bytes(bytes[46..48].try_into().unwrap()), 16384);
    }

    #[test]
    fn pcm16_codes_survive_decode_encode() {
        let codes: Vec<i16> = vec![-32767, -12345, -1, 0, 1, 255, 32000, 32767];
        let a = AudioArtifact::mono(codes.iter().map(|&c| c as f32 / I16_SCALE).collect(), 22_050).unwrap();
        let decoded = decode_wav(&encode_wav(&a)).unwrap();
        let back: Vec<i16> = decoded.samples().iter().map(|&x| to_i16(x)).collect();
        assert_eq!(back, codes);
        assert_eq!(encode_wav(&decoded), encode_wav(&a));
    }

    #[test]
    fn stereo_downmix_averages() {
        let a = AudioArtifact::new(vec![1.0, 0.0, 0.5, 0.5], 48_000, 2).unwrap();
        assert_eq!(a.to_mono().samples(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode_wav(b"not a wav"), Err(AudioError::Wav(_))));
    }
}
