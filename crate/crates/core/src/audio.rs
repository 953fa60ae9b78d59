//! Four-channel FOA buffers and WAV export.
//!
//! Internally channels are `(W, X, Y, Z)`; files use the ACN order
//! `(W, Y, Z, X)`.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 24_000;

/// File channel `i` holds internal channel `ACN_TO_INTERNAL[i]`.
const ACN_TO_INTERNAL: [usize; 4] = [0, 2, 3, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct FoaAudio {
    pub sample_rate: u32,
    /// `[W, X, Y, Z]`, equal lengths.
    pub channels: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

impl FoaAudio {
    pub fn silent(sample_rate: u32, len: usize) -> Self {
        Self {
            sample_rate,
            channels: vec![vec![0.0; len]; 4],
        }
    }

    pub fn from_channels(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self> {
        let a = Self {
            sample_rate,
            channels,
        };
        a.check()?;
        Ok(a)
    }

    pub fn check(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Shape(format!(
                "FOA audio needs 4 channels, got {}",
                self.channels.len()
            )));
        }
        let n = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("FOA channels differ in length".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Shape(format!(
                "sample range {start}..{} exceeds {} samples",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            sample_rate: self.sample_rate,
            channels: self
                .channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
        })
    }
}

pub fn write_wav(path: &Path, audio: &FoaAudio, format: WavFormat) -> Result<()> {
    audio.check()?;
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: audio.sample_rate,
        bits_per_sample: match format {
            WavFormat::Float32 => 32,
            WavFormat::Pcm16 => 16,
        },
        sample_format: match format {
            WavFormat::Float32 => hound::SampleFormat::Float,
            WavFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..audio.len() {
        for &ch in &ACN_TO_INTERNAL {
            let v = audio.channels[ch][i];
            match format {
                WavFormat::Float32 => w.write_sample(v)?,
                WavFormat::Pcm16 => {
                    w.write_sample((v.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?
                }
            }
        }
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<FoaAudio> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 4 {
        return Err(Error::Shape(format!(
            "{}: expected 4 channels, found {}",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32 - 1.0;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let n = interleaved.len() / 4;
    let mut channels = vec![Vec::with_capacity(n); 4];
    for frame in interleaved.chunks_exact(4) {
        for (file_ch, &v) in frame.iter().enumerate() {
            channels[ACN_TO_INTERNAL[file_ch]].push(v);
        }
    }
    FoaAudio::from_channels(spec.sample_rate, channels)
}
