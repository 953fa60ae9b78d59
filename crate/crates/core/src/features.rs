//! STFT front end and the 11-channel input tensor:
//! 4 log-power spectrograms, 4 phase spectrograms and 3 normalized
//! active-intensity channels.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::FoaAudio;
use crate::error::{Error, Result};
use crate::geometry::{Doa, FoaTransform};
use crate::tracks::FrameEvent;

pub const N_FFT: usize = 1024;
pub const WIN_LENGTH: usize = 960;
pub const HOP_LENGTH: usize = 480;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_FEATURE_CHANNELS: usize = 11;
/// Feature frames per label frame (100 ms / 20 ms).
pub const FRAMES_PER_LABEL: usize = 5;
pub const LOG_EPS: f64 = 1e-8;
pub const INTENSITY_EPS: f64 = 1e-8;

/// Complex spectrogram, `frames × bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex<f64> {
        self.data[frame * self.bins + bin]
    }
}

/// Reusable STFT with a planned FFT and a periodic Hann window.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    scratch: Vec<Complex<f64>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..WIN_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect();
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            window,
            scratch,
        }
    }

    /// Number of frames for a signal of `len` samples: frame `i` starts at
    /// `i · hop`, and the trailing partial frames are zero-padded, so a
    /// signal of `n · hop` samples yields exactly `n` frames.
    pub fn n_frames(len: usize) -> Result<usize> {
        if len < WIN_LENGTH {
            return Err(Error::Shape(format!(
                "signal of {len} samples is shorter than one {WIN_LENGTH}-sample window"
            )));
        }
        Ok(len.div_ceil(HOP_LENGTH))
    }

    pub fn process(&mut self, x: &[f32]) -> Result<Spectrogram> {
        let frames = Self::n_frames(x.len())?;
        let mut data = Vec::with_capacity(frames * N_BINS);
        let mut buf = vec![Complex::default(); N_FFT];
        for f in 0..frames {
            let start = f * HOP_LENGTH;
            for (n, b) in buf.iter_mut().enumerate() {
                let v = if n < WIN_LENGTH {
                    x.get(start + n).map_or(0.0, |&s| s as f64 * self.window[n])
                } else {
                    0.0
                };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut self.scratch);
            data.extend_from_slice(&buf[..N_BINS]);
        }
        Ok(Spectrogram {
            frames,
            bins: N_BINS,
            data,
        })
    }
}

thread_local! {
    static STFT: RefCell<Stft> = RefCell::new(Stft::new());
}

/// Hann-windowed STFT (window 960, hop 480, FFT size 1024).
pub fn stft(x: &[f32]) -> Result<Spectrogram> {
    STFT.with(|s| s.borrow_mut().process(x))
}

/// `channels × frames × bins` feature stack, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Self {
            channels,
            frames,
            bins,
            data: vec![0.0; channels * frames * bins],
        }
    }

    pub fn from_raw(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        match *dims {
            [channels, frames, bins] if channels * frames * bins == data.len() => Ok(Self {
                channels,
                frames,
                bins,
                data,
            }),
            _ => Err(Error::Shape(format!(
                "feature tensor dims {dims:?} do not match {} values",
                data.len()
            ))),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.frames, self.bins]
    }

    #[inline]
    pub fn index(&self, ch: usize, frame: usize, bin: usize) -> usize {
        (ch * self.frames + frame) * self.bins + bin
    }

    pub fn get(&self, ch: usize, frame: usize, bin: usize) -> f32 {
        self.data[self.index(ch, frame, bin)]
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.frames * self.bins;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Label frames covered, when the frame count is a multiple of 5.
    pub fn label_frames(&self) -> Result<usize> {
        if self.frames % FRAMES_PER_LABEL != 0 {
            return Err(Error::Shape(format!(
                "{} feature frames is not a multiple of {FRAMES_PER_LABEL}",
                self.frames
            )));
        }
        Ok(self.frames / FRAMES_PER_LABEL)
    }

    /// Feature frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::Shape(format!(
                "frame range {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let mut out = Self::zeros(self.channels, len, self.bins);
        for ch in 0..self.channels {
            for f in 0..len {
                let src = self.index(ch, start + f, 0);
                let dst = out.index(ch, f, 0);
                out.data[dst..dst + self.bins].copy_from_slice(&self.data[src..src + self.bins]);
            }
        }
        Ok(out)
    }

    /// Normalized intensity vector at one TF bin.
    pub fn intensity(&self, frame: usize, bin: usize) -> Doa {
        Doa::new(
            self.get(8, frame, bin) as f64,
            self.get(9, frame, bin) as f64,
            self.get(10, frame, bin) as f64,
        )
    }
}

fn phase(c: Complex<f64>) -> f64 {
    let p = c.im.atan2(c.re);
    // keep the range half-open at -π
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Builds the 11-channel tensor from `(W, X, Y, Z)` audio.
pub fn assemble_features(foa: &FoaAudio) -> Result<FeatureTensor> {
    foa.check()?;
    let specs = foa
        .channels
        .iter()
        .map(|c| stft(c))
        .collect::<Result<Vec<_>>>()?;
    let (frames, bins) = (specs[0].frames, specs[0].bins);
    let mut out = FeatureTensor::zeros(N_FEATURE_CHANNELS, frames, bins);
    for f in 0..frames {
        for b in 0..bins {
            let s: [Complex<f64>; 4] = std::array::from_fn(|c| specs[c].at(f, b));
            for c in 0..4 {
                let i = out.index(c, f, b);
                out.data[i] = (s[c].norm_sqr() + LOG_EPS).ln() as f32;
                let i = out.index(4 + c, f, b);
                out.data[i] = phase(s[c]) as f32;
            }
            let w = s[0].conj();
            let iv: [f64; 3] = std::array::from_fn(|d| (w * s[d + 1]).re);
            let norm = (iv[0] * iv[0] + iv[1] * iv[1] + iv[2] * iv[2]).sqrt() + INTENSITY_EPS;
            for d in 0..3 {
                let i = out.index(8 + d, f, b);
                out.data[i] = (iv[d] / norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Power-weighted mean of the normalized intensity over feature frames
/// `[start, end)`, as a unit direction. `None` when the range carries no
/// directional energy.
pub fn intensity_doa(feat: &FeatureTensor, start: usize, end: usize) -> Option<Doa> {
    let mut acc = Doa::ORIGIN;
    for f in start..end.min(feat.frames) {
        for b in 0..feat.bins {
            let w = (feat.get(0, f, b) as f64).exp();
            acc = acc.add(feat.intensity(f, b).scale(w));
        }
    }
    acc.normalized().ok()
}

/// Scales every channel by `gain`.
pub fn apply_gain(foa: &FoaAudio, gain: f32) -> FoaAudio {
    FoaAudio {
        sample_rate: foa.sample_rate,
        channels: foa
            .channels
            .iter()
            .map(|c| c.iter().map(|v| v * gain).collect())
            .collect(),
    }
}

/// Gain drawn uniformly from `[0.5, 1.5]`.
pub fn draw_volume_gain<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.random_range(0.5..=1.5)
}

/// Random broadband gain in `[0.5, 1.5]`; returns the gain used.
pub fn volume_perturb<R: Rng + ?Sized>(foa: &FoaAudio, rng: &mut R) -> (FoaAudio, f32) {
    let g = draw_volume_gain(rng);
    (apply_gain(foa, g), g)
}

/// Feature-domain equivalent of scaling the audio by `gain`: log-power
/// channels shift by `2 ln gain`, phase and normalized intensity are
/// unchanged. Exact wherever the power is well above `LOG_EPS`.
pub fn gain_features(feat: &FeatureTensor, gain: f32) -> FeatureTensor {
    let mut out = feat.clone();
    let shift = 2.0 * (gain as f64).ln();
    let plane = feat.frames * feat.bins;
    out.data[..4 * plane]
        .iter_mut()
        .for_each(|v| *v = (*v as f64 + shift) as f32);
    out
}

/// Feature-domain equivalent of [`spatial_augment`] on the audio. The
/// transform is a signed permutation of `(W, X, Y, Z)`, so log-power planes
/// are permuted, negated channels gain `π` of phase, and the intensity
/// vector is rotated.
pub fn transform_features(feat: &FeatureTensor, kind: FoaTransform) -> FeatureTensor {
    let m = kind.channel_matrix();
    let plane = feat.frames * feat.bins;
    let mut out = feat.clone();
    for (dst, row) in m.iter().enumerate() {
        let (src, &coef) = row
            .iter()
            .enumerate()
            .find(|(_, c)| **c != 0.0)
            .expect("signed permutation row");
        out.data[dst * plane..(dst + 1) * plane].copy_from_slice(&feat.data[src * plane..(src + 1) * plane]);
        let phase_src = &feat.data[(4 + src) * plane..(5 + src) * plane];
        let phase_dst = &mut out.data[(4 + dst) * plane..(5 + dst) * plane];
        if coef > 0.0 {
            phase_dst.copy_from_slice(phase_src);
        } else {
            for (d, &p) in phase_dst.iter_mut().zip(phase_src) {
                *d = if p <= 0.0 { p + PI as f32 } else { p - PI as f32 };
            }
        }
    }
    for i in 0..plane {
        let v = [feat.data[8 * plane + i], feat.data[9 * plane + i], feat.data[10 * plane + i]];
        for d in 0..3 {
            let row = &m[d + 1][1..];
            out.data[(8 + d) * plane + i] = (0..3).map(|j| row[j] as f32 * v[j]).sum();
        }
    }
    out
}

/// Applies an axis-aligned FOA transform to audio and to every event
/// direction, keeping the pair consistent.
pub fn spatial_augment(
    foa: &FoaAudio,
    events: &[FrameEvent],
    kind: FoaTransform,
) -> Result<(FoaAudio, Vec<FrameEvent>)> {
    foa.check()?;
    let m = kind.channel_matrix();
    let mut channels = vec![vec![0.0f32; foa.len()]; 4];
    for (row, out) in m.iter().zip(channels.iter_mut()) {
        for (col, &coef) in row.iter().enumerate() {
            if coef != 0.0 {
                let c = coef as f32;
                for (o, v) in out.iter_mut().zip(&foa.channels[col]) {
                    *o += c * v;
                }
            }
        }
    }
    let events = events
        .iter()
        .map(|e| FrameEvent {
            doa: kind.apply_doa(e.doa),
            ..*e
        })
        .collect();
    Ok((
        FoaAudio {
            sample_rate: foa.sample_rate,
            channels,
        },
        events,
    ))
}
