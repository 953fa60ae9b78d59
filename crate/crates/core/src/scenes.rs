//! Procedural FOA scenes with exact ground truth.
//!
//! Events start and stop on label-frame boundaries, so every 100 ms meta
//! frame lists exactly the sources that are audible in it.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{FoaAudio, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance, azel_to_doa, AzEl, Doa};
use crate::tracks::{FrameEvent, LABEL_FPS};

/// RMS level each rendered source is normalized to before level jitter.
pub const SOURCE_RMS: f64 = 0.1;
/// Sources are placed within this elevation band.
pub const MAX_ELEVATION_DEG: f64 = 60.0;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Greedy placement can paint itself into a corner; a stuck layout is
/// discarded and redrawn, event count included.
const LAYOUT_RESTARTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub n_classes: usize,
    pub max_overlap: usize,
    /// Inclusive range of events per scene.
    pub min_events: usize,
    pub max_events: usize,
    /// Inclusive range of event durations, seconds.
    pub min_event_s: f64,
    pub max_event_s: f64,
    /// Per-source SNR against the diffuse noise floor; `inf` disables noise.
    pub snr_db: f64,
    pub max_speed_deg_s: f64,
    pub min_separation_deg: f64,
    pub enforce_separation: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration_s: 5.0,
            sample_rate: SAMPLE_RATE,
            n_classes: 13,
            max_overlap: 3,
            min_events: 1,
            max_events: 6,
            min_event_s: 0.5,
            max_event_s: 2.5,
            snr_db: 30.0,
            max_speed_deg_s: 10.0,
            min_separation_deg: 15.0,
            enforce_separation: true,
        }
    }
}

impl SceneConfig {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * LABEL_FPS as f64).round() as usize
    }

    pub fn samples_per_frame(&self) -> usize {
        self.sample_rate as usize / LABEL_FPS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate != SAMPLE_RATE {
            return bad(format!("sample_rate must be {SAMPLE_RATE}"));
        }
        let frames = self.duration_s * LABEL_FPS as f64;
        if !(frames >= 1.0) || (frames - frames.round()).abs() > 1e-9 {
            return bad(format!(
                "duration_s = {} must be a positive multiple of 0.1 s",
                self.duration_s
            ));
        }
        if self.n_classes == 0 || self.max_overlap == 0 {
            return bad("n_classes and max_overlap must be positive".into());
        }
        if self.min_events > self.max_events {
            return bad("min_events > max_events".into());
        }
        if !(self.min_event_s > 0.0 && self.min_event_s <= self.max_event_s) {
            return bad("event duration range must satisfy 0 < min <= max".into());
        }
        if self.snr_db.is_nan() || self.max_speed_deg_s < 0.0 || self.min_separation_deg < 0.0 {
            return bad("snr_db, max_speed_deg_s and min_separation_deg must be valid".into());
        }
        Ok(())
    }
}

/// A mono, class-specific source signal with peak amplitude ≤ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub class_id: usize,
    pub waveform: Vec<f32>,
}

pub fn class_fundamental_hz(class_id: usize) -> f64 {
    180.0 * 1.35f64.powi(class_id as i32)
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Octave-wide band-pass (RBJ biquad, 0 dB peak).
fn bandpass(x: &mut [f64], center_hz: f64, sample_rate: f64) {
    let w0 = 2.0 * PI * center_hz / sample_rate;
    let alpha = w0.sin() / (2.0 * std::f64::consts::SQRT_2);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Harmonic stack on `180 · 1.35^k` Hz plus octave-band noise above it,
/// with a short attack and release.
pub fn synth_class_signal<R: Rng + ?Sized>(
    class_id: usize,
    n_samples: usize,
    sample_rate: u32,
    rng: &mut R,
) -> SourceSignal {
    if n_samples == 0 {
        return SourceSignal {
            class_id,
            waveform: Vec::new(),
        };
    }
    let sr = sample_rate as f64;
    let f0 = class_fundamental_hz(class_id);
    let limit = 0.45 * sr;
    let partials: Vec<(f64, f64, f64)> = (1..=8)
        .map(|h| h as f64)
        .filter(|h| h * f0 < limit)
        .map(|h| (h * f0, 1.0 / h, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut tone: Vec<f64> = (0..n_samples)
        .map(|n| {
            let t = n as f64 / sr;
            partials
                .iter()
                .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum()
        })
        .collect();
    let mut noise: Vec<f64> = (0..n_samples)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    bandpass(&mut noise, (2.0 * std::f64::consts::SQRT_2 * f0).min(0.4 * sr), sr);
    let (tone_rms, noise_rms) = (rms(&tone), rms(&noise));
    if noise_rms > 0.0 && tone_rms > 0.0 {
        let k = 0.3 * tone_rms / noise_rms;
        for (t, n) in tone.iter_mut().zip(&noise) {
            *t += k * n;
        }
    }
    let attack = (0.01 * sr) as usize;
    let release = (0.02 * sr) as usize;
    for (n, v) in tone.iter_mut().enumerate() {
        let a = ((n + 1) as f64 / attack as f64).min(1.0);
        let r = ((n_samples - n) as f64 / release as f64).min(1.0);
        *v *= a.min(r);
    }
    let peak = tone.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    SourceSignal {
        class_id,
        waveform: tone.iter().map(|v| (v * scale) as f32).collect(),
    }
}

/// SN3D first-order encoding of a moving mono source, `(W, X, Y, Z)`.
pub fn encode_foa(signal: &[f32], trajectory: &[Doa]) -> Result<[Vec<f32>; 4]> {
    if signal.len() != trajectory.len() {
        return Err(Error::Shape(format!(
            "signal has {} samples, trajectory {}",
            signal.len(),
            trajectory.len()
        )));
    }
    let mut out: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(signal.len()));
    for (&s, d) in signal.iter().zip(trajectory) {
        let s = s as f64;
        out[0].push(s as f32);
        out[1].push((s * d.x) as f32);
        out[2].push((s * d.y) as f32);
        out[3].push((s * d.z) as f32);
    }
    Ok(out)
}

/// Adds an encoded source into `audio` starting at `offset`.
pub fn mix_into(audio: &mut FoaAudio, offset: usize, encoded: &[Vec<f32>; 4], gain: f32) {
    for (dst, src) in audio.channels.iter_mut().zip(encoded) {
        for (d, s) in dst[offset..].iter_mut().zip(src) {
            *d += gain * s;
        }
    }
}

/// Great-circle motion at constant angular speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub start: Doa,
    /// Unit vector orthogonal to `start`; the direction of travel.
    pub heading: Doa,
    pub speed_rad_s: f64,
}

impl Trajectory {
    pub fn at(&self, seconds: f64) -> Doa {
        let a = self.speed_rad_s * seconds;
        self.start.scale(a.cos()).add(self.heading.scale(a.sin()))
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Doa {
    // uniform on the sphere restricted to the elevation band
    let zmax = MAX_ELEVATION_DEG.to_radians().sin();
    let z: f64 = rng.random_range(-zmax..=zmax);
    let az: f64 = rng.random_range(-180.0..180.0);
    azel_to_doa(AzEl::new(az, z.asin().to_degrees())).expect("elevation is in range")
}

fn random_heading<R: Rng + ?Sized>(start: Doa, rng: &mut R) -> Doa {
    loop {
        let v = Doa::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let t = v.sub(start.scale(v.dot(start)));
        if let Ok(h) = t.normalized() {
            return h;
        }
    }
}

/// One placed event: label frames `[onset, offset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedEvent {
    pub class_id: usize,
    pub onset: usize,
    pub offset: usize,
    pub trajectory: Trajectory,
    pub level: f64,
}

impl PlacedEvent {
    /// Direction at the centre of label frame `frame`, relative to onset.
    pub fn doa_at_frame(&self, frame: usize) -> Doa {
        let t = (frame - self.onset) as f64 / LABEL_FPS as f64 + 0.5 / LABEL_FPS as f64;
        self.trajectory.at(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub audio: FoaAudio,
    pub events: Vec<FrameEvent>,
    pub n_frames: usize,
    pub layout: Vec<PlacedEvent>,
}

/// Independent stream for scene `index` under `master_seed`.
pub fn scene_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

fn place_events<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Vec<PlacedEvent>> {
    for _ in 0..LAYOUT_RESTARTS {
        if let Some(layout) = try_layout(cfg, rng) {
            return Ok(layout);
        }
    }
    Err(Error::Infeasible(PLACEMENT_ATTEMPTS * LAYOUT_RESTARTS))
}

fn try_layout<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Option<Vec<PlacedEvent>> {
    let n_frames = cfg.n_frames();
    let count = rng.random_range(cfg.min_events..=cfg.max_events);
    let mut placed: Vec<PlacedEvent> = Vec::with_capacity(count);
    let mut overlap = vec![0usize; n_frames];
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class_id = rng.random_range(0..cfg.n_classes);
            let secs: f64 = rng.random_range(cfg.min_event_s..=cfg.max_event_s);
            let len = ((secs * LABEL_FPS as f64).round() as usize).clamp(1, n_frames);
            let onset = rng.random_range(0..=n_frames - len);
            let offset = onset + len;
            let start = random_direction(rng);
            let heading = random_heading(start, rng);
            let speed = rng.random_range(0.0..=cfg.max_speed_deg_s).to_radians();
            let level = 10f64.powf(rng.random_range(-3.0..=0.0) / 20.0);
            if overlap[onset..offset].iter().any(|&c| c >= cfg.max_overlap) {
                continue;
            }
            let cand = PlacedEvent {
                class_id,
                onset,
                offset,
                trajectory: Trajectory {
                    start,
                    heading,
                    speed_rad_s: speed,
                },
                level,
            };
            let separated = !cfg.enforce_separation
                || placed.iter().all(|p| {
                    (onset.max(p.onset)..offset.min(p.offset)).all(|f| {
                        angular_distance(cand.doa_at_frame(f), p.doa_at_frame(f))
                            .map_or(false, |a| a >= cfg.min_separation_deg)
                    })
                });
            if !separated {
                continue;
            }
            for c in &mut overlap[onset..offset] {
                *c += 1;
            }
            placed.push(cand);
            ok = true;
            break;
        }
        if !ok {
            return None;
        }
    }
    placed.sort_by_key(|p| (p.onset, p.offset));
    Some(placed)
}

/// Samples a scene layout and renders it.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let layout = place_events(cfg, rng)?;
    let n_frames = cfg.n_frames();
    let spf = cfg.samples_per_frame();
    let sr = cfg.sample_rate as f64;
    let mut audio = FoaAudio::silent(cfg.sample_rate, n_frames * spf);
    let mut events = Vec::new();
    for (track_id, ev) in layout.iter().enumerate() {
        let n = (ev.offset - ev.onset) * spf;
        let sig = synth_class_signal(ev.class_id, n, cfg.sample_rate, rng);
        let wave: Vec<f64> = sig.waveform.iter().map(|&v| v as f64).collect();
        let r = rms(&wave);
        let gain = if r > 0.0 { SOURCE_RMS * ev.level / r } else { 0.0 };
        let trajectory: Vec<Doa> = (0..n).map(|i| ev.trajectory.at(i as f64 / sr)).collect();
        let encoded = encode_foa(&sig.waveform, &trajectory)?;
        mix_into(&mut audio, ev.onset * spf, &encoded, gain as f32);
        for frame in ev.onset..ev.offset {
            events.push(FrameEvent {
                frame,
                track_id,
                class_id: ev.class_id,
                doa: ev.doa_at_frame(frame).normalized()?,
            });
        }
    }
    if cfg.snr_db.is_finite() {
        let std = SOURCE_RMS * 10f64.powf(-cfg.snr_db / 20.0);
        for ch in audio.channels.iter_mut() {
            for v in ch.iter_mut() {
                *v += (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
    }
    events.sort_by_key(|e| (e.frame, e.track_id));
    Ok(Scene {
        audio,
        events,
        n_frames,
        layout,
    })
}
