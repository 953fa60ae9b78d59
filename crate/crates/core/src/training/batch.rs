use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{localizer_targets, FrameTarget};
use crate::audio::FoaAudio;
use crate::error::{Error, Result};
use crate::features::{
    assemble_features, draw_volume_gain, gain_features, transform_features, FeatureTensor, FRAMES_PER_LABEL,
};
use crate::geometry::{perturb_doa, Doa, FoaTransform};
use crate::tracks::{permute_and_restack, stack_tracks, FrameEvent, StackedTracks};

/// One annotated recording with its precomputed features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub features: FeatureTensor,
    pub events: Vec<FrameEvent>,
    pub n_frames: usize,
}

impl TrainingScene {
    pub fn from_audio(audio: &FoaAudio, events: Vec<FrameEvent>) -> Result<Self> {
        let features = assemble_features(audio)?;
        let n_frames = features.label_frames()?;
        Ok(Self {
            features,
            events,
            n_frames,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub volume: bool,
    pub spatial: bool,
    pub permute_tracks: bool,
    /// Half-width of the uniform jitter on conditioning azimuth/elevation.
    pub angle_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            volume: true,
            spatial: true,
            permute_tracks: true,
            angle_deg: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            volume: false,
            spatial: false,
            permute_tracks: false,
            angle_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Label frames per training chunk.
    pub chunk_frames: usize,
    pub n_tracks: usize,
    pub n_classes: usize,
    pub augment: AugmentConfig,
}

/// Audio chunk after augmentation, with its features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedChunk {
    pub scene: usize,
    pub start_frame: usize,
    pub gain: f32,
    pub transform: Option<FoaTransform>,
    pub features: FeatureTensor,
    pub tracks: StackedTracks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerSample {
    pub chunk: PreparedChunk,
    /// Split row: rows below condition, rows from here on are targets.
    pub r: usize,
    /// Jittered conditioning DOAs per label frame.
    pub conditions: Vec<Vec<Doa>>,
    pub targets: Vec<FrameTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSample {
    pub chunk: PreparedChunk,
    pub r: usize,
    pub conditions: Vec<Vec<Doa>>,
    /// Class of row `r` per frame, `K` where the row is empty.
    pub targets: Vec<usize>,
}

fn prepare_chunk<R: Rng + ?Sized>(
    scenes: &[TrainingScene],
    spec: &BatchSpec,
    index: usize,
    rng: &mut R,
) -> Result<PreparedChunk> {
    let scene_i = rng.random_range(0..scenes.len());
    let scene = &scenes[scene_i];
    if scene.n_frames < spec.chunk_frames {
        return Err(Error::Shape(format!(
            "scene {scene_i} has {} frames, chunks need {}",
            scene.n_frames, spec.chunk_frames
        )));
    }
    let start = rng.random_range(0..=scene.n_frames - spec.chunk_frames);
    let mut features = scene
        .features
        .slice_frames(start * FRAMES_PER_LABEL, spec.chunk_frames * FRAMES_PER_LABEL)?;
    let mut events: Vec<FrameEvent> = scene
        .events
        .iter()
        .filter(|e| e.frame >= start && e.frame < start + spec.chunk_frames)
        .map(|e| FrameEvent {
            frame: e.frame - start,
            ..*e
        })
        .collect();
    // augmentations act on features; each equals recomputing features
    // from the correspondingly scaled or rotated audio
    let mut gain = 1.0;
    if spec.augment.volume {
        gain = draw_volume_gain(rng);
        features = gain_features(&features, gain);
    }
    let mut transform = None;
    if spec.augment.spatial && index % 4 == 0 {
        // identity excluded so every selected item is actually changed
        let t = FoaTransform::from_index(rng.random_range(1..16));
        features = transform_features(&features, t);
        for e in &mut events {
            e.doa = t.apply_doa(e.doa);
        }
        transform = Some(t);
    }
    let mut tracks = stack_tracks(&events, spec.n_tracks, spec.chunk_frames, spec.n_classes)?;
    if spec.augment.permute_tracks {
        tracks = permute_and_restack(&tracks, rng);
    }
    Ok(PreparedChunk {
        scene: scene_i,
        start_frame: start,
        gain,
        transform,
        features,
        tracks,
    })
}

fn jitter<R: Rng + ?Sized>(d: Doa, deg: f64, rng: &mut R) -> Result<Doa> {
    perturb_doa(d, deg, rng)
}

/// Conditioning sets from rows `0..r`, each DOA jittered.
pub fn conditioning_rows<R: Rng + ?Sized>(
    tracks: &StackedTracks,
    r: usize,
    angle_deg: f64,
    rng: &mut R,
) -> Result<Vec<Vec<Doa>>> {
    (0..tracks.n_frames())
        .map(|f| {
            (0..r)
                .filter(|&row| !tracks.is_empty_cell(row, f))
                .map(|row| jitter(tracks.cell(row, f).0, angle_deg, rng))
                .collect()
        })
        .collect()
}

/// Random chunks with their split row drawn from `0..=N-2`.
pub fn build_localizer_batch<R: Rng + ?Sized>(
    scenes: &[TrainingScene],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<LocalizerSample>> {
    check_spec(scenes, spec)?;
    let r_max = spec.n_tracks.saturating_sub(2);
    (0..spec.batch_size)
        .map(|i| {
            let chunk = prepare_chunk(scenes, spec, i, rng)?;
            let r = rng.random_range(0..=r_max);
            let conditions = conditioning_rows(&chunk.tracks, r, spec.augment.angle_deg, rng)?;
            let targets = localizer_targets(&chunk.tracks, r);
            Ok(LocalizerSample {
                chunk,
                r,
                conditions,
                targets,
            })
        })
        .collect()
}

/// Random chunks with one row `r` from `0..=N-1` as both condition and
/// target.
pub fn build_classifier_batch<R: Rng + ?Sized>(
    scenes: &[TrainingScene],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<ClassifierSample>> {
    check_spec(scenes, spec)?;
    (0..spec.batch_size)
        .map(|i| {
            let chunk = prepare_chunk(scenes, spec, i, rng)?;
            let r = rng.random_range(0..spec.n_tracks);
            let tr = &chunk.tracks;
            let mut conditions = Vec::with_capacity(tr.n_frames());
            let mut targets = Vec::with_capacity(tr.n_frames());
            for f in 0..tr.n_frames() {
                let (d, c) = tr.cell(r, f);
                if tr.is_empty_cell(r, f) {
                    conditions.push(Vec::new());
                } else {
                    conditions.push(vec![jitter(d, spec.augment.angle_deg, rng)?]);
                }
                targets.push(c);
            }
            Ok(ClassifierSample {
                chunk,
                r,
                conditions,
                targets,
            })
        })
        .collect()
}

fn check_spec(scenes: &[TrainingScene], spec: &BatchSpec) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    if spec.batch_size == 0 || spec.chunk_frames == 0 || spec.n_tracks == 0 {
        return Err(Error::Config("batch size, chunk length and track count must be positive".into()));
    }
    Ok(())
}
