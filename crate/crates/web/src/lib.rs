//! Browser demo. Each export takes plain numbers and returns a JSON string
//! that the page renders; the logic lives in ordinary functions so it is
//! testable natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use seld::audio::{FoaAudio, SAMPLE_RATE};
use seld::features::{assemble_features, intensity_doa, FRAMES_PER_LABEL};
use seld::geometry::{angular_distance, azel_to_doa, doa_to_azel, AzEl, Doa};
use seld::inference::{ssg_localize, OracleLocalizer, SsgOptions};
use seld::scenes::{encode_foa, generate_scene, mix_into, synth_class_signal, SceneConfig};
use seld::tracks::{example_tracks_raw, permute_and_restack, stack_tracks, FrameEvent, StackedTracks};

#[derive(Serialize)]
struct Cell {
    class: Option<usize>,
    azimuth: f64,
    elevation: f64,
}

fn cells(st: &StackedTracks) -> Vec<Vec<Cell>> {
    (0..st.n_tracks())
        .map(|r| {
            (0..st.n_frames())
                .map(|f| {
                    let (d, c) = st.cell(r, f);
                    let a = doa_to_azel(d).unwrap_or(AzEl::new(0.0, 0.0));
                    Cell {
                        class: (c < st.n_classes()).then_some(c),
                        azimuth: a.azimuth,
                        elevation: a.elevation,
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct StackView {
    events: Vec<(usize, usize, usize)>,
    stacked: Vec<Vec<Cell>>,
    permuted: Vec<Vec<Cell>>,
}

/// The eight-frame five-track example: raw `(frame, track, class)` events,
/// their stacked form, and a seeded row permutation re-stacked.
pub fn stack_example_json(perm_seed: u64) -> String {
    let events: Vec<FrameEvent> = example_tracks_raw()
        .into_iter()
        .map(|e| FrameEvent {
            doa: e.doa.normalized().expect("example DOAs are nonzero"),
            ..e
        })
        .collect();
    let st = stack_tracks(&events, 3, 8, 13).expect("example fits");
    let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
    let view = StackView {
        events: events.iter().map(|e| (e.frame, e.track_id, e.class_id)).collect(),
        stacked: cells(&st),
        permuted: cells(&permute_and_restack(&st, &mut rng)),
    };
    serde_json::to_string(&view).expect("serializable")
}

#[derive(Serialize)]
struct IntensityView {
    azimuth: f64,
    elevation: f64,
    /// Per label frame: `[azimuth, elevation, error_deg]`.
    frames: Vec<[f64; 3]>,
    mean_error_deg: f64,
}

/// One second of a single class-0 source at `(azimuth, elevation)` with
/// independent per-channel noise at `snr_db`, localized per label frame
/// from the power-weighted intensity features.
pub fn intensity_json(azimuth: f64, elevation: f64, snr_db: f64, seed: u64) -> Result<String, String> {
    let truth = azel_to_doa(AzEl::new(azimuth, elevation.clamp(-90.0, 90.0))).map_err(|e| e.to_string())?;
    let n = SAMPLE_RATE as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig = synth_class_signal(0, n, SAMPLE_RATE, &mut rng);
    let enc = encode_foa(&sig.waveform, &vec![truth; n]).map_err(|e| e.to_string())?;
    let mut audio = FoaAudio::silent(SAMPLE_RATE, n);
    mix_into(&mut audio, 0, &enc, 0.1);
    if snr_db.is_finite() {
        let sigma = 0.1 * 10f64.powf(-snr_db / 20.0);
        for ch in &mut audio.channels {
            for v in ch.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += (sigma * z) as f32;
            }
        }
    }
    let feat = assemble_features(&audio).map_err(|e| e.to_string())?;
    let labels = feat.frames / FRAMES_PER_LABEL;
    let mut frames = Vec::with_capacity(labels);
    for t in 0..labels {
        let est = intensity_doa(&feat, t * FRAMES_PER_LABEL, (t + 1) * FRAMES_PER_LABEL).unwrap_or(Doa::ORIGIN);
        let a = doa_to_azel(est).unwrap_or(AzEl::new(0.0, 0.0));
        let err = angular_distance(est, truth).unwrap_or(90.0);
        frames.push([a.azimuth, a.elevation, err]);
    }
    let mean_error_deg = frames.iter().map(|f| f[2]).sum::<f64>() / frames.len().max(1) as f64;
    Ok(serde_json::to_string(&IntensityView {
        azimuth,
        elevation,
        frames,
        mean_error_deg,
    })
    .expect("serializable"))
}

#[derive(Serialize)]
struct SsgView {
    n_frames: usize,
    truth: Vec<Vec<Cell>>,
    /// `steps[s][f]`: `[azimuth, elevation]` found at step `s`, or null.
    steps: Vec<Vec<Option<[f64; 2]>>>,
    true_counts: Vec<usize>,
    found_counts: Vec<usize>,
}

/// Generates a scene and runs the sequential loop with a ground-truth
/// localizer, showing what each step adds.
pub fn oracle_ssg_json(seed: u64, max_overlap: usize, steps: usize) -> Result<String, String> {
    let cfg = SceneConfig {
        duration_s: 3.0,
        n_classes: 4,
        max_overlap: max_overlap.clamp(1, 3),
        max_events: 4,
        snr_db: f64::INFINITY,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_scene(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let truth = stack_tracks(&scene.events, 3, scene.n_frames, cfg.n_classes).map_err(|e| e.to_string())?;
    // the oracle never reads features, so a blank tensor of the right length suffices
    let blank = seld::features::FeatureTensor::zeros(
        seld::features::N_FEATURE_CHANNELS,
        scene.n_frames * FRAMES_PER_LABEL,
        1,
    );
    let steps = steps.clamp(1, 3);
    let found = ssg_localize(
        &mut OracleLocalizer { truth: truth.clone() },
        &blank,
        steps,
        &mut SsgOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let view = SsgView {
        n_frames: scene.n_frames,
        truth: cells(&truth),
        steps: (0..steps)
            .map(|s| {
                (0..scene.n_frames)
                    .map(|f| {
                        let d = found.get(s, f);
                        (!d.is_origin()).then(|| {
                            let a = doa_to_azel(d).unwrap_or(AzEl::new(0.0, 0.0));
                            [a.azimuth, a.elevation]
                        })
                    })
                    .collect()
            })
            .collect(),
        true_counts: (0..scene.n_frames).map(|f| truth.occupancy(f)).collect(),
        found_counts: (0..scene.n_frames).map(|f| found.occupancy(f)).collect(),
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[wasm_bindgen]
pub fn stack_example(perm_seed: u32) -> String {
    stack_example_json(perm_seed as u64)
}

#[wasm_bindgen]
pub fn intensity(azimuth: f64, elevation: f64, snr_db: f64, seed: u32) -> Result<String, JsError> {
    intensity_json(azimuth, elevation, snr_db, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn oracle_ssg(seed: u32, max_overlap: u32, steps: u32) -> Result<String, JsError> {
    oracle_ssg_json(seed as u64, max_overlap as usize, steps as usize).map_err(|e| JsError::new(&e))
}
