//! Flat experiment configuration: one TOML table, every key optional,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seld::audio::{WavFormat, SAMPLE_RATE};
use seld::features::{N_BINS, N_FEATURE_CHANNELS};
use seld::inference::InferenceMode;
use seld::metrics::{DOA_THRESHOLD_DEG, SEGMENT_FRAMES};
use seld::model::{Head, NetConfig};
use seld::scenes::SceneConfig;
use seld::training::{AdamConfig, AugmentConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Net,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavKind {
    Float32,
    Pcm16,
}

impl From<WavKind> for WavFormat {
    fn from(k: WavKind) -> Self {
        match k {
            WavKind::Float32 => WavFormat::Float32,
            WavKind::Pcm16 => WavFormat::Pcm16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub duration_s: f64,
    pub n_classes: usize,
    pub max_overlap: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_s: f64,
    pub max_event_s: f64,
    pub snr_db: f64,
    pub max_speed_deg_s: f64,
    pub min_separation_deg: f64,
    pub enforce_separation: bool,
    pub wav_format: WavKind,

    pub cond_channels: usize,
    pub input_freq_pool: usize,
    pub conv_filters: Vec<usize>,
    pub freq_pools: Vec<usize>,
    pub time_pools: Vec<usize>,
    pub gru_hidden: usize,
    pub bidirectional: bool,
    pub dense_hidden: usize,

    pub loc_steps: usize,
    pub cls_steps: usize,
    pub batch_size: usize,
    pub chunk_frames: usize,
    pub n_tracks: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub focal_gamma: f64,
    pub checkpoint_every: usize,
    pub scaler_scenes: usize,
    pub augment_volume: bool,
    pub augment_spatial: bool,
    pub augment_permute: bool,
    pub augment_angle_deg: f64,

    pub mode: InferenceMode,
    pub predictor: Predictor,
    pub threshold: f64,
    pub perturb_deg: f64,

    pub segment_frames: usize,
    pub doa_threshold_deg: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let net = NetConfig::desk_default(Head::Localizer);
        let adam = AdamConfig::default();
        let aug = AugmentConfig::default();
        Self {
            data_dir: "work/data".into(),
            cache_dir: "work/features".into(),
            checkpoint_dir: "work/checkpoints".into(),
            output_dir: "work/out".into(),
            seed: 2024,
            train_scenes: 160,
            eval_scenes: 40,
            duration_s: scene.duration_s,
            n_classes: scene.n_classes,
            max_overlap: scene.max_overlap,
            min_events: scene.min_events,
            max_events: scene.max_events,
            min_event_s: scene.min_event_s,
            max_event_s: scene.max_event_s,
            snr_db: scene.snr_db,
            max_speed_deg_s: scene.max_speed_deg_s,
            min_separation_deg: scene.min_separation_deg,
            enforce_separation: scene.enforce_separation,
            wav_format: WavKind::Float32,
            cond_channels: net.cond_channels,
            input_freq_pool: net.input_freq_pool,
            conv_filters: net.conv_filters,
            freq_pools: net.freq_pools,
            time_pools: net.time_pools,
            gru_hidden: net.gru_hidden,
            bidirectional: net.bidirectional,
            dense_hidden: net.dense_hidden,
            loc_steps: 3000,
            cls_steps: 3000,
            batch_size: 16,
            chunk_frames: 20,
            n_tracks: 3,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            focal_gamma: seld::training::FOCAL_GAMMA,
            checkpoint_every: 1000,
            scaler_scenes: 32,
            augment_volume: aug.volume,
            augment_spatial: aug.spatial,
            augment_permute: aug.permute_tracks,
            augment_angle_deg: aug.angle_deg,
            mode: InferenceMode::MaxOv3,
            predictor: Predictor::Net,
            threshold: seld::inference::DETECTION_THRESHOLD,
            perturb_deg: aug.angle_deg,
            segment_frames: SEGMENT_FRAMES,
            doa_threshold_deg: DOA_THRESHOLD_DEG,
        }
    }
}

/// `(key, description)` for every config key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "directory holding scene WAV/CSV pairs and manifest.json"),
    ("cache_dir", "directory holding cached feature tensors"),
    ("checkpoint_dir", "directory receiving localizer/ and classifier/ checkpoints"),
    ("output_dir", "directory receiving predictions, scores and reports"),
    ("seed", "master seed; every random stream derives from it"),
    ("train_scenes", "number of training scenes (indices 0..train_scenes)"),
    ("eval_scenes", "number of evaluation scenes following the training ones"),
    ("duration_s", "scene length in seconds, multiple of 0.1"),
    ("n_classes", "number of sound classes K"),
    ("max_overlap", "maximum simultaneous events in generated scenes"),
    ("min_events", "minimum events per scene"),
    ("max_events", "maximum events per scene"),
    ("min_event_s", "shortest event in seconds"),
    ("max_event_s", "longest event in seconds"),
    ("snr_db", "per-source SNR against diffuse noise; inf disables noise"),
    ("max_speed_deg_s", "maximum angular speed of moving sources"),
    ("min_separation_deg", "minimum angle between simultaneous sources"),
    ("enforce_separation", "reject placements closer than min_separation_deg"),
    ("wav_format", "float32 or pcm16"),
    ("cond_channels", "width c of the condition embedding"),
    ("input_freq_pool", "frequency bins averaged before the first conv block"),
    ("conv_filters", "filters per conv block"),
    ("freq_pools", "frequency max-pool per conv block"),
    ("time_pools", "time max-pool per conv block; product must be 5"),
    ("gru_hidden", "recurrent hidden size"),
    ("bidirectional", "run the recurrent layer in both directions"),
    ("dense_hidden", "width of the dense layer before the output head"),
    ("loc_steps", "localizer optimization steps"),
    ("cls_steps", "classifier optimization steps"),
    ("batch_size", "chunks per batch"),
    ("chunk_frames", "label frames per training chunk"),
    ("n_tracks", "stacked track rows N"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("focal_gamma", "focal loss exponent"),
    ("checkpoint_every", "steps between periodic checkpoints; 0 disables"),
    ("scaler_scenes", "training scenes used to fit the input scaler"),
    ("augment_volume", "random gain on training chunks"),
    ("augment_spatial", "axis-aligned FOA rotations/reflections on a quarter of each batch"),
    ("augment_permute", "shuffle track rows before re-stacking"),
    ("augment_angle_deg", "half-width of conditioning DOA jitter"),
    ("mode", "max_ov2 or max_ov3: localization steps at inference"),
    ("predictor", "net or oracle (annotations stand in for both nets)"),
    ("threshold", "minimum output norm counted as a detection"),
    ("perturb_deg", "half-width of inference-time conditioning jitter; 0 turns it off"),
    ("segment_frames", "label frames per scoring segment"),
    ("doa_threshold_deg", "spatial gate for a true positive"),
];

pub fn keys_help() -> String {
    let d = toml::Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut s = String::from("CONFIG KEYS (flat TOML; override with --set key=value):\n");
    for (k, desc) in KEYS {
        let default = d.get(*k).map_or_else(String::new, |v| v.to_string());
        s.push_str(&format!("  {k:<20} {desc} [default: {default}]\n"));
    }
    s
}

/// Parses `key=value`; the value is read as a TOML literal and falls back
/// to a bare string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').with_context(|| format!("override {s:?} is not key=value"))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

impl ExperimentConfig {
    /// File (if any) then overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.net_config(Head::Localizer).validate()?;
        if self.n_tracks == 0 || self.batch_size == 0 || self.chunk_frames == 0 {
            bail!("n_tracks, batch_size and chunk_frames must be positive");
        }
        if self.segment_frames == 0 {
            bail!("segment_frames must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!("Adam settings out of range");
        }
        if self.chunk_frames > self.scene_config().n_frames() {
            bail!("chunk_frames exceeds the scene length");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config as `config.toml` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.eval_scenes
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            duration_s: self.duration_s,
            sample_rate: SAMPLE_RATE,
            n_classes: self.n_classes,
            max_overlap: self.max_overlap,
            min_events: self.min_events,
            max_events: self.max_events,
            min_event_s: self.min_event_s,
            max_event_s: self.max_event_s,
            snr_db: self.snr_db,
            max_speed_deg_s: self.max_speed_deg_s,
            min_separation_deg: self.min_separation_deg,
            enforce_separation: self.enforce_separation,
        }
    }

    pub fn net_config(&self, head: Head) -> NetConfig {
        NetConfig {
            head,
            feature_channels: N_FEATURE_CHANNELS,
            bins: N_BINS,
            cond_channels: self.cond_channels,
            input_freq_pool: self.input_freq_pool,
            conv_filters: self.conv_filters.clone(),
            freq_pools: self.freq_pools.clone(),
            time_pools: self.time_pools.clone(),
            gru_hidden: self.gru_hidden,
            bidirectional: self.bidirectional,
            dense_hidden: self.dense_hidden,
        }
    }

    pub fn train_config(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            chunk_frames: self.chunk_frames,
            n_tracks: self.n_tracks,
            n_classes: self.n_classes,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            focal_gamma: self.focal_gamma,
            checkpoint_every: self.checkpoint_every,
            scaler_scenes: self.scaler_scenes,
            augment: AugmentConfig {
                volume: self.augment_volume,
                spatial: self.augment_spatial,
                permute_tracks: self.augment_permute,
                angle_deg: self.augment_angle_deg,
            },
            net: self.net_config(Head::Localizer),
        }
    }
}
