//! On-disk layout: scene WAV/CSV pairs with a manifest, and a feature
//! cache keyed by the source WAV's checksum.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seld::audio::{read_wav, write_wav};
use seld::features::{assemble_features, FeatureTensor};
use seld::scenes::{generate_scene, scene_rng};
use seld::tensor_io::{decode_tensor, encode_tensor, sha256_hex};
use seld::tracks::{format_meta, read_meta_csv, stack_tracks, FrameEvent, StackedTracks};

use crate::config::ExperimentConfig;
use crate::par_map;

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const FEATURE_MANIFEST: &str = "features.json";

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub name: String,
    pub split: Split,
    pub n_frames: usize,
    pub wav_sha256: String,
    pub meta_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    /// Scene `i` draws from stream `i` of the master seed.
    pub scene_config: seld::scenes::SceneConfig,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&p).with_context(|| format!("missing dataset manifest {}", p.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |s| s.split == split)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Generates every scene and writes `scene_XXXX.wav`, `scene_XXXX.csv`
/// and the manifest.
pub fn synth(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let dir = &cfg.data_dir;
    std::fs::create_dir_all(dir)?;
    let scene_cfg = cfg.scene_config();
    let indices: Vec<usize> = (0..cfg.total_scenes()).collect();
    let scenes = par_map(&indices, |&i| -> Result<SceneEntry> {
        let mut rng = scene_rng(cfg.seed, i as u64);
        let scene = generate_scene(&scene_cfg, &mut rng).with_context(|| format!("generating scene {i}"))?;
        let name = scene_name(i);
        let wav = dir.join(format!("{name}.wav"));
        write_wav(&wav, &scene.audio, cfg.wav_format.into())?;
        let meta = format_meta(&scene.events)?;
        std::fs::write(dir.join(format!("{name}.csv")), &meta)?;
        Ok(SceneEntry {
            index: i,
            name,
            split: if i < cfg.train_scenes { Split::Train } else { Split::Eval },
            n_frames: scene.n_frames,
            wav_sha256: sha256_hex(&std::fs::read(&wav)?),
            meta_sha256: sha256_hex(meta.as_bytes()),
        })
    })?;
    let manifest = DatasetManifest {
        master_seed: cfg.seed,
        scene_config: scene_cfg,
        scenes,
    };
    write_atomic(&dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    cfg.echo(dir)?;
    Ok(manifest)
}

pub fn read_events(cfg: &ExperimentConfig, entry: &SceneEntry) -> Result<Vec<FrameEvent>> {
    let p = cfg.data_dir.join(format!("{}.csv", entry.name));
    Ok(read_meta_csv(&p, cfg.n_classes).with_context(|| format!("reading {}", p.display()))?)
}

pub fn read_truth(cfg: &ExperimentConfig, entry: &SceneEntry) -> Result<StackedTracks> {
    Ok(stack_tracks(&read_events(cfg, entry)?, cfg.n_tracks, entry.n_frames, cfg.n_classes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub source_wav_sha256: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub entries: Vec<FeatureEntry>,
}

impl FeatureManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(FEATURE_MANIFEST);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?)
    }

    fn find(&self, name: &str) -> Option<&FeatureEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn feature_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.cache_dir.join(format!("{name}.ten"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
}

/// Computes the feature tensor of every scene not already cached. A cached
/// file whose bytes do not match the recorded checksum is an error unless
/// `force` rebuilds it.
pub fn build_features(cfg: &ExperimentConfig, force: bool) -> Result<Vec<(String, CacheStatus)>> {
    let data = DatasetManifest::read(&cfg.data_dir)?;
    std::fs::create_dir_all(&cfg.cache_dir)?;
    let old = FeatureManifest::read(&cfg.cache_dir)?;
    let results = par_map(&data.scenes, |s| -> Result<(FeatureEntry, CacheStatus)> {
        let path = feature_path(cfg, &s.name);
        if !force {
            if let Some(e) = old.find(&s.name).filter(|e| e.source_wav_sha256 == s.wav_sha256) {
                if path.exists() {
                    let bytes = std::fs::read(&path)?;
                    if sha256_hex(&bytes) != e.sha256 {
                        bail!(seld::Error::Checksum(path));
                    }
                    return Ok((e.clone(), CacheStatus::Hit));
                }
            }
        }
        let wav = cfg.data_dir.join(format!("{}.wav", s.name));
        let wav_bytes = std::fs::read(&wav).with_context(|| format!("missing scene {}", wav.display()))?;
        if sha256_hex(&wav_bytes) != s.wav_sha256 {
            bail!(seld::Error::Checksum(wav));
        }
        let audio = read_wav(&wav)?;
        let feat = assemble_features(&audio)?;
        let bytes = encode_tensor(&feat.dims(), &feat.data)?;
        write_atomic(&path, &bytes)?;
        Ok((
            FeatureEntry {
                name: s.name.clone(),
                source_wav_sha256: s.wav_sha256.clone(),
                sha256: sha256_hex(&bytes),
            },
            CacheStatus::Built,
        ))
    })?;
    let manifest = FeatureManifest {
        entries: results.iter().map(|(e, _)| e.clone()).collect(),
    };
    write_atomic(&cfg.cache_dir.join(FEATURE_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    cfg.echo(&cfg.cache_dir)?;
    Ok(results.into_iter().map(|(e, st)| (e.name, st)).collect())
}

/// Reads a cached tensor, verifying its checksum against the cache manifest.
pub fn load_features(cfg: &ExperimentConfig, manifest: &FeatureManifest, name: &str) -> Result<FeatureTensor> {
    let path = feature_path(cfg, name);
    let entry = manifest
        .find(name)
        .with_context(|| format!("no cached features for {name}; run `seld features` first"))?;
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if sha256_hex(&bytes) != entry.sha256 {
        bail!(seld::Error::Checksum(path));
    }
    let raw = decode_tensor(&bytes, &path)?;
    Ok(FeatureTensor::from_raw(&raw.dims, raw.data)?)
}
