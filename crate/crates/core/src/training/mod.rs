//! Losses, batch assembly, optimizer and the training loop for both
//! predictors.

mod adam;
mod batch;
mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, FromF64};
pub use batch::{
    build_classifier_batch, build_localizer_batch, conditioning_rows, AugmentConfig, BatchSpec,
    ClassifierSample, LocalizerSample, PreparedChunk, TrainingScene,
};
pub use loss::{
    bucket_coefficient, bucket_count, classifier_batch_loss, focal_loss, focal_loss_grad,
    localizer_batch_loss, localizer_frame_loss, localizer_frame_loss_grad, localizer_targets,
    BatchLoss, BucketStat, FrameTarget, LossBucket, FOCAL_GAMMA, FOCAL_PROB_FLOOR, LOCALIZER_NORM_P,
};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ConditionedNet, Head, InputScaler, NetConfig, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Localizer,
    Classifier,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Localizer => "localizer",
            Component::Classifier => "classifier",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Component::Localizer => 1,
            Component::Classifier => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub chunk_frames: usize,
    pub n_tracks: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub focal_gamma: f64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Scenes used to fit the input scaler.
    pub scaler_scenes: usize,
    pub augment: AugmentConfig,
    pub net: NetConfig,
}

impl TrainConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            chunk_frames: self.chunk_frames,
            n_tracks: self.n_tracks,
            n_classes: self.n_classes,
            augment: self.augment,
        }
    }

    /// Net config with the head this component needs.
    pub fn net_for(&self, component: Component) -> NetConfig {
        let head = match component {
            Component::Localizer => Head::Localizer,
            Component::Classifier => Head::Classifier {
                n_classes: self.n_classes,
            },
        };
        NetConfig {
            head,
            ..self.net.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub bucket: String,
    pub loss: f64,
}

pub fn format_loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,bucket,loss\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.step, r.bucket, r.loss);
    }
    s
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    std::fs::write(path, format_loss_csv(records))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ConditionedNet<f32>,
    pub curve: Vec<LossRecord>,
}

fn par_map<T, O, F>(items: &[T], f: F) -> Result<Vec<O>>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Fresh net with a scaler fitted on the first scenes' features.
pub fn init_net(component: Component, scenes: &[TrainingScene], cfg: &TrainConfig) -> Result<ConditionedNet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(component.stream());
    let mut net = ConditionedNet::new(cfg.net_for(component), &mut rng)?;
    let n = cfg.scaler_scenes.min(scenes.len());
    if n > 0 {
        net.scaler = InputScaler::fit(scenes[..n].iter().map(|s| &s.features))?;
    }
    Ok(net)
}

/// Runs forward passes, evaluates the batch loss and returns
/// `(loss, summed gradient, per-bucket stats)`.
fn batch_gradient<T: Sync>(
    net: &ConditionedNet<f32>,
    items: &[T],
    forward: impl Fn(&T) -> Result<Tape<f32>> + Sync + Send,
    loss: impl FnOnce(&[Vec<f64>]) -> BatchLoss,
) -> Result<(BatchLoss, Vec<f32>)> {
    let tapes = par_map(items, forward)?;
    let outputs: Vec<Vec<f64>> = tapes
        .iter()
        .map(|t| t.output().data.iter().map(|&v| v as f64).collect())
        .collect();
    let bl = loss(&outputs);
    let pairs: Vec<(&Tape<f32>, Vec<f32>)> = tapes
        .iter()
        .zip(&bl.grads)
        .map(|(t, g)| (t, g.iter().map(|&v| v as f32).collect()))
        .collect();
    let grads = par_map(&pairs, |(t, g)| net.backward(t, g))?;
    // fixed-order reduction keeps the sum independent of thread scheduling
    let mut total = vec![0.0f32; net.n_params()];
    for g in &grads {
        total.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((bl, total))
}

/// One optimization step on a fresh batch. Returns the batch loss.
pub fn train_step(
    component: Component,
    net: &mut ConditionedNet<f32>,
    adam: &mut AdamState,
    scenes: &[TrainingScene],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let spec = cfg.batch_spec();
    let (bl, grads) = match component {
        Component::Localizer => {
            let batch = build_localizer_batch(scenes, &spec, rng)?;
            let targets: Vec<&[FrameTarget]> = batch.iter().map(|s| s.targets.as_slice()).collect();
            batch_gradient(
                net,
                &batch,
                |s| net.forward(&s.chunk.features, &s.conditions),
                |out| localizer_batch_loss(&targets, out, cfg.n_tracks),
            )?
        }
        Component::Classifier => {
            let batch = build_classifier_batch(scenes, &spec, rng)?;
            let targets: Vec<&[usize]> = batch.iter().map(|s| s.targets.as_slice()).collect();
            let width = cfg.n_classes + 1;
            batch_gradient(
                net,
                &batch,
                |s| net.forward(&s.chunk.features, &s.conditions),
                |out| classifier_batch_loss(&targets, out, width, cfg.focal_gamma),
            )?
        }
    };
    if !bl.total.is_finite() {
        return Err(Error::NonFiniteGradient(format!("batch loss {}", bl.total)));
    }
    adam.update(&mut net.params.values, &grads)?;
    Ok(bl)
}

fn meta(component: Component, cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({
        "component": component.name(),
        "step": step,
        "seed": cfg.seed,
    })
}

/// Trains one component from scratch. With `checkpoint_dir` set, writes
/// periodic checkpoints under `periodic/` and the final one into the
/// directory itself. `on_step` sees every step's batch loss.
pub fn train(
    component: Component,
    scenes: &[TrainingScene],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut net = init_net(component, scenes, cfg)?;
    let mut adam = AdamState::new(net.n_params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10 + component.stream());
    let mut curve = Vec::new();
    for step in 1..=cfg.steps {
        let before = net.clone();
        let bl = match train_step(component, &mut net, &mut adam, scenes, cfg, &mut rng) {
            Ok(bl) => bl,
            Err(Error::NonFiniteGradient(_)) => {
                let checkpoint = match checkpoint_dir {
                    Some(dir) => {
                        let p = dir.join("last_good");
                        save_checkpoint(&before, &p, meta(component, cfg, step - 1))?;
                        p
                    }
                    None => PathBuf::new(),
                };
                return Err(Error::Diverged { step, checkpoint });
            }
            Err(e) => return Err(e),
        };
        for b in &bl.buckets {
            curve.push(LossRecord {
                step,
                bucket: b.bucket.label(),
                loss: b.mean,
            });
        }
        curve.push(LossRecord {
            step,
            bucket: "total".into(),
            loss: bl.total,
        });
        on_step(step, bl.total);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                save_checkpoint(&net, &dir.join("periodic").join(format!("step_{step:06}")), meta(component, cfg, step))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&net, dir, meta(component, cfg, cfg.steps))?;
    }
    Ok(TrainOutcome { net, curve })
}

#[cfg(test)]
mod tests;
