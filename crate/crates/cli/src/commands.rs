//! The pipeline stages behind each subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use seld::features::{FeatureTensor, FRAMES_PER_LABEL, N_FEATURE_CHANNELS};
use seld::inference::{
    load_pipeline_nets, read_predictions, run_pipeline, write_predictions, ClassifierPredictor, InferenceMode,
    LocalizerPredictor, OracleClassifier, OracleLocalizer, SeldOutput, SsgOptions,
};
use seld::metrics::{
    conditional_accuracy_scene, doa_error_table_scene, format_scores_csv, format_scores_table, ClassifierTally,
    DoaErrorTable, SeldAccumulator, SeldScores,
};
use seld::model::ConditionedNet;
use seld::scenes::scene_rng;
use seld::training::{train, write_loss_csv, Component, TrainingScene};

use crate::config::{ExperimentConfig, Predictor};
use crate::dataset::{load_features, read_events, read_truth, DatasetManifest, FeatureManifest, SceneEntry, Split};
use crate::par_map;

/// Offset separating inference-time jitter streams from scene streams.
const INFER_STREAM_SALT: u64 = 0x5eed_0001;

pub fn checkpoint_path(cfg: &ExperimentConfig, component: Component) -> PathBuf {
    cfg.checkpoint_dir.join(component.name())
}

pub fn prediction_dir(cfg: &ExperimentConfig, mode: InferenceMode) -> PathBuf {
    cfg.output_dir.join(format!("pred_{}", mode.name()))
}

/// Trains one component on the training split and writes its checkpoint
/// and `loss.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, component: Component) -> Result<PathBuf> {
    let data = DatasetManifest::read(&cfg.data_dir)?;
    let feats = FeatureManifest::read(&cfg.cache_dir)?;
    let entries: Vec<&SceneEntry> = data.split(Split::Train).collect();
    let scenes = par_map(&entries, |e| -> Result<TrainingScene> {
        Ok(TrainingScene {
            features: load_features(cfg, &feats, &e.name)?,
            events: read_events(cfg, e)?,
            n_frames: e.n_frames,
        })
    })?;
    let steps = match component {
        Component::Localizer => cfg.loc_steps,
        Component::Classifier => cfg.cls_steps,
    };
    let dir = checkpoint_path(cfg, component);
    std::fs::create_dir_all(&dir)?;
    eprintln!("training {} on {} scenes for {steps} steps", component.name(), scenes.len());
    let log_every = (steps / 20).max(1);
    let started = std::time::Instant::now();
    let outcome = train(component, &scenes, &cfg.train_config(steps), Some(&dir), |step, loss| {
        if step % log_every == 0 || step == steps {
            eprintln!("  step {step:>6}  loss {loss:.5}  ({:.0} s)", started.elapsed().as_secs_f64());
        }
    })
    .with_context(|| format!("training {}", component.name()))?;
    write_loss_csv(&dir.join("loss.csv"), &outcome.curve)?;
    cfg.echo(&dir)?;
    Ok(dir)
}

/// Features for a scene, or a zero placeholder of the right length when the
/// oracle predictors make them irrelevant.
fn scene_features(cfg: &ExperimentConfig, feats: &FeatureManifest, e: &SceneEntry) -> Result<FeatureTensor> {
    match cfg.predictor {
        Predictor::Net => load_features(cfg, feats, &e.name),
        Predictor::Oracle => Ok(FeatureTensor::zeros(N_FEATURE_CHANNELS, e.n_frames * FRAMES_PER_LABEL, 1)),
    }
}

type Predictors = (Box<dyn LocalizerPredictor>, Box<dyn ClassifierPredictor>);

enum PredictorSource {
    Nets(ConditionedNet<f32>, ConditionedNet<f32>),
    Oracle,
}

impl PredictorSource {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.predictor {
            Predictor::Net => {
                let (l, c) = load_pipeline_nets(
                    &checkpoint_path(cfg, Component::Localizer),
                    &checkpoint_path(cfg, Component::Classifier),
                )?;
                PredictorSource::Nets(l, c)
            }
            Predictor::Oracle => PredictorSource::Oracle,
        })
    }

    fn for_scene(&self, cfg: &ExperimentConfig, e: &SceneEntry) -> Result<Predictors> {
        Ok(match self {
            PredictorSource::Nets(l, c) => (Box::new(l.clone()), Box::new(c.clone())),
            PredictorSource::Oracle => {
                let truth = read_truth(cfg, e)?;
                (Box::new(OracleLocalizer { truth: truth.clone() }), Box::new(OracleClassifier::new(truth)))
            }
        })
    }
}

/// Runs the pipeline on every evaluation scene and writes one prediction
/// CSV per scene under `pred_<mode>/`.
pub fn cmd_infer(cfg: &ExperimentConfig, mode: InferenceMode) -> Result<PathBuf> {
    let data = DatasetManifest::read(&cfg.data_dir)?;
    let feats = FeatureManifest::read(&cfg.cache_dir)?;
    let source = PredictorSource::open(cfg)?;
    let out_dir = prediction_dir(cfg, mode);
    std::fs::create_dir_all(&out_dir)?;
    let entries: Vec<&SceneEntry> = data.split(Split::Eval).collect();
    let counts = par_map(&entries, |e| -> Result<usize> {
        let features = scene_features(cfg, &feats, e)?;
        let (mut loc, mut cls) = source.for_scene(cfg, e)?;
        let mut opts = SsgOptions {
            threshold: cfg.threshold,
            perturb_deg: cfg.perturb_deg,
            rng: (cfg.perturb_deg > 0.0).then(|| scene_rng(cfg.seed.wrapping_add(INFER_STREAM_SALT), e.index as u64)),
        };
        let out = run_pipeline(loc.as_mut(), cls.as_mut(), &features, mode, &mut opts)?;
        write_predictions(&out, &out_dir.join(format!("{}.csv", e.name)))?;
        Ok(out.frames.iter().map(Vec::len).sum())
    })?;
    eprintln!(
        "{}: {} detections over {} scenes -> {}",
        mode.name(),
        counts.iter().sum::<usize>(),
        entries.len(),
        out_dir.display()
    );
    cfg.echo(&cfg.output_dir)?;
    Ok(out_dir)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scores: SeldScores,
    pub table: Option<DoaErrorTable>,
    pub tally: Option<ClassifierTally>,
}

/// Scores predictions against the annotations. Unless `scores_only`, also
/// measures per-step DOA error and conditional accuracy with the configured
/// predictors.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    mode: InferenceMode,
    pred_dir: Option<&Path>,
    scores_only: bool,
) -> Result<EvalReport> {
    let data = DatasetManifest::read(&cfg.data_dir)?;
    let pred_dir = pred_dir.map_or_else(|| prediction_dir(cfg, mode), Path::to_path_buf);
    let entries: Vec<&SceneEntry> = data.split(Split::Eval).collect();
    let boards = par_map(&entries, |e| -> Result<SeldAccumulator> {
        let reference = SeldOutput::from_events(&read_events(cfg, e)?, e.n_frames, cfg.n_classes)?;
        let p = pred_dir.join(format!("{}.csv", e.name));
        let pred = read_predictions(&p, e.n_frames, cfg.n_classes).with_context(|| format!("reading {}", p.display()))?;
        let mut acc = SeldAccumulator::with_params(cfg.n_classes, cfg.segment_frames, cfg.doa_threshold_deg);
        acc.add(&pred, &reference)?;
        Ok(acc)
    })?;
    let mut board = SeldAccumulator::with_params(cfg.n_classes, cfg.segment_frames, cfg.doa_threshold_deg);
    for b in &boards {
        board.merge(b)?;
    }
    let scores = board.scores();
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join(format!("scores_{}.csv", mode.name())), format_scores_csv(&scores))?;
    println!("{}", format_scores_table(&[(mode.name(), scores)]));

    let (table, tally) = if scores_only {
        (None, None)
    } else {
        let (t, c) = step_metrics(cfg, &data)?;
        (Some(t), Some(c))
    };
    cfg.echo(&cfg.output_dir)?;
    Ok(EvalReport { scores, table, tally })
}

/// DOA error by (noas, cond) and conditional accuracy on the evaluation split.
pub fn step_metrics(cfg: &ExperimentConfig, data: &DatasetManifest) -> Result<(DoaErrorTable, ClassifierTally)> {
    let feats = FeatureManifest::read(&cfg.cache_dir)?;
    let source = PredictorSource::open(cfg)?;
    let entries: Vec<&SceneEntry> = data.split(Split::Eval).collect();
    let parts = par_map(&entries, |e| -> Result<(DoaErrorTable, ClassifierTally)> {
        let features = scene_features(cfg, &feats, e)?;
        let truth = read_truth(cfg, e)?;
        let (mut loc, mut cls) = source.for_scene(cfg, e)?;
        Ok((
            doa_error_table_scene(loc.as_mut(), &features, &truth)?,
            conditional_accuracy_scene(cls.as_mut(), &features, &truth)?,
        ))
    })?;
    let mut table = DoaErrorTable::new(cfg.n_tracks);
    let mut tally = ClassifierTally::default();
    for (t, c) in &parts {
        table.merge(t)?;
        tally.merge(c);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("doa_errors.csv"), table.to_csv())?;
    std::fs::write(
        cfg.output_dir.join("cacc.csv"),
        format!(
            "metric,value\ncacc,{}\nmiss_rate,{}\nfalse_alarm_rate,{}\n",
            tally.accuracy(),
            tally.miss_rate(),
            tally.false_alarm_rate()
        ),
    )?;
    println!("DOA error (mean degrees):\n{}", table.format_table());
    println!(
        "conditional accuracy {:.1}%  (misses {:.1}%, false alarms {:.1}%)",
        100.0 * tally.accuracy(),
        100.0 * tally.miss_rate(),
        100.0 * tally.false_alarm_rate()
    );
    Ok((table, tally))
}

/// Every stage in order; inference and scoring run in both modes.
pub fn cmd_run_all(cfg: &ExperimentConfig) -> Result<Vec<(InferenceMode, SeldScores)>> {
    let m = crate::dataset::synth(cfg)?;
    eprintln!("synthesized {} scenes into {}", m.scenes.len(), cfg.data_dir.display());
    if cfg.predictor == Predictor::Net {
        report_cache(&crate::dataset::build_features(cfg, false)?);
        cmd_train(cfg, Component::Localizer)?;
        cmd_train(cfg, Component::Classifier)?;
    }
    let mut rows = Vec::new();
    for mode in [InferenceMode::MaxOv2, InferenceMode::MaxOv3] {
        cmd_infer(cfg, mode)?;
        let r = cmd_eval(cfg, mode, None, mode == InferenceMode::MaxOv2)?;
        rows.push((mode, r.scores));
    }
    let named: Vec<(&str, SeldScores)> = rows.iter().map(|(m, s)| (m.name(), *s)).collect();
    println!("{}", format_scores_table(&named));
    Ok(rows)
}

pub fn report_cache(results: &[(String, crate::dataset::CacheStatus)]) {
    for (name, st) in results {
        if *st == crate::dataset::CacheStatus::Hit {
            eprintln!("cache hit: {name}, skipping");
        }
    }
    let built = results.iter().filter(|(_, s)| *s == crate::dataset::CacheStatus::Built).count();
    eprintln!("features: {built} built, {} cached", results.len() - built);
}
