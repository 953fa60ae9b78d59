//! Sequential localization loop, per-row classification and the
//! predictors they run on.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::geometry::{angular_distance, perturb_doa, Doa};
use crate::model::{load_checkpoint, ConditionedNet, Head};
use crate::tracks::{format_meta, parse_meta, FrameEvent, StackedTracks};

/// Euclidean length above which a localizer output counts as a detection.
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Produces one 3-vector per label frame given conditioning DOA sets.
pub trait LocalizerPredictor {
    fn predict_doas(&mut self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>>;
}

/// Produces one `(K+1)`-simplex per label frame given at most one
/// conditioning DOA per frame.
pub trait ClassifierPredictor {
    fn n_classes(&self) -> usize;
    fn predict_probs(&mut self, features: &FeatureTensor, conditions: &[Option<Doa>]) -> Result<Vec<Vec<f64>>>;
}

fn check_len<T>(v: &[T], frames: usize) -> Result<()> {
    if v.len() != frames {
        return Err(Error::Shape(format!(
            "predictor returned {} frames, expected {frames}",
            v.len()
        )));
    }
    Ok(())
}

impl LocalizerPredictor for ConditionedNet<f32> {
    fn predict_doas(&mut self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>> {
        if self.config().head != Head::Localizer {
            return Err(Error::Shape("net does not have a localizer head".into()));
        }
        let out = self.predict(features, conditions)?;
        Ok((0..out.frames)
            .map(|t| {
                let r = out.row(t);
                [r[0] as f64, r[1] as f64, r[2] as f64]
            })
            .collect())
    }
}

impl ClassifierPredictor for ConditionedNet<f32> {
    fn n_classes(&self) -> usize {
        self.config().head.width() - 1
    }

    fn predict_probs(&mut self, features: &FeatureTensor, conditions: &[Option<Doa>]) -> Result<Vec<Vec<f64>>> {
        if self.config().head == Head::Localizer {
            return Err(Error::Shape("net does not have a classifier head".into()));
        }
        let sets: Vec<Vec<Doa>> = conditions.iter().map(|c| c.iter().copied().collect()).collect();
        let out = self.predict(features, &sets)?;
        Ok((0..out.frames)
            .map(|t| out.row(t).iter().map(|&v| v as f64).collect())
            .collect())
    }
}

/// Ground-truth DOAs minus the conditioning set. Each conditioning DOA
/// cancels its nearest remaining truth, so jittered conditions still work.
fn unconditioned(truth: &[Doa], cond: &[Doa]) -> Vec<Doa> {
    let mut left: Vec<Doa> = truth.to_vec();
    for c in cond {
        let nearest = left
            .iter()
            .enumerate()
            .map(|(i, t)| (i, angular_distance(*t, *c).unwrap_or(f64::INFINITY)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            left.remove(i);
        }
    }
    left
}

/// Answers from the annotations: the lowest-row truth not yet in the
/// conditioning set, or the origin when none remain.
#[derive(Debug, Clone)]
pub struct OracleLocalizer {
    pub truth: StackedTracks,
}

impl LocalizerPredictor for OracleLocalizer {
    fn predict_doas(&mut self, _features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>> {
        check_len(conditions, self.truth.n_frames())?;
        Ok(conditions
            .iter()
            .enumerate()
            .map(|(f, cond)| {
                unconditioned(&self.truth.frame_doas(f), cond)
                    .first()
                    .map_or([0.0; 3], |d| d.to_array())
            })
            .collect())
    }
}

/// Oracle answers displaced by isotropic Gaussian noise of `sigma_deg`
/// per tangent axis, then renormalized.
#[derive(Debug, Clone)]
pub struct NoisyOracleLocalizer {
    pub oracle: OracleLocalizer,
    pub sigma_deg: f64,
    pub rng: ChaCha8Rng,
}

/// Moves `d` by a random tangent-plane offset with per-axis standard
/// deviation `sigma_deg`.
pub fn tangent_noise<R: Rng + ?Sized>(d: Doa, sigma_deg: f64, rng: &mut R) -> Doa {
    if sigma_deg <= 0.0 {
        return d;
    }
    let helper = if d.x.abs() < 0.9 { Doa::new(1.0, 0.0, 0.0) } else { Doa::new(0.0, 1.0, 0.0) };
    let u = d.cross(helper).normalized().expect("helper is not parallel");
    let v = d.cross(u);
    let s = sigma_deg.to_radians();
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    d.add(u.scale(a * s)).add(v.scale(b * s)).normalized().expect("offset keeps the point off the origin")
}

impl LocalizerPredictor for NoisyOracleLocalizer {
    fn predict_doas(&mut self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>> {
        let clean = self.oracle.predict_doas(features, conditions)?;
        Ok(clean
            .into_iter()
            .map(|v| {
                let d = Doa::from_array(v);
                if d.is_origin() {
                    v
                } else {
                    tangent_noise(d, self.sigma_deg, &mut self.rng).to_array()
                }
            })
            .collect())
    }
}

/// One-hot on the class of the truth nearest the conditioning DOA, or on
/// the empty class when conditioning is the origin or nothing lies within
/// `max_deg`.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub truth: StackedTracks,
    pub max_deg: f64,
}

impl OracleClassifier {
    pub fn new(truth: StackedTracks) -> Self {
        Self { truth, max_deg: 20.0 }
    }
}

impl ClassifierPredictor for OracleClassifier {
    fn n_classes(&self) -> usize {
        self.truth.n_classes()
    }

    fn predict_probs(&mut self, _features: &FeatureTensor, conditions: &[Option<Doa>]) -> Result<Vec<Vec<f64>>> {
        check_len(conditions, self.truth.n_frames())?;
        let k = self.truth.n_classes();
        Ok(conditions
            .iter()
            .enumerate()
            .map(|(f, c)| {
                let class = c
                    .and_then(|d| {
                        self.truth
                            .frame_cells(f)
                            .into_iter()
                            .map(|(t, cls)| (angular_distance(t, d).unwrap_or(f64::INFINITY), cls))
                            .filter(|(a, _)| *a <= self.max_deg)
                            .min_by(|a, b| a.0.total_cmp(&b.0))
                            .map(|(_, cls)| cls)
                    })
                    .unwrap_or(k);
                let mut p = vec![0.0; k + 1];
                p[class] = 1.0;
                p
            })
            .collect())
    }
}

/// Ignores its input and puts all mass on a uniformly drawn class.
#[derive(Debug, Clone)]
pub struct RandomClassifier {
    pub n_classes: usize,
    pub rng: ChaCha8Rng,
}

impl ClassifierPredictor for RandomClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_probs(&mut self, _features: &FeatureTensor, conditions: &[Option<Doa>]) -> Result<Vec<Vec<f64>>> {
        Ok(conditions
            .iter()
            .map(|_| {
                let mut p = vec![0.0; self.n_classes + 1];
                p[self.rng.random_range(0..=self.n_classes)] = 1.0;
                p
            })
            .collect())
    }
}

/// Localization result: `N × T` directions, bottom-compacted per frame,
/// the origin marking "no detection".
#[derive(Debug, Clone, PartialEq)]
pub struct DoaTracks {
    n_tracks: usize,
    n_frames: usize,
    doas: Vec<Doa>,
}

impl DoaTracks {
    pub fn empty(n_tracks: usize, n_frames: usize) -> Self {
        Self {
            n_tracks,
            n_frames,
            doas: vec![Doa::ORIGIN; n_tracks * n_frames],
        }
    }

    /// Directions of a classed stack, classes dropped.
    pub fn from_stacked(st: &StackedTracks) -> Self {
        let mut out = Self::empty(st.n_tracks(), st.n_frames());
        for f in 0..st.n_frames() {
            for (r, d) in st.frame_doas(f).into_iter().enumerate() {
                out.doas[r * st.n_frames() + f] = d;
            }
        }
        out
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, row: usize, frame: usize) -> Doa {
        self.doas[row * self.n_frames + frame]
    }

    pub fn occupancy(&self, frame: usize) -> usize {
        (0..self.n_tracks).take_while(|&r| !self.get(r, frame).is_origin()).count()
    }

    pub fn frame_doas(&self, frame: usize) -> Vec<Doa> {
        (0..self.occupancy(frame)).map(|r| self.get(r, frame)).collect()
    }

    /// Bottom-compaction and unit norm of every detection.
    pub fn validate(&self) -> Result<()> {
        for f in 0..self.n_frames {
            let occ = self.occupancy(f);
            for r in 0..self.n_tracks {
                let d = self.get(r, f);
                if r < occ {
                    d.ensure_unit()?;
                } else if !d.is_origin() {
                    return Err(Error::Invariant(format!("frame {f} is not bottom-compacted")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SsgOptions {
    pub threshold: f64,
    /// Uniform jitter on conditioning azimuth/elevation; 0 disables.
    pub perturb_deg: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Default for SsgOptions {
    fn default() -> Self {
        Self {
            threshold: DETECTION_THRESHOLD,
            perturb_deg: 0.0,
            rng: None,
        }
    }
}

/// Detects sources one step at a time: step `s` conditions every frame on
/// the mean encoding of its detections so far and writes what it finds
/// into row `s`. Frames that stopped detecting stay stopped, which keeps
/// the rows bottom-compacted. Ends early after a step with no detection.
pub fn ssg_localize<P: LocalizerPredictor + ?Sized>(
    predictor: &mut P,
    features: &FeatureTensor,
    max_steps: usize,
    opts: &mut SsgOptions,
) -> Result<DoaTracks> {
    let n_frames = features.label_frames()?;
    let mut out = DoaTracks::empty(max_steps, n_frames);
    for step in 0..max_steps {
        let mut conditions = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let mut set = out.frame_doas(f);
            if opts.perturb_deg > 0.0 {
                let rng = opts
                    .rng
                    .as_mut()
                    .ok_or_else(|| Error::Config("angle perturbation needs an rng".into()))?;
                for d in &mut set {
                    *d = perturb_doa(*d, opts.perturb_deg, rng)?;
                }
            }
            conditions.push(set);
        }
        let preds = predictor.predict_doas(features, &conditions)?;
        check_len(&preds, n_frames)?;
        let mut fired = false;
        for (f, v) in preds.iter().enumerate() {
            let v = Doa::from_array(*v);
            if !v.is_finite() {
                return Err(Error::NonFinite("localizer output"));
            }
            if out.occupancy(f) == step && v.norm() > opts.threshold {
                out.doas[step * n_frames + f] = v.normalized()?;
                fired = true;
            }
        }
        if !fired {
            break;
        }
    }
    Ok(out)
}

/// Classifies each localized row on its own; cells predicted as the empty
/// class are dropped and the stack re-compacted.
pub fn classify_tracks<P: ClassifierPredictor + ?Sized>(
    predictor: &mut P,
    features: &FeatureTensor,
    doas: &DoaTracks,
) -> Result<StackedTracks> {
    let k = predictor.n_classes();
    let n_frames = doas.n_frames();
    let mut st = StackedTracks::empty(doas.n_tracks(), n_frames, k);
    for r in 0..doas.n_tracks() {
        let conditions: Vec<Option<Doa>> = (0..n_frames)
            .map(|f| Some(doas.get(r, f)).filter(|d| !d.is_origin()))
            .collect();
        if conditions.iter().all(Option::is_none) {
            continue;
        }
        let probs = predictor.predict_probs(features, &conditions)?;
        check_len(&probs, n_frames)?;
        for (f, p) in probs.iter().enumerate() {
            if p.len() != k + 1 {
                return Err(Error::Shape(format!("{} class scores, expected {}", p.len(), k + 1)));
            }
            let Some(d) = conditions[f] else { continue };
            let class = argmax(p);
            if class < k {
                st.set_cell(r, f, d, class);
            }
        }
    }
    st.compact();
    Ok(st)
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Stacked row the detection came from.
    pub track: usize,
    pub class_id: usize,
    pub doa: Doa,
}

/// Detections per label frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SeldOutput {
    pub n_classes: usize,
    pub frames: Vec<Vec<Detection>>,
}

impl SeldOutput {
    pub fn empty(n_frames: usize, n_classes: usize) -> Self {
        Self {
            n_classes,
            frames: vec![Vec::new(); n_frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn from_events(events: &[FrameEvent], n_frames: usize, n_classes: usize) -> Result<Self> {
        let mut out = Self::empty(n_frames, n_classes);
        for e in events {
            if e.frame >= n_frames || e.class_id >= n_classes {
                return Err(Error::Range(format!(
                    "event at frame {} class {} outside {n_frames} frames / {n_classes} classes",
                    e.frame, e.class_id
                )));
            }
            out.frames[e.frame].push(Detection {
                track: e.track_id,
                class_id: e.class_id,
                doa: e.doa.ensure_unit()?,
            });
        }
        for f in &mut out.frames {
            f.sort_by_key(|d| d.track);
        }
        Ok(out)
    }

    pub fn to_events(&self) -> Vec<FrameEvent> {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(frame, dets)| {
                dets.iter().map(move |d| FrameEvent {
                    frame,
                    track_id: d.track,
                    class_id: d.class_id,
                    doa: d.doa,
                })
            })
            .collect()
    }
}

pub fn to_seld_output(st: &StackedTracks) -> Result<SeldOutput> {
    let mut out = SeldOutput::empty(st.n_frames(), st.n_classes());
    for f in 0..st.n_frames() {
        for r in 0..st.n_tracks() {
            let (d, c) = st.cell(r, f);
            if c == st.n_classes() {
                continue;
            }
            if d.is_origin() {
                return Err(Error::Invariant(format!("row {r}, frame {f}: class {c} at the origin")));
            }
            out.frames[f].push(Detection {
                track: r,
                class_id: c,
                doa: d.ensure_unit()?,
            });
        }
    }
    Ok(out)
}

/// Prediction CSV, same layout as the annotation CSV.
pub fn format_predictions(out: &SeldOutput) -> Result<String> {
    format_meta(&out.to_events())
}

pub fn parse_predictions(text: &str, n_frames: usize, n_classes: usize, source: &str) -> Result<SeldOutput> {
    SeldOutput::from_events(&parse_meta(text, n_classes, source)?, n_frames, n_classes)
}

pub fn write_predictions(out: &SeldOutput, path: &Path) -> Result<()> {
    std::fs::write(path, format_predictions(out)?)?;
    Ok(())
}

pub fn read_predictions(path: &Path, n_frames: usize, n_classes: usize) -> Result<SeldOutput> {
    let text = std::fs::read_to_string(path)?;
    parse_predictions(&text, n_frames, n_classes, &path.display().to_string())
}

/// Number of localization steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    MaxOv2,
    MaxOv3,
}

impl InferenceMode {
    pub fn max_steps(self) -> usize {
        match self {
            InferenceMode::MaxOv2 => 2,
            InferenceMode::MaxOv3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::MaxOv2 => "max_ov2",
            InferenceMode::MaxOv3 => "max_ov3",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_ov2" => Ok(InferenceMode::MaxOv2),
            "max_ov3" => Ok(InferenceMode::MaxOv3),
            _ => Err(Error::Config(format!("unknown inference mode {s:?}, expected max_ov2 or max_ov3"))),
        }
    }
}

/// Localize, classify, and collect detections.
pub fn run_pipeline<L, C>(
    localizer: &mut L,
    classifier: &mut C,
    features: &FeatureTensor,
    mode: InferenceMode,
    opts: &mut SsgOptions,
) -> Result<SeldOutput>
where
    L: LocalizerPredictor + ?Sized,
    C: ClassifierPredictor + ?Sized,
{
    let doas = ssg_localize(localizer, features, mode.max_steps(), opts)?;
    let st = classify_tracks(classifier, features, &doas)?;
    to_seld_output(&st)
}

/// Loads both nets and checks their heads.
pub fn load_pipeline_nets(localizer_dir: &Path, classifier_dir: &Path) -> Result<(ConditionedNet<f32>, ConditionedNet<f32>)> {
    let (loc, _) = load_checkpoint(localizer_dir)?;
    let (cls, _) = load_checkpoint(classifier_dir)?;
    if loc.config().head != Head::Localizer {
        return Err(Error::Config(format!("{} is not a localizer checkpoint", localizer_dir.display())));
    }
    if cls.config().head == Head::Localizer {
        return Err(Error::Config(format!("{} is not a classifier checkpoint", classifier_dir.display())));
    }
    Ok((loc, cls))
}

/// Per-frame detection count histogram, keyed by count.
pub fn detection_counts(out: &SeldOutput) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for f in &out.frames {
        *m.entry(f.len()).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests;
