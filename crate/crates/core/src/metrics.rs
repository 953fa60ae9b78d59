//! Evaluation: per-step DOA error, conditional accuracy and the
//! location-dependent detection scoreboard.
//!
//! The scoreboard is segment based. Frames are grouped into 1 s segments
//! and, per segment and class, references and predictions are compared
//! frame by frame through an optimal assignment on angular distance.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::geometry::{angular_distance, Doa};
use crate::inference::{ClassifierPredictor, LocalizerPredictor, SeldOutput};
use crate::tracks::StackedTracks;

pub const SEGMENT_FRAMES: usize = 10;
pub const DOA_THRESHOLD_DEG: f64 = 20.0;

/// Minimum-cost assignment on a rectangular `rows × cols` cost matrix.
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = min_cost_assignment(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // Shortest augmenting paths with potentials; rows ≤ cols, 1-based
    // internally with column 0 as the virtual source.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Angle in degrees, with the origin treated as pointing nowhere (90° to
/// everything) so that a missing answer is penalized but finite.
fn error_deg(pred: Doa, truth: Doa) -> f64 {
    if pred.norm() < 1e-12 {
        return 90.0;
    }
    let p = if pred.is_unit() { pred } else { pred.normalized().expect("nonzero norm") };
    angular_distance(p, truth).unwrap_or(90.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeldScores {
    pub er20: f64,
    pub f20: f64,
    /// Degrees; NaN when no class-matched pair exists.
    pub le_cd: f64,
    pub lr_cd: f64,
}

/// Running counts for the scoreboard; scenes are folded in one at a time
/// and merged associatively.
#[derive(Debug, Clone, PartialEq)]
pub struct SeldAccumulator {
    n_classes: usize,
    segment_frames: usize,
    threshold_deg: f64,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fp_spatial: Vec<u64>,
    fn_: Vec<u64>,
    n_ref: Vec<u64>,
    de_total: Vec<f64>,
    de_tp: Vec<u64>,
    de_fn: Vec<u64>,
    subs: u64,
    dels: u64,
    ins: u64,
}

impl SeldAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self::with_params(n_classes, SEGMENT_FRAMES, DOA_THRESHOLD_DEG)
    }

    /// Scoreboard with a custom segment length (label frames, > 0) and
    /// spatial gate (degrees).
    pub fn with_params(n_classes: usize, segment_frames: usize, threshold_deg: f64) -> Self {
        let z = vec![0; n_classes];
        Self {
            n_classes,
            segment_frames: segment_frames.max(1),
            threshold_deg,
            tp: z.clone(),
            fp: z.clone(),
            fp_spatial: z.clone(),
            fn_: z.clone(),
            n_ref: z.clone(),
            de_total: vec![0.0; n_classes],
            de_tp: z.clone(),
            de_fn: z,
            subs: 0,
            dels: 0,
            ins: 0,
        }
    }

    pub fn add(&mut self, pred: &SeldOutput, reference: &SeldOutput) -> Result<()> {
        if pred.n_frames() != reference.n_frames() {
            return Err(Error::Shape(format!(
                "prediction covers {} frames, reference {}",
                pred.n_frames(),
                reference.n_frames()
            )));
        }
        if pred.n_classes != self.n_classes || reference.n_classes != self.n_classes {
            return Err(Error::Shape(format!(
                "class counts {} / {} do not match scoreboard with {}",
                pred.n_classes, reference.n_classes, self.n_classes
            )));
        }
        let n_frames = pred.n_frames();
        for seg_start in (0..n_frames).step_by(self.segment_frames) {
            let seg = seg_start..(seg_start + self.segment_frames).min(n_frames);
            let (mut loc_fp, mut loc_fn) = (0u64, 0u64);
            for c in 0..self.n_classes {
                let of_class = |out: &SeldOutput, f: usize| -> Vec<Doa> {
                    out.frames[f].iter().filter(|d| d.class_id == c).map(|d| d.doa).collect()
                };
                let refs: Vec<Vec<Doa>> = seg.clone().map(|f| of_class(reference, f)).collect();
                let preds: Vec<Vec<Doa>> = seg.clone().map(|f| of_class(pred, f)).collect();
                let nb_ref = refs.iter().map(Vec::len).max().unwrap_or(0) as u64;
                let nb_pred = preds.iter().map(Vec::len).max().unwrap_or(0) as u64;
                self.n_ref[c] += nb_ref;
                match (nb_ref > 0, nb_pred > 0) {
                    (true, true) => {
                        let (mut dist_sum, mut pairs) = (0.0, 0u64);
                        for (r, p) in refs.iter().zip(&preds) {
                            if r.is_empty() || p.is_empty() {
                                continue;
                            }
                            let cost: Vec<Vec<f64>> =
                                r.iter().map(|&a| p.iter().map(|&b| error_deg(b, a)).collect()).collect();
                            for (i, j) in min_cost_assignment(&cost) {
                                dist_sum += cost[i][j];
                                pairs += 1;
                            }
                        }
                        if pairs == 0 {
                            // same class in the segment but never in the same frame
                            loc_fn += nb_ref;
                            self.fn_[c] += nb_ref;
                            self.de_fn[c] += nb_ref;
                            continue;
                        }
                        let avg = dist_sum / pairs as f64;
                        self.de_total[c] += avg;
                        self.de_tp[c] += 1;
                        if avg <= self.threshold_deg {
                            self.tp[c] += 1;
                        } else {
                            self.fp_spatial[c] += 1;
                            loc_fp += 1;
                        }
                        if nb_pred > nb_ref {
                            self.fp[c] += nb_pred - nb_ref;
                            loc_fp += nb_pred - nb_ref;
                        } else if nb_pred < nb_ref {
                            self.fn_[c] += nb_ref - nb_pred;
                            self.de_fn[c] += nb_ref - nb_pred;
                            loc_fn += nb_ref - nb_pred;
                        }
                    }
                    (true, false) => {
                        loc_fn += nb_ref;
                        self.fn_[c] += nb_ref;
                        self.de_fn[c] += nb_ref;
                    }
                    (false, true) => {
                        loc_fp += nb_pred;
                        self.fp[c] += nb_pred;
                    }
                    (false, false) => {}
                }
            }
            self.subs += loc_fp.min(loc_fn);
            self.dels += loc_fn.saturating_sub(loc_fp);
            self.ins += loc_fp.saturating_sub(loc_fn);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SeldAccumulator) -> Result<()> {
        if other.n_classes != self.n_classes
            || other.segment_frames != self.segment_frames
            || other.threshold_deg != self.threshold_deg
        {
            return Err(Error::Shape("merging scoreboards with different settings".into()));
        }
        let add = |a: &mut Vec<u64>, b: &Vec<u64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.tp, &other.tp);
        add(&mut self.fp, &other.fp);
        add(&mut self.fp_spatial, &other.fp_spatial);
        add(&mut self.fn_, &other.fn_);
        add(&mut self.n_ref, &other.n_ref);
        add(&mut self.de_tp, &other.de_tp);
        add(&mut self.de_fn, &other.de_fn);
        self.de_total.iter_mut().zip(&other.de_total).for_each(|(x, y)| *x += y);
        self.subs += other.subs;
        self.dels += other.dels;
        self.ins += other.ins;
        Ok(())
    }

    /// Micro-averaged scores. With nothing to find and nothing claimed the
    /// board is perfect; insertions against an empty reference give
    /// `er20 = ∞`.
    pub fn scores(&self) -> SeldScores {
        let sum = |v: &Vec<u64>| v.iter().sum::<u64>() as f64;
        let n_ref = sum(&self.n_ref);
        let errors = (self.subs + self.dels + self.ins) as f64;
        let er20 = if n_ref > 0.0 {
            errors / n_ref
        } else if errors == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let tp = sum(&self.tp);
        let f_den = tp + sum(&self.fp_spatial) + 0.5 * (sum(&self.fp) + sum(&self.fn_));
        let f20 = if f_den > 0.0 { tp / f_den } else { 1.0 };
        let de_tp = sum(&self.de_tp);
        let le_cd = if de_tp > 0.0 { self.de_total.iter().sum::<f64>() / de_tp } else { f64::NAN };
        let lr_den = de_tp + sum(&self.de_fn);
        let lr_cd = if lr_den > 0.0 { de_tp / lr_den } else { 1.0 };
        SeldScores { er20, f20, le_cd, lr_cd }
    }
}

pub fn seld_scores(pred: &SeldOutput, reference: &SeldOutput) -> Result<SeldScores> {
    let mut acc = SeldAccumulator::new(reference.n_classes);
    acc.add(pred, reference)?;
    Ok(acc.scores())
}

pub fn format_scores_csv(s: &SeldScores) -> String {
    format!(
        "metric,value\ner20,{}\nf20,{}\nle_cd,{}\nlr_cd,{}\n",
        s.er20, s.f20, s.le_cd, s.lr_cd
    )
}

pub fn write_scores_csv(s: &SeldScores, path: &Path) -> Result<()> {
    std::fs::write(path, format_scores_csv(s))?;
    Ok(())
}

/// Rows labelled by `name`, columns ER / F / LE / LR.
pub fn format_scores_table(rows: &[(&str, SeldScores)]) -> String {
    let mut s = format!("{:<12} {:>7} {:>7} {:>8} {:>7}\n", "", "ER20", "F20", "LE_CD", "LR_CD");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>7.2} {:>6.0}% {:>7.1}° {:>6.0}%",
            name,
            r.er20,
            100.0 * r.f20,
            r.le_cd,
            100.0 * r.lr_cd
        );
    }
    s
}

/// Angular errors by true source count (`noas`, 1..=N) and number of
/// conditioning DOAs (`cond`, 0..noas).
#[derive(Debug, Clone, PartialEq)]
pub struct DoaErrorTable {
    n_tracks: usize,
    /// `errors[noas - 1][cond]`
    errors: Vec<Vec<Vec<f64>>>,
}

impl DoaErrorTable {
    pub fn new(n_tracks: usize) -> Self {
        Self {
            n_tracks,
            errors: (1..=n_tracks).map(|m| vec![Vec::new(); m]).collect(),
        }
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    fn cell(&self, noas: usize, cond: usize) -> Option<&[f64]> {
        if noas == 0 || noas > self.n_tracks || cond >= noas {
            return None;
        }
        Some(&self.errors[noas - 1][cond])
    }

    pub fn push(&mut self, noas: usize, cond: usize, err_deg: f64) -> Result<()> {
        if noas == 0 || noas > self.n_tracks || cond >= noas {
            return Err(Error::Range(format!("no table cell for noas {noas}, cond {cond}")));
        }
        self.errors[noas - 1][cond].push(err_deg);
        Ok(())
    }

    pub fn count(&self, noas: usize, cond: usize) -> usize {
        self.cell(noas, cond).map_or(0, <[f64]>::len)
    }

    /// NaN for empty or undefined cells.
    pub fn mean(&self, noas: usize, cond: usize) -> f64 {
        match self.cell(noas, cond) {
            Some(e) if !e.is_empty() => e.iter().sum::<f64>() / e.len() as f64,
            _ => f64::NAN,
        }
    }

    pub fn median(&self, noas: usize, cond: usize) -> f64 {
        match self.cell(noas, cond) {
            Some(e) if !e.is_empty() => {
                let mut v = e.to_vec();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            }
            _ => f64::NAN,
        }
    }

    /// Appends `other`'s samples after this table's.
    pub fn merge(&mut self, other: &DoaErrorTable) -> Result<()> {
        if other.n_tracks != self.n_tracks {
            return Err(Error::Shape("merging error tables of different sizes".into()));
        }
        for (a, b) in self.errors.iter_mut().flatten().zip(other.errors.iter().flatten()) {
            a.extend_from_slice(b);
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("noas,cond,mean_deg,count\n");
        for noas in 1..=self.n_tracks {
            for cond in 0..noas {
                let _ = writeln!(s, "{noas},{cond},{},{}", self.mean(noas, cond), self.count(noas, cond));
            }
        }
        s
    }

    /// One row per `noas`, one column per `cond`, mean degrees.
    pub fn format_table(&self) -> String {
        let mut s = String::from("noas \\ cond");
        for c in 0..self.n_tracks {
            let _ = write!(s, " {c:>7}");
        }
        s.push('\n');
        for noas in 1..=self.n_tracks {
            let _ = write!(s, "{noas:>11}");
            for cond in 0..noas {
                let m = self.mean(noas, cond);
                if m.is_nan() {
                    let _ = write!(s, " {:>7}", "-");
                } else {
                    let _ = write!(s, " {:>6.1}°", m);
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Table samples for one scene. For every `cond < N` the predictor sees the
/// first `cond` stacked truths of each frame; frames holding more than
/// `cond` sources score the answer against the nearest truth outside the
/// conditioning set.
pub fn doa_error_table_scene<P: LocalizerPredictor + ?Sized>(
    pred: &mut P,
    features: &FeatureTensor,
    truth: &StackedTracks,
) -> Result<DoaErrorTable> {
    let n = truth.n_tracks();
    let mut table = DoaErrorTable::new(n);
    let occ: Vec<usize> = (0..truth.n_frames()).map(|f| truth.occupancy(f)).collect();
    for cond in 0..n {
        if occ.iter().all(|&m| m <= cond) {
            continue;
        }
        let conditions: Vec<Vec<Doa>> = (0..truth.n_frames())
            .map(|f| truth.frame_doas(f).into_iter().take(cond).collect())
            .collect();
        let out = pred.predict_doas(features, &conditions)?;
        if out.len() != truth.n_frames() {
            return Err(Error::Shape(format!(
                "localizer returned {} frames, expected {}",
                out.len(),
                truth.n_frames()
            )));
        }
        for (f, v) in out.iter().enumerate() {
            if occ[f] <= cond {
                continue;
            }
            let p = Doa::from_array(*v);
            let err = truth.frame_doas(f)[cond..]
                .iter()
                .map(|&t| error_deg(p, t))
                .fold(f64::INFINITY, f64::min);
            table.push(occ[f], cond, err)?;
        }
    }
    Ok(table)
}

/// Counts behind conditional accuracy and its two side rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassifierTally {
    /// (frame, event) pairs probed with the event's DOA.
    pub events: u64,
    pub correct: u64,
    /// Event probes answered with the empty class.
    pub misses: u64,
    /// Frames probed with empty conditioning.
    pub empty_probes: u64,
    /// Empty probes answered with a known class.
    pub false_alarms: u64,
}

impl ClassifierTally {
    pub fn merge(&mut self, o: &ClassifierTally) {
        self.events += o.events;
        self.correct += o.correct;
        self.misses += o.misses;
        self.empty_probes += o.empty_probes;
        self.false_alarms += o.false_alarms;
    }

    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.correct, self.events)
    }

    pub fn miss_rate(&self) -> f64 {
        Self::ratio(self.misses, self.events)
    }

    pub fn false_alarm_rate(&self) -> f64 {
        Self::ratio(self.false_alarms, self.empty_probes)
    }
}

fn argmax(p: &[f64]) -> usize {
    // first index on ties
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Probes every annotated event with its own DOA, then every frame with
/// empty conditioning.
pub fn conditional_accuracy_scene<P: ClassifierPredictor + ?Sized>(
    pred: &mut P,
    features: &FeatureTensor,
    truth: &StackedTracks,
) -> Result<ClassifierTally> {
    let k = truth.n_classes();
    if pred.n_classes() != k {
        return Err(Error::Shape(format!("classifier has {} classes, annotations {k}", pred.n_classes())));
    }
    let t = truth.n_frames();
    let mut tally = ClassifierTally::default();
    let check = |probs: &Vec<Vec<f64>>| {
        if probs.len() != t || probs.iter().any(|p| p.len() != k + 1) {
            Err(Error::Shape("classifier output does not match frames × (K+1)".into()))
        } else {
            Ok(())
        }
    };
    for r in 0..truth.n_tracks() {
        let conditions: Vec<Option<Doa>> =
            (0..t).map(|f| (!truth.is_empty_cell(r, f)).then(|| truth.cell(r, f).0)).collect();
        if conditions.iter().all(Option::is_none) {
            continue;
        }
        let probs = pred.predict_probs(features, &conditions)?;
        check(&probs)?;
        for f in (0..t).filter(|&f| conditions[f].is_some()) {
            let got = argmax(&probs[f]);
            tally.events += 1;
            if got == truth.cell(r, f).1 {
                tally.correct += 1;
            } else if got == k {
                tally.misses += 1;
            }
        }
    }
    let probs = pred.predict_probs(features, &vec![None; t])?;
    check(&probs)?;
    for p in &probs {
        tally.empty_probes += 1;
        if argmax(p) != k {
            tally.false_alarms += 1;
        }
    }
    Ok(tally)
}
