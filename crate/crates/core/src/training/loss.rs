use crate::geometry::{lp_norm, Doa};
use crate::tracks::StackedTracks;

/// Exponent of the localizer's distance norm.
pub const LOCALIZER_NORM_P: f64 = 1.5;
pub const FOCAL_GAMMA: f64 = 1.0;
pub const FOCAL_PROB_FLOOR: f64 = 1e-7;

/// Loss group of one frame given the split row `r`: the rows `r..=k`
/// that hold targets, or `Empty` when every target row is silent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossBucket {
    Span { r: usize, k: usize },
    Empty,
}

impl LossBucket {
    /// Every bucket that can occur with `n` stacked rows.
    pub fn all(n: usize) -> Vec<LossBucket> {
        let mut v: Vec<LossBucket> = (0..n)
            .flat_map(|k| (0..=k).map(move |r| LossBucket::Span { r, k }))
            .collect();
        v.push(LossBucket::Empty);
        v
    }

    pub fn label(self) -> String {
        match self {
            LossBucket::Span { r, k } => format!("r{r}k{k}"),
            LossBucket::Empty => "empty".into(),
        }
    }
}

/// `N(N+1)/2 + 1`.
pub fn bucket_count(n: usize) -> usize {
    n * (n + 1) / 2 + 1
}

/// Weight of each bucket mean in the batch loss, `2 / (N(N+1) + 2)`.
pub fn bucket_coefficient(n: usize) -> f64 {
    2.0 / (n * (n + 1) + 2) as f64
}

fn diff(a: [f64; 3], b: Doa) -> [f64; 3] {
    [a[0] - b.x, a[1] - b.y, a[2] - b.z]
}

/// Smallest L1.5 distance from `pred` to any target, or the norm of `pred`
/// itself when there are no targets.
pub fn localizer_frame_loss(targets: &[Doa], pred: [f64; 3]) -> f64 {
    localizer_frame_loss_grad(targets, pred).0
}

/// Loss, gradient with respect to `pred`, and the index of the chosen
/// target. Ties go to the first target.
pub fn localizer_frame_loss_grad(targets: &[Doa], pred: [f64; 3]) -> (f64, [f64; 3], Option<usize>) {
    let (e, choice) = if targets.is_empty() {
        (pred, None)
    } else {
        let mut best = (f64::INFINITY, 0);
        for (i, &t) in targets.iter().enumerate() {
            let d = lp_norm(diff(pred, t), LOCALIZER_NORM_P).expect("supported norm");
            if d < best.0 {
                best = (d, i);
            }
        }
        (diff(pred, targets[best.1]), Some(best.1))
    };
    let s: f64 = e.iter().map(|v| v.abs().powf(1.5)).sum();
    let loss = s.powf(2.0 / 3.0);
    if s == 0.0 {
        return (0.0, [0.0; 3], choice);
    }
    // d/de_i (Σ|e|^1.5)^(2/3) = S^(-1/3) |e_i|^0.5 sign(e_i)
    let c = s.powf(-1.0 / 3.0);
    let g = e.map(|v| c * v.abs().sqrt() * v.signum());
    (loss, g, choice)
}

/// Targets and bucket of every frame of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    pub bucket: LossBucket,
    pub doas: Vec<Doa>,
}

/// Splits stacked tracks at row `r`: rows `r..N` are the targets.
pub fn localizer_targets(tracks: &StackedTracks, r: usize) -> Vec<FrameTarget> {
    (0..tracks.n_frames())
        .map(|f| {
            let doas: Vec<Doa> = (r..tracks.n_tracks())
                .filter(|&row| !tracks.is_empty_cell(row, f))
                .map(|row| tracks.cell(row, f).0)
                .collect();
            let bucket = if doas.is_empty() {
                LossBucket::Empty
            } else {
                LossBucket::Span {
                    r,
                    k: r + doas.len() - 1,
                }
            };
            FrameTarget { bucket, doas }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStat {
    pub bucket: LossBucket,
    pub mean: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub buckets: Vec<BucketStat>,
    /// `dL/d(prediction)` per sample, laid out like the predictions.
    pub grads: Vec<Vec<f64>>,
}

/// Per-bucket mean of frame losses, summed with the bucket coefficient.
/// `preds[i]` holds `3·T` coordinates for sample `i`.
pub fn localizer_batch_loss<T: AsRef<[FrameTarget]>>(targets: &[T], preds: &[Vec<f64>], n_tracks: usize) -> BatchLoss {
    use std::collections::BTreeMap;
    let coef = bucket_coefficient(n_tracks);
    let mut counts: BTreeMap<LossBucket, usize> = BTreeMap::new();
    for t in targets.iter().flat_map(|t| t.as_ref()) {
        *counts.entry(t.bucket).or_default() += 1;
    }
    let mut sums: BTreeMap<LossBucket, f64> = BTreeMap::new();
    let mut grads = Vec::with_capacity(preds.len());
    for (tg, p) in targets.iter().zip(preds) {
        let mut g = vec![0.0; p.len()];
        for (f, t) in tg.as_ref().iter().enumerate() {
            let pred = [p[3 * f], p[3 * f + 1], p[3 * f + 2]];
            let (l, dl, _) = localizer_frame_loss_grad(&t.doas, pred);
            *sums.entry(t.bucket).or_default() += l;
            let w = coef / counts[&t.bucket] as f64;
            for j in 0..3 {
                g[3 * f + j] = w * dl[j];
            }
        }
        grads.push(g);
    }
    let buckets: Vec<BucketStat> = counts
        .iter()
        .map(|(&b, &n)| BucketStat {
            bucket: b,
            mean: sums[&b] / n as f64,
            frames: n,
        })
        .collect();
    let total = coef * buckets.iter().map(|b| b.mean).sum::<f64>();
    BatchLoss { total, buckets, grads }
}

/// `-(1 - p)^γ ln p` at the true class, with `p` clamped to `[1e-7, 1]`.
pub fn focal_loss(gt_class: usize, probs: &[f64], gamma: f64) -> f64 {
    focal_loss_grad(gt_class, probs, gamma).0
}

/// Loss and its derivative with respect to `probs[gt_class]`.
pub fn focal_loss_grad(gt_class: usize, probs: &[f64], gamma: f64) -> (f64, f64) {
    let raw = probs[gt_class];
    let p = raw.clamp(FOCAL_PROB_FLOOR, 1.0);
    let q = 1.0 - p;
    let loss = -q.powf(gamma) * p.ln();
    let grad = if raw < FOCAL_PROB_FLOOR || raw > 1.0 {
        0.0
    } else if q == 0.0 {
        if gamma == 0.0 { -1.0 } else { 0.0 }
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p
    };
    (loss, grad)
}

/// Mean focal loss over every frame of every sample. `probs[i]` holds
/// `(K+1)·T` values for sample `i`.
pub fn classifier_batch_loss<T: AsRef<[usize]>>(targets: &[T], probs: &[Vec<f64>], width: usize, gamma: f64) -> BatchLoss {
    let frames: usize = targets.iter().map(|t| t.as_ref().len()).sum();
    let inv = 1.0 / frames.max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (tg, p) in targets.iter().zip(probs) {
        let mut g = vec![0.0; p.len()];
        for (f, &c) in tg.as_ref().iter().enumerate() {
            let row = &p[f * width..(f + 1) * width];
            let (l, d) = focal_loss_grad(c, row, gamma);
            total += l * inv;
            g[f * width + c] = d * inv;
        }
        grads.push(g);
    }
    BatchLoss {
        total,
        buckets: Vec::new(),
        grads,
    }
}
