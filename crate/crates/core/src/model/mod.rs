//! Condition encoder and the conv-recurrent predictor shared by the
//! localizer and the classifier, with hand-written backward passes.

mod checkpoint;
mod layers;
mod params;

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureTensor, FRAMES_PER_LABEL, N_BINS, N_FEATURE_CHANNELS};
use crate::geometry::Doa;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use layers::GruIds;
pub use params::{ParamBundle, ParamId, ParamSpec, Real};

/// Output layer of a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Three coordinates squashed by tanh.
    Localizer,
    /// Softmax over `n_classes` plus one "no event" class.
    Classifier { n_classes: usize },
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Localizer => 3,
            Head::Classifier { n_classes } => n_classes + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub head: Head,
    pub feature_channels: usize,
    pub bins: usize,
    /// Width of the condition embedding appended as input channels.
    pub cond_channels: usize,
    /// Average-pools adjacent frequency bins before the first conv block.
    pub input_freq_pool: usize,
    pub conv_filters: Vec<usize>,
    pub freq_pools: Vec<usize>,
    pub time_pools: Vec<usize>,
    pub gru_hidden: usize,
    pub bidirectional: bool,
    pub dense_hidden: usize,
}

impl NetConfig {
    pub fn desk_default(head: Head) -> Self {
        Self {
            head,
            feature_channels: N_FEATURE_CHANNELS,
            bins: N_BINS,
            cond_channels: 5,
            input_freq_pool: 1,
            conv_filters: vec![16, 16],
            freq_pools: vec![8, 4],
            time_pools: vec![5, 1],
            gru_hidden: 32,
            bidirectional: false,
            dense_hidden: 32,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.feature_channels + self.cond_channels
    }

    fn pooled_input_bins(&self) -> usize {
        self.bins / self.input_freq_pool.max(1)
    }

    /// Bins remaining after every pooling stage.
    pub fn output_bins(&self) -> usize {
        self.freq_pools
            .iter()
            .fold(self.pooled_input_bins(), |f, &p| f / p.max(1))
    }

    pub fn gru_input(&self) -> usize {
        self.conv_filters.last().copied().unwrap_or(0) * self.output_bins()
    }

    pub fn gru_output(&self) -> usize {
        self.gru_hidden * if self.bidirectional { 2 } else { 1 }
    }

    /// Static shape check run before any training.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.conv_filters.len();
        if n == 0 || self.freq_pools.len() != n || self.time_pools.len() != n {
            return bad(format!(
                "conv_filters, freq_pools and time_pools need equal non-zero length, got {}, {}, {}",
                n,
                self.freq_pools.len(),
                self.time_pools.len()
            ));
        }
        let tp: usize = self.time_pools.iter().product();
        if tp != FRAMES_PER_LABEL {
            return bad(format!("time pools multiply to {tp}, need {FRAMES_PER_LABEL}"));
        }
        let zero = [
            ("feature_channels", self.feature_channels),
            ("bins", self.bins),
            ("input_freq_pool", self.input_freq_pool),
            ("gru_hidden", self.gru_hidden),
            ("dense_hidden", self.dense_hidden),
        ];
        for (name, v) in zero {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.conv_filters.contains(&0) || self.freq_pools.contains(&0) || self.time_pools.contains(&0) {
            return bad("conv sizes and pool factors must be positive".into());
        }
        if let Head::Classifier { n_classes: 0 } = self.head {
            return bad("classifier needs at least one class".into());
        }
        let mut f = self.pooled_input_bins();
        if f < 2 {
            return bad(format!("{f} input bins after input pooling, need at least 2"));
        }
        for &p in &self.freq_pools {
            f /= p;
            if f == 0 {
                return bad("frequency pooling leaves no bins".into());
            }
        }
        Ok(())
    }
}

/// Per-channel affine normalization of audio features, fitted on training
/// data and stored with the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl InputScaler {
    pub fn identity(channels: usize) -> Self {
        Self {
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation per channel over every frame and bin.
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a FeatureTensor>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, f64)> = Vec::new();
        for t in tensors {
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0.0); t.channels];
            } else if sums.len() != t.channels {
                return Err(Error::Shape("feature tensors disagree on channel count".into()));
            }
            for (c, s) in sums.iter_mut().enumerate() {
                for &v in t.plane(c) {
                    s.0 += 1.0;
                    s.1 += v as f64;
                    s.2 += (v as f64) * (v as f64);
                }
            }
        }
        if sums.is_empty() {
            return Err(Error::Shape("no feature tensors to fit a scaler on".into()));
        }
        let shift = sums.iter().map(|s| (s.1 / s.0) as f32).collect();
        let scale = sums
            .iter()
            .map(|s| {
                let var = (s.2 / s.0 - (s.1 / s.0).powi(2)).max(0.0);
                var.sqrt().max(1e-3) as f32
            })
            .collect();
        Ok(Self { shift, scale })
    }
}

/// Network output, one row per label frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<S> {
    pub frames: usize,
    pub width: usize,
    pub data: Vec<S>,
}

impl<S: Real> NetOutput<S> {
    pub fn row(&self, frame: usize) -> &[S] {
        &self.data[frame * self.width..(frame + 1) * self.width]
    }
}

/// Encodes one DOA: `tanh(Wᵀ d + b)` with `W` stored `[3][c]`.
pub fn encode_doa<S: Real>(weight: &[S], bias: &[S], d: &Doa) -> Vec<S> {
    let d = [S::of(d.x), S::of(d.y), S::of(d.z)];
    (0..bias.len())
        .map(|c| {
            let pre = bias[c] + (0..3).map(|i| d[i] * weight[i * bias.len() + c]).sum::<S>();
            pre.tanh()
        })
        .collect()
}

/// Members sorted so that floating-point sums over a set do not depend on
/// the order it was given in.
fn canonical_set(doas: &[Doa]) -> Vec<Doa> {
    let mut v = doas.to_vec();
    v.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    v
}

/// Mean of the per-DOA encodings; the empty set encodes the origin.
pub fn encode_condition<S: Real>(weight: &[S], bias: &[S], doas: &[Doa]) -> Vec<S> {
    if doas.is_empty() {
        return encode_doa(weight, bias, &Doa::ORIGIN);
    }
    let inv = S::one() / S::of(doas.len() as f64);
    let mut acc = vec![S::zero(); bias.len()];
    for d in &canonical_set(doas) {
        for (a, e) in acc.iter_mut().zip(encode_doa(weight, bias, d)) {
            *a += e * inv;
        }
    }
    acc
}

/// Standalone 3→c encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder<S> {
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> ConditionEncoder<S> {
    pub fn new(weight: Vec<S>, bias: Vec<S>) -> Result<Self> {
        if weight.len() != 3 * bias.len() {
            return Err(Error::Shape(format!(
                "encoder weight has {} entries for {} outputs",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn encode(&self, doas: &[Doa]) -> Vec<S> {
        encode_condition(&self.weight, &self.bias, doas)
    }
}

/// Tiles a `T × c` condition over `t` feature frames and `f` bins,
/// returning channel-major planes `[c][t][f]`.
pub fn broadcast_condition<S: Real>(cond: &[Vec<S>], t: usize, f: usize) -> Result<Vec<S>> {
    let n = cond.len();
    if n == 0 || t % n != 0 {
        return Err(Error::Shape(format!(
            "{t} feature frames do not divide into {n} label frames"
        )));
    }
    let c = cond[0].len();
    if cond.iter().any(|v| v.len() != c) {
        return Err(Error::Shape("condition rows differ in width".into()));
    }
    let rep = t / n;
    let mut out = vec![S::zero(); c * t * f];
    for ch in 0..c {
        for y in 0..t {
            let v = cond[y / rep][ch];
            out[(ch * t + y) * f..(ch * t + y + 1) * f].fill(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc_w: ParamId,
    enc_b: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    gru_fwd: GruIds,
    gru_bwd: Option<GruIds>,
    dense: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl Layout {
    fn build<S: Real>(cfg: &NetConfig, mut init: impl FnMut(usize) -> S) -> (ParamBundle<S>, Self) {
        let mut p = ParamBundle::default();
        let c = cfg.cond_channels;
        let enc_w = p.add("encoder.weight", &[3, c], || init(3));
        let enc_b = p.add("encoder.bias", &[c], || init(3));
        let mut convs = Vec::new();
        let mut cin = cfg.input_channels();
        for (i, &cout) in cfg.conv_filters.iter().enumerate() {
            let fan = cin * 9;
            let w = p.add(&format!("conv{i}.weight"), &[cout, cin, 3, 3], || init(fan));
            let b = p.add(&format!("conv{i}.bias"), &[cout], || init(fan));
            convs.push((w, b));
            cin = cout;
        }
        let (gi, hd) = (cfg.gru_input(), cfg.gru_hidden);
        let mut gru = |p: &mut ParamBundle<S>, tag: &str| GruIds {
            w_ih: p.add(&format!("gru.{tag}.w_ih"), &[3 * hd, gi], || init(hd)),
            w_hh: p.add(&format!("gru.{tag}.w_hh"), &[3 * hd, hd], || init(hd)),
            b_ih: p.add(&format!("gru.{tag}.b_ih"), &[3 * hd], || init(hd)),
            b_hh: p.add(&format!("gru.{tag}.b_hh"), &[3 * hd], || init(hd)),
            input: gi,
            hidden: hd,
        };
        let gru_fwd = gru(&mut p, "fwd");
        let gru_bwd = cfg.bidirectional.then(|| gru(&mut p, "bwd"));
        let (go, dh, ow) = (cfg.gru_output(), cfg.dense_hidden, cfg.head.width());
        let dense = (
            p.add("dense.weight", &[dh, go], || init(go)),
            p.add("dense.bias", &[dh], || init(go)),
        );
        let out = (
            p.add("out.weight", &[ow, dh], || init(dh)),
            p.add("out.bias", &[ow], || init(dh)),
        );
        (
            p,
            Self {
                enc_w,
                enc_b,
                convs,
                gru_fwd,
                gru_bwd,
                dense,
                out,
            },
        )
    }
}

/// Intermediates of one conv block.
#[derive(Debug, Clone)]
struct BlockTrace<S> {
    input: Vec<S>,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    z_len: usize,
    out: Vec<S>,
    argmax: Vec<u32>,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    conditions: Vec<Vec<Doa>>,
    encodings: Vec<Vec<Vec<S>>>,
    blocks: Vec<BlockTrace<S>>,
    seq: Vec<Vec<S>>,
    gru_fwd: layers::GruTrace<S>,
    gru_bwd: Option<layers::GruTrace<S>>,
    hidden: Vec<Vec<S>>,
    dense: Vec<Vec<S>>,
    output: NetOutput<S>,
}

impl<S: Real> Tape<S> {
    pub fn output(&self) -> &NetOutput<S> {
        &self.output
    }

    /// Hash of every piecewise choice made in the forward pass (pool
    /// argmaxes and which pooled values the ReLU clamped). Two parameter
    /// vectors with equal signatures lie on the same smooth piece.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.blocks {
            b.argmax.hash(&mut h);
            for v in &b.out {
                (*v > S::zero()).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Conditioned conv-recurrent predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedNet<S> {
    config: NetConfig,
    pub params: ParamBundle<S>,
    pub scaler: InputScaler,
    layout: Layout,
}

impl<S: Real> ConditionedNet<S> {
    /// Uniform fan-in initialization: every entry drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (params, _) = Layout::build(&config, |fan| {
            let a = 1.0 / (fan as f64).sqrt();
            S::of(rng.random_range(-a..a))
        });
        Self::from_params(config, params, None)
    }

    pub fn from_params(config: NetConfig, params: ParamBundle<S>, scaler: Option<InputScaler>) -> Result<Self> {
        config.validate()?;
        let (proto, layout) = Layout::build::<S>(&config, |_| S::zero());
        if proto.specs() != params.specs() {
            return Err(Error::Shape("parameter names or shapes do not match the config".into()));
        }
        let scaler = scaler.unwrap_or_else(|| InputScaler::identity(config.feature_channels));
        if scaler.shift.len() != config.feature_channels || scaler.scale.len() != config.feature_channels {
            return Err(Error::Shape("scaler width differs from feature channels".into()));
        }
        Ok(Self {
            config,
            params,
            scaler,
            layout,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn encoder(&self) -> ConditionEncoder<S> {
        let l = &self.layout;
        ConditionEncoder {
            weight: self.params.get(l.enc_w).to_vec(),
            bias: self.params.get(l.enc_b).to_vec(),
        }
    }

    /// Zeroes the output layer so every prediction is the head at zero
    /// logits.
    pub fn zero_head(&mut self) {
        let l = &self.layout;
        self.params.get_mut(l.out.0).fill(S::zero());
        self.params.get_mut(l.out.1).fill(S::zero());
    }

    pub fn cast<T: Real>(&self) -> ConditionedNet<T> {
        ConditionedNet {
            config: self.config.clone(),
            params: self.params.cast(),
            scaler: self.scaler.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Normalized, frequency-pooled audio channels followed by the
    /// broadcast condition, as `[C][t][F]`.
    fn assemble_input(&self, features: &FeatureTensor, cond: &[Vec<S>]) -> Result<(Vec<S>, usize, usize)> {
        let cfg = &self.config;
        let fp = cfg.input_freq_pool;
        let (t, f) = (features.frames, cfg.pooled_input_bins());
        let mut x = Vec::with_capacity(cfg.input_channels() * t * f);
        let inv = S::one() / S::of(fp as f64);
        for ch in 0..cfg.feature_channels {
            let plane = features.plane(ch);
            let (sh, sc) = (self.scaler.shift[ch] as f64, self.scaler.scale[ch] as f64);
            for y in 0..t {
                let row = &plane[y * features.bins..(y + 1) * features.bins];
                for b in 0..f {
                    let mean = row[b * fp..(b + 1) * fp]
                        .iter()
                        .fold(S::zero(), |a, &v| a + S::of(v as f64))
                        * inv;
                    x.push((mean - S::of(sh)) / S::of(sc));
                }
            }
        }
        x.extend(broadcast_condition(cond, t, f)?);
        Ok((x, t, f))
    }

    fn check_input(&self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<()> {
        let cfg = &self.config;
        if features.channels != cfg.feature_channels || features.bins != cfg.bins {
            return Err(Error::Shape(format!(
                "features are {}×{} (channels×bins), net expects {}×{}",
                features.channels, features.bins, cfg.feature_channels, cfg.bins
            )));
        }
        if conditions.is_empty() || features.frames != FRAMES_PER_LABEL * conditions.len() {
            return Err(Error::Shape(format!(
                "{} feature frames with {} label frames of conditions",
                features.frames,
                conditions.len()
            )));
        }
        Ok(())
    }

    /// Runs the net and records what [`ConditionedNet::backward`] needs.
    /// `conditions[τ]` is the set of DOAs conditioning label frame τ.
    pub fn forward(&self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<Tape<S>> {
        self.check_input(features, conditions)?;
        let conditions: Vec<Vec<Doa>> = conditions.iter().map(|s| canonical_set(s)).collect();
        let cfg = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let (ew, eb) = (p.get(l.enc_w), p.get(l.enc_b));
        let encodings: Vec<Vec<Vec<S>>> = conditions
            .iter()
            .map(|set| {
                if set.is_empty() {
                    vec![encode_doa(ew, eb, &Doa::ORIGIN)]
                } else {
                    set.iter().map(|d| encode_doa(ew, eb, d)).collect()
                }
            })
            .collect();
        let cond: Vec<Vec<S>> = encodings
            .iter()
            .map(|encs| {
                let inv = S::one() / S::of(encs.len() as f64);
                (0..cfg.cond_channels)
                    .map(|c| encs.iter().fold(S::zero(), |a, e| a + e[c] * inv))
                    .collect()
            })
            .collect();

        let (mut x, mut h, mut w) = self.assemble_input(features, &cond)?;
        let mut cin = cfg.input_channels();
        let mut blocks = Vec::with_capacity(l.convs.len());
        for (i, &(cw, cb)) in l.convs.iter().enumerate() {
            let cout = cfg.conv_filters[i];
            let z = layers::conv3x3_forward(&x, cin, h, w, p.get(cw), p.get(cb), cout);
            let (tp, fp) = (cfg.time_pools[i], cfg.freq_pools[i]);
            let (out, argmax) = layers::maxpool_relu_forward(&z, cout, h, w, tp, fp);
            let trace = BlockTrace {
                input: x,
                cin,
                h,
                w,
                cout,
                z_len: z.len(),
                out,
                argmax,
            };
            x = trace.out.clone();
            h /= tp;
            w /= fp;
            cin = cout;
            blocks.push(trace);
        }

        let n_t = conditions.len();
        debug_assert_eq!(h, n_t);
        let seq: Vec<Vec<S>> = (0..n_t)
            .map(|tau| {
                let mut v = Vec::with_capacity(cin * w);
                for c in 0..cin {
                    v.extend_from_slice(&x[(c * h + tau) * w..(c * h + tau + 1) * w]);
                }
                v
            })
            .collect();
        let gru_fwd = layers::gru_forward(p, &l.gru_fwd, &seq, false);
        let gru_bwd = l.gru_bwd.as_ref().map(|ids| layers::gru_forward(p, ids, &seq, true));
        let hidden: Vec<Vec<S>> = (0..n_t)
            .map(|tau| {
                let mut v = gru_fwd.output(tau, false).to_vec();
                if let Some(b) = &gru_bwd {
                    v.extend_from_slice(b.output(tau, true));
                }
                v
            })
            .collect();
        let dense: Vec<Vec<S>> = hidden
            .iter()
            .map(|hv| layers::dense_forward(p.get(l.dense.0), p.get(l.dense.1), hv))
            .collect();
        let width = cfg.head.width();
        let mut data = Vec::with_capacity(n_t * width);
        for d in &dense {
            let o = layers::dense_forward(p.get(l.out.0), p.get(l.out.1), d);
            match cfg.head {
                Head::Localizer => data.extend(o.into_iter().map(|v| v.tanh())),
                Head::Classifier { .. } => data.extend(softmax(&o)),
            }
        }
        Ok(Tape {
            conditions,
            encodings,
            blocks,
            seq,
            gru_fwd,
            gru_bwd,
            hidden,
            dense,
            output: NetOutput {
                frames: n_t,
                width,
                data,
            },
        })
    }

    pub fn predict(&self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<NetOutput<S>> {
        Ok(self.forward(features, conditions)?.output)
    }

    /// Parameter gradients given `dL/d(output)`, laid out like `params`.
    pub fn backward(&self, tape: &Tape<S>, d_output: &[S]) -> Result<Vec<S>> {
        let out = &tape.output;
        if d_output.len() != out.data.len() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, output has {}",
                d_output.len(),
                out.data.len()
            )));
        }
        let cfg = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let mut g = vec![S::zero(); p.len()];
        let n_t = out.frames;

        // head and the two dense layers
        let mut d_hidden = Vec::with_capacity(n_t);
        for tau in 0..n_t {
            let y = out.row(tau);
            let dy = &d_output[tau * out.width..(tau + 1) * out.width];
            let d_logit: Vec<S> = match cfg.head {
                Head::Localizer => y.iter().zip(dy).map(|(&y, &d)| d * (S::one() - y * y)).collect(),
                Head::Classifier { .. } => {
                    let s: S = y.iter().zip(dy).map(|(&y, &d)| y * d).sum();
                    y.iter().zip(dy).map(|(&y, &d)| y * (d - s)).collect()
                }
            };
            let (gw, gb) = split_two(&mut g, l.out.0, l.out.1);
            let d_dense = layers::dense_backward(p.get(l.out.0), &tape.dense[tau], &d_logit, gw, gb);
            let (gw, gb) = split_two(&mut g, l.dense.0, l.dense.1);
            d_hidden.push(layers::dense_backward(p.get(l.dense.0), &tape.hidden[tau], &d_dense, gw, gb));
        }

        // recurrent layer
        let hd = cfg.gru_hidden;
        let d_fwd: Vec<Vec<S>> = d_hidden.iter().map(|d| d[..hd].to_vec()).collect();
        let mut d_seq = layers::gru_backward(p, &l.gru_fwd, &tape.seq, &tape.gru_fwd, &d_fwd, false, &mut g);
        if let (Some(ids), Some(tr)) = (&l.gru_bwd, &tape.gru_bwd) {
            let d_b: Vec<Vec<S>> = d_hidden.iter().map(|d| d[hd..].to_vec()).collect();
            let d2 = layers::gru_backward(p, ids, &tape.seq, tr, &d_b, true, &mut g);
            for (a, b) in d_seq.iter_mut().zip(d2) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }

        // unflatten into the last block's pooled map
        let last = tape.blocks.last().expect("at least one conv block");
        let (oh, ow) = (last.h / cfg.time_pools[tape.blocks.len() - 1], last.w / cfg.freq_pools[tape.blocks.len() - 1]);
        let mut d_map = vec![S::zero(); last.cout * oh * ow];
        for (tau, ds) in d_seq.iter().enumerate() {
            for c in 0..last.cout {
                d_map[(c * oh + tau) * ow..(c * oh + tau + 1) * ow].copy_from_slice(&ds[c * ow..(c + 1) * ow]);
            }
        }

        // conv blocks, last to first
        let n_feat = cfg.feature_channels;
        let mut d_cond_planes = Vec::new();
        for (i, b) in tape.blocks.iter().enumerate().rev() {
            let dz = layers::maxpool_relu_backward(&d_map, &b.out, &b.argmax, b.z_len);
            let (cw, cb) = l.convs[i];
            // the first block only needs input gradients on condition channels
            let channels = if i == 0 { n_feat..b.cin } else { 0..b.cin };
            let mut d_in = vec![S::zero(); channels.len() * b.h * b.w];
            let weight = p.get(cw);
            let (gw, gb) = split_two(&mut g, cw, cb);
            layers::conv3x3_backward(&b.input, b.cin, b.h, b.w, weight, b.cout, &dz, gw, gb, channels, &mut d_in);
            if i == 0 {
                d_cond_planes = d_in;
            } else {
                d_map = d_in;
            }
        }

        // broadcast and average pool back to the encoder
        let b0 = &tape.blocks[0];
        let (t, f) = (b0.h, b0.w);
        let rep = t / n_t;
        let c = cfg.cond_channels;
        let (ew, eb) = (l.enc_w, l.enc_b);
        for tau in 0..n_t {
            let d_cond: Vec<S> = (0..c)
                .map(|ch| {
                    let start = (ch * t + tau * rep) * f;
                    d_cond_planes[start..start + rep * f].iter().copied().sum()
                })
                .collect();
            let encs = &tape.encodings[tau];
            let inv = S::one() / S::of(encs.len() as f64);
            let origin = [Doa::ORIGIN];
            let doas: &[Doa] = if tape.conditions[tau].is_empty() { &origin } else { &tape.conditions[tau] };
            for (e, d) in encs.iter().zip(doas) {
                let dv = [S::of(d.x), S::of(d.y), S::of(d.z)];
                for ch in 0..c {
                    let dpre = d_cond[ch] * inv * (S::one() - e[ch] * e[ch]);
                    g[eb.offset + ch] += dpre;
                    for (i, &di) in dv.iter().enumerate() {
                        g[ew.offset + i * c + ch] += di * dpre;
                    }
                }
            }
        }
        Ok(g)
    }
}

fn split_two<S>(g: &mut [S], a: ParamId, b: ParamId) -> (&mut [S], &mut [S]) {
    debug_assert!(a.offset + a.len <= b.offset);
    let (lo, hi) = g.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len])
}

pub fn softmax<S: Real>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Forward/backward pairing that refuses a backward pass with no
/// recorded forward.
#[derive(Debug)]
pub struct GradientSession<'a, S> {
    net: &'a ConditionedNet<S>,
    tape: Option<Tape<S>>,
}

impl<'a, S: Real> GradientSession<'a, S> {
    pub fn new(net: &'a ConditionedNet<S>) -> Self {
        Self { net, tape: None }
    }

    pub fn forward(&mut self, features: &FeatureTensor, conditions: &[Vec<Doa>]) -> Result<&NetOutput<S>> {
        let tape = self.net.forward(features, conditions)?;
        Ok(&self.tape.insert(tape).output)
    }

    pub fn backward(&self, d_output: &[S]) -> Result<Vec<S>> {
        let tape = self.tape.as_ref().ok_or(Error::NoForward)?;
        self.net.backward(tape, d_output)
    }

    pub fn tape(&self) -> Option<&Tape<S>> {
        self.tape.as_ref()
    }
}

#[cfg(test)]
mod tests;
