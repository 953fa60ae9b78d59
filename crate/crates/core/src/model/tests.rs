use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::random_unit_doa;

fn tiny_config(head: Head) -> NetConfig {
    NetConfig {
        head,
        feature_channels: N_FEATURE_CHANNELS,
        bins: 8,
        cond_channels: 5,
        input_freq_pool: 1,
        conv_filters: vec![2],
        freq_pools: vec![2],
        time_pools: vec![5],
        gru_hidden: 4,
        bidirectional: false,
        dense_hidden: 4,
    }
}

fn random_features(rng: &mut ChaCha8Rng, label_frames: usize, bins: usize) -> FeatureTensor {
    let mut t = FeatureTensor::zeros(N_FEATURE_CHANNELS, label_frames * FRAMES_PER_LABEL, bins);
    t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

fn mixed_conditions(rng: &mut ChaCha8Rng, label_frames: usize) -> Vec<Vec<Doa>> {
    (0..label_frames)
        .map(|i| (0..i % 3).map(|_| random_unit_doa(rng)).collect())
        .collect()
}

#[test]
fn default_encoder_has_twenty_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = ConditionedNet::<f32>::new(NetConfig::desk_default(Head::Localizer), &mut rng).unwrap();
    assert_eq!(net.encoder().param_count(), 20);
    assert_eq!(net.params.find("encoder.weight").unwrap().len, 15);
    assert_eq!(net.config().input_channels(), 16);
}

#[test]
fn empty_set_encodes_bias() {
    let w = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
    let b = vec![0.25, -1.5];
    let enc = ConditionEncoder::new(w, b.clone()).unwrap();
    let e = enc.encode(&[]);
    assert_eq!(e, b.iter().map(|v: &f64| v.tanh()).collect::<Vec<_>>());
    let d = Doa::new(0.0, 1.0, 0.0);
    assert_eq!(enc.encode(&[d]), encode_doa(&enc.weight, &enc.bias, &d));
}

#[test]
fn encoder_rejects_mismatched_shapes() {
    assert!(ConditionEncoder::new(vec![0.0f64; 5], vec![0.0; 2]).is_err());
}

proptest! {
    #[test]
    fn encoding_is_permutation_invariant(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set: Vec<Doa> = (0..n).map(|_| random_unit_doa(&mut rng)).collect();
        let mut rev = set.clone();
        rev.reverse();
        rev.rotate_left(1);
        prop_assert_eq!(encode_condition(&w, &b, &set), encode_condition(&w, &b, &rev));
    }
}

#[test]
fn broadcast_tiles_condition() {
    let out = broadcast_condition(&[vec![0.3f64]], 5, 2).unwrap();
    assert_eq!(out, vec![0.3; 10]);
    let out = broadcast_condition(&[vec![1.0f64, 0.0], vec![2.0, 0.0]], 10, 3).unwrap();
    // channel 0: frames 0..5 hold 1, frames 5..10 hold 2; channel 1 is zero
    assert!(out[..15].iter().all(|&v| v == 1.0));
    assert!(out[15..30].iter().all(|&v| v == 2.0));
    assert!(out[30..].iter().all(|&v| v == 0.0));
    assert!(broadcast_condition(&[vec![1.0f64], vec![1.0]], 5, 2).is_err());
}

#[test]
fn zero_condition_appends_zero_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = ConditionedNet::<f64>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    let l = net.layout.clone();
    net.params.get_mut(l.enc_b).fill(0.0);
    let feat = random_features(&mut rng, 2, 8);
    let (x, t, f) = net.assemble_input(&feat, &[vec![0.0; 5], vec![0.0; 5]]).unwrap();
    assert_eq!((t, f), (10, 8));
    assert_eq!(x.len(), 16 * t * f);
    assert!(x[11 * t * f..].iter().all(|&v| v == 0.0));
}

#[test]
fn zero_head_gives_zero_doas_and_uniform_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feat = random_features(&mut rng, 3, 8);
    let cond = mixed_conditions(&mut rng, 3);
    let mut loc = ConditionedNet::<f64>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    loc.zero_head();
    let out = loc.predict(&feat, &cond).unwrap();
    assert_eq!((out.frames, out.width), (3, 3));
    assert!(out.data.iter().all(|&v| v == 0.0));

    let mut cls = ConditionedNet::<f64>::new(tiny_config(Head::Classifier { n_classes: 4 }), &mut rng).unwrap();
    cls.zero_head();
    let out = cls.predict(&feat, &cond).unwrap();
    assert_eq!(out.width, 5);
    assert!(out.data.iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn heads_stay_in_range_and_repeat_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feat = random_features(&mut rng, 4, 8);
    let cond = mixed_conditions(&mut rng, 4);
    let loc = ConditionedNet::<f32>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    let a = loc.predict(&feat, &cond).unwrap();
    assert!(a.data.iter().all(|v| v.abs() < 1.0));
    assert_eq!(a, loc.predict(&feat, &cond).unwrap());

    let cls = ConditionedNet::<f32>::new(tiny_config(Head::Classifier { n_classes: 13 }), &mut rng).unwrap();
    let out = cls.predict(&feat, &cond).unwrap();
    for tau in 0..out.frames {
        let s: f64 = out.row(tau).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.row(tau).iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn forward_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = ConditionedNet::<f32>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    let feat = random_features(&mut rng, 2, 8);
    assert!(matches!(net.predict(&feat, &[vec![]]), Err(Error::Shape(_))));
    let wide = random_features(&mut rng, 2, 9);
    assert!(net.predict(&wide, &[vec![], vec![]]).is_err());
}

#[test]
fn config_validation() {
    let mut c = NetConfig::desk_default(Head::Localizer);
    c.validate().unwrap();
    assert_eq!(c.output_bins(), 513 / 8 / 4);
    c.time_pools = vec![5, 5];
    assert!(c.validate().is_err());
    let mut c = NetConfig::desk_default(Head::Localizer);
    c.freq_pools = vec![64, 64];
    assert!(c.validate().is_err());
    let mut c = NetConfig::desk_default(Head::Localizer);
    c.conv_filters = vec![128, 128, 128];
    c.freq_pools = vec![4, 4, 2];
    c.time_pools = vec![5, 1, 1];
    c.gru_hidden = 128;
    c.bidirectional = true;
    c.dense_hidden = 128;
    c.validate().unwrap();
}

#[test]
fn backward_requires_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = ConditionedNet::<f64>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    let mut s = GradientSession::new(&net);
    assert!(matches!(s.backward(&[0.0; 3]), Err(Error::NoForward)));
    let feat = random_features(&mut rng, 1, 8);
    s.forward(&feat, &[vec![]]).unwrap();
    assert!(s.backward(&[0.0; 3]).is_ok());
    assert!(matches!(s.backward(&[0.0; 4]), Err(Error::Shape(_))));
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feat = random_features(&mut rng, 3, 8);
    let cond = mixed_conditions(&mut rng, 3);
    let net = ConditionedNet::<f64>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    let tape = net.forward(&feat, &cond).unwrap();
    let g = net.backward(&tape, &[0.0; 9]).unwrap();
    assert_eq!(g.len(), net.n_params());
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn tanh_head_at_zero_passes_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feat = random_features(&mut rng, 2, 8);
    let mut net = ConditionedNet::<f64>::new(tiny_config(Head::Localizer), &mut rng).unwrap();
    net.zero_head();
    let tape = net.forward(&feat, &[vec![], vec![]]).unwrap();
    let up = [0.5, -1.0, 2.0, 0.25, 0.0, -3.0];
    let g = net.backward(&tape, &up).unwrap();
    let b = net.params.find("out.bias").unwrap();
    let got = &g[b.range()];
    for j in 0..3 {
        assert!((got[j] - (up[j] + up[3 + j])).abs() < 1e-15);
    }
}

/// Central differences against the analytic gradient of a random linear
/// probe of the output. Probes whose perturbation crosses a ReLU, pool or
/// argmax boundary are skipped, since the derivative is not defined there.
fn gradient_check(cfg: NetConfig, seed: u64, label_frames: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = random_features(&mut rng, label_frames, cfg.bins);
    let cond = mixed_conditions(&mut rng, label_frames);
    let mut net = ConditionedNet::<f64>::new(cfg, &mut rng).unwrap();
    let tape = net.forward(&feat, &cond).unwrap();
    let probe: Vec<f64> = (0..tape.output().data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = net.backward(&tape, &probe).unwrap();
    let base_sig = tape.activation_signature();
    let loss = |net: &ConditionedNet<f64>| {
        let t = net.forward(&feat, &cond).unwrap();
        let l: f64 = t.output().data.iter().zip(&probe).map(|(a, b)| a * b).sum();
        (l, t.activation_signature())
    };

    let h = 1e-3;
    let enc = net.params.find("encoder.weight").unwrap();
    let enc_b = net.params.find("encoder.bias").unwrap();
    let mut candidates: Vec<usize> = enc.range().chain(enc_b.range()).collect();
    while candidates.len() < 400 {
        candidates.push(rng.random_range(0..net.n_params()));
    }
    let (mut accepted, mut worst) = (0, 0.0f64);
    for &i in &candidates {
        let orig = net.params.values[i];
        net.params.values[i] = orig + h;
        let (lp, sp) = loss(&net);
        net.params.values[i] = orig - h;
        let (lm, sm) = loss(&net);
        net.params.values[i] = orig;
        if sp != base_sig || sm != base_sig {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        if rel > worst {
            worst = rel;
        }
        assert!(
            rel < 1e-4,
            "{}[{i}]: analytic {a}, numeric {numeric}",
            net.params.name_of(i).unwrap()
        );
        accepted += 1;
        if accepted >= 150 && i >= enc_b.offset + enc_b.len {
            break;
        }
    }
    assert!(accepted >= 100, "only {accepted} smooth probes");
}

#[test]
fn gradient_check_localizer() {
    gradient_check(tiny_config(Head::Localizer), 11, 3);
}

#[test]
fn gradient_check_classifier() {
    gradient_check(tiny_config(Head::Classifier { n_classes: 4 }), 12, 3);
}

#[test]
fn gradient_check_deep_bidirectional() {
    let mut cfg = tiny_config(Head::Localizer);
    cfg.bins = 16;
    cfg.input_freq_pool = 2;
    cfg.conv_filters = vec![3, 2];
    cfg.freq_pools = vec![2, 2];
    cfg.time_pools = vec![1, 5];
    cfg.bidirectional = true;
    gradient_check(cfg, 13, 2);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = ConditionedNet::<f32>::new(tiny_config(Head::Classifier { n_classes: 3 }), &mut rng).unwrap();
    net.scaler.shift[3] = 0.125;
    net.scaler.scale[7] = 3.5;
    save_checkpoint(&net, dir.path(), serde_json::json!({"step": 7})).unwrap();
    let (back, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, net);
    assert_eq!(manifest.meta["step"], 7);
    assert_eq!(manifest.n_params, net.n_params());

    let f = dir.path().join("conv0.weight.ten");
    let mut bytes = std::fs::read(&f).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&f, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checksum(_))));
}

#[test]
fn scaler_fit_matches_direct_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random_features(&mut rng, 2, 8);
    let b = random_features(&mut rng, 1, 8);
    let s = InputScaler::fit([&a, &b]).unwrap();
    for c in 0..N_FEATURE_CHANNELS {
        let vals: Vec<f64> = a.plane(c).iter().chain(b.plane(c)).map(|&v| v as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((s.shift[c] as f64 - mean).abs() < 1e-5);
        assert!((s.scale[c] as f64 - sd).abs() < 1e-5);
    }
}
