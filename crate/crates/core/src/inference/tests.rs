use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{FeatureTensor, FRAMES_PER_LABEL, N_FEATURE_CHANNELS};
use crate::geometry::{angular_distance, random_unit_doa};
use crate::model::NetConfig;
use crate::tracks::{example_tracks_raw, stack_tracks, FrameEvent};

/// Random multi-source annotations; features are irrelevant to oracles.
fn random_truth(seed: u64, n_frames: usize, max_overlap: usize, n_classes: usize) -> (Vec<FrameEvent>, StackedTracks) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for f in 0..n_frames {
        let n = rng.random_range(0..=max_overlap);
        for t in 0..n {
            events.push(FrameEvent {
                frame: f,
                track_id: t,
                class_id: rng.random_range(0..n_classes),
                doa: random_unit_doa(&mut rng),
            });
        }
    }
    let st = stack_tracks(&events, 3, n_frames, n_classes).unwrap();
    (events, st)
}

fn blank_features(n_frames: usize) -> FeatureTensor {
    FeatureTensor::zeros(N_FEATURE_CHANNELS, n_frames * FRAMES_PER_LABEL, 8)
}

fn same_set(a: &[Doa], b: &[Doa]) -> bool {
    a.len() == b.len() && a.iter().all(|x| b.iter().any(|y| angular_distance(*x, *y).unwrap() < 1e-9))
}

struct Constant {
    value: [f64; 3],
    calls: usize,
}

impl LocalizerPredictor for Constant {
    fn predict_doas(&mut self, _: &FeatureTensor, c: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>> {
        self.calls += 1;
        Ok(vec![self.value; c.len()])
    }
}

#[test]
fn silent_predictor_stops_after_first_step() {
    let feat = blank_features(6);
    let mut p = Constant { value: [0.0; 3], calls: 0 };
    let out = ssg_localize(&mut p, &feat, 3, &mut SsgOptions::default()).unwrap();
    assert_eq!(p.calls, 1);
    assert_eq!(out, DoaTracks::empty(3, 6));
}

#[test]
fn short_vectors_are_not_detections() {
    let feat = blank_features(2);
    let mut p = Constant { value: [0.4, 0.0, 0.0], calls: 0 };
    let out = ssg_localize(&mut p, &feat, 3, &mut SsgOptions::default()).unwrap();
    assert!((0..2).all(|f| out.occupancy(f) == 0));
    let mut p = Constant { value: [0.0, 0.6, 0.0], calls: 0 };
    let out = ssg_localize(&mut p, &feat, 3, &mut SsgOptions::default()).unwrap();
    // a constant answer keeps firing, the loop runs every step
    assert_eq!(p.calls, 3);
    assert_eq!(out.get(2, 1), Doa::new(0.0, 1.0, 0.0));
    out.validate().unwrap();
}

#[test]
fn wrong_frame_count_is_an_error() {
    struct Short;
    impl LocalizerPredictor for Short {
        fn predict_doas(&mut self, _: &FeatureTensor, _: &[Vec<Doa>]) -> Result<Vec<[f64; 3]>> {
            Ok(vec![[0.0; 3]])
        }
    }
    assert!(matches!(
        ssg_localize(&mut Short, &blank_features(3), 2, &mut SsgOptions::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn perturbation_needs_rng() {
    let mut p = Constant { value: [0.0, 0.6, 0.0], calls: 0 };
    let mut opts = SsgOptions { perturb_deg: 5.0, ..SsgOptions::default() };
    assert!(ssg_localize(&mut p, &blank_features(2), 2, &mut opts).is_err());
}

#[test]
fn oracle_recovers_every_frame() {
    for seed in 0..20 {
        let (_, st) = random_truth(seed, 40, 3, 13);
        let feat = blank_features(40);
        for steps in 1..=3 {
            let mut oracle = OracleLocalizer { truth: st.clone() };
            let out = ssg_localize(&mut oracle, &feat, steps, &mut SsgOptions::default()).unwrap();
            out.validate().unwrap();
            for f in 0..40 {
                assert_eq!(out.occupancy(f), st.occupancy(f).min(steps));
                if steps == 3 {
                    assert!(same_set(&out.frame_doas(f), &st.frame_doas(f)));
                }
            }
        }
    }
}

#[test]
fn oracle_survives_conditioning_jitter() {
    let (_, st) = random_truth(7, 30, 3, 5);
    let mut oracle = OracleLocalizer { truth: st.clone() };
    let mut opts = SsgOptions {
        perturb_deg: 5.0,
        rng: Some(ChaCha8Rng::seed_from_u64(1)),
        ..SsgOptions::default()
    };
    let out = ssg_localize(&mut oracle, &blank_features(30), 3, &mut opts).unwrap();
    for f in 0..30 {
        assert!(same_set(&out.frame_doas(f), &st.frame_doas(f)));
    }
}

#[test]
fn oracle_classes_match_annotations() {
    let (events, st) = random_truth(3, 30, 3, 13);
    let feat = blank_features(30);
    let doas = DoaTracks::from_stacked(&st);
    let cls = classify_tracks(&mut OracleClassifier::new(st.clone()), &feat, &doas).unwrap();
    assert_eq!(cls, st);
    let out = to_seld_output(&cls).unwrap();
    assert_eq!(out.to_events().len(), events.len());

    // an empty row conditions on the origin and stays empty
    let mut probe = OracleClassifier::new(st.clone());
    let probs = probe.predict_probs(&feat, &vec![None; 30]).unwrap();
    assert!(probs.iter().all(|p| p[13] == 1.0));
}

#[test]
fn empty_class_drops_and_recompacts() {
    struct DropFirstRow;
    impl ClassifierPredictor for DropFirstRow {
        fn n_classes(&self) -> usize {
            2
        }
        fn predict_probs(&mut self, _: &FeatureTensor, c: &[Option<Doa>]) -> Result<Vec<Vec<f64>>> {
            // class from the sign of x; negative x means "nothing here"
            Ok(c.iter()
                .map(|d| match d {
                    Some(d) if d.x < 0.0 => vec![0.1, 0.1, 0.8],
                    _ => vec![0.7, 0.2, 0.1],
                })
                .collect())
        }
    }
    let mut doas = DoaTracks::empty(2, 1);
    doas.doas[0] = Doa::new(-1.0, 0.0, 0.0);
    doas.doas[1] = Doa::new(0.0, 1.0, 0.0);
    let st = classify_tracks(&mut DropFirstRow, &blank_features(1), &doas).unwrap();
    st.validate().unwrap();
    assert_eq!(st.cell(0, 0), (Doa::new(0.0, 1.0, 0.0), 0));
    assert!(st.is_empty_cell(1, 0));
}

#[test]
fn stacked_example_frame_four() {
    let events: Vec<FrameEvent> = example_tracks_raw()
        .into_iter()
        .map(|e| FrameEvent { doa: e.doa.normalized().unwrap(), ..e })
        .collect();
    let st = stack_tracks(&events, 3, 8, 13).unwrap();
    let out = to_seld_output(&st).unwrap();
    let got: Vec<(usize, Doa)> = out.frames[4].iter().map(|d| (d.class_id, d.doa)).collect();
    let want = [(8, [-0.9, 0.2, 0.1]), (3, [-0.3, 0.8, 0.4]), (7, [0.5, -0.7, 0.5])];
    assert_eq!(got.len(), 3);
    for ((c, d), (wc, wd)) in got.iter().zip(want) {
        assert_eq!(*c, wc);
        assert_eq!(*d, Doa::from_array(wd).normalized().unwrap());
    }
    let empty = to_seld_output(&StackedTracks::empty(3, 4, 13)).unwrap();
    assert!(empty.frames.iter().all(Vec::is_empty));
}

#[test]
fn predictions_round_trip_through_csv() {
    let (events, _) = random_truth(9, 25, 3, 6);
    let out = SeldOutput::from_events(&events, 25, 6).unwrap();
    let text = format_predictions(&out).unwrap();
    let back = parse_predictions(&text, 25, 6, "mem").unwrap();
    assert_eq!(format_predictions(&back).unwrap(), text);
    for (a, b) in out.frames.iter().zip(&back.frames) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.track, x.class_id), (y.track, y.class_id));
            assert!(angular_distance(x.doa, y.doa).unwrap() < 1e-5);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pred.csv");
    write_predictions(&back, &p).unwrap();
    assert_eq!(read_predictions(&p, 25, 6).unwrap(), back);
}

#[test]
fn pipeline_modes_cap_and_nest() {
    let (_, st) = random_truth(11, 50, 3, 13);
    let feat = blank_features(50);
    let run = |mode| {
        run_pipeline(
            &mut OracleLocalizer { truth: st.clone() },
            &mut OracleClassifier::new(st.clone()),
            &feat,
            mode,
            &mut SsgOptions::default(),
        )
        .unwrap()
    };
    let (two, three) = (run(InferenceMode::MaxOv2), run(InferenceMode::MaxOv3));
    // detections are renormalized, so positions agree to rounding only
    let truth = to_seld_output(&st).unwrap();
    for (a, b) in three.frames.iter().zip(&truth.frames) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.track, x.class_id), (y.track, y.class_id));
            assert!(angular_distance(x.doa, y.doa).unwrap() < 1e-9);
        }
    }
    for (a, b) in two.frames.iter().zip(&three.frames) {
        assert!(a.len() <= 2);
        assert_eq!(a.as_slice(), &b[..a.len()]);
    }
    assert_eq!(run(InferenceMode::MaxOv3), three);
}

#[test]
fn trained_style_nets_nest_and_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = NetConfig::desk_default(Head::Localizer);
    cfg.bins = 8;
    cfg.conv_filters = vec![4];
    cfg.freq_pools = vec![2];
    cfg.time_pools = vec![5];
    cfg.gru_hidden = 8;
    cfg.dense_hidden = 8;
    let mut loc = ConditionedNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    // large output bias so the threshold actually fires
    let b = loc.params.find("out.bias").unwrap();
    loc.params.get_mut(b).copy_from_slice(&[2.0, 0.5, 0.0]);
    cfg.head = Head::Classifier { n_classes: 3 };
    let mut cls = ConditionedNet::<f32>::new(cfg, &mut rng).unwrap();
    let mut feat = blank_features(10);
    feat.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7919) % 13) as f32 / 13.0);
    let mut go = |mode| run_pipeline(&mut loc, &mut cls, &feat, mode, &mut SsgOptions::default()).unwrap();
    let (two, three) = (go(InferenceMode::MaxOv2), go(InferenceMode::MaxOv3));
    assert_eq!(three, go(InferenceMode::MaxOv3));
    let doas2 = ssg_localize(&mut loc, &feat, 2, &mut SsgOptions::default()).unwrap();
    let doas3 = ssg_localize(&mut loc, &feat, 3, &mut SsgOptions::default()).unwrap();
    for f in 0..10 {
        assert_eq!(doas2.frame_doas(f).as_slice(), &doas3.frame_doas(f)[..doas2.occupancy(f)]);
        assert!(doas3.occupancy(f) >= 1);
    }
    assert!(two.frames.iter().all(|f| f.len() <= 2));
    assert!(three.frames.iter().all(|f| f.len() <= 3));
}

#[test]
fn mode_parsing() {
    assert_eq!("max_ov2".parse::<InferenceMode>().unwrap(), InferenceMode::MaxOv2);
    assert!("max_ov4".parse::<InferenceMode>().is_err());
}

#[test]
fn tangent_noise_is_isotropic_rayleigh() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = random_unit_doa(&mut rng);
    let n = 20000;
    let mean: f64 = (0..n)
        .map(|_| angular_distance(d, tangent_noise(d, 2.0, &mut rng)).unwrap())
        .sum::<f64>()
        / n as f64;
    // small-angle limit: Rayleigh mean σ√(π/2)
    assert!((mean - 2.0 * (std::f64::consts::PI / 2.0).sqrt()).abs() < 0.05);
}
