use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{FeatureTensor, FRAMES_PER_LABEL, N_FEATURE_CHANNELS};
use crate::geometry::{random_unit_doa, Doa};
use crate::model::load_checkpoint;
use crate::scenes::{generate_scene, scene_rng, SceneConfig};
use crate::tracks::stack_tracks;

pub(crate) fn small_scenes(n: usize, seed: u64) -> Vec<TrainingScene> {
    let cfg = SceneConfig {
        duration_s: 2.0,
        n_classes: 4,
        max_overlap: 2,
        min_events: 1,
        max_events: 3,
        ..SceneConfig::default()
    };
    (0..n)
        .map(|i| {
            let s = generate_scene(&cfg, &mut scene_rng(seed, i as u64)).unwrap();
            TrainingScene::from_audio(&s.audio, s.events).unwrap()
        })
        .collect()
}

pub(crate) fn tiny_train_config(steps: usize) -> TrainConfig {
    let mut net = NetConfig::desk_default(Head::Localizer);
    net.input_freq_pool = 16;
    net.conv_filters = vec![8, 8];
    net.freq_pools = vec![4, 2];
    net.gru_hidden = 16;
    net.dense_hidden = 16;
    TrainConfig {
        steps,
        batch_size: 4,
        chunk_frames: 5,
        n_tracks: 3,
        n_classes: 4,
        seed: 17,
        adam: AdamConfig::default(),
        focal_gamma: FOCAL_GAMMA,
        checkpoint_every: 0,
        scaler_scenes: 4,
        augment: AugmentConfig::default(),
        net,
    }
}

#[test]
fn zero_steps_saves_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = small_scenes(2, 1);
    let cfg = tiny_train_config(0);
    let out = train(Component::Localizer, &scenes, &cfg, Some(dir.path()), |_, _| {}).unwrap();
    let init = init_net(Component::Localizer, &scenes, &cfg).unwrap();
    assert_eq!(out.net, init);
    assert!(out.curve.is_empty());
    let (loaded, m) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, init);
    assert_eq!(m.meta["step"], 0);
}

#[test]
fn training_is_reproducible_and_logs_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = small_scenes(3, 2);
    let mut cfg = tiny_train_config(4);
    cfg.checkpoint_every = 2;
    let a = train(Component::Localizer, &scenes, &cfg, Some(dir.path()), |_, _| {}).unwrap();
    let b = train(Component::Localizer, &scenes, &cfg, None, |_, _| {}).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.curve, b.curve);
    assert!(dir.path().join("periodic/step_000002/manifest.json").exists());
    assert!(!dir.path().join("periodic/step_000004").exists());
    let csv = format_loss_csv(&a.curve);
    assert!(csv.starts_with("step,bucket,loss\n1,"));
    let totals = a.curve.iter().filter(|r| r.bucket == "total").count();
    assert_eq!(totals, 4);
    let labels: Vec<String> = LossBucket::all(3).into_iter().map(LossBucket::label).collect();
    assert!(a.curve.iter().all(|r| r.bucket == "total" || labels.contains(&r.bucket)));

    let c = train(Component::Classifier, &scenes, &cfg, None, |_, _| {}).unwrap();
    assert_eq!(c.net.config().head.width(), 5);
    assert!(c.curve.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn non_finite_audio_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenes = small_scenes(1, 3);
    let cfg = {
        let mut c = tiny_train_config(3);
        c.scaler_scenes = 0;
        c
    };
    scenes[0].features.data.iter_mut().for_each(|v| *v = f32::NAN);
    let err = train(Component::Localizer, &scenes, &cfg, Some(dir.path()), |_, _| {}).unwrap_err();
    match err {
        Error::Diverged { step, checkpoint } => {
            assert_eq!(step, 1);
            let (net, _) = load_checkpoint(&checkpoint).unwrap();
            assert_eq!(net, init_net(Component::Localizer, &scenes, &cfg).unwrap());
        }
        e => panic!("unexpected {e}"),
    }
}

/// Finite differences of the full batch loss, through the min over
/// targets. Probes that change any argmin or activation are skipped.
#[test]
fn localizer_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = NetConfig {
        head: Head::Localizer,
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
    };
    let frames = 4;
    let mut items = Vec::new();
    for _ in 0..3 {
        let mut feat = FeatureTensor::zeros(N_FEATURE_CHANNELS, frames * FRAMES_PER_LABEL, 8);
        feat.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let events: Vec<_> = (0..frames)
            .flat_map(|f| (0..f % 4).map(move |t| (f, t)))
            .map(|(f, t)| crate::tracks::FrameEvent {
                frame: f,
                track_id: t,
                class_id: 0,
                doa: random_unit_doa(&mut rng),
            })
            .collect();
        let st = stack_tracks(&events, 3, frames, 1).unwrap();
        let r = rng.random_range(0..2);
        let cond = conditioning_rows(&st, r, 0.0, &mut rng).unwrap();
        items.push((feat, cond, localizer_targets(&st, r)));
    }
    let mut net = ConditionedNet::<f64>::new(cfg, &mut rng).unwrap();
    let eval = |net: &ConditionedNet<f64>| {
        let tapes: Vec<_> = items.iter().map(|(f, c, _)| net.forward(f, c).unwrap()).collect();
        let outs: Vec<Vec<f64>> = tapes.iter().map(|t| t.output().data.clone()).collect();
        let targets: Vec<&[FrameTarget]> = items.iter().map(|i| i.2.as_slice()).collect();
        let bl = localizer_batch_loss(&targets, &outs, 3);
        let mut sig: Vec<u64> = tapes.iter().map(|t| t.activation_signature()).collect();
        for (o, (_, _, tg)) in outs.iter().zip(&items) {
            for (f, t) in tg.iter().enumerate() {
                let (_, _, choice) = localizer_frame_loss_grad(&t.doas, [o[3 * f], o[3 * f + 1], o[3 * f + 2]]);
                sig.push(choice.map_or(u64::MAX, |c| c as u64));
            }
        }
        (bl, tapes, sig)
    };
    let (bl, tapes, base_sig) = eval(&net);
    let mut analytic = vec![0.0; net.n_params()];
    for (t, g) in tapes.iter().zip(&bl.grads) {
        for (a, b) in analytic.iter_mut().zip(net.backward(t, g).unwrap()) {
            *a += b;
        }
    }
    let h = 1e-3;
    let mut accepted = 0;
    let mut idx: Vec<usize> = (0..20).collect();
    idx.extend((0..300).map(|_| rng.random_range(0..net.n_params())));
    for i in idx {
        let orig = net.params.values[i];
        net.params.values[i] = orig + h;
        let (lp, _, sp) = eval(&net);
        net.params.values[i] = orig - h;
        let (lm, _, sm) = eval(&net);
        net.params.values[i] = orig;
        if sp != base_sig || sm != base_sig {
            continue;
        }
        let numeric = (lp.total - lm.total) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        assert!(rel < 1e-4, "{}[{i}]: analytic {a}, numeric {numeric}", net.params.name_of(i).unwrap());
        accepted += 1;
    }
    assert!(accepted >= 100, "only {accepted} smooth probes");
}

#[test]
fn empty_conditioning_matches_origin() {
    let st = stack_tracks(&[], 3, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = conditioning_rows(&st, 1, 5.0, &mut rng).unwrap();
    assert_eq!(c, vec![Vec::<Doa>::new(), Vec::new()]);
}
