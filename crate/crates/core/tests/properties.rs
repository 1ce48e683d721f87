//! Invariants checked over random inputs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use social_mae::audio::{AudioFrontendConfig, Spectrogram};
use social_mae::config::RunConfig;
use social_mae::data::{generate_clips, Label, SyntheticSpec};
use social_mae::model::{ModelConfig, SocialMae};
use social_mae::numerics::{finite_difference_check, GradcheckConfig, Graph, ParamStore, Tensor, Var};
use social_mae::objectives::reconstruction_loss;
use social_mae::tokenizer::{
    embed, patchify_audio, patchify_video, sample_mask, select_visible, tokenize_audio, tokenize_video, Geometry,
    Modality, PatchConfig, PositionalInit,
};
use social_mae::training::{pretrain, pretrain_objective, scheduled_lr, seeded, Dataset, PretrainItem};

fn uniform(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn uniform_f32(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    uniform(shape, rng, 0.0, 1.0).cast()
}

const D: usize = 3;

/// Apply `ops` to the `[D, D]` parameter `x`; every op keeps the shape.
fn compose(g: &mut Graph<'_, f64>, ops: &[u8], target: &Tensor<f64>) -> Var {
    let x0 = g.param_named("x").unwrap();
    let w = g.param_named("w").unwrap();
    let b = g.param_named("b").unwrap();
    let gamma = g.param_named("gamma").unwrap();
    let beta = g.param_named("beta").unwrap();
    let mut h = x0;
    for op in ops {
        h = match op % 11 {
            0 => g.linear(h, w, b).unwrap(),
            1 => g.gelu(h),
            2 => g.sigmoid(h),
            3 => g.layer_norm(h, gamma, beta, 1e-5).unwrap(),
            4 => g.softmax_rows(h).unwrap(),
            5 => g.l2_normalize_rows(h, 1e-8).unwrap(),
            6 => g.mul(h, x0).unwrap(),
            7 => g.scale(h, 0.7),
            8 => g.log_softmax_rows(h).unwrap(),
            9 => g.matmul_t(h, x0).unwrap(),
            _ => g.transpose(h).unwrap(),
        };
    }
    let t = g.constant(target.clone());
    let weighted = g.mul(h, t).unwrap();
    g.mean(weighted).unwrap()
}

fn composition_store(rng: &mut impl Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("x", uniform(&[D, D], rng, -1.0, 1.0)).unwrap();
    store.insert("w", uniform(&[D, D], rng, -1.0, 1.0)).unwrap();
    store.insert("b", uniform(&[D], rng, -0.5, 0.5)).unwrap();
    store.insert("gamma", uniform(&[D], rng, 0.5, 1.5)).unwrap();
    store.insert("beta", uniform(&[D], rng, -0.5, 0.5)).unwrap();
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_compositions_pass_gradcheck(ops in prop::collection::vec(0u8..11, 1..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = composition_store(&mut rng);
        let target = uniform(&[D, D], &mut rng, -1.0, 1.0);
        let grads = {
            let mut g = Graph::new(&store);
            let loss = compose(&mut g, &ops, &target);
            g.backward(loss).unwrap()
        };
        grads.accumulate_into(&mut store);
        let cfg = GradcheckConfig { samples: 40, step: 1e-5, tolerance: 1e-5, ..Default::default() };
        let report = finite_difference_check(
            &mut store,
            |s| {
                let mut g = Graph::new(s);
                let loss = compose(&mut g, &ops, &target);
                Ok(g.value(loss).item())
            },
            &cfg,
            &mut rng,
        )
        .unwrap();
        prop_assert!(report.passed(), "ops {:?}: worst {:?}", ops, report.worst());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax(
        rows in 1usize..5,
        cols in 1usize..9,
        scale in 0.1f64..30.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[rows, cols], &mut rng, -scale, scale);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let ls = g.log_softmax_rows(v).unwrap();
        let (s, ls) = (g.value(s), g.value(ls));
        for r in 0..rows {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for c in 0..cols {
                let p = s.at(r, c);
                prop_assert!(p >= 0.0);
                if p > 1e-300 {
                    prop_assert!((p.ln() - ls.at(r, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn schedule_matches_closed_form(base in 1e-6f64..1.0, decay in 0.05f64..1.0, every in 1usize..10, epoch in 0usize..200) {
        let got = scheduled_lr(base, decay, every, epoch);
        let want = base * decay.powf((epoch / every) as f64);
        prop_assert!((got - want).abs() <= 1e-12 * want);
    }
}

fn desk_geometry() -> Geometry {
    Geometry::new(&AudioFrontendConfig::desk(), &PatchConfig::desk()).unwrap()
}

fn spectrogram(n_mels: usize, frames: usize, rng: &mut impl Rng) -> Spectrogram {
    Spectrogram {
        grid: uniform(&[n_mels, frames], rng, -2.0, 2.0).cast(),
        frame_count: frames,
    }
}

fn frames_for(geom: &Geometry, rng: &mut impl Rng) -> Tensor<f32> {
    uniform_f32(&[geom.video_frames, geom.image_size, geom.image_size, geom.channels], rng)
}

fn desk_model(seed: u64) -> (ParamStore<f32>, SocialMae) {
    let mut store = ParamStore::new();
    let model = SocialMae::init(
        &mut store,
        &ModelConfig::desk(),
        &desk_geometry(),
        PositionalInit::TruncNormal,
        &mut seeded(seed, 0),
    )
    .unwrap();
    (store, model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embeddings_minus_position_and_modality_are_the_projection(seed in any::<u64>(), audio in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, model) = desk_model(seed);
        let geom = desk_geometry();
        let patches = if audio {
            patchify_audio(&spectrogram(geom.n_mels, geom.frames, &mut rng), &geom).unwrap()
        } else {
            patchify_video(&frames_for(&geom, &mut rng), &geom).unwrap()
        };
        let mut g = Graph::new(&store);
        let seq = embed(&mut g, &patches, &model.tables).unwrap();
        let e = g.value(seq.embeddings);

        let t = &model.tables;
        let (w, b, pos, m) = match patches.modality {
            Modality::Audio => (t.audio_proj_w, t.audio_proj_b, t.audio_pos, t.modality_audio),
            Modality::Video => (t.video_proj_w, t.video_proj_b, t.video_pos, t.modality_video),
        };
        let (w, b, pos, m) = (&store.get(w).value, &store.get(b).value, &store.get(pos).value, &store.get(m).value);
        let dim = b.len();
        for i in 0..patches.len() {
            let raw = patches.data.row(i);
            for j in 0..dim {
                let proj: f64 = b.data()[j] as f64
                    + raw.iter().enumerate().map(|(k, x)| *x as f64 * w.at(k, j) as f64).sum::<f64>();
                let residual = e.at(i, j) as f64 - pos.at(i, j) as f64 - m.data()[j] as f64;
                prop_assert!((residual - proj).abs() < 1e-4, "token {i} dim {j}: {residual} vs {proj}");
            }
        }
        prop_assert_eq!(seq.positions, (0..patches.len()).collect::<Vec<_>>());
    }

    #[test]
    fn pooled_is_the_token_mean(seed in any::<u64>(), ratio in 0.0f64..0.9, audio in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, model) = desk_model(seed);
        let geom = desk_geometry();
        let mut g = Graph::new(&store);
        let seq = if audio {
            tokenize_audio(&mut g, &spectrogram(geom.n_mels, geom.frames, &mut rng), &model.tables, &geom).unwrap()
        } else {
            tokenize_video(&mut g, &frames_for(&geom, &mut rng), &model.tables, &geom).unwrap()
        };
        let plan = sample_mask(seq.len(), ratio, &mut rng).unwrap();
        let visible = select_visible(&mut g, &seq, &plan).unwrap();
        let out = model.encode_unimodal(&mut g, &visible).unwrap();
        let (tokens, pooled) = (g.value(out.tokens), g.value(out.pooled));
        let n = tokens.shape()[0];
        prop_assert_eq!(n, plan.visible.len());
        for j in 0..pooled.len() {
            let mean = (0..n).map(|i| tokens.at(i, j) as f64).sum::<f64>() / n as f64;
            prop_assert!((mean - pooled.data()[j] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn visible_predictions_get_no_reconstruction_gradient(seed in any::<u64>(), n in 2usize..40, d in 1usize..12, ratio in 0.05f64..0.95, normalize in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_mask(n, ratio, &mut rng).unwrap();
        prop_assume!(!plan.masked.is_empty());
        let targets = uniform_f32(&[n, d], &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let pred = g.variable(uniform(&[n, d], &mut rng, -1.0, 1.0));
        let loss = reconstruction_loss(&mut g, pred, &targets, &plan, normalize).unwrap().unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.wrt(pred).unwrap();
        for &i in &plan.visible {
            prop_assert!(gp.row(i).iter().all(|x| *x == 0.0), "visible row {i} has gradient");
        }
    }
}

/// Random geometry built from whole patches.
fn geometry_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..3, 1usize..3).prop_map(|(m, f, s, t)| (16 * m, 16 * f, 16 * s, 2 * t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decoder_predicts_every_patch((n_mels, frames, size, video_frames) in geometry_strategy(), ra in 0.0f64..0.95, rv in 0.0f64..0.95, seed in any::<u64>()) {
        let audio_cfg = AudioFrontendConfig { n_mels, target_frames: frames, ..AudioFrontendConfig::desk() };
        let patch = PatchConfig { image_size: size, video_frames, ..PatchConfig::desk() };
        let geom = Geometry::new(&audio_cfg, &patch).unwrap();
        let mut store = ParamStore::<f32>::new();
        let model = SocialMae::init(&mut store, &ModelConfig::desk(), &geom, PositionalInit::Sinusoidal, &mut seeded(seed, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = spectrogram(n_mels, frames, &mut rng);
        let video = frames_for(&geom, &mut rng);

        let mut g = Graph::new(&store);
        let a = tokenize_audio(&mut g, &spec, &model.tables, &geom).unwrap();
        let v = tokenize_video(&mut g, &video, &model.tables, &geom).unwrap();
        let (na, nv) = (geom.tokens(Modality::Audio), geom.tokens(Modality::Video));
        prop_assert_eq!((a.len(), v.len()), (na, nv));
        let ap = sample_mask(na, ra, &mut rng).unwrap();
        let vp = sample_mask(nv, rv, &mut rng).unwrap();
        let a_vis = select_visible(&mut g, &a, &ap).unwrap();
        let v_vis = select_visible(&mut g, &v, &vp).unwrap();
        let out = model.encode(&mut g, &a_vis, &v_vis).unwrap();
        prop_assert_eq!(g.shape(out.joint)[0], ap.visible.len() + vp.visible.len());
        let rec = model.decode(&mut g, out.joint, &ap, &vp).unwrap();
        prop_assert_eq!(g.shape(rec.audio), &[na, geom.patch_volume(Modality::Audio)][..]);
        prop_assert_eq!(g.shape(rec.video), &[nv, geom.patch_volume(Modality::Video)][..]);
    }
}

/// Loss and every parameter gradient of one desk pre-training batch.
fn objective_bits(seed: u64) -> (u64, Vec<Vec<u32>>) {
    let (store, model) = desk_model(seed);
    let geom = desk_geometry();
    let cfg = RunConfig::desk();
    let mut rng = seeded(seed, 2);
    let specs: Vec<_> = (0..2).map(|_| spectrogram(geom.n_mels, geom.frames, &mut rng)).collect();
    let items: Vec<_> = specs
        .iter()
        .map(|s| PretrainItem {
            spectrogram: s,
            frames: frames_for(&geom, &mut rng),
            audio_plan: sample_mask(geom.tokens(Modality::Audio), 0.75, &mut rng).unwrap(),
            video_plan: sample_mask(geom.tokens(Modality::Video), 0.75, &mut rng).unwrap(),
        })
        .collect();
    let mut g = Graph::new(&store);
    let terms = pretrain_objective(&mut g, &model, &items, &cfg.loss).unwrap();
    let loss = g.value(terms.total).item().to_bits() as u64;
    let grads = g.backward(terms.total).unwrap();
    let bits = grads.param_grads().map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect()).collect();
    (loss, bits)
}

#[test]
fn objective_and_gradients_are_bitwise_deterministic() {
    for seed in [0, 1, 17] {
        assert_eq!(objective_bits(seed), objective_bits(seed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn logged_learning_rates_follow_the_schedule(base in 1e-5f64..1e-2, decay in 0.1f64..1.0, every in 1usize..4, seed in 0u64..1000) {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.pretrain.epochs = 6;
        cfg.pretrain.batch_size = 2;
        cfg.pretrain.base_lr = base;
        cfg.pretrain.lr_decay = decay;
        cfg.pretrain.decay_every = every;
        cfg.pretrain.checkpoint_every = 0;
        let spec = SyntheticSpec { clips: 2, classes: 2, frames: 4, eval_fraction: 0.0, seed, ..Default::default() };
        let data = Dataset::synthetic(&cfg, &spec).unwrap();
        let outcome = pretrain(&cfg, &data, None).unwrap();
        prop_assert_eq!(outcome.steps.len(), 6);
        for step in &outcome.steps {
            prop_assert_eq!(step.lr, base * decay.powi((step.epoch / every) as i32));
        }
        let logged = outcome.log.column("lr").unwrap();
        for (text, step) in logged.iter().zip(&outcome.steps) {
            prop_assert_eq!(text.parse::<f64>().unwrap(), step.lr);
        }
    }
}

/// Nearest class centroid over hand-made features, trained on even rounds
/// of the round-robin labels and scored on odd ones.
fn centroid_accuracy(features: &[Vec<f64>], classes: &[usize], k: usize) -> f64 {
    let dim = features[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, (f, &c)) in features.iter().zip(classes).enumerate() {
        if (i / k) % 2 == 0 {
            counts[c] += 1;
            for (a, x) in centroids[c].iter_mut().zip(f) {
                *a += x;
            }
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= *n as f64);
    }
    let (mut right, mut total) = (0, 0);
    for (i, (f, &c)) in features.iter().zip(classes).enumerate() {
        if (i / k) % 2 == 1 {
            let dist = |m: &Vec<f64>| m.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            right += (best == c) as usize;
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn synthetic_classes_are_separable_from_raw_features() {
    let k = 4;
    let spec = SyntheticSpec { classes: k, clips: 64, seed: 5, ..Default::default() };
    let cfg = RunConfig::desk();
    let clips = generate_clips(&spec).unwrap();
    let data = Dataset::synthetic(&cfg, &spec).unwrap();
    let classes: Vec<usize> = clips.iter().map(|c| c.class).collect();
    for (ex, c) in data.examples.iter().zip(&classes) {
        assert_eq!(ex.label, Some(Label::Class(*c)));
    }

    // mean log-mel energy per band
    let audio: Vec<Vec<f64>> = data
        .examples
        .iter()
        .map(|ex| {
            let s = &ex.spectrogram;
            (0..s.n_mels())
                .map(|m| (0..s.frames()).map(|f| s.at(m, f) as f64).sum::<f64>() / s.frames() as f64)
                .collect()
        })
        .collect();
    // mean color per channel
    let video: Vec<Vec<f64>> = data
        .examples
        .iter()
        .map(|ex| {
            let ch = *ex.frames.shape().last().unwrap();
            let px = ex.frames.len() / ch;
            (0..ch)
                .map(|c| ex.frames.data().iter().skip(c).step_by(ch).map(|x| *x as f64).sum::<f64>() / px as f64)
                .collect()
        })
        .collect();
    let chance = 1.0 / k as f64;
    let (acc_a, acc_v) = (centroid_accuracy(&audio, &classes, k), centroid_accuracy(&video, &classes, k));
    assert!(acc_a >= chance + 0.5, "audio probe accuracy {acc_a}");
    assert!(acc_v >= chance + 0.5, "video probe accuracy {acc_v}");
}
