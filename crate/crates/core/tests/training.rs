use gatn_core::gradcheck::toy_model_config;
use gatn_core::localizer::PixelBox;
use gatn_core::model::{self, ModelConfig, ModelParams};
use gatn_core::synthdata::{gen_split, SynthConfig, SynthSample};
use gatn_core::tensor::{Tape, Tensor4};
use gatn_core::training::{self, evaluate, lambda_schedule, lr_schedule, train, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

/// Two classes told apart by which half of the image is bright.
fn separable(n_per_class: usize) -> Vec<SynthSample> {
    let mut rng = gatn_core::rng::stream(99, 0);
    let mut out = Vec::new();
    for label in 0..2 {
        for i in 0..n_per_class {
            let image = Tensor4::from_fn([1, 3, 32, 32], |_, _, _, w| {
                let bright = (w < 16) == (label == 0);
                (if bright { 0.8 } else { 0.2 }) + rng.gen_range(-0.05..0.05)
            });
            let half = if label == 0 { PixelBox::new(0, 0, 32, 16) } else { PixelBox::new(0, 16, 32, 32) };
            out.push(SynthSample {
                image,
                label,
                gt_boxes: vec![half],
                seed: (label * n_per_class + i) as u64,
            });
        }
    }
    out
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.store().values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let cfg = toy_model_config();
    let tc = TrainConfig { lr0: 0.0, ..toy_train(1) };
    let (params, log) = train(&separable(4), &cfg, &tc, |_| {}).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(bits(&params), bits(&ModelParams::init(&cfg, tc.seed).unwrap()));
}

#[test]
fn clipped_step_moves_params_by_at_most_the_limit() {
    let cfg = toy_model_config();
    let data = separable(4);
    let limit = 1e-3;
    let tc = TrainConfig {
        lr0: 1.0,
        momentum: 0.0,
        batch_size: data.len(),
        clip_norm: Some(limit),
        ..toy_train(1)
    };
    let (params, log) = train(&data, &cfg, &tc, |_| {}).unwrap();
    assert!(log[0].max_grad_norm > limit, "fixture gradient too small to clip");
    let init = ModelParams::init(&cfg, tc.seed).unwrap();
    let moved: f64 = params
        .store()
        .values()
        .iter()
        .zip(init.store().values())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    assert!((moved.sqrt() - limit).abs() < 1e-12, "step norm {}", moved.sqrt());
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = toy_model_config();
    let data = separable(4);
    let (a, la) = train(&data, &cfg, &toy_train(3), |_| {}).unwrap();
    let (b, lb) = train(&data, &cfg, &toy_train(3), |_| {}).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la, lb);
    let (c, _) = train(&data, &cfg, &TrainConfig { seed: 1, ..toy_train(3) }, |_| {}).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn separable_toy_set_is_fit() {
    let cfg = toy_model_config();
    let data = separable(8);
    let (params, log) = train(&data, &cfg, &toy_train(30), |_| {}).unwrap();
    assert_eq!(log.len(), 30);
    assert_eq!(evaluate(&data, &params, &cfg).unwrap().accuracy, 1.0);
}

fn head_grads(lambda: f64) -> (f64, f64) {
    let cfg = toy_model_config();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let image = separable(1).remove(0).image;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let g = model::forward_graph(&mut tape, &b, &params, &image, &cfg).unwrap();
    let loss = training::multi_task_loss_on_tape(&mut tape, g.logits_global, g.logits_fusion, 1, lambda).unwrap();
    let grads = tape.backward(loss, 1.0).unwrap();
    let norm = |v| grads.get(v).map_or(0.0, |t: &Tensor4| t.data().iter().map(|x| x.abs()).sum());
    let fusion = params.fusion_head().unwrap();
    (norm(b.var(params.global_head().weight)), norm(b.var(fusion.weight)))
}

#[test]
fn lambda_endpoints_silence_one_head() {
    let (global, fusion) = head_grads(0.0);
    assert_eq!(global, 0.0);
    assert!(fusion > 0.0);
    let (global, fusion) = head_grads(1.0);
    assert!(global > 0.0);
    assert_eq!(fusion, 0.0);
}

#[test]
fn default_config_loss_falls_over_first_five_epochs() {
    let synth = SynthConfig::default();
    let model = ModelConfig::desk(synth.classes);
    let (mut first, mut fifth) = (0.0, 0.0);
    for seed in 0..3u64 {
        let (train_set, _) = gen_split(50, 20, 10_000 * seed, &synth).unwrap();
        let cfg = TrainConfig { epochs: 5, seed, ..TrainConfig::default() };
        let (_, log) = train(&train_set, &model, &cfg, |_| {}).unwrap();
        first += log[0].loss / 3.0;
        fifth += log[4].loss / 3.0;
    }
    assert!(fifth < first, "mean loss {first} -> {fifth}");
}

#[test]
fn empty_dataset_and_bad_labels_are_rejected() {
    let cfg = toy_model_config();
    assert!(train(&[], &cfg, &toy_train(1), |_| {}).is_err());
    let mut data = separable(1);
    data[0].label = 9;
    assert!(train(&data, &cfg, &toy_train(1), |_| {}).is_err());
}

proptest! {
    #[test]
    fn schedules_never_increase(epoch in 0usize..1000, every in 1usize..100, factor in 0.01..1.0f64) {
        let cfg = TrainConfig { lr_decay_every: every, lr_decay_factor: factor, lambda_every: every, ..TrainConfig::default() };
        prop_assert!(lr_schedule(epoch + 1, &cfg) <= lr_schedule(epoch, &cfg));
        prop_assert!(lambda_schedule(epoch + 1, &cfg) <= lambda_schedule(epoch, &cfg));
        prop_assert!(lambda_schedule(epoch, &cfg) >= cfg.lambda_floor);
    }
}
