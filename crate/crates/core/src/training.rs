//! Multi-task training: `λ·CE(Y_g) + (1 − λ)·CE(Y_f)` with step schedules
//! for λ and the learning rate, momentum SGD, and evaluation metrics.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::localizer::PixelBox;
use crate::model::{self, ForwardOutput, ModelConfig, ModelParams};
use crate::rng;
use crate::synthdata::SynthSample;
use crate::tensor::{ops, Tape, Tensor4, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub lambda0: f64,
    pub lambda_step: f64,
    pub lambda_every: usize,
    pub lambda_floor: f64,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this global L2 norm. Without
    /// normalization layers, plain SGD at the default rate occasionally
    /// blows up and leaves every ReLU dead.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr0: 0.05,
            lr_decay_every: 50,
            lr_decay_factor: 0.1,
            lambda0: 1.0,
            lambda_step: 0.1,
            lambda_every: 20,
            lambda_floor: 0.1,
            momentum: 0.9,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.lambda_every == 0 {
            return Err(Error::usage("train: batch_size, lr_decay_every and lambda_every must be positive"));
        }
        if !(self.lr0 >= 0.0) || !(self.lr_decay_factor > 0.0) || !(self.lambda_step >= 0.0) {
            return Err(Error::usage("train: lr0, lr_decay_factor and lambda_step must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda_floor) || !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::usage("train: lambda0 and lambda_floor must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("train: momentum must lie in [0, 1)"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::usage("train: clip_norm must be positive"));
        }
        Ok(())
    }
}

/// `max(floor, λ₀ − step · ⌊epoch / every⌋)`.
pub fn lambda_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.lambda_every) as f64;
    (config.lambda0 - config.lambda_step * steps).max(config.lambda_floor)
}

/// `lr₀ · factor^⌊epoch / every⌋`, evaluated as a division by `(1/factor)^k`
/// so that decimal factors such as 0.1 hit 0.005, 0.0005, ... exactly.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_decay_every) as i32;
    config.lr0 / libm::pow(1.0 / config.lr_decay_factor, k as f64)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    ops::cross_entropy(logits, label)
}

pub fn multi_task_loss(logits_global: &[f64], logits_fusion: &[f64], label: usize, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage("multi_task_loss: lambda must lie in [0, 1]"));
    }
    Ok(lambda * cross_entropy(logits_global, label)? + (1.0 - lambda) * cross_entropy(logits_fusion, label)?)
}

/// Records the multi-task loss. A zero weight on either branch stops its
/// gradient in backward.
pub fn multi_task_loss_on_tape(tape: &mut Tape, logits_global: Var, logits_fusion: Var, label: usize, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage("multi_task_loss: lambda must lie in [0, 1]"));
    }
    let lg = tape.cross_entropy(logits_global, &[label])?;
    let lf = tape.cross_entropy(logits_fusion, &[label])?;
    let a = tape.scale(lg, lambda);
    let b = tape.scale(lf, 1.0 - lambda);
    tape.add(a, b)
}

/// `v ← momentum·v + g; w ← w − lr·v`.
pub fn sgd_step(params: &mut [Tensor4], grads: &[Tensor4], lr: f64, momentum: f64, velocity: &mut [Tensor4]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape("sgd_step", "parameter", params.len(), grads.len().min(velocity.len())));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if w.dims() != g.dims() || w.dims() != v.dims() {
            return Err(Error::shape("sgd_step", "data", w.len(), g.len()));
        }
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Training accuracy from the forward passes of the epoch.
    pub acc: f64,
    /// Mean union IoU on samples with ground-truth boxes.
    pub loc_iou: Option<f64>,
    /// Largest batch gradient norm seen, before clipping.
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean IoU of selected-box union vs ground-truth union.
    pub mean_loc_iou: Option<f64>,
    /// Fraction of ground-truth boxes with more than half their area inside
    /// a single selected box.
    pub gt_box_coverage: Option<f64>,
}

/// Rasterises a union of boxes onto an `h × w` grid.
fn union_mask(boxes: &[PixelBox], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for b in boxes {
        for r in b.row0..b.row1.min(h) {
            mask[r * w + b.col0.min(w)..r * w + b.col1.min(w)].fill(true);
        }
    }
    mask
}

/// IoU between the union of `predicted` and the union of `truth`.
pub fn union_iou(predicted: &[PixelBox], truth: &[PixelBox], dims: (usize, usize)) -> f64 {
    let a = union_mask(predicted, dims.0, dims.1);
    let b = union_mask(truth, dims.0, dims.1);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(&b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of `truth` boxes with more than half their area inside one of `predicted`.
pub fn covered_boxes(predicted: &[PixelBox], truth: &[PixelBox]) -> usize {
    truth
        .iter()
        .filter(|t| predicted.iter().any(|p| 2 * p.intersection(t) > t.area()))
        .count()
}

struct SampleStep {
    loss: f64,
    output: ForwardOutput,
    grads: Vec<Option<Tensor4>>,
}

fn sample_step(params: &ModelParams, config: &ModelConfig, sample: &SynthSample, lambda: f64) -> Result<SampleStep> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let graph = model::forward_graph(&mut tape, &binding, params, &sample.image, config)?;
    let loss = multi_task_loss_on_tape(&mut tape, graph.logits_global, graph.logits_fusion, sample.label, lambda)?;
    let mut grads = tape.backward(loss, 1.0)?;
    let output = ForwardOutput::from_graph(&tape, &graph);
    Ok(SampleStep {
        loss: tape.value(loss).data()[0],
        output,
        grads: binding.vars().iter().map(|&v| grads.take(v)).collect(),
    })
}

fn check_dataset(dataset: &[SynthSample], classes: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::usage("train: dataset is empty"));
    }
    if dataset.iter().any(|s| s.label >= classes) {
        return Err(Error::usage("train: label out of range for the model's class count"));
    }
    Ok(())
}

/// Mini-batch SGD on the multi-task loss.
///
/// Each epoch shuffles sample order with Fisher-Yates from a seed derived
/// from `(seed, epoch)`. Batch gradients are per-sample gradients summed in
/// batch order and divided by the batch length. `on_epoch` sees every log
/// line as it is produced. With the fusion branch disabled λ is pinned to 1.
pub fn train(
    dataset: &[SynthSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>)> {
    config.validate()?;
    check_dataset(dataset, model_config.classes)?;
    let mut params = ModelParams::init(model_config, config.seed)?;
    let mut velocity: Vec<Tensor4> = params.store().values().iter().map(|v| Tensor4::zeros(v.dims())).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lambda = if model_config.fusion {
            lambda_schedule(epoch, config)
        } else {
            1.0
        };
        let lr = lr_schedule(epoch, config);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, 0xE90C_0000 + epoch as u64));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        let mut max_grad_norm: f64 = 0.0;
        for batch in order.chunks(config.batch_size) {
            params.store_mut().zero_grads();
            for &i in batch {
                let sample = &dataset[i];
                let step = sample_step(&params, model_config, sample, lambda)?;
                loss_sum += step.loss;
                correct += (model::predict_from_logits(&step.output.logits_fusion).class == sample.label) as usize;
                if !sample.gt_boxes.is_empty() && model_config.fusion {
                    let dims = (sample.image.h(), sample.image.w());
                    iou_sum += union_iou(&step.output.pixel_boxes, &sample.gt_boxes, dims);
                    iou_n += 1;
                }
                let (_, slots) = params.store_mut().values_and_grads();
                for (slot, g) in slots.iter_mut().zip(step.grads) {
                    if let Some(g) = g {
                        slot.add_assign(&g);
                    }
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            let (values, grads) = params.store_mut().values_and_grads();
            let norm = scale * libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
            max_grad_norm = max_grad_norm.max(norm);
            if let Some(limit) = config.clip_norm {
                if norm > limit {
                    scale *= limit / norm;
                }
            }
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            sgd_step(values, grads, lr, config.momentum, &mut velocity)?;
        }

        let entry = EpochLog {
            epoch,
            lambda,
            lr,
            loss: loss_sum / dataset.len() as f64,
            acc: correct as f64 / dataset.len() as f64,
            loc_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
            max_grad_norm,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((params, log))
}

/// Accuracy from `Y_f` plus localization agreement on annotated samples.
pub fn evaluate(dataset: &[SynthSample], params: &ModelParams, config: &ModelConfig) -> Result<Metrics> {
    evaluate_with(dataset, config, |s| model::forward(&s.image, params, config))
}

/// [`evaluate`] over precomputed or custom forward outputs.
pub fn evaluate_with(
    dataset: &[SynthSample],
    config: &ModelConfig,
    mut forward: impl FnMut(&SynthSample) -> Result<ForwardOutput>,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::usage("evaluate: dataset is empty"));
    }
    let k = config.classes;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let (mut covered, mut gt_total) = (0usize, 0usize);
    for s in dataset {
        let out = forward(s)?;
        let pred = model::predict_from_logits(&out.logits_fusion).class;
        if s.label < k {
            totals[s.label] += 1;
            hits[s.label] += (pred == s.label) as usize;
        }
        if !s.gt_boxes.is_empty() && config.fusion {
            iou_sum += union_iou(&out.pixel_boxes, &s.gt_boxes, (s.image.h(), s.image.w()));
            iou_n += 1;
            covered += covered_boxes(&out.pixel_boxes, &s.gt_boxes);
            gt_total += s.gt_boxes.len();
        }
    }
    let per_class_accuracy = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok(Metrics {
        accuracy: hits.iter().sum::<usize>() as f64 / dataset.len() as f64,
        per_class_accuracy,
        mean_loc_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        gt_box_coverage: (gt_total > 0).then(|| covered as f64 / gt_total as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(cross_entropy(&[0.3; 4], 2).unwrap(), libm::log(4.0), epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy(&[0.0; 4], 0).unwrap(), 1.3862944, epsilon = 1e-7);
        assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.3132617, epsilon = 1e-7);
        assert!(cross_entropy(&[1.0, 0.0], 2).is_err());
        let mut prev = f64::INFINITY;
        for z in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let l = cross_entropy(&[z, 0.0, 0.0], 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn multi_task_endpoints() {
        let g = [0.2, -1.0, 0.5];
        let f = [1.5, 0.1, -0.3];
        let cg = cross_entropy(&g, 1).unwrap();
        let cf = cross_entropy(&f, 1).unwrap();
        assert_eq!(multi_task_loss(&g, &f, 1, 1.0).unwrap(), cg);
        assert_eq!(multi_task_loss(&g, &f, 1, 0.0).unwrap(), cf);
        assert!(multi_task_loss(&g, &f, 1, 1.5).is_err());
        let mut tape = Tape::new();
        let a = tape.constant(Tensor4::matrix(1, 3, g.to_vec()).unwrap());
        let b = tape.constant(Tensor4::matrix(1, 3, f.to_vec()).unwrap());
        let l = multi_task_loss_on_tape(&mut tape, a, b, 1, 0.5).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 0.5 * cg + 0.5 * cf, epsilon = 1e-15);
    }

    #[test]
    fn weighted_sum_arithmetic() {
        // λ = 0.5 with CE_g = 2, CE_f = 1.
        assert_eq!(0.5 * 2.0 + (1.0 - 0.5) * 1.0, 1.5);
    }

    #[test]
    fn schedules() {
        let c = TrainConfig::default();
        assert_eq!(lambda_schedule(0, &c), 1.0);
        assert_eq!(lambda_schedule(19, &c), 1.0);
        assert_eq!(lambda_schedule(20, &c), 0.9);
        assert_eq!(lambda_schedule(500, &c), 0.1);
        assert_eq!(lr_schedule(0, &c), 0.05);
        assert_eq!(lr_schedule(49, &c), 0.05);
        assert_eq!(lr_schedule(50, &c), 0.005);
        assert_eq!(lr_schedule(149, &c), 0.0005);
        for e in 0..400 {
            assert!(lambda_schedule(e + 1, &c) <= lambda_schedule(e, &c));
            assert!(lr_schedule(e + 1, &c) <= lr_schedule(e, &c));
        }
    }

    #[test]
    fn sgd_examples() {
        let mut w = vec![Tensor4::scalar(1.0)];
        let mut v = vec![Tensor4::scalar(0.0)];
        sgd_step(&mut w, &[Tensor4::scalar(0.5)], 0.1, 0.0, &mut v).unwrap();
        assert_abs_diff_eq!(w[0].data()[0], 0.95, epsilon = 1e-15);

        let mut w = vec![Tensor4::scalar(0.0)];
        let mut v = vec![Tensor4::scalar(0.0)];
        for _ in 0..2 {
            sgd_step(&mut w, &[Tensor4::scalar(1.0)], 0.1, 0.9, &mut v).unwrap();
        }
        assert_abs_diff_eq!(w[0].data()[0], -0.29, epsilon = 1e-15);

        let mut w = vec![Tensor4::scalar(3.0)];
        let mut v = vec![Tensor4::scalar(2.0)];
        sgd_step(&mut w, &[Tensor4::scalar(0.0)], 0.0, 0.5, &mut v).unwrap();
        assert_eq!(w[0].data()[0], 3.0);
        assert_eq!(v[0].data()[0], 1.0);

        let mut w = vec![Tensor4::zeros([2, 1, 1, 1])];
        let mut v = vec![Tensor4::zeros([2, 1, 1, 1])];
        assert!(sgd_step(&mut w, &[Tensor4::scalar(1.0)], 0.1, 0.0, &mut v).is_err());
    }

    #[test]
    fn iou_and_coverage() {
        let a = PixelBox::new(0, 0, 4, 4);
        let b = PixelBox::new(2, 2, 6, 6);
        assert_eq!(union_iou(&[a], &[a], (8, 8)), 1.0);
        assert_abs_diff_eq!(union_iou(&[a], &[b], (8, 8)), 4.0 / 28.0, epsilon = 1e-15);
        assert_eq!(union_iou(&[a, b], &[b, a], (8, 8)), 1.0);
        assert_eq!(covered_boxes(&[a], &[b]), 0);
        assert_eq!(covered_boxes(&[PixelBox::new(1, 1, 6, 6)], &[a, b]), 2);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = ModelConfig::desk(4);
        let err = train(&[], &cfg, &TrainConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        let params = ModelParams::zeros(&cfg).unwrap();
        assert!(evaluate(&[], &params, &cfg).is_err());
    }
}
