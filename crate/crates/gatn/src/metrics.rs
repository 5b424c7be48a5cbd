//! JSON-lines training log.

use std::io::Write;

use gatn_core::training::{EpochLog, Metrics};
use serde::Serialize;

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    lambda: f64,
    lr: f64,
    loss: f64,
    acc: f64,
    loc_iou: Option<f64>,
    max_grad_norm: f64,
}

/// One log line, without the trailing newline.
pub fn epoch_json(log: &EpochLog) -> String {
    serde_json::to_string(&EpochLine {
        epoch: log.epoch,
        lambda: log.lambda,
        lr: log.lr,
        loss: log.loss,
        acc: log.acc,
        loc_iou: log.loc_iou,
        max_grad_norm: log.max_grad_norm,
    })
    .expect("epoch line serializes")
}

pub fn write_epoch(out: &mut impl Write, log: &EpochLog) -> std::io::Result<()> {
    writeln!(out, "{}", epoch_json(log))?;
    out.flush()
}

#[derive(Serialize)]
struct EvalReport<'a> {
    samples: usize,
    accuracy: f64,
    per_class_accuracy: &'a [f64],
    loc_iou: Option<f64>,
    gt_box_coverage: Option<f64>,
}

pub fn eval_json(metrics: &Metrics, samples: usize) -> String {
    serde_json::to_string_pretty(&EvalReport {
        samples,
        accuracy: metrics.accuracy,
        per_class_accuracy: &metrics.per_class_accuracy,
        loc_iou: metrics.mean_loc_iou,
        gt_box_coverage: metrics.gt_box_coverage,
    })
    .expect("report serializes")
}
