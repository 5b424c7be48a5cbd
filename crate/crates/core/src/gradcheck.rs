//! Finite-difference verification of every tape op and of the composed
//! network at toy sizes.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionConfig, DilatedWeights};
use crate::error::Result;
use crate::localizer::LocalizerConfig;
use crate::model::{self, BackboneConfig, ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::{ConvGeometry, GradCheck, Tape, Tensor4, Var};
use crate::training;

pub const EPSILON: f64 = 1e-5;
/// Bound for single ops and small compositions.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Bound for the full two-branch model.
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Uniform in `[-1, 1]`, nudged away from zero by at least `gap`.
fn random(rng: &mut ChaCha8Rng, dims: [usize; 4], gap: f64) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

type Check = Box<dyn Fn(&GradCheck) -> Result<f64>>;

struct Entry {
    name: &'static str,
    tolerance: f64,
    check: Check,
}

/// Max relative error of `loss(inputs)` w.r.t. each input in turn, with the
/// others held fixed.
fn check_each<F>(gc: &GradCheck, inputs: &[Tensor4], loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let err = gc.run(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { tape.constant(t.clone()) })
                    .collect();
                loss(tape, &vars)
            },
            &inputs[i],
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Contracts `v` against fixed random weights so every output element
/// carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let len = tape.value(v).len();
    let mut rng = rng::stream(seed, 0xC0DE);
    let row = tape.constant(uniform(&mut rng, [1, len, 1, 1], 0.5, 1.5));
    let zero = tape.constant(Tensor4::zeros([1, 1, 1, 1]));
    let flat = tape.reshape(v, [1, len, 1, 1])?;
    tape.linear(flat, row, zero)
}

/// Toy two-branch configuration: 2 classes, 32×32 input, C = 8, k = 2.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        classes: 2,
        image_channels: 3,
        global: BackboneConfig {
            stage_channels: vec![4, 8],
            input_size: 32,
        },
        instance_stages: vec![4, 8],
        dilation_rates: (2, 4),
        uniform_gates: false,
        localizer: LocalizerConfig {
            rel_threshold: 0.5,
            top_k: 2,
            patch_size: 16,
            min_component_area: 2,
        },
        pixel_mean: None,
        pixel_std: 0.25,
        fusion: true,
    }
}

fn entries() -> Vec<Entry> {
    let mut out: Vec<Entry> = Vec::new();
    let mut push = |name, tolerance, check: Check| out.push(Entry { name, tolerance, check });

    push(
        "conv2d",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 1);
            let mut worst: f64 = 0.0;
            for (geom, h) in [
                (ConvGeometry::new(1, 1, 1), 5),
                (ConvGeometry::new(1, 2, 2), 6),
                (ConvGeometry::new(2, 1, 1), 6),
            ] {
                let x = random(&mut rng, [2, 3, h, h + 1], 0.0);
                let k = random(&mut rng, [4, 3, 3, 3], 0.0);
                let b = random(&mut rng, [4, 1, 1, 1], 0.0);
                worst = worst.max(check_each(gc, &[x, k, b], |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], geom)?;
                    weighted_sum(t, y, 11)
                })?);
            }
            Ok(worst)
        }),
    );
    push(
        "relu",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 2), [2, 3, 4, 4], 1e-3);
            check_each(gc, &[x], |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, 12)
            })
        }),
    );
    push(
        "tanh",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 3), [2, 3, 4, 4], 0.0);
            check_each(gc, &[x], |t, v| {
                let y = t.tanh(v[0]);
                weighted_sum(t, y, 13)
            })
        }),
    );
    push(
        "spatial_softmax",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 4), [2, 1, 4, 5], 0.0);
            check_each(gc, &[x], |t, v| {
                let y = t.spatial_softmax(v[0])?;
                weighted_sum(t, y, 14)
            })
        }),
    );
    push(
        "channel_sum",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 5), [2, 4, 3, 3], 0.0);
            check_each(gc, &[x], |t, v| {
                let y = t.channel_sum(v[0]);
                weighted_sum(t, y, 15)
            })
        }),
    );
    push(
        "global_avg_pool",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 6), [2, 4, 3, 5], 0.0);
            check_each(gc, &[x], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                weighted_sum(t, y, 16)
            })
        }),
    );
    push(
        "linear",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 7);
            let x = random(&mut rng, [3, 5, 1, 1], 0.0);
            let w = random(&mut rng, [4, 5, 1, 1], 0.0);
            let b = random(&mut rng, [4, 1, 1, 1], 0.0);
            check_each(gc, &[x, w, b], |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, 17)
            })
        }),
    );
    push(
        "channel_correspondence",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 8);
            let x = random(&mut rng, [2, 5, 3, 4], 0.0);
            let s = random(&mut rng, [2, 1, 3, 4], 0.0);
            check_each(gc, &[x, s], |t, v| {
                let y = t.channel_correspondence(v[0], v[1])?;
                weighted_sum(t, y, 18)
            })
        }),
    );
    push(
        "gated_average",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 9);
            let x = random(&mut rng, [2, 5, 3, 4], 0.0);
            let g = random(&mut rng, [2, 5, 1, 1], 0.0);
            check_each(gc, &[x, g], |t, v| {
                let y = t.gated_average(v[0], v[1])?;
                weighted_sum(t, y, 19)
            })
        }),
    );
    push(
        "concat_channels",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 10);
            let a = random(&mut rng, [2, 2, 3, 3], 0.0);
            let b = random(&mut rng, [2, 3, 3, 3], 0.0);
            check_each(gc, &[a, b], |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                weighted_sum(t, y, 20)
            })
        }),
    );
    push(
        "resize_bilinear",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 11), [1, 2, 5, 7], 0.0);
            let up = check_each(gc, core::slice::from_ref(&x), |t, v| {
                let y = t.resize_bilinear(v[0], 9, 6)?;
                weighted_sum(t, y, 21)
            })?;
            let down = check_each(gc, &[x], |t, v| {
                let y = t.resize_bilinear(v[0], 3, 4)?;
                weighted_sum(t, y, 22)
            })?;
            Ok(up.max(down))
        }),
    );
    push(
        "cross_entropy",
        OP_TOLERANCE,
        Box::new(|gc| {
            let x = random(&mut rng::stream(1, 12), [3, 4, 1, 1], 0.0);
            check_each(gc, &[x], |t, v| t.cross_entropy(v[0], &[0, 3, 1]))
        }),
    );
    push(
        "gated_attention",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 13);
            let c = 6;
            let cfg = AttentionConfig::new(c);
            // Post-ReLU-like features keep every correspondence positive.
            let x = uniform(&mut rng, [1, c, 5, 5], 0.05, 1.0);
            let scale = libm::sqrt(1.0 / (9 * c) as f64);
            let w1 = random(&mut rng, [c, c, 3, 3], 0.0).map(|v| v * scale);
            let b1 = uniform(&mut rng, [c, 1, 1, 1], 0.0, 0.2);
            let w2 = random(&mut rng, [c, c, 3, 3], 0.0).map(|v| v * scale);
            // Mixed-sign block-2 biases switch some units off; with every unit
            // active a bias only shifts the map uniformly and has no gradient.
            let b2 = random(&mut rng, [c, 1, 1, 1], 0.05).map(|v| v * 0.3);
            check_each(gc, &[x, w1, b1, w2, b2], |t, v| {
                let blocks = attention::DilatedBlocks {
                    first: attention::ConvVars { weight: v[1], bias: v[2] },
                    second: attention::ConvVars { weight: v[3], bias: v[4] },
                };
                let nodes = attention::gated_attention(t, v[0], &blocks, &cfg)?;
                Ok(t.sum(nodes.attention))
            })
        }),
    );
    push(
        "backbone",
        OP_TOLERANCE,
        Box::new(|gc| {
            let mut rng = rng::stream(1, 14);
            let x = uniform(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
            let k1 = random(&mut rng, [4, 3, 3, 3], 0.0).map(|v| v * 0.5);
            let b1 = uniform(&mut rng, [4, 1, 1, 1], 0.0, 0.1);
            let k2 = random(&mut rng, [5, 4, 3, 3], 0.0).map(|v| v * 0.5);
            let b2 = uniform(&mut rng, [5, 1, 1, 1], 0.0, 0.1);
            check_each(gc, &[x, k1, b1, k2, b2], |t, v| {
                let stages = [
                    attention::ConvVars { weight: v[1], bias: v[2] },
                    attention::ConvVars { weight: v[3], bias: v[4] },
                ];
                let y = model::backbone_forward(t, v[0], &stages)?;
                weighted_sum(t, y, 24)
            })
        }),
    );
    for (name, prefix) in [
        ("model.global", "global."),
        ("model.attention", "attention."),
        ("model.instance", "instance."),
        ("model.heads", "head."),
    ] {
        push(
            name,
            COMPOSED_TOLERANCE,
            Box::new(move |gc| {
                let cfg = toy_model_config();
                let params = ModelParams::init(&cfg, 12)?;
                let mut rng = rng::stream(1, 15);
                let image = uniform(&mut rng, [1, 3, 32, 32], 0.0, 1.0);
                let mut worst: f64 = 0.0;
                for id in params.store().ids() {
                    if !params.store().name(id).starts_with(prefix) {
                        continue;
                    }
                    let err = gc.run(
                        |tape, v| {
                            let b = params.bind_with_override(tape, id, v);
                            let g = model::forward_graph(tape, &b, &params, &image, &cfg)?;
                            training::multi_task_loss_on_tape(tape, g.logits_global, g.logits_fusion, 1, 0.5)
                        },
                        params.store().value(id),
                    )?;
                    worst = worst.max(err);
                }
                Ok(worst)
            }),
        );
    }
    out
}

/// Names of all checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    entries().iter().map(|e| e.name).collect()
}

/// Runs every check whose name equals `filter` or starts with
/// `filter + "."`; all checks when `filter` is `None`.
pub fn run_suite(filter: Option<&str>, analytic_scale: f64) -> Result<Vec<CheckResult>> {
    let gc = GradCheck::new(EPSILON).with_analytic_scale(analytic_scale);
    let selected = entries().into_iter().filter(|e| match filter {
        None => true,
        Some(f) => e.name == f || (e.name.starts_with(f) && e.name[f.len()..].starts_with('.')),
    });
    selected
        .map(|e| {
            Ok(CheckResult {
                name: String::from(e.name),
                max_relative_error: (e.check)(&gc)?,
                tolerance: e.tolerance,
            })
        })
        .collect()
}

/// Gated attention on owned weights, for callers without a tape.
pub fn attention_reference_weights(channels: usize, seed: u64) -> DilatedWeights {
    let mut rng = rng::stream(seed, 0xA77E);
    let scale = libm::sqrt(1.0 / (9 * channels) as f64);
    let mut conv = || {
        (
            random(&mut rng, [channels, channels, 3, 3], 0.0).map(|v| v * scale),
            uniform(&mut rng, [channels, 1, 1, 1], -0.1, 0.1),
        )
    };
    DilatedWeights {
        first: conv(),
        second: conv(),
    }
}
