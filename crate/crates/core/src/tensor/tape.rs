use alloc::vec::Vec;

use super::ops::{self, ConvGeometry};
use super::Tensor4;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    SpatialSoftmax(Var),
    ChannelSum(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Correspondence {
        features: Var,
        map: Var,
    },
    GatedAverage {
        features: Var,
        gates: Var,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Resize(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Scale(Var, f64),
    Add(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Records forward applications in order; [`Tape::backward`] replays them
/// in reverse.
///
/// Leaves are either parameters (`param`, gradient tracked) or constants
/// (`constant`, no gradient). A node tracks gradient iff one of its inputs
/// does, so constant-only subgraphs cost nothing in backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (out, cols) = ops::conv2d_with_cols(self.value(input), self.value(kernel), self.value(bias), geom)?;
        let rg = self.tracks(input) || self.tracks(kernel) || self.tracks(bias);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.tracks(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = ops::tanh(self.value(x));
        let rg = self.tracks(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn spatial_softmax(&mut self, m: Var) -> Result<Var> {
        let out = ops::spatial_softmax(self.value(m))?;
        let rg = self.tracks(m);
        Ok(self.push(out, Op::SpatialSoftmax(m), rg))
    }

    pub fn channel_sum(&mut self, x: Var) -> Var {
        let out = ops::channel_sum(self.value(x));
        let rg = self.tracks(x);
        self.push(out, Op::ChannelSum(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let rg = self.tracks(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(weight), self.value(bias))?;
        let rg = self.tracks(x) || self.tracks(weight) || self.tracks(bias);
        Ok(self.push(out, Op::Linear { x, weight, bias }, rg))
    }

    pub fn channel_correspondence(&mut self, features: Var, map: Var) -> Result<Var> {
        let out = ops::channel_correspondence(self.value(features), self.value(map))?;
        let rg = self.tracks(features) || self.tracks(map);
        Ok(self.push(out, Op::Correspondence { features, map }, rg))
    }

    pub fn gated_average(&mut self, features: Var, gates: Var) -> Result<Var> {
        let out = ops::gated_average(self.value(features), self.value(gates))?;
        let rg = self.tracks(features) || self.tracks(gates);
        Ok(self.push(out, Op::GatedAverage { features, gates }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor4> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(dims)?;
        let rg = self.tracks(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.tracks(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    /// Mean cross entropy over the batch rows of `(n, k, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = self.value(logits);
        let (n, k) = (value.n(), value.item_len());
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", "batch", n, labels.len()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let l = value.item(row);
            total += ops::cross_entropy(l, label)?;
            probs.extend(ops::softmax(l));
        }
        let rg = self.tracks(logits);
        Ok(self.push(
            Tensor4::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.tracks(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape("add", "data", va.len(), vb.len()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        let rg = self.tracks(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse-mode sweep from the scalar `loss`, seeded with `seed`.
    ///
    /// Entries are visited in exact reverse recording order and gradients
    /// from multiple consumers are summed. A `scale` by exactly zero stops
    /// propagation along that path.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward: loss is not recorded on this tape (run forward first)"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::full(self.value(loss).dims(), seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
        if !self.tracks(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let r = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *geom,
                    cols,
                    g,
                    self.tracks(*input),
                )?;
                if let Some(dx) = r.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, r.kernel);
                self.accumulate(grads, *bias, r.bias);
            }
            Op::Relu(x) => {
                let dx = ops::relu_backward(self.value(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = ops::tanh_backward(&node.value, g);
                self.accumulate(grads, *x, dx);
            }
            Op::SpatialSoftmax(m) => {
                let dm = ops::spatial_softmax_backward(&node.value, g);
                self.accumulate(grads, *m, dm);
            }
            Op::ChannelSum(x) => {
                let dx = ops::channel_sum_backward(self.value(*x).dims(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let dx = ops::global_avg_pool_backward(self.value(*x).dims(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, weight, bias } => {
                let r = ops::linear_backward(
                    self.value(*x),
                    self.value(*weight),
                    self.value(*bias),
                    g,
                    self.tracks(*x),
                );
                if let Some(dx) = r.x {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *weight, r.weight);
                self.accumulate(grads, *bias, r.bias);
            }
            Op::Correspondence { features, map } => {
                let (dx, ds) = ops::channel_correspondence_backward(self.value(*features), self.value(*map), g);
                self.accumulate(grads, *features, dx);
                self.accumulate(grads, *map, ds);
            }
            Op::GatedAverage { features, gates } => {
                let (dx, dg) = ops::gated_average_backward(self.value(*features), self.value(*gates), g);
                self.accumulate(grads, *features, dx);
                self.accumulate(grads, *gates, dg);
            }
            Op::Concat(parts) => {
                let dims: Vec<[usize; 4]> = parts.iter().map(|&p| self.value(p).dims()).collect();
                for (&p, dp) in parts.iter().zip(ops::concat_channels_backward(&dims, g)) {
                    self.accumulate(grads, p, dp);
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.value(*x).dims())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Resize(x) => {
                let dx = ops::resize_bilinear_backward(self.value(*x).dims(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let dims = self.value(*logits).dims();
                let k = dims[1] * dims[2] * dims[3];
                let scale = g.data()[0] / labels.len() as f64;
                let mut dl = Tensor4::new(dims, probs.clone())?;
                for (row, &label) in labels.iter().enumerate() {
                    dl.data_mut()[row * k + label] -= 1.0;
                }
                for v in dl.data_mut() {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Scale(x, factor) => {
                if *factor != 0.0 {
                    let f = *factor;
                    self.accumulate(grads, *x, g.map(|v| v * f));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor4::full(self.value(*x).dims(), s));
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// `None` when no gradient reached `v`, i.e. it is identically zero.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Central-difference gradient verification.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1 deliberately breaks the check (negative control).
    pub analytic_scale: f64,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            analytic_scale: 1.0,
        }
    }

    pub fn with_analytic_scale(mut self, scale: f64) -> Self {
        self.analytic_scale = scale;
        self
    }

    /// Max over coordinates of `|a − n| / max(|a|, |n|, 1e-8)` between the
    /// tape gradient `a` of `f` at `x` and the central difference `n`.
    pub fn run<F>(&self, f: F, x: &Tensor4) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        if !(self.epsilon > 0.0) {
            return Err(Error::usage("grad_check: epsilon must be positive"));
        }
        let eval = |point: Tensor4| -> Result<f64> {
            let mut tape = Tape::new();
            let v = tape.param(point);
            let out = f(&mut tape, v)?;
            scalar_of(&tape, out)
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&mut tape, xv)?;
        scalar_of(&tape, out)?;
        let grads = tape.backward(out, 1.0)?;
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor4::zeros(x.dims()));

        let mut worst: f64 = 0.0;
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + self.epsilon;
            let up = eval(probe.clone())?;
            probe.data_mut()[i] = orig - self.epsilon;
            let down = eval(probe.clone())?;
            probe.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * self.epsilon);
            let a = analytic.data()[i] * self.analytic_scale;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        Ok(worst)
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.len() != 1 {
        return Err(Error::usage("grad_check: function output must be a scalar"));
    }
    Ok(value.data()[0])
}

/// [`GradCheck::run`] with default settings.
pub fn grad_check<F>(f: F, x: &Tensor4, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradCheck::new(epsilon).run(f, x)
}
