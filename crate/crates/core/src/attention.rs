//! Gated attention over a feature map.
//!
//! Two dilated 3×3 blocks summarise the features into an aggregated map `M`
//! (channel sum of the second block's output), a spatial softmax turns `M`
//! into the semantic map `S`, and each input channel `X_k` receives a gate
//! `ReLU(tanh(⟨X_k, S⟩))`. The attention map is the gated channel average
//! `Ω = (1/C) Σ_k gate_k · X_k`.
//!
//! Gates come from the raw input channels, not from the dilated-block
//! output. The correspondence step yields `C` scalars per image; no `C × C`
//! channel affinity is ever formed.

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tape, Tensor4, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub dilation_rates: (usize, usize),
    /// Channel count carried through the dilated blocks; equals the input
    /// feature channel count.
    pub hidden_channels: usize,
    /// Replace the learned gates with ones, making `Ω` the plain channel
    /// mean (the channel-average ablation).
    pub uniform_gates: bool,
}

impl AttentionConfig {
    pub fn new(hidden_channels: usize) -> Self {
        Self {
            dilation_rates: (2, 4),
            hidden_channels,
            uniform_gates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.0 == 0 || self.dilation_rates.1 == 0 {
            return Err(Error::usage("attention: dilation rates must be positive"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::usage("attention: hidden_channels must be positive"));
        }
        Ok(())
    }
}

/// Kernel and bias handles of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// The two dilated blocks.
#[derive(Clone, Copy, Debug)]
pub struct DilatedBlocks {
    pub first: ConvVars,
    pub second: ConvVars,
}

/// Tape handles of every stage of one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub aggregated: Var,
    pub semantic: Var,
    pub correspondence: Var,
    pub gates: Var,
    pub attention: Var,
}

impl AttentionNodes {
    pub fn output(&self, tape: &Tape) -> AttentionOutput {
        AttentionOutput {
            semantic_map: tape.value(self.semantic).clone(),
            gates: tape.value(self.gates).clone(),
            attention_map: tape.value(self.attention).clone(),
            aggregated_map: tape.value(self.aggregated).clone(),
        }
    }
}

/// Materialised attention values for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `S`, `(n, 1, h, w)`, each item sums to 1.
    pub semantic_map: Tensor4,
    /// `(n, C, 1, 1)`, every entry in `[0, 1)`.
    pub gates: Tensor4,
    /// `Ω`, `(n, 1, h, w)`.
    pub attention_map: Tensor4,
    /// `M`, `(n, 1, h, w)`.
    pub aggregated_map: Tensor4,
}

impl AttentionOutput {
    /// Gate vector of batch item `n`.
    pub fn gate_vector(&self, n: usize) -> &[f64] {
        self.gates.item(n)
    }
}

/// Dilated 3×3 block that keeps the spatial size.
fn dilated_block(tape: &mut Tape, x: Var, conv: ConvVars, dilation: usize) -> Result<Var> {
    let y = tape.conv2d(x, conv.weight, conv.bias, ConvGeometry::new(1, dilation, dilation))?;
    Ok(tape.relu(y))
}

/// Returns `(S, M)`.
pub fn semantic_map(tape: &mut Tape, x: Var, blocks: &DilatedBlocks, config: &AttentionConfig) -> Result<(Var, Var)> {
    let h1 = dilated_block(tape, x, blocks.first, config.dilation_rates.0)?;
    let h2 = dilated_block(tape, h1, blocks.second, config.dilation_rates.1)?;
    let m = tape.channel_sum(h2);
    let s = tape.spatial_softmax(m)?;
    Ok((s, m))
}

/// Returns `(correspondence, gates)` with `gate = ReLU(tanh(⟨X_k, S⟩))`.
pub fn channel_gates(tape: &mut Tape, x: Var, s: Var) -> Result<(Var, Var)> {
    let corr = tape.channel_correspondence(x, s)?;
    let squashed = tape.tanh(corr);
    Ok((corr, tape.relu(squashed)))
}

/// `Ω = (1/C) Σ_k gate_k · X_k`.
pub fn attention_map(tape: &mut Tape, x: Var, gates: Var) -> Result<Var> {
    tape.gated_average(x, gates)
}

pub fn gated_attention(tape: &mut Tape, x: Var, blocks: &DilatedBlocks, config: &AttentionConfig) -> Result<AttentionNodes> {
    let channels = tape.value(x).c();
    if channels != config.hidden_channels {
        return Err(Error::shape("gated_attention", "channel", config.hidden_channels, channels));
    }
    let (semantic, aggregated) = semantic_map(tape, x, blocks, config)?;
    let (correspondence, mut gates) = channel_gates(tape, x, semantic)?;
    if config.uniform_gates {
        let dims = tape.value(gates).dims();
        gates = tape.constant(Tensor4::full(dims, 1.0));
    }
    let attention = attention_map(tape, x, gates)?;
    Ok(AttentionNodes {
        aggregated,
        semantic,
        correspondence,
        gates,
        attention,
    })
}

/// Owned dilated-block weights, for evaluating attention outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedWeights {
    pub first: (Tensor4, Tensor4),
    pub second: (Tensor4, Tensor4),
}

impl DilatedWeights {
    pub fn zeros(channels: usize) -> Self {
        let k = || Tensor4::zeros([channels, channels, 3, 3]);
        let b = || Tensor4::zeros([channels, 1, 1, 1]);
        Self {
            first: (k(), b()),
            second: (k(), b()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DilatedBlocks {
        DilatedBlocks {
            first: ConvVars {
                weight: tape.param(self.first.0.clone()),
                bias: tape.param(self.first.1.clone()),
            },
            second: ConvVars {
                weight: tape.param(self.second.0.clone()),
                bias: tape.param(self.second.1.clone()),
            },
        }
    }
}

/// Forward-only convenience: attention for a feature batch.
pub fn evaluate(features: &Tensor4, weights: &DilatedWeights, config: &AttentionConfig) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let blocks = weights.bind(&mut tape);
    let nodes = gated_attention(&mut tape, x, &blocks, config)?;
    Ok(nodes.output(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(c: usize) -> AttentionConfig {
        AttentionConfig::new(c)
    }

    #[test]
    fn uniform_gates_give_channel_mean() {
        let x = Tensor4::from_fn([1, 3, 2, 2], |_, c, h, w| c as f64 - (h + w) as f64 * 0.5);
        let config = AttentionConfig {
            uniform_gates: true,
            ..cfg(3)
        };
        let out = evaluate(&x, &DilatedWeights::zeros(3), &config).unwrap();
        assert!(out.gates.data().iter().all(|&g| g == 1.0));
        for h in 0..2 {
            for w in 0..2 {
                let mean = (0..3).map(|c| x.at(0, c, h, w)).sum::<f64>() / 3.0;
                assert_abs_diff_eq!(out.attention_map.at(0, 0, h, w), mean, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn zero_blocks_give_uniform_semantic_map() {
        let x = Tensor4::from_fn([1, 3, 4, 5], |_, c, h, w| (c + h * w) as f64 * 0.1);
        let out = evaluate(&x, &DilatedWeights::zeros(3), &cfg(3)).unwrap();
        for &v in out.semantic_map.data() {
            assert_abs_diff_eq!(v, 1.0 / 20.0, epsilon = 1e-15);
        }
        assert!(out.aggregated_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_gate_example() {
        // C = 2, 1×1 spatial: gates = (tanh 2, 0), Ω = tanh(2)·2 / 2.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::new([1, 2, 1, 1], vec![2.0, -3.0]).unwrap());
        let s = tape.constant(Tensor4::scalar(1.0));
        let (_, gates) = channel_gates(&mut tape, x, s).unwrap();
        let g = tape.value(gates).data().to_vec();
        assert_abs_diff_eq!(g[0], 0.9640275800758169, epsilon = 1e-10);
        assert_eq!(g[1], 0.0);
        let omega = attention_map(&mut tape, x, gates).unwrap();
        assert_abs_diff_eq!(tape.value(omega).data()[0], 0.9640275800758169, epsilon = 1e-10);
    }

    #[test]
    fn zero_features_give_zero_gates_and_map() {
        let x = Tensor4::zeros([2, 4, 3, 3]);
        let mut w = DilatedWeights::zeros(4);
        w.first.0.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 * 0.01);
        let out = evaluate(&x, &w, &cfg(4)).unwrap();
        assert!(out.gates.data().iter().all(|&g| g == 0.0));
        assert!(out.attention_map.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unit_gates_reduce_to_channel_mean() {
        let x = Tensor4::from_fn([1, 3, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ones = tape.constant(Tensor4::full([1, 3, 1, 1], 1.0));
        let omega = attention_map(&mut tape, xv, ones).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                let mean = (0..3).map(|c| x.at(0, c, h, w)).sum::<f64>() / 3.0;
                assert_abs_diff_eq!(tape.value(omega).at(0, 0, h, w), mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor4::zeros([1, 3, 4, 4]);
        let err = evaluate(&x, &DilatedWeights::zeros(3), &cfg(5)).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "channel", .. }));
    }

    #[test]
    fn zero_dilation_rejected() {
        let mut c = cfg(2);
        c.dilation_rates = (0, 4);
        assert!(c.validate().is_err());
    }
}
