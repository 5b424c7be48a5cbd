//! Direct loop implementations kept deliberately naive, for use as
//! independent oracles against the vectorized ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor4;

/// Cross-correlation by explicit summation over every tap.
pub fn conv2d(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, dilation: usize, padding: usize) -> Tensor4 {
    let [n, c, h, wd] = x.dims();
    let [k, _, kh, kw] = w.dims();
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor4::zeros([n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy * dilation) as isize - padding as isize;
                                let ix = (ox * stride + dx * dilation) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(ni, ci, iy as usize, ix as usize) * w.at(ki, ci, dy, dx);
                                }
                            }
                        }
                    }
                    out.set(ni, ki, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Semantic map, gates and attention map of one gated-attention pass,
/// each as plain nested vectors: `s[n][i*w + j]`, `gates[n][k]`,
/// `omega[n][i*w + j]`.
pub struct Attention {
    pub s: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
}

pub fn gated_attention(x: &Tensor4, blocks: [(&Tensor4, &Tensor4); 2], rates: (usize, usize)) -> Attention {
    let relu = |t: Tensor4| t.map(|v| if v > 0.0 { v } else { 0.0 });
    let h1 = relu(conv2d(x, blocks[0].0, blocks[0].1, 1, rates.0, rates.0));
    let h2 = relu(conv2d(&h1, blocks[1].0, blocks[1].1, 1, rates.1, rates.1));
    let [n, c, h, w] = x.dims();
    let mut out = Attention {
        s: vec![],
        gates: vec![],
        omega: vec![],
    };
    for ni in 0..n {
        let mut m = vec![0.0; h * w];
        for (p, mp) in m.iter_mut().enumerate() {
            for k in 0..h2.c() {
                *mp += h2.at(ni, k, p / w, p % w);
            }
        }
        let peak = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = m.iter().map(|&v| libm::exp(v - peak)).collect();
        let z: f64 = e.iter().sum();
        let s: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut gates = vec![0.0; c];
        for (k, g) in gates.iter_mut().enumerate() {
            let mut corr = 0.0;
            for p in 0..h * w {
                corr += x.at(ni, k, p / w, p % w) * s[p];
            }
            let t = libm::tanh(corr);
            *g = if t > 0.0 { t } else { 0.0 };
        }
        let mut omega = vec![0.0; h * w];
        for (p, o) in omega.iter_mut().enumerate() {
            for (k, g) in gates.iter().enumerate() {
                *o += g * x.at(ni, k, p / w, p % w);
            }
            *o /= c as f64;
        }
        out.s.push(s);
        out.gates.push(gates);
        out.omega.push(omega);
    }
    out
}
